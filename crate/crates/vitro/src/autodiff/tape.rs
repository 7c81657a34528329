use std::f64::consts::PI;

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Define-by-run gradient tape. Every op records a backward closure; the
/// tape is drained (cleared) by [`Tape::backward`], so a fresh graph is
/// built each training step while leaf parameters persist across tapes.
#[derive(Default)]
pub struct Tape {
    ops: Vec<Box<dyn FnOnce()>>,
}

fn mm(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * p];
    for i in 0..m {
        for q in 0..k {
            let aiq = a[i * k + q];
            let row = &b[q * p..(q + 1) * p];
            let out = &mut c[i * p..(i + 1) * p];
            for (cj, bj) in out.iter_mut().zip(row) {
                *cj += aiq * bj;
            }
        }
    }
    c
}

/// x[m×n] · y[r×n]ᵀ -> [m×r]
fn mm_nt(x: &[f64], y: &[f64], m: usize, n: usize, r: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * r];
    for i in 0..m {
        let xrow = &x[i * n..(i + 1) * n];
        for j in 0..r {
            let yrow = &y[j * n..(j + 1) * n];
            let mut s = 0.0;
            for q in 0..n {
                s += xrow[q] * yrow[q];
            }
            c[i * r + j] = s;
        }
    }
    c
}

/// x[m×n]ᵀ · y[m×r] -> [n×r]
fn mm_tn(x: &[f64], y: &[f64], m: usize, n: usize, r: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * r];
    for i in 0..m {
        let xrow = &x[i * n..(i + 1) * n];
        let yrow = &y[i * r..(i + 1) * r];
        for q in 0..n {
            let xq = xrow[q];
            let out = &mut c[q * r..(q + 1) * r];
            for (cj, yj) in out.iter_mut().zip(yrow) {
                *cj += xq * yj;
            }
        }
    }
    c
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn op_count(&self) -> usize {
        self.ops.len()
    }

    fn record(&mut self, out: &Tensor, inputs: &[&Tensor], f: impl FnOnce() + 'static) {
        if inputs.iter().any(|t| t.needs_grad()) {
            out.mark_needs_grad();
            self.ops.push(Box::new(f));
        }
    }

    /// Runs the reverse pass from a scalar loss, accumulating gradients into
    /// every reachable tensor that needs them. The tape is cleared afterwards.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        loss.seed_grad(1.0);
        for op in self.ops.drain(..).rev() {
            op();
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(a);
        let (k2, p) = dims2(b);
        if k != k2 {
            return Err(Error::DimMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let out = Tensor::from_vec(vec![m, p], mm(&a.data(), &b.data(), m, k, p))?;
        let (ac, bc, oc) = (a.clone(), b.clone(), out.clone());
        self.record(&out, &[a, b], move || {
            let Some(g) = oc.grad() else { return };
            if ac.needs_grad() {
                ac.accumulate_grad(&mm_nt(&g, &bc.data(), m, p, k));
            }
            if bc.needs_grad() {
                bc.accumulate_grad(&mm_tn(&ac.data(), &g, m, k, p));
            }
        });
        Ok(out)
    }

    pub fn transpose(&mut self, x: &Tensor) -> Result<Tensor> {
        let (m, n) = dims2(x);
        let xd = x.data();
        let mut t = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                t[j * m + i] = xd[i * n + j];
            }
        }
        drop(xd);
        let out = Tensor::from_vec(vec![n, m], t)?;
        let (xc, oc) = (x.clone(), out.clone());
        self.record(&out, &[x], move || {
            let Some(g) = oc.grad() else { return };
            let mut gt = vec![0.0; m * n];
            for j in 0..n {
                for i in 0..m {
                    gt[i * n + j] = g[j * m + i];
                }
            }
            xc.accumulate_grad(&gt);
        });
        Ok(out)
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if dims2(a) != dims2(b) {
            return Err(Error::DimMismatch {
                op: "add",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(a.shape().to_vec(), data)?;
        let (ac, bc, oc) = (a.clone(), b.clone(), out.clone());
        self.record(&out, &[a, b], move || {
            let Some(g) = oc.grad() else { return };
            if ac.needs_grad() {
                ac.accumulate_grad(&g);
            }
            if bc.needs_grad() {
                bc.accumulate_grad(&g);
            }
        });
        Ok(out)
    }

    /// Broadcast add of a single row: out[i][j] = a[i][j] + row[j].
    pub fn add_row(&mut self, a: &Tensor, row: &Tensor) -> Result<Tensor> {
        let (m, n) = dims2(a);
        if row.numel() != n || row.rows() != 1 {
            return Err(Error::DimMismatch {
                op: "add_row",
                lhs: a.shape().to_vec(),
                rhs: row.shape().to_vec(),
            });
        }
        let rd = row.data();
        let data: Vec<f64> = a
            .data()
            .iter()
            .enumerate()
            .map(|(idx, x)| x + rd[idx % n])
            .collect();
        drop(rd);
        let out = Tensor::from_vec(a.shape().to_vec(), data)?;
        let (ac, rc, oc) = (a.clone(), row.clone(), out.clone());
        self.record(&out, &[a, row], move || {
            let Some(g) = oc.grad() else { return };
            if ac.needs_grad() {
                ac.accumulate_grad(&g);
            }
            if rc.needs_grad() {
                let mut dr = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        dr[j] += g[i * n + j];
                    }
                }
                rc.accumulate_grad(&dr);
            }
        });
        Ok(out)
    }

    /// Broadcast add of a single column: out[i][j] = a[i][j] + col[i].
    pub fn add_col(&mut self, a: &Tensor, col: &Tensor) -> Result<Tensor> {
        let (m, n) = dims2(a);
        if col.numel() != m {
            return Err(Error::DimMismatch {
                op: "add_col",
                lhs: a.shape().to_vec(),
                rhs: col.shape().to_vec(),
            });
        }
        let cd = col.data();
        let data: Vec<f64> = a
            .data()
            .iter()
            .enumerate()
            .map(|(idx, x)| x + cd[idx / n])
            .collect();
        drop(cd);
        let out = Tensor::from_vec(a.shape().to_vec(), data)?;
        let (ac, cc, oc) = (a.clone(), col.clone(), out.clone());
        self.record(&out, &[a, col], move || {
            let Some(g) = oc.grad() else { return };
            if ac.needs_grad() {
                ac.accumulate_grad(&g);
            }
            if cc.needs_grad() {
                let mut dc = vec![0.0; m];
                for i in 0..m {
                    for j in 0..n {
                        dc[i] += g[i * n + j];
                    }
                }
                cc.accumulate_grad(&dc);
            }
        });
        Ok(out)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if dims2(a) != dims2(b) {
            return Err(Error::DimMismatch {
                op: "mul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(a.shape().to_vec(), data)?;
        let (ac, bc, oc) = (a.clone(), b.clone(), out.clone());
        self.record(&out, &[a, b], move || {
            let Some(g) = oc.grad() else { return };
            if ac.needs_grad() {
                let da: Vec<f64> = g.iter().zip(bc.data().iter()).map(|(gi, bi)| gi * bi).collect();
                ac.accumulate_grad(&da);
            }
            if bc.needs_grad() {
                let db: Vec<f64> = g.iter().zip(ac.data().iter()).map(|(gi, ai)| gi * ai).collect();
                bc.accumulate_grad(&db);
            }
        });
        Ok(out)
    }

    pub fn scale(&mut self, x: &Tensor, factor: f64) -> Result<Tensor> {
        let data: Vec<f64> = x.data().iter().map(|v| v * factor).collect();
        let out = Tensor::from_vec(x.shape().to_vec(), data)?;
        let (xc, oc) = (x.clone(), out.clone());
        self.record(&out, &[x], move || {
            let Some(g) = oc.grad() else { return };
            let dx: Vec<f64> = g.iter().map(|gi| gi * factor).collect();
            xc.accumulate_grad(&dx);
        });
        Ok(out)
    }

    /// Tanh-approximation GELU, the backbone's MLP nonlinearity.
    pub fn gelu(&mut self, x: &Tensor) -> Result<Tensor> {
        let c = (2.0 / PI).sqrt();
        let data: Vec<f64> = x
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh()))
            .collect();
        let out = Tensor::from_vec(x.shape().to_vec(), data)?;
        let (xc, oc) = (x.clone(), out.clone());
        self.record(&out, &[x], move || {
            let Some(g) = oc.grad() else { return };
            let xd = xc.data();
            let dx: Vec<f64> = g
                .iter()
                .zip(xd.iter())
                .map(|(gi, &v)| {
                    let u = c * (v + 0.044715 * v * v * v);
                    let t = u.tanh();
                    let sech2 = 1.0 - t * t;
                    let du = c * (1.0 + 3.0 * 0.044715 * v * v);
                    gi * (0.5 * (1.0 + t) + 0.5 * v * sech2 * du)
                })
                .collect();
            drop(xd);
            xc.accumulate_grad(&dx);
        });
        Ok(out)
    }

    /// Row-wise softmax, stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, x: &Tensor) -> Result<Tensor> {
        let (m, n) = dims2(x);
        let xd = x.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                data[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                data[i * n + j] /= sum;
            }
        }
        drop(xd);
        let out = Tensor::from_vec(x.shape().to_vec(), data)?;
        let (xc, oc) = (x.clone(), out.clone());
        self.record(&out, &[x], move || {
            let Some(g) = oc.grad() else { return };
            let y = oc.data();
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                let mut dot = 0.0;
                for j in 0..n {
                    dot += g[i * n + j] * y[i * n + j];
                }
                for j in 0..n {
                    dx[i * n + j] = y[i * n + j] * (g[i * n + j] - dot);
                }
            }
            drop(y);
            xc.accumulate_grad(&dx);
        });
        Ok(out)
    }

    /// Per-row layer normalization over the last dimension, then affine.
    /// Epsilon sits inside the square root.
    pub fn layer_norm(&mut self, x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (m, d) = dims2(x);
        if gain.numel() != d || bias.numel() != d {
            return Err(Error::DimMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let xd = x.data();
        let gd = gain.data();
        let bd = bias.data();
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut data = vec![0.0; m * d];
        for i in 0..m {
            let row = &xd[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[i * d + j] = h;
                data[i * d + j] = h * gd[j] + bd[j];
            }
        }
        drop(xd);
        drop(gd);
        drop(bd);
        let out = Tensor::from_vec(x.shape().to_vec(), data)?;
        let (xc, gc, bc, oc) = (x.clone(), gain.clone(), bias.clone(), out.clone());
        self.record(&out, &[x, gain, bias], move || {
            let Some(g) = oc.grad() else { return };
            if gc.needs_grad() {
                let mut dg = vec![0.0; d];
                for i in 0..m {
                    for j in 0..d {
                        dg[j] += g[i * d + j] * xhat[i * d + j];
                    }
                }
                gc.accumulate_grad(&dg);
            }
            if bc.needs_grad() {
                let mut db = vec![0.0; d];
                for i in 0..m {
                    for j in 0..d {
                        db[j] += g[i * d + j];
                    }
                }
                bc.accumulate_grad(&db);
            }
            if xc.needs_grad() {
                let gaind = gc.data();
                let mut dx = vec![0.0; m * d];
                for i in 0..m {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = g[i * d + j] * gaind[j];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[i * d + j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = g[i * d + j] * gaind[j];
                        dx[i * d + j] =
                            inv_std[i] * (dh - mean_dh - xhat[i * d + j] * mean_dh_h);
                    }
                }
                drop(gaind);
                xc.accumulate_grad(&dx);
            }
        });
        Ok(out)
    }

    /// Vertical concatenation; every part must have the same column count.
    /// 1-D tensors count as single rows.
    pub fn concat_rows(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero tensors".into()));
        }
        let n = parts[0].cols();
        let mut total_rows = 0;
        for p in parts {
            if p.cols() != n {
                return Err(Error::DimMismatch {
                    op: "concat_rows",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            total_rows += p.rows();
        }
        let mut data = Vec::with_capacity(total_rows * n);
        for p in parts {
            data.extend_from_slice(&p.data());
        }
        let out = Tensor::from_vec(vec![total_rows, n], data)?;
        let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let oc = out.clone();
        self.record(&out, parts, move || {
            let Some(g) = oc.grad() else { return };
            let mut offset = 0;
            for p in &owned {
                let len = p.numel();
                if p.needs_grad() {
                    p.accumulate_grad(&g[offset..offset + len]);
                }
                offset += len;
            }
        });
        Ok(out)
    }

    /// Horizontal concatenation; every part must have the same row count.
    pub fn concat_cols(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero tensors".into()));
        }
        let m = parts[0].rows();
        let mut total_cols = 0;
        for p in parts {
            if p.rows() != m {
                return Err(Error::DimMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            total_cols += p.cols();
        }
        let mut data = vec![0.0; m * total_cols];
        let mut col_offset = 0;
        for p in parts {
            let pc = p.cols();
            let pd = p.data();
            for i in 0..m {
                data[i * total_cols + col_offset..i * total_cols + col_offset + pc]
                    .copy_from_slice(&pd[i * pc..(i + 1) * pc]);
            }
            col_offset += pc;
        }
        let out = Tensor::from_vec(vec![m, total_cols], data)?;
        let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let oc = out.clone();
        self.record(&out, parts, move || {
            let Some(g) = oc.grad() else { return };
            let mut col_offset = 0;
            for p in &owned {
                let pc = p.cols();
                if p.needs_grad() {
                    let mut dp = vec![0.0; m * pc];
                    for i in 0..m {
                        dp[i * pc..(i + 1) * pc].copy_from_slice(
                            &g[i * total_cols + col_offset..i * total_cols + col_offset + pc],
                        );
                    }
                    p.accumulate_grad(&dp);
                }
                col_offset += pc;
            }
        });
        Ok(out)
    }

    pub fn slice_rows(&mut self, x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        let (m, n) = dims2(x);
        if start >= end || end > m {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{end} out of range for {m} rows"
            )));
        }
        let data = x.data()[start * n..end * n].to_vec();
        let out = Tensor::from_vec(vec![end - start, n], data)?;
        let (xc, oc) = (x.clone(), out.clone());
        self.record(&out, &[x], move || {
            let Some(g) = oc.grad() else { return };
            let mut dx = vec![0.0; m * n];
            dx[start * n..end * n].copy_from_slice(&g);
            xc.accumulate_grad(&dx);
        });
        Ok(out)
    }

    /// Embedding-style row gather. Backward scatter-adds, so a row selected
    /// several times accumulates every contribution.
    pub fn lookup_rows(&mut self, table: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let (m, n) = dims2(table);
        for &idx in indices {
            if idx >= m {
                return Err(Error::InvalidInput(format!(
                    "row index {idx} out of range for table with {m} rows"
                )));
            }
        }
        let td = table.data();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &idx in indices {
            data.extend_from_slice(&td[idx * n..(idx + 1) * n]);
        }
        drop(td);
        let out = Tensor::from_vec(vec![indices.len(), n], data)?;
        let (tc, oc) = (table.clone(), out.clone());
        let idx_owned = indices.to_vec();
        self.record(&out, &[table], move || {
            let Some(g) = oc.grad() else { return };
            let mut dt = vec![0.0; m * n];
            for (pos, &idx) in idx_owned.iter().enumerate() {
                for j in 0..n {
                    dt[idx * n + j] += g[pos * n + j];
                }
            }
            tc.accumulate_grad(&dt);
        });
        Ok(out)
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean_all(&mut self, x: &Tensor) -> Result<Tensor> {
        let n = x.numel();
        if n == 0 {
            return Err(Error::Contract("mean_all of an empty tensor".into()));
        }
        let mean = x.data().iter().sum::<f64>() / n as f64;
        let out = Tensor::scalar(mean);
        let (xc, oc) = (x.clone(), out.clone());
        self.record(&out, &[x], move || {
            let Some(g) = oc.grad() else { return };
            let dx = vec![g[0] / n as f64; n];
            xc.accumulate_grad(&dx);
        });
        Ok(out)
    }

    /// Mean squared error between two equally shaped tensors.
    pub fn mse_loss(&mut self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        if pred.numel() != target.numel() || dims2(pred) != dims2(target) {
            return Err(Error::DimMismatch {
                op: "mse_loss",
                lhs: pred.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let n = pred.numel();
        let loss = pred
            .data()
            .iter()
            .zip(target.data().iter())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n as f64;
        let out = Tensor::scalar(loss);
        let (pc, tc, oc) = (pred.clone(), target.clone(), out.clone());
        self.record(&out, &[pred, target], move || {
            let Some(g) = oc.grad() else { return };
            let scale = 2.0 * g[0] / n as f64;
            let pd = pc.data();
            let td = tc.data();
            let diff: Vec<f64> = pd.iter().zip(td.iter()).map(|(p, t)| scale * (p - t)).collect();
            drop(pd);
            drop(td);
            if pc.needs_grad() {
                pc.accumulate_grad(&diff);
            }
            if tc.needs_grad() {
                let neg: Vec<f64> = diff.iter().map(|v| -v).collect();
                tc.accumulate_grad(&neg);
            }
        });
        Ok(out)
    }

    /// Row-major reinterpretation; element order is unchanged.
    pub fn reshape(&mut self, x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(Error::DimMismatch {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: shape,
            });
        }
        let out = Tensor::from_vec(shape, x.to_vec())?;
        let (xc, oc) = (x.clone(), out.clone());
        self.record(&out, &[x], move || {
            let Some(g) = oc.grad() else { return };
            xc.accumulate_grad(&g);
        });
        Ok(out)
    }
}
