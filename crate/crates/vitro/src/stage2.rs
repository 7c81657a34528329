//! Stage 2: forecasting with the learned vocabulary. Two modes share the
//! frozen backbone, the frozen vocabulary (V, s), and warm-started stage-1
//! plumbing: similarity-based selection over a learned core lexicon, and
//! multi-head cross-attention reprogramming of the patch embeddings.

use std::str::FromStr;

use crate::autodiff::{Adam, AdamConfig, Tape, Tensor};
use crate::backbone::FrozenBackbone;
use crate::checkpoint::CheckpointContainer;
use crate::data::WindowInstance;
use crate::error::{Error, Result};
use crate::preprocess::{
    embed_patches, make_patches, patches_to_tensor, revin_denormalize, revin_normalize,
    stats_token, PatchConfig, RevInState,
};
use crate::rng::{self, Stream};
use crate::stage1::{head_g, run_epochs, Stage1Params, TrainRunConfig};

const INIT_STD: f64 = 0.02;
const COSINE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage2Mode {
    Sim,
    Attn,
}

impl Stage2Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage2Mode::Sim => "sim",
            Stage2Mode::Attn => "attn",
        }
    }
}

impl FromStr for Stage2Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Stage2Mode> {
        match s {
            "sim" => Ok(Stage2Mode::Sim),
            "attn" => Ok(Stage2Mode::Attn),
            other => Err(Error::Config(format!("mode must be 'sim' or 'attn', got '{other}'"))),
        }
    }
}

/// Default core lexicon size: max(8, n/16), clamped below n.
pub fn resolve_core_size(vocab_size: usize, requested: usize) -> usize {
    let auto = if requested > 0 { requested } else { (vocab_size / 16).max(8) };
    auto.min(vocab_size.saturating_sub(1))
}

/// Learnable linear compression of the vocabulary: C = W_v·V + b_v with
/// C ∈ R^{n'×d}, 1 <= k < n' < n.
pub struct CoreLexicon {
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub core_size: usize,
    pub top_k: usize,
}

impl CoreLexicon {
    pub fn init<R: rand::Rng>(
        vocab_size: usize,
        core_size: usize,
        top_k: usize,
        rng: &mut R,
    ) -> Result<CoreLexicon> {
        if core_size >= vocab_size || core_size == 0 {
            return Err(Error::Config(format!(
                "core lexicon size must satisfy 1 <= n' < n, got n'={core_size} n={vocab_size}"
            )));
        }
        if top_k == 0 || top_k >= core_size {
            return Err(Error::Config(format!(
                "top-k must satisfy 1 <= k < n', got k={top_k} n'={core_size}"
            )));
        }
        Ok(CoreLexicon {
            w_v: Tensor::randn(vec![core_size, vocab_size], INIT_STD, rng),
            b_v: Tensor::randn(vec![core_size], INIT_STD, rng),
            core_size,
            top_k,
        })
    }
}

/// C = W_v·V + b_v (b_v broadcast across the embedding dimension). V is
/// frozen in stage 2, so gradients reach W_v and b_v only.
pub fn core_lexicon(tape: &mut Tape, w_v: &Tensor, v: &Tensor, b_v: &Tensor) -> Result<Tensor> {
    let projected = tape.matmul(w_v, v)?;
    tape.add_col(&projected, b_v)
}

/// Per-patch top-k cosine similarity selection over the core lexicon.
/// Ties break toward the lower index; the ranking itself is
/// non-differentiable (gradients flow through selected rows' values only).
pub fn cosine_topk(
    patch_emb: &Tensor,
    core: &Tensor,
    k: usize,
) -> Result<Vec<Vec<(usize, f64)>>> {
    let n_core = core.rows();
    if k == 0 || k >= n_core {
        return Err(Error::Config(format!(
            "top-k must satisfy 1 <= k < n', got k={k} n'={n_core}"
        )));
    }
    if patch_emb.cols() != core.cols() {
        return Err(Error::DimMismatch {
            op: "cosine_topk",
            lhs: patch_emb.shape().to_vec(),
            rhs: core.shape().to_vec(),
        });
    }
    let d = patch_emb.cols();
    let e = patch_emb.data();
    let c = core.data();
    let core_norms: Vec<f64> = (0..n_core)
        .map(|m| {
            let row = &c[m * d..(m + 1) * d];
            row.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS)
        })
        .collect();

    let mut selections = Vec::with_capacity(patch_emb.rows());
    for p in 0..patch_emb.rows() {
        let row = &e[p * d..(p + 1) * d];
        let e_norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS);
        let mut scored: Vec<(usize, f64)> = (0..n_core)
            .map(|m| {
                let dot: f64 = row
                    .iter()
                    .zip(&c[m * d..(m + 1) * d])
                    .map(|(a, b)| a * b)
                    .sum();
                (m, dot / (e_norm * core_norms[m]))
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        selections.push(scored);
    }
    Ok(selections)
}

/// Per-head Q/K/V projections for cross-attention reprogramming,
/// W ∈ R^{d×d_h} with d_h = d/H.
pub struct CrossAttnParams {
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
}

impl CrossAttnParams {
    pub fn init<R: rand::Rng>(dim: usize, heads: usize, rng: &mut R) -> Result<CrossAttnParams> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention heads must divide the model width, got H={heads} d={dim}"
            )));
        }
        let dh = dim / heads;
        let mut wq = Vec::with_capacity(heads);
        let mut wk = Vec::with_capacity(heads);
        let mut wv = Vec::with_capacity(heads);
        for _ in 0..heads {
            wq.push(Tensor::randn(vec![dim, dh], INIT_STD, rng));
            wk.push(Tensor::randn(vec![dim, dh], INIT_STD, rng));
            wv.push(Tensor::randn(vec![dim, dh], INIT_STD, rng));
        }
        Ok(CrossAttnParams { wq, wk, wv })
    }

    pub fn heads(&self) -> usize {
        self.wq.len()
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(3 * self.heads());
        for h in 0..self.heads() {
            out.push(self.wq[h].clone());
            out.push(self.wk[h].clone());
            out.push(self.wv[h].clone());
        }
        out
    }
}

/// Multi-head cross-attention of patches (queries) over the core lexicon
/// (keys/values): Z_h = softmax(Q_h·K_hᵀ/√d_h)·V_h, heads concatenated.
/// Returns Z and the per-head attention weight matrices (P×n').
pub fn cross_attention_with_weights(
    tape: &mut Tape,
    patch_emb: &Tensor,
    core: &Tensor,
    params: &CrossAttnParams,
) -> Result<(Tensor, Vec<Tensor>)> {
    let dim = patch_emb.cols();
    if core.cols() != dim {
        return Err(Error::DimMismatch {
            op: "cross_attention",
            lhs: patch_emb.shape().to_vec(),
            rhs: core.shape().to_vec(),
        });
    }
    let heads = params.heads();
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!(
            "attention heads must divide the model width, got H={heads} d={dim}"
        )));
    }
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outputs = Vec::with_capacity(heads);
    let mut weights_per_head = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = tape.matmul(patch_emb, &params.wq[h])?;
        let k = tape.matmul(core, &params.wk[h])?;
        let v = tape.matmul(core, &params.wv[h])?;
        let kt = tape.transpose(&k)?;
        let scores = tape.matmul(&q, &kt)?;
        let scaled = tape.scale(&scores, scale)?;
        let weights = tape.softmax_rows(&scaled)?;
        outputs.push(tape.matmul(&weights, &v)?);
        weights_per_head.push(weights);
    }
    let refs: Vec<&Tensor> = outputs.iter().collect();
    let z = tape.concat_cols(&refs)?;
    Ok((z, weights_per_head))
}

pub fn cross_attention(
    tape: &mut Tape,
    patch_emb: &Tensor,
    core: &Tensor,
    params: &CrossAttnParams,
) -> Result<Tensor> {
    cross_attention_with_weights(tape, patch_emb, core, params).map(|(z, _)| z)
}

/// Stage-2 parameter bundle. V and s are frozen copies of the stage-1
/// vocabulary; the stage-1 plumbing is warm-started and keeps training.
pub struct Stage2Params {
    pub mode: Stage2Mode,
    pub v: Tensor,
    pub s: Tensor,
    pub w_e: Tensor,
    pub b_e: Tensor,
    pub w_s: Tensor,
    pub b_s: Tensor,
    pub w: Tensor,
    pub b: Tensor,
    pub lexicon: CoreLexicon,
    pub attn: Option<CrossAttnParams>,
}

impl Stage2Params {
    pub fn from_stage1(
        stage1: &Stage1Params,
        mode: Stage2Mode,
        core_size: usize,
        top_k: usize,
        attn_heads: usize,
        master_seed: u64,
    ) -> Result<Stage2Params> {
        let mut init_rng = rng::stream_rng(master_seed, Stream::Stage2Init);
        let n = stage1.vocab.len();
        let dim = stage1.vocab.dim();
        let lexicon = CoreLexicon::init(n, core_size, top_k, &mut init_rng)?;
        let attn = match mode {
            Stage2Mode::Sim => None,
            Stage2Mode::Attn => Some(CrossAttnParams::init(dim, attn_heads, &mut init_rng)?),
        };
        let trainable_copy = |t: &Tensor| t.detach_copy().trainable();
        let params = Stage2Params {
            mode,
            v: stage1.vocab.v().detach_copy(),
            s: stage1.vocab.s().detach_copy(),
            w_e: trainable_copy(&stage1.w_e),
            b_e: trainable_copy(&stage1.b_e),
            w_s: trainable_copy(&stage1.w_s),
            b_s: trainable_copy(&stage1.b_s),
            w: trainable_copy(&stage1.w),
            b: trainable_copy(&stage1.b),
            lexicon,
            attn,
        };
        match mode {
            Stage2Mode::Sim => {
                params.lexicon.w_v.set_trainable(true);
                params.lexicon.b_v.set_trainable(true);
            }
            Stage2Mode::Attn => {
                if let Some(attn) = &params.attn {
                    for t in attn.tensors() {
                        t.set_trainable(true);
                    }
                }
            }
        }
        Ok(params)
    }

    /// Mode parameters plus the re-trained stage-1 plumbing; V and s are
    /// structurally excluded.
    pub fn trainable_tensors(&self) -> Vec<Tensor> {
        let mut out = vec![
            self.w_e.clone(),
            self.b_e.clone(),
            self.w_s.clone(),
            self.b_s.clone(),
            self.w.clone(),
            self.b.clone(),
        ];
        match self.mode {
            Stage2Mode::Sim => {
                out.push(self.lexicon.w_v.clone());
                out.push(self.lexicon.b_v.clone());
            }
            Stage2Mode::Attn => {
                if let Some(attn) = &self.attn {
                    out.extend(attn.tensors());
                }
            }
        }
        out
    }

    pub fn compute_core(&self, tape: &mut Tape) -> Result<Tensor> {
        core_lexicon(tape, &self.lexicon.w_v, &self.v, &self.lexicon.b_v)
    }

    /// Normalized-space forecast for a lookback window. The input sequence is
    /// `[s; e_stats; …patch blocks…]` (sim interleaves each patch with its
    /// selected lexicon rows; attn replaces patches with Z), with the head
    /// applied at the patch positions.
    pub fn forecast_graph(
        &self,
        tape: &mut Tape,
        lookback: &[f64],
        backbone: &FrozenBackbone,
        patch_cfg: &PatchConfig,
        core: &Tensor,
    ) -> Result<(Tensor, RevInState)> {
        if lookback.len() != patch_cfg.lookback {
            return Err(Error::InvalidInput(format!(
                "window length {} does not match configured lookback {}",
                lookback.len(),
                patch_cfg.lookback
            )));
        }
        let (normalized, state) = revin_normalize(lookback)?;
        let patches = make_patches(&normalized, patch_cfg)?;
        let patch_tensor = patches_to_tensor(&patches)?;
        let embedded = embed_patches(tape, &patch_tensor, &self.w_e, &self.b_e)?;
        let e_stats = stats_token(tape, lookback, &self.w_s, &self.b_s)?;
        let p = embedded.rows();

        let (seq, patch_positions) = match self.mode {
            Stage2Mode::Sim => {
                let selections = cosine_topk(&embedded, core, self.lexicon.top_k)?;
                let mut pieces: Vec<Tensor> = vec![self.s.clone(), e_stats];
                let mut positions = Vec::with_capacity(p);
                let k = self.lexicon.top_k;
                for (idx, selection) in selections.iter().enumerate() {
                    let indices: Vec<usize> = selection.iter().map(|(m, _)| *m).collect();
                    pieces.push(tape.lookup_rows(core, &indices)?);
                    pieces.push(tape.slice_rows(&embedded, idx, idx + 1)?);
                    positions.push(2 + idx * (k + 1) + k);
                }
                let refs: Vec<&Tensor> = pieces.iter().collect();
                (tape.concat_rows(&refs)?, positions)
            }
            Stage2Mode::Attn => {
                let attn = self.attn.as_ref().ok_or_else(|| {
                    Error::Contract("attn mode without cross-attention parameters".into())
                })?;
                let z = cross_attention(tape, &embedded, core, attn)?;
                let pieces = [&self.s, &e_stats, &z];
                let seq = tape.concat_rows(&pieces)?;
                (seq, (2..2 + p).collect())
            }
        };

        let pos = backbone.positional_slice(seq.rows())?;
        let seq = tape.add(&seq, &pos)?;
        let hidden = backbone.forward(tape, &seq)?;
        let h_patches = tape.lookup_rows(&hidden, &patch_positions)?;
        let pred = head_g(tape, &h_patches, &self.w, &self.b)?;
        Ok((pred, state))
    }

    /// Pure inference over one raw-scale window; output is denormalized via
    /// the window's RevIN state.
    pub fn predict(
        &self,
        lookback: &[f64],
        backbone: &FrozenBackbone,
        patch_cfg: &PatchConfig,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let core = self.compute_core(&mut tape)?;
        let (pred, state) = self.forecast_graph(&mut tape, lookback, backbone, patch_cfg, &core)?;
        Ok(revin_denormalize(&pred.to_vec(), &state))
    }

    /// Per-head attention weight matrices (P×n') for one window; attn mode only.
    pub fn attention_weights(
        &self,
        lookback: &[f64],
        patch_cfg: &PatchConfig,
    ) -> Result<Vec<Vec<f64>>> {
        let attn = self.attn.as_ref().ok_or_else(|| {
            Error::Config("attention weight export requires attn mode".into())
        })?;
        let mut tape = Tape::new();
        let core = self.compute_core(&mut tape)?;
        let (normalized, _) = revin_normalize(lookback)?;
        let patches = make_patches(&normalized, patch_cfg)?;
        let patch_tensor = patches_to_tensor(&patches)?;
        let embedded = embed_patches(&mut tape, &patch_tensor, &self.w_e, &self.b_e)?;
        let (_, weights) = cross_attention_with_weights(&mut tape, &embedded, &core, attn)?;
        Ok(weights.iter().map(|w| w.to_vec()).collect())
    }

    pub fn write_into(&self, container: &mut CheckpointContainer) -> Result<()> {
        container.push_scalar(
            "meta/mode",
            match self.mode {
                Stage2Mode::Sim => 1.0,
                Stage2Mode::Attn => 2.0,
            },
        )?;
        container.push_scalar("meta/core_size", self.lexicon.core_size as f64)?;
        container.push_scalar("meta/top_k", self.lexicon.top_k as f64)?;
        container.push_tensor("vocabulary/v", &self.v)?;
        container.push_tensor("vocabulary/s", &self.s)?;
        container.push_tensor("stage1/w_e", &self.w_e)?;
        container.push_tensor("stage1/b_e", &self.b_e)?;
        container.push_tensor("stage1/w_s", &self.w_s)?;
        container.push_tensor("stage1/b_s", &self.b_s)?;
        container.push_tensor("stage1/head.w", &self.w)?;
        container.push_tensor("stage1/head.b", &self.b)?;
        container.push_tensor("stage2/w_v", &self.lexicon.w_v)?;
        container.push_tensor("stage2/b_v", &self.lexicon.b_v)?;
        if let Some(attn) = &self.attn {
            container.push_scalar("meta/attn_heads", attn.heads() as f64)?;
            for h in 0..attn.heads() {
                container.push_tensor(&format!("stage2/head{h}/wq"), &attn.wq[h])?;
                container.push_tensor(&format!("stage2/head{h}/wk"), &attn.wk[h])?;
                container.push_tensor(&format!("stage2/head{h}/wv"), &attn.wv[h])?;
            }
        }
        Ok(())
    }

    pub fn read_from(container: &CheckpointContainer) -> Result<Stage2Params> {
        let mode = match container.get_scalar("meta/mode")? as u32 {
            1 => Stage2Mode::Sim,
            2 => Stage2Mode::Attn,
            other => {
                return Err(Error::Checkpoint(format!("unknown stage-2 mode code {other}")))
            }
        };
        let core_size = container.get_scalar("meta/core_size")? as usize;
        let top_k = container.get_scalar("meta/top_k")? as usize;
        let lexicon = CoreLexicon {
            w_v: container.get_tensor("stage2/w_v")?,
            b_v: container.get_tensor("stage2/b_v")?,
            core_size,
            top_k,
        };
        let attn = match mode {
            Stage2Mode::Sim => None,
            Stage2Mode::Attn => {
                let heads = container.get_scalar("meta/attn_heads")? as usize;
                let mut wq = Vec::with_capacity(heads);
                let mut wk = Vec::with_capacity(heads);
                let mut wv = Vec::with_capacity(heads);
                for h in 0..heads {
                    wq.push(container.get_tensor(&format!("stage2/head{h}/wq"))?);
                    wk.push(container.get_tensor(&format!("stage2/head{h}/wk"))?);
                    wv.push(container.get_tensor(&format!("stage2/head{h}/wv"))?);
                }
                Some(CrossAttnParams { wq, wk, wv })
            }
        };
        let params = Stage2Params {
            mode,
            v: container.get_tensor("vocabulary/v")?,
            s: container.get_tensor("vocabulary/s")?,
            w_e: container.get_tensor("stage1/w_e")?.trainable(),
            b_e: container.get_tensor("stage1/b_e")?.trainable(),
            w_s: container.get_tensor("stage1/w_s")?.trainable(),
            b_s: container.get_tensor("stage1/b_s")?.trainable(),
            w: container.get_tensor("stage1/head.w")?.trainable(),
            b: container.get_tensor("stage1/head.b")?.trainable(),
            lexicon,
            attn,
        };
        match mode {
            Stage2Mode::Sim => {
                params.lexicon.w_v.set_trainable(true);
                params.lexicon.b_v.set_trainable(true);
            }
            Stage2Mode::Attn => {
                if let Some(attn) = &params.attn {
                    for t in attn.tensors() {
                        t.set_trainable(true);
                    }
                }
            }
        }
        Ok(params)
    }
}

/// Trains the mode parameters plus the warm-started plumbing; V, s, and the
/// backbone stay frozen. Same per-window normalized MSE loss as stage 1.
pub fn train_stage2(
    stage1: &Stage1Params,
    mode: Stage2Mode,
    windows: &[WindowInstance],
    backbone: &FrozenBackbone,
    patch_cfg: &PatchConfig,
    cfg: &TrainRunConfig,
    core_size: usize,
    top_k: usize,
    attn_heads: usize,
) -> Result<(Stage2Params, Vec<(usize, f64)>)> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::InvalidInput("stage2 training needs at least one window".into()));
    }
    let params = Stage2Params::from_stage1(stage1, mode, core_size, top_k, attn_heads, cfg.seed)?;
    let mut adam = Adam::new(params.trainable_tensors(), AdamConfig::with_lr(cfg.lr))?;
    let trace = run_epochs(windows, cfg, |batch, _epoch| {
        let mut order: Vec<usize> = (0..batch.len()).collect();
        order.sort_by_key(|&i| batch[i].id);
        let mut tape = Tape::new();
        let core = params.compute_core(&mut tape)?;
        let mut losses = Vec::with_capacity(batch.len());
        for &i in &order {
            let window = batch[i];
            let (pred, state) =
                params.forecast_graph(&mut tape, &window.lookback, backbone, patch_cfg, &core)?;
            let target_norm: Vec<f64> = window
                .target
                .iter()
                .map(|t| (t - state.mean) / state.std)
                .collect();
            let target = Tensor::from_vec(vec![window.target.len()], target_norm)?;
            losses.push(tape.mse_loss(&pred, &target)?);
        }
        let refs: Vec<&Tensor> = losses.iter().collect();
        let stacked = tape.concat_rows(&refs)?;
        let batch_loss = tape.mean_all(&stacked)?;
        let loss_value = batch_loss.value();
        tape.backward(&batch_loss)?;
        adam.zero_missing_grads();
        adam.step()?;
        Ok(loss_value)
    })?;
    Ok((params, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_backbone, BackboneConfig, TemplateTokenizer};
    use crate::checkpoint::sha256_hex;
    use crate::vocab::default_templates;

    fn checksum(t: &Tensor) -> String {
        let bytes: Vec<u8> = t.to_vec().iter().flat_map(|v| v.to_le_bytes()).collect();
        sha256_hex(&bytes)
    }

    fn tiny_backbone() -> FrozenBackbone {
        init_backbone(
            BackboneConfig {
                dim: 8,
                heads: 2,
                layers: 1,
                max_seq: 128,
                seed: 42,
            },
            TemplateTokenizer::from_templates(&default_templates()).unwrap(),
        )
        .unwrap()
    }

    fn windows_from_sine(n_points: usize) -> Vec<WindowInstance> {
        let series: Vec<f64> = (0..n_points).map(|t| (t as f64 * 0.3).sin()).collect();
        crate::data::make_windows(&series, 8, 2, 2).unwrap()
    }

    #[test]
    fn core_lexicon_identity_and_bias_cases() {
        let mut tape = Tape::new();
        // n'=n, W_v=I, b_v=0 -> C = V
        let v = Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let eye = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero = Tensor::zeros(vec![2]);
        let c = core_lexicon(&mut tape, &eye, &v, &zero).unwrap();
        assert_eq!(c.to_vec(), v.to_vec());

        // W_v = 0 -> every core row is b_v broadcast
        let w0 = Tensor::zeros(vec![2, 2]);
        let b = Tensor::from_vec(vec![2], vec![7.0, -3.0]).unwrap();
        let c = core_lexicon(&mut tape, &w0, &v, &b).unwrap();
        assert_eq!(c.to_vec(), vec![7.0, 7.0, 7.0, -3.0, -3.0, -3.0]);
    }

    #[test]
    fn core_lexicon_gradient_matches_finite_differences() {
        use crate::autodiff::gradcheck::max_relative_grad_error;
        let v = Tensor::randn(vec![5, 4], 0.5, &mut rng::seeded(1));
        let w_v = Tensor::randn(vec![3, 5], 0.5, &mut rng::seeded(2)).trainable();
        let b_v = Tensor::randn(vec![3], 0.5, &mut rng::seeded(3)).trainable();
        let probe = Tensor::randn(vec![3, 4], 1.0, &mut rng::seeded(4));
        let (vc, wc, bc) = (v, w_v.clone(), b_v.clone());
        let err = max_relative_grad_error(&[w_v, b_v], 1e-6, move |tape| {
            let c = core_lexicon(tape, &wc, &vc, &bc)?;
            let weighted = tape.mul(&c, &probe)?;
            tape.mean_all(&weighted)
        })
        .unwrap();
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn cosine_topk_parallel_and_antiparallel() {
        let core = Tensor::from_vec(
            vec![4, 2],
            vec![1.0, 0.0, 0.0, 1.0, -3.0, 0.0, 0.70710678, 0.70710678],
        )
        .unwrap();
        // patch parallel to row 1, orthogonal to row 0
        let e = Tensor::from_vec(vec![1, 2], vec![0.0, 2.0]).unwrap();
        let sel = cosine_topk(&e, &core, 1).unwrap();
        assert_eq!(sel[0][0].0, 1);
        assert!((sel[0][0].1 - 1.0).abs() < 1e-12);

        // anti-parallel rows score exactly -1 and rank last
        let core = Tensor::from_vec(vec![3, 2], vec![-1.0, 0.0, -2.0, 0.0, 0.0, 1.0]).unwrap();
        let e = Tensor::from_vec(vec![1, 2], vec![4.0, 0.0]).unwrap();
        let sel = cosine_topk(&e, &core, 2).unwrap();
        assert_eq!(sel[0][0].0, 2); // orthogonal row wins with score 0
        // rows 0 and 1 tie at -1; lower index first
        assert_eq!(sel[0][1].0, 0);
        assert!((sel[0][1].1 + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_topk_matches_hand_ranking() {
        // core rows at angles whose cosines against (1,0) are 0.9, 0.1, 0.5:
        // picking k=2 must select indices {0, 2}
        let row = |cos: f64| vec![cos, (1.0 - cos * cos).sqrt()];
        let mut data = Vec::new();
        data.extend(row(0.9));
        data.extend(row(0.1));
        data.extend(row(0.5));
        let core = Tensor::from_vec(vec![3, 2], data).unwrap();
        let e = Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let sel = cosine_topk(&e, &core, 2).unwrap();
        let picked: Vec<usize> = sel[0].iter().map(|(m, _)| *m).collect();
        assert_eq!(picked, vec![0, 2]);
        assert!((sel[0][0].1 - 0.9).abs() < 1e-12);
        assert!((sel[0][1].1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cosine_topk_tie_breaks_toward_lower_index() {
        // rows 0 and 2 are identical: tie must pick 0 first
        let core = Tensor::from_vec(vec![3, 2], vec![1.0, 1.0, -1.0, 0.5, 1.0, 1.0]).unwrap();
        let e = Tensor::from_vec(vec![1, 2], vec![2.0, 2.0]).unwrap();
        let sel = cosine_topk(&e, &core, 2).unwrap();
        assert_eq!(sel[0][0].0, 0);
        assert_eq!(sel[0][1].0, 2);
    }

    #[test]
    fn cosine_topk_k_bounds() {
        let core = Tensor::zeros(vec![3, 2]);
        let e = Tensor::zeros(vec![1, 2]);
        assert!(matches!(cosine_topk(&e, &core, 3), Err(Error::Config(_))));
        assert!(matches!(cosine_topk(&e, &core, 0), Err(Error::Config(_))));
    }

    #[test]
    fn cross_attention_single_key_degenerate_case() {
        // n'=1: every attention weight is exactly 1, so each Z_h row equals
        // c_1·W_h^V.
        let mut tape = Tape::new();
        let e = Tensor::randn(vec![3, 8], 1.0, &mut rng::seeded(5));
        let core = Tensor::randn(vec![1, 8], 1.0, &mut rng::seeded(6));
        let params = CrossAttnParams::init(8, 2, &mut rng::seeded(7)).unwrap();
        let (z, weights) = cross_attention_with_weights(&mut tape, &e, &core, &params).unwrap();
        for w in &weights {
            assert!(w.to_vec().iter().all(|x| *x == 1.0));
        }
        let mut expected_rows = Vec::new();
        for h in 0..2 {
            let cv = tape.matmul(&core, &params.wv[h]).unwrap();
            expected_rows.push(cv.to_vec());
        }
        let zv = z.to_vec();
        for row in 0..3 {
            for h in 0..2 {
                for j in 0..4 {
                    assert_eq!(zv[row * 8 + h * 4 + j], expected_rows[h][j]);
                }
            }
        }
    }

    #[test]
    fn cross_attention_rows_sum_to_one() {
        let mut tape = Tape::new();
        let e = Tensor::randn(vec![4, 8], 1.0, &mut rng::seeded(8));
        let core = Tensor::randn(vec![5, 8], 1.0, &mut rng::seeded(9));
        let params = CrossAttnParams::init(8, 4, &mut rng::seeded(10)).unwrap();
        let (_, weights) = cross_attention_with_weights(&mut tape, &e, &core, &params).unwrap();
        for w in &weights {
            let v = w.to_vec();
            for row in 0..4 {
                let sum: f64 = v[row * 5..(row + 1) * 5].iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_head_matches_independent_dense_reference() {
        let dim = 6;
        let e = Tensor::randn(vec![3, dim], 0.8, &mut rng::seeded(11));
        let core = Tensor::randn(vec![4, dim], 0.8, &mut rng::seeded(12));
        let params = CrossAttnParams::init(dim, 1, &mut rng::seeded(13)).unwrap();
        let mut tape = Tape::new();
        let z = cross_attention(&mut tape, &e, &core, &params).unwrap().to_vec();

        // independent reference: plain nested loops, no tape machinery
        let ed = e.to_vec();
        let cd = core.to_vec();
        let wq = params.wq[0].to_vec();
        let wk = params.wk[0].to_vec();
        let wv = params.wv[0].to_vec();
        let proj = |rows: &[f64], n_rows: usize, w: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; n_rows * dim];
            for i in 0..n_rows {
                for j in 0..dim {
                    let mut s = 0.0;
                    for q in 0..dim {
                        s += rows[i * dim + q] * w[q * dim + j];
                    }
                    out[i * dim + j] = s;
                }
            }
            out
        };
        let q = proj(&ed, 3, &wq);
        let k = proj(&cd, 4, &wk);
        let v = proj(&cd, 4, &wv);
        let scale = 1.0 / (dim as f64).sqrt();
        let mut reference = vec![0.0; 3 * dim];
        for i in 0..3 {
            let mut scores = vec![0.0; 4];
            for m in 0..4 {
                let mut s = 0.0;
                for j in 0..dim {
                    s += q[i * dim + j] * k[m * dim + j];
                }
                scores[m] = s * scale;
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for j in 0..dim {
                let mut s = 0.0;
                for m in 0..4 {
                    s += exps[m] / total * v[m * dim + j];
                }
                reference[i * dim + j] = s;
            }
        }
        for (a, b) in z.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn stage2_freezes_backbone_vocab_and_shared_embedding() {
        let backbone = tiny_backbone();
        let patch_cfg = PatchConfig::new(4, 2, 8).unwrap();
        let windows = windows_from_sine(60);
        let stage1 = Stage1Params::init(8, &patch_cfg, 2, windows.len(), 3, &default_templates())
            .unwrap();
        let cfg = TrainRunConfig {
            epochs: 2,
            batch_size: 4,
            lr: 0.01,
            seed: 17,
            log_every: 10,
        };
        for mode in [Stage2Mode::Sim, Stage2Mode::Attn] {
            let backbone_sum = backbone.weights_sha256();
            let (params, trace) = train_stage2(
                &stage1, mode, &windows, &backbone, &patch_cfg, &cfg, 4, 2, 2,
            )
            .unwrap();
            assert_eq!(backbone.weights_sha256(), backbone_sum);
            assert_eq!(checksum(&params.v), checksum(stage1.vocab.v()));
            assert_eq!(checksum(&params.s), checksum(stage1.vocab.s()));
            assert!(!trace.is_empty());

            // trainable set really trained: every trainable tensor moved
            let fresh = Stage2Params::from_stage1(&stage1, mode, 4, 2, 2, cfg.seed).unwrap();
            for (trained, init) in params.trainable_tensors().iter().zip(fresh.trainable_tensors().iter()) {
                assert_ne!(checksum(trained), checksum(init), "a trainable tensor never moved");
            }
        }
    }

    #[test]
    fn reordering_selected_rows_changes_the_sequence_output() {
        let backbone = tiny_backbone();
        let patch_cfg = PatchConfig::new(4, 2, 8).unwrap();
        let stage1 = Stage1Params::init(8, &patch_cfg, 2, 10, 3, &default_templates()).unwrap();
        let params = Stage2Params::from_stage1(&stage1, Stage2Mode::Sim, 4, 2, 2, 5).unwrap();
        let lookback: Vec<f64> = (0..8).map(|t| (t as f64).sin()).collect();

        // baseline forecast
        let mut tape = Tape::new();
        let core = params.compute_core(&mut tape).unwrap();
        let (pred, _) = params
            .forecast_graph(&mut tape, &lookback, &backbone, &patch_cfg, &core)
            .unwrap();
        let baseline = pred.to_vec();

        // hand-build the same sequence with the first patch's selection
        // reversed; positional encoding makes the output differ
        let mut tape = Tape::new();
        let core = params.compute_core(&mut tape).unwrap();
        let (normalized, _) = revin_normalize(&lookback).unwrap();
        let patches = make_patches(&normalized, &patch_cfg).unwrap();
        let patch_tensor = patches_to_tensor(&patches).unwrap();
        let embedded = embed_patches(&mut tape, &patch_tensor, &params.w_e, &params.b_e).unwrap();
        let e_stats = stats_token(&mut tape, &lookback, &params.w_s, &params.b_s).unwrap();
        let selections = cosine_topk(&embedded, &core, 2).unwrap();
        let mut pieces: Vec<Tensor> = vec![params.s.clone(), e_stats];
        let mut positions = Vec::new();
        for (idx, selection) in selections.iter().enumerate() {
            let mut indices: Vec<usize> = selection.iter().map(|(m, _)| *m).collect();
            if idx == 0 {
                indices.reverse();
            }
            pieces.push(tape.lookup_rows(&core, &indices).unwrap());
            pieces.push(tape.slice_rows(&embedded, idx, idx + 1).unwrap());
            positions.push(2 + idx * 3 + 2);
        }
        let refs: Vec<&Tensor> = pieces.iter().collect();
        let seq = tape.concat_rows(&refs).unwrap();
        let pos = backbone.positional_slice(seq.rows()).unwrap();
        let seq = tape.add(&seq, &pos).unwrap();
        let hidden = backbone.forward(&mut tape, &seq).unwrap();
        let h_patches = tape.lookup_rows(&hidden, &positions).unwrap();
        let pred2 = head_g(&mut tape, &h_patches, &params.w, &params.b).unwrap();

        // the first selection had distinct rows, so reversal changes the input
        assert_ne!(baseline, pred2.to_vec());
    }

    #[test]
    fn predict_is_pure_and_deterministic() {
        let backbone = tiny_backbone();
        let patch_cfg = PatchConfig::new(4, 2, 8).unwrap();
        let stage1 = Stage1Params::init(8, &patch_cfg, 2, 10, 3, &default_templates()).unwrap();
        let params = Stage2Params::from_stage1(&stage1, Stage2Mode::Sim, 4, 2, 2, 5).unwrap();
        let lookback: Vec<f64> = (0..8).map(|t| (t as f64 * 0.7).cos()).collect();
        let a = params.predict(&lookback, &backbone, &patch_cfg).unwrap();
        let b = params.predict(&lookback, &backbone, &patch_cfg).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn predict_rejects_wrong_window_length() {
        let backbone = tiny_backbone();
        let patch_cfg = PatchConfig::new(4, 2, 8).unwrap();
        let stage1 = Stage1Params::init(8, &patch_cfg, 2, 10, 3, &default_templates()).unwrap();
        let params = Stage2Params::from_stage1(&stage1, Stage2Mode::Sim, 4, 2, 2, 5).unwrap();
        assert!(matches!(
            params.predict(&[1.0; 5], &backbone, &patch_cfg),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn checkpoint_roundtrip_both_modes() {
        let patch_cfg = PatchConfig::new(4, 2, 8).unwrap();
        let stage1 = Stage1Params::init(8, &patch_cfg, 2, 10, 3, &default_templates()).unwrap();
        for mode in [Stage2Mode::Sim, Stage2Mode::Attn] {
            let params = Stage2Params::from_stage1(&stage1, mode, 4, 2, 2, 5).unwrap();
            let mut container = CheckpointContainer::new();
            params.write_into(&mut container).unwrap();
            let back = Stage2Params::read_from(&container).unwrap();
            assert_eq!(back.mode, mode);
            assert_eq!(back.v.to_vec(), params.v.to_vec());
            assert_eq!(back.lexicon.w_v.to_vec(), params.lexicon.w_v.to_vec());
            assert!(!back.v.is_trainable());
            assert!(back.w_e.is_trainable());
        }
    }

    #[test]
    fn resolve_core_size_defaults() {
        assert_eq!(resolve_core_size(208, 0), 13);
        assert_eq!(resolve_core_size(100, 0), 8);
        assert_eq!(resolve_core_size(6, 0), 5); // clamped below n
        assert_eq!(resolve_core_size(208, 20), 20);
    }
}
