//! Everything between a raw series window and the backbone input: reversible
//! instance normalization, patching, the learnable patch embedding, and the
//! statistics token.

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};

pub const REVIN_EPS: f64 = 1e-5;

/// Per-window normalization statistics. `std` is floored at [`REVIN_EPS`] so
/// constant windows normalize to zeros and denormalize exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RevInState {
    pub mean: f64,
    pub std: f64,
}

pub fn revin_normalize(x: &[f64]) -> Result<(Vec<f64>, RevInState)> {
    if x.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "revin_normalize needs at least 2 points, got {}",
            x.len()
        )));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(REVIN_EPS);
    let normalized = x.iter().map(|v| (v - mean) / std).collect();
    Ok((normalized, RevInState { mean, std }))
}

pub fn revin_denormalize(y: &[f64], state: &RevInState) -> Vec<f64> {
    y.iter().map(|v| v * state.std + state.mean).collect()
}

/// Patching geometry. Patch count follows
/// P = ⌊(T − L_p)/S⌋ + 2, realized by right-padding the series with its last
/// value for S steps before slicing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchConfig {
    pub patch_len: usize,
    pub stride: usize,
    pub lookback: usize,
}

impl PatchConfig {
    pub fn new(patch_len: usize, stride: usize, lookback: usize) -> Result<PatchConfig> {
        let cfg = PatchConfig {
            patch_len,
            stride,
            lookback,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 || self.patch_len > self.lookback {
            return Err(Error::Config(format!(
                "patch length must satisfy 1 <= L_p <= T, got L_p={} T={}",
                self.patch_len, self.lookback
            )));
        }
        if self.stride == 0 {
            return Err(Error::Config("patch stride must be >= 1".into()));
        }
        Ok(())
    }

    pub fn patch_count(&self) -> usize {
        (self.lookback - self.patch_len) / self.stride + 2
    }
}

/// Slice a window into `patch_count()` rows of length `patch_len`.
pub fn make_patches(x: &[f64], cfg: &PatchConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    if x.len() != cfg.lookback {
        return Err(Error::Config(format!(
            "series length {} does not match configured lookback {}",
            x.len(),
            cfg.lookback
        )));
    }
    let p = cfg.patch_count();
    let last = *x.last().expect("lookback >= 1");
    let mut padded = x.to_vec();
    padded.extend(std::iter::repeat(last).take(cfg.stride));
    let mut patches = Vec::with_capacity(p);
    for i in 0..p {
        let start = i * cfg.stride;
        patches.push(padded[start..start + cfg.patch_len].to_vec());
    }
    Ok(patches)
}

/// E_i = patches · W_eᵀ + b_e, recorded on the tape (W_e: [d×L_p], b_e: [d]).
pub fn embed_patches(
    tape: &mut Tape,
    patches: &Tensor,
    w_e: &Tensor,
    b_e: &Tensor,
) -> Result<Tensor> {
    let w_t = tape.transpose(w_e)?;
    let projected = tape.matmul(patches, &w_t)?;
    tape.add_row(&projected, b_e)
}

pub fn patches_to_tensor(patches: &[Vec<f64>]) -> Result<Tensor> {
    let rows = patches.len();
    let cols = patches.first().map(|r| r.len()).unwrap_or(0);
    let mut flat = Vec::with_capacity(rows * cols);
    for row in patches {
        flat.extend_from_slice(row);
    }
    Tensor::from_vec(vec![rows, cols], flat)
}

/// Six raw-window summary statistics: [min, max, mean, std, median, slope].
/// Computed on pre-normalization values; slope is the least-squares linear
/// fit over (t, x_t) in units per step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatsVector {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub slope: f64,
}

impl StatsVector {
    pub fn compute(x: &[f64]) -> Result<StatsVector> {
        if x.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "statistics need at least 2 points, got {}",
                x.len()
            )));
        }
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let min = x.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

        let mut sorted = x.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            0.5 * (sorted[mid - 1] + sorted[mid])
        };

        let t_mean = (x.len() - 1) as f64 / 2.0;
        let mut num = 0.0;
        let mut den = 0.0;
        for (t, v) in x.iter().enumerate() {
            let dt = t as f64 - t_mean;
            num += dt * (v - mean);
            den += dt * dt;
        }
        let slope = num / den;

        Ok(StatsVector {
            min,
            max,
            mean,
            std: var.sqrt(),
            median,
            slope,
        })
    }

    pub fn to_array(self) -> [f64; 6] {
        [self.min, self.max, self.mean, self.std, self.median, self.slope]
    }
}

/// e_stats = W_s · stats(x) + b_s as a 1×d row (W_s: [d×6], b_s: [d]).
pub fn stats_token(tape: &mut Tape, x_raw: &[f64], w_s: &Tensor, b_s: &Tensor) -> Result<Tensor> {
    let stats = StatsVector::compute(x_raw)?;
    let row = Tensor::from_vec(vec![1, 6], stats.to_array().to_vec())?;
    let w_t = tape.transpose(w_s)?;
    let projected = tape.matmul(&row, &w_t)?;
    tape.add_row(&projected, b_s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_series_normalizes_to_zeros() {
        let (norm, state) = revin_normalize(&[5.0, 5.0, 5.0, 5.0]).unwrap();
        assert_eq!(norm, vec![0.0; 4]);
        assert_eq!(state.mean, 5.0);
        assert_eq!(state.std, REVIN_EPS);
    }

    #[test]
    fn two_point_symmetry() {
        let (norm, _) = revin_normalize(&[0.0, 2.0]).unwrap();
        assert_eq!(norm, vec![-1.0, 1.0]);
    }

    #[test]
    fn normalize_rejects_short_series() {
        assert!(matches!(revin_normalize(&[1.0]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn denormalize_examples() {
        assert_eq!(revin_denormalize(&[0.0], &RevInState { mean: 3.0, std: 2.0 }), vec![3.0]);
        assert_eq!(revin_denormalize(&[1.0], &RevInState { mean: 0.0, std: 1.0 }), vec![1.0]);
    }

    #[test]
    fn patch_count_spot_values() {
        assert_eq!(PatchConfig::new(16, 8, 512).unwrap().patch_count(), 64);
        assert_eq!(PatchConfig::new(4, 1, 4).unwrap().patch_count(), 2);
        // non-overlapping S = L_p = T
        assert_eq!(PatchConfig::new(6, 6, 6).unwrap().patch_count(), 2);
    }

    #[test]
    fn final_patch_uses_last_value_padding() {
        let cfg = PatchConfig::new(4, 1, 4).unwrap();
        let patches = make_patches(&[1.0, 2.0, 3.0, 4.0], &cfg).unwrap();
        assert_eq!(patches.len(), 2);
        assert_eq!(patches[0], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(patches[1], vec![2.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn invalid_patch_config_rejected() {
        assert!(matches!(PatchConfig::new(0, 1, 8), Err(Error::Config(_))));
        assert!(matches!(PatchConfig::new(9, 1, 8), Err(Error::Config(_))));
        assert!(matches!(PatchConfig::new(4, 0, 8), Err(Error::Config(_))));
    }

    #[test]
    fn stats_of_constant_series() {
        let s = StatsVector::compute(&[3.0; 8]).unwrap();
        assert_eq!(s.to_array(), [3.0, 3.0, 3.0, 0.0, 3.0, 0.0]);
    }

    #[test]
    fn stats_of_ramp() {
        let x: Vec<f64> = (0..10).map(|t| t as f64).collect();
        let s = StatsVector::compute(&x).unwrap();
        assert!((s.slope - 1.0).abs() < 1e-12);
        assert!((s.mean - 4.5).abs() < 1e-12);
    }

    #[test]
    fn median_of_odd_and_even_counts() {
        // median is order-insensitive
        let s = StatsVector::compute(&[1.0, 3.0, 2.0]).unwrap();
        assert_eq!(s.median, 2.0);
        let s = StatsVector::compute(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(s.median, 2.5);
    }

    #[test]
    fn embed_patches_identity_and_bias_only() {
        // W_e = identity (d = L_p), b_e = 0 -> E equals the patches.
        let mut tape = Tape::new();
        let patches = Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let eye = Tensor::from_vec(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
            .unwrap();
        let zero = Tensor::zeros(vec![3]);
        let e = embed_patches(&mut tape, &patches, &eye, &zero).unwrap();
        assert_eq!(e.to_vec(), patches.to_vec());

        // W_e = 0 -> every row equals b_e.
        let w0 = Tensor::zeros(vec![3, 3]);
        let b = Tensor::from_vec(vec![3], vec![7.0, 8.0, 9.0]).unwrap();
        let e = embed_patches(&mut tape, &patches, &w0, &b).unwrap();
        assert_eq!(e.to_vec(), vec![7.0, 8.0, 9.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn roundtrip_on_random_windows() {
        use rand::Rng;
        let mut rng = crate::rng::seeded(11);
        for _ in 0..100 {
            let x: Vec<f64> = (0..32).map(|_| rng.random_range(-50.0..50.0)).collect();
            let (norm, state) = revin_normalize(&x).unwrap();
            let back = revin_denormalize(&norm, &state);
            for (a, b) in x.iter().zip(&back) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn stats_change_under_normalization() {
        let x = vec![1.0, 4.0, 2.0, 8.0, 5.0, 3.0];
        let (norm, _) = revin_normalize(&x).unwrap();
        let raw = StatsVector::compute(&x).unwrap();
        let normed = StatsVector::compute(&norm).unwrap();
        assert_ne!(raw, normed);
    }
}
