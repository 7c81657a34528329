//! Stage 1: vocabulary inversion. Optimizes {s, V} together with the patch
//! embedder, statistics projector, and forecast head, all through the frozen
//! backbone. The optimization loss lives in per-window normalized space;
//! reported metrics are denormalized.

use crate::autodiff::{Adam, AdamConfig, Tape, Tensor};
use crate::backbone::FrozenBackbone;
use crate::checkpoint::CheckpointContainer;
use crate::data::WindowInstance;
use crate::error::{Error, Result};
use crate::preprocess::{
    embed_patches, make_patches, patches_to_tensor, revin_normalize, stats_token, PatchConfig,
    RevInState,
};
use crate::rng::{self, Stream};
use crate::vocab::{new_vocabulary, Vocabulary};

const INIT_STD: f64 = 0.02;

/// Everything stage 1 trains: W_e/b_e (patch embedder), W_s/b_s (stats
/// projector), W/b (head g), and the vocabulary (V, s). The backbone is
/// deliberately absent.
pub struct Stage1Params {
    pub w_e: Tensor,
    pub b_e: Tensor,
    pub w_s: Tensor,
    pub b_s: Tensor,
    pub w: Tensor,
    pub b: Tensor,
    pub vocab: Vocabulary,
}

impl Stage1Params {
    pub fn init(
        dim: usize,
        patch_cfg: &PatchConfig,
        horizon: usize,
        n_windows: usize,
        master_seed: u64,
        templates: &[String],
    ) -> Result<Stage1Params> {
        if horizon == 0 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        let p = patch_cfg.patch_count();
        let mut rng = rng::stream_rng(master_seed, Stream::ParamInit);
        let w_e = Tensor::randn(vec![dim, patch_cfg.patch_len], INIT_STD, &mut rng).trainable();
        let b_e = Tensor::zeros(vec![dim]).trainable();
        let w_s = Tensor::randn(vec![dim, 6], INIT_STD, &mut rng).trainable();
        let b_s = Tensor::zeros(vec![dim]).trainable();
        let w = Tensor::randn(vec![horizon, p * dim], INIT_STD, &mut rng).trainable();
        let b = Tensor::zeros(vec![horizon]).trainable();
        let vocab = new_vocabulary(
            n_windows,
            dim,
            rng::derive_seed(master_seed, Stream::VocabInit),
            templates,
        )?;
        Ok(Stage1Params {
            w_e,
            b_e,
            w_s,
            b_s,
            w,
            b,
            vocab,
        })
    }

    /// The exact stage-1 trainable set: {V, s, W_e, b_e, W_s, b_s, W, b}.
    pub fn trainable_tensors(&self) -> Vec<Tensor> {
        vec![
            self.vocab.v().clone(),
            self.vocab.s().clone(),
            self.w_e.clone(),
            self.b_e.clone(),
            self.w_s.clone(),
            self.b_s.clone(),
            self.w.clone(),
            self.b.clone(),
        ]
    }

    pub fn write_into(&self, container: &mut CheckpointContainer) -> Result<()> {
        container.push_tensor("stage1/w_e", &self.w_e)?;
        container.push_tensor("stage1/b_e", &self.b_e)?;
        container.push_tensor("stage1/w_s", &self.w_s)?;
        container.push_tensor("stage1/b_s", &self.b_s)?;
        container.push_tensor("stage1/head.w", &self.w)?;
        container.push_tensor("stage1/head.b", &self.b)?;
        self.vocab.write_into(container)
    }

    pub fn read_from(container: &CheckpointContainer, templates: &[String]) -> Result<Stage1Params> {
        Ok(Stage1Params {
            w_e: container.get_tensor("stage1/w_e")?.trainable(),
            b_e: container.get_tensor("stage1/b_e")?.trainable(),
            w_s: container.get_tensor("stage1/w_s")?.trainable(),
            b_s: container.get_tensor("stage1/b_s")?.trainable(),
            w: container.get_tensor("stage1/head.w")?.trainable(),
            b: container.get_tensor("stage1/head.b")?.trainable(),
            vocab: Vocabulary::read_from(container, templates)?,
        })
    }
}

/// Epochs × batches over the whole window set; no early stopping.
#[derive(Debug, Clone)]
pub struct TrainRunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Head g: flattens backbone outputs at the patch positions row-major into a
/// single feature vector and applies W·h + b.
pub fn head_g(tape: &mut Tape, h_patches: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let features = h_patches.numel();
    if w.cols() != features || w.rows() != b.numel() {
        return Err(Error::DimMismatch {
            op: "head_g",
            lhs: w.shape().to_vec(),
            rhs: h_patches.shape().to_vec(),
        });
    }
    let horizon = w.rows();
    let flat = tape.reshape(h_patches, vec![features, 1])?;
    let projected = tape.matmul(w, &flat)?;
    let bias = tape.reshape(b, vec![horizon, 1])?;
    let out = tape.add(&projected, &bias)?;
    tape.reshape(&out, vec![horizon])
}

/// Normalized-space forecast for one window:
/// RevIN → patch → embed → assemble prompt → frozen forward → head at patch
/// positions. Returns the prediction and the window's RevIN state.
pub fn window_forecast(
    tape: &mut Tape,
    window: &WindowInstance,
    params: &Stage1Params,
    backbone: &FrozenBackbone,
    patch_cfg: &PatchConfig,
    template_idx: usize,
) -> Result<(Tensor, RevInState)> {
    let (normalized, state) = revin_normalize(&window.lookback)?;
    let patches = make_patches(&normalized, patch_cfg)?;
    let patch_tensor = patches_to_tensor(&patches)?;
    let embedded = embed_patches(tape, &patch_tensor, &params.w_e, &params.b_e)?;
    let e_stats = stats_token(tape, &window.lookback, &params.w_s, &params.b_s)?;
    let (seq, layout) = params.vocab.assemble_prompt(
        tape,
        &embedded,
        window.id,
        template_idx,
        &e_stats,
        backbone,
    )?;
    let hidden = backbone.forward(tape, &seq)?;
    let h_patches = tape.slice_rows(
        &hidden,
        layout.patch_positions.start,
        layout.patch_positions.end,
    )?;
    let pred = head_g(tape, &h_patches, &params.w, &params.b)?;
    Ok((pred, state))
}

fn pick_template(n_templates: usize, template_seed: u64, window_id: usize) -> usize {
    // keyed by window id alone: batch order can't change template
    // assignment, and with lr=0 the loss trace stays exactly constant
    (rng::keyed_u64(template_seed, window_id as u64, 0) % n_templates as u64) as usize
}

/// One optimizer step over a batch. Per-window losses are combined in window
/// id order (mean reduction), so the loss is invariant to batch permutation
/// bit for bit.
pub fn stage1_step(
    batch: &[&WindowInstance],
    params: &Stage1Params,
    backbone: &FrozenBackbone,
    patch_cfg: &PatchConfig,
    adam: &mut Adam,
    template_seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("stage1 step with an empty batch".into()));
    }
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by_key(|&i| batch[i].id);

    let n_templates = params.vocab.templates().len();
    let mut tape = Tape::new();
    let mut losses = Vec::with_capacity(batch.len());
    for &i in &order {
        let window = batch[i];
        let template_idx = pick_template(n_templates, template_seed, window.id);
        let (pred, state) = window_forecast(&mut tape, window, params, backbone, patch_cfg, template_idx)?;
        let target_norm: Vec<f64> = window.target.iter().map(|t| (t - state.mean) / state.std).collect();
        let target = Tensor::from_vec(vec![window.target.len()], target_norm)?;
        losses.push(tape.mse_loss(&pred, &target)?);
    }
    let refs: Vec<&Tensor> = losses.iter().collect();
    let stacked = tape.concat_rows(&refs)?;
    let batch_loss = tape.mean_all(&stacked)?;
    let loss_value = batch_loss.value();
    tape.backward(&batch_loss)?;
    // a batch whose templates all lack {S} leaves s without a gradient;
    // explicit zeros keep the optimizer contract strict
    adam.zero_missing_grads();
    adam.step()?;
    Ok(loss_value)
}

/// Runs epochs × batches steps and returns the trained parameters plus the
/// per-step loss trace.
pub fn train_stage1(
    windows: &[WindowInstance],
    backbone: &FrozenBackbone,
    patch_cfg: &PatchConfig,
    horizon: usize,
    cfg: &TrainRunConfig,
    templates: &[String],
) -> Result<(Stage1Params, Vec<(usize, f64)>)> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::InvalidInput("stage1 training needs at least one window".into()));
    }
    let params = Stage1Params::init(
        backbone.config().dim,
        patch_cfg,
        horizon,
        windows.len(),
        cfg.seed,
        templates,
    )?;
    let mut adam = Adam::new(params.trainable_tensors(), AdamConfig::with_lr(cfg.lr))?;
    let template_seed = rng::derive_seed(cfg.seed, Stream::TemplateChoice);
    let trace = run_epochs(
        windows,
        cfg,
        |batch, _epoch| stage1_step(batch, &params, backbone, patch_cfg, &mut adam, template_seed),
    )?;
    Ok((params, trace))
}

/// Shared epoch/batch loop: seeded shuffle per epoch, fixed batch slicing,
/// one `step` call per batch. Returns the (step, loss) trace.
pub(crate) fn run_epochs(
    windows: &[WindowInstance],
    cfg: &TrainRunConfig,
    mut step: impl FnMut(&[&WindowInstance], usize) -> Result<f64>,
) -> Result<Vec<(usize, f64)>> {
    use rand::seq::SliceRandom;
    let mut trace = Vec::new();
    let mut step_idx = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..windows.len()).collect();
        let mut shuffle_rng =
            rng::seeded(rng::keyed_u64(rng::derive_seed(cfg.seed, Stream::BatchShuffle), epoch as u64, 0));
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&WindowInstance> = chunk.iter().map(|&i| &windows[i]).collect();
            let loss = step(&batch, epoch)?;
            trace.push((step_idx, loss));
            step_idx += 1;
        }
    }
    Ok(trace)
}
