//! End-to-end orchestration behind the CLI: dataset assembly, both training
//! stages, test-split evaluation, horizon sweeps, the learned-vs-random
//! vocabulary comparison, and artifact emission.

use std::fs;
use std::path::{Path, PathBuf};

use crate::backbone::{init_backbone, FrozenBackbone, TemplateTokenizer};
use crate::checkpoint::CheckpointContainer;
use crate::config::{DataSource, RunConfig};
use crate::data::{build_dataset, load_csv, synth_generate, Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::metrics::{mae, mse, naive_last_value_forecast, MetricReport, MetricRow};
use crate::preprocess::PatchConfig;
use crate::rng::{self, Stream};
use crate::stage1::{train_stage1, Stage1Params, TrainRunConfig};
use crate::stage2::{resolve_core_size, train_stage2, Stage2Mode, Stage2Params};
use crate::vocab::default_templates;
use crate::Tensor;

pub fn build_raw_series(cfg: &RunConfig) -> Result<Vec<Vec<f64>>> {
    match &cfg.source {
        DataSource::Sines => synth_generate(
            &SynthSpec::Sines {
                channels: cfg.channels,
                length: cfg.length,
                components: cfg.components,
                noise_std: cfg.noise_std,
            },
            rng::derive_seed(cfg.seed, Stream::DataNoise),
        ),
        DataSource::Trend => synth_generate(
            &SynthSpec::Trend {
                channels: cfg.channels,
                length: cfg.length,
                noise_std: cfg.noise_std,
            },
            rng::derive_seed(cfg.seed, Stream::DataNoise),
        ),
        DataSource::ArmaLike => synth_generate(
            &SynthSpec::ArmaLike {
                channels: cfg.channels,
                length: cfg.length,
                phi: cfg.arma_phi,
                theta: cfg.arma_theta,
                noise_std: cfg.noise_std,
            },
            rng::derive_seed(cfg.seed, Stream::DataNoise),
        ),
        DataSource::Csv(path) => load_csv(path, cfg.csv_columns.as_deref()),
    }
}

pub fn build_dataset_for(cfg: &RunConfig, horizon: usize) -> Result<Dataset> {
    let raw = build_raw_series(cfg)?;
    build_dataset(
        raw,
        cfg.lookback,
        horizon,
        cfg.effective_window_stride(),
        cfg.splits,
    )
}

pub fn build_backbone(cfg: &RunConfig) -> Result<FrozenBackbone> {
    let tokenizer = TemplateTokenizer::from_templates(&default_templates())?;
    init_backbone(cfg.backbone, tokenizer)
}

pub fn patch_config(cfg: &RunConfig) -> Result<PatchConfig> {
    PatchConfig::new(cfg.patch_len, cfg.patch_stride, cfg.lookback)
}

fn stage1_run_config(cfg: &RunConfig) -> TrainRunConfig {
    TrainRunConfig {
        epochs: cfg.stage1_epochs,
        batch_size: cfg.stage1_batch,
        lr: cfg.stage1_lr,
        seed: cfg.seed,
        log_every: cfg.log_every,
    }
}

fn stage2_run_config(cfg: &RunConfig) -> TrainRunConfig {
    TrainRunConfig {
        epochs: cfg.stage2_epochs,
        batch_size: cfg.stage2_batch,
        lr: cfg.stage2_lr,
        seed: cfg.seed,
        log_every: cfg.log_every,
    }
}

/// Test-split metrics in window units (post dataset scaling, RevIN-
/// denormalized): the mean per-window MSE/MAE of the stage-2 forecaster.
pub fn evaluate_test(
    params: &Stage2Params,
    dataset: &Dataset,
    backbone: &FrozenBackbone,
    patch_cfg: &PatchConfig,
) -> Result<(f64, f64)> {
    let n_seen = dataset.windows.train.len() + dataset.windows.val.len();
    if dataset.windows.test.iter().any(|w| w.id < n_seen) {
        return Err(Error::Contract(
            "test windows overlap training/validation ids".into(),
        ));
    }
    let mut total_mse = 0.0;
    let mut total_mae = 0.0;
    for window in &dataset.windows.test {
        let pred = params.predict(&window.lookback, backbone, patch_cfg)?;
        total_mse += mse(&pred, &window.target)?;
        total_mae += mae(&pred, &window.target)?;
    }
    let n = dataset.windows.test.len() as f64;
    Ok((total_mse / n, total_mae / n))
}

/// Last-value-repeat baseline over the same test windows and units.
pub fn naive_test_metrics(dataset: &Dataset) -> Result<(f64, f64)> {
    let mut total_mse = 0.0;
    let mut total_mae = 0.0;
    for window in &dataset.windows.test {
        let pred = naive_last_value_forecast(&window.lookback, window.target.len());
        total_mse += mse(&pred, &window.target)?;
        total_mae += mae(&pred, &window.target)?;
    }
    let n = dataset.windows.test.len() as f64;
    Ok((total_mse / n, total_mae / n))
}

fn trace_csv(trace: &[(usize, f64)]) -> String {
    let mut out = String::from("step,loss\n");
    for (step, loss) in trace {
        out.push_str(&format!("{step},{loss}\n"));
    }
    out
}

fn push_shared_meta(
    container: &mut CheckpointContainer,
    cfg: &RunConfig,
    horizon: usize,
    dataset: &Dataset,
) -> Result<()> {
    container.push_scalar("meta/lookback", cfg.lookback as f64)?;
    container.push_scalar("meta/horizon", horizon as f64)?;
    container.push_scalar("meta/patch_len", cfg.patch_len as f64)?;
    container.push_scalar("meta/patch_stride", cfg.patch_stride as f64)?;
    container.push_scalar("meta/window_stride", cfg.effective_window_stride() as f64)?;
    container.push_scalar("meta/backbone.dim", cfg.backbone.dim as f64)?;
    container.push_scalar("meta/backbone.heads", cfg.backbone.heads as f64)?;
    container.push_scalar("meta/backbone.layers", cfg.backbone.layers as f64)?;
    container.push_scalar("meta/backbone.max_seq", cfg.backbone.max_seq as f64)?;
    container.push_u64("meta/backbone.seed", cfg.backbone.seed)?;
    container.push_scalar("meta/n_windows", dataset.windows.train.len() as f64)?;
    let means: Vec<f64> = dataset.scalers.iter().map(|s| s.mean).collect();
    let stds: Vec<f64> = dataset.scalers.iter().map(|s| s.std).collect();
    let n_ch = dataset.scalers.len() as u32;
    container.push("data/scaler_mean", vec![n_ch], means)?;
    container.push("data/scaler_std", vec![n_ch], stds)?;
    Ok(())
}

/// Backbone settings as stored in a checkpoint; used to rebuild the exact
/// frozen model at load time.
pub fn backbone_from_meta(container: &CheckpointContainer) -> Result<FrozenBackbone> {
    let cfg = crate::backbone::BackboneConfig {
        dim: container.get_scalar("meta/backbone.dim")? as usize,
        heads: container.get_scalar("meta/backbone.heads")? as usize,
        layers: container.get_scalar("meta/backbone.layers")? as usize,
        max_seq: container.get_scalar("meta/backbone.max_seq")? as usize,
        seed: container.get_u64("meta/backbone.seed")?,
    };
    let tokenizer = TemplateTokenizer::from_templates(&default_templates())?;
    init_backbone(cfg, tokenizer)
}

pub fn patch_config_from_meta(container: &CheckpointContainer) -> Result<PatchConfig> {
    PatchConfig::new(
        container.get_scalar("meta/patch_len")? as usize,
        container.get_scalar("meta/patch_stride")? as usize,
        container.get_scalar("meta/lookback")? as usize,
    )
}

pub struct Stage1Outcome {
    pub params: Stage1Params,
    pub trace: Vec<(usize, f64)>,
    pub final_loss: f64,
    pub container: CheckpointContainer,
}

/// Stage-1 training at the given horizon, with the checkpoint container
/// assembled (parameters + backbone/meta + final metrics).
pub fn run_stage1(
    cfg: &RunConfig,
    horizon: usize,
    dataset: &Dataset,
    backbone: &FrozenBackbone,
) -> Result<Stage1Outcome> {
    let patch_cfg = patch_config(cfg)?;
    let (params, trace) = train_stage1(
        &dataset.windows.train,
        backbone,
        &patch_cfg,
        horizon,
        &stage1_run_config(cfg),
        &default_templates(),
    )
    .map_err(|e| e.in_stage("stage1"))?;
    let final_loss = trace.last().map(|(_, l)| *l).unwrap_or(f64::NAN);
    let mut container = CheckpointContainer::new();
    container.push_scalar("meta/kind", 1.0)?;
    push_shared_meta(&mut container, cfg, horizon, dataset)?;
    container.push_scalar("meta/final_loss", final_loss)?;
    params.write_into(&mut container)?;
    Ok(Stage1Outcome {
        params,
        trace,
        final_loss,
        container,
    })
}

pub struct Stage2Outcome {
    pub params: Stage2Params,
    pub trace: Vec<(usize, f64)>,
    pub container: CheckpointContainer,
}

/// Stage-2 training from trained stage-1 parameters, optionally swapping the
/// learned V for a seeded random never-trained matrix (the vocabulary
/// comparison baseline).
pub fn run_stage2(
    cfg: &RunConfig,
    horizon: usize,
    dataset: &Dataset,
    backbone: &FrozenBackbone,
    stage1: &Stage1Params,
    mode: Stage2Mode,
    random_vocab: bool,
) -> Result<Stage2Outcome> {
    let patch_cfg = patch_config(cfg)?;
    let core_size = resolve_core_size(stage1.vocab.len(), cfg.core_size);

    let replaced;
    let stage1_for_run: &Stage1Params = if random_vocab {
        let mut rng = rng::stream_rng(cfg.seed, Stream::RandomVocabBaseline);
        let random_v = Tensor::randn(
            vec![stage1.vocab.len(), stage1.vocab.dim()],
            0.02,
            &mut rng,
        );
        replaced = Stage1Params {
            w_e: stage1.w_e.clone(),
            b_e: stage1.b_e.clone(),
            w_s: stage1.w_s.clone(),
            b_s: stage1.b_s.clone(),
            w: stage1.w.clone(),
            b: stage1.b.clone(),
            vocab: stage1.vocab.with_v(random_v)?,
        };
        &replaced
    } else {
        stage1
    };

    let (params, trace) = train_stage2(
        stage1_for_run,
        mode,
        &dataset.windows.train,
        backbone,
        &patch_cfg,
        &stage2_run_config(cfg),
        core_size,
        cfg.top_k,
        cfg.attn_heads,
    )
    .map_err(|e| e.in_stage("stage2"))?;

    let mut container = CheckpointContainer::new();
    container.push_scalar("meta/kind", 2.0)?;
    push_shared_meta(&mut container, cfg, horizon, dataset)?;
    let final_loss = trace.last().map(|(_, l)| *l).unwrap_or(f64::NAN);
    container.push_scalar("meta/final_loss", final_loss)?;
    params.write_into(&mut container)?;
    Ok(Stage2Outcome {
        params,
        trace,
        container,
    })
}

fn write_attention_export(
    out_dir: &Path,
    params: &Stage2Params,
    dataset: &Dataset,
    patch_cfg: &PatchConfig,
) -> Result<()> {
    let Some(window) = dataset.windows.test.first() else {
        return Ok(());
    };
    let weights = params.attention_weights(&window.lookback, patch_cfg)?;
    let n_core = params.lexicon.core_size;
    let patches = patch_cfg.patch_count();
    for (h, flat) in weights.iter().enumerate() {
        // rows = core lexicon entry (vocabulary side), columns = patches
        let mut out = String::new();
        let header: Vec<String> = (0..patches).map(|p| format!("patch_{p}")).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for m in 0..n_core {
            let row: Vec<String> = (0..patches).map(|p| flat[p * n_core + m].to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        fs::write(out_dir.join(format!("attention_head{h}.csv")), out)?;
    }
    Ok(())
}

/// Full run at one horizon: stage 1, stage 2 in the configured mode, test
/// evaluation, artifacts into `out_dir`. Returns the metric row plus both
/// loss traces (for determinism checks).
#[allow(clippy::type_complexity)]
pub fn run_horizon(
    cfg: &RunConfig,
    horizon: usize,
    out_dir: &Path,
) -> Result<(MetricRow, Vec<(usize, f64)>, Vec<(usize, f64)>)> {
    fs::create_dir_all(out_dir)?;
    let dataset = build_dataset_for(cfg, horizon).map_err(|e| e.in_stage("data"))?;
    let backbone = build_backbone(cfg).map_err(|e| e.in_stage("backbone"))?;
    let patch_cfg = patch_config(cfg)?;

    let stage1 = run_stage1(cfg, horizon, &dataset, &backbone)?;
    stage1.container.save(&out_dir.join("stage1.vckpt"))?;
    fs::write(out_dir.join("stage1_loss.csv"), trace_csv(&stage1.trace))?;
    backbone.weights_container().save(&out_dir.join("backbone.vckpt"))?;
    stage1.params.vocab.export_embeddings(out_dir)?;

    let stage2 = run_stage2(cfg, horizon, &dataset, &backbone, &stage1.params, cfg.mode, false)?;
    stage2
        .container
        .save(&out_dir.join(format!("stage2_{}.vckpt", cfg.mode.as_str())))?;
    fs::write(out_dir.join("stage2_loss.csv"), trace_csv(&stage2.trace))?;
    if cfg.mode == Stage2Mode::Attn {
        write_attention_export(out_dir, &stage2.params, &dataset, &patch_cfg)?;
    }

    let (test_mse, test_mae) = evaluate_test(&stage2.params, &dataset, &backbone, &patch_cfg)
        .map_err(|e| e.in_stage("eval"))?;
    Ok((
        MetricRow {
            horizon,
            mse: test_mse,
            mae: test_mae,
        },
        stage1.trace,
        stage2.trace,
    ))
}

pub struct PipelineOutcome {
    pub report: MetricReport,
    pub stage1_traces: Vec<Vec<(usize, f64)>>,
    pub stage2_traces: Vec<Vec<(usize, f64)>>,
}

/// The `eval` subcommand: a full two-stage run per configured horizon,
/// metrics CSV at the output root, per-horizon artifacts in `h<τ>/`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutcome> {
    fs::create_dir_all(&cfg.out_dir)?;
    let mut rows = Vec::new();
    let mut stage1_traces = Vec::new();
    let mut stage2_traces = Vec::new();
    for &horizon in &cfg.eval_horizons {
        let sub = cfg.out_dir.join(format!("h{horizon}"));
        let (row, t1, t2) = run_horizon(cfg, horizon, &sub)?;
        rows.push(row);
        stage1_traces.push(t1);
        stage2_traces.push(t2);
    }
    let report = MetricReport::from_rows(rows)?;
    fs::write(cfg.out_dir.join("metrics.csv"), report.to_csv())?;
    Ok(PipelineOutcome {
        report,
        stage1_traces,
        stage2_traces,
    })
}

pub struct CompareOutcome {
    pub vitro: MetricReport,
    pub random: MetricReport,
}

impl CompareOutcome {
    /// Paired CSV with exact deltas (vitro − random).
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("horizon,vitro_mse,vitro_mae,random_mse,random_mae,delta_mse,delta_mae\n");
        for (v, r) in self.vitro.rows.iter().zip(&self.random.rows) {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                v.horizon,
                v.mse,
                v.mae,
                r.mse,
                r.mae,
                v.mse - r.mse,
                v.mae - r.mae
            ));
        }
        out.push_str(&format!(
            "average,{},{},{},{},{},{}\n",
            self.vitro.average_mse,
            self.vitro.average_mae,
            self.random.average_mse,
            self.random.average_mae,
            self.vitro.average_mse - self.random.average_mse,
            self.vitro.average_mae - self.random.average_mae
        ));
        out
    }
}

/// The `compare-vocab` subcommand: per horizon, stage 1 once, then stage 2
/// twice — with the learned V and with a seeded random V never trained —
/// everything else identical (same backbone, same warm start, same seeds).
pub fn compare_vocab(cfg: &RunConfig) -> Result<CompareOutcome> {
    fs::create_dir_all(&cfg.out_dir)?;
    let mut vitro_rows = Vec::new();
    let mut random_rows = Vec::new();
    for &horizon in &cfg.eval_horizons {
        let dataset = build_dataset_for(cfg, horizon).map_err(|e| e.in_stage("data"))?;
        let backbone = build_backbone(cfg).map_err(|e| e.in_stage("backbone"))?;
        let patch_cfg = patch_config(cfg)?;
        let stage1 = run_stage1(cfg, horizon, &dataset, &backbone)?;

        let learned = run_stage2(cfg, horizon, &dataset, &backbone, &stage1.params, cfg.mode, false)?;
        let (v_mse, v_mae) = evaluate_test(&learned.params, &dataset, &backbone, &patch_cfg)
            .map_err(|e| e.in_stage("eval"))?;
        vitro_rows.push(MetricRow {
            horizon,
            mse: v_mse,
            mae: v_mae,
        });

        let random = run_stage2(cfg, horizon, &dataset, &backbone, &stage1.params, cfg.mode, true)?;
        let (r_mse, r_mae) = evaluate_test(&random.params, &dataset, &backbone, &patch_cfg)
            .map_err(|e| e.in_stage("eval"))?;
        random_rows.push(MetricRow {
            horizon,
            mse: r_mse,
            mae: r_mae,
        });
    }
    let outcome = CompareOutcome {
        vitro: MetricReport::from_rows(vitro_rows)?,
        random: MetricReport::from_rows(random_rows)?,
    };
    fs::write(cfg.out_dir.join("compare.csv"), outcome.to_csv())?;
    Ok(outcome)
}

/// The `train-stage1` subcommand at the configured horizon.
pub fn cmd_train_stage1(cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir)?;
    let dataset = build_dataset_for(cfg, cfg.horizon).map_err(|e| e.in_stage("data"))?;
    let backbone = build_backbone(cfg).map_err(|e| e.in_stage("backbone"))?;
    let outcome = run_stage1(cfg, cfg.horizon, &dataset, &backbone)?;
    let path = cfg.out_dir.join("stage1.vckpt");
    outcome.container.save(&path)?;
    fs::write(cfg.out_dir.join("stage1_loss.csv"), trace_csv(&outcome.trace))?;
    backbone.weights_container().save(&cfg.out_dir.join("backbone.vckpt"))?;
    outcome.params.vocab.export_embeddings(&cfg.out_dir)?;
    Ok(path)
}

/// The `train-stage2` subcommand; requires `stage1.vckpt` in the output dir.
pub fn cmd_train_stage2(cfg: &RunConfig) -> Result<PathBuf> {
    let stage1_path = cfg.out_dir.join("stage1.vckpt");
    let container = CheckpointContainer::load(&stage1_path)
        .map_err(|e| e.in_stage("stage2"))?;
    let stage1 = Stage1Params::read_from(&container, &default_templates())?;
    let horizon = container.get_scalar("meta/horizon")? as usize;
    let dataset = build_dataset_for(cfg, horizon).map_err(|e| e.in_stage("data"))?;
    let backbone = backbone_from_meta(&container).map_err(|e| e.in_stage("backbone"))?;
    let patch_cfg = patch_config_from_meta(&container)?;

    let outcome = run_stage2(cfg, horizon, &dataset, &backbone, &stage1, cfg.mode, false)?;
    let path = cfg.out_dir.join(format!("stage2_{}.vckpt", cfg.mode.as_str()));
    outcome.container.save(&path)?;
    fs::write(cfg.out_dir.join("stage2_loss.csv"), trace_csv(&outcome.trace))?;
    if cfg.mode == Stage2Mode::Attn {
        write_attention_export(&cfg.out_dir, &outcome.params, &dataset, &patch_cfg)?;
    }
    Ok(path)
}

/// The `predict` subcommand: batch inference over the test split with the
/// stage-2 checkpoint for the configured mode. The forecast CSV holds one
/// row per window, columns t+1..t+τ, in original input units (dataset
/// scaling undone).
pub fn cmd_predict(cfg: &RunConfig) -> Result<PathBuf> {
    let ckpt_path = cfg.out_dir.join(format!("stage2_{}.vckpt", cfg.mode.as_str()));
    let container = CheckpointContainer::load(&ckpt_path).map_err(|e| e.in_stage("predict"))?;
    let params = Stage2Params::read_from(&container)?;
    let backbone = backbone_from_meta(&container).map_err(|e| e.in_stage("backbone"))?;
    let patch_cfg = patch_config_from_meta(&container)?;
    let horizon = container.get_scalar("meta/horizon")? as usize;
    let dataset = build_dataset_for(cfg, horizon).map_err(|e| e.in_stage("data"))?;

    let scaler_means = container.require("data/scaler_mean")?.data.clone();
    let scaler_stds = container.require("data/scaler_std")?.data.clone();

    let mut out = String::new();
    let header: Vec<String> = (1..=horizon).map(|t| format!("t_plus_{t}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for window in &dataset.windows.test {
        let pred_scaled = params
            .predict(&window.lookback, &backbone, &patch_cfg)
            .map_err(|e| e.in_stage("predict"))?;
        let mean = scaler_means[window.channel];
        let std = scaler_stds[window.channel];
        let row: Vec<String> = pred_scaled
            .iter()
            .map(|v| (v * std + mean).to_string())
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    let path = cfg.out_dir.join("forecast.csv");
    fs::write(&path, out)?;
    Ok(path)
}

/// The `export-embeddings` subcommand: vocabulary CSV + container from the
/// newest stage checkpoint in the output dir.
pub fn cmd_export_embeddings(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    let candidates = [
        cfg.out_dir.join(format!("stage2_{}.vckpt", cfg.mode.as_str())),
        cfg.out_dir.join("stage1.vckpt"),
    ];
    let source = candidates
        .iter()
        .find(|p| p.exists())
        .ok_or_else(|| {
            Error::InvalidInput(format!(
                "no stage checkpoint found under {}",
                cfg.out_dir.display()
            ))
            .in_stage("export")
        })?;
    let container = CheckpointContainer::load(source)?;
    let vocab = crate::vocab::Vocabulary::read_from(&container, &default_templates())?;
    vocab.export_embeddings(&cfg.out_dir)
}
