//! Finite-difference validation of the reverse-mode tape, from single ops up
//! to the full stage-1 training graph.

use vitro::autodiff::gradcheck::relative_grad_errors;
use vitro::autodiff::{Tape, Tensor};
use vitro::backbone::{init_backbone, BackboneConfig, TemplateTokenizer};
use vitro::data::WindowInstance;
use vitro::preprocess::PatchConfig;
use vitro::rng;
use vitro::stage1::{window_forecast, Stage1Params};
use vitro::vocab::default_templates;

fn main() -> vitro::Result<()> {
    // a small composite op chain
    let mut rng = rng::seeded(7);
    let a = Tensor::randn(vec![3, 4], 1.0, &mut rng).trainable();
    let b = Tensor::randn(vec![4, 2], 1.0, &mut rng).trainable();
    let (ac, bc) = (a.clone(), b.clone());
    let errs = relative_grad_errors(&[a, b], 1e-6, move |tape: &mut Tape| {
        let c = tape.matmul(&ac, &bc)?;
        let d = tape.gelu(&c)?;
        let e = tape.softmax_rows(&d)?;
        tape.mean_all(&e)
    })?;
    println!("matmul+gelu+softmax relative errors: {errs:?}");

    // the full stage-1 graph on a 2-patch toy window
    let patch_cfg = PatchConfig::new(4, 1, 4)?;
    let backbone = init_backbone(
        BackboneConfig {
            dim: 8,
            heads: 2,
            layers: 1,
            max_seq: 32,
            seed: 77,
        },
        TemplateTokenizer::from_templates(&default_templates())?,
    )?;
    let params = Stage1Params::init(8, &patch_cfg, 2, 1, 9, &default_templates())?;
    let window = WindowInstance {
        id: 0,
        channel: 0,
        offset: 0,
        lookback: vec![0.5, -1.0, 2.0, 0.3],
        target: vec![0.7, -0.2],
    };
    let names = ["V", "s", "W_e", "b_e", "W_s", "b_s", "W", "b"];
    let trainables = params.trainable_tensors();
    let errs = relative_grad_errors(&trainables, 1e-6, |tape: &mut Tape| {
        let (pred, state) = window_forecast(tape, &window, &params, &backbone, &patch_cfg, 0)?;
        let target_norm: Vec<f64> = window
            .target
            .iter()
            .map(|t| (t - state.mean) / state.std)
            .collect();
        let target = Tensor::from_vec(vec![2], target_norm)?;
        tape.mse_loss(&pred, &target)
    })?;
    println!("stage-1 graph per-parameter relative errors:");
    for (name, err) in names.iter().zip(&errs) {
        println!("  {name:>4}: {err:.3e}");
    }
    Ok(())
}
