//! Deterministic frozen decoder-only transformer plus the fixed word-level
//! tokenizer for template text. All weights are drawn once from a seeded
//! generator and live in plain buffers outside any gradient tape, so the
//! backbone is immutable, shareable, and auditable byte for byte.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Tensor};
use crate::checkpoint::CheckpointContainer;
use crate::error::{Error, Result};
use crate::rng;

pub const MARKER_PATCH: &str = "<PATCH>";
pub const MARKER_PSEUDO: &str = "<PSEUDO>";
pub const MARKER_SHARED: &str = "<SHARED>";
pub const MARKER_STATS: &str = "<STATS>";

pub const PSEUDO_SLOT: &str = "{P}";
pub const SHARED_SLOT: &str = "{S}";

const INIT_STD: f64 = 0.02;
const MASK_NEG: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> BackboneConfig {
        BackboneConfig {
            dim: 64,
            heads: 4,
            layers: 3,
            max_seq: 256,
            seed: 90210,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.layers == 0 || self.max_seq == 0 {
            return Err(Error::Config("backbone dims must all be nonzero".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model width {} must be divisible by head count {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Fixed word-level tokenizer over the template vocabulary. Ids 0..=3 are the
/// segment markers; template words follow in sorted order, so tokenization is
/// deterministic and total over template strings.
#[derive(Debug, Clone)]
pub struct TemplateTokenizer {
    words: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl TemplateTokenizer {
    pub fn from_templates(templates: &[String]) -> Result<TemplateTokenizer> {
        let markers = [MARKER_PATCH, MARKER_PSEUDO, MARKER_SHARED, MARKER_STATS];
        let mut vocab: Vec<String> = markers.iter().map(|m| m.to_string()).collect();
        let mut seen: BTreeMap<String, ()> = BTreeMap::new();
        for template in templates {
            for word in template.split_whitespace() {
                if word == PSEUDO_SLOT || word == SHARED_SLOT {
                    continue;
                }
                if markers.contains(&word) {
                    return Err(Error::Config(format!(
                        "template word '{word}' collides with a reserved marker"
                    )));
                }
                seen.entry(word.to_string()).or_insert(());
            }
        }
        vocab.extend(seen.into_keys());
        let ids = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Ok(TemplateTokenizer { words: vocab, ids })
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn id_of(&self, word: &str) -> Result<usize> {
        self.ids.get(word).copied().ok_or_else(|| {
            Error::InvalidInput(format!("word '{word}' is not in the template vocabulary"))
        })
    }

    /// Whitespace tokenization of a template string; `{P}`/`{S}` slots map to
    /// the pseudo/shared markers.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| match w {
                PSEUDO_SLOT => Ok(1),
                SHARED_SLOT => Ok(2),
                other => self.id_of(other),
            })
            .collect()
    }
}

struct LayerWeights {
    ln1_gain: Vec<f64>,
    ln1_bias: Vec<f64>,
    wq: Vec<Vec<f64>>,
    wk: Vec<Vec<f64>>,
    wv: Vec<Vec<f64>>,
    wo: Vec<f64>,
    ln2_gain: Vec<f64>,
    ln2_bias: Vec<f64>,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

/// Pre-norm causal decoder stack with GELU MLPs and a final layer norm.
/// Weights never change after [`init_backbone`].
pub struct FrozenBackbone {
    cfg: BackboneConfig,
    tokenizer: TemplateTokenizer,
    token_table: Vec<f64>,
    pos_table: Vec<f64>,
    layers: Vec<LayerWeights>,
    final_gain: Vec<f64>,
    final_bias: Vec<f64>,
}

pub fn init_backbone(cfg: BackboneConfig, tokenizer: TemplateTokenizer) -> Result<FrozenBackbone> {
    cfg.validate()?;
    let mut rng = rng::seeded(cfg.seed);
    let d = cfg.dim;
    let dh = cfg.head_dim();
    let mut draw = |n: usize| -> Vec<f64> { Tensor::randn(vec![n], INIT_STD, &mut rng).to_vec() };

    let token_table = draw(tokenizer.vocab_size() * d);
    let mut layers = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        let ln1_gain = draw(d);
        let ln1_bias = draw(d);
        let mut wq = Vec::with_capacity(cfg.heads);
        let mut wk = Vec::with_capacity(cfg.heads);
        let mut wv = Vec::with_capacity(cfg.heads);
        for _ in 0..cfg.heads {
            wq.push(draw(d * dh));
            wk.push(draw(d * dh));
            wv.push(draw(d * dh));
        }
        let wo = draw(d * d);
        let ln2_gain = draw(d);
        let ln2_bias = draw(d);
        let w1 = draw(d * 4 * d);
        let b1 = draw(4 * d);
        let w2 = draw(4 * d * d);
        let b2 = draw(d);
        layers.push(LayerWeights {
            ln1_gain,
            ln1_bias,
            wq,
            wk,
            wv,
            wo,
            ln2_gain,
            ln2_bias,
            w1,
            b1,
            w2,
            b2,
        });
    }
    let final_gain = draw(d);
    let final_bias = draw(d);

    let mut pos_table = vec![0.0; cfg.max_seq * d];
    for pos in 0..cfg.max_seq {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pos_table[pos * d + 2 * i] = (pos as f64 * freq).sin();
            pos_table[pos * d + 2 * i + 1] = (pos as f64 * freq).cos();
        }
    }

    Ok(FrozenBackbone {
        cfg,
        tokenizer,
        token_table,
        pos_table,
        layers,
        final_gain,
        final_bias,
    })
}

fn constant(shape: Vec<usize>, data: &[f64]) -> Tensor {
    Tensor::from_vec(shape, data.to_vec()).expect("weight buffers are shape-consistent")
}

impl FrozenBackbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn tokenizer(&self) -> &TemplateTokenizer {
        &self.tokenizer
    }

    /// Frozen-table lookup; the rows are constants, so gradients flow to
    /// nothing. An empty token list yields an empty (0×d) sequence.
    pub fn embed_text(&self, tokens: &[usize]) -> Result<Tensor> {
        let d = self.cfg.dim;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &id in tokens {
            if id >= self.tokenizer.vocab_size() {
                return Err(Error::UnknownToken(id));
            }
            data.extend_from_slice(&self.token_table[id * d..(id + 1) * d]);
        }
        Tensor::from_vec(vec![tokens.len(), d], data)
    }

    /// Sinusoidal positions for a sequence of the given length.
    pub fn positional_slice(&self, len: usize) -> Result<Tensor> {
        if len > self.cfg.max_seq {
            return Err(Error::InvalidInput(format!(
                "sequence length {len} exceeds max_seq {}",
                self.cfg.max_seq
            )));
        }
        Ok(constant(vec![len, self.cfg.dim], &self.pos_table[..len * self.cfg.dim]))
    }

    /// Pre-norm decoder stack over an already-embedded sequence. Output
    /// position t depends only on positions <= t.
    pub fn forward(&self, tape: &mut Tape, seq: &Tensor) -> Result<Tensor> {
        let d = self.cfg.dim;
        let len = seq.rows();
        if seq.cols() != d {
            return Err(Error::DimMismatch {
                op: "backbone forward",
                lhs: seq.shape().to_vec(),
                rhs: vec![len, d],
            });
        }
        if len > self.cfg.max_seq {
            return Err(Error::InvalidInput(format!(
                "sequence length {len} exceeds max_seq {}",
                self.cfg.max_seq
            )));
        }

        let mut mask = vec![0.0; len * len];
        for i in 0..len {
            for j in (i + 1)..len {
                mask[i * len + j] = MASK_NEG;
            }
        }
        let mask = Tensor::from_vec(vec![len, len], mask)?;

        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = seq.clone();
        for layer in &self.layers {
            let ln1_g = constant(vec![d], &layer.ln1_gain);
            let ln1_b = constant(vec![d], &layer.ln1_bias);
            let normed = tape.layer_norm(&x, &ln1_g, &ln1_b)?;
            let mut head_outputs = Vec::with_capacity(self.cfg.heads);
            for h in 0..self.cfg.heads {
                let wq = constant(vec![d, dh], &layer.wq[h]);
                let wk = constant(vec![d, dh], &layer.wk[h]);
                let wv = constant(vec![d, dh], &layer.wv[h]);
                let q = tape.matmul(&normed, &wq)?;
                let k = tape.matmul(&normed, &wk)?;
                let v = tape.matmul(&normed, &wv)?;
                let kt = tape.transpose(&k)?;
                let scores = tape.matmul(&q, &kt)?;
                let scaled = tape.scale(&scores, scale)?;
                let masked = tape.add(&scaled, &mask)?;
                let weights = tape.softmax_rows(&masked)?;
                head_outputs.push(tape.matmul(&weights, &v)?);
            }
            let refs: Vec<&Tensor> = head_outputs.iter().collect();
            let merged = tape.concat_cols(&refs)?;
            let wo = constant(vec![d, d], &layer.wo);
            let attn = tape.matmul(&merged, &wo)?;
            x = tape.add(&x, &attn)?;

            let ln2_g = constant(vec![d], &layer.ln2_gain);
            let ln2_b = constant(vec![d], &layer.ln2_bias);
            let normed = tape.layer_norm(&x, &ln2_g, &ln2_b)?;
            let w1 = constant(vec![d, 4 * d], &layer.w1);
            let b1 = constant(vec![4 * d], &layer.b1);
            let w2 = constant(vec![4 * d, d], &layer.w2);
            let b2 = constant(vec![d], &layer.b2);
            let hidden = tape.matmul(&normed, &w1)?;
            let hidden = tape.add_row(&hidden, &b1)?;
            let hidden = tape.gelu(&hidden)?;
            let mlp = tape.matmul(&hidden, &w2)?;
            let mlp = tape.add_row(&mlp, &b2)?;
            x = tape.add(&x, &mlp)?;
        }

        let fg = constant(vec![d], &self.final_gain);
        let fb = constant(vec![d], &self.final_bias);
        tape.layer_norm(&x, &fg, &fb)
    }

    /// Every drawn weight as named records, in a fixed order. This is both
    /// the export format and the basis of the freezing checksum.
    pub fn weights_container(&self) -> CheckpointContainer {
        let d = self.cfg.dim as u32;
        let dh = self.cfg.head_dim() as u32;
        let mut c = CheckpointContainer::new();
        let vocab = self.tokenizer.vocab_size() as u32;
        c.push("backbone/token_table", vec![vocab, d], self.token_table.clone())
            .expect("unique names");
        for (i, layer) in self.layers.iter().enumerate() {
            let p = format!("backbone/layer{i}");
            c.push(&format!("{p}/ln1.gain"), vec![d], layer.ln1_gain.clone()).unwrap();
            c.push(&format!("{p}/ln1.bias"), vec![d], layer.ln1_bias.clone()).unwrap();
            for h in 0..self.cfg.heads {
                c.push(&format!("{p}/head{h}/wq"), vec![d, dh], layer.wq[h].clone()).unwrap();
                c.push(&format!("{p}/head{h}/wk"), vec![d, dh], layer.wk[h].clone()).unwrap();
                c.push(&format!("{p}/head{h}/wv"), vec![d, dh], layer.wv[h].clone()).unwrap();
            }
            c.push(&format!("{p}/wo"), vec![d, d], layer.wo.clone()).unwrap();
            c.push(&format!("{p}/ln2.gain"), vec![d], layer.ln2_gain.clone()).unwrap();
            c.push(&format!("{p}/ln2.bias"), vec![d], layer.ln2_bias.clone()).unwrap();
            c.push(&format!("{p}/mlp.w1"), vec![d, 4 * d], layer.w1.clone()).unwrap();
            c.push(&format!("{p}/mlp.b1"), vec![4 * d], layer.b1.clone()).unwrap();
            c.push(&format!("{p}/mlp.w2"), vec![4 * d, d], layer.w2.clone()).unwrap();
            c.push(&format!("{p}/mlp.b2"), vec![d], layer.b2.clone()).unwrap();
        }
        c.push("backbone/final_ln.gain", vec![d], self.final_gain.clone()).unwrap();
        c.push("backbone/final_ln.bias", vec![d], self.final_bias.clone()).unwrap();
        c
    }

    pub fn weights_sha256(&self) -> String {
        self.weights_container().sha256()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::DEFAULT_TEMPLATES;

    fn test_tokenizer() -> TemplateTokenizer {
        let templates: Vec<String> = DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect();
        TemplateTokenizer::from_templates(&templates).unwrap()
    }

    fn small_backbone(seed: u64) -> FrozenBackbone {
        init_backbone(
            BackboneConfig {
                dim: 16,
                heads: 2,
                layers: 2,
                max_seq: 32,
                seed,
            },
            test_tokenizer(),
        )
        .unwrap()
    }

    #[test]
    fn tokenizer_is_deterministic_and_total_over_templates() {
        let tok = test_tokenizer();
        for template in DEFAULT_TEMPLATES {
            let ids = tok.tokenize(template).unwrap();
            let ids2 = tok.tokenize(template).unwrap();
            assert_eq!(ids, ids2);
            assert!(!ids.is_empty());
        }
        // slots map to the pseudo/shared markers
        let ids = tok.tokenize("{P} {S}").unwrap();
        assert_eq!(ids, vec![1, 2]);
    }

    #[test]
    fn marker_collision_rejected() {
        let err = TemplateTokenizer::from_templates(&[format!("series {MARKER_PSEUDO} x")]);
        assert!(err.is_err());
    }

    #[test]
    fn same_seed_same_checksum_different_seed_differs() {
        let a = small_backbone(7);
        let b = small_backbone(7);
        let c = small_backbone(8);
        assert_eq!(a.weights_sha256(), b.weights_sha256());
        assert_ne!(a.weights_sha256(), c.weights_sha256());
    }

    #[test]
    fn weight_std_is_near_configured() {
        let bb = init_backbone(BackboneConfig::default(), test_tokenizer()).unwrap();
        let mut values = Vec::new();
        for rec in bb.weights_container().records() {
            values.extend_from_slice(&rec.data);
        }
        assert!(values.len() >= 10_000, "need >= 1e4 draws, got {}", values.len());
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / values.len() as f64;
        let std = var.sqrt();
        assert!((0.015..=0.025).contains(&std), "std {std}");
    }

    #[test]
    fn forward_preserves_shape() {
        let bb = small_backbone(3);
        let mut tape = Tape::new();
        let seq = Tensor::randn(vec![5, 16], 1.0, &mut crate::rng::seeded(1));
        let out = bb.forward(&mut tape, &seq).unwrap();
        assert_eq!(out.shape(), &[5, 16]);
    }

    #[test]
    fn forward_rejects_overlong_sequences() {
        let bb = small_backbone(3);
        let mut tape = Tape::new();
        let seq = Tensor::zeros(vec![33, 16]);
        assert!(matches!(
            bb.forward(&mut tape, &seq),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn causal_mask_blocks_future_positions_bit_exactly() {
        let bb = small_backbone(5);
        let mut rng = crate::rng::seeded(2);
        let base = Tensor::randn(vec![6, 16], 1.0, &mut rng);
        let mut tape = Tape::new();
        let out_base = bb.forward(&mut tape, &base).unwrap().to_vec();

        // Perturb position t = 4: outputs at positions < 4 must be identical
        // to the last bit; position >= 4 must change.
        let mut data = base.to_vec();
        for j in 0..16 {
            data[4 * 16 + j] += 0.75;
        }
        let perturbed = Tensor::from_vec(vec![6, 16], data).unwrap();
        let mut tape = Tape::new();
        let out_pert = bb.forward(&mut tape, &perturbed).unwrap().to_vec();

        for pos in 0..4 {
            for j in 0..16 {
                assert_eq!(
                    out_base[pos * 16 + j].to_bits(),
                    out_pert[pos * 16 + j].to_bits(),
                    "position {pos} changed"
                );
            }
        }
        assert!(
            (0..16).any(|j| out_base[4 * 16 + j] != out_pert[4 * 16 + j]),
            "perturbed position must change"
        );
    }

    #[test]
    fn forward_is_deterministic() {
        let bb = small_backbone(9);
        let seq = Tensor::randn(vec![4, 16], 0.5, &mut crate::rng::seeded(4));
        let run = || {
            let mut tape = Tape::new();
            bb.forward(&mut tape, &seq)
                .unwrap()
                .to_vec()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn embed_text_contracts() {
        let bb = small_backbone(1);
        let empty = bb.embed_text(&[]).unwrap();
        assert_eq!(empty.shape(), &[0, 16]);

        let twice = bb.embed_text(&[2, 2]).unwrap();
        let v = twice.to_vec();
        assert_eq!(&v[..16], &v[16..]);

        // lookup row equals table row exactly
        let one = bb.embed_text(&[3]).unwrap();
        assert_eq!(one.to_vec(), bb.token_table[3 * 16..4 * 16].to_vec());

        assert!(matches!(bb.embed_text(&[999]), Err(Error::UnknownToken(999))));
    }

    #[test]
    fn positional_encoding_first_row_alternates_zero_one() {
        let bb = small_backbone(1);
        let pos = bb.positional_slice(2).unwrap();
        let v = pos.to_vec();
        for i in 0..8 {
            assert_eq!(v[2 * i], 0.0);
            assert_eq!(v[2 * i + 1], 1.0);
        }
    }
}
