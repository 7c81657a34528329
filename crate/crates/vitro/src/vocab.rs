//! The learned time-series vocabulary: one pseudo-word embedding per training
//! window plus a shared dataset embedding, template management, prompt
//! assembly, and embedding export.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::autodiff::{Tape, Tensor};
use crate::backbone::{FrozenBackbone, PSEUDO_SLOT, SHARED_SLOT};
use crate::checkpoint::CheckpointContainer;
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_TEMPLATES: [&str; 2] = [
    "The time series is {P} , The dataset is {S}",
    "Forecast the next steps of {P}",
];

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq)]
enum TemplatePart {
    Words(Vec<String>),
    Pseudo,
    Shared,
}

/// A prompt template with its `{P}` / `{S}` slots parsed out. Exactly one
/// pseudo slot, at most one shared slot.
#[derive(Debug, Clone)]
pub struct Template {
    text: String,
    parts: Vec<TemplatePart>,
    token_len: usize,
    has_shared: bool,
}

impl Template {
    pub fn parse(text: &str) -> Result<Template> {
        let mut parts = Vec::new();
        let mut pseudo = 0;
        let mut shared = 0;
        let mut token_len = 0;
        let mut run: Vec<String> = Vec::new();
        for word in text.split_whitespace() {
            token_len += 1;
            match word {
                PSEUDO_SLOT => {
                    if !run.is_empty() {
                        parts.push(TemplatePart::Words(std::mem::take(&mut run)));
                    }
                    parts.push(TemplatePart::Pseudo);
                    pseudo += 1;
                }
                SHARED_SLOT => {
                    if !run.is_empty() {
                        parts.push(TemplatePart::Words(std::mem::take(&mut run)));
                    }
                    parts.push(TemplatePart::Shared);
                    shared += 1;
                }
                other => run.push(other.to_string()),
            }
        }
        if !run.is_empty() {
            parts.push(TemplatePart::Words(run));
        }
        if pseudo != 1 {
            return Err(Error::Config(format!(
                "template '{text}' must contain the {PSEUDO_SLOT} slot exactly once, found {pseudo}"
            )));
        }
        if shared > 1 {
            return Err(Error::Config(format!(
                "template '{text}' may contain the {SHARED_SLOT} slot at most once, found {shared}"
            )));
        }
        Ok(Template {
            text: text.to_string(),
            parts,
            token_len,
            has_shared: shared == 1,
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn token_len(&self) -> usize {
        self.token_len
    }

    pub fn has_shared(&self) -> bool {
        self.has_shared
    }
}

/// One sequence segment of an assembled prompt, in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Text(usize),
    Pseudo,
    Shared,
    Stats,
    Patches(usize),
}

/// Where everything sits in the assembled input sequence. Patch positions are
/// contiguous and end at the last position, so under causal masking every
/// patch sees the whole prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLayout {
    pub segments: Vec<Segment>,
    pub patch_positions: Range<usize>,
    pub total_len: usize,
}

/// Matrix V of pseudo-word embeddings (row i belongs to training window i)
/// plus the shared dataset embedding s. Both are trainable in stage 1 and
/// frozen in stage 2.
pub struct Vocabulary {
    v: Tensor,
    s: Tensor,
    templates: Vec<Template>,
}

pub fn new_vocabulary(
    n: usize,
    dim: usize,
    seed: u64,
    templates: &[String],
) -> Result<Vocabulary> {
    if n == 0 {
        return Err(Error::Config("vocabulary needs at least one window".into()));
    }
    let parsed: Vec<Template> = templates
        .iter()
        .map(|t| Template::parse(t))
        .collect::<Result<_>>()?;
    if parsed.is_empty() {
        return Err(Error::Config("template set must not be empty".into()));
    }
    let mut rng = rng::seeded(seed);
    let v = Tensor::randn(vec![n, dim], INIT_STD, &mut rng).trainable();
    let s = Tensor::randn(vec![1, dim], INIT_STD, &mut rng).trainable();
    Ok(Vocabulary {
        v,
        s,
        templates: parsed,
    })
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.v.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.v.cols()
    }

    pub fn v(&self) -> &Tensor {
        &self.v
    }

    pub fn s(&self) -> &Tensor {
        &self.s
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    /// Row of V holding window `id`'s pseudo-word.
    pub fn row_of(&self, window_id: usize) -> Result<usize> {
        if window_id < self.len() {
            Ok(window_id)
        } else {
            Err(Error::UnknownWindow(window_id))
        }
    }

    /// Builds the stage-1 input sequence
    /// `[spliced template text; e_stats; patches]` with sinusoidal positions
    /// added, and reports the layout. The pseudo/shared slots are live tape
    /// references into V and s, so gradients reach them; the surrounding text
    /// rows come from the frozen token table.
    pub fn assemble_prompt(
        &self,
        tape: &mut Tape,
        patch_emb: &Tensor,
        window_id: usize,
        template_idx: usize,
        e_stats: &Tensor,
        backbone: &FrozenBackbone,
    ) -> Result<(Tensor, PromptLayout)> {
        let row = self.row_of(window_id)?;
        let template = self.templates.get(template_idx).ok_or_else(|| {
            Error::Config(format!(
                "template index {template_idx} out of range ({} templates)",
                self.templates.len()
            ))
        })?;

        let mut pieces: Vec<Tensor> = Vec::new();
        let mut segments: Vec<Segment> = Vec::new();
        for part in &template.parts {
            match part {
                TemplatePart::Words(words) => {
                    let ids: Vec<usize> = words
                        .iter()
                        .map(|w| backbone.tokenizer().id_of(w))
                        .collect::<Result<_>>()?;
                    pieces.push(backbone.embed_text(&ids)?);
                    segments.push(Segment::Text(words.len()));
                }
                TemplatePart::Pseudo => {
                    pieces.push(tape.lookup_rows(&self.v, &[row])?);
                    segments.push(Segment::Pseudo);
                }
                TemplatePart::Shared => {
                    pieces.push(self.s.clone());
                    segments.push(Segment::Shared);
                }
            }
        }
        pieces.push(e_stats.clone());
        segments.push(Segment::Stats);
        let patch_count = patch_emb.rows();
        pieces.push(patch_emb.clone());
        segments.push(Segment::Patches(patch_count));

        let refs: Vec<&Tensor> = pieces.iter().collect();
        let seq = tape.concat_rows(&refs)?;
        let total_len = seq.rows();
        debug_assert_eq!(total_len, template.token_len() + 1 + patch_count);
        let pos = backbone.positional_slice(total_len)?;
        let seq = tape.add(&seq, &pos)?;

        let layout = PromptLayout {
            segments,
            patch_positions: (total_len - patch_count)..total_len,
            total_len,
        };
        Ok((seq, layout))
    }

    /// Writes V and s as named tensors in the checkpoint container plus a CSV
    /// (header `dim_0..dim_{d-1}`, one line per pseudo-word, final line s).
    /// CSV values use shortest-roundtrip decimal formatting, so parsing them
    /// back reproduces the tensor bits.
    pub fn export_embeddings(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let mut container = CheckpointContainer::new();
        self.write_into(&mut container)?;
        let container_path = dir.join("vocabulary.vckpt");
        container.save(&container_path)?;

        let csv_path = dir.join("vocabulary.csv");
        fs::write(&csv_path, self.embeddings_csv())?;
        Ok((csv_path, container_path))
    }

    pub fn embeddings_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::new();
        let header: Vec<String> = (0..d).map(|i| format!("dim_{i}")).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        let vd = self.v.data();
        for i in 0..self.len() {
            let row: Vec<String> = vd[i * d..(i + 1) * d].iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        drop(vd);
        let srow: Vec<String> = self.s.data().iter().map(|v| v.to_string()).collect();
        out.push_str(&srow.join(","));
        out.push('\n');
        out
    }

    pub fn write_into(&self, container: &mut CheckpointContainer) -> Result<()> {
        container.push_tensor("vocabulary/v", &self.v)?;
        container.push_tensor("vocabulary/s", &self.s)
    }

    /// Same shared embedding and templates, different pseudo-word matrix.
    /// Used by the vocabulary comparison baseline.
    pub fn with_v(&self, v: Tensor) -> Result<Vocabulary> {
        if v.shape() != self.v.shape() {
            return Err(Error::DimMismatch {
                op: "with_v",
                lhs: v.shape().to_vec(),
                rhs: self.v.shape().to_vec(),
            });
        }
        Ok(Vocabulary {
            v,
            s: self.s.clone(),
            templates: self.templates.clone(),
        })
    }

    pub fn read_from(container: &CheckpointContainer, templates: &[String]) -> Result<Vocabulary> {
        let v = container.get_tensor("vocabulary/v")?.trainable();
        let s = container.get_tensor("vocabulary/s")?.trainable();
        let parsed: Vec<Template> = templates
            .iter()
            .map(|t| Template::parse(t))
            .collect::<Result<_>>()?;
        Ok(Vocabulary {
            v,
            s,
            templates: parsed,
        })
    }
}

pub fn default_templates() -> Vec<String> {
    DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_backbone, BackboneConfig, TemplateTokenizer};
    use crate::checkpoint::sha256_hex;

    fn checksum(t: &Tensor) -> String {
        let bytes: Vec<u8> = t.to_vec().iter().flat_map(|v| v.to_le_bytes()).collect();
        sha256_hex(&bytes)
    }

    fn backbone_for(templates: &[String], dim: usize) -> FrozenBackbone {
        init_backbone(
            BackboneConfig {
                dim,
                heads: 2,
                layers: 1,
                max_seq: 64,
                seed: 11,
            },
            TemplateTokenizer::from_templates(templates).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn template_slot_rules() {
        assert!(Template::parse("no pseudo slot here").is_err());
        assert!(Template::parse("two {P} slots {P}").is_err());
        assert!(Template::parse("{P} with {S} twice {S}").is_err());
        let t = Template::parse("The time series is {P}").unwrap();
        assert_eq!(t.token_len(), 5);
        assert!(!t.has_shared());
    }

    #[test]
    fn same_seed_identical_vocab_checksum() {
        let a = new_vocabulary(4, 8, 99, &default_templates()).unwrap();
        let b = new_vocabulary(4, 8, 99, &default_templates()).unwrap();
        assert_eq!(checksum(a.v()), checksum(b.v()));
        assert_eq!(checksum(a.s()), checksum(b.s()));
    }

    #[test]
    fn single_window_maps_to_row_zero() {
        let voc = new_vocabulary(1, 8, 1, &default_templates()).unwrap();
        assert_eq!(voc.len(), 1);
        assert_eq!(voc.row_of(0).unwrap(), 0);
        assert!(matches!(voc.row_of(1), Err(Error::UnknownWindow(1))));
    }

    #[test]
    fn rows_are_pairwise_distinct_at_init() {
        for seed in 0..100 {
            let voc = new_vocabulary(6, 8, seed, &default_templates()).unwrap();
            let d = voc.dim();
            let data = voc.v().to_vec();
            for i in 0..6 {
                for j in (i + 1)..6 {
                    assert_ne!(
                        &data[i * d..(i + 1) * d],
                        &data[j * d..(j + 1) * d],
                        "seed {seed}: rows {i} and {j} collide"
                    );
                }
            }
        }
    }

    #[test]
    fn layout_length_counts_segments() {
        // 7 words + 2 slots + 1 stats + 4 patches = 14
        let templates = vec!["a b c {P} d e f g {S}".to_string()];
        let bb = backbone_for(&templates, 8);
        let voc = new_vocabulary(2, 8, 5, &templates).unwrap();
        let mut tape = Tape::new();
        let patches = Tensor::zeros(vec![4, 8]);
        let stats = Tensor::zeros(vec![1, 8]);
        let (seq, layout) = voc
            .assemble_prompt(&mut tape, &patches, 0, 0, &stats, &bb)
            .unwrap();
        assert_eq!(layout.total_len, 14);
        assert_eq!(seq.shape(), &[14, 8]);
        assert_eq!(layout.patch_positions, 10..14);
        assert_eq!(layout.patch_positions.len(), 4);
    }

    #[test]
    fn unknown_window_id_is_a_lookup_error() {
        let templates = default_templates();
        let bb = backbone_for(&templates, 8);
        let voc = new_vocabulary(2, 8, 5, &templates).unwrap();
        let mut tape = Tape::new();
        let patches = Tensor::zeros(vec![2, 8]);
        let stats = Tensor::zeros(vec![1, 8]);
        let err = voc
            .assemble_prompt(&mut tape, &patches, 7, 0, &stats, &bb)
            .unwrap_err();
        assert!(matches!(err, Error::UnknownWindow(7)));
    }

    #[test]
    fn gradients_route_only_to_the_windows_row() {
        let templates = default_templates();
        let bb = backbone_for(&templates, 8);
        let voc = new_vocabulary(3, 8, 5, &templates).unwrap();
        let mut tape = Tape::new();
        let patches = Tensor::randn(vec![2, 8], 0.5, &mut crate::rng::seeded(1));
        let stats = Tensor::zeros(vec![1, 8]);
        let (seq, _) = voc
            .assemble_prompt(&mut tape, &patches, 1, 0, &stats, &bb)
            .unwrap();
        let out = bb.forward(&mut tape, &seq).unwrap();
        let loss = tape.mean_all(&out).unwrap();
        tape.backward(&loss).unwrap();

        let g = voc.v().grad().expect("v must receive gradient");
        let d = voc.dim();
        assert!(g[d..2 * d].iter().any(|x| *x != 0.0), "row 1 must get gradient");
        assert!(g[..d].iter().all(|x| *x == 0.0), "row 0 must stay zero");
        assert!(g[2 * d..].iter().all(|x| *x == 0.0), "row 2 must stay zero");

        // template 0 contains {S}, so s gets gradient too
        let gs = voc.s().grad().expect("s must receive gradient");
        assert!(gs.iter().any(|x| *x != 0.0));
    }

    #[test]
    fn template_without_shared_slot_leaves_s_untouched() {
        let templates = default_templates();
        let bb = backbone_for(&templates, 8);
        let voc = new_vocabulary(2, 8, 5, &templates).unwrap();
        let mut tape = Tape::new();
        let patches = Tensor::randn(vec![2, 8], 0.5, &mut crate::rng::seeded(2));
        let stats = Tensor::zeros(vec![1, 8]);
        // template 1 is "Forecast the next steps of {P}"
        let (seq, _) = voc
            .assemble_prompt(&mut tape, &patches, 0, 1, &stats, &bb)
            .unwrap();
        let out = bb.forward(&mut tape, &seq).unwrap();
        let loss = tape.mean_all(&out).unwrap();
        tape.backward(&loss).unwrap();
        assert!(voc.s().grad().is_none());
    }

    #[test]
    fn splice_preserves_surrounding_token_embeddings_bit_exactly() {
        let templates = default_templates();
        let bb = backbone_for(&templates, 8);
        let voc = new_vocabulary(2, 8, 5, &templates).unwrap();
        let mut tape = Tape::new();
        let patches = Tensor::zeros(vec![2, 8]);
        let stats = Tensor::zeros(vec![1, 8]);
        let (seq, layout) = voc
            .assemble_prompt(&mut tape, &patches, 0, 0, &stats, &bb)
            .unwrap();
        let seq_data = seq.to_vec();
        let pos = bb.positional_slice(layout.total_len).unwrap().to_vec();

        // embed the template with slots removed; each surviving word row must
        // appear in the sequence bit-exactly (up to the same `+ position`
        // the assembly applies)
        let text_no_slots: Vec<&str> = DEFAULT_TEMPLATES[0]
            .split_whitespace()
            .filter(|w| *w != PSEUDO_SLOT && *w != SHARED_SLOT)
            .collect();
        let ids: Vec<usize> = text_no_slots
            .iter()
            .map(|w| bb.tokenizer().id_of(w).unwrap())
            .collect();
        let reference = bb.embed_text(&ids).unwrap().to_vec();

        let d = 8;
        let mut seq_pos = 0;
        let mut ref_row = 0;
        for segment in &layout.segments {
            match segment {
                Segment::Text(count) => {
                    for _ in 0..*count {
                        for j in 0..d {
                            let got = seq_data[seq_pos * d + j];
                            let want = reference[ref_row * d + j] + pos[seq_pos * d + j];
                            assert_eq!(got.to_bits(), want.to_bits());
                        }
                        seq_pos += 1;
                        ref_row += 1;
                    }
                }
                Segment::Pseudo | Segment::Shared | Segment::Stats => seq_pos += 1,
                Segment::Patches(count) => seq_pos += count,
            }
        }
        assert_eq!(ref_row, text_no_slots.len(), "every word row checked");
    }

    #[test]
    fn export_roundtrip_and_csv_shape() {
        let dir = tempfile::tempdir().unwrap();
        let voc = new_vocabulary(3, 4, 77, &default_templates()).unwrap();
        let (csv_path, container_path) = voc.export_embeddings(dir.path()).unwrap();

        let container = CheckpointContainer::load(&container_path).unwrap();
        let back = Vocabulary::read_from(&container, &default_templates()).unwrap();
        assert_eq!(back.v().to_vec(), voc.v().to_vec());
        assert_eq!(back.s().to_vec(), voc.s().to_vec());

        let csv = fs::read_to_string(&csv_path).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 3 + 1); // header + n rows + s
        assert_eq!(lines[0], "dim_0,dim_1,dim_2,dim_3");

        // parse-back equality
        let mut parsed = Vec::new();
        for line in &lines[1..4] {
            for cell in line.split(',') {
                parsed.push(cell.parse::<f64>().unwrap());
            }
        }
        assert_eq!(parsed, voc.v().to_vec());
    }
}
