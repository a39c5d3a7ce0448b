//! Miniature pre-norm transformer encoder shared by teacher and student,
//! with a per-candidate linear scoring head.

mod checkpoint;
mod forward;
mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use forward::{
    alignment_positions, candidate_logits, extract_alignment_reps, forward, forward_taped,
    head_logits_taped, sum_head_scores, taped_alignment_reps, ForwardTrace, TapedTrace,
};
pub use params::{LayerParams, ModelParams, ParamVars, HEAD_TENSORS};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub n_candidates: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: crate::synthdata::TaskVocab::default().vocab_size(),
            d_model: 32,
            n_layers: 4,
            n_heads: 2,
            d_ff: 64,
            max_len: 128,
            n_candidates: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
            ("n_candidates", self.n_candidates),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers < 2 {
            return Err(Error::Config(format!(
                "n_layers must be at least 2, got {}",
                self.n_layers
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// The middle layer used by multi-layer alignment: `ceil(n_layers / 2)`.
    pub fn mid_layer(&self) -> usize {
        self.n_layers.div_ceil(2)
    }

    pub fn resolve_layer(&self, layer: LayerRef) -> Result<usize> {
        let idx = match layer {
            LayerRef::Mid => self.mid_layer(),
            LayerRef::Last => self.n_layers,
            LayerRef::Index(i) => i,
        };
        if idx > self.n_layers {
            return Err(Error::contract(format!(
                "layer {idx} exceeds n_layers {}",
                self.n_layers
            )));
        }
        Ok(idx)
    }

    /// Resolves, sorts and deduplicates layer references.
    pub fn resolve_layers(&self, layers: &[LayerRef]) -> Result<Vec<usize>> {
        let mut out = layers
            .iter()
            .map(|&l| self.resolve_layer(l))
            .collect::<Result<Vec<_>>>()?;
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }
}

/// A layer of the trace: 0 is the embedding output, `n_layers` the last block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerRef {
    Mid,
    Last,
    Index(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentRole {
    Question,
    Evidence,
    Document,
}

/// Which sentinel occurrences to read from a trace.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SentinelRole {
    /// `<1>`: one mark per candidate answer.
    Candidate,
    /// `<2>` opening the question segment.
    QuestionSegment,
    /// `<2>` opening the evidence segment (teacher view only).
    EvidenceSegment,
    /// `<2>` opening the document segment.
    DocumentSegment,
    /// `<3>`: start of the question.
    QuestionStart,
}

impl SentinelRole {
    fn segment(self) -> Option<SegmentRole> {
        match self {
            SentinelRole::QuestionSegment => Some(SegmentRole::Question),
            SentinelRole::EvidenceSegment => Some(SegmentRole::Evidence),
            SentinelRole::DocumentSegment => Some(SegmentRole::Document),
            _ => None,
        }
    }

    /// Roles aligned by the two-stage method.
    pub fn semantic() -> Vec<SentinelRole> {
        vec![
            SentinelRole::QuestionSegment,
            SentinelRole::DocumentSegment,
            SentinelRole::QuestionStart,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentMark {
    pub position: usize,
    pub role: SegmentRole,
}

/// Positions of the sentinel tokens inside one rendered sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentinelLayout {
    pub candidate_marks: Vec<usize>,
    pub segment_marks: Vec<SegmentMark>,
    pub question_start: usize,
}

impl SentinelLayout {
    /// Checks the layout against a sequence of `len` tokens with the given mask.
    pub fn validate(&self, len: usize, mask: &[bool], n_candidates: usize) -> Result<()> {
        if self.candidate_marks.len() != n_candidates {
            return Err(Error::contract(format!(
                "layout has {} candidate marks, expected {n_candidates}",
                self.candidate_marks.len()
            )));
        }
        let seg: Vec<usize> = self.segment_marks.iter().map(|s| s.position).collect();
        for (name, list) in [("candidate", &self.candidate_marks), ("segment", &seg)] {
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::contract(format!(
                    "{name} marks are not strictly increasing: {list:?}"
                )));
            }
        }
        let all = self
            .candidate_marks
            .iter()
            .chain(&seg)
            .chain(std::iter::once(&self.question_start));
        for &p in all {
            if p >= len {
                return Err(Error::contract(format!(
                    "sentinel position {p} outside sequence of length {len}"
                )));
            }
            if !mask[p] {
                return Err(Error::contract(format!("sentinel position {p} is padding")));
            }
        }
        Ok(())
    }

    pub fn segment(&self, role: SegmentRole) -> Option<usize> {
        self.segment_marks
            .iter()
            .find(|s| s.role == role)
            .map(|s| s.position)
    }

    pub fn has_evidence(&self) -> bool {
        self.segment(SegmentRole::Evidence).is_some()
    }
}
