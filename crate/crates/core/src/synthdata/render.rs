use serde::{Deserialize, Serialize};

use super::{Example, Token, CANDIDATE_MARK, PAD, QUESTION_MARK, SEGMENT_MARK};
use crate::encoder::{EncoderConfig, SegmentMark, SegmentRole, SentinelLayout};
use crate::error::{Error, Result};

/// Teacher inputs carry the evidence segment; student inputs do not.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Teacher,
    Student,
}

impl std::str::FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(View::Teacher),
            "student" => Ok(View::Student),
            other => Err(Error::Config(format!(
                "unknown view {other:?} (expected teacher or student)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RenderedInput {
    pub token_ids: Vec<Token>,
    pub mask: Vec<bool>,
    pub layout: SentinelLayout,
}

impl RenderedInput {
    /// Appends masked padding up to `len` tokens.
    pub fn padded(mut self, len: usize) -> Self {
        if len > self.token_ids.len() {
            let extra = len - self.token_ids.len();
            self.token_ids.extend(std::iter::repeat_n(PAD, extra));
            self.mask.extend(std::iter::repeat_n(false, extra));
        }
        self
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Lays out `<1> c1 <1> c2 <1> c3 <2> <3> question [<2> evidence] <2> document`.
///
/// The evidence segment appears only in the teacher view. When the sequence
/// exceeds `max_len`, document tokens are dropped from the tail; everything
/// before them always survives. No padding is added.
pub fn render_input(example: &Example, view: View, config: &EncoderConfig) -> Result<RenderedInput> {
    let render_err = |reason: String| Error::Render {
        id: example.id,
        reason,
    };
    if example.candidates.len() != config.n_candidates {
        return Err(render_err(format!(
            "{} candidates, encoder expects {}",
            example.candidates.len(),
            config.n_candidates
        )));
    }

    let mut tokens = Vec::with_capacity(config.max_len);
    let mut candidate_marks = Vec::with_capacity(config.n_candidates);
    for cand in &example.candidates {
        candidate_marks.push(tokens.len());
        tokens.push(CANDIDATE_MARK);
        tokens.extend(cand);
    }
    let mut segment_marks = vec![SegmentMark {
        position: tokens.len(),
        role: SegmentRole::Question,
    }];
    tokens.push(SEGMENT_MARK);
    let question_start = tokens.len();
    tokens.push(QUESTION_MARK);
    tokens.extend(&example.question);
    if view == View::Teacher {
        segment_marks.push(SegmentMark {
            position: tokens.len(),
            role: SegmentRole::Evidence,
        });
        tokens.push(SEGMENT_MARK);
        tokens.extend(&example.evidence);
    }
    segment_marks.push(SegmentMark {
        position: tokens.len(),
        role: SegmentRole::Document,
    });
    tokens.push(SEGMENT_MARK);

    if tokens.len() > config.max_len {
        return Err(render_err(format!(
            "{} tokens before the document exceed max_len {}",
            tokens.len(),
            config.max_len
        )));
    }
    let budget = config.max_len - tokens.len();
    tokens.extend(example.document.iter().take(budget));

    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(render_err(format!(
            "token {bad} outside vocabulary of size {}",
            config.vocab_size
        )));
    }

    let mask = vec![true; tokens.len()];
    Ok(RenderedInput {
        token_ids: tokens,
        mask,
        layout: SentinelLayout {
            candidate_marks,
            segment_marks,
            question_start,
        },
    })
}
