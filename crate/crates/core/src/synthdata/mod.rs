//! Synthetic evidence-annotated multiple-choice tasks.
//!
//! A document is a shuffled list of `(subject, relation, object)` facts with
//! distinct `(subject, relation)` keys. The question names one key, the three
//! candidates are objects from the same document, and the evidence is the
//! queried fact, optionally with its relation swapped for a paraphrase token
//! that never occurs in any document.

mod generate;
mod jsonl;
mod render;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use generate::{generate_dataset, generate_example, generate_range};
pub use jsonl::{read_jsonl, write_jsonl};
pub use render::{render_input, RenderedInput, View};

pub type Token = u32;

pub const PAD: Token = 0;
/// `<1>`: precedes each candidate answer.
pub const CANDIDATE_MARK: Token = 1;
/// `<2>`: opens the question, evidence and document segments.
pub const SEGMENT_MARK: Token = 2;
/// `<3>`: start of the question.
pub const QUESTION_MARK: Token = 3;
const FIRST_CONTENT: Token = 4;

/// Disjoint token-id ranges: sentinels, subjects, relations, objects, and
/// paraphrase relations (one per relation).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskVocab {
    pub n_subjects: u32,
    pub n_relations: u32,
    pub n_objects: u32,
}

impl Default for TaskVocab {
    fn default() -> Self {
        let spec = DatasetSpec::default();
        spec.vocab()
    }
}

impl TaskVocab {
    pub fn subject(&self, i: u32) -> Token {
        debug_assert!(i < self.n_subjects);
        FIRST_CONTENT + i
    }

    pub fn relation(&self, i: u32) -> Token {
        debug_assert!(i < self.n_relations);
        FIRST_CONTENT + self.n_subjects + i
    }

    pub fn object(&self, i: u32) -> Token {
        debug_assert!(i < self.n_objects);
        FIRST_CONTENT + self.n_subjects + self.n_relations + i
    }

    /// Paraphrase token standing in for relation index `i`.
    pub fn paraphrase(&self, i: u32) -> Token {
        debug_assert!(i < self.n_relations);
        FIRST_CONTENT + self.n_subjects + self.n_relations + self.n_objects + i
    }

    pub fn vocab_size(&self) -> usize {
        (FIRST_CONTENT + self.n_subjects + 2 * self.n_relations + self.n_objects) as usize
    }

    pub fn is_relation(&self, t: Token) -> bool {
        (self.relation(0)..self.relation(0) + self.n_relations).contains(&t)
    }

    pub fn is_paraphrase(&self, t: Token) -> bool {
        (self.paraphrase(0)..self.paraphrase(0) + self.n_relations).contains(&t)
    }

    /// Maps a paraphrase token back to the relation it stands for; other
    /// tokens pass through unchanged.
    pub fn deparaphrase(&self, t: Token) -> Token {
        if self.is_paraphrase(t) {
            self.relation(t - self.paraphrase(0))
        } else {
            t
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    pub document: Vec<Token>,
    pub question: Vec<Token>,
    pub candidates: Vec<Vec<Token>>,
    pub evidence: Vec<Token>,
    pub label: usize,
    pub paraphrased: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    pub n_examples: usize,
    pub facts_per_doc: usize,
    pub n_subjects: u32,
    pub n_relations: u32,
    pub n_objects: u32,
    pub paraphrase_rate: f64,
    /// Adds a fact sharing the queried subject under a different relation,
    /// and uses its object as one distractor.
    pub confuser: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            seed: 0,
            n_examples: 0,
            facts_per_doc: 8,
            n_subjects: 40,
            n_relations: 12,
            n_objects: 40,
            paraphrase_rate: 0.46,
            confuser: true,
        }
    }
}

impl DatasetSpec {
    pub fn vocab(&self) -> TaskVocab {
        TaskVocab {
            n_subjects: self.n_subjects,
            n_relations: self.n_relations,
            n_objects: self.n_objects,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.facts_per_doc;
        if k < 3 {
            return Err(Error::Spec(format!("facts_per_doc must be >= 3, got {k}")));
        }
        let keys = self.n_subjects as usize * self.n_relations as usize;
        if k > keys {
            return Err(Error::Spec(format!(
                "facts_per_doc {k} exceeds the {keys} distinct (subject, relation) keys"
            )));
        }
        if k > self.n_objects as usize {
            return Err(Error::Spec(format!(
                "facts_per_doc {k} exceeds the {} distinct objects",
                self.n_objects
            )));
        }
        if self.confuser && self.n_relations < 2 {
            return Err(Error::Spec("confuser facts need at least 2 relations".into()));
        }
        if !(0.0..=1.0).contains(&self.paraphrase_rate) {
            return Err(Error::Spec(format!(
                "paraphrase_rate {} outside [0, 1]",
                self.paraphrase_rate
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: DatasetSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}
