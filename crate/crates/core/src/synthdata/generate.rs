use std::collections::HashSet;
use std::ops::Range;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;

use super::{DatasetSpec, Example, Token};
use crate::error::Result;
use crate::rng;

/// Generates `spec.n_examples` examples with ids `0..n`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<Example>> {
    generate_range(spec, 0..spec.n_examples as u64)
}

/// Examples are seeded independently, so any sub-range matches the
/// corresponding slice of the full dataset.
pub fn generate_range(spec: &DatasetSpec, ids: Range<u64>) -> Result<Vec<Example>> {
    spec.validate()?;
    Ok(ids.map(|id| build(spec, id)).collect())
}

pub fn generate_example(spec: &DatasetSpec, id: u64) -> Result<Example> {
    spec.validate()?;
    Ok(build(spec, id))
}

fn build(spec: &DatasetSpec, id: u64) -> Example {
    let vocab = spec.vocab();
    let mut rng = rng::rng(rng::derive(spec.seed, id));
    let k = spec.facts_per_doc;

    let query = (
        rng.random_range(0..spec.n_subjects),
        rng.random_range(0..spec.n_relations),
    );
    let mut keys = vec![query];
    if spec.confuser {
        let mut r = rng.random_range(0..spec.n_relations - 1);
        if r >= query.1 {
            r += 1;
        }
        keys.push((query.0, r));
    }
    let mut seen: HashSet<(u32, u32)> = keys.iter().copied().collect();
    while keys.len() < k {
        let key = (
            rng.random_range(0..spec.n_subjects),
            rng.random_range(0..spec.n_relations),
        );
        if seen.insert(key) {
            keys.push(key);
        }
    }
    let objects: Vec<u32> = index::sample(&mut rng, spec.n_objects as usize, k)
        .into_iter()
        .map(|o| o as u32)
        .collect();

    // fact 0 is queried; fact 1 is the confuser when enabled
    let distractor_facts: [usize; 2] = if spec.confuser {
        [1, rng.random_range(2..k)]
    } else {
        let pick = index::sample(&mut rng, k - 1, 2);
        [pick.index(0) + 1, pick.index(1) + 1]
    };

    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut rng);
    let document: Vec<Token> = order
        .iter()
        .flat_map(|&f| {
            let (s, r) = keys[f];
            [vocab.subject(s), vocab.relation(r), vocab.object(objects[f])]
        })
        .collect();

    let answer = vocab.object(objects[0]);
    let mut candidates = vec![
        answer,
        vocab.object(objects[distractor_facts[0]]),
        vocab.object(objects[distractor_facts[1]]),
    ];
    candidates.shuffle(&mut rng);
    let label = candidates
        .iter()
        .position(|&c| c == answer)
        .expect("answer among candidates");

    let paraphrased = rng.random_bool(spec.paraphrase_rate);
    let relation = if paraphrased {
        vocab.paraphrase(query.1)
    } else {
        vocab.relation(query.1)
    };

    Example {
        id,
        document,
        question: vec![vocab.subject(query.0), vocab.relation(query.1)],
        candidates: candidates.into_iter().map(|c| vec![c]).collect(),
        evidence: vec![vocab.subject(query.0), relation, answer],
        label,
        paraphrased,
    }
}
