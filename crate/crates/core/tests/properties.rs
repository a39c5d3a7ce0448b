use proptest::prelude::*;

use mrc_distill::encoder::{read_checkpoint, write_checkpoint, EncoderConfig, ModelParams};
use mrc_distill::eval::{argmax, tally};
use mrc_distill::experiment::{DatasetPair, DatasetSource, ExperimentConfig, ExperimentMatrix, MatrixRow};
use mrc_distill::losses::{self, one_hot};
use mrc_distill::numerics::{softmax, Tape, Tensor};
use mrc_distill::report::render_csv;
use mrc_distill::synthdata::{generate_dataset, render_input, DatasetSpec, View};
use mrc_distill::training::{lr_schedule, TeacherSchedule};

fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-6.0f64..6.0, n).prop_map(|z| softmax(&z))
}

fn kl(t: &[f64], s: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let sv = tape.leaf(Tensor::from_rows(&[s.to_vec()]).unwrap());
    let out = losses::kl_divergence(&mut tape, t, sv).unwrap();
    tape.value(out).item().unwrap()
}

fn ce(y: &[f64], p: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let pv = tape.leaf(Tensor::from_rows(&[p.to_vec()]).unwrap());
    let out = losses::cross_entropy(&mut tape, y, pv).unwrap();
    tape.value(out).item().unwrap()
}

fn mse(t: &[Vec<f64>], s: &[Vec<f64>]) -> f64 {
    let mut tape = Tape::new();
    let sv = tape.leaf(Tensor::from_rows(s).unwrap());
    let out = losses::mse_alignment(&mut tape, t, sv).unwrap();
    tape.value(out).item().unwrap()
}

fn vectors() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (1usize..4, 1usize..6).prop_flat_map(|(k, d)| {
        let v = prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), k);
        (v.clone(), v)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn kl_is_nonnegative(t in simplex(3), s in simplex(3)) {
        prop_assert!(kl(&t, &s) >= 0.0);
    }

    #[test]
    fn kl_of_equal_inputs_vanishes(t in simplex(4)) {
        prop_assert!(kl(&t, &t).abs() <= 1e-12);
    }
}

proptest! {
    #[test]
    fn kl_separates_distinct_inputs(t in simplex(3), s in simplex(3)) {
        let gap = t.iter().zip(&s).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        prop_assume!(gap > 1e-4);
        prop_assert!(kl(&t, &s) > 1e-12);
    }

    #[test]
    fn cross_entropy_vanishes_only_at_the_gold_vertex(label in 0usize..3, p in simplex(3)) {
        let y = one_hot(label, 3);
        prop_assert!(ce(&y, &y).abs() <= 1e-12);
        prop_assume!(p[label] < 1.0 - 1e-9);
        prop_assert!(ce(&y, &p) > 0.0);
    }

    #[test]
    fn mse_is_nonnegative_and_homogeneous((t, s) in vectors(), c in -4.0f64..4.0) {
        let base = mse(&t, &s);
        prop_assert!(base >= 0.0);
        prop_assert!(mse(&t, &t) == 0.0);
        let scale = |v: &[Vec<f64>]| v.iter().map(|r| r.iter().map(|x| c * x).collect()).collect::<Vec<Vec<f64>>>();
        let scaled = mse(&scale(&t), &scale(&s));
        prop_assert!((scaled - c * c * base).abs() <= 1e-9 * (1.0 + scaled.abs()));
    }

    #[test]
    fn mse_is_positive_when_inputs_differ((t, s) in vectors()) {
        prop_assume!(t != s);
        prop_assert!(mse(&t, &s) > 0.0);
    }

    #[test]
    fn schedule_is_piecewise_constant_and_non_increasing(
        base in 1e-6f64..1e-2,
        halve in 1usize..6,
        gap in 1usize..6,
        extra in 0usize..6,
    ) {
        let s = TeacherSchedule { base_lr: base, halve_epoch: halve, quarter_epoch: halve + gap, epochs: halve + gap + extra };
        let lrs: Vec<f64> = (1..=s.epochs).map(|e| lr_schedule(&s, e).unwrap()).collect();
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        let levels: std::collections::BTreeSet<u64> = lrs.iter().map(|x| x.to_bits()).collect();
        prop_assert!(levels.len() <= 3);
        prop_assert!(lr_schedule(&s, 0).is_err());
        prop_assert!(lr_schedule(&s, s.epochs + 1).is_err());
    }

    #[test]
    fn confusion_counts_are_consistent(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..200)) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let r = tally(&preds, &labels, 3, View::Student).unwrap();
        let total: usize = r.confusion.iter().flatten().sum();
        prop_assert_eq!(total, r.n_examples);
        let trace: usize = (0..3).map(|i| r.confusion[i][i]).sum();
        prop_assert_eq!(r.accuracy, trace as f64 / r.n_examples as f64);
    }

    #[test]
    fn argmax_picks_the_first_maximum(scores in prop::collection::vec(-2i32..3, 1..6)) {
        let s: Vec<f64> = scores.iter().map(|&x| f64::from(x)).collect();
        let i = argmax(&s);
        prop_assert!(s.iter().all(|&x| x <= s[i]));
        prop_assert!(s[..i].iter().all(|&x| x < s[i]));
    }

    #[test]
    fn views_share_candidates_and_question(seed in any::<u64>(), k in 3usize..12) {
        let spec = DatasetSpec { seed, n_examples: 4, facts_per_doc: k, ..DatasetSpec::default() };
        let config = EncoderConfig::default();
        for e in generate_dataset(&spec).unwrap() {
            let s = render_input(&e, View::Student, &config).unwrap();
            let t = render_input(&e, View::Teacher, &config).unwrap();
            prop_assert_eq!(t.len(), s.len() + 1 + e.evidence.len());
            let head = s.layout.question_start + 1 + e.question.len();
            prop_assert_eq!(&s.token_ids[..head], &t.token_ids[..head]);
            prop_assert_eq!(&s.layout.candidate_marks, &t.layout.candidate_marks);
        }
    }

    #[test]
    fn checkpoints_round_trip_byte_identically(seed in any::<u64>()) {
        let config = EncoderConfig { d_model: 4, n_layers: 2, n_heads: 2, d_ff: 8, max_len: 40, ..EncoderConfig::default() };
        let p = ModelParams::init(&config, seed).unwrap();
        let text = write_checkpoint(&p).unwrap();
        let back = read_checkpoint(&text, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(&back, &p);
        prop_assert_eq!(write_checkpoint(&back).unwrap(), text);
    }

    /// Accuracies are counts out of 1000 test examples, so with 1, 2, 4 or 5
    /// seeds every value and mean is exact at six decimals.
    #[test]
    fn csv_parse_back_reproduces_means(
        n_seeds in prop::sample::select(vec![1usize, 2, 4, 5]),
        counts in prop::collection::vec(prop::collection::vec(0u32..=1000, 5), 0..5),
    ) {
        let src = DatasetSource::Spec(DatasetSpec::default());
        let config = ExperimentConfig::from_json(
            &serde_json::json!({ "dataset": DatasetPair { train: src.clone(), test: src } }).to_string(),
        ).unwrap();
        let matrix = ExperimentMatrix {
            config,
            rows: counts.iter().enumerate().map(|(i, c)| {
                let accs: Vec<f64> = c[..n_seeds].iter().map(|&k| f64::from(k) / 1000.0).collect();
                MatrixRow {
                    label: format!("row{i}"),
                    config: serde_json::Value::Null,
                    seeds: (0..n_seeds as u64).collect(),
                    mean: Some(accs.iter().sum::<f64>() / accs.len() as f64),
                    accuracies: accs.into_iter().map(Some).collect(),
                    errors: Vec::new(),
                    records: Vec::new(),
                }
            }).collect(),
        };
        let csv = render_csv(&matrix);
        let mut lines = csv.lines();
        prop_assert_eq!(lines.next(), Some("row_label,seed,accuracy,mean"));
        let mut parsed: std::collections::BTreeMap<String, (f64, Vec<f64>)> = Default::default();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            prop_assert_eq!(f.len(), 4);
            let e = parsed.entry(f[0].to_string()).or_insert((f[3].parse().unwrap(), Vec::new()));
            e.1.push(f[2].parse().unwrap());
        }
        prop_assert_eq!(parsed.len(), matrix.rows.len());
        for row in &matrix.rows {
            let (mean, accs) = &parsed[&row.label];
            let expected = row.mean.unwrap();
            prop_assert!((mean - expected).abs() <= 1e-9);
            let recomputed = accs.iter().sum::<f64>() / accs.len() as f64;
            prop_assert!((recomputed - expected).abs() <= 1e-9);
        }
    }
}
