use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use prol::autograd::Tape;
use prol::data_stream::{split_tasks, LabeledDataset, Sample, StreamSession};
use prol::evaluator::MetricsLedger;
use prol::objectives::{gen_matrix, loss_gen, loss_inter, loss_intra, loss_sim, loss_total, LossComponents, LossWeights};
use prol::prompt::{clamp_class, generate_prompt, match_key, ClassState, PromptConfig, PromptGenerator};
use prol::Tensor;

fn toy(n: usize, classes: usize) -> LabeledDataset {
    let samples = (0..n).map(|i| Sample { image: Tensor::full([1, 1, 1], i as f64), label: i % classes }).collect();
    LabeledDataset::new(samples, classes).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tasks_partition_classes_and_streams_emit_each_sample_once(
        classes in 2usize..24, tasks_frac in 0.0f64..1.0, per in 1usize..6, chunk in 1usize..9, seed in any::<u64>()
    ) {
        let tasks = 1 + ((classes - 1) as f64 * tasks_frac) as usize;
        let ds = toy(classes * per, classes);
        let seq = split_tasks(&ds, tasks, seed).unwrap();
        prop_assert_eq!(seq.len(), tasks);
        let mut all = BTreeSet::new();
        for t in &seq.tasks {
            prop_assert!(!t.classes.is_empty());
            for &c in &t.classes {
                prop_assert!(all.insert(c), "class {} in two tasks", c);
            }
        }
        prop_assert_eq!(all.len(), classes);

        let mut session = StreamSession::new(ds.len());
        let mut seen = BTreeSet::new();
        for t in &seq.tasks {
            for chunk in session.stream_chunks(&ds, t, chunk, seed).unwrap() {
                let chunk = chunk.unwrap();
                prop_assert!(!chunk.is_empty());
                for (&i, &y) in chunk.indices.iter().zip(&chunk.labels) {
                    prop_assert!(seen.insert(i));
                    prop_assert!(t.classes.contains(&y));
                }
            }
        }
        prop_assert_eq!(seen.len(), ds.len());
        prop_assert_eq!(session.violations(), 0);
    }

    #[test]
    fn clamp_projects_into_bounds_and_keeps_interior(
        vals in prop::collection::vec(-3.0f64..3.0, 16), eps_a in 0.01f64..0.9, eps_b in 0.01f64..0.9
    ) {
        let mut c = ClassState::new(0, 4, 5, 1, 0).unwrap();
        c.a_k = Tensor::vector(vals[0..4].to_vec());
        c.b_k = Tensor::vector(vals[4..8].to_vec());
        c.a_v = Tensor::vector(vals[8..12].to_vec());
        c.b_v = Tensor::vector(vals[12..16].to_vec());
        let before = c.clone();
        clamp_class(&mut c, eps_a, eps_b);
        prop_assert!(c.within_bounds(eps_a, eps_b));
        let pairs = [(&before.a_k, &c.a_k, 1.0, eps_a), (&before.a_v, &c.a_v, 1.0, eps_a),
                     (&before.b_k, &c.b_k, 0.0, eps_b), (&before.b_v, &c.b_v, 0.0, eps_b)];
        for (old, new, centre, eps) in pairs {
            for (&o, &n) in old.data().iter().zip(new.data()) {
                if (o - centre).abs() <= eps {
                    prop_assert_eq!(o, n);
                }
            }
        }
    }

    #[test]
    fn generator_parameter_count_formula(layers in 1usize..13, heads in 1usize..13, seed in any::<u64>()) {
        let g = PromptGenerator::init(&(0..layers).collect::<Vec<_>>(), heads, seed).unwrap();
        prop_assert_eq!(g.param_count(), 2 * layers * heads * 3);
    }

    #[test]
    fn masked_logits_have_no_influence(
        base in prop::collection::vec(-5.0f64..5.0, 18), noise in prop::collection::vec(-50.0f64..50.0, 18)
    ) {
        let targets = [1usize, 3, 1];
        let current = [1usize, 3];
        let seen = [0usize, 1, 3, 4];
        let eval = |data: &[f64]| {
            let tape = Tape::new();
            let l = tape.constant(Tensor::matrix(3, 6, data.to_vec()));
            (loss_intra(l, &targets, &current).unwrap().item(), loss_inter(l, &targets, &seen).unwrap().item())
        };
        let (intra, inter) = eval(&base);
        let mut p_intra = base.clone();
        let mut p_inter = base.clone();
        for r in 0..3 {
            for c in 0..6 {
                if !current.contains(&c) { p_intra[r * 6 + c] += noise[r * 6 + c]; }
                if !seen.contains(&c) { p_inter[r * 6 + c] += noise[r * 6 + c]; }
            }
        }
        prop_assert_eq!(eval(&p_intra).0.to_bits(), intra.to_bits());
        prop_assert_eq!(eval(&p_inter).1.to_bits(), inter.to_bits());
    }

    #[test]
    fn gen_loss_is_non_negative(
        a in prop::collection::vec(-3.0f64..3.0, 15), b in prop::collection::vec(-3.0f64..3.0, 15), std in any::<bool>()
    ) {
        let tape = Tape::new();
        let m = gen_matrix(tape.constant(Tensor::matrix(5, 3, a)), tape.constant(Tensor::matrix(5, 3, b)), std).unwrap();
        prop_assert!(loss_gen(m).unwrap().item() >= 0.0);
    }

    #[test]
    fn sim_loss_lies_in_unit_range(q in prop::collection::vec(-10.0f64..10.0, 6), k in prop::collection::vec(-10.0f64..10.0, 6)) {
        let tape = Tape::new();
        let v = loss_sim(tape.constant(Tensor::vector(q)), tape.constant(Tensor::vector(k))).item();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v));
    }

    #[test]
    fn total_loss_is_linear_in_the_weights(
        parts in prop::collection::vec(-5.0f64..5.0, 5), w in prop::collection::vec(0.0f64..2.0, 5), k in 0.0f64..4.0
    ) {
        let c = LossComponents { intra: parts[0], inter: parts[1], sim: parts[2], ort: parts[3], gen: parts[4] };
        let w = LossWeights { intra: w[0], inter: w[1], sim: w[2], ort: w[3], gen: w[4] };
        let one = loss_total(&c, &w).total;
        let scaled = loss_total(&c, &w.scaled(k)).total;
        prop_assert!((scaled - k * one).abs() <= 1e-9 * (1.0 + scaled.abs()));
    }

    #[test]
    fn faa_is_the_last_column_mean(cols in 1usize..7, vals in prop::collection::vec(0.0f64..100.0, 28)) {
        let columns: Vec<Vec<f64>> = (1..=cols).map(|t| vals[t * (t - 1) / 2..][..t].to_vec()).collect();
        let ledger = MetricsLedger::from_columns(&columns).unwrap();
        let last = &columns[cols - 1];
        let mean = last.iter().sum::<f64>() / cols as f64;
        prop_assert!((ledger.faa().unwrap() - mean).abs() < 1e-9);
    }

    #[test]
    fn ffm_non_negative_when_rows_never_improve(cols in 2usize..7, drops in prop::collection::vec(0.0f64..20.0, 28)) {
        let mut columns: Vec<Vec<f64>> = Vec::new();
        for t in 0..cols {
            let col = (0..=t).map(|i| {
                let prev = if i < t { columns[t - 1][i] } else { 95.0 };
                (prev - drops[(t * 7 + i) % drops.len()] * f64::from(u8::from(i < t))).max(0.0)
            }).collect();
            columns.push(col);
        }
        let ledger = MetricsLedger::from_columns(&columns).unwrap();
        prop_assert!(ledger.ffm().unwrap() >= 0.0);
    }

    #[test]
    fn key_matching_ignores_query_scale(q in prop::collection::vec(-3.0f64..3.0, 8), k in 0.01f64..100.0, seed in 0u64..50) {
        prop_assume!(q.iter().any(|v| v.abs() > 1e-3));
        let classes: BTreeMap<usize, ClassState> = (0..5).map(|c| (c, ClassState::new(c, 8, 3, 1, seed).unwrap())).collect();
        let scope: Vec<usize> = classes.keys().copied().collect();
        let scaled: Vec<f64> = q.iter().map(|v| v * k).collect();
        let (a, sa) = match_key(&q, &classes, &scope).unwrap();
        let (b, sb) = match_key(&scaled, &classes, &scope).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((sa - sb).abs() < 1e-9);
    }

    #[test]
    fn first_prompt_position_is_linear_in_the_gate(q in prop::collection::vec(-2.0f64..2.0, 8), s in -1.0f64..1.0, seed in 0u64..50) {
        let config = PromptConfig { length: 3, injected_layers: vec![0], eps_a: 0.2, eps_b: 0.1, match_source: Default::default() };
        let generator = PromptGenerator::init(&[0], 2, seed).unwrap();
        let class = ClassState::new(0, 8, 3, 1, seed).unwrap();
        let unit = generate_prompt(&q, &class, 1.0, &generator, &config).unwrap();
        let gated = generate_prompt(&q, &class, s, &generator, &config).unwrap();
        for (u, g) in unit.keys.iter().chain(&unit.values).zip(gated.keys.iter().chain(&gated.values)) {
            for (x, y) in u.data().iter().zip(g.data()) {
                prop_assert!((s * x - y).abs() < 1e-12);
            }
        }
    }
}
