use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rpp::data::gen_pretrain_corpus;
use rpp::model::{build_model, forward_pretrain, ModelConfig};
use rpp::pattern::{apply_pattern, extract_sparse_pattern, hard_threshold_prune, PruneScope, SparsePattern};
use rpp::protocols::{
    nip_run, penalty_baseline_run, pretrain_run, rpp_run, train_pretrain, FinetuneSettings, OptimSettings, PretrainData,
    PruneSchedule, RppConfig, StepRule,
};
use rpp::prox::{ExponentMode, ReweightState};
use rpp::{ParamSet, Tensor};

fn small() -> ModelConfig {
    ModelConfig { layers: 1, hidden: 16, heads: 2, vocab: 32, seq_len: 8, ffn: 32, seed: 1 }
}

fn data(cfg: ModelConfig, seed: u64) -> PretrainData {
    PretrainData { corpus: gen_pretrain_corpus(seed, 500, &cfg).unwrap(), config: cfg, batch_size: 8, mask_prob: 0.3, seed }
}

fn optim() -> OptimSettings {
    OptimSettings { lr: 3e-3, ..Default::default() }
}

/// Full sort by (|w|, tensor name, index); the first ⌊p·n⌋ entries.
fn sort_oracle(params: &ParamSet, k: usize) -> Vec<(String, usize)> {
    let mut all: Vec<(f64, String, usize)> = params
        .prunable()
        .flat_map(|(n, t)| t.data().iter().enumerate().map(move |(i, v)| (v.abs(), n.to_string(), i)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out: Vec<(String, usize)> = all.into_iter().take(k).map(|e| (e.1, e.2)).collect();
    out.sort();
    out
}

fn flatten(p: &SparsePattern) -> Vec<(String, usize)> {
    p.zeros.iter().flat_map(|(n, idx)| idx.iter().map(move |&i| (n.clone(), i))).collect()
}

fn random_set(seed: u64, quantize: bool) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    for (name, n) in [("a", 4000), ("b", 3500), ("c", 2500)] {
        let v: Vec<f64> = (0..n)
            .map(|_| {
                let x: f64 = rng.random_range(-1.0..1.0);
                if quantize {
                    (x * 20.0).round() / 20.0
                } else {
                    x
                }
            })
            .collect();
        ps.insert(name, Tensor::vector(v), true);
    }
    ps.insert("bias", Tensor::filled(&[7], 1e-9), false);
    ps
}

#[test]
fn global_selection_matches_full_sort() {
    for (seed, quantize) in [(1, false), (2, true)] {
        let ps = random_set(seed, quantize);
        for p in [0.0, 0.1, 0.37, 0.5, 0.9, 1.0] {
            let pattern = hard_threshold_prune(&ps, p, PruneScope::Global).unwrap();
            let k = (p * 10_000.0 + 1e-9).floor() as usize;
            assert_eq!(flatten(&pattern), sort_oracle(&ps, k), "p={p} quantized={quantize}");
        }
    }
}

#[test]
fn per_tensor_selection_matches_full_sort() {
    let ps = random_set(3, true);
    let pattern = hard_threshold_prune(&ps, 0.3, PruneScope::PerTensor).unwrap();
    for (name, t) in ps.prunable() {
        let mut one = ParamSet::new();
        one.insert(name, t.clone(), true);
        let k = t.len() * 3 / 10;
        let want: Vec<usize> = sort_oracle(&one, k).into_iter().map(|e| e.1).collect();
        assert_eq!(pattern.zeros[name], want);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn patterns_nest_as_ratio_grows(seed in 0u64..1000, p1 in 0.0f64..1.0, p2 in 0.0f64..1.0) {
        let ps = random_set(seed, seed % 2 == 0);
        let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
        let a = hard_threshold_prune(&ps, lo, PruneScope::Global).unwrap();
        let b = hard_threshold_prune(&ps, hi, PruneScope::Global).unwrap();
        prop_assert!(a.is_subset_of(&b));
    }
}

#[test]
fn applied_pattern_equals_materialized_zeros() {
    let cfg = small();
    let d = data(cfg, 3);
    let mut params = build_model(cfg).unwrap().params;
    let pattern = hard_threshold_prune(&params, 0.6, PruneScope::Global).unwrap();
    let mut manual = params.clone();
    for (name, idx) in &pattern.zeros {
        let t = manual.tensor_mut(name).unwrap();
        for &i in idx {
            t.data_mut()[i] = 0.0;
        }
    }
    apply_pattern(&mut params, &pattern).unwrap();
    let b = d.batch(0).unwrap();
    let (x, y) = (forward_pretrain(&params, &cfg, &b).unwrap(), forward_pretrain(&manual, &cfg, &b).unwrap());
    assert_eq!(x.loss.to_bits(), y.loss.to_bits());
    assert_eq!(extract_sparse_pattern(&params), pattern);
}

#[test]
fn nip_follows_schedule_and_nests() {
    let cfg = small();
    let d = data(cfg, 4);
    let init = build_model(cfg).unwrap().params;
    let sched = PruneSchedule { step_ratio: 0.1, iterations: 9, retrain_steps: 3, scope: PruneScope::Global };
    let iters = nip_run(init.clone(), &d, &sched, &optim(), &[], &FinetuneSettings::default(), 0).unwrap();
    let n = init.prunable_count();
    let mut before = init;
    for it in &iters {
        let t = it.t as usize;
        assert_eq!(it.pattern.pruned(), t * n / 10, "iteration {t}");
        assert_eq!(flatten(&it.pattern), sort_oracle(&before, t * n / 10));
        assert!(it.pattern.is_subset_of(&extract_sparse_pattern(&it.params)));
        before = it.params.clone();
    }
    for w in iters.windows(2) {
        assert!(w[0].pattern.is_subset_of(&w[1].pattern));
    }
}

#[test]
fn rpp_without_penalty_is_plain_adamw() {
    let cfg = small();
    let d = data(cfg, 5);
    let init = build_model(cfg).unwrap().params;
    let rc = RppConfig { gamma: 0.0, outer_iters: 2, inner_steps: 6, ..Default::default() };
    let out = rpp_run(init.clone(), &d, &rc, &optim(), 0).unwrap();

    let mut plain = init;
    let mut losses = pretrain_run(&mut plain, &d, 6, &optim(), 0).unwrap().train_losses();
    losses.extend(pretrain_run(&mut plain, &d, 6, &optim(), 6).unwrap().train_losses());
    assert!(out.params.bit_eq(&plain));
    let got: Vec<u64> = out.report.train_losses().iter().map(|v| v.to_bits()).collect();
    assert_eq!(got, losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert!(out.pattern.is_empty());
}

#[test]
fn single_outer_iteration_is_plain_l1_prox_training() {
    let cfg = small();
    let d = data(cfg, 6);
    let init = build_model(cfg).unwrap().params;
    for mode in [ExponentMode::Power, ExponentMode::Candes] {
        let rc = RppConfig { gamma: 0.5, outer_iters: 1, inner_steps: 10, exponent_mode: mode, ..Default::default() };
        let out = rpp_run(init.clone(), &d, &rc, &optim(), 0).unwrap();
        let mut l1 = init.clone();
        let ones = ReweightState::new(&l1, 0.5, 1e-9, mode).unwrap();
        let rep = train_pretrain(&mut l1, &d, 10, &optim(), 0, "l1", StepRule::Prox(&ones)).unwrap();
        assert!(out.params.bit_eq(&l1));
        assert_eq!(out.report.train_losses(), rep.train_losses());
        assert!(!out.pattern.is_empty(), "γ=0.5 should prune something");
    }
}

#[test]
fn penalty_without_gamma_is_plain_adamw_and_never_zeroes() {
    let cfg = small();
    let d = data(cfg, 7);
    let init = build_model(cfg).unwrap().params;
    let (p0, r0) = penalty_baseline_run(init.clone(), &d, 0.0, 8, &optim(), 0).unwrap();
    let mut plain = init.clone();
    let r = pretrain_run(&mut plain, &d, 8, &optim(), 0).unwrap();
    assert!(p0.bit_eq(&plain));
    assert_eq!(r0.train_losses(), r.train_losses());

    let (p, rep) = penalty_baseline_run(init, &d, 0.5, 30, &optim(), 0).unwrap();
    assert!(rep.rows.iter().all(|row| row.sparsity_prunable == 0.0));
    assert!(extract_sparse_pattern(&p).is_empty());
}

#[test]
fn trim_tops_up_to_target() {
    let cfg = small();
    let d = data(cfg, 8);
    let init = build_model(cfg).unwrap().params;
    let rc = RppConfig { gamma: 1e-3, outer_iters: 2, inner_steps: 5, trim_target: Some(0.5), ..Default::default() };
    let out = rpp_run(init, &d, &rc, &optim(), 0).unwrap();
    assert!(out.emergent_ratio < 0.5);
    assert!(out.report.trimmed);
    assert_eq!(out.pattern.pruned(), out.pattern.prunable_total() / 2);
    assert_eq!(extract_sparse_pattern(&out.params), out.pattern);
}

#[test]
fn emergent_ratio_grows_with_gamma() {
    let cfg = small();
    let mut per_gamma = Vec::new();
    for gamma in [1e-4, 1e-3, 1e-2] {
        let mut ratios: Vec<f64> = (0..3)
            .map(|seed| {
                let d = data(ModelConfig { seed, ..cfg }, seed);
                let init = build_model(ModelConfig { seed, ..cfg }).unwrap().params;
                let rc = RppConfig { gamma, outer_iters: 3, inner_steps: 15, ..Default::default() };
                rpp_run(init, &d, &rc, &optim(), 0).unwrap().emergent_ratio
            })
            .collect();
        ratios.sort_by(f64::total_cmp);
        per_gamma.push(ratios[1]);
    }
    assert!(per_gamma.windows(2).all(|w| w[0] <= w[1]), "{per_gamma:?}");
}
