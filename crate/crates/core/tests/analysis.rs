use proptest::prelude::*;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rpp::analysis::{
    neighbor_overlap, neighbor_overlap_tables, parse_pgm, pgm_bytes, random_overlap_baseline, structure_profile,
};
use rpp::model::{build_model, ModelConfig};
use rpp::Tensor;

fn uniform_zeros(rng: &mut ChaCha8Rng, n: usize, density: f64) -> Vec<usize> {
    let mut z: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() >= density).collect();
    z.sort_unstable();
    z
}

#[test]
fn uniform_mask_has_no_column_structure() {
    // P(Bin(64, 0.2) ≥ 58) is astronomically small, so nothing reaches 0.9
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut scores = Vec::new();
    for _ in 0..50 {
        let zeros = uniform_zeros(&mut rng, 64 * 64, 0.2);
        let p = structure_profile(&zeros, 64, 64).unwrap();
        scores.push((p.column_score, p.row_score));
        assert!((p.density - (4096 - zeros.len()) as f64 / 4096.0).abs() < 1e-15);
    }
    assert!(scores.iter().all(|&(c, r)| c == 0.0 && r == 0.0), "{scores:?}");
}

#[test]
fn full_columns_score_one() {
    let (rows, cols) = (10, 12);
    let keep = [2usize, 5, 11];
    let zeros: Vec<usize> = (0..rows * cols).filter(|i| !keep.contains(&(i % cols))).collect();
    let p = structure_profile(&zeros, rows, cols).unwrap();
    assert_eq!(p.column_score, 1.0);
    assert_eq!(p.row_score, 0.0);
    let t = structure_profile(&[], rows, cols).unwrap();
    assert_eq!((t.column_score, t.row_score, t.density), (1.0, 1.0, 1.0));
}

fn arb_mask() -> impl Strategy<Value = (usize, usize, Vec<usize>)> {
    (1usize..20, 1usize..20).prop_flat_map(|(r, c)| {
        (Just(r), Just(c), proptest::collection::btree_set(0..r * c, 0..=r * c).prop_map(|s| s.into_iter().collect()))
    })
}

proptest! {
    #[test]
    fn pgm_round_trips((rows, cols, zeros) in arb_mask()) {
        let bytes = pgm_bytes(&zeros, rows, cols).unwrap();
        let (r, c, z) = parse_pgm(&bytes).unwrap();
        prop_assert_eq!((r, c), (rows, cols));
        prop_assert_eq!(&z, &zeros);
        prop_assert_eq!(pgm_bytes(&z, r, c).unwrap(), bytes);
    }

    #[test]
    fn densities_average_to_overall((rows, cols, zeros) in arb_mask()) {
        let p = structure_profile(&zeros, rows, cols).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        prop_assert!((mean(&p.row_density) - p.density).abs() < 1e-12);
        prop_assert!((mean(&p.col_density) - p.density).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&p.column_score) && (0.0..=1.0).contains(&p.row_score));
    }
}

fn random_table(rng: &mut ChaCha8Rng, vocab: usize, dim: usize) -> Tensor {
    Tensor::matrix(vocab, dim, (0..vocab * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn unrelated_tables_overlap_at_the_baseline_rate() {
    let (vocab, k) = (64, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let trials = 200;
    let mut sim = 0.0;
    for _ in 0..trials {
        let (a, b) = (random_table(&mut rng, vocab, 16), random_table(&mut rng, vocab, 16));
        sim += neighbor_overlap_tables(&a, &b, k).unwrap().mean;
    }
    sim /= trials as f64;
    // independent random k-subsets of the other 63 tokens
    let mut draw = 0.0;
    for _ in 0..20_000 {
        let x = sample(&mut rng, vocab - 1, k).into_vec();
        let y = sample(&mut rng, vocab - 1, k).into_vec();
        draw += x.iter().filter(|i| y.contains(i)).count() as f64 / k as f64;
    }
    draw /= 20_000.0;
    let base = random_overlap_baseline(vocab, k);
    assert!((draw - base).abs() < 0.005, "subset simulation {draw} vs {base}");
    assert!((sim - base).abs() < 0.01, "table simulation {sim} vs {base}");
}

#[test]
fn overlap_is_symmetric_and_reflexive() {
    let cfg = ModelConfig::default();
    let a = build_model(cfg).unwrap().params;
    let b = build_model(ModelConfig { seed: 9, ..cfg }).unwrap().params;
    assert_eq!(neighbor_overlap(&a, &a, 5).unwrap().mean, 1.0);
    let (ab, ba) = (neighbor_overlap(&a, &b, 5).unwrap(), neighbor_overlap(&b, &a, 5).unwrap());
    assert_eq!(ab, ba);
    assert!((0.0..=1.0).contains(&ab.mean));
}

#[test]
fn zero_rows_are_excluded() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_table(&mut rng, 20, 4);
    let mut data = a.data().to_vec();
    data[8..12].fill(0.0);
    let b = Tensor::matrix(20, 4, data).unwrap();
    let got = neighbor_overlap_tables(&a, &b, 3).unwrap();
    assert_eq!(got.excluded, 1);
    assert_eq!(got.mean, 1.0);
}
