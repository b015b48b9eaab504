//! The reweighted ℓ1 proximal operator on a handful of scalars, and how the
//! reweighting factors grow as weights shrink.

use rpp::prox::{prox_objective, prox_scalar, reweight_factor, ExponentMode};

fn main() {
    let (step, gamma) = (0.1, 0.5);
    println!("{:>8} {:>6} {:>10} {:>10}", "a", "alpha", "prox", "objective");
    for &(a, alpha) in &[(1.0, 1.0), (0.04, 1.0), (-0.3, 2.0), (0.3, 10.0), (-2.0, 0.1)] {
        let w = prox_scalar(a, step, gamma, alpha);
        println!("{a:>8} {alpha:>6} {w:>10.5} {:>10.5}", prox_objective(w, a, step, gamma, alpha));
    }

    println!("\nreweighting factor 1/(|w|^t + eps)");
    for &w in &[1.0, 0.1, 0.01, 1e-4, 0.0] {
        let power: Vec<String> = (1..=3).map(|t| format!("{:.3e}", reweight_factor(w, t, 1e-9, ExponentMode::Power))).collect();
        println!("  w={w:<7} t=1..3: {}   candes: {:.3e}", power.join(" "), reweight_factor(w, 3, 1e-9, ExponentMode::Candes));
    }
}
