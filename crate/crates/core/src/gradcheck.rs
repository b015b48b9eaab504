//! Central finite differences, the reference for every backprop test.

use crate::error::{Error, Result};
use crate::params::{ParamSet, TensorMap};

/// A single coordinate: parameter name and flat index.
pub type Coord = (String, usize);

/// `(f(w + h e_i) - f(w - h e_i)) / 2h` for every coordinate of every
/// parameter. Costs two loss evaluations per coordinate.
pub fn finite_diff_gradient<F>(loss_fn: F, params: &ParamSet, h: f64) -> Result<TensorMap>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let coords: Vec<Coord> = params
        .iter()
        .flat_map(|(name, p)| (0..p.value.len()).map(move |i| (name.to_string(), i)))
        .collect();
    let values = finite_diff_coords(loss_fn, params, h, &coords)?;
    let mut out = params.zeros_like();
    for ((name, i), v) in coords.iter().zip(values) {
        out.get_mut(name).expect("coordinate from params").data_mut()[*i] = v;
    }
    Ok(out)
}

/// Central differences at the listed coordinates only.
pub fn finite_diff_coords<F>(mut loss_fn: F, params: &ParamSet, h: f64, coords: &[Coord]) -> Result<Vec<f64>>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(coords.len());
    for (name, i) in coords {
        let orig = probe.tensor(name)?.data()[*i];
        let mut at = |value: f64| -> Result<f64> {
            probe.tensor_mut(name)?.data_mut()[*i] = value;
            let f = loss_fn(&probe)?;
            if !f.is_finite() {
                return Err(Error::NonFinite(format!("loss probe at {name}[{i}]")));
            }
            Ok(f)
        };
        let plus = at(orig + h)?;
        let minus = at(orig - h)?;
        probe.tensor_mut(name)?.data_mut()[*i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, floor)`. The floor keeps coordinates whose true
/// gradient is near zero from dominating on rounding noise.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(w: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::vector(vec![w]), true);
        ps
    }

    #[test]
    fn quadratic() {
        let g = finite_diff_gradient(|p| Ok(p.tensor("w")?.data()[0].powi(2)), &single(1.0), 1e-5).unwrap();
        assert!((g["w"].data()[0] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn abs_away_from_kink() {
        let g = finite_diff_gradient(|p| Ok(p.tensor("w")?.data()[0].abs()), &single(0.5), 1e-5).unwrap();
        assert!((g["w"].data()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_step_and_non_finite_probe() {
        assert!(finite_diff_gradient(|_| Ok(0.0), &single(0.0), 0.0).is_err());
        let err = finite_diff_gradient(|_| Ok(f64::NAN), &single(0.0), 1e-5).unwrap_err();
        assert!(err.to_string().contains("w[0]"), "{err}");
    }
}
