use crate::error::{Error, Result};

use super::{Matrix, RngState};

/// Kaiming-uniform negative-slope parameter.
const NEGATIVE_SLOPE: f64 = 2.236_067_977_499_79; // sqrt(5)

/// Bound of the Kaiming-uniform distribution with negative slope `sqrt(5)`:
/// `sqrt(3) * sqrt(2 / (1 + 5)) / sqrt(fan_in)`, which equals `1 / sqrt(fan_in)`.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    let gain = (2.0 / (1.0 + NEGATIVE_SLOPE * NEGATIVE_SLOPE)).sqrt();
    3f64.sqrt() * gain / (fan_in as f64).sqrt()
}

/// `rows x cols` matrix with entries i.i.d. uniform on `[-b, b)`, `b = kaiming_bound(fan_in)`.
pub fn kaiming_uniform_init(
    rows: usize,
    cols: usize,
    fan_in: usize,
    rng: &mut RngState,
) -> Result<Matrix> {
    if rows == 0 || cols == 0 || fan_in == 0 {
        return Err(Error::Argument(format!(
            "kaiming init needs positive rows, cols and fan_in, got {rows}, {cols}, {fan_in}"
        )));
    }
    let bound = kaiming_bound(fan_in);
    Ok(Matrix::from_fn(rows, cols, |_, _| {
        rng.uniform(-bound, bound)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_is_inverse_sqrt_fan_in() {
        for fan_in in [1, 4, 16, 768] {
            let expected = 1.0 / (fan_in as f64).sqrt();
            assert!((kaiming_bound(fan_in) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn entries_respect_bound() {
        let mut rng = RngState::new(3, "init");
        let m = kaiming_uniform_init(32, 32, 1, &mut rng).unwrap();
        assert!(m.as_slice().iter().all(|v| v.abs() <= 1.0));
        let m = kaiming_uniform_init(32, 32, 4, &mut rng).unwrap();
        assert!(m.as_slice().iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn variance_matches_uniform_law() {
        // Var(U[-b, b]) = b^2 / 3 with b = 1/4 at fan_in = 16.
        let mut rng = RngState::new(11, "variance");
        let m = kaiming_uniform_init(1000, 1000, 16, &mut rng).unwrap();
        let n = m.len() as f64;
        let mean = m.sum() / n;
        let var = m.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expected = (1.0 / 16.0) / 3.0;
        assert!(
            (var - expected).abs() < 0.05 * expected,
            "var={var} expected={expected}"
        );
    }

    #[test]
    fn zero_dimensions_rejected() {
        let mut rng = RngState::new(0, "x");
        assert!(kaiming_uniform_init(0, 3, 1, &mut rng).is_err());
        assert!(kaiming_uniform_init(3, 3, 0, &mut rng).is_err());
    }
}
