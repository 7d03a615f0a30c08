use crate::error::{Error, Result};
use crate::numerics::array::NdArray;

/// Sinusoidal positional table: row `t`, channel pair `(2k, 2k+1)` holds
/// `(sin(t / 10000^(2k/d)), cos(t / 10000^(2k/d)))`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Result<NdArray> {
    sinusoidal_positions_offset(n, d, 0)
}

/// Same table with every position shifted by `offset`; used to keep memory
/// entries from different frames distinguishable.
pub fn sinusoidal_positions_offset(n: usize, d: usize, offset: usize) -> Result<NdArray> {
    if d % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "positional channel count must be even, got {d}"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one position".into()));
    }
    let mut data = vec![0.0; n * d];
    for t in 0..n {
        let pos = (t + offset) as f64;
        for k in 0..d / 2 {
            let freq = 10000f64.powf(2.0 * k as f64 / d as f64);
            data[t * d + 2 * k] = (pos / freq).sin();
            data[t * d + 2 * k + 1] = (pos / freq).cos();
        }
    }
    NdArray::from_vec(&[n, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_zero_is_sin0_cos0() {
        let p = sinusoidal_positions(3, 6).unwrap();
        for k in 0..3 {
            assert_eq!(p.at2(0, 2 * k), 0.0);
            assert_eq!(p.at2(0, 2 * k + 1), 1.0);
        }
    }

    #[test]
    fn entries_bounded_by_one() {
        let p = sinusoidal_positions(50, 16).unwrap();
        assert!(p.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn row_one_matches_scalar_formula() {
        // n=2, d=4: row 1 = [sin(1), cos(1), sin(1/100), cos(1/100)].
        let p = sinusoidal_positions(2, 4).unwrap();
        let expect = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (j, e) in expect.iter().enumerate() {
            assert!((p.at2(1, j) - e).abs() < 1e-15);
        }
    }

    #[test]
    fn odd_channel_count_rejected() {
        assert!(sinusoidal_positions(2, 5).is_err());
    }

    #[test]
    fn offset_shifts_rows() {
        let a = sinusoidal_positions_offset(4, 8, 2).unwrap();
        let b = sinusoidal_positions(6, 8).unwrap();
        for j in 0..8 {
            assert_eq!(a.at2(0, j), b.at2(2, j));
        }
    }
}
