use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Row-wise softmax. Rejects non-finite input.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    if !m.is_finite() {
        return Err(Error::NumericDomain("softmax input".into()));
    }
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r), None);
    }
    Ok(out)
}

/// Softmax over `row`, treating positions where `mask[j] == false` as
/// excluded: they receive exactly zero weight.
pub(crate) fn softmax_in_place(row: &mut [f64], mask: Option<&[bool]>) {
    let keep = |j: usize| mask.map_or(true, |m| m[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if keep(j) && v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if keep(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_row() {
        let m = Matrix::from_rows(&[vec![0.0; 4]]).unwrap();
        let s = softmax_rows(&m).unwrap();
        assert_eq!(s.row(0), &[0.25; 4]);
    }

    #[test]
    fn matches_scalar_oracle() {
        // Oracle: exp and sum computed independently on the raw values.
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
        let z: f64 = e.iter().sum();
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let s = softmax_rows(&m).unwrap();
        for j in 0..3 {
            assert!((s.get(0, j) - e[j] / z).abs() < 1e-12);
        }
        // frozen values from the oracle above
        assert!((s.get(0, 0) - 0.090_030_573_170_380_46).abs() < 1e-12);
        assert!((s.get(0, 2) - 0.665_240_955_774_821_4).abs() < 1e-12);
    }

    #[test]
    fn shift_invariant() {
        let a = softmax_rows(&Matrix::from_rows(&[vec![7.5, 9.0]]).unwrap()).unwrap();
        let b = softmax_rows(&Matrix::from_rows(&[vec![0.0, 1.5]]).unwrap()).unwrap();
        for j in 0..2 {
            assert!((a.get(0, j) - b.get(0, j)).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let m = Matrix::from_rows(&[vec![0.0, f64::NAN]]).unwrap();
        assert!(matches!(softmax_rows(&m), Err(Error::NumericDomain(_))));
        let m = Matrix::from_rows(&[vec![f64::INFINITY, 0.0]]).unwrap();
        assert!(softmax_rows(&m).is_err());
    }

    #[test]
    fn masked_positions_get_zero() {
        let mut row = vec![1.0, 5.0, 2.0];
        softmax_in_place(&mut row, Some(&[true, false, true]));
        assert_eq!(row[1], 0.0);
        assert!((row[0] + row[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    proptest! {
        #[test]
        fn rows_sum_to_one(row in proptest::collection::vec(-50.0f64..50.0, 1..16)) {
            let m = Matrix::from_rows(&[row]).unwrap();
            let s = softmax_rows(&m).unwrap();
            let sum: f64 = s.row(0).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(s.row(0).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}
