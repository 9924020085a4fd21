//! Fourier cosine features on a box.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// States further than this outside the box are rejected instead of clipped.
pub const CLIP_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::shape(format!("bounds of lengths {} and {}", lo.len(), hi.len())));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l < h) || !l.is_finite() || !h.is_finite()) {
            return Err(Error::domain("every lower bound must be finite and below its upper bound"));
        }
        Ok(BoxBounds { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(&self.lo).zip(&self.hi).all(|((v, l), h)| (*l..=*h).contains(v))
    }

    /// Maps `x` into the unit cube, clipping coordinates that overshoot by at most [`CLIP_SLACK`].
    pub fn normalize_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::shape(format!("state has {} coordinates, expected {}", x.len(), self.dim())));
        }
        for (i, &v) in x.iter().enumerate() {
            let (l, h) = (self.lo[i], self.hi[i]);
            if !(v >= l - CLIP_SLACK && v <= h + CLIP_SLACK) {
                return Err(Error::domain(format!("coordinate {i} = {v} outside [{l}, {h}]")));
            }
            out[i] = ((v - l) / (h - l)).clamp(0.0, 1.0);
        }
        Ok(())
    }
}

/// Cosine basis `cos(pi <c, x̄>)` over all multi-indices `c` in `{0, ..., order-1}^dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierBasis {
    order: usize,
    bounds: BoxBounds,
    /// Row-major `n_features x dim`; the first row is all zeros. The last
    /// coordinate varies fastest.
    coefficients: Vec<u32>,
}

impl FourierBasis {
    pub fn new(bounds: BoxBounds, order: usize) -> Result<Self> {
        let dim = bounds.dim();
        if order == 0 {
            return Err(Error::config("Fourier order must be positive"));
        }
        let n = order
            .checked_pow(dim as u32)
            .filter(|&n| n <= 1 << 20)
            .ok_or_else(|| Error::config(format!("order {order} in dimension {dim} gives too many features")))?;
        let mut coefficients = Vec::with_capacity(n * dim);
        for j in 0..n {
            let mut rest = j;
            let mut row = vec![0u32; dim];
            for slot in row.iter_mut().rev() {
                *slot = (rest % order) as u32;
                rest /= order;
            }
            coefficients.extend(row);
        }
        Ok(FourierBasis { order, bounds, coefficients })
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn bounds(&self) -> &BoxBounds {
        &self.bounds
    }

    pub fn n_features(&self) -> usize {
        self.coefficients.len() / self.dim()
    }

    pub fn coefficient_row(&self, j: usize) -> &[u32] {
        let d = self.dim();
        &self.coefficients[j * d..(j + 1) * d]
    }

    /// Writes the features of `state` into `out` (length [`n_features`](Self::n_features)).
    pub fn features_into(&self, state: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        let mut unit = [0.0f64; 8];
        let mut heap;
        let xbar: &mut [f64] = if d <= unit.len() {
            &mut unit[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        self.bounds.normalize_into(state, xbar)?;
        for (j, o) in out.iter_mut().enumerate().take(self.n_features()) {
            let c = &self.coefficients[j * d..(j + 1) * d];
            let dot: f64 = c.iter().zip(xbar.iter()).map(|(&ci, &x)| ci as f64 * x).sum();
            *o = (std::f64::consts::PI * dot).cos();
        }
        Ok(())
    }

    pub fn features(&self, state: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n_features()];
        self.features_into(state, &mut out)?;
        Ok(out)
    }
}

pub fn fourier_features(basis: &FourierBasis, state: &[f64]) -> Result<Vec<f64>> {
    basis.features(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn car_basis() -> FourierBasis {
        FourierBasis::new(BoxBounds::new(vec![-1.2, -0.07], vec![0.6, 0.07]).unwrap(), 4).unwrap()
    }

    #[test]
    fn multi_indices() {
        let b = car_basis();
        assert_eq!(b.n_features(), 16);
        assert_eq!(b.coefficient_row(0), &[0, 0]);
        assert_eq!(b.coefficient_row(1), &[0, 1]);
        assert_eq!(b.coefficient_row(4), &[1, 0]);
        assert_eq!(b.coefficient_row(15), &[3, 3]);
        let mut rows: Vec<&[u32]> = (0..16).map(|j| b.coefficient_row(j)).collect();
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), 16);
    }

    #[test]
    fn feature_examples() {
        let b = car_basis();
        assert!(b.features(&[-1.2, -0.07]).unwrap().iter().all(|&f| f == 1.0));
        let mid = b.features(&[-0.3, 0.0]).unwrap();
        assert_eq!(mid[0], 1.0);
        assert!(mid[4].abs() < 1e-15); // c = (1, 0)
        assert!((mid[8] + 1.0).abs() < 1e-15); // c = (2, 0)
        assert!((mid[5] + 1.0).abs() < 1e-15); // c = (1, 1): cos(pi)
    }

    #[test]
    fn clipping_and_errors() {
        let b = car_basis();
        let inside = b.features(&[0.6, 0.07]).unwrap();
        let nudged = b.features(&[0.6 + 5e-10, 0.07]).unwrap();
        assert_eq!(inside, nudged);
        assert!(matches!(b.features(&[0.61, 0.0]), Err(Error::Domain(_))));
        assert!(matches!(b.features(&[0.0, f64::NAN]), Err(Error::Domain(_))));
        assert!(matches!(b.features(&[0.0]), Err(Error::Shape(_))));
        assert!(BoxBounds::new(vec![1.0], vec![1.0]).is_err());
        assert!(BoxBounds::new(vec![0.0], vec![1.0, 2.0]).is_err());
        assert!(FourierBasis::new(BoxBounds::new(vec![0.0], vec![1.0]).unwrap(), 0).is_err());
    }

    #[test]
    fn matches_direct_formula_in_three_dims() {
        let bounds = BoxBounds::new(vec![0.0, -1.0, 2.0], vec![1.0, 1.0, 4.0]).unwrap();
        let b = FourierBasis::new(bounds, 3).unwrap();
        let s = [0.25, 0.5, 3.5];
        let xbar = [0.25, 0.75, 0.75];
        let f = b.features(&s).unwrap();
        let mut j = 0;
        for c0 in 0..3 {
            for c1 in 0..3 {
                for c2 in 0..3 {
                    let dot = c0 as f64 * xbar[0] + c1 as f64 * xbar[1] + c2 as f64 * xbar[2];
                    assert!((f[j] - (std::f64::consts::PI * dot).cos()).abs() < 1e-14);
                    j += 1;
                }
            }
        }
    }

    proptest! {
        #[test]
        fn features_bounded(x in -1.2..=0.6f64, v in -0.07..=0.07f64) {
            let f = car_basis().features(&[x, v]).unwrap();
            prop_assert_eq!(f[0], 1.0);
            prop_assert!(f.iter().all(|z| z.abs() <= 1.0));
        }
    }
}
