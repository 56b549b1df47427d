use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned closed box `{x : lower ≤ x ≤ upper}`. Bounds may be
/// infinite; boxes used as uncertainty sets must be bounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BoxRepr", into = "BoxRepr")]
pub struct BoxSet {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct BoxRepr {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl TryFrom<BoxRepr> for BoxSet {
    type Error = Error;
    fn try_from(r: BoxRepr) -> Result<Self> {
        BoxSet::from_slices(&r.lower, &r.upper)
    }
}

impl From<BoxSet> for BoxRepr {
    fn from(b: BoxSet) -> Self {
        BoxRepr {
            lower: b.lower.iter().cloned().collect(),
            upper: b.upper.iter().cloned().collect(),
        }
    }
}

impl BoxSet {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::dim("box bounds", lower.len(), upper.len()));
        }
        for i in 0..lower.len() {
            let (l, u) = (lower[i], upper[i]);
            if l.is_nan() || u.is_nan() {
                return Err(Error::Parameter(format!("box bound {i} is NaN")));
            }
            if l > u {
                return Err(Error::EmptySet(format!("box component {i}: lower {l} > upper {u}")));
            }
            if l == f64::INFINITY || u == f64::NEG_INFINITY {
                return Err(Error::EmptySet(format!("box component {i} has no finite point")));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn from_slices(lower: &[f64], upper: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(lower), DVector::from_column_slice(upper))
    }

    /// Same interval `[lo, hi]` in each of `n` components.
    pub fn uniform(n: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(DVector::from_element(n, lo), DVector::from_element(n, hi))
    }

    pub fn point(v: DVector<f64>) -> Self {
        Self {
            lower: v.clone(),
            upper: v,
        }
    }

    pub fn symmetric(center: DVector<f64>, half_width: DVector<f64>) -> Result<Self> {
        if center.len() != half_width.len() {
            return Err(Error::dim("box half-width", center.len(), half_width.len()));
        }
        if let Some(h) = half_width.iter().find(|h| !(**h >= 0.0)) {
            return Err(Error::Parameter(format!("negative box half-width {h}")));
        }
        Self::new(&center - &half_width, &center + &half_width)
    }

    pub fn unbounded(n: usize) -> Self {
        Self {
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn is_bounded(&self) -> bool {
        self.lower.iter().chain(self.upper.iter()).all(|v| v.is_finite())
    }

    /// Midpoint; only meaningful for bounded boxes.
    pub fn center(&self) -> DVector<f64> {
        (&self.lower + &self.upper) * 0.5
    }

    pub fn half_width(&self) -> DVector<f64> {
        (&self.upper - &self.lower) * 0.5
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.contains_tol(x, 0.0)
    }

    pub fn contains_tol(&self, x: &DVector<f64>, tol: f64) -> bool {
        x.len() == self.dim() && (0..x.len()).all(|i| x[i] >= self.lower[i] - tol && x[i] <= self.upper[i] + tol)
    }

    pub fn contains_box(&self, other: &BoxSet) -> bool {
        other.dim() == self.dim()
            && (0..self.dim()).all(|i| other.lower[i] >= self.lower[i] && other.upper[i] <= self.upper[i])
    }

    pub fn minkowski_sum(&self, other: &BoxSet) -> Result<BoxSet> {
        if other.dim() != self.dim() {
            return Err(Error::dim("Minkowski sum", self.dim(), other.dim()));
        }
        BoxSet::new(&self.lower + &other.lower, &self.upper + &other.upper)
    }

    /// Pontryagin difference `{x : x + b ∈ self ∀ b ∈ other}`.
    pub fn pontryagin_diff(&self, other: &BoxSet) -> Result<BoxSet> {
        if other.dim() != self.dim() {
            return Err(Error::dim("Pontryagin difference", self.dim(), other.dim()));
        }
        let lo = &self.lower - &other.lower;
        let hi = &self.upper - &other.upper;
        for i in 0..lo.len() {
            if !(lo[i] <= hi[i]) {
                return Err(Error::EmptySet(format!(
                    "Pontryagin difference empty in component {i}: [{}, {}]",
                    lo[i], hi[i]
                )));
            }
        }
        BoxSet::new(lo, hi)
    }

    /// Cartesian product `self × other`.
    pub fn product(&self, other: &BoxSet) -> BoxSet {
        let mut lo: Vec<f64> = self.lower.iter().cloned().collect();
        lo.extend(other.lower.iter());
        let mut hi: Vec<f64> = self.upper.iter().cloned().collect();
        hi.extend(other.upper.iter());
        BoxSet {
            lower: DVector::from_vec(lo),
            upper: DVector::from_vec(hi),
        }
    }

    pub fn translate(&self, offset: &DVector<f64>) -> Result<BoxSet> {
        if offset.len() != self.dim() {
            return Err(Error::dim("box translation", self.dim(), offset.len()));
        }
        BoxSet::new(&self.lower + offset, &self.upper + offset)
    }

    /// Stacks per-step boxes into one box over the whole horizon.
    pub fn stack(boxes: &[BoxSet]) -> BoxSet {
        let lo: Vec<f64> = boxes.iter().flat_map(|b| b.lower.iter().cloned()).collect();
        let hi: Vec<f64> = boxes.iter().flat_map(|b| b.upper.iter().cloned()).collect();
        BoxSet {
            lower: DVector::from_vec(lo),
            upper: DVector::from_vec(hi),
        }
    }

    /// Every vertex of a bounded box, in binary counting order.
    pub fn vertices(&self) -> Vec<DVector<f64>> {
        let n = self.dim();
        assert!(n < 24, "vertex enumeration limited to 23 dimensions");
        (0..1usize << n)
            .map(|mask| {
                DVector::from_fn(n, |i, _| {
                    if mask >> i & 1 == 1 {
                        self.upper[i]
                    } else {
                        self.lower[i]
                    }
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty() {
        assert!(matches!(BoxSet::uniform(2, 1.0, 0.0), Err(Error::EmptySet(_))));
        assert!(BoxSet::symmetric(DVector::zeros(1), DVector::from_element(1, -1.0)).is_err());
    }

    #[test]
    fn pontryagin_heating_bounds() {
        let u = BoxSet::uniform(1, 0.0, 1.5).unwrap();
        let ue = BoxSet::uniform(1, 0.0, 0.1).unwrap();
        let d = u.pontryagin_diff(&ue).unwrap();
        assert_eq!(d.lower()[0], 0.0);
        assert!((d.upper()[0] - 1.4).abs() < 1e-15);
        assert!(u.pontryagin_diff(&BoxSet::uniform(1, 0.0, 2.0).unwrap()).is_err());
    }

    #[test]
    fn product_and_vertices() {
        let w = BoxSet::uniform(1, -1.0, 1.0).unwrap();
        let e = BoxSet::uniform(1, 0.0, 0.1).unwrap();
        let p = w.product(&e);
        assert_eq!(p.lower().as_slice(), &[-1.0, 0.0]);
        assert_eq!(p.upper().as_slice(), &[1.0, 0.1]);
        assert_eq!(p.vertices().len(), 4);
    }

    #[test]
    fn closed_membership() {
        let b = BoxSet::uniform(2, -1.0, 1.0).unwrap();
        assert!(b.contains(&DVector::from_vec(vec![1.0, -1.0])));
        assert!(!b.contains(&DVector::from_vec(vec![1.0 + 1e-12, 0.0])));
    }
}
