//! Cubic B-spline bases on equally spaced knots.
//!
//! A system of `num_basis` degree-`degree` B-splines needs
//! `num_basis + degree + 1` knots. The knots are equally spaced with the
//! domain endpoints pinned so that knot `degree` (zero-based) is the lower
//! bound and knot `num_basis` is the upper bound; `degree` knots extend
//! beyond the domain on each side. Degree-zero functions are indicators on
//! half-open intervals `[knot_j, knot_{j+1})`; because the knot vector
//! extends past the upper bound, evaluation exactly at the upper bound
//! still produces the (continuous) left-limit values and rows of a design
//! matrix sum to one everywhere on the closed domain.

use nalgebra::DMatrix;

use crate::{Error, Result};

/// A B-spline basis system on an equally spaced knot vector.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSystem {
    degree: usize,
    num_basis: usize,
    domain: (f64, f64),
    knots: Vec<f64>,
}

/// Basis function values evaluated at a set of times, one row per time.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    /// `times.len() x num_basis`; at most `degree + 1` nonzeros per row.
    pub matrix: DMatrix<f64>,
    pub times: Vec<f64>,
}

/// Builds the equally spaced knot vector for `num_basis` functions of the
/// given degree on `[domain_min, domain_max]`.
pub fn make_knots(
    domain_min: f64,
    domain_max: f64,
    num_basis: usize,
    degree: usize,
) -> Result<BasisSystem> {
    if !domain_min.is_finite() || !domain_max.is_finite() || domain_min >= domain_max {
        return Err(Error::InvalidDomain {
            min: domain_min,
            max: domain_max,
        });
    }
    if num_basis < degree + 1 {
        return Err(Error::InvalidBasisCount { num_basis, degree });
    }
    let h = (domain_max - domain_min) / (num_basis - degree) as f64;
    let mut knots = Vec::with_capacity(num_basis + degree + 1);
    for i in 0..=(num_basis + degree) {
        knots.push(domain_min + (i as f64 - degree as f64) * h);
    }
    // Pin the endpoints; the affine form above can be off by an ulp.
    knots[degree] = domain_min;
    knots[num_basis] = domain_max;
    Ok(BasisSystem {
        degree,
        num_basis,
        domain: (domain_min, domain_max),
        knots,
    })
}

impl BasisSystem {
    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn num_basis(&self) -> usize {
        self.num_basis
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of functions of the given degree this knot vector supports.
    pub fn num_functions(&self, degree: usize) -> usize {
        if degree > self.degree {
            0
        } else {
            self.num_basis + self.degree - degree
        }
    }

    /// Evaluates one basis function of the requested degree by the
    /// two-term recurrence. `degree` may be anything up to the system's
    /// degree; indices are zero-based.
    pub fn eval_basis(&self, index: usize, degree: usize, t: f64) -> Result<f64> {
        let limit = self.num_functions(degree);
        if index >= limit {
            return Err(Error::InvalidIndex {
                index,
                degree,
                limit,
            });
        }
        Ok(self.recurrence(index, degree, t))
    }

    fn recurrence(&self, j: usize, d: usize, t: f64) -> f64 {
        let k = &self.knots;
        if d == 0 {
            return if k[j] <= t && t < k[j + 1] { 1.0 } else { 0.0 };
        }
        let mut value = 0.0;
        let left_den = k[j + d] - k[j];
        if left_den > 0.0 {
            value += (t - k[j]) / left_den * self.recurrence(j, d - 1, t);
        }
        let right_den = k[j + d + 1] - k[j + 1];
        if right_den > 0.0 {
            value += (k[j + d + 1] - t) / right_den * self.recurrence(j + 1, d - 1, t);
        }
        value
    }

    /// Index of the half-open knot span containing `t`; the upper domain
    /// bound maps to the span starting there, which keeps evaluation at the
    /// bound equal to its left limit.
    fn span_of(&self, t: f64) -> usize {
        if t >= self.domain.1 {
            return self.num_basis;
        }
        let k = &self.knots;
        let mut lo = self.degree;
        let mut hi = self.num_basis;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if t < k[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Values of the `degree + 1` functions that can be nonzero on the span,
    /// for function indices `span - degree ..= span`.
    fn nonzero_row(&self, span: usize, t: f64) -> Vec<f64> {
        let d = self.degree;
        let k = &self.knots;
        let mut n = vec![0.0; d + 1];
        let mut left = vec![0.0; d + 1];
        let mut right = vec![0.0; d + 1];
        n[0] = 1.0;
        for j in 1..=d {
            left[j] = t - k[span + 1 - j];
            right[j] = k[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        n
    }

    /// Evaluates the full-degree basis at the given times. Every time must
    /// lie in the closed domain; there is no extrapolation.
    pub fn design_matrix(&self, times: &[f64]) -> Result<DesignMatrix> {
        let (lo, hi) = self.domain;
        let mut matrix = DMatrix::zeros(times.len(), self.num_basis);
        for (row, &t) in times.iter().enumerate() {
            if !(t >= lo && t <= hi) {
                return Err(Error::OutOfDomain {
                    time: t,
                    min: lo,
                    max: hi,
                });
            }
            let span = self.span_of(t);
            let vals = self.nonzero_row(span, t);
            for (offset, &v) in vals.iter().enumerate() {
                let col = span - self.degree + offset;
                // col == num_basis only at t == domain max, where v is 0.
                if col < self.num_basis {
                    matrix[(row, col)] = v;
                }
            }
        }
        Ok(DesignMatrix {
            matrix,
            times: times.to_vec(),
        })
    }
}
