//! Central finite-difference gradients, the oracle for every backward rule.

pub mod suite;

use crate::{Scalar, Tensor};

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad<T: Scalar>(mut f: impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, h: T) -> Tensor<T> {
    let mut probe = x.clone();
    let two_h = h + h;
    Tensor::from_fn(x.shape(), |i| {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        (plus - minus) / two_h
    })
}

/// Comparison of an analytic gradient against a numeric one.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradComparison {
    /// Largest `|a - n| / max(|a|, |n|)` over coordinates whose magnitude exceeds the floor.
    pub worst_relative: f64,
    /// Largest `|a - n|` over coordinates below the floor.
    pub worst_absolute_small: f64,
    /// Number of coordinates checked relatively.
    pub checked: usize,
}

impl GradComparison {
    /// Relative error bound on significant coordinates, and `tol * floor` absolute bound elsewhere.
    pub fn passes(&self, tol: f64, floor: f64) -> bool {
        self.worst_relative <= tol && self.worst_absolute_small <= tol * floor.max(1e-3)
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            worst_relative: self.worst_relative.max(other.worst_relative),
            worst_absolute_small: self.worst_absolute_small.max(other.worst_absolute_small),
            checked: self.checked + other.checked,
        }
    }
}

/// Coordinates with `max(|a|, |n|) <= floor` are compared absolutely.
pub fn compare<T: Scalar>(analytic: &Tensor<T>, numeric: &Tensor<T>, floor: f64) -> GradComparison {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    let mut out = GradComparison::default();
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        let (a, n) = (a.as_f64(), n.as_f64());
        let diff = (a - n).abs();
        let scale = a.abs().max(n.abs());
        if scale > floor {
            out.worst_relative = out.worst_relative.max(diff / scale);
            out.checked += 1;
        } else {
            out.worst_absolute_small = out.worst_absolute_small.max(diff);
        }
    }
    out
}
