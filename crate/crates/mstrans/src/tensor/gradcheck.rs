//! Central finite-difference verification of analytic gradients.
//!
//! The checker re-evaluates a scalar-valued builder closure with each leaf
//! element perturbed by `±h` and compares `(f(x+h) - f(x-h)) / 2h` against
//! the adjoint from `Graph::backward`. Relative error per element is
//! `|a - n| / max(1, |a|, |n|)`. Builders must be deterministic: each call
//! sees a graph with the same dropout seed.

use super::{Graph, Tensor, Var};
use crate::{Error, Result};

pub const DEFAULT_H: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

const GRAPH_SEED: u64 = 0x5eed;

/// Worst element found by a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub leaf: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares analytic gradients of a scalar-valued composite against central
/// finite differences over every element of every leaf.
pub fn grad_check<F>(f: F, leaves: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::with_seed(GRAPH_SEED);
        let vars: Vec<Var> = tensors.iter().map(|t| g.constant(t)).collect();
        let out = f(&mut g, &vars)?;
        let t = g.value(out);
        if t.numel() != 1 {
            return Err(Error::invalid(
                "grad_check",
                format!("composite output has shape {:?}, expected scalar", t.shape()),
            ));
        }
        Ok(t.data()[0])
    };

    // Analytic pass.
    let mut g = Graph::with_seed(GRAPH_SEED);
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::invalid(
            "grad_check",
            format!("composite output has shape {:?}, expected scalar", g.value(out).shape()),
        ));
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(leaves)
        .map(|(&v, t)| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut work: Vec<Tensor> = leaves.to_vec();
    let mut worst = GradCheck { max_rel_err: 0.0, leaf: 0, element: 0, analytic: 0.0, numeric: 0.0 };
    for li in 0..leaves.len() {
        for e in 0..leaves[li].numel() {
            let orig = work[li].data()[e];
            work[li].data_mut()[e] = orig + h;
            let up = eval(&work)?;
            work[li].data_mut()[e] = orig - h;
            let down = eval(&work)?;
            work[li].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[li][e];
            let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            if rel > worst.max_rel_err {
                worst = GradCheck { max_rel_err: rel, leaf: li, element: e, analytic: a, numeric };
            }
        }
    }
    Ok(worst)
}

/// One named check in the registered suite.
pub struct SuiteCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl SuiteCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        // f(x) = sum(3x); central differences are exact for linear maps.
        let x = Tensor::new(vec![4], vec![0.5, -1.5, 2.0, 0.25]).unwrap();
        let r = grad_check(
            |g, vars| {
                let s = g.scale(vars[0], 3.0);
                Ok(g.sum(s))
            },
            &[x],
            DEFAULT_H,
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-10, "rel err {}", r.max_rel_err);
    }

    #[test]
    fn softmax_matmul_chain() {
        let a = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64) * 0.17 - 1.0).collect()).unwrap();
        let b = Tensor::new(vec![4, 2], (0..8).map(|i| 0.3 - (i as f64) * 0.11).collect()).unwrap();
        let r = grad_check(
            |g, vars| {
                let m = g.matmul(vars[0], vars[1])?;
                let s = g.softmax_rows(m);
                let sq = g.mul(s, s)?;
                Ok(g.sum(sq))
            },
            &[a, b],
            DEFAULT_H,
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-6, "rel err {}", r.max_rel_err);
    }

    #[test]
    fn non_scalar_output_is_error() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let r = grad_check(|_, vars| Ok(vars[0]), &[x], DEFAULT_H);
        assert!(r.is_err());
    }

    #[test]
    fn dropout_mask_is_stable_across_evaluations() {
        // Same graph seed on every call keeps the mask fixed, so the
        // finite-difference path sees the same function.
        let x = Tensor::new(vec![8], (0..8).map(|i| i as f64 * 0.3 + 0.1).collect()).unwrap();
        let r = grad_check(
            |g, vars| {
                let d = g.dropout(vars[0], 0.5, true)?;
                let sq = g.mul(d, d)?;
                Ok(g.sum(sq))
            },
            &[x],
            DEFAULT_H,
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-8, "rel err {}", r.max_rel_err);
    }
}
