//! Per-layer allocation of attention heads over scale candidates.
//!
//! A single knob `alpha` steers how strongly shallow layers prefer small
//! scales. For layer `l` (1-based, of `L`) and candidate index `k`
//! (0-based, smallest scale first, of `|Ω|` candidates):
//!
//! ```text
//! z[l][k] = 0                       if l == L or k == |Ω|
//! z[l][k] = z[l][k+1] + alpha / l   for k in |Ω|-1 ..= 0
//! n[l]    = softmax(z[l]) * N'
//! ```
//!
//! so the top layer is always uniform, `alpha > 0` skews shallow layers
//! toward small scales, `alpha < 0` toward large ones. Fractional counts
//! are integerized per layer by largest-remainder rounding (ties to the
//! smaller scale), which keeps every layer summing to exactly `N'` heads.

use crate::attention::{resolve_scale, ScaleSpec};
use crate::{Error, Result};

/// Resolved head allocation for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPlan {
    /// 1-based layer index in `1..=L`.
    pub layer: usize,
    /// `(candidate scale, head count)`, in candidate order (smallest first).
    pub allocations: Vec<(ScaleSpec, usize)>,
    /// Pre-rounding counts `softmax(z) * N'`, same order.
    pub fractional: Vec<f64>,
}

impl LayerPlan {
    pub fn head_total(&self) -> usize {
        self.allocations.iter().map(|&(_, n)| n).sum()
    }

    /// Expands the allocation into one scale per constructed head; zero-count
    /// scales contribute no heads.
    pub fn head_scales(&self) -> Vec<ScaleSpec> {
        let mut scales = Vec::new();
        for &(spec, count) in &self.allocations {
            scales.extend(std::iter::repeat(spec).take(count));
        }
        scales
    }
}

/// Computes per-layer head allocations for all `L` layers.
///
/// `candidates` must be ordered smallest scale first; index 0 is the scale
/// whose preference grows in shallow layers when `alpha > 0`.
pub fn plan_scales(
    alpha: f64,
    layers: usize,
    n_heads: usize,
    candidates: &[ScaleSpec],
) -> Result<Vec<LayerPlan>> {
    if !alpha.is_finite() {
        return Err(Error::invalid("alpha", format!("{alpha} is not finite")));
    }
    if layers == 0 {
        return Err(Error::invalid("layers", "need at least one layer"));
    }
    if n_heads == 0 {
        return Err(Error::invalid("heads", "need at least one head"));
    }
    if candidates.is_empty() {
        return Err(Error::invalid("scale candidates", "empty candidate list"));
    }
    let m = candidates.len();
    let mut plans = Vec::with_capacity(layers);
    for layer in 1..=layers {
        let mut z = vec![0.0; m];
        if layer != layers {
            // k descending from |Ω|-1 to 0 with z[|Ω|] = 0 as the boundary.
            let step = alpha / layer as f64;
            let mut acc = 0.0;
            for k in (0..m).rev() {
                acc += step;
                z[k] = acc;
            }
        }
        let fractional = softmax_counts(&z, n_heads);
        let counts = largest_remainder(&fractional, n_heads);
        let allocations = candidates.iter().copied().zip(counts).collect();
        plans.push(LayerPlan { layer, allocations, fractional });
    }
    Ok(plans)
}

fn softmax_counts(z: &[f64], n_heads: usize) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum * n_heads as f64).collect()
}

/// Hamilton rounding: floors, then distributes the remaining heads to the
/// largest remainders, ties to the smaller index (smaller scale).
fn largest_remainder(fractional: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = fractional.iter().map(|f| f.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractional.len()).collect();
    // Stable sort keeps the smaller index first among equal remainders.
    order.sort_by(|&a, &b| {
        let ra = fractional[a] - fractional[a].floor();
        let rb = fractional[b] - fractional[b].floor();
        rb.partial_cmp(&ra).expect("finite remainders")
    });
    for &k in order.iter().take(total - assigned) {
        counts[k] += 1;
    }
    counts
}

/// Renders plans as a fixed-width table; widths are resolved for sequence
/// length `n` when given.
pub fn describe_plan(plans: &[LayerPlan], n: Option<usize>) -> Result<String> {
    if plans.is_empty() || plans[0].allocations.is_empty() {
        return Err(Error::invalid("describe_plan", "no plans or empty candidate list"));
    }
    let mut out = String::new();
    let header: Vec<String> = plans[0]
        .allocations
        .iter()
        .map(|(s, _)| match n {
            Some(n) => format!("{s}(w={})", resolve_scale(*s, n)),
            None => s.to_string(),
        })
        .collect();
    out.push_str(&format!("{:>6}", "layer"));
    for h in &header {
        out.push_str(&format!("  {h:>12}"));
    }
    out.push('\n');
    for plan in plans {
        out.push_str(&format!("{:>6}", plan.layer));
        for (i, &(_, count)) in plan.allocations.iter().enumerate() {
            out.push_str(&format!("  {:>12}", format!("{} ({:.3})", count, plan.fractional[i])));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Structured `key = value` lines for machine consumption.
pub fn plan_key_values(plans: &[LayerPlan]) -> String {
    let mut out = String::new();
    for plan in plans {
        for (i, &(spec, count)) in plan.allocations.iter().enumerate() {
            out.push_str(&format!(
                "layer{}.{} = {} {:.6}\n",
                plan.layer, spec, count, plan.fractional[i]
            ));
        }
    }
    out
}
