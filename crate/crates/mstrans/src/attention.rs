//! Attention kernels: windowed scale-aware heads and standard multi-head
//! self-attention.
//!
//! A head's scale is its total odd window width (a width of 1 is the
//! position itself, 3 adds one neighbor on each side, and so on). Windows
//! are clipped at sequence boundaries; no padding rows and no masked logits
//! are introduced, so each softmax runs over exactly the rows that exist.
//! Scores are scaled by `1/sqrt(D')`, the per-head dimension.

use crate::tensor::{Graph, Var};
use crate::{Error, Result};

pub use crate::tensor::context_span;

/// A head's receptive scope: a fixed odd width, or a fraction of the
/// sequence length resolved per sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScaleSpec {
    /// Constant odd window width.
    Fixed(usize),
    /// `N / denom`, rounded to an odd width at resolution time.
    Ratio { denom: u32 },
}

impl ScaleSpec {
    pub fn fixed(width: usize) -> Result<Self> {
        if width == 0 || width % 2 == 0 {
            return Err(Error::invalid("scale width", format!("{width} is not odd and >= 1")));
        }
        Ok(ScaleSpec::Fixed(width))
    }

    pub fn ratio(denom: u32) -> Result<Self> {
        if denom == 0 || !denom.is_power_of_two() {
            return Err(Error::invalid("scale denominator", format!("{denom} is not a power of two")));
        }
        Ok(ScaleSpec::Ratio { denom })
    }

    /// Parses `"3"` or `"N/16"` (case-insensitive `N`).
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("N/").or_else(|| s.strip_prefix("n/")) {
            let denom: u32 = rest
                .parse()
                .map_err(|_| Error::invalid("scale syntax", format!("bad ratio {s:?}")))?;
            ScaleSpec::ratio(denom)
        } else {
            let w: usize = s
                .parse()
                .map_err(|_| Error::invalid("scale syntax", format!("expected width or N/k, got {s:?}")))?;
            ScaleSpec::fixed(w)
        }
    }
}

impl std::fmt::Display for ScaleSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScaleSpec::Fixed(w) => write!(f, "{w}"),
            ScaleSpec::Ratio { denom } => write!(f, "N/{denom}"),
        }
    }
}

/// Resolves a scale to an odd window width for a sequence of length `n`.
///
/// Ratios round half up, then even results are bumped to the next odd
/// number; the result is clamped to `[1, 2n-1]`. Fixed widths pass through
/// unchanged (clipping makes oversized windows harmless).
pub fn resolve_scale(spec: ScaleSpec, n: usize) -> usize {
    debug_assert!(n >= 1);
    match spec {
        ScaleSpec::Fixed(w) => w,
        ScaleSpec::Ratio { denom } => {
            let rounded = (n as f64 / denom as f64 + 0.5).floor() as usize;
            let odd = if rounded == 0 {
                1
            } else if rounded % 2 == 0 {
                rounded + 1
            } else {
                rounded
            };
            odd.min(2 * n - 1)
        }
    }
}

/// Width that always covers the whole sequence regardless of position.
pub fn full_width(n: usize) -> usize {
    2 * n - 1
}

/// Per-head projection variables (`D -> D'`).
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// Context rows for position `j`: rows `j-r ..= j+r` of `x`, clipped to the
/// sequence. The effective width shrinks near boundaries.
pub fn extract_context(g: &mut Graph, x: Var, j: usize, width: usize) -> Result<Var> {
    let n = g.value(x).shape()[0];
    if j >= n {
        return Err(Error::invalid("extract_context", format!("position {j} >= length {n}")));
    }
    if width % 2 == 0 || width == 0 {
        return Err(Error::invalid("extract_context width", format!("{width} is not odd")));
    }
    let (lo, hi) = context_span(j, width, n);
    g.slice_rows(x, lo, hi)
}

/// One scale-aware head: project `h` to Q/K/V and attend within the window.
///
/// The returned node carries the post-softmax rows; fetch them with
/// [`Graph::attention_rows`].
pub fn sasa_head(g: &mut Graph, h: Var, params: HeadVars, width: usize) -> Result<Var> {
    let q = g.matmul(h, params.wq)?;
    let k = g.matmul(h, params.wk)?;
    let v = g.matmul(h, params.wv)?;
    g.window_attention(q, k, v, width)
}

/// Multi-scale multi-head self-attention: concatenated scale-aware heads
/// followed by the output projection.
///
/// Returns the projected output plus the per-head attention nodes in head
/// order.
pub fn msmsa(
    g: &mut Graph,
    h: Var,
    heads: &[(HeadVars, ScaleSpec)],
    wo: Var,
) -> Result<(Var, Vec<Var>)> {
    if heads.is_empty() {
        return Err(Error::invalid("msmsa", "no heads"));
    }
    let n = g.value(h).shape()[0];
    let mut outs = Vec::with_capacity(heads.len());
    for &(params, spec) in heads {
        let width = resolve_scale(spec, n);
        outs.push(sasa_head(g, h, params, width)?);
    }
    let cat = g.concat_last(&outs)?;
    let projected = g.matmul(cat, wo)?;
    Ok((projected, outs))
}

/// Standard multi-head self-attention over the full sequence: per head,
/// `softmax(Q K^T / sqrt(D')) V`, heads concatenated, then `W^O`.
///
/// Returns the output plus each head's `[N x N]` attention matrix node.
pub fn msa_standard(
    g: &mut Graph,
    h: Var,
    heads: &[HeadVars],
    wo: Var,
) -> Result<(Var, Vec<Var>)> {
    if heads.is_empty() {
        return Err(Error::invalid("msa_standard", "no heads"));
    }
    let mut outs = Vec::with_capacity(heads.len());
    let mut attns = Vec::with_capacity(heads.len());
    for &params in heads {
        let q = g.matmul(h, params.wq)?;
        let k = g.matmul(h, params.wk)?;
        let v = g.matmul(h, params.wv)?;
        let dh = g.value(q).shape()[1];
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax_rows(scaled);
        outs.push(g.matmul(attn, v)?);
        attns.push(attn);
    }
    let cat = g.concat_last(&outs)?;
    let projected = g.matmul(cat, wo)?;
    Ok((projected, attns))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn rng(seed: u64) -> StdRng {
        StdRng::seed_from_u64(seed)
    }

    fn rand_t(shape: Vec<usize>, r: &mut StdRng) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, r)
    }

    fn head_vars(g: &mut Graph, d: usize, dh: usize, r: &mut StdRng) -> HeadVars {
        HeadVars {
            wq: g.leaf(rand_t(vec![d, dh], r)),
            wk: g.leaf(rand_t(vec![d, dh], r)),
            wv: g.leaf(rand_t(vec![d, dh], r)),
        }
    }

    #[test]
    fn resolve_fixed_passes_through() {
        assert_eq!(resolve_scale(ScaleSpec::fixed(3).unwrap(), 100), 3);
    }

    #[test]
    fn resolve_ratio_floors_to_minimum_odd() {
        assert_eq!(resolve_scale(ScaleSpec::ratio(16).unwrap(), 16), 1);
    }

    #[test]
    fn resolve_ratio_rounds_half_up_to_odd() {
        // 100/8 = 12.5 -> 13, already odd.
        assert_eq!(resolve_scale(ScaleSpec::ratio(8).unwrap(), 100), 13);
        // 100/4 = 25, odd already.
        assert_eq!(resolve_scale(ScaleSpec::ratio(4).unwrap(), 100), 25);
        // 32/16 = 2, even -> 3.
        assert_eq!(resolve_scale(ScaleSpec::ratio(16).unwrap(), 32), 3);
        // Cap at 2N-1.
        assert_eq!(resolve_scale(ScaleSpec::ratio(1).unwrap(), 2), 3);
    }

    #[test]
    fn scale_syntax_roundtrip() {
        for s in ["1", "3", "N/16", "N/2"] {
            assert_eq!(ScaleSpec::parse(s).unwrap().to_string(), s);
        }
        assert!(ScaleSpec::parse("4").is_err());
        assert!(ScaleSpec::parse("N/3").is_err());
        assert!(ScaleSpec::parse("wide").is_err());
    }

    #[test]
    fn context_width_one_is_the_position_itself() {
        let mut g = Graph::new();
        let x = g.leaf(rand_t(vec![5, 3], &mut rng(1)));
        for j in 0..5 {
            let c = extract_context(&mut g, x, j, 1).unwrap();
            assert_eq!(g.value(c).shape(), &[1, 3]);
            assert_eq!(g.value(c).data(), g.value(x).row(j));
        }
    }

    #[test]
    fn context_clips_at_left_boundary() {
        let mut g = Graph::new();
        let x = g.leaf(rand_t(vec![5, 2], &mut rng(2)));
        let c = extract_context(&mut g, x, 0, 3).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 2]);
        assert_eq!(g.value(c).data(), &g.value(x).data()[0..4]);
    }

    #[test]
    fn context_covers_whole_sequence_when_wide_enough() {
        let mut g = Graph::new();
        let x = g.leaf(rand_t(vec![5, 2], &mut rng(3)));
        let c = extract_context(&mut g, x, 2, 5).unwrap();
        assert_eq!(g.value(c).data(), g.value(x).data());
    }

    #[test]
    fn sasa_width_one_is_value_projection() {
        let mut r = rng(4);
        let mut g = Graph::new();
        let h = g.leaf(rand_t(vec![6, 4], &mut r));
        let params = head_vars(&mut g, 4, 3, &mut r);
        let out = sasa_head(&mut g, h, params, 1).unwrap();
        let v = g.matmul(h, params.wv).unwrap();
        // softmax over one logit is exactly 1, so out == V row for row.
        assert_eq!(g.value(out).data(), g.value(v).data());
    }

    #[test]
    fn sasa_zero_input_gives_zero_output() {
        let mut g = Graph::new();
        let h = g.leaf(Tensor::zeros(vec![2, 1]));
        let one = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let params = HeadVars {
            wq: g.leaf(one.clone()),
            wk: g.leaf(one.clone()),
            wv: g.leaf(one),
        };
        for width in [3, 5] {
            let out = sasa_head(&mut g, h, params, width).unwrap();
            assert_eq!(g.value(out).data(), &[0.0, 0.0]);
        }
    }

    #[test]
    fn full_window_sasa_matches_standard_head() {
        let mut r = rng(5);
        for case in 0..10 {
            let n = 2 + (case % 7);
            let mut g = Graph::new();
            let h = g.leaf(rand_t(vec![n, 5], &mut r));
            let params = head_vars(&mut g, 5, 4, &mut r);
            let wide = sasa_head(&mut g, h, params, full_width(n)).unwrap();

            let q = g.matmul(h, params.wq).unwrap();
            let k = g.matmul(h, params.wk).unwrap();
            let v = g.matmul(h, params.wv).unwrap();
            let kt = g.transpose(k).unwrap();
            let scores = g.matmul(q, kt).unwrap();
            let scaled = g.scale(scores, 1.0 / 2.0);
            let attn = g.softmax_rows(scaled);
            let dense = g.matmul(attn, v).unwrap();

            let diff = g.value(wide).max_abs_diff(g.value(dense));
            assert!(diff <= 1e-10, "case {case}: diff {diff}");
        }
    }

    #[test]
    fn msmsa_single_head_identity_wo_equals_head() {
        let mut r = rng(6);
        let mut g = Graph::new();
        let h = g.leaf(rand_t(vec![5, 3], &mut r));
        let params = head_vars(&mut g, 3, 3, &mut r);
        let mut eye = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let wo = g.leaf(eye);
        let spec = ScaleSpec::fixed(3).unwrap();
        let (out, _) = msmsa(&mut g, h, &[(params, spec)], wo).unwrap();
        let head = sasa_head(&mut g, h, params, 3).unwrap();
        assert_eq!(g.value(out).data(), g.value(head).data());
    }

    #[test]
    fn msmsa_full_windows_match_msa_standard() {
        let mut r = rng(7);
        for case in 0..5 {
            let n = 3 + case;
            let mut g = Graph::new();
            let h = g.leaf(rand_t(vec![n, 6], &mut r));
            let heads: Vec<HeadVars> = (0..2).map(|_| head_vars(&mut g, 6, 3, &mut r)).collect();
            let wo = g.leaf(rand_t(vec![6, 6], &mut r));
            let spec = ScaleSpec::fixed(full_width(n)).unwrap();
            let pairs: Vec<_> = heads.iter().map(|&hv| (hv, spec)).collect();
            let (ms, _) = msmsa(&mut g, h, &pairs, wo).unwrap();
            let (dense, _) = msa_standard(&mut g, h, &heads, wo).unwrap();
            let diff = g.value(ms).max_abs_diff(g.value(dense));
            assert!(diff <= 1e-10, "case {case}: diff {diff}");
        }
    }

    #[test]
    fn msa_single_position_is_value_path() {
        let mut r = rng(8);
        let mut g = Graph::new();
        let h = g.leaf(rand_t(vec![1, 4], &mut r));
        let heads: Vec<HeadVars> = (0..2).map(|_| head_vars(&mut g, 4, 2, &mut r)).collect();
        let wo = g.leaf(rand_t(vec![4, 4], &mut r));
        let (out, _) = msa_standard(&mut g, h, &heads, wo).unwrap();

        let vs: Vec<Var> = heads.iter().map(|p| g.matmul(h, p.wv).unwrap()).collect();
        let cat = g.concat_last(&vs).unwrap();
        let expect = g.matmul(cat, wo).unwrap();
        let diff = g.value(out).max_abs_diff(g.value(expect));
        assert!(diff <= 1e-12, "diff {diff}");
    }

    #[test]
    fn msa_matches_independent_dense_formula() {
        // Plain-Vec re-implementation, no Graph involved.
        let mut r = rng(9);
        let (n, d, dh) = (4, 3, 2);
        let h = rand_t(vec![n, d], &mut r);
        let wq = rand_t(vec![d, dh], &mut r);
        let wk = rand_t(vec![d, dh], &mut r);
        let wv = rand_t(vec![d, dh], &mut r);
        let wo = rand_t(vec![dh, d], &mut r);

        let proj = |m: &Tensor, w: &Tensor| -> Vec<Vec<f64>> {
            (0..n)
                .map(|i| {
                    (0..dh)
                        .map(|j| (0..d).map(|p| m.row(i)[p] * w.data()[p * dh + j]).sum())
                        .collect()
                })
                .collect()
        };
        let (q, k, v) = (proj(&h, &wq), proj(&h, &wk), proj(&h, &wv));
        let mut expect = vec![vec![0.0; d]; n];
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|t| {
                    (0..dh).map(|u| q[i][u] * k[t][u]).sum::<f64>() / (dh as f64).sqrt()
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut ctx = vec![0.0; dh];
            for t in 0..n {
                for u in 0..dh {
                    ctx[u] += exps[t] / z * v[t][u];
                }
            }
            for c in 0..d {
                expect[i][c] = (0..dh).map(|u| ctx[u] * wo.data()[u * d + c]).sum();
            }
        }

        let mut g = Graph::new();
        let hv = g.leaf(h);
        let params = HeadVars { wq: g.leaf(wq), wk: g.leaf(wk), wv: g.leaf(wv) };
        let wov = g.leaf(wo);
        let (out, _) = msa_standard(&mut g, hv, &[params], wov).unwrap();
        for i in 0..n {
            for c in 0..d {
                let got = g.value(out).row(i)[c];
                assert!((got - expect[i][c]).abs() <= 1e-12, "({i},{c}): {got} vs {}", expect[i][c]);
            }
        }
    }

    #[test]
    fn msa_is_permutation_equivariant() {
        let mut r = rng(10);
        let (n, d) = (5, 4);
        let h = rand_t(vec![n, d], &mut r);
        let perm = [3usize, 0, 4, 1, 2];
        let mut hp = Tensor::zeros(vec![n, d]);
        for (dst, &src) in perm.iter().enumerate() {
            hp.data_mut()[dst * d..(dst + 1) * d].copy_from_slice(h.row(src));
        }

        let mut g = Graph::new();
        let heads: Vec<HeadVars> = (0..2).map(|_| head_vars(&mut g, d, 2, &mut r)).collect();
        let wo = g.leaf(rand_t(vec![4, d], &mut r));
        let hv = g.leaf(h);
        let hpv = g.leaf(hp);
        let (out, _) = msa_standard(&mut g, hv, &heads, wo).unwrap();
        let (outp, _) = msa_standard(&mut g, hpv, &heads, wo).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..d {
                let a = g.value(outp).row(dst)[c];
                let b = g.value(out).row(src)[c];
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_over_clipped_windows() {
        let mut r = rng(11);
        let mut g = Graph::new();
        let h = g.leaf(rand_t(vec![7, 4], &mut r));
        let params = head_vars(&mut g, 4, 3, &mut r);
        let out = sasa_head(&mut g, h, params, 5).unwrap();
        let rows = g.attention_rows(out).unwrap();
        assert_eq!(rows.len(), 7);
        for (j, (start, w)) in rows.iter().enumerate() {
            let (lo, hi) = context_span(j, 5, 7);
            assert_eq!(*start, lo);
            assert_eq!(w.len(), hi - lo);
            let s: f64 = w.iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }
}
