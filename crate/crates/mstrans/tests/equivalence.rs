//! Dual-route oracle checks: the windowed attention kernel against the
//! dense standard-attention path, at head level and across whole stacks.

use mstrans::attention::{full_width, msa_standard, msmsa, sasa_head, HeadVars, ScaleSpec};
use mstrans::model::{Arch, Binding, Encoder, Input, InputSpec, ModelConfig, TaskHead};
use mstrans::tensor::{Graph, Tensor};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn rand_t(shape: Vec<usize>, r: &mut StdRng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, r)
}

#[test]
fn sasa_full_window_equals_standard_head_on_random_cases() {
    let mut r = StdRng::seed_from_u64(2024);
    for case in 0..20 {
        let n = r.random_range(2..=16);
        let d = r.random_range(2..=32);
        let dh = r.random_range(1..=8);
        let mut g = Graph::new();
        let h = g.leaf(rand_t(vec![n, d], &mut r));
        let params = HeadVars {
            wq: g.leaf(rand_t(vec![d, dh], &mut r)),
            wk: g.leaf(rand_t(vec![d, dh], &mut r)),
            wv: g.leaf(rand_t(vec![d, dh], &mut r)),
        };
        let windowed = sasa_head(&mut g, h, params, full_width(n)).unwrap();

        // Dense route: full softmax(Q K^T / sqrt(dh)) V.
        let q = g.matmul(h, params.wq).unwrap();
        let k = g.matmul(h, params.wk).unwrap();
        let v = g.matmul(h, params.wv).unwrap();
        let kt = g.transpose(k).unwrap();
        let scores = g.matmul(q, kt).unwrap();
        let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax_rows(scaled);
        let dense = g.matmul(attn, v).unwrap();

        let diff = g.value(windowed).max_abs_diff(g.value(dense));
        assert!(diff <= 1e-10, "case {case} (n={n} d={d} dh={dh}): diff {diff}");
    }
}

#[test]
fn msmsa_full_windows_equal_msa_on_random_cases() {
    let mut r = StdRng::seed_from_u64(4048);
    for case in 0..20 {
        let n = r.random_range(2..=16);
        let dh = r.random_range(1..=6);
        let heads_n = r.random_range(1..=4);
        let d = r.random_range(2..=32);
        let mut g = Graph::new();
        let h = g.leaf(rand_t(vec![n, d], &mut r));
        let heads: Vec<HeadVars> = (0..heads_n)
            .map(|_| HeadVars {
                wq: g.leaf(rand_t(vec![d, dh], &mut r)),
                wk: g.leaf(rand_t(vec![d, dh], &mut r)),
                wv: g.leaf(rand_t(vec![d, dh], &mut r)),
            })
            .collect();
        let wo = g.leaf(rand_t(vec![heads_n * dh, d], &mut r));
        let spec = ScaleSpec::fixed(full_width(n)).unwrap();
        let pairs: Vec<_> = heads.iter().map(|&hv| (hv, spec)).collect();
        let (ms, _) = msmsa(&mut g, h, &pairs, wo).unwrap();
        let (dense, _) = msa_standard(&mut g, h, &heads, wo).unwrap();
        let diff = g.value(ms).max_abs_diff(g.value(dense));
        assert!(diff <= 1e-10, "case {case}: diff {diff}");
    }
}

/// Full-stack oracle: a multi-scale encoder whose windows cover every
/// sequence must match the vanilla stack with the FFN removed and no
/// positional embeddings, parameter for parameter.
#[test]
fn full_window_stack_equals_ffn_free_vanilla_stack() {
    let mut r = StdRng::seed_from_u64(99);
    for case in 0..20 {
        let n = r.random_range(1..=12);
        let d = r.random_range(2..=6);
        let seed = r.random::<u64>();
        let base = ModelConfig {
            arch: Arch::MultiScale,
            layers: 2,
            heads: 3,
            hidden_dim: 12,
            head_dim: 4,
            alpha: 0.0,
            // Wide enough to cover N + CLS for every tested N.
            candidates: vec![ScaleSpec::fixed(2 * 13 - 1).unwrap()],
            use_cls: true,
            use_positional: false,
            dropout: 0.0,
            input: InputSpec::Vectors { dim: d },
            task: TaskHead::Regressor { out_dim: d },
            max_len: 16,
        };
        let ms = Encoder::new(base.clone(), seed).unwrap();
        let vanilla_cfg = ModelConfig { arch: Arch::Vanilla { ffn: false }, ..base };
        let vanilla = Encoder::new(vanilla_cfg, seed).unwrap();

        // Identical initialization: same parameter names, shapes, values.
        for ((n1, t1), (n2, t2)) in ms.params.iter().zip(vanilla.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data());
        }

        let x = Tensor::uniform(vec![n, d], 0.0, 1.0, &mut r);
        let run = |enc: &Encoder| {
            let mut g = Graph::new();
            let mut b = Binding::new(&enc.params, false);
            let top = enc.encode(&mut g, &mut b, Input::Vectors(&x), None).unwrap();
            g.value(top).data().to_vec()
        };
        let a = run(&ms);
        let b = run(&vanilla);
        let diff = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-10, "case {case} (n={n}): diff {diff}");
    }
}
