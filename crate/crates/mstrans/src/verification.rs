//! Registered gradient-check suite covering every differentiable op and
//! both layer types, for the `gradcheck` command and the acceptance tests.
//!
//! Every check compares reverse-mode gradients against central finite
//! differences (`h = 1e-5`) at relative tolerance `1e-4` in double
//! precision. Inputs are kept away from kinks (relu at 0, max-pool ties)
//! where the two sides legitimately disagree.

use crate::attention::{self, HeadVars, ScaleSpec};
use crate::model::{self, Arch, Binding, Encoder, Input, InputSpec, ModelConfig, Target, TaskHead};
use crate::tensor::gradcheck::{grad_check, GradCheck, SuiteCheck, DEFAULT_H, DEFAULT_TOL};
use crate::tensor::{Graph, Tensor, Var};
use crate::Result;
use rand::rngs::StdRng;
use rand::SeedableRng;

/// Which part of the suite to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    All,
    Tensor,
    Attention,
    Model,
}

impl Scope {
    pub fn parse(s: &str) -> Result<Scope> {
        match s {
            "all" => Ok(Scope::All),
            "tensor" => Ok(Scope::Tensor),
            "attention" => Ok(Scope::Attention),
            "model" => Ok(Scope::Model),
            other => Err(crate::Error::invalid(
                "gradcheck scope",
                format!("{other:?} (expected all, tensor, attention, or model)"),
            )),
        }
    }
}

fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

fn rand_t(shape: Vec<usize>, lo: f64, hi: f64, seed: u64) -> Tensor {
    Tensor::uniform(shape, lo, hi, &mut rng(seed))
}

/// Values bounded away from zero so relu/abs kinks cannot sit within `h`.
fn rand_nonzero(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut t = rand_t(shape, 0.05, 1.0, seed);
    let mut r = rng(seed ^ 0xF00D);
    for v in t.data_mut() {
        if rand::Rng::random::<bool>(&mut r) {
            *v = -*v;
        }
    }
    t
}

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Check {
    name: &'static str,
    scope: Scope,
    leaves: Vec<Tensor>,
    builder: Builder,
}

fn scalarize(g: &mut Graph, v: Var) -> Result<Var> {
    // sum(x * x) keeps upstream gradients dense and non-constant.
    let sq = g.mul(v, v)?;
    Ok(g.sum(sq))
}

fn checks() -> Vec<Check> {
    let mut list: Vec<Check> = Vec::new();
    let mut push = |name: &'static str, scope: Scope, leaves: Vec<Tensor>, builder: Builder| {
        list.push(Check { name, scope, leaves, builder });
    };

    // ── tensor ops ──────────────────────────────────────────────────
    push(
        "matmul",
        Scope::Tensor,
        vec![rand_t(vec![5, 4], -1.0, 1.0, 1), rand_t(vec![4, 3], -1.0, 1.0, 2)],
        Box::new(|g, v| {
            let m = g.matmul(v[0], v[1])?;
            scalarize(g, m)
        }),
    );
    push(
        "transpose",
        Scope::Tensor,
        vec![rand_t(vec![3, 5], -1.0, 1.0, 3)],
        Box::new(|g, v| {
            let t = g.transpose(v[0])?;
            scalarize(g, t)
        }),
    );
    push(
        "add_broadcast",
        Scope::Tensor,
        vec![rand_t(vec![4, 3], -1.0, 1.0, 4), rand_t(vec![3], -1.0, 1.0, 5)],
        Box::new(|g, v| {
            let s = g.add(v[0], v[1])?;
            scalarize(g, s)
        }),
    );
    push(
        "mul",
        Scope::Tensor,
        vec![rand_t(vec![6], -1.0, 1.0, 6), rand_t(vec![6], -1.0, 1.0, 7)],
        Box::new(|g, v| {
            let m = g.mul(v[0], v[1])?;
            Ok(g.sum(m))
        }),
    );
    push(
        "scale",
        Scope::Tensor,
        vec![rand_t(vec![5], -1.0, 1.0, 8)],
        Box::new(|g, v| {
            let s = g.scale(v[0], -2.5);
            scalarize(g, s)
        }),
    );
    push(
        "relu",
        Scope::Tensor,
        vec![rand_nonzero(vec![8], 9)],
        Box::new(|g, v| {
            let r = g.relu(v[0]);
            scalarize(g, r)
        }),
    );
    push(
        "softmax_rows",
        Scope::Tensor,
        vec![rand_t(vec![3, 5], -2.0, 2.0, 10)],
        Box::new(|g, v| {
            let s = g.softmax_rows(v[0]);
            scalarize(g, s)
        }),
    );
    push(
        "layer_norm",
        Scope::Tensor,
        vec![
            rand_t(vec![4, 6], -1.0, 1.0, 11),
            rand_t(vec![6], 0.5, 1.5, 12),
            rand_t(vec![6], -0.5, 0.5, 13),
        ],
        Box::new(|g, v| {
            let n = g.layer_norm(v[0], v[1], v[2], model::LAYER_NORM_EPS)?;
            scalarize(g, n)
        }),
    );
    push(
        "concat_last",
        Scope::Tensor,
        vec![rand_t(vec![3, 2], -1.0, 1.0, 14), rand_t(vec![3, 4], -1.0, 1.0, 15)],
        Box::new(|g, v| {
            let c = g.concat_last(&[v[0], v[1]])?;
            scalarize(g, c)
        }),
    );
    push(
        "concat_rows",
        Scope::Tensor,
        vec![rand_t(vec![2, 3], -1.0, 1.0, 16), rand_t(vec![4, 3], -1.0, 1.0, 17)],
        Box::new(|g, v| {
            let c = g.concat_rows(&[v[0], v[1]])?;
            scalarize(g, c)
        }),
    );
    push(
        "slice_rows",
        Scope::Tensor,
        vec![rand_t(vec![6, 3], -1.0, 1.0, 18)],
        Box::new(|g, v| {
            let s = g.slice_rows(v[0], 1, 4)?;
            scalarize(g, s)
        }),
    );
    push(
        "max_over_positions",
        Scope::Tensor,
        // Spread values out so no two entries in a column sit within h of
        // each other.
        vec![Tensor::new(vec![3, 4], vec![
            0.9, 0.1, 0.5, 0.3, 0.2, 0.8, 0.15, 0.7, 0.4, 0.45, 0.95, 0.05,
        ])
        .unwrap()],
        Box::new(|g, v| {
            let m = g.max_over_positions(v[0])?;
            scalarize(g, m)
        }),
    );
    push(
        "dropout",
        Scope::Tensor,
        vec![rand_t(vec![10], -1.0, 1.0, 19)],
        Box::new(|g, v| {
            let d = g.dropout(v[0], 0.4, true)?;
            scalarize(g, d)
        }),
    );
    push(
        "embedding",
        Scope::Tensor,
        vec![rand_t(vec![7, 4], -1.0, 1.0, 20)],
        Box::new(|g, v| {
            let e = g.embedding(v[0], &[2, 5, 2, 0])?;
            scalarize(g, e)
        }),
    );
    push(
        "reshape",
        Scope::Tensor,
        vec![rand_t(vec![4, 3], -1.0, 1.0, 21)],
        Box::new(|g, v| {
            let r = g.reshape(v[0], vec![2, 6])?;
            scalarize(g, r)
        }),
    );
    push(
        "mean",
        Scope::Tensor,
        vec![rand_t(vec![9], -1.0, 1.0, 22)],
        Box::new(|g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.mean(sq))
        }),
    );
    push(
        "cross_entropy",
        Scope::Tensor,
        vec![rand_t(vec![6], -2.0, 2.0, 23)],
        Box::new(|g, v| g.cross_entropy(v[0], 2)),
    );
    push(
        "mse_loss",
        Scope::Tensor,
        vec![rand_t(vec![5], -1.0, 1.0, 24)],
        Box::new(|g, v| {
            let target = Tensor::new(vec![5], vec![0.3, -0.2, 0.8, 0.0, -1.1]).unwrap();
            g.mse_loss(v[0], &target)
        }),
    );

    // ── attention ───────────────────────────────────────────────────
    let qkv = |seed: u64| {
        vec![
            rand_t(vec![6, 4], -1.0, 1.0, seed),
            rand_t(vec![6, 4], -1.0, 1.0, seed + 1),
            rand_t(vec![6, 4], -1.0, 1.0, seed + 2),
        ]
    };
    push(
        "window_attention_w3",
        Scope::Attention,
        qkv(30),
        Box::new(|g, v| {
            let o = g.window_attention(v[0], v[1], v[2], 3)?;
            scalarize(g, o)
        }),
    );
    push(
        "window_attention_clipped_w5",
        Scope::Attention,
        qkv(33),
        Box::new(|g, v| {
            let o = g.window_attention(v[0], v[1], v[2], 5)?;
            scalarize(g, o)
        }),
    );
    push(
        "window_attention_full",
        Scope::Attention,
        qkv(36),
        Box::new(|g, v| {
            let o = g.window_attention(v[0], v[1], v[2], 11)?;
            scalarize(g, o)
        }),
    );
    push(
        "sasa_head",
        Scope::Attention,
        vec![
            rand_t(vec![5, 6], -1.0, 1.0, 40),
            rand_t(vec![6, 3], -0.7, 0.7, 41),
            rand_t(vec![6, 3], -0.7, 0.7, 42),
            rand_t(vec![6, 3], -0.7, 0.7, 43),
        ],
        Box::new(|g, v| {
            let params = HeadVars { wq: v[1], wk: v[2], wv: v[3] };
            let o = attention::sasa_head(g, v[0], params, 3)?;
            scalarize(g, o)
        }),
    );
    push(
        "msmsa_two_heads",
        Scope::Attention,
        {
            let mut leaves = vec![rand_t(vec![6, 8], -1.0, 1.0, 50)];
            for s in 0..6 {
                leaves.push(rand_t(vec![8, 4], -0.5, 0.5, 51 + s));
            }
            leaves.push(rand_t(vec![8, 8], -0.5, 0.5, 58));
            leaves
        },
        Box::new(|g, v| {
            let pairs = [
                (HeadVars { wq: v[1], wk: v[2], wv: v[3] }, ScaleSpec::Fixed(3)),
                (HeadVars { wq: v[4], wk: v[5], wv: v[6] }, ScaleSpec::Ratio { denom: 2 }),
            ];
            let (o, _) = attention::msmsa(g, v[0], &pairs, v[7])?;
            scalarize(g, o)
        }),
    );
    push(
        "msa_standard",
        Scope::Attention,
        {
            let mut leaves = vec![rand_t(vec![5, 6], -1.0, 1.0, 60)];
            for s in 0..3 {
                leaves.push(rand_t(vec![6, 3], -0.5, 0.5, 61 + s));
            }
            leaves.push(rand_t(vec![3, 6], -0.5, 0.5, 65));
            leaves
        },
        Box::new(|g, v| {
            let heads = [HeadVars { wq: v[1], wk: v[2], wv: v[3] }];
            let (o, _) = attention::msa_standard(g, v[0], &heads, v[4])?;
            scalarize(g, o)
        }),
    );

    // ── layers and full models ──────────────────────────────────────
    push(
        "ms_transformer_layer",
        Scope::Model,
        {
            // 7x12 hidden state, two heads, widths 3 and 5.
            let mut leaves = vec![rand_t(vec![7, 12], -1.0, 1.0, 70)];
            for s in 0..6 {
                leaves.push(rand_t(vec![12, 4], -0.4, 0.4, 71 + s));
            }
            leaves.push(rand_t(vec![8, 12], -0.4, 0.4, 78));
            leaves.push(rand_t(vec![12], 0.5, 1.5, 79));
            leaves.push(rand_t(vec![12], -0.3, 0.3, 80));
            leaves
        },
        Box::new(|g, v| {
            let pairs = [
                (HeadVars { wq: v[1], wk: v[2], wv: v[3] }, ScaleSpec::Fixed(3)),
                (HeadVars { wq: v[4], wk: v[5], wv: v[6] }, ScaleSpec::Fixed(5)),
            ];
            let (proj, _) = attention::msmsa(g, v[0], &pairs, v[7])?;
            let act = g.relu(proj);
            let sum = g.add(v[0], act)?;
            let normed = g.layer_norm(sum, v[8], v[9], model::LAYER_NORM_EPS)?;
            scalarize(g, normed)
        }),
    );
    push(
        "encoder_multiscale_e2e",
        Scope::Model,
        encoder_leaves(Arch::MultiScale, 90),
        Box::new(move |g, v| encoder_loss(g, v, Arch::MultiScale, 90)),
    );
    push(
        "encoder_vanilla_e2e",
        Scope::Model,
        encoder_leaves(Arch::Vanilla { ffn: true }, 91),
        Box::new(move |g, v| encoder_loss(g, v, Arch::Vanilla { ffn: true }, 91)),
    );
    push(
        "encoder_vanilla_noffn_e2e",
        Scope::Model,
        encoder_leaves(Arch::Vanilla { ffn: false }, 92),
        Box::new(move |g, v| encoder_loss(g, v, Arch::Vanilla { ffn: false }, 92)),
    );

    list
}

fn e2e_config(arch: Arch) -> ModelConfig {
    ModelConfig {
        arch,
        layers: 2,
        heads: 2,
        hidden_dim: 8,
        head_dim: 4,
        alpha: 0.5,
        candidates: vec![ScaleSpec::Fixed(3), ScaleSpec::Ratio { denom: 2 }],
        use_cls: true,
        use_positional: matches!(arch, Arch::Vanilla { .. }),
        dropout: 0.0,
        input: InputSpec::Tokens { vocab_size: 11 },
        task: TaskHead::Classifier { classes: 3, mlp_hidden: 6 },
        max_len: 16,
    }
}

fn encoder_leaves(arch: Arch, seed: u64) -> Vec<Tensor> {
    let enc = Encoder::new(e2e_config(arch), seed).expect("valid config");
    enc.params.iter().map(|(_, t)| t.clone()).collect()
}

fn encoder_loss(g: &mut Graph, vars: &[Var], arch: Arch, seed: u64) -> Result<Var> {
    let enc = Encoder::new(e2e_config(arch), seed)?;
    let mut b = Binding::rebound(vars);
    enc.loss(g, &mut b, Input::Tokens(&[1, 7, 3, 3, 9]), Target::Label(1))
}

/// Runs the selected checks; `on_check` fires after each one (for progress
/// printing).
pub fn run_suite(scope: Scope, mut on_check: impl FnMut(&SuiteCheck)) -> Vec<SuiteCheck> {
    let mut results = Vec::new();
    for check in checks() {
        if scope != Scope::All && check.scope != scope {
            continue;
        }
        let outcome: Result<GradCheck> = grad_check(&check.builder, &check.leaves, DEFAULT_H);
        let max_rel_err = match outcome {
            Ok(r) => r.max_rel_err,
            Err(_) => f64::NAN,
        };
        let result = SuiteCheck { name: check.name, max_rel_err, tolerance: DEFAULT_TOL };
        on_check(&result);
        results.push(result);
    }
    results
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes() {
        let results = run_suite(Scope::All, |_| {});
        assert!(results.len() >= 25);
        for r in &results {
            assert!(r.passed(), "{} failed: rel err {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn scoped_runs_are_subsets() {
        let all = run_suite(Scope::All, |_| {}).len();
        let t = run_suite(Scope::Tensor, |_| {}).len();
        let a = run_suite(Scope::Attention, |_| {}).len();
        let m = run_suite(Scope::Model, |_| {}).len();
        assert_eq!(all, t + a + m);
    }
}
