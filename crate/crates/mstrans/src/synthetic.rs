//! Synthetic benchmarks: mirrored summation and a separable keyword task.
//!
//! Mirrored summation: inputs are `N` vectors of dimension `d` drawn
//! componentwise from `U(0,1)`; the target is the elementwise sum of the
//! first `K` mirrored products, `sum_{i=1..K} a_i ⊙ a_{N-i+1}`. Small `K`
//! forces long input-pair distances, which probes long-range dependencies.
//! Generation is deterministic per `(seed, sample index)`, so datasets are
//! reproducible regardless of thread count.

use crate::attention::ScaleSpec;
use crate::model::{Arch, Encoder, InputSpec, ModelConfig, TaskHead};
use crate::seeding::derive_seed;
use crate::tensor::{serial, Tensor};
use crate::train::{self, TaskData, TrainConfig};
use crate::{Error, Result};
use rand::rngs::StdRng;
use rand::SeedableRng;
use std::io::{Read, Write};

/// Mirrored-summation samples: `inputs[i]` is `[N x d]`, `targets[i]` is `[d]`.
#[derive(Debug, Clone)]
pub struct MirroredDataset {
    n: usize,
    d: usize,
    k: usize,
    seed: u64,
    inputs: Vec<Tensor>,
    targets: Vec<Tensor>,
}

impl MirroredDataset {
    pub fn from_parts(n: usize, d: usize, k: usize, inputs: Vec<Tensor>, targets: Vec<Tensor>) -> Self {
        MirroredDataset { n, d, k, seed: 0, inputs, targets }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn input(&self, i: usize) -> &Tensor {
        &self.inputs[i]
    }

    pub fn target(&self, i: usize) -> &Tensor {
        &self.targets[i]
    }

    /// Persists as a header `(N, d, K, count, seed)` plus raw tensors.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let p = path.display().to_string();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(&p, e))?;
        f.write_all(b"MSMIR001").map_err(|e| Error::io(&p, e))?;
        for v in [self.n as u64, self.d as u64, self.k as u64, self.inputs.len() as u64, self.seed] {
            f.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&p, e))?;
        }
        for (inp, tgt) in self.inputs.iter().zip(&self.targets) {
            serial::write_tensor(&mut f, inp).map_err(|e| Error::io(&p, e))?;
            serial::write_tensor(&mut f, tgt).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let p = path.display().to_string();
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(&p, e))?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic).map_err(|e| Error::io(&p, e))?;
        if &magic != b"MSMIR001" {
            return Err(Error::Format { path: p, detail: "bad dataset magic".into() });
        }
        let mut header = [0u64; 5];
        for slot in header.iter_mut() {
            let mut b8 = [0u8; 8];
            f.read_exact(&mut b8).map_err(|e| Error::io(&p, e))?;
            *slot = u64::from_le_bytes(b8);
        }
        let [n, d, k, count, seed] = header;
        let (n, d, k, count) = (n as usize, d as usize, k as usize, count as usize);
        let mut inputs = Vec::with_capacity(count);
        let mut targets = Vec::with_capacity(count);
        for _ in 0..count {
            inputs.push(serial::read_tensor(&mut f, &p)?);
            targets.push(serial::read_tensor(&mut f, &p)?);
        }
        Ok(MirroredDataset { n, d, k, seed, inputs, targets })
    }
}

/// Exact target for one sample: `sum_{i=0..k-1} inputs[i] ⊙ inputs[n-1-i]`
/// per component.
pub fn mirrored_target(inputs: &Tensor, k: usize) -> Tensor {
    let n = inputs.shape()[0];
    let d = inputs.shape()[1];
    let mut out = vec![0.0; d];
    for i in 0..k {
        let a = inputs.row(i);
        let b = inputs.row(n - 1 - i);
        for c in 0..d {
            out[c] += a[c] * b[c];
        }
    }
    Tensor::new(vec![d], out).expect("target shape")
}

/// Generates `count` samples; deterministic for a given seed, and each
/// sample depends only on `(seed, index)`.
pub fn gen_dataset(n: usize, d: usize, k: usize, count: usize, seed: u64) -> Result<MirroredDataset> {
    if d == 0 || k == 0 {
        return Err(Error::invalid("mirrored dataset", "d and K must be >= 1"));
    }
    if k > n {
        return Err(Error::invalid("mirrored dataset", format!("K = {k} exceeds N = {n}")));
    }
    let mut inputs = Vec::with_capacity(count);
    let mut targets = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = StdRng::seed_from_u64(derive_seed(&[seed, i as u64]));
        let sample = Tensor::uniform(vec![n, d], 0.0, 1.0, &mut rng);
        targets.push(mirrored_target(&sample, k));
        inputs.push(sample);
    }
    Ok(MirroredDataset { n, d, k, seed, inputs, targets })
}

/// Per-component MSE of the predict-the-mean baseline, `7K/144`: the
/// variance of a sum of `K` independent products of two `U(0,1)` draws
/// (`Var(XY) = E[X^2]E[Y^2] - (E[X]E[Y])^2 = 1/9 - 1/16`). Exact when the
/// `K` pairs are disjoint, i.e. `K <= N/2`; for larger `K` repeated pairs
/// push the true mean-predictor MSE above this value, so it remains a
/// valid (stricter) floor for trained models.
pub fn trivial_mse(k: usize) -> f64 {
    7.0 * k as f64 / 144.0
}

// ── Keyword task ──────────────────────────────────────────────────────

/// A linearly separable toy classification task: label is `pos` when the
/// trigger token appears anywhere among distractors.
#[derive(Debug, Clone)]
pub struct KeywordTaskConfig {
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for KeywordTaskConfig {
    fn default() -> Self {
        KeywordTaskConfig { vocab_size: 40, min_len: 6, max_len: 12, seed: 0 }
    }
}

/// Emits TSV rows (`label<TAB>tokens`), half positive, half negative.
pub fn gen_keyword_tsv(cfg: &KeywordTaskConfig, count: usize, split_tag: u64) -> String {
    use rand::Rng;
    let mut out = String::new();
    for i in 0..count {
        let mut rng = StdRng::seed_from_u64(derive_seed(&[cfg.seed, split_tag, i as u64]));
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let positive = i % 2 == 0;
        let mut tokens: Vec<String> = (0..len)
            .map(|_| format!("w{}", rng.random_range(0..cfg.vocab_size)))
            .collect();
        if positive {
            let pos = rng.random_range(0..len);
            tokens[pos] = "trigger".to_string();
        } else {
            for t in tokens.iter_mut() {
                if t == "trigger" {
                    *t = "w0".to_string();
                }
            }
        }
        out.push_str(if positive { "pos\t" } else { "neg\t" });
        out.push_str(&tokens.join(" "));
        out.push('\n');
    }
    out
}

// ── Experiment harness ────────────────────────────────────────────────

/// The benchmark's model settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchModel {
    /// 2 layers, all heads at width 3.
    HierS,
    /// 6 layers, all heads at width 3.
    DeepHierS,
    /// 2 layers, scales {3, N/16, N/8, N/4, N/2}, two heads each.
    Flex,
    /// Standard transformer baseline (FFN + positional embeddings).
    Vanilla,
}

impl BenchModel {
    pub const ALL: [BenchModel; 4] =
        [BenchModel::HierS, BenchModel::DeepHierS, BenchModel::Flex, BenchModel::Vanilla];

    pub fn name(self) -> &'static str {
        match self {
            BenchModel::HierS => "hier-s",
            BenchModel::DeepHierS => "deep-hier-s",
            BenchModel::Flex => "flex",
            BenchModel::Vanilla => "vanilla",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hier-s" => Ok(BenchModel::HierS),
            "deep-hier-s" => Ok(BenchModel::DeepHierS),
            "flex" => Ok(BenchModel::Flex),
            "vanilla" => Ok(BenchModel::Vanilla),
            other => Err(Error::invalid(
                "model name",
                format!("{other:?} (expected hier-s, deep-hier-s, flex, or vanilla)"),
            )),
        }
    }

    pub fn flex_candidates() -> Vec<ScaleSpec> {
        vec![
            ScaleSpec::Fixed(3),
            ScaleSpec::Ratio { denom: 16 },
            ScaleSpec::Ratio { denom: 8 },
            ScaleSpec::Ratio { denom: 4 },
            ScaleSpec::Ratio { denom: 2 },
        ]
    }

    /// Architecture for sequence length `n` and input dim `d`.
    pub fn model_config(self, n: usize, d: usize, hidden_dim: usize, head_dim: usize) -> ModelConfig {
        let (arch, layers, candidates, use_positional) = match self {
            BenchModel::HierS => (Arch::MultiScale, 2, vec![ScaleSpec::Fixed(3)], false),
            BenchModel::DeepHierS => (Arch::MultiScale, 6, vec![ScaleSpec::Fixed(3)], false),
            BenchModel::Flex => (Arch::MultiScale, 2, Self::flex_candidates(), false),
            BenchModel::Vanilla => (Arch::Vanilla { ffn: true }, 2, vec![ScaleSpec::Fixed(3)], true),
        };
        ModelConfig {
            arch,
            layers,
            heads: 10,
            hidden_dim,
            head_dim,
            alpha: 0.0,
            candidates,
            use_cls: true,
            use_positional,
            dropout: 0.0,
            input: InputSpec::Vectors { dim: d },
            task: TaskHead::Regressor { out_dim: d },
            max_len: n + 1,
        }
    }
}

/// Desk-scale defaults: the published experiment used N=100, d=50 and 200k
/// samples per split; these defaults keep a CPU run under half an hour.
#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub n: usize,
    pub d: usize,
    pub k_values: Vec<usize>,
    pub train_size: usize,
    pub test_size: usize,
    pub seeds: Vec<u64>,
    pub models: Vec<BenchModel>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden_dim: usize,
    pub head_dim: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n: 40,
            d: 10,
            k_values: vec![10, 20, 30, 40],
            train_size: 20_000,
            test_size: 5_000,
            seeds: vec![1, 2, 3],
            models: BenchModel::ALL.to_vec(),
            epochs: 1,
            batch_size: 16,
            lr: 5e-3,
            hidden_dim: 16,
            head_dim: 3,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_values.is_empty() || self.models.is_empty() || self.seeds.is_empty() {
            return Err(Error::invalid("bench config", "k_values, models, seeds must be nonempty"));
        }
        for &k in &self.k_values {
            if k == 0 || k > self.n {
                return Err(Error::invalid("bench config", format!("K = {k} outside 1..={}", self.n)));
            }
        }
        Ok(())
    }
}

/// One trained cell of the benchmark grid.
#[derive(Debug, Clone)]
pub struct BenchCell {
    pub model: BenchModel,
    pub k: usize,
    pub seed: u64,
    pub test_mse: f64,
    pub final_train_loss: f64,
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub cells: Vec<BenchCell>,
}

impl BenchResult {
    /// Median test MSE over seeds for one `(model, K)` cell.
    pub fn median_mse(&self, model: BenchModel, k: usize) -> Option<f64> {
        let mut values: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.model == model && c.k == k)
            .map(|c| c.test_mse)
            .collect();
        if values.is_empty() {
            return None;
        }
        values.sort_by(|a, b| a.partial_cmp(b).expect("finite mse"));
        Some(values[values.len() / 2])
    }

    /// Plot-ready CSV of medians: `K,model,test_mse`.
    pub fn csv(&self, cfg: &BenchConfig) -> String {
        let mut out = String::from("K,model,test_mse\n");
        for &k in &cfg.k_values {
            for &m in &cfg.models {
                if let Some(mse) = self.median_mse(m, k) {
                    out.push_str(&format!("{k},{},{:.6}\n", m.name(), mse));
                }
            }
        }
        out
    }

    /// Per-seed CSV: `K,model,seed,test_mse,final_train_loss`.
    pub fn detail_csv(&self) -> String {
        let mut out = String::from("K,model,seed,test_mse,final_train_loss\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6}\n",
                c.k,
                c.model.name(),
                c.seed,
                c.test_mse,
                c.final_train_loss
            ));
        }
        out
    }
}

/// Disjoint (train, test) data seeds for one `(run seed, K)` cell.
pub fn bench_split_seeds(seed: u64, k: usize) -> (u64, u64) {
    (derive_seed(&[seed, k as u64, 0]), derive_seed(&[seed, k as u64, 1]))
}

/// Trains every `(model, K, seed)` cell and collects test MSE. Train and
/// test splits come from disjoint derived seeds per `(seed, K)`.
pub fn run_bench(cfg: &BenchConfig, mut progress: impl FnMut(&BenchCell)) -> Result<BenchResult> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for &k in &cfg.k_values {
        for &model in &cfg.models {
            for &seed in &cfg.seeds {
                let (train_seed, test_seed) = bench_split_seeds(seed, k);
                let train_data =
                    TaskData::Mirrored(gen_dataset(cfg.n, cfg.d, k, cfg.train_size, train_seed)?);
                let test_data =
                    TaskData::Mirrored(gen_dataset(cfg.n, cfg.d, k, cfg.test_size, test_seed)?);
                let mconfig = model.model_config(cfg.n, cfg.d, cfg.hidden_dim, cfg.head_dim);
                let mut enc = Encoder::new(mconfig, derive_seed(&[seed, k as u64, 2]))?;
                let tconfig = TrainConfig {
                    lr: cfg.lr,
                    batch_size: cfg.batch_size,
                    epochs: cfg.epochs,
                    seed,
                    ..TrainConfig::default()
                };
                let history = train::train(&mut enc, &train_data, &test_data, &tconfig, |_| {})?;
                let cell = BenchCell {
                    model,
                    k,
                    seed,
                    test_mse: history.best_metric,
                    final_train_loss: history
                        .epochs
                        .last()
                        .map(|e| e.train_loss)
                        .unwrap_or(f64::NAN),
                };
                progress(&cell);
                cells.push(cell);
            }
        }
    }
    Ok(BenchResult { cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::plan_scales;

    #[test]
    fn single_product_target() {
        let inputs = Tensor::new(vec![2, 1], vec![0.5, 0.25]).unwrap();
        let t = mirrored_target(&inputs, 1);
        assert_eq!(t.data(), &[0.125]);
    }

    #[test]
    fn targets_match_bruteforce_loop() {
        let ds = gen_dataset(4, 3, 2, 100, 99).unwrap();
        for i in 0..ds.len() {
            let x = ds.input(i);
            // Independent loop: K=2 means a1*a4 + a2*a3 per component.
            for c in 0..3 {
                let expect = x.row(0)[c] * x.row(3)[c] + x.row(1)[c] * x.row(2)[c];
                let got = ds.target(i).data()[c];
                assert!((got - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let a = gen_dataset(6, 2, 3, 10, 7).unwrap();
        let b = gen_dataset(6, 2, 3, 10, 7).unwrap();
        let c = gen_dataset(6, 2, 3, 10, 8).unwrap();
        for i in 0..10 {
            assert_eq!(a.input(i).data(), b.input(i).data());
            assert_eq!(a.target(i).data(), b.target(i).data());
        }
        assert_ne!(a.input(0).data(), c.input(0).data());
    }

    #[test]
    fn k_greater_than_n_is_error() {
        assert!(gen_dataset(4, 2, 5, 1, 0).is_err());
        assert!(gen_dataset(4, 2, 4, 1, 0).is_ok());
    }

    #[test]
    fn inputs_live_in_unit_interval_with_uniform_stats() {
        // >= 1e5 draws: component mean within 0.5 +- 0.01, variance within
        // 5% of 1/12.
        let ds = gen_dataset(40, 10, 10, 300, 5).unwrap();
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for i in 0..ds.len() {
            for &v in ds.input(i).data() {
                assert!((0.0..1.0).contains(&v));
                sum += v;
                sum_sq += v * v;
                count += 1;
            }
        }
        assert!(count >= 100_000);
        let mean = sum / count as f64;
        let var = sum_sq / count as f64 - mean * mean;
        assert!((mean - 0.5).abs() <= 0.01, "mean {mean}");
        assert!((var - 1.0 / 12.0).abs() <= 0.05 / 12.0, "var {var}");
    }

    #[test]
    fn trivial_mse_analytic_values() {
        assert!((trivial_mse(1) - 7.0 / 144.0).abs() < 1e-15);
        assert!((trivial_mse(144) - 7.0).abs() < 1e-12);
    }

    #[test]
    fn trivial_mse_matches_monte_carlo() {
        // 1e6 simulated products of two U(0,1) draws; variance within 1%.
        let mut rng = StdRng::seed_from_u64(123);
        let draws = Tensor::uniform(vec![2_000_000], 0.0, 1.0, &mut rng);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let m = 1_000_000;
        for i in 0..m {
            let p = draws.data()[2 * i] * draws.data()[2 * i + 1];
            sum += p;
            sum_sq += p * p;
        }
        let mean = sum / m as f64;
        let var = sum_sq / m as f64 - mean * mean;
        let expect = trivial_mse(1);
        assert!((var - expect).abs() / expect <= 0.01, "mc {var} vs {expect}");
    }

    #[test]
    fn mean_predictor_mse_matches_floor_for_disjoint_pairs() {
        // K <= N/2 keeps the K products independent; the mean predictor
        // (K/4 per component) must land on 7K/144 within 2%.
        let (n, d, k) = (8, 2, 4);
        let ds = gen_dataset(n, d, k, 100_000, 31).unwrap();
        let mean = k as f64 / 4.0;
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for i in 0..ds.len() {
            for &t in ds.target(i).data() {
                sum_sq += (t - mean) * (t - mean);
                count += 1;
            }
        }
        let mse = sum_sq / count as f64;
        let floor = trivial_mse(k);
        assert!((mse - floor).abs() / floor <= 0.02, "{mse} vs {floor}");
    }

    #[test]
    fn target_recomputation_from_stored_inputs_is_exact() {
        let ds = gen_dataset(10, 3, 4, 50, 77).unwrap();
        for i in 0..ds.len() {
            let again = mirrored_target(ds.input(i), ds.k());
            assert_eq!(again.data(), ds.target(i).data());
        }
    }

    #[test]
    fn dataset_save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mirrored.bin");
        let ds = gen_dataset(5, 2, 2, 7, 3).unwrap();
        ds.save(&path).unwrap();
        let back = MirroredDataset::load(&path).unwrap();
        assert_eq!(back.len(), ds.len());
        assert_eq!((back.n(), back.d(), back.k()), (5, 2, 2));
        for i in 0..ds.len() {
            assert_eq!(back.input(i).data(), ds.input(i).data());
            assert_eq!(back.target(i).data(), ds.target(i).data());
        }
    }

    #[test]
    fn flex_head_multiset_is_two_per_scale() {
        let cfg = BenchModel::Flex.model_config(40, 10, 24, 4);
        let plans = plan_scales(cfg.alpha, cfg.layers, cfg.heads, &cfg.candidates).unwrap();
        for plan in &plans {
            for &(_, count) in &plan.allocations {
                assert_eq!(count, 2);
            }
        }
    }

    #[test]
    fn keyword_task_is_balanced_and_deterministic() {
        let cfg = KeywordTaskConfig::default();
        let a = gen_keyword_tsv(&cfg, 20, 0);
        let b = gen_keyword_tsv(&cfg, 20, 0);
        assert_eq!(a, b);
        let pos = a.lines().filter(|l| l.starts_with("pos\t")).count();
        assert_eq!(pos, 10);
        for line in a.lines() {
            let (label, text) = line.split_once('\t').unwrap();
            let has_trigger = text.split(' ').any(|t| t == "trigger");
            assert_eq!(has_trigger, label == "pos");
        }
    }
}
