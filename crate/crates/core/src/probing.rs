//! Linear probes for response length on per-layer hidden states.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{SamplingConfig, TinySequenceModel, Trajectory};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::toyenv::{LengthTask, ToyVocabulary};
use crate::trainer::sample_outputs;

pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_ALPHA: f64 = 1.0;
pub const PROBE_FILE: &str = "probe.json";
pub const PROBE_CSV: &str = "probe.csv";
pub const PROBE_PLOT: &str = "probe_plot.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbePosition {
    FirstToken,
    LastToken,
}

impl ProbePosition {
    pub const ALL: [ProbePosition; 2] = [Self::FirstToken, Self::LastToken];

    pub fn name(self) -> &'static str {
        match self {
            Self::FirstToken => "first_token",
            Self::LastToken => "last_token",
        }
    }
}

/// Hidden state per layer (embedding first) at the two probe positions.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturedStates<F> {
    pub first_token: Vec<Vec<F>>,
    pub last_token: Vec<Vec<F>>,
}

/// Reads activations at the positions that emit the first and the last output token.
pub fn capture_states<F: Scalar>(policy: &TinySequenceModel<F>, traj: &Trajectory) -> Result<CapturedStates<F>> {
    if traj.output_tokens.is_empty() {
        return Err(Error::InvalidInput("cannot capture states of an empty trajectory".into()));
    }
    if traj.prompt_tokens.is_empty() {
        return Err(Error::InvalidInput("trajectory has no prompt".into()));
    }
    let seq = traj.full_sequence();
    let hs = policy.hidden_states(&seq[..seq.len() - 1])?;
    let first = traj.prompt_tokens.len() - 1;
    let last = seq.len() - 2;
    Ok(CapturedStates {
        first_token: hs.iter().map(|m| m.row(first).to_vec()).collect(),
        last_token: hs.iter().map(|m| m.row(last).to_vec()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset<F> {
    pub position: ProbePosition,
    /// One design matrix per layer; rows are examples.
    pub layers: Vec<Matrix<F>>,
    pub y: Vec<F>,
}

impl<F: Scalar> ProbeDataset<F> {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Shape("probe dataset has no layers".into()));
        }
        if let Some((l, m)) = self.layers.iter().enumerate().find(|(_, m)| m.rows() != self.y.len()) {
            return Err(Error::Shape(format!("layer {l} has {} rows for {} targets", m.rows(), self.y.len())));
        }
        Ok(())
    }
}

/// Builds one dataset per position from trajectories; `y` is each trajectory's word count.
pub fn build_datasets<F: Scalar>(policy: &TinySequenceModel<F>, trajs: &[Trajectory]) -> Result<Vec<ProbeDataset<F>>> {
    let captured = trajs.iter().map(|t| capture_states(policy, t)).collect::<Result<Vec<_>>>()?;
    let y: Vec<F> = trajs.iter().map(|t| F::from_usize_lossy(t.word_count as usize)).collect();
    let n_layers = policy.n_layers() + 1;
    let stack = |pick: fn(&CapturedStates<F>) -> &Vec<Vec<F>>| -> Vec<Matrix<F>> {
        (0..n_layers).map(|l| Matrix::from_rows(&captured.iter().map(|c| pick(c)[l].clone()).collect::<Vec<_>>())).collect()
    };
    Ok(vec![
        ProbeDataset { position: ProbePosition::FirstToken, layers: stack(|c| &c.first_token), y: y.clone() },
        ProbeDataset { position: ProbePosition::LastToken, layers: stack(|c| &c.last_token), y },
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel<F> {
    pub weights: Vec<F>,
    pub intercept: F,
}

impl<F: Scalar> RidgeModel<F> {
    pub fn predict_row(&self, x: &[F]) -> F {
        self.intercept + x.iter().zip(&self.weights).map(|(&a, &w)| a * w).sum::<F>()
    }

    pub fn predict(&self, x: &Matrix<F>) -> Vec<F> {
        (0..x.rows()).map(|i| self.predict_row(x.row(i))).collect()
    }
}

/// Solves `A w = b` for symmetric positive definite `A` (row-major, n × n).
fn cholesky_solve<F: Scalar>(mut a: Vec<F>, mut b: Vec<F>, n: usize) -> Result<Vec<F>> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > F::zero()) {
            return Err(Error::NonFinite("ridge system is not positive definite".into()));
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * n + k] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= a[k * n + i] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    Ok(b)
}

fn ridge_solve<F: Scalar>(x: &Matrix<F>, y: &[F], alpha: F, center: bool) -> Result<RidgeModel<F>> {
    let (n, d) = (x.rows(), x.cols());
    if n != y.len() || n < 2 || d == 0 {
        return Err(Error::Shape(format!("ridge needs matching rows >= 2 and at least one column, got {n}x{d} for {} targets", y.len())));
    }
    if !(alpha > F::zero()) || !alpha.is_finite() {
        return Err(Error::InvalidInput(format!("ridge alpha must be positive and finite, got {alpha}")));
    }
    let nf = F::from_usize_lossy(n);
    let (mx, my) = if center {
        let mx: Vec<F> = (0..d).map(|j| x.column(j).into_iter().sum::<F>() / nf).collect();
        (mx, y.iter().copied().sum::<F>() / nf)
    } else {
        (vec![F::zero(); d], F::zero())
    };
    let mut gram = vec![F::zero(); d * d];
    let mut rhs = vec![F::zero(); d];
    let mut xc = vec![F::zero(); d];
    for i in 0..n {
        for (j, v) in xc.iter_mut().enumerate() {
            *v = x.get(i, j) - mx[j];
        }
        let yi = y[i] - my;
        for a in 0..d {
            rhs[a] += xc[a] * yi;
            for b in 0..=a {
                gram[a * d + b] += xc[a] * xc[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            gram[b * d + a] = gram[a * d + b];
        }
        gram[a * d + a] += alpha;
    }
    let weights = cholesky_solve(gram, rhs, d)?;
    let intercept = my - weights.iter().zip(&mx).map(|(&w, &m)| w * m).sum::<F>();
    Ok(RidgeModel { weights, intercept })
}

/// Ridge regression on centered data; the intercept restores the means.
pub fn ridge_fit<F: Scalar>(x: &Matrix<F>, y: &[F], alpha: F) -> Result<RidgeModel<F>> {
    ridge_solve(x, y, alpha, true)
}

/// Ridge without centering or intercept.
pub fn ridge_fit_uncentered<F: Scalar>(x: &Matrix<F>, y: &[F], alpha: F) -> Result<RidgeModel<F>> {
    ridge_solve(x, y, alpha, false)
}

pub fn pearson_r<F: Scalar>(pred: &[F], actual: &[F]) -> Result<F> {
    if pred.len() != actual.len() || pred.len() < 2 {
        return Err(Error::Shape(format!("pearson needs two equal-length vectors of length >= 2, got {} and {}", pred.len(), actual.len())));
    }
    let n = F::from_usize_lossy(pred.len());
    let mp = pred.iter().copied().sum::<F>() / n;
    let ma = actual.iter().copied().sum::<F>() / n;
    let (mut sab, mut saa, mut sbb) = (F::zero(), F::zero(), F::zero());
    for (&p, &a) in pred.iter().zip(actual) {
        let (dp, da) = (p - mp, a - ma);
        sab += dp * da;
        saa += dp * dp;
        sbb += da * da;
    }
    if saa == F::zero() || sbb == F::zero() {
        return Err(Error::Undefined("pearson correlation is undefined for a zero-variance input".into()));
    }
    let r = sab / (saa.sqrt() * sbb.sqrt());
    Ok(r.max(-F::one()).min(F::one()))
}

/// Seeded assignment of `n` examples to `folds` near-equal folds.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (k, &i) in order.iter().enumerate() {
        fold[i] = k % folds;
    }
    fold
}

fn select_rows<F: Scalar>(x: &Matrix<F>, rows: &[usize]) -> Matrix<F> {
    let mut data = Vec::with_capacity(rows.len() * x.cols());
    for &i in rows {
        data.extend_from_slice(x.row(i));
    }
    Matrix::from_vec(rows.len(), x.cols(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub folds: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { folds: DEFAULT_FOLDS, alpha: DEFAULT_ALPHA, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEntry {
    pub position: ProbePosition,
    pub layer: usize,
    /// `None` when any fold's correlation is undefined, such as a layer whose states do not
    /// vary across examples.
    pub mean_r: Option<f64>,
    pub per_fold_r: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub undefined_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub folds: usize,
    pub alpha: f64,
    pub seed: u64,
    pub examples: usize,
    /// Features are centered, not standardized.
    pub preprocessing: String,
    pub entries: Vec<ProbeEntry>,
}

impl ProbeResult {
    pub fn r(&self, position: ProbePosition, layer: usize) -> Option<f64> {
        self.entries.iter().find(|e| e.position == position && e.layer == layer).and_then(|e| e.mean_r)
    }
}

/// Cross-validated probe per (position, layer): fit on all folds but one, score Pearson r on
/// the held-out fold, average over folds.
pub fn probe_datasets<F: Scalar>(datasets: &[ProbeDataset<F>], cfg: &ProbeConfig) -> Result<ProbeResult> {
    let n = datasets.first().map_or(0, |d| d.y.len());
    if cfg.folds < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 folds, got {}", cfg.folds)));
    }
    if n < cfg.folds * 2 {
        return Err(Error::InvalidInput(format!("{n} examples are too few for {} folds", cfg.folds)));
    }
    let assign = fold_assignment(n, cfg.folds, cfg.seed);
    let alpha = F::lit(cfg.alpha);
    let mut entries = Vec::new();
    for ds in datasets {
        ds.validate()?;
        if ds.y.len() != n {
            return Err(Error::Shape("probe datasets disagree on the example count".into()));
        }
        for (layer, x) in ds.layers.iter().enumerate() {
            let mut per_fold_r = Vec::with_capacity(cfg.folds);
            let mut undefined_reason = None;
            for k in 0..cfg.folds {
                let train: Vec<usize> = (0..n).filter(|&i| assign[i] != k).collect();
                let test: Vec<usize> = (0..n).filter(|&i| assign[i] == k).collect();
                let ytr: Vec<F> = train.iter().map(|&i| ds.y[i]).collect();
                let yte: Vec<F> = test.iter().map(|&i| ds.y[i]).collect();
                let model = ridge_fit(&select_rows(x, &train), &ytr, alpha)?;
                let pred = model.predict(&select_rows(x, &test));
                match pearson_r(&pred, &yte) {
                    Ok(r) => per_fold_r.push(Some(r.as_f64())),
                    Err(Error::Undefined(msg)) => {
                        undefined_reason.get_or_insert(format!("fold {k}: {msg}"));
                        per_fold_r.push(None);
                    }
                    Err(e) => return Err(e),
                }
            }
            let mean_r = per_fold_r.iter().copied().sum::<Option<f64>>().map(|s| s / cfg.folds as f64);
            entries.push(ProbeEntry { position: ds.position, layer, mean_r, per_fold_r, undefined_reason });
        }
    }
    Ok(ProbeResult { folds: cfg.folds, alpha: cfg.alpha, seed: cfg.seed, examples: n, preprocessing: "center".into(), entries })
}

/// Generates one response per task, captures states and runs the probe.
pub fn probe_sweep<F: Scalar>(
    policy: &TinySequenceModel<F>,
    tasks: &[LengthTask],
    vocab: &ToyVocabulary,
    sampling: &SamplingConfig,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if tasks.len() < cfg.folds {
        return Err(Error::InvalidInput(format!("{} tasks are fewer than {} folds", tasks.len(), cfg.folds)));
    }
    let trajs = sample_outputs(policy, tasks, vocab, sampling, cfg.seed)?;
    probe_datasets(&build_datasets(policy, &trajs)?, cfg)
}

pub fn to_csv(result: &ProbeResult) -> String {
    let mut out = String::from("position,layer,mean_r");
    for k in 0..result.folds {
        let _ = write!(out, ",fold_{k}");
    }
    out.push('\n');
    for e in &result.entries {
        let cell = |r: Option<f64>| r.map_or_else(String::new, |v| v.to_string());
        let _ = write!(out, "{},{},{}", e.position.name(), e.layer, cell(e.mean_r));
        for r in &e.per_fold_r {
            let _ = write!(out, ",{}", cell(*r));
        }
        out.push('\n');
    }
    out
}

const BARS: [char; 8] = ['▁', '▂', '▃', '▄', '▅', '▆', '▇', '█'];

/// One sparkline per position over layers; bar height is r clamped to [0, 1], and `·`
/// marks an undefined layer.
pub fn sparkline(result: &ProbeResult) -> String {
    let mut out = String::new();
    for pos in ProbePosition::ALL {
        let rs: Vec<Option<f64>> = result.entries.iter().filter(|e| e.position == pos).map(|e| e.mean_r).collect();
        if rs.is_empty() {
            continue;
        }
        let bars: String = rs.iter().map(|r| r.map_or('·', |r| BARS[((r.clamp(0.0, 1.0) * 7.0).round()) as usize])).collect();
        let nums: Vec<String> = rs.iter().map(|r| r.map_or_else(|| "undef".to_string(), |r| format!("{r:.3}"))).collect();
        let _ = writeln!(out, "{:<12} {bars}  {}", pos.name(), nums.join(" "));
    }
    out
}

/// Writes probe.json, the CSV and the sparkline; returns the relative paths.
pub fn write_probe(dir: &Path, result: &ProbeResult) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    crate::artifacts::write_json_pretty(&dir.join(PROBE_FILE), result)?;
    fs::write(dir.join(PROBE_CSV), to_csv(result))?;
    fs::write(dir.join(PROBE_PLOT), sparkline(result))?;
    Ok([PROBE_FILE, PROBE_CSV, PROBE_PLOT].map(String::from).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::TinyConfig;
    use crate::toyenv::{TargetRange, EOS};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect())
    }

    fn model(layers: usize) -> TinySequenceModel<f64> {
        let cfg = TinyConfig { n_layers: layers, ..TinyConfig::default() };
        TinySequenceModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn traj(output: Vec<u32>) -> Trajectory {
        let task = LengthTask::new("t", 5).unwrap();
        Trajectory::score(&task, output, &ToyVocabulary::new(32).unwrap(), false, Default::default()).unwrap()
    }

    #[test]
    fn hand_worked_ridge() {
        let x = Matrix::from_rows(&[vec![1.0], vec![2.0]]);
        let m = ridge_fit_uncentered(&x, &[1.0, 2.0], 1.0).unwrap();
        assert_relative_eq!(m.weights[0], 5.0 / 6.0, epsilon = 1e-12);
        assert_eq!(m.intercept, 0.0);
    }

    #[test]
    fn ridge_limits() {
        let x = noise(40, 3, 1);
        let w = [1.5, -2.0, 0.25];
        let y: Vec<f64> = (0..40).map(|i| 3.0 + x.row(i).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()).collect();
        let m = ridge_fit(&x, &y, 1e-10).unwrap();
        for (a, b) in m.weights.iter().zip(&w) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((m.intercept - 3.0).abs() < 1e-6);
        let big = ridge_fit(&x, &y, 1e12).unwrap();
        assert!(big.weights.iter().all(|v| v.abs() < 1e-8));
        assert!(ridge_fit(&x, &y[..10], 1.0).is_err());
        assert!(ridge_fit(&x, &y, 0.0).is_err());
    }

    #[test]
    fn pearson_examples() {
        assert_relative_eq!(pearson_r(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(pearson_r(&[-1.0, -2.0, -3.0], &[1.0, 2.0, 3.0]).unwrap(), -1.0, epsilon = 1e-12);
        // Brute force: centered pred (-4/3, -1/3, 5/3), actual (-1, 0, 1).
        let oracle = 3.0 / ((42.0f64 / 9.0).sqrt() * 2.0f64.sqrt());
        assert!((pearson_r(&[1.0, 2.0, 4.0], &[1.0, 2.0, 3.0]).unwrap() - oracle).abs() < 1e-12);
        assert!((oracle - 0.9820).abs() < 1e-4);
        assert!(matches!(pearson_r(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]), Err(Error::Undefined(_))));
        assert!(pearson_r(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn planted_and_null_sweeps() {
        let n = 100;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut rng, 5..=40) as f64).collect();
        let planted: Vec<Matrix<f64>> = (0..3)
            .map(|l| {
                let mut m = noise(n, 8, 100 + l);
                for i in 0..n {
                    m.row_mut(i)[l as usize] = y[i];
                }
                m
            })
            .collect();
        let ds = [ProbeDataset { position: ProbePosition::LastToken, layers: planted, y: y.clone() }];
        let res = probe_datasets(&ds, &ProbeConfig::default()).unwrap();
        assert_eq!(res.entries.len(), 3);
        assert!(res.entries.iter().all(|e| e.mean_r.unwrap() > 0.99 && e.per_fold_r.len() == 5));

        let null: Vec<Matrix<f64>> = (0..3).map(|l| noise(n, 8, 200 + l)).collect();
        let ds = [ProbeDataset { position: ProbePosition::FirstToken, layers: null, y }];
        let res = probe_datasets(&ds, &ProbeConfig::default()).unwrap();
        assert!(res.entries.iter().all(|e| e.mean_r.unwrap().abs() < 0.3), "{:?}", res.entries);
    }

    #[test]
    fn capture_structure() {
        let m = model(2);
        let c = capture_states(&m, &traj(vec![20, 21, EOS])).unwrap();
        assert_eq!(c.first_token.len(), 3);
        assert_eq!(c.last_token.len(), 3);
        for v in c.first_token.iter().chain(&c.last_token) {
            assert_eq!(v.len(), 32);
            assert!(v.iter().all(|x| x.is_finite()));
            assert!(v.iter().map(|x| x * x).sum::<f64>() > 0.0);
        }
        let one = capture_states(&m, &traj(vec![EOS])).unwrap();
        assert_eq!(one.first_token, one.last_token);
        assert!(capture_states(&m, &traj(vec![])).is_err());
    }

    #[test]
    fn sweep_on_a_policy_is_structured_and_reproducible() {
        let m = model(2);
        let vocab = ToyVocabulary::new(32).unwrap();
        let tasks = crate::toyenv::task_stream(4, TargetRange::new(5, 40).unwrap(), 60).unwrap();
        let sampling = SamplingConfig { max_len: 48, temperature: 1.0, top_p: 1.0, ..SamplingConfig::default() };
        let a = probe_sweep(&m, &tasks, &vocab, &sampling, &ProbeConfig::default()).unwrap();
        assert_eq!(a.entries.len(), 2 * 3);
        // The last prompt token is the same for every task, so embedding states there are constant.
        let e0 = a.entries.iter().find(|e| e.position == ProbePosition::FirstToken && e.layer == 0).unwrap();
        assert_eq!(e0.mean_r, None);
        assert!(e0.undefined_reason.as_deref().unwrap().contains("zero-variance"));
        for e in a.entries.iter().filter(|e| e.position == ProbePosition::LastToken) {
            assert!((-1.0..=1.0).contains(&e.mean_r.unwrap()));
        }
        let b = probe_sweep(&m, &tasks, &vocab, &sampling, &ProbeConfig::default()).unwrap();
        assert_eq!(a, b);
        assert!(probe_sweep(&m, &tasks[..4], &vocab, &sampling, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn output_files() {
        let dir = tempfile::tempdir().unwrap();
        let res = ProbeResult {
            folds: 2,
            alpha: 1.0,
            seed: 0,
            examples: 4,
            preprocessing: "center".into(),
            entries: vec![
                ProbeEntry { position: ProbePosition::FirstToken, layer: 0, mean_r: Some(0.0), per_fold_r: vec![Some(0.0); 2], undefined_reason: None },
                ProbeEntry { position: ProbePosition::FirstToken, layer: 1, mean_r: Some(1.0), per_fold_r: vec![Some(1.0); 2], undefined_reason: None },
                ProbeEntry { position: ProbePosition::FirstToken, layer: 2, mean_r: None, per_fold_r: vec![None, Some(0.5)], undefined_reason: Some("fold 0".into()) },
            ],
        };
        write_probe(dir.path(), &res).unwrap();
        let csv = fs::read_to_string(dir.path().join(PROBE_CSV)).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "position,layer,mean_r,fold_0,fold_1");
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(csv.lines().nth(3).unwrap(), "first_token,2,,,0.5");
        assert!(sparkline(&res).starts_with("first_token  ▁█·"));
        let back: ProbeResult = serde_json::from_str(&fs::read_to_string(dir.path().join(PROBE_FILE)).unwrap()).unwrap();
        assert_eq!(back, res);
    }

    #[test]
    fn folds_are_seeded_and_balanced() {
        let a = fold_assignment(23, 5, 1);
        assert_eq!(a, fold_assignment(23, 5, 1));
        assert_ne!(a, fold_assignment(23, 5, 2));
        for k in 0..5 {
            let c = a.iter().filter(|&&f| f == k).count();
            assert!(c == 4 || c == 5);
        }
    }

    proptest! {
        #[test]
        fn ridge_permutation_and_shift(seed in any::<u64>(), shift in -50.0f64..50.0) {
            let x = noise(12, 3, seed);
            let y: Vec<f64> = noise(12, 1, seed ^ 1).as_slice().to_vec();
            let m = ridge_fit(&x, &y, 1.0).unwrap();
            let mut perm: Vec<usize> = (0..12).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
            let mp = ridge_fit(&select_rows(&x, &perm), &yp, 1.0).unwrap();
            for (a, b) in m.weights.iter().zip(&mp.weights) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            prop_assert!((m.intercept - mp.intercept).abs() < 1e-9);
            let ys: Vec<f64> = y.iter().map(|v| v + shift).collect();
            let ms = ridge_fit(&x, &ys, 1.0).unwrap();
            for (a, b) in m.weights.iter().zip(&ms.weights) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            prop_assert!((ms.intercept - m.intercept - shift).abs() < 1e-9);
        }

        #[test]
        fn pearson_affine_invariance(seed in any::<u64>(), a in 0.01f64..100.0, b in -100.0f64..100.0, c in 0.01f64..100.0, d in -100.0f64..100.0) {
            let p = noise(10, 1, seed).as_slice().to_vec();
            let q = noise(10, 1, seed ^ 7).as_slice().to_vec();
            let r = pearson_r(&p, &q).unwrap();
            let pa: Vec<f64> = p.iter().map(|v| a * v + b).collect();
            let qa: Vec<f64> = q.iter().map(|v| c * v + d).collect();
            prop_assert!((pearson_r(&pa, &qa).unwrap() - r).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }
}
