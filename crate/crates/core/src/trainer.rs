//! The unified training loop: rollout, reward, advantages, hindsight batch, scheduled
//! joint loss, one update, snapshot.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifacts::{config_hash, write_json_pretty, RunLock, RunManifest, RunStatus};
use crate::error::{invalid, Error, Result};
use crate::grpo::{policy_rl_gradient, ClipConfig};
use crate::hindsight::{awareness_context_len, awareness_loss, relabel, AwarenessExample, AwarenessTemplate, ReplayBuffer};
use crate::policy::{
    sample_group, sample_trajectory, sequence_log_probs, GroupRepair, PolicyCheckpoint, PolicyModel, RolloutGroup,
    SamplingConfig, TinyConfig, TinySequenceModel, Trajectory,
};
use crate::scalar::Scalar;
use crate::textmetrics::{length_deviation, length_reward, LengthPair};
use crate::toyenv::{task_stream, LengthTask, TargetRange, ToyVocabulary, FIRST_CONTENT, PROMPT_LEN};

pub const TRAIN_CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub lambda_max: f64,
    pub total_steps: usize,
    pub warmup_frac: f64,
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return invalid("lambda_max must be a nonnegative number");
        }
        if self.total_steps == 0 {
            return invalid("total_steps must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return invalid("warmup_frac must lie in [0, 1)");
        }
        Ok(())
    }
}

/// `λmax/2 · (1 + cos(tπ/T))`. With warmup fraction `w > 0` the value is additionally scaled
/// by `t / (wT)` while `t < wT`.
pub fn lambda_at(t: usize, spec: &ScheduleSpec) -> Result<f64> {
    spec.validate()?;
    if t > spec.total_steps {
        return invalid(format!("step {t} outside [0, {}]", spec.total_steps));
    }
    let big_t = spec.total_steps as f64;
    let tf = t as f64;
    if t == spec.total_steps {
        return Ok(0.0);
    }
    let cosine = spec.lambda_max / 2.0 * (1.0 + (tf * std::f64::consts::PI / big_t).cos());
    let warmup = spec.warmup_frac * big_t;
    if warmup > 0.0 && tf < warmup {
        return Ok(cosine * tf / warmup);
    }
    Ok(cosine)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables it.
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-6, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, max_grad_norm: Some(1.0) }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return invalid("learning_rate must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return invalid("adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0 && self.weight_decay >= 0.0) {
            return invalid("eps must be positive and weight_decay nonnegative");
        }
        if self.max_grad_norm.is_some_and(|m| !(m > 0.0)) {
            return invalid("max_grad_norm must be positive");
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamW {
    pub fn new(n: usize) -> Self {
        Self { t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// Applies one update and returns the gradient norm before clipping.
    pub fn step<F: Scalar>(&mut self, params: &mut [F], grad: &[F], cfg: &OptimizerConfig) -> Result<f64> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Shape(format!("optimizer holds {} slots, got {} params", self.m.len(), params.len())));
        }
        let norm = grad.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let scale = match cfg.max_grad_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i].as_f64() * scale;
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let p = params[i].as_f64();
            params[i] = F::lit(p - cfg.learning_rate * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * p));
        }
        Ok(norm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: TinyConfig,
    pub group_size: usize,
    /// Prompts per rollout batch (B).
    pub batch_size: usize,
    /// Prompts per optimizer update; one pass over the rollout batch.
    pub mini_batch_size: usize,
    pub dataset_size: usize,
    pub epochs: usize,
    pub c_range: TargetRange,
    pub sampling: SamplingConfig,
    pub repair: GroupRepair,
    pub clip: ClipConfig,
    pub optimizer: OptimizerConfig,
    pub lambda_max: f64,
    pub warmup_frac: f64,
    /// `None` builds each awareness batch from the current step only.
    pub replay_capacity: Option<usize>,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Laptop-scale preset.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            model: TinyConfig::default(),
            group_size: 4,
            batch_size: 16,
            mini_batch_size: 16,
            dataset_size: 16_000,
            epochs: 1,
            c_range: TargetRange { min: 5, max: 40 },
            sampling: SamplingConfig::default(),
            repair: GroupRepair::default(),
            // A 16-symbol alphabet sharpens into repeated n-grams quickly; the larger bonus
            // keeps rollouts clear of the degeneracy filter.
            clip: ClipConfig { entropy_coef: 0.03, ..ClipConfig::default() },
            optimizer: OptimizerConfig { learning_rate: 1e-2, weight_decay: 0.0, ..OptimizerConfig::default() },
            lambda_max: 0.01,
            warmup_frac: 0.0,
            replay_capacity: None,
            checkpoint_every: 100,
        }
    }

    /// Full-scale hyperparameters on the toy task family. Not runnable at desk scale.
    pub fn full() -> Self {
        Self {
            seed: 0,
            model: TinyConfig { max_context: PROMPT_LEN + 8000 + 8, ..TinyConfig::default() },
            group_size: 4,
            batch_size: 128,
            mini_batch_size: 32,
            dataset_size: 8732,
            epochs: 3,
            c_range: TargetRange { min: 1, max: 3999 },
            sampling: SamplingConfig { max_len: 8000, temperature: 0.7, top_p: 0.8, ..SamplingConfig::default() },
            repair: GroupRepair::default(),
            clip: ClipConfig::default(),
            optimizer: OptimizerConfig::default(),
            lambda_max: 0.01,
            warmup_frac: 0.1,
            replay_capacity: None,
            checkpoint_every: 50,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => invalid(format!("unknown preset {other:?} (expected desk or full)")),
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.dataset_size / self.batch_size.max(1)
    }

    /// `T = epochs × (dataset_size / B)`.
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch()
    }

    pub fn schedule(&self) -> ScheduleSpec {
        ScheduleSpec { lambda_max: self.lambda_max, total_steps: self.total_steps(), warmup_frac: self.warmup_frac }
    }

    pub fn awareness_enabled(&self) -> bool {
        self.lambda_max > 0.0
    }

    pub fn mode(&self) -> &'static str {
        if self.awareness_enabled() {
            "larft"
        } else {
            "grpo_only"
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: Error| Error::InvalidInput(format!("{name}: {e}"));
        self.model.validate().map_err(|e| field("model", e))?;
        self.sampling.validate().map_err(|e| field("sampling", e))?;
        self.clip.validate().map_err(|e| field("clip", e))?;
        self.optimizer.validate().map_err(|e| field("optimizer", e))?;
        TargetRange::new(self.c_range.min, self.c_range.max).map_err(|e| field("c_range", e))?;
        if self.group_size < 2 {
            return invalid("group_size: must be at least 2");
        }
        if self.batch_size == 0 || self.mini_batch_size == 0 || self.mini_batch_size > self.batch_size {
            return invalid("mini_batch_size: must lie in [1, batch_size] with batch_size >= 1");
        }
        if self.dataset_size < self.batch_size {
            return invalid("dataset_size: must be at least batch_size");
        }
        if self.epochs == 0 {
            return invalid("epochs: must be positive");
        }
        if self.model.vocab_size <= FIRST_CONTENT as usize {
            return invalid(format!("model.vocab_size: must exceed {FIRST_CONTENT}"));
        }
        if PROMPT_LEN + self.sampling.max_len - 1 > self.model.max_context {
            return invalid("sampling.max_len: prompt plus response exceeds model.max_context");
        }
        if self.awareness_enabled() && awareness_context_len(self.sampling.max_len) > self.model.max_context {
            return invalid("sampling.max_len: awareness sequences exceed model.max_context");
        }
        if self.replay_capacity == Some(0) {
            return invalid("replay_capacity: must be positive when set");
        }
        if self.checkpoint_every == 0 {
            return invalid("checkpoint_every: must be positive");
        }
        self.schedule().validate().map_err(|e| field("schedule", e))
    }

    pub fn config_hash(&self) -> Result<String> {
        config_hash(self)
    }
}

/// Seeds for independent streams within a run.
fn stream_rng(seed: u64, stream: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut s = [0u8; 32];
    for (i, x) in [seed, stream, a, b].into_iter().enumerate() {
        s[i * 8..(i + 1) * 8].copy_from_slice(&x.to_le_bytes());
    }
    ChaCha8Rng::from_seed(s)
}

const STREAM_INIT: u64 = 1;
const STREAM_DATA: u64 = 2;
const STREAM_EPOCH: u64 = 3;
const STREAM_ROLLOUT: u64 = 4;
const STREAM_REPLAY: u64 = 5;
const STREAM_HELD_OUT: u64 = 6;

pub fn initial_policy(cfg: &TrainConfig) -> Result<TinySequenceModel<f64>> {
    TinySequenceModel::new(cfg.model, &mut stream_rng(cfg.seed, STREAM_INIT, 0, 0))
}

pub fn training_tasks(cfg: &TrainConfig) -> Result<Vec<LengthTask>> {
    let seed = stream_rng(cfg.seed, STREAM_DATA, 0, 0).next_u64();
    task_stream(seed, cfg.c_range, cfg.dataset_size)
}

/// Tasks drawn from a stream disjoint from the training tasks.
pub fn held_out_tasks(cfg: &TrainConfig, n: usize) -> Result<Vec<LengthTask>> {
    let seed = stream_rng(cfg.seed, STREAM_HELD_OUT, 0, 0).next_u64();
    task_stream(seed, cfg.c_range, n)
}

/// The prompts for 1-based step `t`: epochs are reshuffled permutations of the dataset.
pub fn batch_for_step<'a>(cfg: &TrainConfig, dataset: &'a [LengthTask], t: usize) -> Result<Vec<&'a LengthTask>> {
    let spe = cfg.steps_per_epoch();
    if t == 0 || t > cfg.total_steps() || dataset.len() != cfg.dataset_size {
        return invalid(format!("no batch for step {t}"));
    }
    let epoch = (t - 1) / spe;
    let k = (t - 1) % spe;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut stream_rng(cfg.seed, STREAM_EPOCH, epoch as u64, 0));
    Ok(order[k * cfg.batch_size..(k + 1) * cfg.batch_size].iter().map(|&i| &dataset[i]).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<F, P> {
    /// Completed steps.
    pub step: usize,
    pub policy: P,
    /// Parameters as of the end of the previous step; rollouts and ratio denominators use it.
    pub old_policy: P,
    /// Frozen initial parameters for the KL term.
    pub reference: P,
    pub optimizer: AdamW,
    pub replay: Option<ReplayBuffer>,
    _scalar: std::marker::PhantomData<F>,
}

impl<F: Scalar, P: PolicyModel<F>> TrainState<F, P> {
    pub fn new(policy: P, cfg: &TrainConfig) -> Result<Self> {
        let replay = cfg.replay_capacity.map(ReplayBuffer::new).transpose()?;
        Ok(Self {
            step: 0,
            optimizer: AdamW::new(policy.num_params()),
            old_policy: policy.clone(),
            reference: policy.clone(),
            policy,
            replay,
            _scalar: std::marker::PhantomData,
        })
    }

    fn resumed(step: usize, policy: P, reference: P, optimizer: AdamW, replay: Option<ReplayBuffer>) -> Self {
        Self { step, old_policy: policy.clone(), policy, reference, optimizer, replay, _scalar: std::marker::PhantomData }
    }
}

/// Wall-clock breakdown of one step, kept out of the metric stream so that stream stays
/// reproducible.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub step: usize,
    pub rollout_s: f64,
    pub rl_s: f64,
    pub awareness_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lambda: f64,
    pub mean_reward: f64,
    pub mean_abs_deviation: f64,
    pub surrogate_loss: f64,
    pub kl: f64,
    pub mean_entropy: f64,
    pub rl_loss: f64,
    pub awareness_loss: Option<f64>,
    pub awareness_batch: Option<usize>,
    pub unified_loss: f64,
    pub degenerate_count: usize,
    pub truncated_count: usize,
    pub trajectories: usize,
    pub groups: usize,
    pub dropped_tasks: usize,
    pub updates: usize,
    pub grad_norm: f64,
    /// Largest `|r - 1|` on the rollout data before the first update.
    pub max_ratio_deviation: f64,
    /// `(L, c)` for every kept trajectory, in rollout order.
    pub pairs: Vec<[u32; 2]>,
    #[serde(skip)]
    pub timing: StepTiming,
}

impl StepMetrics {
    pub fn is_finite(&self) -> bool {
        [self.lambda, self.mean_reward, self.mean_abs_deviation, self.surrogate_loss, self.kl, self.mean_entropy]
            .iter()
            .chain([self.rl_loss, self.unified_loss, self.grad_norm, self.max_ratio_deviation].iter())
            .chain(self.awareness_loss.iter())
            .all(|x| x.is_finite())
    }

    /// Mean reward recomputed from the logged `(L, c)` pairs.
    pub fn replayed_mean_reward(&self) -> Result<f64> {
        if self.pairs.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for &[l, c] in &self.pairs {
            total += length_reward(LengthPair::new(l, c)?)?;
        }
        Ok(total / self.pairs.len() as f64)
    }
}

fn dump_group<F: Scalar>(g: &RolloutGroup<F>) -> String {
    let outs: Vec<_> = g.trajectories.iter().map(|t| (&t.output_tokens, t.reward)).collect();
    format!("task {} (c={}): outputs and rewards {:?}", g.task.id, g.task.target_words, outs)
}

fn add_scaled<F: Scalar>(acc: &mut [F], g: &[F], w: F) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += w * b;
    }
}

/// One iteration of the unified procedure. Rollouts use a generator derived from
/// `(seed, step, task index)`, so the step is a pure function of the state and inputs.
pub fn train_step<F: Scalar, P: PolicyModel<F>>(
    state: &mut TrainState<F, P>,
    tasks: &[&LengthTask],
    cfg: &TrainConfig,
    vocab: &ToyVocabulary,
    template: &AwarenessTemplate,
) -> Result<StepMetrics> {
    if tasks.is_empty() {
        return invalid("train_step needs at least one task");
    }
    let t = state.step + 1;
    let lambda = lambda_at(t, &cfg.schedule())?;
    let started = Instant::now();
    let eps_std = F::lit(cfg.clip.eps_std);
    let temperature = F::lit(cfg.sampling.temperature);

    // Phase 1: rollouts from θ_old, rewards and group advantages.
    let mut groups = Vec::with_capacity(tasks.len());
    let mut degenerate_count = 0;
    let mut dropped_tasks = 0;
    for (j, task) in tasks.iter().enumerate() {
        let mut rng = stream_rng(cfg.seed, STREAM_ROLLOUT, t as u64, j as u64);
        let gs = sample_group(&state.old_policy, task, vocab, cfg.group_size, &mut rng, &cfg.sampling, cfg.repair, eps_std)?;
        degenerate_count += gs.degenerate_seen;
        match gs.group {
            Some(g) => groups.push(g),
            None => dropped_tasks += 1,
        }
    }
    let rollout_s = started.elapsed().as_secs_f64();

    let trajs: Vec<&Trajectory> = groups.iter().flat_map(|g| g.trajectories.iter()).collect();
    let n_traj = trajs.len();
    let pairs: Vec<[u32; 2]> = trajs.iter().map(|t| [t.word_count, t.target_words]).collect();
    let (mean_reward, mean_abs_deviation) = if n_traj == 0 {
        (0.0, 0.0)
    } else {
        let mut dev = 0.0;
        for tr in &trajs {
            dev += length_deviation(tr.length_pair())?;
        }
        (trajs.iter().map(|t| t.reward).sum::<f64>() / n_traj as f64, dev / n_traj as f64)
    };
    let truncated_count = trajs.iter().filter(|t| t.truncated).count();

    let mut metrics = StepMetrics {
        step: t,
        lambda,
        mean_reward,
        mean_abs_deviation,
        surrogate_loss: 0.0,
        kl: 0.0,
        mean_entropy: 0.0,
        rl_loss: 0.0,
        awareness_loss: cfg.awareness_enabled().then_some(0.0),
        awareness_batch: cfg.awareness_enabled().then_some(0),
        unified_loss: 0.0,
        degenerate_count,
        truncated_count,
        trajectories: n_traj,
        groups: groups.len(),
        dropped_tasks,
        updates: 0,
        grad_norm: 0.0,
        max_ratio_deviation: 0.0,
        pairs,
        timing: StepTiming::default(),
    };

    let mut rl_s = 0.0;
    let mut awareness_s = 0.0;
    if !groups.is_empty() {
        // Old-policy and reference log-probs are fixed for the whole step.
        let rl_started = Instant::now();
        let mut old_lp = Vec::with_capacity(n_traj);
        let mut ref_lp = Vec::with_capacity(n_traj);
        for tr in &trajs {
            old_lp.push(sequence_log_probs(&state.old_policy, &tr.prompt_tokens, &tr.output_tokens, temperature)?);
            if cfg.clip.beta_kl > 0.0 {
                ref_lp.push(sequence_log_probs(&state.reference, &tr.prompt_tokens, &tr.output_tokens, temperature)?);
            }
        }
        rl_s += rl_started.elapsed().as_secs_f64();

        // Phase 2: one awareness example per kept trajectory.
        let mut aware_all: Vec<AwarenessExample> = Vec::new();
        if cfg.awareness_enabled() {
            let aw_started = Instant::now();
            for tr in &trajs {
                aware_all.push(relabel(tr, template, vocab)?);
            }
            awareness_s += aw_started.elapsed().as_secs_f64();
        }

        // Phase 3: one pass over the rollout batch in mini-batches of prompts.
        let mut offset = 0;
        let n_chunks = groups.len().div_ceil(cfg.mini_batch_size);
        let mut sums = [0.0f64; 7];
        let mut aw_batch_total = 0;
        for (ci, chunk) in groups.chunks(cfg.mini_batch_size).enumerate() {
            let n_chunk: usize = chunk.iter().map(|g| g.len()).sum();
            let range = offset..offset + n_chunk;
            offset += n_chunk;

            let rl_started = Instant::now();
            let ref_chunk = (cfg.clip.beta_kl > 0.0).then(|| &ref_lp[range.clone()]);
            let pg = policy_rl_gradient(&state.policy, chunk, &old_lp[range.clone()], ref_chunk, temperature, &cfg.clip)?;
            if ci == 0 {
                let mut dev = 0.0f64;
                for (nw, od) in pg.new_lp.iter().zip(&old_lp[range.clone()]) {
                    for (&a, &b) in nw.iter().zip(od) {
                        dev = dev.max(((a - b).exp() - F::one()).abs().as_f64());
                    }
                }
                metrics.max_ratio_deviation = dev;
            }
            let obj = &pg.objective;
            if !obj.total.is_finite() {
                let dump: Vec<String> = chunk.iter().map(dump_group).collect();
                return Err(Error::NonFinite(format!("step {t}: rl loss is not finite; groups: {}", dump.join("; "))));
            }
            let mut grad = pg.grad;
            let mut unified = obj.total.as_f64();
            rl_s += rl_started.elapsed().as_secs_f64();

            if cfg.awareness_enabled() {
                let aw_started = Instant::now();
                let mut batch = aware_all[range.clone()].to_vec();
                if let Some(buf) = state.replay.as_mut() {
                    buf.extend(batch.iter().cloned());
                    let mut rng = stream_rng(cfg.seed, STREAM_REPLAY, t as u64, ci as u64);
                    batch = buf.sample(n_chunk, &mut rng);
                }
                let aw = awareness_loss(&state.policy, &batch)?;
                if !aw.value.is_finite() {
                    let dump: Vec<String> = chunk.iter().map(dump_group).collect();
                    return Err(Error::NonFinite(format!("step {t}: awareness loss is not finite; groups: {}", dump.join("; "))));
                }
                add_scaled(&mut grad, &aw.grad, F::lit(lambda));
                unified += lambda * aw.value.as_f64();
                sums[5] += aw.value.as_f64();
                aw_batch_total += batch.len();
                awareness_s += aw_started.elapsed().as_secs_f64();
            }

            let rl_started = Instant::now();
            let norm = state.optimizer.step(state.policy.params_mut(), &grad, &cfg.optimizer)?;
            rl_s += rl_started.elapsed().as_secs_f64();
            sums[0] += obj.surrogate.as_f64();
            sums[1] += obj.kl.as_f64();
            sums[2] += obj.entropy.as_f64();
            sums[3] += obj.total.as_f64();
            sums[4] += unified;
            sums[6] += norm;
            metrics.updates += 1;
        }
        let k = n_chunks as f64;
        metrics.surrogate_loss = sums[0] / k;
        metrics.kl = sums[1] / k;
        metrics.mean_entropy = sums[2] / k;
        metrics.rl_loss = sums[3] / k;
        metrics.unified_loss = sums[4] / k;
        metrics.grad_norm = sums[6] / k;
        if cfg.awareness_enabled() {
            metrics.awareness_loss = Some(sums[5] / k);
            metrics.awareness_batch = Some(aw_batch_total);
        }
    }

    // θ_old ← θ
    state.old_policy.params_mut().copy_from_slice(state.policy.params());
    state.step = t;
    metrics.timing = StepTiming { step: t, rollout_s, rl_s, awareness_s, total_s: started.elapsed().as_secs_f64() };
    if !metrics.is_finite() {
        return Err(Error::NonFinite(format!("step {t}: metrics contain non-finite values")));
    }
    Ok(metrics)
}

/// One sampled response per task, each from its own generator.
pub fn sample_outputs<F: Scalar, P: PolicyModel<F>>(
    policy: &P,
    tasks: &[LengthTask],
    vocab: &ToyVocabulary,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    tasks
        .iter()
        .enumerate()
        .map(|(j, task)| sample_trajectory(policy, task, vocab, &mut stream_rng(seed, STREAM_HELD_OUT, 1, j as u64), sampling))
        .collect()
}

pub fn mean_reward(trajs: &[Trajectory]) -> f64 {
    if trajs.is_empty() {
        return 0.0;
    }
    trajs.iter().map(|t| t.reward).sum::<f64>() / trajs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCheckpoint {
    pub format_version: u32,
    pub step: usize,
    pub config_hash: String,
    pub policy: PolicyCheckpoint,
    pub optimizer: AdamW,
    pub replay: Option<Vec<AwarenessExample>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Continue from the latest checkpoint in an existing run directory.
    pub resume: bool,
    /// Stop after this many completed steps (the run stays resumable).
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub steps_completed: usize,
    pub total_steps: usize,
    pub final_checkpoint: PathBuf,
    pub manifest: RunManifest,
}

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const REFERENCE_FILE: &str = "reference.json";
pub const POLICY_FILE: &str = "policy.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_rel(step: usize) -> String {
    format!("{CHECKPOINT_DIR}/step_{step}.json")
}

fn latest_checkpoint(dir: &Path) -> Result<Option<usize>> {
    let ck = dir.join(CHECKPOINT_DIR);
    if !ck.exists() {
        return Ok(None);
    }
    let mut best = None;
    for entry in fs::read_dir(ck)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(n) = name.strip_prefix("step_").and_then(|s| s.strip_suffix(".json")).and_then(|s| s.parse::<usize>().ok()) {
            best = best.max(Some(n));
        }
    }
    Ok(best)
}

/// Keeps the first `n` lines of a JSONL file.
fn truncate_lines(path: &Path, n: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let lines: Vec<String> = BufReader::new(File::open(path)?).lines().take(n).collect::<std::io::Result<_>>()?;
    let mut out = String::new();
    for l in lines {
        out.push_str(&l);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn append_line<T: Serialize>(w: &mut BufWriter<File>, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn save_train_checkpoint(dir: &Path, state: &TrainState<f64, TinySequenceModel<f64>>, hash: &str) -> Result<String> {
    let rel = checkpoint_rel(state.step);
    let ck = TrainCheckpoint {
        format_version: TRAIN_CHECKPOINT_FORMAT_VERSION,
        step: state.step,
        config_hash: hash.to_string(),
        policy: PolicyCheckpoint::of(&state.policy),
        optimizer: state.optimizer.clone(),
        replay: state.replay.as_ref().map(|b| b.iter().cloned().collect()),
    };
    write_json_pretty(&dir.join(&rel), &ck)?;
    Ok(rel)
}

fn load_train_checkpoint(path: &Path) -> Result<TrainCheckpoint> {
    let ck: TrainCheckpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
    if ck.format_version != TRAIN_CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Format(format!("training checkpoint format {} is not supported", ck.format_version)));
    }
    Ok(ck)
}

/// Loads a tiny policy from a run directory (its final policy), a policy checkpoint or a
/// training checkpoint.
pub fn load_tiny_policy(path: &Path) -> Result<TinySequenceModel<f64>> {
    let file = if path.is_dir() { path.join(POLICY_FILE) } else { path.to_path_buf() };
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&file)?)?;
    let ck: PolicyCheckpoint = match v.get("policy") {
        Some(inner) if v.get("optimizer").is_some() => serde_json::from_value(inner.clone())?,
        _ => serde_json::from_value(v)?,
    };
    ck.into_tiny()
}

/// Runs (or resumes) training into `dir`.
pub fn run_training(cfg: &TrainConfig, dir: &Path, opts: RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let _lock = RunLock::acquire(dir)?;
    let hash = cfg.config_hash()?;
    let total = cfg.total_steps();
    let vocab = ToyVocabulary::new(cfg.model.vocab_size)?;
    let template = AwarenessTemplate::default();
    let metrics_path = dir.join(METRICS_FILE);
    let timing_path = dir.join(TIMING_FILE);
    let manifest_path = dir.join(MANIFEST_FILE);

    let resume_from = if opts.resume { latest_checkpoint(dir)? } else { None };
    if resume_from.is_none() && metrics_path.exists() && fs::metadata(&metrics_path)?.len() > 0 {
        return Err(Error::InvalidInput(format!("{} already holds a run; resume it or choose another directory", dir.display())));
    }

    let mut manifest = match (resume_from, manifest_path.exists()) {
        (Some(_), true) => {
            let m = RunManifest::read(&manifest_path)?;
            if m.config_hash != hash {
                return Err(Error::InvalidInput(format!(
                    "config hash {hash} differs from the run's {}; resume needs the same config",
                    m.config_hash
                )));
            }
            m
        }
        _ => RunManifest::start("train", hash.clone(), cfg.seed),
    };
    manifest.status = RunStatus::Running;
    manifest.finished_at = None;
    manifest.details.insert("mode".into(), cfg.mode().into());
    manifest.details.insert("lambda_max".into(), cfg.lambda_max.into());
    manifest.details.insert("total_steps".into(), total.into());
    manifest.details.insert("epochs".into(), cfg.epochs.into());
    manifest.details.insert("dataset_size".into(), cfg.dataset_size.into());

    let mut state = match resume_from {
        Some(step) => {
            let ck = load_train_checkpoint(&dir.join(checkpoint_rel(step)))?;
            if ck.config_hash != hash {
                return Err(Error::InvalidInput("checkpoint was written under a different config".into()));
            }
            let policy = ck.policy.into_tiny::<f64>()?;
            let reference = PolicyCheckpoint::into_tiny(serde_json::from_str(&fs::read_to_string(dir.join(REFERENCE_FILE))?)?)?;
            let replay = match (cfg.replay_capacity, ck.replay) {
                (Some(cap), Some(items)) => {
                    let mut b = ReplayBuffer::new(cap)?;
                    b.extend(items);
                    Some(b)
                }
                (Some(cap), None) => Some(ReplayBuffer::new(cap)?),
                (None, _) => None,
            };
            truncate_lines(&metrics_path, step)?;
            truncate_lines(&timing_path, step)?;
            TrainState::resumed(step, policy, reference, ck.optimizer, replay)
        }
        None => {
            let state = TrainState::new(initial_policy(cfg)?, cfg)?;
            write_json_pretty(&dir.join(CONFIG_FILE), cfg)?;
            fs::write(dir.join(VOCAB_FILE), vocab.to_json()?)?;
            write_json_pretty(&dir.join(REFERENCE_FILE), &PolicyCheckpoint::of(&state.reference))?;
            File::create(&metrics_path)?;
            File::create(&timing_path)?;
            state
        }
    };
    fs::create_dir_all(dir.join(CHECKPOINT_DIR))?;
    for rel in [CONFIG_FILE, VOCAB_FILE, REFERENCE_FILE, METRICS_FILE, TIMING_FILE] {
        manifest.add_artifact(rel);
    }
    manifest.write(&manifest_path)?;

    let dataset = training_tasks(cfg)?;
    let mut metrics_out = BufWriter::new(OpenOptions::new().append(true).open(&metrics_path)?);
    let mut timing_out = BufWriter::new(OpenOptions::new().append(true).open(&timing_path)?);
    let stop = opts.stop_after.unwrap_or(total).min(total);

    let result = (|| -> Result<()> {
        while state.step < stop {
            let batch = batch_for_step(cfg, &dataset, state.step + 1)?;
            let m = train_step(&mut state, &batch, cfg, &vocab, &template)?;
            append_line(&mut metrics_out, &m)?;
            append_line(&mut timing_out, &m.timing)?;
            if state.step % cfg.checkpoint_every == 0 || state.step == stop {
                let rel = save_train_checkpoint(dir, &state, &hash)?;
                manifest.add_artifact(rel);
            }
        }
        Ok(())
    })();
    if let Err(e) = result {
        manifest.finish(RunStatus::Failed);
        manifest.write(&manifest_path)?;
        return Err(e);
    }

    if latest_checkpoint(dir)? != Some(state.step) {
        manifest.add_artifact(save_train_checkpoint(dir, &state, &hash)?);
    }
    write_json_pretty(&dir.join(POLICY_FILE), &PolicyCheckpoint::of(&state.policy))?;
    manifest.add_artifact(POLICY_FILE);
    manifest.details.insert("steps_completed".into(), state.step.into());
    manifest.finish(if state.step == total { RunStatus::Completed } else { RunStatus::Running });
    manifest.write(&manifest_path)?;
    manifest.add_artifact(MANIFEST_FILE);
    manifest.write(&manifest_path)?;

    Ok(RunSummary {
        dir: dir.to_path_buf(),
        steps_completed: state.step,
        total_steps: total,
        final_checkpoint: dir.join(checkpoint_rel(state.step)),
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grpo::rl_objective;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            model: TinyConfig { vocab_size: 24, d_model: 8, n_heads: 2, n_layers: 1, d_ff: 16, max_context: 40, init_std: 0.1, response_alphabet: true },
            batch_size: 4,
            mini_batch_size: 4,
            dataset_size: 12,
            epochs: 1,
            c_range: TargetRange { min: 3, max: 8 },
            sampling: SamplingConfig { max_len: 16, ..SamplingConfig::default() },
            optimizer: OptimizerConfig { learning_rate: 1e-2, ..OptimizerConfig::default() },
            checkpoint_every: 2,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn schedule_examples() {
        let s = ScheduleSpec { lambda_max: 0.01, total_steps: 500, warmup_frac: 0.0 };
        assert_eq!(lambda_at(0, &s).unwrap(), 0.01);
        assert_eq!(lambda_at(500, &s).unwrap(), 0.0);
        assert!((lambda_at(250, &s).unwrap() - 0.005).abs() < 1e-12);
        assert!(lambda_at(501, &s).is_err());
        let mut prev = f64::INFINITY;
        for t in 0..=500 {
            let l = lambda_at(t, &s).unwrap();
            assert!(l <= prev);
            let closed = 0.005 * (1.0 + (t as f64 * std::f64::consts::PI / 500.0).cos());
            assert!((l - closed).abs() < 1e-15);
            prev = l;
        }
        let w = ScheduleSpec { warmup_frac: 0.1, ..s };
        assert_eq!(lambda_at(0, &w).unwrap(), 0.0);
        assert!((lambda_at(25, &w).unwrap() - 0.5 * lambda_at(25, &s).unwrap()).abs() < 1e-15);
        assert_eq!(lambda_at(50, &w).unwrap(), lambda_at(50, &s).unwrap());
    }

    #[test]
    fn adamw_first_step_and_zero_gradient() {
        let cfg = OptimizerConfig { learning_rate: 0.1, weight_decay: 0.0, max_grad_norm: None, ..OptimizerConfig::default() };
        let mut opt = AdamW::new(2);
        let mut p = vec![1.0f64, -1.0];
        opt.step(&mut p, &[0.5, -2.0], &cfg).unwrap();
        // First bias-corrected step moves each coordinate by ~lr·sign(g).
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
        let mut q = vec![0.3f64, 0.7];
        AdamW::new(2).step(&mut q, &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(q, vec![0.3, 0.7]);
        let clip = OptimizerConfig { max_grad_norm: Some(1.0), ..cfg };
        let norm = AdamW::new(2).step(&mut q, &[3.0, 4.0], &clip).unwrap();
        assert_eq!(norm, 5.0);
    }

    #[test]
    fn config_validation_and_steps() {
        let d = TrainConfig::desk();
        d.validate().unwrap();
        assert_eq!(d.total_steps(), 1000);
        assert_eq!(TrainConfig::full().total_steps(), 3 * (8732 / 128));
        TrainConfig::full().validate().unwrap();
        let bad = TrainConfig { group_size: 1, ..d.clone() };
        assert!(bad.validate().unwrap_err().to_string().contains("group_size"));
        let bad = TrainConfig { sampling: SamplingConfig { max_len: 200, ..d.sampling }, ..d };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_lambda_reduces_to_rl_objective() {
        let cfg = TrainConfig { lambda_max: 0.0, ..small_cfg() };
        let vocab = ToyVocabulary::new(cfg.model.vocab_size).unwrap();
        let dataset = training_tasks(&cfg).unwrap();
        let mut state = TrainState::new(initial_policy(&cfg).unwrap(), &cfg).unwrap();
        let before = state.policy.clone();
        let batch = batch_for_step(&cfg, &dataset, 1).unwrap();
        let m = train_step(&mut state, &batch, &cfg, &vocab, &AwarenessTemplate::default()).unwrap();
        assert_eq!(m.awareness_loss, None);
        assert_eq!(m.unified_loss, m.rl_loss);

        // Recompute the objective independently from the same rollouts.
        let mut replay_state = TrainState::new(before.clone(), &cfg).unwrap();
        let eps = cfg.clip.eps_std;
        let mut groups = Vec::new();
        for (j, task) in batch.iter().enumerate() {
            let mut rng = stream_rng(cfg.seed, STREAM_ROLLOUT, 1, j as u64);
            let gs = sample_group(&before, task, &vocab, cfg.group_size, &mut rng, &cfg.sampling, cfg.repair, eps).unwrap();
            groups.extend(gs.group);
        }
        let trajs: Vec<&Trajectory> = groups.iter().flat_map(|g| g.trajectories.iter()).collect();
        let lp: Vec<Vec<f64>> = trajs.iter().map(|t| sequence_log_probs(&before, &t.prompt_tokens, &t.output_tokens, 0.7).unwrap()).collect();
        let ent: Vec<Vec<f64>> = trajs
            .iter()
            .map(|t| crate::policy::score_sequence(&before, &t.prompt_tokens, &t.output_tokens, 0.7).unwrap().entropies)
            .collect();
        let obj = rl_objective(&groups, &lp, &lp, Some(&lp), &ent, &cfg.clip).unwrap();
        assert_eq!(obj.total, m.rl_loss);
        let m2 = train_step(&mut replay_state, &batch, &cfg, &vocab, &AwarenessTemplate::default()).unwrap();
        assert_eq!(m, StepMetrics { timing: m.timing, ..m2 });
    }

    #[test]
    fn zero_signal_leaves_parameters_unchanged() {
        use crate::policy::{TabularConfig, TabularStoppingPolicy};
        use crate::toyenv::EOS;
        // A policy that always stops at once: every reward is 0, so advantages vanish.
        let cfg = TrainConfig {
            lambda_max: 0.0,
            clip: ClipConfig { beta_kl: 0.0, entropy_coef: 0.0, ..ClipConfig::default() },
            optimizer: OptimizerConfig { weight_decay: 0.0, ..small_cfg().optimizer },
            ..small_cfg()
        };
        let vocab = ToyVocabulary::new(cfg.model.vocab_size).unwrap();
        let tcfg = TabularConfig { vocab_size: cfg.model.vocab_size, target_rows: 8, positions: 4 };
        let mut p = TabularStoppingPolicy::<f64>::zeros(tcfg).unwrap();
        p.fill_all(|_, _, tok| if tok == EOS { 50.0 } else { 0.0 });
        let dataset = training_tasks(&cfg).unwrap();
        let batch = batch_for_step(&cfg, &dataset, 1).unwrap();
        let mut state = TrainState::new(p.clone(), &cfg).unwrap();
        let m = train_step(&mut state, &batch, &cfg, &vocab, &AwarenessTemplate::default()).unwrap();
        assert_eq!(m.trajectories, cfg.batch_size * cfg.group_size);
        assert_eq!(m.updates, 1);
        for (a, b) in p.params().iter().zip(state.policy.params()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn steps_are_deterministic_and_ratio_is_one() {
        let cfg = small_cfg();
        let vocab = ToyVocabulary::new(cfg.model.vocab_size).unwrap();
        let dataset = training_tasks(&cfg).unwrap();
        let run = || {
            let mut state = TrainState::new(initial_policy(&cfg).unwrap(), &cfg).unwrap();
            let mut out = Vec::new();
            for t in 1..=cfg.total_steps() {
                let batch = batch_for_step(&cfg, &dataset, t).unwrap();
                out.push(serde_json::to_string(&train_step(&mut state, &batch, &cfg, &vocab, &AwarenessTemplate::default()).unwrap()).unwrap());
            }
            out
        };
        let a = run();
        assert_eq!(a, run());
        for line in &a {
            let m: StepMetrics = serde_json::from_str(line).unwrap();
            assert_eq!(m.max_ratio_deviation, 0.0);
            assert_eq!(m.awareness_batch, Some(m.trajectories));
            assert!((m.replayed_mean_reward().unwrap() - m.mean_reward).abs() < 1e-12);
        }
    }

    #[test]
    fn run_directory_layout_and_resume() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        let full = dir.path().join("full");
        let s = run_training(&cfg, &full, RunOptions::default()).unwrap();
        assert_eq!(s.steps_completed, 3);
        assert_eq!(read_metrics(&full.join(METRICS_FILE)).unwrap().len(), 3);
        for a in &s.manifest.artifacts {
            assert!(full.join(a).exists(), "{a}");
        }
        assert!(s.manifest.artifacts.contains(&checkpoint_rel(3)));
        assert_eq!(s.manifest.status, RunStatus::Completed);
        assert!(run_training(&cfg, &full, RunOptions::default()).is_err());
        let final_policy = load_tiny_policy(&full).unwrap();
        assert_eq!(load_tiny_policy(&full.join(checkpoint_rel(3))).unwrap(), final_policy);
        assert_eq!(load_tiny_policy(&full.join(POLICY_FILE)).unwrap(), final_policy);

        let part = dir.path().join("part");
        run_training(&cfg, &part, RunOptions { resume: false, stop_after: Some(2) }).unwrap();
        // Simulate a crash that wrote a metric line past the checkpoint.
        let mut f = OpenOptions::new().append(true).open(part.join(METRICS_FILE)).unwrap();
        writeln!(f, "{{\"partial\": true}}").unwrap();
        drop(f);
        let r = run_training(&cfg, &part, RunOptions { resume: true, stop_after: None }).unwrap();
        assert_eq!(r.steps_completed, 3);
        assert_eq!(fs::read(full.join(METRICS_FILE)).unwrap(), fs::read(part.join(METRICS_FILE)).unwrap());
        assert_eq!(fs::read(full.join(POLICY_FILE)).unwrap(), fs::read(part.join(POLICY_FILE)).unwrap());
    }

    #[test]
    fn grpo_only_and_larft_logs_differ_only_in_awareness_terms() {
        let larft = small_cfg();
        let grpo = TrainConfig { lambda_max: 0.0, ..small_cfg() };
        let vocab = ToyVocabulary::new(larft.model.vocab_size).unwrap();
        let dataset = training_tasks(&larft).unwrap();
        let batch = batch_for_step(&larft, &dataset, 1).unwrap();
        let mut a = TrainState::new(initial_policy(&larft).unwrap(), &larft).unwrap();
        let mut b = TrainState::new(initial_policy(&grpo).unwrap(), &grpo).unwrap();
        let ma = train_step(&mut a, &batch, &larft, &vocab, &AwarenessTemplate::default()).unwrap();
        let mb = train_step(&mut b, &batch, &grpo, &vocab, &AwarenessTemplate::default()).unwrap();
        assert!(ma.awareness_loss.is_some() && mb.awareness_loss.is_none());
        assert_eq!(ma.pairs, mb.pairs);
        assert_eq!(ma.rl_loss, mb.rl_loss);
        assert_eq!(ma.mean_reward, mb.mean_reward);
        assert!((ma.unified_loss - ma.rl_loss - ma.lambda * ma.awareness_loss.unwrap()).abs() < 1e-12);
    }
}
