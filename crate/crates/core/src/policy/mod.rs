//! Autoregressive policies, rollout sampling and per-token scoring.
//!
//! A [`PolicyModel`] maps a token context to next-token logits at every position and can
//! backpropagate any gradient on those logits into its flat parameter vector. Losses in
//! [`crate::grpo`] and [`crate::hindsight`] are written against log-probabilities; the
//! helpers here chain their gradients back to logits.

mod checkpoint;
mod tabular;
mod tiny;

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, AnyPolicy, ArchitectureDescriptor, Describe, PolicyCheckpoint, CHECKPOINT_FORMAT_VERSION,
};
pub use tabular::{TabularConfig, TabularStoppingPolicy};
pub use tiny::{TinyConfig, TinySequenceModel};

use crate::error::{invalid, Error, Result};
use crate::grpo::group_advantages;
use crate::scalar::{log_softmax, Scalar};
use crate::tensor::Matrix;
use crate::textmetrics::{length_reward, LengthPair};
use crate::toyenv::{content_word_count, detokenize, LengthTask, ToyVocabulary, TokenId, EOS};

/// Forward-pass record kept for backpropagation.
pub trait ForwardTape<F> {
    /// Row `t` holds the logits predicting token `t + 1`.
    fn logits(&self) -> &Matrix<F>;
}

pub trait Decoder<F> {
    /// Appends `tokens` to the context and returns logits for the token that follows.
    fn extend(&mut self, tokens: &[TokenId]) -> Result<Vec<F>>;
}

struct RecomputeDecoder<'a, P> {
    policy: &'a P,
    context: Vec<TokenId>,
}

impl<F: Scalar, P: PolicyModel<F>> Decoder<F> for RecomputeDecoder<'_, P> {
    fn extend(&mut self, tokens: &[TokenId]) -> Result<Vec<F>> {
        self.context.extend_from_slice(tokens);
        self.policy.next_token_logits(&self.context)
    }
}

pub trait PolicyModel<F: Scalar>: Clone {
    type Tape: ForwardTape<F>;

    fn vocab_size(&self) -> usize;
    fn params(&self) -> &[F];
    fn params_mut(&mut self) -> &mut [F];
    /// Whether the model conditions on arbitrary token contexts (needed for the awareness
    /// task) rather than only on well-formed task prompts.
    fn supports_arbitrary_context(&self) -> bool;
    fn max_context(&self) -> usize;

    fn forward(&self, tokens: &[TokenId]) -> Result<Self::Tape>;

    /// [`PolicyModel::forward`] where only rows `logit_from..` need valid logits.
    fn forward_from(&self, tokens: &[TokenId], logit_from: usize) -> Result<Self::Tape> {
        let _ = logit_from;
        self.forward(tokens)
    }

    /// Accumulates `∂loss/∂params` into `grad` given `∂loss/∂logits` for every row.
    fn backward(&self, tape: &Self::Tape, dlogits: &Matrix<F>, grad: &mut [F]) -> Result<()>;

    fn next_token_logits(&self, context: &[TokenId]) -> Result<Vec<F>> {
        let tape = self.forward(context)?;
        let logits = tape.logits();
        Ok(logits.row(logits.rows() - 1).to_vec())
    }

    /// Stateful next-token scoring for left-to-right decoding; logits match
    /// [`PolicyModel::next_token_logits`] on the accumulated context.
    fn decoder(&self) -> Box<dyn Decoder<F> + '_> {
        Box::new(RecomputeDecoder { policy: self, context: Vec::new() })
    }

    fn num_params(&self) -> usize {
        self.params().len()
    }
}

/// One sampled response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_tokens: Vec<TokenId>,
    pub output_tokens: Vec<TokenId>,
    pub text: String,
    pub target_words: u32,
    pub word_count: u32,
    pub reward: f64,
    pub degenerate: bool,
    pub truncated: bool,
}

impl Trajectory {
    /// Scores `output` against `task`, filling in text, word count, reward and flags.
    pub fn score(
        task: &LengthTask,
        output: Vec<TokenId>,
        vocab: &ToyVocabulary,
        truncated: bool,
        degeneracy: Degeneracy,
    ) -> Result<Self> {
        let text = detokenize(&output, vocab)?;
        let word_count = content_word_count(&output, vocab)?;
        let reward = length_reward(LengthPair::new(word_count, task.target_words)?)?;
        Ok(Self {
            prompt_tokens: task.prompt_tokens.clone(),
            degenerate: is_degenerate(&output, degeneracy.n, degeneracy.max_repeats),
            output_tokens: output,
            text,
            target_words: task.target_words,
            word_count,
            reward,
            truncated,
        })
    }

    pub fn length_pair(&self) -> LengthPair {
        LengthPair { actual: self.word_count, target: self.target_words }
    }

    /// Prompt followed by output.
    pub fn full_sequence(&self) -> Vec<TokenId> {
        let mut seq = self.prompt_tokens.clone();
        seq.extend_from_slice(&self.output_tokens);
        seq
    }
}

/// n-gram repetition filter parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Degeneracy {
    pub n: usize,
    pub max_repeats: usize,
}

impl Default for Degeneracy {
    fn default() -> Self {
        Self { n: 4, max_repeats: 10 }
    }
}

/// True iff some contiguous n-gram occurs at least `max_repeats` times.
pub fn is_degenerate(output: &[TokenId], n: usize, max_repeats: usize) -> bool {
    if n == 0 || output.len() < n {
        return false;
    }
    let mut counts: HashMap<&[TokenId], usize> = HashMap::new();
    for w in output.windows(n) {
        let c = counts.entry(w).or_insert(0);
        *c += 1;
        if *c >= max_repeats {
            return true;
        }
    }
    false
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub max_len: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub degeneracy: Degeneracy,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { max_len: 64, temperature: 0.7, top_p: 0.8, degeneracy: Degeneracy::default() }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return invalid("max_len must be at least 1");
        }
        if !(self.temperature > 0.0) {
            return invalid("temperature must be positive");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return invalid("top_p must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Draws one token from `softmax(logits / temperature)` restricted to the smallest
/// high-probability set whose mass reaches `top_p`. Ties break toward the lower id.
pub fn sample_token<F: Scalar, R: Rng + ?Sized>(logits: &[F], temperature: f64, top_p: f64, rng: &mut R) -> TokenId {
    let lp = log_softmax(logits, F::lit(temperature));
    let mut probs: Vec<(usize, f64)> = lp.iter().map(|l| l.as_f64().exp()).enumerate().collect();
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut mass = 0.0;
    let mut keep = probs.len();
    for (i, &(_, p)) in probs.iter().enumerate() {
        mass += p;
        if mass >= top_p {
            keep = i + 1;
            break;
        }
    }
    let nucleus = &probs[..keep];
    let total: f64 = nucleus.iter().map(|&(_, p)| p).sum();
    let mut u = rng.random::<f64>() * total;
    for &(id, p) in nucleus {
        if u < p {
            return id as TokenId;
        }
        u -= p;
    }
    nucleus[keep - 1].0 as TokenId
}

/// Ancestral sampling until EOS or `max_len` tokens. EOS, when produced, is kept as the last
/// output token.
pub fn sample_trajectory<F: Scalar, P: PolicyModel<F>, R: Rng + ?Sized>(
    policy: &P,
    task: &LengthTask,
    vocab: &ToyVocabulary,
    rng: &mut R,
    cfg: &SamplingConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    let mut dec = policy.decoder();
    let mut logits = dec.extend(&task.prompt_tokens)?;
    let mut output = Vec::new();
    let mut truncated = true;
    while output.len() < cfg.max_len {
        let tok = sample_token(&logits, cfg.temperature, cfg.top_p, rng);
        output.push(tok);
        if tok == EOS {
            truncated = false;
            break;
        }
        if output.len() == cfg.max_len {
            break;
        }
        logits = dec.extend(&[tok])?;
    }
    Trajectory::score(task, output, vocab, truncated, cfg.degeneracy)
}

/// A group of non-degenerate rollouts for one task with their normalized advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup<F> {
    pub task: LengthTask,
    pub trajectories: Vec<Trajectory>,
    pub mu_r: F,
    pub sigma_r: F,
    pub advantages: Vec<F>,
}

impl<F: Scalar> RolloutGroup<F> {
    pub fn new(task: LengthTask, trajectories: Vec<Trajectory>, eps_std: F) -> Result<Self> {
        if trajectories.iter().any(|t| t.degenerate) {
            return invalid("degenerate trajectories cannot enter a rollout group");
        }
        let rewards: Vec<F> = trajectories.iter().map(|t| F::lit(t.reward)).collect();
        let advantages = group_advantages(&rewards, eps_std)?;
        let (mu_r, sigma_r) = mean_and_population_std(&rewards);
        Ok(Self { task, trajectories, mu_r, sigma_r, advantages })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.trajectories.iter().map(|t| t.output_tokens.len()).sum()
    }
}

pub(crate) fn mean_and_population_std<F: Scalar>(xs: &[F]) -> (F, F) {
    let n = F::from_usize_lossy(xs.len());
    let mean = xs.iter().copied().sum::<F>() / n;
    let var = xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() / n;
    (mean, var.sqrt())
}

/// Group sampling with degenerate-rollout repair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupRepair {
    /// Resampling attempts per degenerate rollout before it is dropped.
    pub max_resamples: usize,
    pub min_group: usize,
}

impl Default for GroupRepair {
    fn default() -> Self {
        Self { max_resamples: 3, min_group: 2 }
    }
}

#[derive(Debug, Clone)]
pub struct GroupSample<F> {
    /// `None` when fewer than `min_group` valid rollouts survived.
    pub group: Option<RolloutGroup<F>>,
    pub degenerate_seen: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn sample_group<F: Scalar, P: PolicyModel<F>, R: Rng + ?Sized>(
    policy: &P,
    task: &LengthTask,
    vocab: &ToyVocabulary,
    group_size: usize,
    rng: &mut R,
    cfg: &SamplingConfig,
    repair: GroupRepair,
    eps_std: F,
) -> Result<GroupSample<F>> {
    if group_size < 2 {
        return invalid("group size must be at least 2");
    }
    let mut kept = Vec::with_capacity(group_size);
    let mut degenerate_seen = 0;
    for _ in 0..group_size {
        let mut traj = sample_trajectory(policy, task, vocab, rng, cfg)?;
        let mut attempts = 0;
        while traj.degenerate && attempts < repair.max_resamples {
            degenerate_seen += 1;
            traj = sample_trajectory(policy, task, vocab, rng, cfg)?;
            attempts += 1;
        }
        if traj.degenerate {
            degenerate_seen += 1;
        } else {
            kept.push(traj);
        }
    }
    let group = if kept.len() >= repair.min_group.max(2) {
        Some(RolloutGroup::new(task.clone(), kept, eps_std)?)
    } else {
        None
    };
    Ok(GroupSample { group, degenerate_seen })
}

/// Log-probabilities and entropies of an output under the policy, with the forward tape
/// needed to backpropagate through them.
pub struct SequenceScore<F, T> {
    pub tape: T,
    pub prompt_len: usize,
    pub temperature: F,
    /// `log_probs[t] = log π(o_t | o_<t, prompt)`
    pub log_probs: Vec<F>,
    pub entropies: Vec<F>,
    /// Full log-distribution at each output step.
    step_log_dists: Vec<Vec<F>>,
}

fn check_output<F: Scalar, P: PolicyModel<F>>(policy: &P, output: &[TokenId]) -> Result<()> {
    if output.is_empty() {
        return invalid("output must be nonempty");
    }
    if let Some(&bad) = output.iter().find(|&&t| t as usize >= policy.vocab_size()) {
        return Err(Error::UnknownToken(bad));
    }
    Ok(())
}

pub fn score_sequence<F: Scalar, P: PolicyModel<F>>(
    policy: &P,
    prompt: &[TokenId],
    output: &[TokenId],
    temperature: F,
) -> Result<SequenceScore<F, P::Tape>> {
    check_output(policy, output)?;
    if prompt.is_empty() {
        return invalid("prompt must be nonempty");
    }
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(output);
    // The final output token is never a context position.
    let tape = policy.forward_from(&seq[..seq.len() - 1], prompt.len() - 1)?;
    let logits = tape.logits();
    let mut log_probs = Vec::with_capacity(output.len());
    let mut entropies = Vec::with_capacity(output.len());
    let mut step_log_dists = Vec::with_capacity(output.len());
    for (j, &tok) in output.iter().enumerate() {
        let lp = log_softmax(logits.row(prompt.len() - 1 + j), temperature);
        log_probs.push(lp[tok as usize]);
        entropies.push(entropy_of_log_dist(&lp));
        step_log_dists.push(lp);
    }
    if log_probs.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("log-probability".into()));
    }
    Ok(SequenceScore { tape, prompt_len: prompt.len(), temperature, log_probs, entropies, step_log_dists })
}

fn entropy_of_log_dist<F: Scalar>(lp: &[F]) -> F {
    -lp.iter()
        .map(|&l| {
            let p = l.exp();
            if p > F::zero() {
                p * l
            } else {
                F::zero()
            }
        })
        .sum::<F>()
}

impl<F: Scalar, T: ForwardTape<F>> SequenceScore<F, T> {
    /// Chains `∂loss/∂log_probs[t]` and `∂loss/∂entropies[t]` into logit gradients.
    pub fn dlogits(&self, output: &[TokenId], d_log_probs: &[F], d_entropies: Option<&[F]>) -> Result<Matrix<F>> {
        if d_log_probs.len() != output.len() || output.len() != self.log_probs.len() {
            return Err(Error::Shape("log-prob gradient length".into()));
        }
        let logits = self.tape.logits();
        let mut d = Matrix::zeros(logits.rows(), logits.cols());
        let inv_t = F::one() / self.temperature;
        for (j, &tok) in output.iter().enumerate() {
            let lp = &self.step_log_dists[j];
            let g_lp = d_log_probs[j];
            let g_h = d_entropies.map_or(F::zero(), |e| e[j]);
            let h = self.entropies[j];
            let row = d.row_mut(self.prompt_len - 1 + j);
            for (k, (dk, &l)) in row.iter_mut().zip(lp).enumerate() {
                let p = l.exp();
                let onehot = if k == tok as usize { F::one() } else { F::zero() };
                let mut g = g_lp * (onehot - p);
                if g_h != F::zero() {
                    g -= g_h * p * (l + h);
                }
                *dk = g * inv_t;
            }
        }
        Ok(d)
    }
}

/// Per-token `log π(o_t | o_<t, prompt)`.
pub fn sequence_log_probs<F: Scalar, P: PolicyModel<F>>(
    policy: &P,
    prompt: &[TokenId],
    output: &[TokenId],
    temperature: F,
) -> Result<Vec<F>> {
    Ok(score_sequence(policy, prompt, output, temperature)?.log_probs)
}

/// Mean Shannon entropy of the next-token distribution over the output steps.
pub fn mean_entropy<F: Scalar, P: PolicyModel<F>>(
    policy: &P,
    prompt: &[TokenId],
    output: &[TokenId],
    temperature: F,
) -> Result<F> {
    let s = score_sequence(policy, prompt, output, temperature)?;
    Ok(s.entropies.iter().copied().sum::<F>() / F::from_usize_lossy(s.entropies.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyenv::{ToyVocabulary, FIRST_CONTENT};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform_tabular(vocab: usize) -> TabularStoppingPolicy<f64> {
        TabularStoppingPolicy::zeros(TabularConfig { vocab_size: vocab, target_rows: 4, positions: 16 }).unwrap()
    }

    #[test]
    fn degenerate_filter() {
        let ab: Vec<TokenId> = (0..20).map(|i| if i % 2 == 0 { 20 } else { 21 }).collect();
        assert!(is_degenerate(&ab, 2, 10));
        assert!(!is_degenerate(&ab, 2, 11));
        let distinct: Vec<TokenId> = (0..30).collect();
        assert!(!is_degenerate(&distinct, 1, 2));
        assert!(!is_degenerate(&[1, 2], 4, 1));
    }

    #[test]
    fn degenerate_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let len = rng.random_range(0..40);
            let seq: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..3)).collect();
            let n = rng.random_range(1..4);
            let reps = rng.random_range(2..8);
            let brute = (0..seq.len().saturating_sub(n - 1)).any(|i| {
                let g = &seq[i..i + n];
                (0..=seq.len() - n).filter(|&j| &seq[j..j + n] == g).count() >= reps
            });
            assert_eq!(is_degenerate(&seq, n, reps), brute);
        }
    }

    #[test]
    fn uniform_log_probs_and_entropy() {
        let p = uniform_tabular(4);
        let task = LengthTask::new("t", 3).unwrap();
        let out = [2, 3, 0, 1];
        let lp = sequence_log_probs(&p, &task.prompt_tokens, &out, 1.0).unwrap();
        assert_eq!(lp.len(), 4);
        for l in lp {
            assert!((l - 0.25f64.ln()).abs() < 1e-12);
        }
        let h = mean_entropy(&p, &task.prompt_tokens, &out, 1.0).unwrap();
        assert!((h - 4f64.ln()).abs() < 1e-12);
        assert!(sequence_log_probs(&p, &task.prompt_tokens, &[], 1.0).is_err());
        assert!(matches!(sequence_log_probs(&p, &task.prompt_tokens, &[7], 1.0), Err(Error::UnknownToken(7))));
    }

    #[test]
    fn deterministic_and_two_point_policies() {
        let task = LengthTask::new("t", 3).unwrap();
        let mut det = uniform_tabular(4);
        det.fill_all(|_, _, tok| if tok == 2 { 60.0 } else { 0.0 });
        let out = [2, 2, 2];
        for l in sequence_log_probs(&det, &task.prompt_tokens, &out, 1.0).unwrap() {
            assert!(l.abs() < 1e-20);
        }
        assert!(mean_entropy(&det, &task.prompt_tokens, &out, 1.0).unwrap() < 1e-20);

        let mut two = uniform_tabular(4);
        two.fill_all(|_, _, tok| if tok < 2 { 0.0 } else { -800.0 });
        let h = mean_entropy(&two, &task.prompt_tokens, &[0, 1, 0], 1.0).unwrap();
        assert!((h - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ratio_is_exp_of_log_prob_difference() {
        let task = LengthTask::new("t", 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let old = TabularStoppingPolicy::<f64>::random(TabularConfig { vocab_size: 6, target_rows: 4, positions: 8 }, 1.0, &mut rng).unwrap();
        let mut new = old.clone();
        new.params_mut().iter_mut().for_each(|x| *x += 0.01 * rng.random::<f64>());
        let out = [3, 4, 1];
        let lo = sequence_log_probs(&old, &task.prompt_tokens, &out, 1.0).unwrap();
        let ln = sequence_log_probs(&new, &task.prompt_tokens, &out, 1.0).unwrap();
        for (j, (&a, &b)) in lo.iter().zip(&ln).enumerate() {
            let po = crate::scalar::softmax(&old.next_token_logits(&[&task.prompt_tokens[..], &out[..j]].concat()).unwrap(), 1.0)[out[j] as usize];
            let pn = crate::scalar::softmax(&new.next_token_logits(&[&task.prompt_tokens[..], &out[..j]].concat()).unwrap(), 1.0)[out[j] as usize];
            assert!(((b - a).exp() - pn / po).abs() < 1e-12);
        }
    }

    #[test]
    fn forced_stop_gives_empty_output() {
        let vocab = ToyVocabulary::new(32).unwrap();
        let mut p = uniform_tabular(32);
        p.fill_all(|_, _, tok| if tok == EOS { 60.0 } else { 0.0 });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for c in [1, 5, 40] {
            let task = LengthTask::new("t", c).unwrap();
            let t = sample_trajectory(&p, &task, &vocab, &mut rng, &SamplingConfig::default()).unwrap();
            assert_eq!(t.output_tokens, vec![EOS]);
            assert_eq!(t.word_count, 0);
            assert_eq!(t.reward, 0.0);
            assert!(!t.truncated);
        }
    }

    #[test]
    fn sampling_is_seeded_and_truncates() {
        let vocab = ToyVocabulary::new(32).unwrap();
        let mut p = uniform_tabular(32);
        p.fill_all(|_, _, tok| if tok == EOS || (FIRST_CONTENT..FIRST_CONTENT + 4).contains(&tok) { 0.0 } else { -1000.0 });
        let cfg = SamplingConfig { max_len: 10, temperature: 1.0, top_p: 1.0, degeneracy: Degeneracy::default() };
        let task = LengthTask::new("t", 7).unwrap();
        let mut truncated = 0;
        for seed in 0..200 {
            let a = sample_trajectory(&p, &task, &vocab, &mut ChaCha8Rng::seed_from_u64(seed), &cfg).unwrap();
            let b = sample_trajectory(&p, &task, &vocab, &mut ChaCha8Rng::seed_from_u64(seed), &cfg).unwrap();
            assert_eq!(a, b);
            assert!(a.word_count <= 10);
            assert_eq!(a.word_count, content_word_count(&a.output_tokens, &vocab).unwrap());
            assert_eq!(a.truncated, !a.output_tokens.ends_with(&[EOS]));
            truncated += usize::from(a.truncated);
        }
        assert!(truncated > 0);
        assert!(sample_trajectory(&p, &task, &vocab, &mut ChaCha8Rng::seed_from_u64(0), &SamplingConfig { max_len: 0, ..cfg }).is_err());
    }

    #[test]
    fn empirical_frequencies_match_probabilities() {
        let probs = [0.5f64, 0.25, 0.15, 0.1];
        let mut p = uniform_tabular(4);
        p.fill_all(|_, _, tok| probs[tok as usize].ln());
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let logits = p.next_token_logits(&LengthTask::new("t", 2).unwrap().prompt_tokens).unwrap();
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_token(&logits, 1.0, 1.0, &mut rng) as usize] += 1;
        }
        for (k, &pk) in probs.iter().enumerate() {
            let freq = counts[k] as f64 / n as f64;
            let se = (pk * (1.0 - pk) / n as f64).sqrt();
            assert!((freq - pk).abs() < 3.0 * se, "token {k}: {freq} vs {pk}");
        }
    }

    #[test]
    fn top_p_restricts_to_nucleus() {
        let logits = [0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln()];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws: Vec<_> = (0..500).map(|_| sample_token(&logits, 1.0, 0.75, &mut rng)).collect();
        assert!(draws.iter().all(|&t| t < 2));
        assert!(draws.iter().any(|&t| t == 1));
        let draws: Vec<_> = (0..100).map(|_| sample_token(&logits, 1.0, 0.5, &mut rng)).collect();
        assert!(draws.iter().all(|&t| t == 0));
    }

    #[test]
    fn groups_exclude_degenerate_rollouts() {
        let vocab = ToyVocabulary::new(32).unwrap();
        let mut p = uniform_tabular(32);
        // Always repeats one content token: every rollout is degenerate.
        p.fill_all(|_, _, tok| if tok == 20 { 60.0 } else { 0.0 });
        let task = LengthTask::new("t", 20).unwrap();
        let cfg = SamplingConfig { max_len: 30, ..SamplingConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_group(&p, &task, &vocab, 4, &mut rng, &cfg, GroupRepair::default(), 1e-8).unwrap();
        assert!(s.group.is_none());
        assert_eq!(s.degenerate_seen, 16);

        let t = Trajectory::score(&task, vec![20; 30], &vocab, true, Degeneracy::default()).unwrap();
        assert!(RolloutGroup::new(task.clone(), vec![t.clone(), t], 1e-8f64).is_err());
    }
}
