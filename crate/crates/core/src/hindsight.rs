//! Hindsight relabeling of rollouts into count-words examples, and the masked awareness
//! loss.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::LazyLock;

use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::policy::{score_sequence, PolicyModel, Trajectory};
use crate::scalar::Scalar;
use crate::toyenv::{content_word_count, digit_token, ToyVocabulary, TokenId, DIGIT_0, I_AWARE, TAG_CLOSE, TAG_OPEN};

pub const AWARENESS_QUERY: &str = "Count how many words are in the text above?";

pub const AWARENESS_INSTRUCTION: &str = "You are a precise text analysis assistant. Your task is to count the number of words in the provided text, where words include both Chinese characters and English words/numbers.\nRespond ONLY with the final word count, enclosed in XML tags like this: <word_count>XXX</word_count>.";

pub const TEXT_SEPARATOR: &str = "--- TEXT TO ANALYZE ---";

/// Longest label: open tag, four digits, close tag.
pub const MAX_LABEL_TOKENS: usize = 6;

static LABEL_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"<word_count>\s*(\d+)\s*</word_count>").unwrap());

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AwarenessTemplate {
    pub instruction_text: String,
    /// Single token standing for the whole instruction in toy sequences.
    pub sentinel: TokenId,
}

impl Default for AwarenessTemplate {
    fn default() -> Self {
        Self { instruction_text: AWARENESS_INSTRUCTION.to_string(), sentinel: I_AWARE }
    }
}

impl AwarenessTemplate {
    /// Full-text rendering: instruction, separator line, then the response.
    pub fn render(&self, response: &str) -> String {
        format!("{}\n{TEXT_SEPARATOR}\n{response}", self.instruction_text)
    }

    /// Recovers the response region of a [`Self::render`] output.
    pub fn response_region<'a>(&self, rendered: &'a str) -> Option<&'a str> {
        rendered.split_once(&format!("\n{TEXT_SEPARATOR}\n")).map(|(_, r)| r)
    }
}

pub fn format_length_label(n: i64) -> Result<String> {
    if n < 0 {
        return invalid(format!("word count cannot be negative, got {n}"));
    }
    Ok(format!("<word_count>{n}</word_count>"))
}

/// First count in `<word_count>N</word_count>` form anywhere in `text`.
pub fn parse_length_label(text: &str) -> Option<u64> {
    LABEL_RE.captures(text)?.get(1)?.as_str().parse().ok()
}

pub fn label_tokens(n: u32) -> Vec<TokenId> {
    let mut out = vec![TAG_OPEN];
    out.extend(n.to_string().bytes().map(|b| digit_token(b - b'0')));
    out.push(TAG_CLOSE);
    out
}

/// Inverse of [`label_tokens`]; rejects anything outside the tag grammar, including
/// leading zeros.
pub fn parse_label_tokens(tokens: &[TokenId]) -> Option<u32> {
    let (&first, rest) = tokens.split_first()?;
    let (&last, digits) = rest.split_last()?;
    if first != TAG_OPEN || last != TAG_CLOSE || digits.is_empty() || digits.len() > 10 {
        return None;
    }
    if digits.len() > 1 && digits[0] == DIGIT_0 {
        return None;
    }
    let mut n: u64 = 0;
    for &d in digits {
        if !(DIGIT_0..DIGIT_0 + 10).contains(&d) {
            return None;
        }
        n = n * 10 + u64::from(d - DIGIT_0);
    }
    u32::try_from(n).ok()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AwarenessExample {
    #[serde(rename = "input_token_ids")]
    pub input_tokens: Vec<TokenId>,
    #[serde(rename = "label_token_ids")]
    pub label_tokens: Vec<TokenId>,
    /// Over `input ++ label`; true exactly on the label.
    #[serde(rename = "mask")]
    pub loss_mask: Vec<bool>,
    pub true_count: u32,
}

impl AwarenessExample {
    pub fn full_sequence(&self) -> Vec<TokenId> {
        let mut s = self.input_tokens.clone();
        s.extend_from_slice(&self.label_tokens);
        s
    }
}

/// `[τ; I_aware]` paired with the label for the trajectory's own word count.
pub fn relabel(traj: &Trajectory, template: &AwarenessTemplate, vocab: &ToyVocabulary) -> Result<AwarenessExample> {
    if traj.degenerate {
        return invalid("degenerate trajectories are not relabeled");
    }
    let counted = content_word_count(&traj.output_tokens, vocab)?;
    if counted != traj.word_count {
        return invalid(format!("trajectory word_count {} but its tokens count {counted}", traj.word_count));
    }
    let mut input_tokens = traj.output_tokens.clone();
    input_tokens.push(template.sentinel);
    let label = label_tokens(counted);
    let mut loss_mask = vec![false; input_tokens.len()];
    loss_mask.extend(std::iter::repeat_n(true, label.len()));
    Ok(AwarenessExample { input_tokens, label_tokens: label, loss_mask, true_count: counted })
}

pub fn relabel_all(trajs: &[&Trajectory], template: &AwarenessTemplate, vocab: &ToyVocabulary) -> Result<Vec<AwarenessExample>> {
    trajs.iter().map(|t| relabel(t, template, vocab)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AwarenessLoss<F> {
    pub value: F,
    /// `∂value/∂params`, same length as the policy parameters.
    pub grad: Vec<F>,
}

fn check_awareness_policy<F: Scalar, P: PolicyModel<F>>(policy: &P) -> Result<()> {
    if !policy.supports_arbitrary_context() {
        return Err(Error::Unsupported("the awareness task needs a policy that reads arbitrary contexts".into()));
    }
    Ok(())
}

/// Summed label NLL for one example, at temperature 1.
pub fn example_nll<F: Scalar, P: PolicyModel<F>>(policy: &P, ex: &AwarenessExample) -> Result<F> {
    check_awareness_policy(policy)?;
    let s = score_sequence(policy, &ex.input_tokens, &ex.label_tokens, F::one())?;
    Ok(-s.log_probs.iter().copied().sum::<F>())
}

/// `-(1/|batch|) Σ_examples Σ_label log π(label_k | preceding)` and its parameter gradient.
pub fn awareness_loss<F: Scalar, P: PolicyModel<F>>(policy: &P, batch: &[AwarenessExample]) -> Result<AwarenessLoss<F>> {
    check_awareness_policy(policy)?;
    if batch.is_empty() {
        return invalid("awareness batch is empty");
    }
    let inv_n = F::one() / F::from_usize_lossy(batch.len());
    let mut grad = vec![F::zero(); policy.num_params()];
    let mut value = F::zero();
    for ex in batch {
        let s = score_sequence(policy, &ex.input_tokens, &ex.label_tokens, F::one())?;
        value -= s.log_probs.iter().copied().sum::<F>() * inv_n;
        let d_lp = vec![-inv_n; ex.label_tokens.len()];
        let dl = s.dlogits(&ex.label_tokens, &d_lp, None)?;
        policy.backward(&s.tape, &dl, &mut grad)?;
    }
    if !value.is_finite() {
        return Err(Error::NonFinite("awareness loss".into()));
    }
    Ok(AwarenessLoss { value, grad })
}

/// Greedy count prediction for an output: decode after `[output; sentinel]` until the
/// closing tag or [`MAX_LABEL_TOKENS`] tokens, then parse.
pub fn predict_count<F: Scalar, P: PolicyModel<F>>(policy: &P, output: &[TokenId], template: &AwarenessTemplate) -> Result<Option<u32>> {
    check_awareness_policy(policy)?;
    let mut context = output.to_vec();
    context.push(template.sentinel);
    let start = context.len();
    let mut dec = policy.decoder();
    let mut fed = 0;
    for _ in 0..MAX_LABEL_TOKENS {
        let logits = dec.extend(&context[fed..])?;
        fed = context.len();
        let mut best = 0;
        for (i, l) in logits.iter().enumerate() {
            if *l > logits[best] {
                best = i;
            }
        }
        context.push(best as TokenId);
        if best as TokenId == TAG_CLOSE {
            break;
        }
    }
    Ok(parse_label_tokens(&context[start..]))
}

/// Fraction of outputs whose greedy count prediction equals their true word count.
pub fn exact_match_accuracy<F: Scalar, P: PolicyModel<F>>(
    policy: &P,
    outputs: &[Vec<TokenId>],
    vocab: &ToyVocabulary,
    template: &AwarenessTemplate,
) -> Result<f64> {
    if outputs.is_empty() {
        return invalid("no outputs to evaluate");
    }
    let mut hits = 0usize;
    for out in outputs {
        let truth = content_word_count(out, vocab)?;
        if predict_count(policy, out, template)? == Some(truth) {
            hits += 1;
        }
    }
    Ok(hits as f64 / outputs.len() as f64)
}

/// FIFO store of past awareness examples with uniform resampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<AwarenessExample>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return invalid("replay capacity must be positive");
        }
        Ok(Self { capacity, items: VecDeque::with_capacity(capacity) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn extend(&mut self, examples: impl IntoIterator<Item = AwarenessExample>) {
        for ex in examples {
            if self.items.len() == self.capacity {
                self.items.pop_front();
            }
            self.items.push_back(ex);
        }
    }

    /// `k` draws with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<AwarenessExample> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..k).map(|_| self.items[rng.random_range(0..self.items.len())].clone()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &AwarenessExample> {
        self.items.iter()
    }
}

pub fn dump_examples<W: Write>(examples: &[AwarenessExample], mut out: W) -> Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Context length the awareness pass needs for an output of `output_len` tokens.
pub fn awareness_context_len(output_len: usize) -> usize {
    output_len + 1 + MAX_LABEL_TOKENS - 1
}
