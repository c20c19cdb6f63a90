//! Word counting, length rewards, and benchmark scoring formulas.
//!
//! Everything here is a pure function over integers and strings, so results are
//! reproducible bit for bit across platforms.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// One CJK ideograph from the basic block, or a run of ASCII letters, digits, apostrophes
/// and hyphens.
pub const WORD_PATTERN: &str = r"[\x{4E00}-\x{9FFF}]|[a-zA-Z0-9'-]+";

static WORD_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(WORD_PATTERN).expect("valid word pattern"));

/// Default tolerance for the within-tolerance rate (LS).
pub const DEFAULT_LS_TOL: f64 = 0.1;

pub fn count_words(text: &str) -> u32 {
    WORD_RE.find_iter(text).count() as u32
}

/// Lowercased word tokens in the same segmentation as [`count_words`].
pub fn word_tokens(text: &str) -> Vec<String> {
    WORD_RE
        .find_iter(text)
        .map(|m| m.as_str().to_lowercase())
        .collect()
}

/// Actual and requested length of one response, in words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthPair {
    pub actual: u32,
    pub target: u32,
}

impl LengthPair {
    pub fn new(actual: u32, target: u32) -> Result<Self> {
        if target == 0 {
            return invalid("target length must be at least one word");
        }
        Ok(Self { actual, target })
    }

    pub fn abs_error(&self) -> u32 {
        self.actual.abs_diff(self.target)
    }
}

fn check_target(pair: LengthPair) -> Result<()> {
    if pair.target == 0 {
        return invalid("target length must be at least one word");
    }
    Ok(())
}

/// `|actual - target| / target`.
pub fn length_deviation(pair: LengthPair) -> Result<f64> {
    check_target(pair)?;
    Ok(f64::from(pair.abs_error()) / f64::from(pair.target))
}

/// `max(0, 1 - deviation)`; 1 only on an exact match.
pub fn length_reward(pair: LengthPair) -> Result<f64> {
    Ok((1.0 - length_deviation(pair)?).max(0.0))
}

/// Long-form length score on a 0..100 scale. Under-generation is penalized with slope 1/2
/// on the ratio, over-generation with slope 1/3.
pub fn longwrite_length_score(required: u32, actual: u32) -> Result<f64> {
    if required == 0 || actual == 0 {
        return invalid("longwrite length score needs required >= 1 and actual >= 1");
    }
    let (x, y) = (f64::from(required), f64::from(actual));
    let score = if y > x {
        1.0 - (y / x - 1.0) / 3.0
    } else {
        1.0 - (x / y - 1.0) / 2.0
    };
    Ok(100.0 * score.max(0.0))
}

fn nonempty(pairs: &[LengthPair]) -> Result<()> {
    if pairs.is_empty() {
        return invalid("metric needs at least one length pair");
    }
    pairs.iter().try_for_each(|p| check_target(*p))
}

/// Mean absolute error in words.
pub fn mae(pairs: &[LengthPair]) -> Result<f64> {
    nonempty(pairs)?;
    let total: f64 = pairs.iter().map(|p| f64::from(p.abs_error())).sum();
    Ok(total / pairs.len() as f64)
}

/// LD: mean relative deviation, in percent.
pub fn mean_relative_deviation(pairs: &[LengthPair]) -> Result<f64> {
    nonempty(pairs)?;
    let mut total = 0.0;
    for p in pairs {
        total += length_deviation(*p)?;
    }
    Ok(100.0 * total / pairs.len() as f64)
}

/// LS: percentage of pairs whose deviation is at most `tol` (inclusive).
pub fn within_tolerance_rate(pairs: &[LengthPair], tol: f64) -> Result<f64> {
    if !(tol > 0.0 && tol <= 1.0) {
        return invalid(format!("tolerance must lie in (0, 1], got {tol}"));
    }
    nonempty(pairs)?;
    let mut hits = 0usize;
    for p in pairs {
        if within_tolerance(*p, tol)? {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / pairs.len() as f64)
}

pub(crate) fn within_tolerance(pair: LengthPair, tol: f64) -> Result<bool> {
    // Both sides are correctly rounded, so an exact boundary such as 20/100 vs 0.2 compares equal.
    Ok(length_deviation(pair)? <= tol)
}

/// Length of the longest common subsequence, O(n·m) time and O(m) memory.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence-level ROUGE-L F1.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return invalid("ROUGE-L reference must be nonempty");
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return Ok(0.0);
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// ROUGE-L over lowercased word tokens of two texts.
pub fn rouge_l_text(candidate: &str, reference: &str) -> Result<f64> {
    rouge_l(&word_tokens(candidate), &word_tokens(reference))
}

/// All length metrics for a set of responses, plus ROUGE-L where references exist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBundle {
    pub ld_percent: f64,
    pub ls_percent: f64,
    pub ls_tol: f64,
    /// `None` when some response is empty and the score is undefined per response; see
    /// [`longwrite_length_score`].
    pub sl: Option<f64>,
    pub mae: f64,
    pub rouge_l: Option<f64>,
}

/// One line of batch scoring input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub text: String,
    pub target_words: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

/// One line of batch scoring output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub word_count: u32,
    pub target_words: u32,
    pub deviation: f64,
    pub reward: f64,
    #[serde(flatten)]
    pub scores: ScoreBundle,
}

pub fn score_request(req: &ScoreRequest, tol: f64) -> Result<ScoreRecord> {
    let pair = LengthPair::new(count_words(&req.text), req.target_words)?;
    let rouge = match &req.reference {
        Some(r) => Some(rouge_l_text(&req.text, r)?),
        None => None,
    };
    let sl = if pair.actual == 0 {
        None
    } else {
        Some(longwrite_length_score(pair.target, pair.actual)?)
    };
    Ok(ScoreRecord {
        word_count: pair.actual,
        target_words: pair.target,
        deviation: length_deviation(pair)?,
        reward: length_reward(pair)?,
        scores: ScoreBundle {
            ld_percent: mean_relative_deviation(&[pair])?,
            ls_percent: within_tolerance_rate(&[pair], tol)?,
            ls_tol: tol,
            sl,
            mae: mae(&[pair])?,
            rouge_l: rouge,
        },
    })
}
