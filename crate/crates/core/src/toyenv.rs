//! Synthetic length-following tasks over a toy vocabulary.
//!
//! Every content token detokenizes to exactly one counted word, so the length of a
//! response in words is fully determined by its tokens.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::textmetrics::count_words;

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const SEP: TokenId = 2;
pub const TAG_OPEN: TokenId = 3;
pub const TAG_CLOSE: TokenId = 4;
pub const DIGIT_0: TokenId = 5;
pub const I_AWARE: TokenId = 15;
pub const FIRST_CONTENT: TokenId = 16;

/// Targets are encoded with this many zero-padded digit tokens.
pub const TARGET_DIGITS: usize = 4;
/// `[BOS, SEP, d, d, d, d, SEP]`
pub const PROMPT_LEN: usize = TARGET_DIGITS + 3;
/// Exclusive ceiling shared by dataset construction and evaluation.
pub const MAX_TARGET_WORDS: u32 = 4000;

pub const VOCAB_FORMAT_VERSION: u32 = 1;

const CJK_LEXEMES: [&str; 8] = ["好", "字", "长", "文", "词", "句", "书", "短"];

pub fn digit_token(d: u8) -> TokenId {
    debug_assert!(d < 10);
    DIGIT_0 + TokenId::from(d)
}

/// Tokens a response to a task prompt may contain.
pub fn is_response_token(id: TokenId) -> bool {
    id == EOS || id >= FIRST_CONTENT
}

pub fn within_length_ceiling(c: u32) -> bool {
    c < MAX_TARGET_WORDS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Bos,
    Eos,
    Sep,
    TagOpen,
    TagClose,
    Digit,
    Aware,
    Content,
}

impl TokenKind {
    /// Words this token contributes to the content rendering.
    pub fn content_words(self) -> u32 {
        match self {
            TokenKind::Digit | TokenKind::Content => 1,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub id: TokenId,
    pub surface: String,
    pub kind: TokenKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub bos: TokenId,
    pub eos: TokenId,
    pub sep: TokenId,
    pub tag_open: TokenId,
    pub tag_close: TokenId,
    pub digit_0: TokenId,
    pub aware: TokenId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VocabFile {
    format_version: u32,
    specials: SpecialIds,
    tokens: Vec<VocabEntry>,
}

/// Token id to surface-string map with the fixed special-token layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyVocabulary {
    entries: Vec<VocabEntry>,
}

impl ToyVocabulary {
    /// Builds a vocabulary of `size` tokens; everything past the specials is content.
    /// About a quarter of the content tokens are CJK lexemes (at most eight).
    pub fn new(size: usize) -> Result<Self> {
        if size <= FIRST_CONTENT as usize {
            return invalid(format!("vocabulary needs more than {FIRST_CONTENT} tokens, got {size}"));
        }
        let mut entries = Vec::with_capacity(size);
        let special = |id: TokenId, surface: &str, kind| VocabEntry { id, surface: surface.to_string(), kind };
        entries.push(special(BOS, "<bos>", TokenKind::Bos));
        entries.push(special(EOS, "<eos>", TokenKind::Eos));
        entries.push(special(SEP, "<sep>", TokenKind::Sep));
        entries.push(special(TAG_OPEN, "<word_count>", TokenKind::TagOpen));
        entries.push(special(TAG_CLOSE, "</word_count>", TokenKind::TagClose));
        for d in 0..10u8 {
            entries.push(special(digit_token(d), &d.to_string(), TokenKind::Digit));
        }
        entries.push(special(I_AWARE, "<count_words>", TokenKind::Aware));
        let n_content = size - FIRST_CONTENT as usize;
        let n_cjk = (n_content / 4).min(CJK_LEXEMES.len());
        for (k, id) in (FIRST_CONTENT..size as TokenId).enumerate() {
            let surface = if k >= n_content - n_cjk {
                CJK_LEXEMES[k - (n_content - n_cjk)].to_string()
            } else {
                format!("w{id}")
            };
            entries.push(VocabEntry { id, surface, kind: TokenKind::Content });
        }
        Ok(Self { entries })
    }

    pub fn size(&self) -> usize {
        self.entries.len()
    }

    pub fn entry(&self, id: TokenId) -> Result<&VocabEntry> {
        self.entries.get(id as usize).ok_or(Error::UnknownToken(id))
    }

    pub fn kind(&self, id: TokenId) -> Result<TokenKind> {
        Ok(self.entry(id)?.kind)
    }

    pub fn surface(&self, id: TokenId) -> Result<&str> {
        Ok(&self.entry(id)?.surface)
    }

    pub fn content_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.entries
            .iter()
            .filter(|e| e.kind == TokenKind::Content)
            .map(|e| e.id)
    }

    pub fn specials() -> SpecialIds {
        SpecialIds {
            bos: BOS,
            eos: EOS,
            sep: SEP,
            tag_open: TAG_OPEN,
            tag_close: TAG_CLOSE,
            digit_0: DIGIT_0,
            aware: I_AWARE,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            format_version: VOCAB_FORMAT_VERSION,
            specials: Self::specials(),
            tokens: self.entries.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        if file.format_version != VOCAB_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported vocabulary format {}", file.format_version)));
        }
        if file.specials != Self::specials() {
            return Err(Error::Format("special token layout differs from the fixed layout".into()));
        }
        let vocab = Self { entries: file.tokens };
        vocab.validate()?;
        Ok(vocab)
    }

    fn validate(&self) -> Result<()> {
        let reference = Self::new(self.size())?;
        for (i, (e, r)) in self.entries.iter().zip(&reference.entries).enumerate() {
            if e.id as usize != i {
                return Err(Error::Format(format!("token at index {i} has id {}", e.id)));
            }
            if e.kind != r.kind {
                return Err(Error::Format(format!("token {i} has kind {:?}, expected {:?}", e.kind, r.kind)));
            }
            if e.kind == TokenKind::Content && count_words(&e.surface) != 1 {
                return Err(Error::Format(format!("content token {i} ({:?}) is not exactly one word", e.surface)));
            }
        }
        Ok(())
    }
}

/// Content rendering: content and digit surfaces joined by single spaces. Boundary,
/// separator, tag and sentinel tokens emit nothing.
pub fn detokenize(tokens: &[TokenId], vocab: &ToyVocabulary) -> Result<String> {
    let mut out = String::new();
    for &t in tokens {
        let e = vocab.entry(t)?;
        if e.kind.content_words() == 0 {
            continue;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&e.surface);
    }
    Ok(out)
}

/// Word count of a token sequence, computed through the detokenizer and checked against
/// the per-token word contributions.
pub fn content_word_count(tokens: &[TokenId], vocab: &ToyVocabulary) -> Result<u32> {
    let counted = count_words(&detokenize(tokens, vocab)?);
    let mut expected = 0u32;
    for &t in tokens {
        expected += vocab.kind(t)?.content_words();
    }
    if counted != expected {
        return Err(Error::Format(format!(
            "detokenized count {counted} disagrees with token count {expected}"
        )));
    }
    Ok(counted)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LengthBucket {
    Short,
    Medium,
    Long,
    VeryLong,
}

impl LengthBucket {
    pub const ALL: [LengthBucket; 4] = [Self::Short, Self::Medium, Self::Long, Self::VeryLong];

    /// Short covers 10..=100 nominally; shorter positive targets also land in Short.
    pub fn of(words: u32) -> Option<Self> {
        match words {
            0 => None,
            1..=100 => Some(Self::Short),
            101..=500 => Some(Self::Medium),
            501..=1000 => Some(Self::Long),
            1001..=MAX_TARGET_WORDS => Some(Self::VeryLong),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Short => "Short",
            Self::Medium => "Medium",
            Self::Long => "Long",
            Self::VeryLong => "VeryLong",
        }
    }
}

impl fmt::Display for LengthBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Inclusive interval of target lengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetRange {
    pub min: u32,
    pub max: u32,
}

impl TargetRange {
    pub fn new(min: u32, max: u32) -> Result<Self> {
        if min == 0 || min > max || max > MAX_TARGET_WORDS {
            return invalid(format!("target range [{min}, {max}] must satisfy 1 <= min <= max <= {MAX_TARGET_WORDS}"));
        }
        Ok(Self { min, max })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthTask {
    pub id: String,
    pub target_words: u32,
    pub bucket: LengthBucket,
    pub prompt_tokens: Vec<TokenId>,
}

/// `[BOS, SEP, zero-padded digits of c, SEP]`
pub fn encode_prompt(c: u32) -> Result<Vec<TokenId>> {
    if c == 0 || c > MAX_TARGET_WORDS {
        return invalid(format!("target {c} outside [1, {MAX_TARGET_WORDS}]"));
    }
    let digits = format!("{c:0width$}", width = TARGET_DIGITS);
    let mut prompt = vec![BOS, SEP];
    prompt.extend(digits.bytes().map(|b| digit_token(b - b'0')));
    prompt.push(SEP);
    Ok(prompt)
}

/// Inverse of [`encode_prompt`]; `None` if the prefix is not a well-formed prompt.
pub fn decode_prompt_target(tokens: &[TokenId]) -> Option<u32> {
    if tokens.len() < PROMPT_LEN || tokens[0] != BOS || tokens[1] != SEP || tokens[PROMPT_LEN - 1] != SEP {
        return None;
    }
    let mut c = 0u32;
    for &t in &tokens[2..PROMPT_LEN - 1] {
        if !(DIGIT_0..DIGIT_0 + 10).contains(&t) {
            return None;
        }
        c = c * 10 + (t - DIGIT_0);
    }
    (c > 0).then_some(c)
}

impl LengthTask {
    pub fn new(id: impl Into<String>, target_words: u32) -> Result<Self> {
        let prompt_tokens = encode_prompt(target_words)?;
        let bucket = LengthBucket::of(target_words).expect("encode_prompt bounds the target");
        Ok(Self { id: id.into(), target_words, bucket, prompt_tokens })
    }
}

pub fn make_task<R: Rng + ?Sized>(rng: &mut R, range: TargetRange) -> Result<LengthTask> {
    let range = TargetRange::new(range.min, range.max)?;
    let c = rng.random_range(range.min..=range.max);
    let id = format!("task-{:016x}", rng.next_u64());
    LengthTask::new(id, c)
}

/// `n` tasks from a fresh generator seeded with `seed`.
pub fn task_stream(seed: u64, range: TargetRange, n: usize) -> Result<Vec<LengthTask>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| make_task(&mut rng, range)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFixture {
    pub id: String,
    pub c: u32,
    pub bucket: LengthBucket,
}

pub fn write_task_fixtures<W: Write>(tasks: &[LengthTask], mut out: W) -> Result<()> {
    for t in tasks {
        let rec = TaskFixture { id: t.id.clone(), c: t.target_words, bucket: t.bucket };
        writeln!(out, "{}", serde_json::to_string(&rec)?)?;
    }
    Ok(())
}

pub fn read_task_fixtures<R: BufRead>(input: R) -> Result<Vec<LengthTask>> {
    let mut tasks = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TaskFixture = serde_json::from_str(&line)?;
        let task = LengthTask::new(rec.id, rec.c)?;
        if task.bucket != rec.bucket {
            return Err(Error::Format(format!("task {} has bucket {} but c={} is {}", task.id, rec.bucket, rec.c, task.bucket)));
        }
        tasks.push(task);
    }
    Ok(tasks)
}

pub fn load_task_fixtures(path: &Path) -> Result<Vec<LengthTask>> {
    read_task_fixtures(std::io::BufReader::new(std::fs::File::open(path)?))
}
