//! Length-constrained dataset construction: rule filtering, response extraction, curation,
//! instruction synthesis and a final consistency check.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::client::{extract_json_object, ChatClient};
use crate::error::{Error, Result};
use crate::textmetrics::count_words;
use crate::toyenv::{within_length_ceiling, LengthBucket, MAX_TARGET_WORDS};

pub const MIN_QUALITY: f64 = 9.0;

pub const DEFAULT_EXCLUDED_REPOSITORIES: [&str; 6] =
    ["Advanced-Math", "GSM8K_zh", "coig_exam", "kaoyan", "stem_zh/chem", "stem_zh/phy"];

/// Bucket sizes of the published 8,732-sample dataset, kept for comparison only.
pub const REFERENCE_BUCKET_COUNTS: [(LengthBucket, usize); 4] = [
    (LengthBucket::Short, 2156),
    (LengthBucket::Medium, 3421),
    (LengthBucket::Long, 1892),
    (LengthBucket::VeryLong, 1263),
];
pub const REFERENCE_TOTAL: usize = 8732;

pub const CURATION_PROMPT: &str = r#"Please determine whether a user input prompt is suitable for imposing or modifying to a fixed-length output constraint---that is, requiring the generated output to match a specific length (not "at least", "at most", "no more than", "no less than", etc.).

Follow these guidelines:

1. If the original prompt already contains any length, character, or word count requirements, proactively modify all such requirements to use an "{length}{unit}" length constraint.

2. If appropriate, and without changing the original meaning, tone, or adding any new requirements except for the explicit length constraint, insert an "{length}{unit}" length requirement at a natural position in the prompt.

3. Only use exact equality for the length constraint---do not allow expressions like "within", "at least", "no more than", "no less than", etc.

4. If the original prompt falls into any of these categories, it is NOT suitable: classification, POS tagging, NER, fill-in-the-blank, multiple choice, true/false, labeling, annotation, matching, ranking, scoring, synonym/antonym selection, error correction, information extraction, etc.

5. If the original prompt is for a task with inherently fixed/short creative expression, it is NOT suitable: poetry, couplets, riddles, lyrics, famous quotes, slogans, advertisements, titles, idioms, proverbs, etc.

6. For open-ended generation, creative writing, analytical or reasoning tasks, it is generally acceptable to add an exact length constraint.

Output in JSON format: explain (reasoning), suitable (boolean), modified_prompt (revised prompt if suitable)."#;

// Detector patterns. Each has a golden file of positives and negatives under fixtures/.
pub const CODE_PATTERN: &str = r"(?m)```|^\s*(?:def\s+\w+\s*\(|class\s+\w+\s*[:(]|import\s+[\w.]+|from\s+[\w.]+\s+import\s)|^(?: {4,}|\t+)\S[^\n]*[:;{}]\s*$";
pub const TABLE_PATTERN: &str = r"(?m)^[ \t]*\|[^\n]*\|[ \t]*\r?\n[ \t]*\|[^\n]*\|[ \t]*$";
pub const LATEX_PATTERN: &str = r"\$\$[\s\S]+?\$\$|\\\[[\s\S]+?\\\]|\\(?:frac|sqrt|sum|int|prod|lim|alpha|beta|gamma|theta|lambda|sigma|pi|infty|cdot|times|mathbb|mathrm|mathbf|begin|end|left|right)\b";
pub const HTML_PATTERN: &str = r"</?[a-zA-Z][a-zA-Z0-9]*(?:\s[^<>]*)?/?>|&(?:[a-zA-Z]{2,8}|#[0-9]{1,6}|#x[0-9a-fA-F]{1,6});";
pub const FOREIGN_PATTERN: &str = r"[\p{Han}\p{Hiragana}\p{Katakana}\p{Hangul}\p{Cyrillic}]";
/// Pipeline markup removed before detection so it cannot trip the HTML detector.
const MARKUP_PATTERN: &str = r"</?think>|</?response>|<\|im_start\|>(?:assistant|user|system)?|<\|im_end\|>";

fn re(p: &str) -> Regex {
    Regex::new(p).expect("detector pattern compiles")
}

static CODE_RE: LazyLock<Regex> = LazyLock::new(|| re(CODE_PATTERN));
static TABLE_RE: LazyLock<Regex> = LazyLock::new(|| re(TABLE_PATTERN));
static LATEX_RE: LazyLock<Regex> = LazyLock::new(|| re(LATEX_PATTERN));
static HTML_RE: LazyLock<Regex> = LazyLock::new(|| re(HTML_PATTERN));
static FOREIGN_RE: LazyLock<Regex> = LazyLock::new(|| re(FOREIGN_PATTERN));
static MARKUP_RE: LazyLock<Regex> = LazyLock::new(|| re(MARKUP_PATTERN));
static THINK_SPAN_RE: LazyLock<Regex> = LazyLock::new(|| re(r"(?s)<think>.*?</think>"));
static RESPONSE_RE: LazyLock<Regex> = LazyLock::new(|| re(r"(?s)<response>(.*?)</response>"));
static ROLE_MARKER_RE: LazyLock<Regex> = LazyLock::new(|| re(r"<\|im_start\|>\s*(?:assistant|user|system)?\s*|<\|im_end\|>"));
static CONSTRAINT_RE: LazyLock<Regex> = LazyLock::new(|| re(r"(\d+)\s*(?:words?\b|个字|字)"));
static INEXACT_RE: LazyLock<Regex> = LazyLock::new(|| {
    re(r"(?i)\b(?:at least|at most|no more than|no less than|not exceeding|or more|or fewer|or less|maximum of|minimum of|approximately|roughly)\b|\b(?:within|up to|about|around|under|over)\s+\d|不超过|至少|最多|以内|左右|大约")
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusLanguage {
    English,
    Chinese,
}

impl CorpusLanguage {
    /// Unit text substituted for `{unit}` after the count.
    pub fn unit(self) -> &'static str {
        match self {
            Self::English => " words",
            Self::Chinese => "字",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSample {
    pub id: String,
    pub source: String,
    pub prompt: String,
    pub response: String,
    #[serde(default)]
    pub quality_score: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentFlags {
    pub code: bool,
    pub table: bool,
    pub latex: bool,
    pub html: bool,
    pub foreign: bool,
}

impl ContentFlags {
    pub fn is_empty(&self) -> bool {
        self.names().is_empty()
    }

    /// Set flags in detector order.
    pub fn names(&self) -> Vec<&'static str> {
        [(self.code, "code"), (self.table, "table"), (self.latex, "latex"), (self.html, "html"), (self.foreign, "foreign")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect()
    }

    fn union(self, o: Self) -> Self {
        Self {
            code: self.code || o.code,
            table: self.table || o.table,
            latex: self.latex || o.latex,
            html: self.html || o.html,
            foreign: self.foreign || o.foreign,
        }
    }
}

/// Runs every detector. `foreign` fires on CJK or Cyrillic script; whether it matters
/// depends on the corpus language (see [`rule_filter`]).
pub fn detect_content_type(text: &str) -> ContentFlags {
    let view = MARKUP_RE.replace_all(text, " ");
    ContentFlags {
        code: CODE_RE.is_match(&view),
        table: TABLE_RE.is_match(&view),
        latex: LATEX_RE.is_match(&view),
        html: HTML_RE.is_match(&view),
        foreign: FOREIGN_RE.is_match(&view),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub excluded_repositories: Vec<String>,
    pub min_quality: f64,
    pub language: CorpusLanguage,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            excluded_repositories: DEFAULT_EXCLUDED_REPOSITORIES.iter().map(|s| s.to_string()).collect(),
            min_quality: MIN_QUALITY,
            language: CorpusLanguage::English,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Repository,
    Quality,
    Code,
    Table,
    Latex,
    Html,
    Foreign,
}

impl DropReason {
    pub fn name(self) -> &'static str {
        match self {
            Self::Repository => "repository",
            Self::Quality => "quality",
            Self::Code => "code",
            Self::Table => "table",
            Self::Latex => "latex",
            Self::Html => "html",
            Self::Foreign => "foreign",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterOutcome {
    Keep,
    Drop(DropReason),
}

fn repository_excluded(source: &str, excluded: &[String]) -> bool {
    excluded.iter().any(|ex| source == ex || source.strip_prefix(ex.as_str()).is_some_and(|rest| rest.starts_with('/')))
}

/// Applies the stage-1 rules in order and reports the first that fires.
pub fn rule_filter(sample: &RawSample, cfg: &FilterConfig) -> FilterOutcome {
    if repository_excluded(&sample.source, &cfg.excluded_repositories) {
        return FilterOutcome::Drop(DropReason::Repository);
    }
    if sample.quality_score.is_some_and(|q| q < cfg.min_quality) {
        return FilterOutcome::Drop(DropReason::Quality);
    }
    let flags = detect_content_type(&sample.prompt).union(detect_content_type(&sample.response));
    let ordered = [
        (flags.code, DropReason::Code),
        (flags.table, DropReason::Table),
        (flags.latex, DropReason::Latex),
        (flags.html, DropReason::Html),
        (flags.foreign && cfg.language == CorpusLanguage::English, DropReason::Foreign),
    ];
    match ordered.into_iter().find(|(on, _)| *on) {
        Some((_, reason)) => FilterOutcome::Drop(reason),
        None => FilterOutcome::Keep,
    }
}

fn extract_once(id: &str, raw: &str) -> Result<String> {
    let opens = raw.matches("<think>").count();
    let closes = raw.matches("</think>").count();
    if opens != closes {
        return Err(Error::Format(format!("sample {id}: unbalanced think tags ({opens} open, {closes} close)")));
    }
    let no_think = THINK_SPAN_RE.replace_all(raw, "");
    if no_think.contains("<think>") || no_think.contains("</think>") {
        return Err(Error::Format(format!("sample {id}: misordered think tags")));
    }
    let body = match RESPONSE_RE.captures(&no_think) {
        Some(c) => c[1].to_string(),
        None => no_think.into_owned(),
    };
    Ok(ROLE_MARKER_RE.replace_all(&body, "").trim().to_string())
}

/// Drops think spans, keeps the `<response>` body when present and strips role markers.
/// Repeats until nothing changes, since removing one marker can splice another together.
pub fn extract_response(id: &str, raw: &str) -> Result<String> {
    let mut cur = extract_once(id, raw)?;
    loop {
        let next = extract_once(id, &cur)?;
        if next == cur {
            return Ok(cur);
        }
        cur = next;
    }
}

/// Source of curation replies.
pub trait CurationClient {
    fn submit(&self, prompt: &str) -> Result<String>;
}

/// Replies looked up from a fixture table: the first entry whose `prompt_contains` occurs
/// in the embedded user prompt wins, otherwise `default_reply`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubCurationClient {
    pub entries: Vec<StubEntry>,
    pub default_reply: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubEntry {
    pub prompt_contains: String,
    pub reply: String,
}

impl StubCurationClient {
    pub fn from_jsonl(path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                entries.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { entries, default_reply: None })
    }
}

impl CurationClient for StubCurationClient {
    fn submit(&self, prompt: &str) -> Result<String> {
        let user = prompt.rsplit_once(USER_PROMPT_HEADER).map_or(prompt, |(_, u)| u);
        self.entries
            .iter()
            .find(|e| user.contains(&e.prompt_contains))
            .map(|e| e.reply.clone())
            .or_else(|| self.default_reply.clone())
            .ok_or_else(|| Error::Client("stub table has no reply for this prompt".into()))
    }
}

/// Live client over an OpenAI-compatible endpoint.
pub struct LiveCurationClient {
    pub chat: ChatClient,
}

impl CurationClient for LiveCurationClient {
    fn submit(&self, prompt: &str) -> Result<String> {
        self.chat.complete(prompt)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationDecision {
    pub explain: String,
    pub suitable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modified_prompt: Option<String>,
}

impl CurationDecision {
    /// Parses a reply, tolerating prose or code fences around the JSON object.
    pub fn parse(reply: &str) -> Result<Self> {
        let obj = extract_json_object(reply).ok_or_else(|| Error::Format("reply has no JSON object".into()))?;
        let v: serde_json::Value = serde_json::from_str(obj)?;
        let explain = v.get("explain").and_then(|x| x.as_str()).ok_or_else(|| Error::Format("reply lacks string field explain".into()))?;
        let suitable = v.get("suitable").and_then(|x| x.as_bool()).ok_or_else(|| Error::Format("reply lacks boolean field suitable".into()))?;
        let modified = v.get("modified_prompt").and_then(|x| x.as_str()).filter(|s| !s.trim().is_empty());
        if suitable && modified.is_none() {
            return Err(Error::Format("suitable reply lacks modified_prompt".into()));
        }
        Ok(Self { explain: explain.to_string(), suitable, modified_prompt: suitable.then(|| modified.unwrap().to_string()) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationConfig {
    /// Extra attempts after the first malformed reply or client failure.
    pub retries: u32,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self { retries: 2 }
    }
}

const USER_PROMPT_HEADER: &str = "\n\nUser prompt:\n";

/// Renders the curation prompt with the length constraint and the sample's prompt.
pub fn render_curation_prompt(sample_prompt: &str, length: u32, language: CorpusLanguage) -> String {
    let filled = CURATION_PROMPT.replace("{length}", &length.to_string()).replace("{unit}", language.unit());
    format!("{filled}{USER_PROMPT_HEADER}{sample_prompt}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuarantineRecord {
    pub id: String,
    pub reason: String,
    pub raw_replies: Vec<String>,
}

/// Submits the rendered prompt, retrying malformed replies; exhausting retries yields a
/// quarantine record carrying every raw reply.
pub fn curate(
    sample: &RawSample,
    length: u32,
    language: CorpusLanguage,
    client: &dyn CurationClient,
    cfg: &CurationConfig,
) -> std::result::Result<CurationDecision, QuarantineRecord> {
    let prompt = render_curation_prompt(&sample.prompt, length, language);
    let mut raw_replies = Vec::new();
    let mut last_err = String::new();
    for _ in 0..=cfg.retries {
        match client.submit(&prompt) {
            Ok(reply) => match CurationDecision::parse(&reply) {
                Ok(d) => return Ok(d),
                Err(e) => {
                    last_err = e.to_string();
                    raw_replies.push(reply);
                }
            },
            Err(e) => last_err = e.to_string(),
        }
    }
    Err(QuarantineRecord { id: sample.id.clone(), reason: last_err, raw_replies })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub prompt: String,
    pub reference: String,
    pub c: u32,
    pub bucket: LengthBucket,
}

impl DatasetRecord {
    pub fn verify(&self) -> Result<()> {
        let n = count_words(&self.reference);
        if n != self.c {
            return Err(Error::Format(format!("record {}: c={} but the reference has {n} words", self.id, self.c)));
        }
        if LengthBucket::of(self.c) != Some(self.bucket) {
            return Err(Error::Format(format!("record {}: bucket {} does not match c={}", self.id, self.bucket, self.c)));
        }
        Ok(())
    }
}

/// Builds the record with `c = count_words(response)`. A literal `{length}{unit}` left in
/// the modified prompt is filled in.
pub fn synthesize_record(sample: &RawSample, decision: &CurationDecision, response: &str, language: CorpusLanguage) -> Result<DatasetRecord> {
    if !decision.suitable {
        return Err(Error::InvalidInput(format!("sample {} was judged unsuitable", sample.id)));
    }
    let c = count_words(response);
    if c == 0 {
        return Err(Error::InvalidInput(format!("sample {}: response has no words", sample.id)));
    }
    if !within_length_ceiling(c) {
        return Err(Error::InvalidInput(format!("sample {}: c={c} is not below the {MAX_TARGET_WORDS}-word ceiling", sample.id)));
    }
    let bucket = LengthBucket::of(c).expect("positive c below the ceiling has a bucket");
    let prompt = decision
        .modified_prompt
        .as_deref()
        .unwrap_or_default()
        .replace("{length}", &c.to_string())
        .replace("{unit}", language.unit());
    Ok(DatasetRecord { id: sample.id.clone(), prompt, reference: response.to_string(), c, bucket })
}

/// Stage-5 check: every count constraint in the prompt equals `c`, at least one exists, and
/// no inexact phrasing appears.
pub fn consistency_check(record: &DatasetRecord) -> std::result::Result<(), String> {
    let counts: Vec<u64> = CONSTRAINT_RE.captures_iter(&record.prompt).filter_map(|m| m[1].parse().ok()).collect();
    if counts.is_empty() {
        return Err("prompt states no length constraint".into());
    }
    if let Some(bad) = counts.iter().find(|&&n| n != u64::from(record.c)) {
        return Err(format!("prompt asks for {bad} words but c={}", record.c));
    }
    if let Some(m) = INEXACT_RE.find(&record.prompt) {
        return Err(format!("prompt uses inexact phrasing {:?}", m.as_str()));
    }
    record.verify().map_err(|e| e.to_string())
}

/// Coherence hook for stage 5; accepts everything.
pub fn coherence_check(_record: &DatasetRecord) -> bool {
    true
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub filter: FilterConfig,
    pub curation: CurationConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildStats {
    pub input: usize,
    /// Unparseable corpus lines and repeated ids.
    pub invalid: usize,
    pub stage1_dropped: usize,
    pub stage1_reasons: BTreeMap<String, usize>,
    pub stage2_dropped: usize,
    pub stage3_unsuitable: usize,
    pub quarantined: usize,
    pub stage4_dropped: usize,
    pub stage5_dropped: usize,
    pub records: usize,
    pub buckets: BTreeMap<String, usize>,
}

impl BuildStats {
    pub fn accounted(&self) -> usize {
        self.invalid
            + self.stage1_dropped
            + self.stage2_dropped
            + self.stage3_unsuitable
            + self.quarantined
            + self.stage4_dropped
            + self.stage5_dropped
            + self.records
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLogEntry {
    pub line: usize,
    pub id: Option<String>,
    pub stage: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutput {
    pub records: Vec<DatasetRecord>,
    pub quarantine: Vec<QuarantineRecord>,
    pub log: Vec<StageLogEntry>,
    pub stats: BuildStats,
}

/// Runs every stage over corpus lines. Per-sample failures are logged and counted.
pub fn run_pipeline<R: BufRead>(corpus: R, client: &dyn CurationClient, cfg: &PipelineConfig) -> Result<BuildOutput> {
    let mut stats = BuildStats::default();
    for b in LengthBucket::ALL {
        stats.buckets.insert(b.name().to_string(), 0);
    }
    let mut records = Vec::new();
    let mut quarantine = Vec::new();
    let mut log = Vec::new();
    let mut seen = HashSet::new();
    let lang = cfg.filter.language;
    for (i, line) in corpus.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        stats.input += 1;
        let mut note = |id: Option<&str>, stage: &str, detail: String| {
            log.push(StageLogEntry { line: i + 1, id: id.map(str::to_string), stage: stage.into(), detail });
        };
        let sample: RawSample = match serde_json::from_str(&line) {
            Ok(s) => s,
            Err(e) => {
                stats.invalid += 1;
                note(None, "parse", e.to_string());
                continue;
            }
        };
        let id = sample.id.as_str();
        if !seen.insert(sample.id.clone()) {
            stats.invalid += 1;
            note(Some(id), "parse", "duplicate id".into());
            continue;
        }
        if let FilterOutcome::Drop(reason) = rule_filter(&sample, &cfg.filter) {
            stats.stage1_dropped += 1;
            *stats.stage1_reasons.entry(reason.name().to_string()).or_default() += 1;
            note(Some(id), "rule_filter", reason.name().into());
            continue;
        }
        let response = match extract_response(id, &sample.response) {
            Ok(r) => r,
            Err(e) => {
                stats.stage2_dropped += 1;
                note(Some(id), "extract", e.to_string());
                continue;
            }
        };
        let length = count_words(&response);
        let decision = match curate(&sample, length, lang, client, &cfg.curation) {
            Ok(d) => d,
            Err(q) => {
                stats.quarantined += 1;
                note(Some(id), "curate", q.reason.clone());
                quarantine.push(q);
                continue;
            }
        };
        if !decision.suitable {
            stats.stage3_unsuitable += 1;
            note(Some(id), "curate", format!("unsuitable: {}", decision.explain));
            continue;
        }
        let record = match synthesize_record(&sample, &decision, &response, lang) {
            Ok(r) => r,
            Err(e) => {
                stats.stage4_dropped += 1;
                note(Some(id), "synthesize", e.to_string());
                continue;
            }
        };
        if let Err(why) = consistency_check(&record) {
            stats.stage5_dropped += 1;
            note(Some(id), "final_filter", why);
            continue;
        }
        if !coherence_check(&record) {
            stats.stage5_dropped += 1;
            note(Some(id), "final_filter", "coherence".into());
            continue;
        }
        *stats.buckets.entry(record.bucket.name().to_string()).or_default() += 1;
        records.push(record);
    }
    stats.records = records.len();
    debug_assert_eq!(stats.accounted(), stats.input);
    Ok(BuildOutput { records, quarantine, log, stats })
}

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const QUARANTINE_FILE: &str = "quarantine.jsonl";
pub const STAGE_LOG_FILE: &str = "stage_log.jsonl";

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the pipeline on a corpus file and writes dataset, stats, quarantine and stage log
/// into `out_dir`. Returns the relative paths written.
pub fn build_dataset(corpus: &Path, client: &dyn CurationClient, cfg: &PipelineConfig, out_dir: &Path) -> Result<(BuildStats, Vec<String>)> {
    let out = run_pipeline(BufReader::new(File::open(corpus)?), client, cfg)?;
    fs::create_dir_all(out_dir)?;
    write_jsonl(&out_dir.join(DATASET_FILE), &out.records)?;
    write_jsonl(&out_dir.join(QUARANTINE_FILE), &out.quarantine)?;
    write_jsonl(&out_dir.join(STAGE_LOG_FILE), &out.log)?;
    crate::artifacts::write_json_pretty(&out_dir.join(STATS_FILE), &out.stats)?;
    let files = [DATASET_FILE, STATS_FILE, QUARANTINE_FILE, STAGE_LOG_FILE].map(String::from).to_vec();
    Ok((out.stats, files))
}

/// Loads a dataset, re-verifying `c == count_words(reference)` for every record.
pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: DatasetRecord = serde_json::from_str(&line)?;
        r.verify()?;
        out.push(r);
    }
    Ok(out)
}
