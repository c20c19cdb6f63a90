//! Length-following benchmarks over supplied outputs, and the quality-judge client.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::client::{extract_json_object, ChatClient};
use crate::error::{Error, Result};
use crate::textmetrics::{
    count_words, length_deviation, length_reward, longwrite_length_score, rouge_l_text, within_tolerance, LengthPair,
};
use crate::toyenv::{within_length_ceiling, MAX_TARGET_WORDS};

pub const REPORT_FORMAT_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.json";
pub const CASES_FILE: &str = "cases.jsonl";

/// Judge sampling settings for the live client.
pub const JUDGE_TEMPERATURE: f64 = 0.5;
pub const JUDGE_MAX_TOKENS: u32 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BenchFamily {
    #[serde(rename = "life-style")]
    LifeStyle,
    #[serde(rename = "longwrite-style")]
    LongwriteStyle,
    #[serde(rename = "lenctrl-style")]
    LenctrlStyle,
}

impl BenchFamily {
    pub const ALL: [BenchFamily; 3] = [Self::LifeStyle, Self::LongwriteStyle, Self::LenctrlStyle];

    pub fn name(self) -> &'static str {
        match self {
            Self::LifeStyle => "life-style",
            Self::LongwriteStyle => "longwrite-style",
            Self::LenctrlStyle => "lenctrl-style",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchCase {
    pub id: String,
    pub prompt: String,
    pub c: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    pub family: BenchFamily,
}

impl BenchCase {
    pub fn validate(&self) -> Result<()> {
        if self.c == 0 {
            return Err(Error::InvalidInput(format!("case {}: c must be at least 1", self.id)));
        }
        if !within_length_ceiling(self.c) {
            return Err(Error::InvalidInput(format!(
                "case {}: c={} rejected; evaluation is restricted to targets under {MAX_TARGET_WORDS} words, \
                 the output ceiling shared with dataset construction",
                self.id, self.c
            )));
        }
        if self.family == BenchFamily::LenctrlStyle && self.reference.as_deref().is_none_or(|r| count_words(r) == 0) {
            return Err(Error::InvalidInput(format!("case {}: lenctrl-style cases need a nonempty reference", self.id)));
        }
        Ok(())
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(v);
    }
    Ok(out)
}

/// Loads and validates a bench file; ids must be unique.
pub fn load_cases(path: &Path) -> Result<Vec<BenchCase>> {
    let cases: Vec<BenchCase> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    for c in &cases {
        c.validate()?;
        if !seen.insert(c.id.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate case id {}", c.id)));
        }
    }
    Ok(cases)
}

/// One generated response, keyed by case id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedOutput {
    pub id: String,
    pub text: String,
}

pub fn load_outputs(path: &Path) -> Result<Vec<GeneratedOutput>> {
    read_jsonl(path)
}

/// Matches outputs to cases by id. Every case needs exactly one output; extra outputs are errors.
pub fn pair_outputs(cases: Vec<BenchCase>, outputs: Vec<GeneratedOutput>) -> Result<Vec<(BenchCase, String)>> {
    let mut by_id: HashMap<String, String> = HashMap::new();
    for o in outputs {
        if by_id.insert(o.id.clone(), o.text).is_some() {
            return Err(Error::InvalidInput(format!("duplicate output for case {}", o.id)));
        }
    }
    let mut out = Vec::with_capacity(cases.len());
    for c in cases {
        let text = by_id.remove(&c.id).ok_or_else(|| Error::InvalidInput(format!("no output for case {}", c.id)))?;
        out.push((c, text));
    }
    if let Some(extra) = by_id.keys().min() {
        return Err(Error::InvalidInput(format!("output {extra} matches no case")));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub id: String,
    pub family: BenchFamily,
    pub c: u32,
    pub word_count: u32,
    pub abs_error: u32,
    pub deviation: f64,
    pub reward: f64,
    pub within_tol: bool,
    /// 0 for an empty response, the limit of the under-generation branch.
    pub s_l: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_q: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub cases: usize,
    pub ld_percent: f64,
    pub ls_percent: f64,
    pub mean_s_l: f64,
    pub mae: f64,
    pub mean_reward: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_q: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub tol: f64,
    pub overall: Aggregates,
    pub by_family: BTreeMap<BenchFamily, Aggregates>,
    /// Sorted by id.
    pub rows: Vec<CaseRow>,
}

pub fn score_case(case: &BenchCase, text: &str, tol: f64) -> Result<CaseRow> {
    case.validate()?;
    let pair = LengthPair::new(count_words(text), case.c)?;
    let s_l = if pair.actual == 0 { 0.0 } else { longwrite_length_score(pair.target, pair.actual)? };
    let rouge_l = match &case.reference {
        Some(r) => Some(rouge_l_text(text, r)?),
        None => None,
    };
    Ok(CaseRow {
        id: case.id.clone(),
        family: case.family,
        c: case.c,
        word_count: pair.actual,
        abs_error: pair.abs_error(),
        deviation: length_deviation(pair)?,
        reward: length_reward(pair)?,
        within_tol: within_tolerance(pair, tol)?,
        s_l,
        rouge_l,
        s_q: None,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, s) = xs.fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    (n > 0).then(|| s / n as f64)
}

/// Aggregates recomputed from rows alone.
pub fn aggregate_rows(rows: &[CaseRow]) -> Result<Aggregates> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("cannot aggregate zero cases".into()));
    }
    let n = rows.len() as f64;
    Ok(Aggregates {
        cases: rows.len(),
        ld_percent: 100.0 * rows.iter().map(|r| r.deviation).sum::<f64>() / n,
        ls_percent: 100.0 * rows.iter().filter(|r| r.within_tol).count() as f64 / n,
        mean_s_l: rows.iter().map(|r| r.s_l).sum::<f64>() / n,
        mae: rows.iter().map(|r| f64::from(r.abs_error)).sum::<f64>() / n,
        mean_reward: rows.iter().map(|r| r.reward).sum::<f64>() / n,
        rouge_l: mean(rows.iter().filter_map(|r| r.rouge_l)),
        s_q: mean(rows.iter().filter_map(|r| r.s_q)),
    })
}

fn assemble(mut rows: Vec<CaseRow>, tol: f64) -> Result<EvalReport> {
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = rows.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::InvalidInput(format!("duplicate case id {}", w[0].id)));
    }
    let overall = aggregate_rows(&rows)?;
    let mut by_family = BTreeMap::new();
    for fam in BenchFamily::ALL {
        let sub: Vec<CaseRow> = rows.iter().filter(|r| r.family == fam).cloned().collect();
        if !sub.is_empty() {
            by_family.insert(fam, aggregate_rows(&sub)?);
        }
    }
    Ok(EvalReport { format_version: REPORT_FORMAT_VERSION, tol, overall, by_family, rows })
}

/// Scores every (case, output) pair. Rows are sorted by id, so case order never matters.
pub fn evaluate_lengths(outputs: &[(BenchCase, String)], tol: f64) -> Result<EvalReport> {
    if outputs.is_empty() {
        return Err(Error::InvalidInput("evaluation needs at least one output".into()));
    }
    if !(tol > 0.0 && tol <= 1.0) {
        return Err(Error::InvalidInput(format!("tolerance must lie in (0, 1], got {tol}")));
    }
    let rows = outputs.iter().map(|(c, t)| score_case(c, t, tol)).collect::<Result<Vec<_>>>()?;
    assemble(rows, tol)
}

/// Adds judge scores to each row and recomputes the aggregates.
pub fn attach_quality(report: EvalReport, outputs: &[(BenchCase, String)], judge: &dyn JudgeClient) -> Result<EvalReport> {
    let mut sq: HashMap<&str, f64> = HashMap::new();
    for (case, text) in outputs {
        sq.insert(case.id.as_str(), aggregate_quality(&judge.judge(&case.prompt, text)?)?);
    }
    let mut rows = report.rows;
    for r in &mut rows {
        r.s_q = sq.get(r.id.as_str()).copied();
    }
    assemble(rows, report.tol)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityScores {
    pub relevance: u8,
    pub accuracy: u8,
    pub coherence: u8,
    pub clarity: u8,
    pub breadth_and_depth: u8,
    pub reading_experience: u8,
}

impl QualityScores {
    pub fn uniform(v: u8) -> Self {
        Self { relevance: v, accuracy: v, coherence: v, clarity: v, breadth_and_depth: v, reading_experience: v }
    }

    pub fn dimensions(&self) -> [(&'static str, u8); 6] {
        [
            ("relevance", self.relevance),
            ("accuracy", self.accuracy),
            ("coherence", self.coherence),
            ("clarity", self.clarity),
            ("breadth_and_depth", self.breadth_and_depth),
            ("reading_experience", self.reading_experience),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        match self.dimensions().into_iter().find(|(_, v)| !(1..=5).contains(v)) {
            Some((name, v)) => Err(Error::InvalidInput(format!("quality dimension {name}={v} is outside 1..=5"))),
            None => Ok(()),
        }
    }
}

/// `100 * (mean - 1) / 4`, mapping all-1 to 0 and all-5 to 100.
pub fn aggregate_quality(scores: &QualityScores) -> Result<f64> {
    scores.validate()?;
    let sum: u32 = scores.dimensions().iter().map(|(_, v)| u32::from(*v)).sum();
    Ok(100.0 * (f64::from(sum) / 6.0 - 1.0) / 4.0)
}

pub trait JudgeClient {
    fn judge(&self, prompt: &str, response: &str) -> Result<QualityScores>;
}

/// Scores looked up by response substring, falling back to `default_scores`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubJudge {
    pub entries: Vec<(String, QualityScores)>,
    pub default_scores: QualityScores,
}

impl Default for StubJudge {
    fn default() -> Self {
        Self { entries: Vec::new(), default_scores: QualityScores::uniform(3) }
    }
}

impl JudgeClient for StubJudge {
    fn judge(&self, _prompt: &str, response: &str) -> Result<QualityScores> {
        let s = self.entries.iter().find(|(k, _)| response.contains(k.as_str())).map_or(self.default_scores, |(_, s)| *s);
        s.validate()?;
        Ok(s)
    }
}

pub const JUDGE_PROMPT: &str = "Rate the response to the instruction below on six dimensions, each an integer from 1 to 5: \
relevance, accuracy, coherence, clarity, breadth_and_depth, reading_experience. \
Reply with one JSON object whose keys are exactly those six names.";

pub fn render_judge_prompt(prompt: &str, response: &str) -> String {
    format!("{JUDGE_PROMPT}\n\n[Instruction]\n{prompt}\n\n[Response]\n{response}")
}

pub fn parse_judge_reply(reply: &str) -> Result<QualityScores> {
    let obj = extract_json_object(reply).ok_or_else(|| Error::Format("judge reply has no JSON object".into()))?;
    let s: QualityScores = serde_json::from_str(obj)?;
    s.validate()?;
    Ok(s)
}

pub struct LiveJudge {
    pub chat: ChatClient,
    pub retries: u32,
}

impl JudgeClient for LiveJudge {
    fn judge(&self, prompt: &str, response: &str) -> Result<QualityScores> {
        let text = render_judge_prompt(prompt, response);
        let mut last = Error::Client("judge was never called".into());
        for _ in 0..=self.retries {
            match self.chat.complete(&text).and_then(|r| parse_judge_reply(&r)) {
                Ok(s) => return Ok(s),
                Err(e) => last = e,
            }
        }
        Err(last)
    }
}

/// Writes `report.json` (everything but the rows) and `cases.jsonl` (one row per line).
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut head = serde_json::to_value(report)?;
    if let Some(obj) = head.as_object_mut() {
        obj.remove("rows");
    }
    crate::artifacts::write_json_pretty(&dir.join(REPORT_FILE), &head)?;
    let mut w = BufWriter::new(File::create(dir.join(CASES_FILE))?);
    for r in &report.rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(vec![REPORT_FILE.to_string(), CASES_FILE.to_string()])
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

/// Fixed-order summary: overall first, then families in declaration order.
pub fn summary_table(report: &EvalReport) -> String {
    let mut out = format!(
        "{:<16} {:>5} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "family", "n", "LD%", "LS%", "S_l", "MAE", "ROUGE-L", "S_q"
    );
    let mut line = |name: &str, a: &Aggregates| {
        out.push_str(&format!(
            "{:<16} {:>5} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>8} {:>8}\n",
            name,
            a.cases,
            a.ld_percent,
            a.ls_percent,
            a.mean_s_l,
            a.mae,
            opt(a.rouge_l),
            opt(a.s_q)
        ));
    };
    line("overall", &report.overall);
    for fam in BenchFamily::ALL {
        if let Some(a) = report.by_family.get(&fam) {
            line(fam.name(), a);
        }
    }
    out
}
