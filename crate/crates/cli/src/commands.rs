use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use larft::artifacts::{config_hash, sha256_file, write_json_pretty, RunLock, RunManifest, RunStatus};
use larft::client::{ChatClient, ChatEndpoint, RateLimiter};
use larft::datapipe::{self, CurationClient, LiveCurationClient, PipelineConfig, StubCurationClient};
use larft::evalbench::{self, JudgeClient, LiveJudge, QualityScores, StubJudge};
use larft::policy::SamplingConfig;
use larft::probing::{self, ProbeConfig};
use larft::textmetrics::{score_request, ScoreRequest, DEFAULT_LS_TOL};
use larft::toyenv::{task_stream, TargetRange, ToyVocabulary};
use larft::trainer::{self, RunOptions, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{read_config_file, resolve};
use crate::CliError;

pub const RUN_CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCORES_FILE: &str = "scores.jsonl";

fn config_err(e: larft::Error) -> CliError {
    CliError::Config(e.to_string())
}

fn file_config(path: Option<&Path>) -> Result<Option<Value>, CliError> {
    path.map(read_config_file).transpose()
}

fn flag<T: Serialize>(flags: &mut Vec<(&'static str, Value)>, path: &'static str, v: Option<T>) {
    if let Some(v) = v {
        flags.push((path, json!(v)));
    }
}

fn input_details(manifest: &mut RunManifest, key: &str, path: &Path) -> Result<(), CliError> {
    manifest.details.insert(key.into(), json!({ "path": path.display().to_string(), "sha256": sha256_file(path)? }));
    Ok(())
}

/// Runs `body` with the directory locked and a manifest that is finalized either way.
fn with_manifest<F>(dir: &Path, command: &str, hash: String, seed: u64, body: F) -> Result<(), CliError>
where
    F: FnOnce(&mut RunManifest) -> Result<(), CliError>,
{
    let _lock = RunLock::acquire(dir)?;
    let path = dir.join(MANIFEST_FILE);
    let mut m = RunManifest::start(command, hash, seed);
    m.write(&path)?;
    let r = body(&mut m);
    m.finish(if r.is_ok() { RunStatus::Completed } else { RunStatus::Failed });
    m.add_artifact(MANIFEST_FILE);
    m.write(&path)?;
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ClientKind {
    Stub,
    Live,
}

/// Serializes to the corpus language names used in pipeline configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Language {
    English,
    Chinese,
}

/// Settings shared by the live curation and judge clients. Endpoint and key come from the
/// environment, never from config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveClientConfig {
    pub requests_per_second: f64,
    pub timeout_s: u64,
    pub temperature: f64,
    pub max_tokens: u32,
}

fn live_chat(prefix: &str, cfg: &LiveClientConfig) -> Result<ChatClient, CliError> {
    let endpoint = ChatEndpoint::from_env(prefix, cfg.temperature, cfg.max_tokens, cfg.timeout_s).map_err(config_err)?;
    Ok(ChatClient::new(endpoint, RateLimiter::per_second(cfg.requests_per_second)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataBuildConfig {
    pub pipeline: PipelineConfig,
    pub client: ClientKind,
    pub live: LiveClientConfig,
}

impl Default for DataBuildConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            client: ClientKind::Stub,
            live: LiveClientConfig { requests_per_second: 2.0, timeout_s: 60, temperature: 0.0, max_tokens: 1024 },
        }
    }
}

#[derive(Debug, Args)]
pub struct DataBuildArgs {
    /// Line-delimited JSON corpus
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub client: Option<ClientKind>,
    /// Reply table for the stub client (JSON lines of {prompt_contains, reply})
    #[arg(long)]
    pub stub_table: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub language: Option<Language>,
    #[arg(long)]
    pub retries: Option<u32>,
}

pub fn data_build(a: &DataBuildArgs) -> Result<(), CliError> {
    let file = file_config(a.config.as_deref())?;
    let mut flags = Vec::new();
    flag(&mut flags, "client", a.client);
    flag(&mut flags, "pipeline.filter.language", a.language);
    flag(&mut flags, "pipeline.curation.retries", a.retries);
    let cfg: DataBuildConfig = resolve(&DataBuildConfig::default(), file.as_ref(), &flags)?;
    let client: Box<dyn CurationClient> = match cfg.client {
        ClientKind::Stub => {
            let table = a.stub_table.as_deref().ok_or_else(|| CliError::Config("client=stub needs --stub-table".into()))?;
            Box::new(StubCurationClient::from_jsonl(table)?)
        }
        ClientKind::Live => Box::new(LiveCurationClient { chat: live_chat("LARFT_CURATION", &cfg.live)? }),
    };
    let hash = config_hash(&cfg)?;
    with_manifest(&a.out, "data build", hash, 0, |m| {
        input_details(m, "corpus", &a.corpus)?;
        if let (ClientKind::Stub, Some(t)) = (cfg.client, &a.stub_table) {
            input_details(m, "stub_table", t)?;
        }
        write_json_pretty(&a.out.join(RUN_CONFIG_FILE), &cfg)?;
        m.add_artifact(RUN_CONFIG_FILE);
        let (stats, files) = datapipe::build_dataset(&a.corpus, client.as_ref(), &cfg.pipeline, &a.out)?;
        files.into_iter().for_each(|f| m.add_artifact(f));
        m.details.insert("records".into(), stats.records.into());
        println!(
            "input {}  stage1 dropped {}  extract dropped {}  unsuitable {}  quarantined {}  synth dropped {}  final dropped {}  records {}",
            stats.input,
            stats.stage1_dropped,
            stats.stage2_dropped,
            stats.stage3_unsuitable,
            stats.quarantined,
            stats.stage4_dropped,
            stats.stage5_dropped,
            stats.records
        );
        Ok(())
    })
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run directory
    #[arg(long)]
    pub out: PathBuf,
    /// Starting defaults: desk or full
    #[arg(long, default_value = "desk")]
    pub preset: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Peak awareness weight; 0 trains with the RL objective alone
    #[arg(long)]
    pub lambda_max: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub dataset_size: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub group_size: Option<usize>,
    /// Continue from the latest checkpoint in --out
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many steps, leaving the run resumable
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Print the resolved config and exit
    #[arg(long)]
    pub print_config: bool,
}

pub fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig, CliError> {
    let defaults = TrainConfig::preset(&a.preset).map_err(config_err)?;
    let file = file_config(a.config.as_deref())?;
    let mut flags = Vec::new();
    flag(&mut flags, "seed", a.seed);
    flag(&mut flags, "lambda_max", a.lambda_max);
    flag(&mut flags, "optimizer.learning_rate", a.lr);
    flag(&mut flags, "epochs", a.epochs);
    flag(&mut flags, "dataset_size", a.dataset_size);
    flag(&mut flags, "batch_size", a.batch_size);
    flag(&mut flags, "mini_batch_size", a.batch_size);
    flag(&mut flags, "group_size", a.group_size);
    let cfg: TrainConfig = resolve(&defaults, file.as_ref(), &flags)?;
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = resolve_train_config(a)?;
    if a.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let s = trainer::run_training(&cfg, &a.out, RunOptions { resume: a.resume, stop_after: a.stop_after })?;
    let metrics = trainer::read_metrics(&a.out.join(trainer::METRICS_FILE))?;
    let tail = &metrics[metrics.len().saturating_sub(50)..];
    let mean = tail.iter().map(|m| m.mean_reward).sum::<f64>() / tail.len().max(1) as f64;
    println!(
        "mode {}  steps {}/{}  mean reward (last {}) {:.4}  checkpoint {}",
        cfg.mode(),
        s.steps_completed,
        s.total_steps,
        tail.len(),
        mean,
        s.final_checkpoint.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    None,
    Stub,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub tol: f64,
    pub judge: JudgeKind,
    /// Scores the stub judge gives every response.
    pub stub_scores: QualityScores,
    pub retries: u32,
    pub live: LiveClientConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tol: DEFAULT_LS_TOL,
            judge: JudgeKind::None,
            stub_scores: QualityScores::uniform(3),
            retries: 2,
            live: LiveClientConfig {
                requests_per_second: 2.0,
                timeout_s: 120,
                temperature: evalbench::JUDGE_TEMPERATURE,
                max_tokens: evalbench::JUDGE_MAX_TOKENS,
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Bench case file; repeat for several families
    #[arg(long, required = true)]
    pub cases: Vec<PathBuf>,
    /// Generated outputs, JSON lines of {id, text}
    #[arg(long)]
    pub outputs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// LS tolerance as a fraction of the target
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, value_enum)]
    pub judge: Option<JudgeKind>,
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let file = file_config(a.config.as_deref())?;
    let mut flags = Vec::new();
    flag(&mut flags, "tol", a.tol);
    flag(&mut flags, "judge", a.judge);
    let cfg: EvalConfig = resolve(&EvalConfig::default(), file.as_ref(), &flags)?;
    if !(cfg.tol > 0.0 && cfg.tol <= 1.0) {
        return Err(CliError::Config(format!("tol: must lie in (0, 1], got {}", cfg.tol)));
    }
    let judge: Option<Box<dyn JudgeClient>> = match cfg.judge {
        JudgeKind::None => None,
        JudgeKind::Stub => Some(Box::new(StubJudge { entries: Vec::new(), default_scores: cfg.stub_scores })),
        JudgeKind::Live => Some(Box::new(LiveJudge { chat: live_chat("LARFT_JUDGE", &cfg.live)?, retries: cfg.retries })),
    };
    let hash = config_hash(&cfg)?;
    with_manifest(&a.out, "eval", hash, 0, |m| {
        let mut cases = Vec::new();
        for (i, p) in a.cases.iter().enumerate() {
            input_details(m, &format!("cases_{i}"), p)?;
            cases.extend(evalbench::load_cases(p)?);
        }
        input_details(m, "outputs", &a.outputs)?;
        let pairs = evalbench::pair_outputs(cases, evalbench::load_outputs(&a.outputs)?)?;
        let mut report = evalbench::evaluate_lengths(&pairs, cfg.tol)?;
        if let Some(j) = &judge {
            report = evalbench::attach_quality(report, &pairs, j.as_ref())?;
        }
        write_json_pretty(&a.out.join(RUN_CONFIG_FILE), &cfg)?;
        m.add_artifact(RUN_CONFIG_FILE);
        evalbench::write_report(&a.out, &report)?.into_iter().for_each(|f| m.add_artifact(f));
        print!("{}", evalbench::summary_table(&report));
        Ok(())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRunConfig {
    pub probe: ProbeConfig,
    pub examples: usize,
    pub c_range: TargetRange,
    pub sampling: SamplingConfig,
}

impl ProbeRunConfig {
    fn from_train(t: &TrainConfig) -> Self {
        Self { probe: ProbeConfig::default(), examples: 100, c_range: t.c_range, sampling: t.sampling }
    }
}

/// The training config of the run a checkpoint belongs to, if it can be found.
fn run_config_near(checkpoint: &Path) -> Result<Option<TrainConfig>, CliError> {
    let start = if checkpoint.is_dir() { Some(checkpoint) } else { checkpoint.parent() };
    for dir in start.into_iter().flat_map(|d| d.ancestors().take(2)) {
        let p = dir.join(trainer::CONFIG_FILE);
        if p.is_file() {
            return Ok(Some(serde_json::from_str(&fs::read_to_string(p)?)?));
        }
    }
    Ok(None)
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Run directory, policy checkpoint or training checkpoint. Target range and sampling
    /// default to the run's training config when one is found, else to the desk preset.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub examples: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn probe(a: &ProbeArgs) -> Result<(), CliError> {
    let file = file_config(a.config.as_deref())?;
    let mut flags = Vec::new();
    flag(&mut flags, "examples", a.examples);
    flag(&mut flags, "probe.folds", a.folds);
    flag(&mut flags, "probe.alpha", a.alpha);
    flag(&mut flags, "probe.seed", a.seed);
    let base = run_config_near(&a.checkpoint)?.unwrap_or_else(TrainConfig::desk);
    let cfg: ProbeRunConfig = resolve(&ProbeRunConfig::from_train(&base), file.as_ref(), &flags)?;
    TargetRange::new(cfg.c_range.min, cfg.c_range.max).map_err(|e| CliError::Config(format!("c_range: {e}")))?;
    cfg.sampling.validate().map_err(|e| CliError::Config(format!("sampling: {e}")))?;
    if !(cfg.probe.alpha > 0.0) {
        return Err(CliError::Config("probe.alpha: must be positive".into()));
    }
    let policy = trainer::load_tiny_policy(&a.checkpoint)?;
    let hash = config_hash(&cfg)?;
    with_manifest(&a.out, "probe", hash, cfg.probe.seed, |m| {
        let ck = if a.checkpoint.is_dir() { a.checkpoint.join(trainer::POLICY_FILE) } else { a.checkpoint.clone() };
        input_details(m, "checkpoint", &ck)?;
        let vocab = ToyVocabulary::new(policy.config().vocab_size)?;
        let tasks = task_stream(cfg.probe.seed, cfg.c_range, cfg.examples)?;
        let result = probing::probe_sweep(&policy, &tasks, &vocab, &cfg.sampling, &cfg.probe)?;
        write_json_pretty(&a.out.join(RUN_CONFIG_FILE), &cfg)?;
        m.add_artifact(RUN_CONFIG_FILE);
        probing::write_probe(&a.out, &result)?.into_iter().for_each(|f| m.add_artifact(f));
        print!("{}", probing::sparkline(&result));
        Ok(())
    })
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// JSON lines of {text, target_words, reference?}; `-` reads stdin
    #[arg(long, default_value = "-")]
    pub input: String,
    /// LS tolerance as a fraction of the target
    #[arg(long, default_value_t = DEFAULT_LS_TOL)]
    pub tol: f64,
    /// Write scores.jsonl and a manifest here instead of printing
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn score_lines<R: BufRead, W: Write>(input: R, tol: f64, mut out: W) -> Result<usize, CliError> {
    let mut n = 0;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req: ScoreRequest =
            serde_json::from_str(&line).map_err(|e| CliError::Runtime(format!("input line {}: {e}", i + 1)))?;
        let rec = score_request(&req, tol).map_err(|e| CliError::Runtime(format!("input line {}: {e}", i + 1)))?;
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
        n += 1;
    }
    out.flush()?;
    Ok(n)
}

pub fn score(a: &ScoreArgs) -> Result<(), CliError> {
    if !(a.tol > 0.0 && a.tol <= 1.0) {
        return Err(CliError::Config(format!("tol: must lie in (0, 1], got {}", a.tol)));
    }
    let input: Box<dyn BufRead> = if a.input == "-" {
        Box::new(BufReader::new(io::stdin()))
    } else {
        Box::new(BufReader::new(fs::File::open(&a.input)?))
    };
    match &a.out {
        None => {
            score_lines(input, a.tol, io::stdout().lock())?;
            Ok(())
        }
        Some(dir) => {
            let hash = config_hash(&json!({ "tol": a.tol }))?;
            with_manifest(dir, "score", hash, 0, |m| {
                if a.input != "-" {
                    input_details(m, "input", Path::new(&a.input))?;
                }
                let n = score_lines(input, a.tol, io::BufWriter::new(fs::File::create(dir.join(SCORES_FILE))?))?;
                m.add_artifact(SCORES_FILE);
                m.details.insert("records".into(), n.into());
                Ok(())
            })
        }
    }
}
