//! Command implementations behind the `cosched` binary.
//!
//! Every command writes into one output directory and finishes with a
//! `manifest.json` listing each artifact and its SHA-256. Payloads carry no
//! timestamps or paths, so equal inputs give byte-identical directories.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cosched::comm::{sweep_alpha, write_sim_csv, LayerSim, SimConfig, SimMode, Simulator};
use cosched::plan::{build_plan, SolverKind};
use cosched::predictor::{
    activation_kurtosis, build_confidence_table, build_ngram_table, evaluate_predictor, KurtosisSummary,
    PredictorReport,
};
use cosched::scheduler::{bundle_memory_bytes, LookupBundle, MemoryReport};
use cosched::solver::{vanilla_expert_layout, SolverConfig};
use cosched::tables::{Table, TableData};
use cosched::trace::{
    ingest_profile, synthesize_planted_profile, write_trace, EmbeddingTable, PlantedConfig, RequestTrace,
    TokenExpertMatrix, ValidationReport,
};
use cosched::{ClusterId, Error, Topology};

pub const MANIFEST: &str = "manifest.json";
pub const BUNDLE: &str = "bundle.cslb";
pub const BUNDLE_VANILLA: &str = "bundle_vanilla.cslb";
pub const SOLVE_SUMMARY: &str = "solve.json";

#[derive(Debug, Parser)]
#[command(name = "cosched", version, about = "Token/expert co-scheduling for expert-parallel MoE inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a planted activation profile with ground-truth labels.
    Synth(SynthArgs),
    /// Validate a JSONL trace and dump its per-layer count matrices.
    Ingest(IngestArgs),
    /// Solve every layer and emit the lookup bundles.
    Solve(SolveArgs),
    /// Train the confidence predictor on a split and score it on the rest.
    Evaluate(EvaluateArgs),
    /// Replay the holdout split under the three execution modes.
    Simulate(SimulateArgs),
    /// Tabulate analytic communication volumes over alpha.
    Sweep(SweepArgs),
}

/// Exit code for a failed command: 2 when the root cause is I/O, else 1.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            if e.is_io() {
                return 2;
            }
        }
    }
    1
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a.resolve()?),
        Command::Ingest(a) => cmd_ingest(a.resolve()?),
        Command::Solve(a) => cmd_solve(a.resolve()?),
        Command::Evaluate(a) => cmd_evaluate(a.resolve()?),
        Command::Simulate(a) => cmd_simulate(a.resolve()?),
        Command::Sweep(a) => cmd_sweep(a.resolve()?),
    }
}

/// Overlays the keys of a TOML file onto already-parsed flags.
fn merge_config<T: Serialize + DeserializeOwned>(args: &T, config: Option<&Path>) -> Result<T> {
    let Some(path) = config else {
        return Ok(serde_json::from_value(serde_json::to_value(args)?)?);
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("config: {e}")))?;
    let mut value = serde_json::to_value(args)?;
    let obj = value.as_object_mut().expect("argument structs serialize to objects");
    for (key, v) in table {
        if !obj.contains_key(&key) {
            return Err(Error::InvalidConfig(format!("unknown config key '{key}'")).into());
        }
        obj.insert(key, serde_json::to_value(v)?);
    }
    serde_json::from_value(value).map_err(|e| Error::InvalidConfig(format!("config: {e}")).into())
}

macro_rules! resolvable {
    ($($t:ty),*) => {$(
        impl $t {
            pub fn resolve(&self) -> Result<Self> {
                let mut out = merge_config(self, self.config.as_deref())?;
                out.config = self.config.clone();
                Ok(out)
            }
        }
    )*};
}

fn require_seed(seed: Option<u64>) -> Result<u64> {
    seed.ok_or_else(|| Error::InvalidConfig("a seed is required (--seed or `seed` in the config)".into()).into())
}

fn read_topology(path: &Path) -> Result<Topology> {
    let text = fs::read_to_string(path).with_context(|| format!("reading topology {}", path.display()))?;
    let topo: Topology = text.parse()?;
    topo.validate()?;
    Ok(topo)
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{what} {} does not exist", path.display()),
        ))
        .context(format!("missing {what}"));
    }
    Ok(())
}

/// Output directory that tracks what it has written.
struct OutDir {
    root: PathBuf,
    files: Vec<String>,
}

impl OutDir {
    fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self { root: root.to_path_buf(), files: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn write_with(&mut self, name: &str, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }

    fn finish(mut self) -> Result<()> {
        self.files.sort();
        self.files.dedup();
        let mut entries = Vec::with_capacity(self.files.len());
        for name in &self.files {
            let bytes = fs::read(self.root.join(name))?;
            entries.push(ManifestEntry {
                path: name.clone(),
                bytes: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let manifest = Manifest { artifacts: entries };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = self.root.join(MANIFEST);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifacts: Vec<ManifestEntry>,
}

fn report_time(cmd: &str, start: Instant) {
    eprintln!("{cmd}: {:.3} s", start.elapsed().as_secs_f64());
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub devices: usize,
    /// Expert clusters; defaults to the device count.
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long, default_value_t = 16)]
    pub experts: usize,
    #[arg(long, default_value_t = 2)]
    pub top_k: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 400)]
    pub vocab: usize,
    #[arg(long, default_value_t = 50)]
    pub tokens_per_cluster: usize,
    /// Probability that a routing slot leaves the token's own block.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 64)]
    pub requests: usize,
    #[arg(long, default_value_t = 32)]
    pub request_len: usize,
    /// Draw every request from a single cluster.
    #[arg(long)]
    pub pure_requests: bool,
    #[arg(long, default_value_t = 16)]
    pub embedding_dim: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML file whose keys override the flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct SynthSummary {
    seed: u64,
    noise: f64,
    topology: Topology,
    planted_tokens: usize,
    requests: usize,
    request_len: usize,
    pure_requests: bool,
    occurrences: usize,
}

pub fn cmd_synth(args: SynthArgs) -> Result<()> {
    let start = Instant::now();
    let seed = require_seed(args.seed)?;
    let mut topology = Topology::new(args.devices, args.experts, args.top_k, args.layers, args.vocab);
    if let Some(e) = args.clusters {
        topology = topology.with_clusters(e);
    }
    let mut cfg = PlantedConfig::new(topology, args.noise, args.tokens_per_cluster, seed);
    cfg.requests = args.requests;
    cfg.request_len = args.request_len;
    cfg.pure_requests = args.pure_requests;
    cfg.embedding_dim = args.embedding_dim;
    let profile = synthesize_planted_profile(&cfg)?;

    let mut out = OutDir::create(&args.out)?;
    out.write("topology.txt", topology.to_string().as_bytes())?;
    out.write_with("trace.jsonl", |w| Ok(write_trace(&profile.trace, BufWriter::new(w))?))?;
    out.write("embeddings.bin", &profile.embeddings.encode_binary())?;
    out.write_with("token_labels.csv", |w| {
        writeln!(w, "token,cluster")?;
        for &tok in &profile.planted_tokens {
            writeln!(w, "{tok},{}", profile.token_labels[tok as usize])?;
        }
        Ok(())
    })?;
    out.write_with("expert_labels.csv", |w| {
        writeln!(w, "layer,expert,cluster")?;
        for (layer, labels) in profile.expert_labels.iter().enumerate() {
            for (x, c) in labels.iter().enumerate() {
                writeln!(w, "{layer},{x},{c}")?;
            }
        }
        Ok(())
    })?;
    out.write_with("request_labels.csv", |w| {
        writeln!(w, "request,cluster")?;
        for (r, c) in profile.request_labels.iter().enumerate() {
            writeln!(w, "{r},{c}")?;
        }
        Ok(())
    })?;
    out.write_json(
        "synth.json",
        &SynthSummary {
            seed,
            noise: args.noise,
            topology,
            planted_tokens: profile.planted_tokens.len(),
            requests: args.requests,
            request_len: args.request_len,
            pure_requests: args.pure_requests,
            occurrences: profile.trace.total_tokens(),
        },
    )?;
    out.finish()?;
    report_time("synth", start);
    Ok(())
}

// ---------------------------------------------------------------- ingest

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct IngestArgs {
    /// JSONL routing trace.
    #[arg(long)]
    pub trace: PathBuf,
    /// Topology file (`key=value` lines).
    #[arg(long)]
    pub topology: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct IngestLayer {
    layer: usize,
    tokens: usize,
    total: u64,
    max_freq: u64,
    validation: ValidationReport,
    kurtosis: KurtosisSummary,
}

#[derive(Debug, Serialize)]
struct IngestSummary {
    topology: Topology,
    requests: usize,
    routed_requests: usize,
    occurrences: usize,
    layers: Vec<IngestLayer>,
}

/// Count matrix as a `u32` table: column 0 is the token id, then one column
/// per expert.
fn matrix_table(m: &TokenExpertMatrix) -> Result<Table> {
    let cols = m.n_experts + 1;
    let mut data = Vec::with_capacity(m.n_tokens() * cols);
    for (j, &tok) in m.token_ids.iter().enumerate() {
        data.push(tok);
        data.extend_from_slice(m.row(j));
    }
    Ok(Table::new(m.n_tokens(), cols, TableData::U32(data))?)
}

pub fn cmd_ingest(args: IngestArgs) -> Result<()> {
    let start = Instant::now();
    require_file(&args.trace, "trace")?;
    let topology = read_topology(&args.topology)?;
    let profile = ingest_profile(&args.trace, &topology)?;
    let mut layers = Vec::with_capacity(profile.matrices.len());
    let mut invalid = Vec::new();
    for m in &profile.matrices {
        let validation = m.validate();
        if !validation.is_valid() {
            invalid.push(m.layer);
        }
        layers.push(IngestLayer {
            layer: m.layer,
            tokens: m.n_tokens(),
            total: m.total,
            max_freq: m.max_freq(),
            validation,
            kurtosis: KurtosisSummary::from_values(&activation_kurtosis(m)),
        });
    }
    let mut out = OutDir::create(&args.out)?;
    for m in &profile.matrices {
        out.write(&format!("layer_{}.cstb", m.layer), &matrix_table(m)?.encode())?;
    }
    let routed = profile.trace.requests.iter().filter(|r| !r.routes.is_empty()).count();
    out.write_json(
        "ingest.json",
        &IngestSummary {
            topology,
            requests: profile.trace.requests.len(),
            routed_requests: routed,
            occurrences: profile.trace.total_tokens(),
            layers,
        },
    )?;
    out.finish()?;
    report_time("ingest", start);
    if !invalid.is_empty() {
        bail!(Error::InvalidConfig(format!("layers {invalid:?} failed validation")));
    }
    Ok(())
}

// ---------------------------------------------------------------- solve

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SolveArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub topology: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// ceo | alternating | kmeans | round_robin | bruteforce
    #[arg(long, default_value = "ceo")]
    pub solver: SolverKind,
    /// Token embeddings (binary or CSV) for out-of-profile tokens.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Fraction of requests used for solving; the rest is the evaluation split.
    #[arg(long, default_value_t = 1.0)]
    pub split: f64,
    /// Device n-gram depth (0 disables the n-gram table).
    #[arg(long, default_value_t = 1)]
    pub ngram: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub n_steps: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub ft_steps: Option<usize>,
    #[arg(long)]
    pub alpha_e: Option<f64>,
    #[arg(long)]
    pub beta_e: Option<f64>,
    #[arg(long)]
    pub gamma_e: Option<f64>,
    #[arg(long)]
    pub alpha_r: Option<f64>,
    #[arg(long)]
    pub beta_r: Option<f64>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

impl SolveArgs {
    pub fn solver_config(&self, seed: u64) -> SolverConfig {
        let d = SolverConfig::default();
        SolverConfig {
            theta: self.theta.unwrap_or(d.theta),
            n_steps: self.n_steps.unwrap_or(d.n_steps),
            samples: self.samples.unwrap_or(d.samples),
            rho: self.rho.unwrap_or(d.rho),
            restarts: self.restarts.unwrap_or(d.restarts),
            beta: self.beta.unwrap_or(d.beta),
            eta: self.eta.unwrap_or(d.eta),
            ft_steps: self.ft_steps.unwrap_or(d.ft_steps),
            alpha_e: self.alpha_e.unwrap_or(d.alpha_e),
            beta_e: self.beta_e.unwrap_or(d.beta_e),
            gamma_e: self.gamma_e.unwrap_or(d.gamma_e),
            alpha_r: self.alpha_r.unwrap_or(d.alpha_r),
            beta_r: self.beta_r.unwrap_or(d.beta_r),
            seed,
            ..d
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveLayer {
    pub layer: usize,
    pub objective: f64,
    pub l1: f64,
    pub l2: f64,
    pub lar: f64,
    pub imbalance: f64,
    pub constraint_violations: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveSummary {
    pub solver: SolverKind,
    pub seed: u64,
    pub split: f64,
    pub ngram: usize,
    pub train_requests: usize,
    pub holdout_requests: usize,
    pub topology: Topology,
    pub config: SolverConfig,
    pub layers: Vec<SolveLayer>,
    pub mean_lar: f64,
    pub mean_imbalance: f64,
    pub memory: MemoryReportJson,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MemoryReportJson {
    pub token_labels: u64,
    pub token_confidence: u64,
    pub ngram: u64,
    pub experts: u64,
    pub total: u64,
}

impl From<MemoryReport> for MemoryReportJson {
    fn from(m: MemoryReport) -> Self {
        Self {
            token_labels: m.token_labels,
            token_confidence: m.token_confidence,
            ngram: m.ngram,
            experts: m.experts,
            total: m.total,
        }
    }
}

/// Train and evaluation halves of a trace. A split of 1 trains and
/// evaluates on the whole trace.
pub fn split_trace(trace: &RequestTrace, split: f64, seed: u64) -> Result<(RequestTrace, RequestTrace)> {
    if split >= 1.0 {
        return Ok((trace.clone(), trace.clone()));
    }
    Ok(trace.split(split, seed)?)
}

pub fn cmd_solve(args: SolveArgs) -> Result<()> {
    let start = Instant::now();
    let seed = require_seed(args.seed)?;
    require_file(&args.trace, "trace")?;
    let topology = read_topology(&args.topology)?;
    let embeddings = match &args.embeddings {
        Some(p) => {
            require_file(p, "embeddings")?;
            Some(EmbeddingTable::read(p)?)
        }
        None => None,
    };
    let config = args.solver_config(seed);
    config.validate()?;

    let profile = ingest_profile(&args.trace, &topology)?;
    let (train, holdout) = split_trace(&profile.trace, args.split, seed)?;
    if train.requests.is_empty() {
        bail!(Error::EmptyInput("training split is empty".into()));
    }
    let matrices = if args.split >= 1.0 { profile.matrices } else { train.layer_matrices()? };
    let plan = build_plan(&matrices, &train, &topology, args.solver, &config, args.ngram, embeddings.as_ref())?;

    let memory = bundle_memory_bytes(&plan.solved.shape());
    let layers: Vec<SolveLayer> = plan
        .layers
        .iter()
        .map(|l| SolveLayer {
            layer: l.layer,
            objective: l.objective.combined,
            l1: l.objective.l1,
            l2: l.objective.l2,
            lar: l.lar,
            imbalance: l.imbalance,
            constraint_violations: l.constraint_violations.clone(),
        })
        .collect();
    let n = layers.len().max(1) as f64;
    let summary = SolveSummary {
        solver: args.solver,
        seed,
        split: args.split,
        ngram: plan.solved.ngram_n(),
        train_requests: train.requests.len(),
        holdout_requests: if args.split >= 1.0 { 0 } else { holdout.requests.len() },
        topology,
        config,
        mean_lar: layers.iter().map(|l| l.lar).sum::<f64>() / n,
        mean_imbalance: layers.iter().map(|l| l.imbalance).sum::<f64>() / n,
        layers,
        memory: memory.into(),
    };

    let mut out = OutDir::create(&args.out)?;
    out.write(BUNDLE, &plan.solved.encode())?;
    out.write(BUNDLE_VANILLA, &plan.vanilla.encode())?;
    let assignments: Vec<_> = plan.layers.iter().map(|l| &l.assignment).collect();
    out.write_json("assignments.json", &assignments)?;
    out.write_json(SOLVE_SUMMARY, &summary)?;
    out.finish()?;
    report_time("solve", start);
    Ok(())
}

// ---------------------------------------------------------------- evaluate

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub topology: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of requests used for training, in (0, 1).
    #[arg(long, default_value_t = 0.25)]
    pub split: f64,
    /// Device n-gram depth scored on the holdout (0 skips it).
    #[arg(long, default_value_t = 1)]
    pub ngram: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct EvaluateLayer {
    layer: usize,
    report: PredictorReport,
    kurtosis: KurtosisSummary,
}

#[derive(Debug, Serialize)]
struct NGramScore {
    n: usize,
    /// Holdout transitions whose history row was seen in training.
    covered: u64,
    transitions: u64,
    /// Share of covered transitions where the row's best device is right.
    accuracy: f64,
}

#[derive(Debug, Serialize)]
struct EvaluateSummary {
    seed: u64,
    split: f64,
    train_requests: usize,
    holdout_requests: usize,
    layers: Vec<EvaluateLayer>,
    precision: f64,
    recall: f64,
    f1: f64,
    ngram: Option<NGramScore>,
}

fn score_ngram(
    train: &RequestTrace,
    holdout: &RequestTrace,
    layouts: &[Vec<ClusterId>],
    e: usize,
    n: usize,
) -> Result<NGramScore> {
    let table = build_ngram_table(train, layouts, e, n)?;
    let (mut covered, mut transitions, mut correct) = (0u64, 0u64, 0u64);
    for req in &holdout.requests {
        if req.routes.is_empty() {
            continue;
        }
        for pos in 0..req.tokens.len() {
            let devices: Vec<ClusterId> = (0..holdout.n_layers)
                .map(|l| layouts[l][holdout.experts(req, pos, l)[0] as usize])
                .collect();
            for l in n..holdout.n_layers {
                transitions += 1;
                let row = table.row_index(&devices[l - n..l]);
                if table.observed(row) {
                    covered += 1;
                    if table.best[row] == devices[l] {
                        correct += 1;
                    }
                }
            }
        }
    }
    Ok(NGramScore {
        n,
        covered,
        transitions,
        accuracy: if covered == 0 { 0.0 } else { correct as f64 / covered as f64 },
    })
}

pub fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let start = Instant::now();
    let seed = require_seed(args.seed)?;
    if !(args.split > 0.0 && args.split < 1.0) {
        bail!(Error::InvalidConfig(format!("split {} outside (0, 1)", args.split)));
    }
    require_file(&args.trace, "trace")?;
    let topology = read_topology(&args.topology)?;
    let profile = ingest_profile(&args.trace, &topology)?;
    let (train, holdout) = profile.trace.split(args.split, seed)?;
    if train.requests.is_empty() || holdout.requests.is_empty() {
        bail!(Error::EmptyInput(format!(
            "split {} leaves {} training and {} holdout requests",
            args.split,
            train.requests.len(),
            holdout.requests.len()
        )));
    }
    let train_m = train.layer_matrices()?;
    let hold_m = holdout.layer_matrices()?;
    let mut layers = Vec::with_capacity(train_m.len());
    let (mut predicted, mut correct, mut events) = (0u64, 0u64, 0u64);
    for (tm, hm) in train_m.iter().zip(&hold_m) {
        let conf = build_confidence_table(tm);
        let report = evaluate_predictor(&conf, hm, topology.top_k)?;
        predicted += report.predicted_events;
        correct += report.correct_events;
        events += report.holdout_events;
        layers.push(EvaluateLayer {
            layer: tm.layer,
            report,
            kurtosis: KurtosisSummary::from_values(&activation_kurtosis(tm)),
        });
    }
    let precision = if predicted == 0 { 0.0 } else { correct as f64 / predicted as f64 };
    let recall = if events == 0 { 0.0 } else { correct as f64 / events as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    let ngram = if args.ngram > 0 && args.ngram < topology.layers {
        let layouts = vec![vanilla_expert_layout(topology.experts, topology.clusters); topology.layers];
        Some(score_ngram(&train, &holdout, &layouts, topology.clusters, args.ngram)?)
    } else {
        None
    };
    let summary = EvaluateSummary {
        seed,
        split: args.split,
        train_requests: train.requests.len(),
        holdout_requests: holdout.requests.len(),
        layers,
        precision,
        recall,
        f1,
        ngram,
    };
    let mut out = OutDir::create(&args.out)?;
    out.write_json("evaluate.json", &summary)?;
    out.finish()?;
    report_time("evaluate", start);
    Ok(())
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub topology: PathBuf,
    /// Output directory of a previous `solve`.
    #[arg(long)]
    pub solve_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Requests per batch; defaults to the topology's `B`.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Feed the n-gram with true devices instead of predictions.
    #[arg(long)]
    pub oracle_history: bool,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeAggregate {
    pub mode: SimMode,
    pub tokens: u64,
    pub local_events: u64,
    pub remote_tokens: u64,
    pub alpha: f64,
    pub padding_slots: u64,
    pub volume_total: f64,
    /// `(ds_moe - mode) / ds_moe` over the summed volumes.
    pub saving: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimSummary {
    pub seed: u64,
    pub split: f64,
    pub requests: usize,
    pub batch_size: usize,
    pub oracle_history: bool,
    pub aggregate: Vec<ModeAggregate>,
}

pub fn aggregate_modes(rows: &[LayerSim]) -> Vec<ModeAggregate> {
    let mut aggs: Vec<ModeAggregate> = SimMode::ALL
        .iter()
        .map(|&mode| {
            let mut a = ModeAggregate {
                mode,
                tokens: 0,
                local_events: 0,
                remote_tokens: 0,
                alpha: 0.0,
                padding_slots: 0,
                volume_total: 0.0,
                saving: 0.0,
            };
            for r in rows.iter().filter(|r| r.mode == mode) {
                a.tokens += r.tokens;
                a.local_events += r.local_events;
                a.remote_tokens += r.remote_tokens;
                a.padding_slots += r.padding_slots;
                a.volume_total += r.volume_total;
            }
            let events = a.local_events + a.remote_tokens;
            a.alpha = if events == 0 { 0.0 } else { a.local_events as f64 / events as f64 };
            a
        })
        .collect();
    let ds = aggs[0].volume_total;
    for a in &mut aggs {
        a.saving = if ds == 0.0 { 0.0 } else { (ds - a.volume_total) / ds };
    }
    aggs
}

pub fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let start = Instant::now();
    require_file(&args.trace, "trace")?;
    let summary_path = args.solve_dir.join(SOLVE_SUMMARY);
    require_file(&summary_path, "solve summary")?;
    let bundle_path = args.solve_dir.join(BUNDLE);
    let vanilla_path = args.solve_dir.join(BUNDLE_VANILLA);
    require_file(&bundle_path, "bundle")?;
    require_file(&vanilla_path, "bundle")?;
    let topology = read_topology(&args.topology)?;
    let solve: SolveSummary = serde_json::from_slice(&fs::read(&summary_path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", summary_path.display())))?;
    if solve.topology != topology {
        bail!(Error::InvalidConfig("topology differs from the one the bundle was solved for".into()));
    }
    let solved = LookupBundle::read(&bundle_path)?;
    let vanilla = LookupBundle::read(&vanilla_path)?;

    let profile = ingest_profile(&args.trace, &topology)?;
    let (_, holdout) = split_trace(&profile.trace, solve.split, solve.seed)?;
    if holdout.requests.is_empty() {
        bail!(Error::EmptyInput("evaluation split is empty".into()));
    }
    let batch_size = args.batch_size.unwrap_or(topology.batch_size);
    let sim = Simulator::new(
        &holdout,
        &solved,
        &vanilla,
        SimConfig { devices: topology.devices, batch_size, oracle_history: args.oracle_history },
    )?;
    let rows = sim.run_all()?;
    let summary = SimSummary {
        seed: solve.seed,
        split: solve.split,
        requests: holdout.requests.len(),
        batch_size,
        oracle_history: args.oracle_history,
        aggregate: aggregate_modes(&rows),
    };

    #[derive(Serialize)]
    struct Report<'a> {
        #[serde(flatten)]
        summary: &'a SimSummary,
        rows: &'a [LayerSim],
    }
    let mut out = OutDir::create(&args.out)?;
    out.write_with("sim.csv", |w| Ok(write_sim_csv(&rows, w)?))?;
    out.write_json("sim.json", &Report { summary: &summary, rows: &rows })?;
    out.finish()?;
    report_time("simulate", start);
    Ok(())
}

// ---------------------------------------------------------------- sweep

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Device counts to tabulate.
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
    pub devices: Vec<usize>,
    /// Top-k values to tabulate.
    #[arg(long, value_delimiter = ',', default_value = "1,2,6")]
    pub top_k: Vec<usize>,
    /// Alpha grid points over [0, 1].
    #[arg(long, default_value_t = 11)]
    pub steps: usize,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPair {
    pub g: usize,
    pub k: usize,
    pub min_saving_ratio: f64,
    pub max_saving_ratio: f64,
}

pub fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let start = Instant::now();
    let mut csv = String::from("g,k,alpha,ds_volume,smoe_volume,saving,saving_ratio\n");
    let mut pairs = Vec::new();
    for &g in &args.devices {
        for &k in &args.top_k {
            let points = sweep_alpha(g, k, args.steps)?;
            for p in &points {
                csv.push_str(&format!(
                    "{g},{k},{},{},{},{},{}\n",
                    p.alpha, p.ds_volume, p.smoe_volume, p.saving, p.saving_ratio
                ));
            }
            let ratios = points.iter().map(|p| p.saving_ratio);
            pairs.push(SweepPair {
                g,
                k,
                min_saving_ratio: ratios.clone().fold(f64::INFINITY, f64::min),
                max_saving_ratio: ratios.fold(f64::NEG_INFINITY, f64::max),
            });
        }
    }
    let mut out = OutDir::create(&args.out)?;
    out.write("sweep.csv", csv.as_bytes())?;
    out.write_json("sweep.json", &pairs)?;
    out.finish()?;
    report_time("sweep", start);
    Ok(())
}

resolvable!(SynthArgs, IngestArgs, SolveArgs, EvaluateArgs, SimulateArgs, SweepArgs);
