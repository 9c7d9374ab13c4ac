//! The `agiqa` command line: synthetic data generation, training,
//! evaluation, ablation, cross-dataset runs and cache inspection.
//!
//! Runs are configured by a TOML file with a `[data]` section (paths,
//! relative to the file) and a `[train]` section, overridable with flags
//! and `--set section.key=value`. Every training run writes the fully
//! resolved configuration next to its outputs so it can be replayed with
//! `--config`.
//!
//! Machine-readable lines on standard output:
//!
//! ```text
//! REPORT    <part>  n srcc plcc krcc rmse
//! ABLATION  <label> <components> <fusion> <selected_epoch> n srcc plcc krcc rmse
//! ```
//!
//! Exit status is 0 on success, 1 on runtime failure and 2 on usage or
//! configuration errors.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use agiqa_core::cache::{cache_read, cache_write, inspect, CacheTag, FeatureCache};
use agiqa_core::metrics::EvalReport;
use agiqa_core::pipeline::{
    ablate, cross_evaluate, evaluate, generate_synthetic, load_checkpoint, save_checkpoint, train,
    DatasetManifest, FeatureSources, FusionNet, SplitPart, SynthSpec, TrainConfig,
};
use agiqa_core::semantic::prompt_registry;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SEMANTIC_FILE: &str = "semantic.mafc";
pub const QUALITY_FILE: &str = "quality.mafc";
pub const PROMPTS_FILE: &str = "prompts.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.mack";
pub const RUN_LOG_FILE: &str = "run_log.tsv";
pub const CONFIG_ECHO_FILE: &str = "config.toml";
pub const ABLATION_FILE: &str = "ablation.tsv";

#[derive(Debug, Parser)]
#[command(
    name = "agiqa",
    version,
    about = "Quality assessment for generated images by adaptive feature fusion"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic dataset: manifest, semantic and quality caches.
    GenSynth(GenSynthArgs),
    /// Train one model and save the best-validation checkpoint.
    Train(RunArgs),
    /// Evaluate a checkpoint on one split part of a dataset.
    Eval(EvalArgs),
    /// Train every component combination plus the concatenation baseline.
    Ablate(RunArgs),
    /// Evaluate a checkpoint on the test part of another dataset.
    Cross(CrossArgs),
    /// Print a feature cache's header, per-tag counts and checksum status.
    CacheInfo { path: PathBuf },
    /// Print the fixed prompt registry.
    Prompts,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub n: usize,
    /// Semantic feature width.
    #[arg(long)]
    pub dim: usize,
    #[arg(long)]
    pub seed: u64,
    /// Seed of the feature directions; defaults to `--seed`. Datasets
    /// sharing it come from the same generator.
    #[arg(long)]
    pub generator_seed: Option<u64>,
    #[arg(long, default_value_t = 0.9)]
    pub mos_signal: f64,
    /// Quality feature width; 49 matches the default backbone's patch grid.
    #[arg(long, default_value_t = 49)]
    pub quality_dim: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory holding manifest.csv, semantic.mafc and quality.mafc.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub semantic: Option<PathBuf>,
    #[arg(long)]
    pub quality: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Split part: train, val or test.
    #[arg(long, default_value = "test")]
    pub part: String,
}

#[derive(Debug, Args)]
pub struct CrossArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
}

/// A problem with how the command was invoked or configured.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<agiqa_core::Error>() {
            if e.is_usage() {
                return 2;
            }
        }
    }
    1
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub manifest: Option<PathBuf>,
    pub semantic_cache: Option<PathBuf>,
    pub quality_cache: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataPaths,
    pub train: TrainConfig,
}

const DATA_KEYS: [&str; 4] = ["manifest", "semantic_cache", "quality_cache", "out_dir"];

fn parse_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {spec:?}")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(usage(format!("bad key in --set {spec:?}")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, parents) = path.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| usage(format!("--set {spec:?}: {p:?} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn set_path(table: &mut toml::Table, section: &str, key: &str, value: &Path) {
    let sec = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    if let Some(t) = sec.as_table_mut() {
        t.insert(
            key.to_string(),
            toml::Value::String(value.to_string_lossy().into_owned()),
        );
    }
}

/// Merge the config file, flags and `--set` overrides, in that order of
/// increasing precedence.
fn layered_table(
    data: &DataArgs,
    seed: Option<u64>,
    out_dir: Option<&Path>,
) -> Result<toml::Table> {
    let mut table = match &data.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let mut t: toml::Table = text
                .parse()
                .map_err(|e| usage(format!("config {}: {e}", path.display())))?;
            let base = path.parent().unwrap_or(Path::new(""));
            if let Some(d) = t.get_mut("data").and_then(toml::Value::as_table_mut) {
                for key in DATA_KEYS {
                    if let Some(toml::Value::String(s)) = d.get(key) {
                        let joined = base.join(s);
                        d.insert(
                            key.into(),
                            toml::Value::String(joined.to_string_lossy().into_owned()),
                        );
                    }
                }
            }
            t
        }
        None => toml::Table::new(),
    };
    if let Some(dir) = &data.data_dir {
        set_path(&mut table, "data", "manifest", &dir.join(MANIFEST_FILE));
        set_path(
            &mut table,
            "data",
            "semantic_cache",
            &dir.join(SEMANTIC_FILE),
        );
        set_path(&mut table, "data", "quality_cache", &dir.join(QUALITY_FILE));
    }
    for (key, val) in [
        ("manifest", &data.manifest),
        ("semantic_cache", &data.semantic),
        ("quality_cache", &data.quality),
    ] {
        if let Some(p) = val {
            set_path(&mut table, "data", key, p);
        }
    }
    if let Some(p) = out_dir {
        set_path(&mut table, "data", "out_dir", p);
    }
    if let Some(s) = seed {
        let train = table
            .entry("train".to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        if let Some(t) = train.as_table_mut() {
            t.insert("seed".into(), toml::Value::Integer(s as i64));
        }
    }
    for spec in &data.overrides {
        parse_override(&mut table, spec)?;
    }
    Ok(table)
}

fn run_config(args: &RunArgs) -> Result<RunConfig> {
    let table = layered_table(&args.data, args.seed, args.out_dir.as_deref())?;
    if !table.contains_key("train") {
        return Err(usage(
            "no [train] section; a seed is required (use --seed or --set train.seed=N)",
        ));
    }
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| usage(format!("config: {}", e.message().trim())))?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn data_paths(data: &DataArgs) -> Result<DataPaths> {
    let mut table = layered_table(data, None, None)?;
    let Some(d) = table.remove("data") else {
        return Ok(DataPaths::default());
    };
    d.try_into()
        .map_err(|e: toml::de::Error| usage(format!("config [data]: {}", e.message().trim())))
}

struct LoadedData {
    manifest: DatasetManifest,
    semantic: Option<FeatureCache>,
    quality: Option<FeatureCache>,
}

impl LoadedData {
    fn load(paths: &DataPaths) -> Result<Self> {
        let manifest_path = paths.manifest.as_ref().ok_or_else(|| {
            usage("no manifest given (use --manifest, --data-dir or [data] manifest)")
        })?;
        let manifest = DatasetManifest::load(manifest_path)
            .with_context(|| format!("manifest {}", manifest_path.display()))?;
        let read = |p: &Option<PathBuf>| -> Result<Option<FeatureCache>> {
            p.as_ref()
                .map(|p| cache_read(p).with_context(|| format!("feature cache {}", p.display())))
                .transpose()
        };
        Ok(Self {
            manifest,
            semantic: read(&paths.semantic_cache)?,
            quality: read(&paths.quality_cache)?,
        })
    }

    fn sources(&self) -> FeatureSources<'_> {
        FeatureSources {
            semantic: self.semantic.as_ref(),
            quality: self.quality.as_ref(),
        }
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn echo(cfg: &RunConfig) -> String {
    let mut cfg = cfg.clone();
    for p in [
        &mut cfg.data.manifest,
        &mut cfg.data.semantic_cache,
        &mut cfg.data.quality_cache,
        &mut cfg.data.out_dir,
    ]
    .into_iter()
    .flatten()
    {
        *p = absolute(p);
    }
    toml::to_string(&cfg).expect("config serializes")
}

fn report_table(out: &mut dyn Write, rows: &[(String, EvalReport)]) -> Result<()> {
    writeln!(out, "{:<8}{}", "part", EvalReport::table_header())?;
    for (label, r) in rows {
        writeln!(out, "{label:<8}{r}")?;
    }
    for (label, r) in rows {
        writeln!(out, "REPORT\t{label}\t{}", r.to_record())?;
    }
    Ok(())
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::GenSynth(a) => cmd_gen_synth(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Cross(a) => cmd_cross(&a, out),
        Command::Ablate(a) => cmd_ablate(&a, out),
        Command::CacheInfo { path } => cmd_cache_info(&path, out),
        Command::Prompts => {
            write!(out, "{}", prompt_registry())?;
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct SynthEcho {
    n: usize,
    dim: usize,
    quality_dim: usize,
    seed: u64,
    generator_seed: u64,
    mos_signal: f64,
}

fn cmd_gen_synth(a: &GenSynthArgs, out: &mut dyn Write) -> Result<()> {
    let spec = SynthSpec {
        n: a.n,
        dim: a.dim,
        quality_dim: a.quality_dim,
        seed: a.seed,
        generator_seed: a.generator_seed.unwrap_or(a.seed),
        mos_signal: a.mos_signal,
    };
    let ds = generate_synthetic(&spec)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let dir = &a.out_dir;
    ds.manifest.write(dir.join(MANIFEST_FILE))?;
    let sem_crc = cache_write(dir.join(SEMANTIC_FILE), &ds.semantic)?;
    let q_crc = cache_write(dir.join(QUALITY_FILE), &ds.quality)?;
    fs::write(dir.join(PROMPTS_FILE), prompt_registry())
        .with_context(|| format!("writing {PROMPTS_FILE}"))?;
    let echo = SynthEcho {
        n: spec.n,
        dim: spec.dim,
        quality_dim: spec.quality_dim,
        seed: spec.seed,
        generator_seed: spec.generator_seed,
        mos_signal: spec.mos_signal,
    };
    fs::write(dir.join("synth.toml"), toml::to_string(&echo)?).context("writing synth.toml")?;
    writeln!(
        out,
        "wrote {} ({} records)",
        dir.join(MANIFEST_FILE).display(),
        ds.manifest.len()
    )?;
    writeln!(
        out,
        "wrote {} ({} entries, crc {sem_crc:#010x})",
        dir.join(SEMANTIC_FILE).display(),
        ds.semantic.len()
    )?;
    writeln!(
        out,
        "wrote {} ({} entries, crc {q_crc:#010x})",
        dir.join(QUALITY_FILE).display(),
        ds.quality.len()
    )?;
    Ok(())
}

fn cmd_train(a: &RunArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = run_config(a)?;
    let out_dir = cfg
        .data
        .out_dir
        .clone()
        .ok_or_else(|| usage("no output directory (use --out-dir or [data] out_dir)"))?;
    let data = LoadedData::load(&cfg.data)?;
    let mut run = train(&cfg.train, &data.manifest, data.sources())?;
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let ck_path = out_dir.join(CHECKPOINT_FILE);
    let crc = save_checkpoint(&ck_path, &run.net)?;
    run.record.checkpoint = Some(ck_path.clone());
    fs::write(out_dir.join(RUN_LOG_FILE), run.record.to_log()).context("writing run log")?;
    fs::write(out_dir.join(CONFIG_ECHO_FILE), echo(&cfg)).context("writing config echo")?;

    let (tr, va, te) = run.record.split_sizes;
    writeln!(
        out,
        "dataset {} ({} images), split {tr}/{va}/{te}, seed {}",
        data.manifest.name,
        data.manifest.len(),
        cfg.train.seed
    )?;
    writeln!(
        out,
        "selected epoch {} of {} (components {}, fusion {})",
        run.record.selected_epoch,
        cfg.train.epochs,
        cfg.train.components,
        if cfg.train.components.count() == 1 {
            "single"
        } else if cfg.train.moe {
            "moe"
        } else {
            "concat"
        }
    )?;
    let mut rows = Vec::new();
    if let Some(v) = run.record.selected().val {
        rows.push(("val".to_string(), v));
    }
    let test = agiqa_core::pipeline::evaluate_samples(&run.net, &run.data.test)?;
    rows.push(("test".to_string(), test));
    report_table(out, &rows)?;
    writeln!(out, "checkpoint {} (crc {crc:#010x})", ck_path.display())?;
    Ok(())
}

fn open_checkpoint(path: &Path) -> Result<FusionNet> {
    load_checkpoint(path).with_context(|| format!("checkpoint {}", path.display()))
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let paths = data_paths(&a.data)?;
    let part: SplitPart = a.part.parse()?;
    let net = open_checkpoint(&a.checkpoint)?;
    let data = LoadedData::load(&paths)?;
    let report = evaluate(&net, &data.manifest, part, data.sources())?;
    report_table(out, &[(part.to_string(), report)])
}

fn cmd_cross(a: &CrossArgs, out: &mut dyn Write) -> Result<()> {
    let paths = data_paths(&a.data)?;
    let net = open_checkpoint(&a.checkpoint)?;
    let data = LoadedData::load(&paths)?;
    writeln!(
        out,
        "direction {} -> {}",
        a.checkpoint.display(),
        data.manifest.name
    )?;
    let report = cross_evaluate(&net, &data.manifest, data.sources())?;
    report_table(out, &[("cross".to_string(), report)])
}

fn cmd_ablate(a: &RunArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = run_config(a)?;
    let data = LoadedData::load(&cfg.data)?;
    let rows = ablate(&cfg.train, &data.manifest, data.sources())?;
    writeln!(
        out,
        "{:<12}{:<8}{:>6}{}",
        "components",
        "fusion",
        "epoch",
        EvalReport::table_header()
    )?;
    for r in &rows {
        writeln!(
            out,
            "{:<12}{:<8}{:>6}{}",
            r.label(),
            r.fusion.as_str(),
            r.record.selected_epoch,
            r.test
        )?;
    }
    let records: String = rows.iter().map(|r| r.to_record() + "\n").collect();
    write!(out, "{records}")?;
    if let Some(dir) = &cfg.data.out_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join(ABLATION_FILE), &records).context("writing ablation table")?;
        fs::write(dir.join(CONFIG_ECHO_FILE), echo(&cfg)).context("writing config echo")?;
    }
    Ok(())
}

fn cmd_cache_info(path: &Path, out: &mut dyn Write) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(usage("cache-info needs a non-empty path"));
    }
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let info = inspect(&bytes)?;
    writeln!(out, "path        {}", path.display())?;
    writeln!(out, "version     {}", info.version)?;
    writeln!(out, "hidden_size {}", info.hidden_size)?;
    writeln!(out, "entries     {}", info.entry_count)?;
    if !info.checksum_ok() {
        writeln!(
            out,
            "checksum FAIL (stored {:#010x}, computed {:#010x})",
            info.stored_checksum, info.computed_checksum
        )?;
        anyhow::bail!("{}: checksum mismatch", path.display());
    }
    let cache = agiqa_core::cache::decode(&bytes)?;
    let counts = cache.tag_counts();
    for tag in CacheTag::ALL {
        writeln!(
            out,
            "tag {}       {}",
            tag.as_char(),
            counts.get(&tag).copied().unwrap_or(0)
        )?;
    }
    writeln!(out, "checksum OK ({:#010x})", info.stored_checksum)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_overrides_parse_values() {
        let mut t = toml::Table::new();
        parse_override(&mut t, "train.epochs=3").unwrap();
        parse_override(&mut t, "train.components=qa").unwrap();
        parse_override(&mut t, "train.optim.lr=1e-3").unwrap();
        parse_override(&mut t, "train.moe=false").unwrap();
        let train = t["train"].as_table().unwrap();
        assert_eq!(train["epochs"].as_integer(), Some(3));
        assert_eq!(train["components"].as_str(), Some("qa"));
        assert_eq!(train["optim"]["lr"].as_float(), Some(1e-3));
        assert_eq!(train["moe"].as_bool(), Some(false));
        assert!(parse_override(&mut t, "noequals").is_err());
        assert!(parse_override(&mut t, "train..x=1").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&usage("x")), 2);
        assert_eq!(
            exit_code(&agiqa_core::Error::InvalidConfig("x".into()).into()),
            2
        );
        let io: anyhow::Error = agiqa_core::Error::State("x".into()).into();
        assert_eq!(exit_code(&io.context("while training")), 1);
    }
}
