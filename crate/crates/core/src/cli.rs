//! Command-line surface: one JSON run configuration drives corpus
//! generation, model and prefix training, generation, evaluation and
//! vocabulary analysis inside a single output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::corpus::{generate_corpus, AttributedCorpus, CorpusConfig};
use crate::decode::{measure_filtered_vocab, DecodeParams, Mode};
use crate::error::{Error, Result};
use crate::eval::experiment::{lm_settings, order_channels, prompts_for, LmSetup, Targets, Workbench};
use crate::eval::{attribute_transfer_report, render_report, GenerationReport};
use crate::model::{pretrain, LanguageModel};
use crate::prefix::{train_general, train_specific, Prefix, PrefixHyper};

pub const CONFIG_SCHEMA: &str = "fpt-config/1";

/// Exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_CONTRACT: i32 = 4;
pub const EXIT_DATA: i32 = 5;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Missing(_) => EXIT_MISSING,
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
        Error::Contract(_) => EXIT_CONTRACT,
        _ => EXIT_DATA,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSpec {
    pub count: usize,
    pub length: usize,
}

impl Default for PromptSpec {
    fn default() -> Self {
        Self { count: 20, length: 4 }
    }
}

/// A whole experiment. The global `seed` replaces the corpus, prefix and
/// decoding seeds; the two language models keep their own seeds so they
/// can be shared across experiment seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: String,
    pub seed: u64,
    pub out: PathBuf,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub lm: LmSetup,
    #[serde(default)]
    pub prefix: PrefixHyper,
    /// Prefixes to train: `general` and `ATTR=value` labels.
    pub prefixes: Vec<String>,
    /// Decoding settings, at most one entry per mode.
    #[serde(default)]
    pub decode: Vec<DecodeParams>,
    #[serde(default)]
    pub prompts: PromptSpec,
    #[serde(default = "default_samples")]
    pub samples_per_prompt: usize,
}

fn default_samples() -> usize {
    20
}

impl Default for RunConfig {
    fn default() -> Self {
        let corpus = CorpusConfig::default();
        let mut prefixes = vec!["general".to_string()];
        for a in &corpus.attributes {
            prefixes.extend(a.values.iter().map(|v| format!("{}={v}", a.name)));
        }
        Self {
            schema: CONFIG_SCHEMA.into(),
            seed: 1,
            out: PathBuf::from("runs/default"),
            corpus,
            lm: LmSetup::default(),
            prefix: PrefixHyper::default(),
            prefixes,
            decode: Mode::ALL.into_iter().map(|mode| DecodeParams { mode, ..Default::default() }).collect(),
            prompts: PromptSpec::default(),
            samples_per_prompt: default_samples(),
        }
    }
}

/// Splits `ATTR=value`.
pub fn parse_target(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((a, v)) if !a.is_empty() && !v.is_empty() => Ok((a.to_string(), v.to_string())),
        _ => Err(Error::Config(format!("expected ATTR=VALUE, got {s:?}"))),
    }
}

fn file_safe(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != CONFIG_SCHEMA {
            return Err(Error::Config(format!("config schema {} unsupported (expected {CONFIG_SCHEMA})", self.schema)));
        }
        self.corpus.validate()?;
        self.lm.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        for a in &self.corpus.attributes {
            if !file_safe(&a.name) || a.values.iter().any(|v| !file_safe(v)) {
                return Err(Error::Config(format!("attribute {} names must be ASCII letters, digits, '-' or '_'", a.name)));
            }
        }
        let mut attributes_with_prefix = Vec::new();
        for label in &self.prefixes {
            if label == "general" {
                continue;
            }
            let (a, v) = parse_target(label)?;
            if self.corpus.attribute(&a)?.value_index(&v).is_none() {
                return Err(Error::Config(format!("prefix {label}: {a} has no value {v}")));
            }
            attributes_with_prefix.push(a);
        }
        let mut modes = Vec::new();
        for d in &self.decode {
            d.validate()?;
            if modes.contains(&d.mode) {
                return Err(Error::Config(format!("decode mode {} listed twice", d.mode)));
            }
            modes.push(d.mode);
            if d.mode.needs_general() && !self.prefixes.iter().any(|p| p == "general") {
                return Err(Error::Config(format!("mode {} needs a general prefix entry", d.mode)));
            }
            for a in d.alpha_overrides.keys() {
                if !attributes_with_prefix.contains(a) {
                    return Err(Error::Config(format!("decode params reference {a}, which has no prefix entry")));
                }
            }
        }
        if self.prompts.count == 0 || self.prompts.length == 0 || self.samples_per_prompt == 0 {
            return Err(Error::Config("prompt count, prompt length and samples_per_prompt must be positive".into()));
        }
        Ok(())
    }

    /// Copy with the global seed pushed into every seeded section.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.corpus.seed = self.seed;
        c.prefix.seed = self.seed;
        c.decode.iter_mut().for_each(|d| d.seed = self.seed);
        c
    }

    pub fn decode_for(&self, mode: Mode) -> DecodeParams {
        self.decode
            .iter()
            .find(|d| d.mode == mode)
            .cloned()
            .unwrap_or(DecodeParams { mode, seed: self.seed, ..Default::default() })
    }
}

/// First 12 hex digits of the SHA-256 of a JSON value (object keys sorted).
pub fn config_hash(value: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(&serde_json::to_value(value).expect("config serializes")).expect("value serializes");
    hex::encode(Sha256::digest(bytes))[..12].to_string()
}

/// File layout of a run directory; every path stays under `root`.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn checkpoint(&self, name: &str, hash: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}-{hash}.ckpt"))
    }

    pub fn samples(&self, name: &str, hash: &str) -> PathBuf {
        self.root.join("samples").join(format!("{name}-{hash}.jsonl"))
    }

    pub fn report(&self, name: &str, hash: &str, ext: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}-{hash}.{ext}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LmRole {
    Base,
    Eval,
}

impl LmRole {
    fn name(self) -> &'static str {
        match self {
            LmRole::Base => "base",
            LmRole::Eval => "eval",
        }
    }
}

/// Resolved configuration plus the content-addressed paths derived from it.
pub struct Run {
    pub config: RunConfig,
    pub layout: Layout,
}

impl Run {
    pub fn new(config: &RunConfig, seed: Option<u64>, out: Option<&Path>) -> Result<Self> {
        let mut config = config.clone();
        if let Some(s) = seed {
            config.seed = s;
        }
        if let Some(o) = out {
            config.out = o.to_path_buf();
        }
        config.validate()?;
        let config = config.resolved();
        let layout = Layout { root: config.out.clone() };
        Ok(Self { config, layout })
    }

    pub fn corpus_stem(&self) -> String {
        format!("corpus-{}", config_hash(&self.config.corpus))
    }

    fn lm_seed(&self, role: LmRole) -> u64 {
        match role {
            LmRole::Base => self.config.lm.base_seed,
            LmRole::Eval => self.config.lm.eval_seed,
        }
    }

    fn lm_hash(&self, role: LmRole) -> String {
        let (data, model, hyper) = lm_settings(&self.config.lm, &self.config.corpus, self.lm_seed(role));
        config_hash(&json!({ "data": data, "model": model, "hyper": hyper, "sequences": self.config.lm.pretrain_sequences }))
    }

    pub fn lm_path(&self, role: LmRole) -> PathBuf {
        self.layout.checkpoint(role.name(), &self.lm_hash(role))
    }

    pub fn prefix_path(&self, label: &str) -> PathBuf {
        let hash = config_hash(&json!({
            "base": self.lm_hash(LmRole::Base),
            "corpus": self.config.corpus,
            "prefix": self.config.prefix,
            "label": label,
        }));
        self.layout.checkpoint(&format!("prefix-{}", label.replace('=', "-")), &hash)
    }

    pub fn load_corpus(&self) -> Result<AttributedCorpus> {
        let dir = self.layout.corpus_dir();
        let stem = self.corpus_stem();
        if !dir.join(format!("{stem}.txt")).exists() {
            return Err(Error::Missing(format!("corpus {} not found; run the corpus command first", dir.join(stem).display())));
        }
        AttributedCorpus::load(&dir, &stem)
    }

    pub fn load_lm(&self, role: LmRole) -> Result<LanguageModel> {
        let path = self.lm_path(role);
        if !path.exists() {
            return Err(Error::Missing(format!("{} model {} not found; run train --target {}", role.name(), path.display(), role.name())));
        }
        Ok(LanguageModel::load(&path)?.0)
    }

    pub fn load_prefix(&self, label: &str, base: &LanguageModel) -> Result<Prefix> {
        let path = self.prefix_path(label);
        if !path.exists() {
            return Err(Error::Missing(format!("prefix {label} ({}) not found", path.display())));
        }
        let prefix = Prefix::load(&path)?;
        prefix.check_base(base)?;
        Ok(prefix)
    }
}

#[derive(Debug, Parser)]
#[command(name = "fpt", version, about = "Focused prefix tuning on synthetic attributed corpora")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the corpus described by the config.
    Corpus {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the base or eval model, the general prefix, or a specific prefix.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `base`, `eval`, `general` or `specific:ATTR=VALUE`.
        #[arg(long)]
        target: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample continuations of the config's prompts.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Mode,
        /// Target attribute value; repeat for multi-attribute decoding.
        #[arg(long = "attr")]
        attrs: Vec<String>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long = "top-p")]
        top_p: Option<f64>,
        /// Samples per prompt.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize samples files and compare them.
    Evaluate {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Filtered vocabulary sizes of the specific prefixes at the first decoding step.
    MeasureVocab {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "attr")]
        attrs: Vec<String>,
        #[arg(long = "top-p")]
        top_p: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Runs one command, returning the paths it wrote.
pub fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    match cli.command {
        Command::Corpus { config, seed, out } => cmd_corpus(&Run::new(&RunConfig::load(&config)?, seed, out.as_deref())?),
        Command::Train { config, target, seed, out } => {
            cmd_train(&Run::new(&RunConfig::load(&config)?, seed, out.as_deref())?, &target)
        }
        Command::Generate { config, mode, attrs, alpha, top_p, count, seed, out } => {
            let run = Run::new(&RunConfig::load(&config)?, seed, out.as_deref())?;
            let mut params = run.config.decode_for(mode);
            if let Some(a) = alpha {
                params.alpha = a;
            }
            if let Some(p) = top_p {
                params.top_p = p;
            }
            let targets = attrs.iter().map(|a| parse_target(a)).collect::<Result<Vec<_>>>()?;
            cmd_generate(&run, params, &targets, count.unwrap_or(run.config.samples_per_prompt))
        }
        Command::Evaluate { files, out } => cmd_evaluate(&files, out.as_deref().unwrap_or(Path::new("."))),
        Command::MeasureVocab { config, attrs, top_p, seed, out } => {
            let run = Run::new(&RunConfig::load(&config)?, seed, out.as_deref())?;
            let targets = attrs.iter().map(|a| parse_target(a)).collect::<Result<Vec<_>>>()?;
            let p = top_p.unwrap_or_else(|| run.config.decode_for(Mode::Fpt).top_p);
            cmd_measure_vocab(&run, &targets, p)
        }
    }
}

pub fn cmd_corpus(run: &Run) -> Result<Vec<PathBuf>> {
    let corpus = generate_corpus(&run.config.corpus)?;
    let dir = run.layout.corpus_dir();
    let stem = run.corpus_stem();
    corpus.save(&dir, &stem)?;
    Ok(vec![dir.join(format!("{stem}.txt")), dir.join(format!("{stem}.meta.json"))])
}

pub fn cmd_train(run: &Run, target: &str) -> Result<Vec<PathBuf>> {
    let corpus = run.load_corpus()?;
    let path = match target {
        "base" | "eval" => {
            let role = if target == "base" { LmRole::Base } else { LmRole::Eval };
            let (data, model, hyper) = lm_settings(&run.config.lm, &run.config.corpus, run.lm_seed(role));
            let (model, log) = pretrain(&generate_corpus(&data)?, LanguageModel::new(model)?, &hyper)?;
            let path = run.lm_path(role);
            model.save(&path, json!({ "role": target, "hyper": hyper, "log": log }))?;
            path
        }
        _ => {
            let base = run.load_lm(LmRole::Base)?;
            let (prefix, label) = if target == "general" {
                (train_general(&base, &corpus, &run.config.prefix)?, "general".to_string())
            } else if let Some(t) = target.strip_prefix("specific:") {
                let (a, v) = parse_target(t)?;
                if corpus.config.attribute(&a).ok().and_then(|s| s.value_index(&v)).is_none() {
                    return Err(Error::Missing(format!("corpus has no attribute value {a}={v}")));
                }
                (train_specific(&base, &corpus, &a, &v, &run.config.prefix)?, format!("{a}={v}"))
            } else {
                return Err(Error::Config(format!("unknown train target {target:?}")));
            };
            let path = run.prefix_path(&label);
            prefix.save(&path, &base.config)?;
            path
        }
    };
    Ok(vec![path])
}

fn targets_label(targets: &Targets) -> String {
    if targets.is_empty() {
        return "untargeted".into();
    }
    targets.iter().map(|(a, v)| format!("{a}-{v}")).collect::<Vec<_>>().join("+")
}

pub fn cmd_generate(run: &Run, params: DecodeParams, targets: &Targets, count: usize) -> Result<Vec<PathBuf>> {
    params.validate()?;
    if count == 0 {
        return Err(Error::Config("count must be positive".into()));
    }
    if params.mode.needs_specific() && targets.is_empty() {
        return Err(Error::Config(format!("mode {} needs at least one --attr", params.mode)));
    }
    let corpus = run.load_corpus()?;
    for (a, v) in targets {
        if corpus.config.attribute(a).ok().and_then(|s| s.value_index(v)).is_none() {
            return Err(Error::Config(format!("corpus has no attribute value {a}={v}")));
        }
    }
    let base = run.load_lm(LmRole::Base)?;
    let eval = run.lm_path(LmRole::Eval).exists().then(|| run.load_lm(LmRole::Eval)).transpose()?;
    let mut labels: Vec<String> = Vec::new();
    if params.mode.needs_specific() {
        labels.extend(targets.iter().map(|(a, v)| format!("{a}={v}")));
    }
    if params.mode.needs_general() {
        labels.push("general".into());
    }
    let prefixes = labels
        .iter()
        .map(|l| Ok((l.clone(), run.load_prefix(l, &base)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let mut checkpoints = BTreeMap::from([("base".to_string(), base.checksum())]);
    if let Some(e) = &eval {
        checkpoints.insert("eval".into(), e.checksum());
    }
    for (l, p) in &prefixes {
        checkpoints.insert(format!("prefix:{l}"), p.checksum());
    }
    let prompts = prompts_for(&corpus, run.config.prompts.count, run.config.prompts.length, run.config.seed)?;
    let bench = Workbench { base: &base, eval: eval.as_ref(), corpus: &corpus, prompts: &prompts, prefixes: &prefixes, checkpoints };
    let ordered = if targets.len() > 1 && params.mode.needs_specific() {
        order_channels(&base, &prefixes, targets, &prompts, params.top_p)?.0
    } else {
        targets.clone()
    };
    let label = format!("{}:{}", params.mode, targets_label(&ordered));
    let report = bench.run(&label, std::slice::from_ref(&ordered), &params, count)?;
    let hash = config_hash(&json!({
        "config": run.config,
        "params": params,
        "targets": targets,
        "count": count,
    }));
    let path = run.layout.samples(&format!("{}-{}", params.mode, targets_label(targets)), &hash);
    write_new(&path, report.to_jsonl()?.as_bytes())?;
    Ok(vec![path])
}

pub fn cmd_evaluate(files: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    let mut reports = Vec::new();
    let mut hasher = Sha256::new();
    for f in files {
        let text = fs::read_to_string(f).map_err(|e| Error::Missing(format!("samples file {}: {e}", f.display())))?;
        hasher.update(text.as_bytes());
        let report = GenerationReport::from_jsonl(&text).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", f.display())),
            other => other,
        })?;
        reports.push(report);
    }
    let hash = hex::encode(hasher.finalize())[..12].to_string();
    let layout = Layout { root: out.to_path_buf() };
    let mut table = String::new();
    for r in &reports {
        table.push_str(&render_report(r));
    }
    let transfer = if reports.len() >= 2 {
        let implicit = reports[0].meta.implicit.as_ref().map(|i| i.attribute.clone());
        let desired = reports[0]
            .records
            .iter()
            .flat_map(|r| r.targets.keys())
            .find(|a| Some(*a) != implicit.as_ref())
            .cloned()
            .ok_or_else(|| Error::Contract("reports carry no desired attribute".into()))?;
        let t = attribute_transfer_report(&reports.iter().collect::<Vec<_>>(), &desired)?;
        table.push('\n');
        table.push_str(&t.render());
        Some(t)
    } else {
        None
    };
    let summary = json!({
        "files": files,
        "reports": reports.iter().map(|r| json!({
            "label": r.meta.label,
            "mode": r.meta.mode,
            "content_checksum": r.content_checksum(),
            "aggregate": r.aggregate,
        })).collect::<Vec<Value>>(),
        "transfer": transfer,
    });
    let json_path = layout.report("evaluation", &hash, "json");
    let text_path = layout.report("evaluation", &hash, "txt");
    write_new(&json_path, serde_json::to_string_pretty(&summary)?.as_bytes())?;
    write_new(&text_path, table.as_bytes())?;
    print!("{table}");
    Ok(vec![json_path, text_path])
}

pub fn cmd_measure_vocab(run: &Run, targets: &Targets, top_p: f64) -> Result<Vec<PathBuf>> {
    let corpus = run.load_corpus()?;
    let base = run.load_lm(LmRole::Base)?;
    let labels: Vec<String> = if targets.is_empty() {
        run.config.prefixes.iter().filter(|l| *l != "general").cloned().collect()
    } else {
        targets.iter().map(|(a, v)| format!("{a}={v}")).collect()
    };
    if labels.is_empty() {
        return Err(Error::Config("no specific prefixes to measure".into()));
    }
    let prefixes = labels.iter().map(|l| run.load_prefix(l, &base)).collect::<Result<Vec<_>>>()?;
    let channels: Vec<(&str, &crate::model::PrefixKv)> = labels.iter().map(String::as_str).zip(prefixes.iter().map(|p| &p.kv)).collect();
    let prompts = prompts_for(&corpus, run.config.prompts.count, run.config.prompts.length, run.config.seed)?;
    let measurement = measure_filtered_vocab(&base, &channels, &prompts, top_p)?;
    let hash = config_hash(&json!({ "config": run.config, "labels": labels, "top_p": top_p }));
    let path = run.layout.report("vocab", &hash, "json");
    write_new(&path, serde_json::to_string_pretty(&measurement)?.as_bytes())?;
    Ok(vec![path])
}

fn write_new(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}
