//! Command implementations behind the `hypercqa` binary.
//!
//! Every command takes a mandatory `--seed`, an optional TOML config file
//! (`[model]`, `[sample]`, `[baseline]` sections) whose values are overridden
//! by flags, and writes its artifacts plus a `manifest.json` into the output
//! directory. `HYPERCQA_OUT` overrides `--out`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::baseline::{BaselineConfig, Family, KhgEmbedding};
use crate::dataset::QueryDataset;
use crate::eval::{self, AblationSpec, EvalOptions, Variant};
use crate::khg::{GraphSplits, KnowledgeHypergraph, Vocabulary};
use crate::model::{
    train_with_log, Cardinality, DecoderMode, LkhgtModel, LogicalMode, ModelConfig, Positional,
    ScoreMode, TypeFilter,
};
use crate::oracle;
use crate::query;
use crate::sampler::{self, SampleSpec, Split};
use crate::seeding::sha256_hex;

pub const OUT_ENV: &str = "HYPERCQA_OUT";
const VOCAB_FILE: &str = "vocab.txt";
const MANIFEST_FILE: &str = "manifest.json";

fn facts_file(split: Split) -> String {
    format!("facts_{}.tsv", split.name())
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or config; exit status 1.
    Config(String),
    /// Unreadable or inconsistent inputs; exit status 2.
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "hypercqa", version, about = "Complex query answering over ordered knowledge hypergraphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ground and label query datasets from fact files.
    Sample(SampleArgs),
    /// Train the transformer on a sampled dataset.
    Train(TrainArgs),
    /// Filtered-MRR report for a checkpoint.
    Eval(EvalArgs),
    /// Answer queries exactly and audit dataset labels.
    Oracle(OracleArgs),
    /// Pretrain and score the closed-form message baseline.
    Baseline(BaselineArgs),
    /// Train and compare the four model variants.
    Ablate(AblateArgs),
    /// Graph and dataset statistics.
    Stats(StatsArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Seed for every random stream of the run.
    #[arg(long)]
    pub seed: u64,
    /// TOML config file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScoreArg {
    Cosine,
    Logits,
}

impl From<ScoreArg> for ScoreMode {
    fn from(s: ScoreArg) -> Self {
        match s {
            ScoreArg::Cosine => ScoreMode::Cosine,
            ScoreArg::Logits => ScoreMode::Logits,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DecoderArg {
    Mlp,
    Tied,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelFlags {
    /// Product t-norm/t-conorm instead of the logical encoder.
    #[arg(long)]
    pub fuzzy: bool,
    /// Drop absolute positional encodings.
    #[arg(long)]
    pub no_abs_pe: bool,
    /// Feed all operands to the logical encoder at once.
    #[arg(long)]
    pub variadic_card: bool,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long, value_enum)]
    pub score: Option<ScoreArg>,
    #[arg(long, value_enum)]
    pub decoder: Option<DecoderArg>,
}

#[derive(Debug, Clone, Copy, Default, Args)]
pub struct TypeFlags {
    /// Exclude 3P, 3I, 3IN and INP from training.
    #[arg(long, conflicts_with = "full_train")]
    pub ood: bool,
    /// Train on all fourteen types (the default).
    #[arg(long)]
    pub full_train: bool,
}

impl TypeFlags {
    fn filter(self) -> TypeFilter {
        if self.ood {
            TypeFilter::ood()
        } else {
            TypeFilter::All
        }
    }

    fn name(self) -> &'static str {
        if self.ood {
            "ood"
        } else {
            "full"
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    /// One fact file; nested splits are derived from it.
    #[arg(long, conflicts_with_all = ["train_facts", "valid_facts", "test_facts"])]
    pub facts: Option<PathBuf>,
    #[arg(long, requires = "test_facts")]
    pub train_facts: Option<PathBuf>,
    #[arg(long)]
    pub valid_facts: Option<PathBuf>,
    #[arg(long)]
    pub test_facts: Option<PathBuf>,
    #[arg(long)]
    pub train_count: Option<usize>,
    #[arg(long)]
    pub valid_count: Option<usize>,
    #[arg(long)]
    pub test_count: Option<usize>,
    /// Benchmark-sized counts.
    #[arg(long)]
    pub benchmark: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub types: TypeFlags,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Ranking score; defaults to the checkpoint's setting.
    #[arg(long, value_enum)]
    pub score: Option<ScoreArg>,
    /// Also exclude the other hard answers when ranking each one.
    #[arg(long)]
    pub filter_hard: bool,
}

#[derive(Debug, Clone, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// Answer this JSONL query file against the test graph instead of auditing.
    #[arg(long)]
    pub queries: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FamilyArg {
    MDistmult,
    MCp,
    Hype,
    Hsimple,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::MDistmult => Family::MDistmult,
            FamilyArg::MCp => Family::MCp,
            FamilyArg::Hype => Family::Hype,
            FamilyArg::Hsimple => Family::Hsimple,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub family: Option<FamilyArg>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub alpha: Option<usize>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub filter_hard: bool,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub types: TypeFlags,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long)]
    pub filter_hard: bool,
}

#[derive(Debug, Clone, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, required_unless_present = "data")]
    pub facts: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub train_count: usize,
    pub valid_count: usize,
    pub test_count: usize,
    pub retry_budget: usize,
    pub train_fraction: f64,
    pub valid_fraction: f64,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            train_count: 200,
            valid_count: 50,
            test_count: 50,
            retry_budget: 100,
            train_fraction: 0.8,
            valid_fraction: 0.1,
        }
    }
}

/// Contents of `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub model: ModelConfig,
    pub sample: SampleSection,
    pub baseline: BaselineConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| config_err(format!("{}: {}", p.display(), e.message())))
            }
        }
    }
}

fn model_config(file: &FileConfig, flags: &ModelFlags, seed: u64) -> Result<ModelConfig, CliError> {
    let mut c = file.model.clone();
    c.seed = seed;
    if flags.fuzzy {
        c.logical = LogicalMode::Fuzzy;
    }
    if flags.no_abs_pe {
        c.positional = Positional::None;
    }
    if flags.variadic_card {
        c.cardinality = Cardinality::Variadic;
    }
    c.d = flags.d.unwrap_or(c.d);
    c.layers = flags.layers.unwrap_or(c.layers);
    c.heads = flags.heads.unwrap_or(c.heads);
    c.epochs = flags.epochs.unwrap_or(c.epochs);
    c.batch_size = flags.batch_size.unwrap_or(c.batch_size);
    c.lr = flags.lr.unwrap_or(c.lr);
    c.dropout = flags.dropout.unwrap_or(c.dropout);
    if let Some(s) = flags.score {
        c.score = s.into();
    }
    if let Some(d) = flags.decoder {
        c.decoder = match d {
            DecoderArg::Mlp => DecoderMode::Mlp,
            DecoderArg::Tied => DecoderMode::Tied,
        };
    }
    c.check().map_err(config_err)?;
    Ok(c)
}

fn out_dir(common: &Common) -> Result<PathBuf, CliError> {
    let dir = std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .or_else(|| common.out.clone())
        .ok_or_else(|| config_err(format!("no output directory (use --out or {OUT_ENV})")))?;
    fs::create_dir_all(&dir).map_err(|e| data_err(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

/// Run record: command, seed, config echo, input hashes and output names.
#[derive(Debug, Serialize)]
struct Manifest {
    command: &'static str,
    version: &'static str,
    seed: u64,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl Manifest {
    fn new(command: &'static str, seed: u64, config: serde_json::Value) -> Self {
        Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, label: impl Into<String>, bytes: &[u8]) {
        self.inputs.insert(label.into(), sha256_hex(bytes));
    }

    fn write(mut self, dir: &Path, outputs: &[&str]) -> Result<(), CliError> {
        self.outputs = outputs.iter().map(|s| s.to_string()).collect();
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        write(dir, MANIFEST_FILE, text + "\n")
    }
}

/// A sampled data directory: vocabulary, nested fact splits and queries.
pub struct DataDir {
    pub vocab: Vocabulary,
    pub splits: GraphSplits,
    pub dataset: QueryDataset,
    pub vocab_hash: String,
    pub hashes: BTreeMap<String, String>,
}

impl DataDir {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let mut hashes = BTreeMap::new();
        let vocab_text = read(&dir.join(VOCAB_FILE))?;
        let vocab = Vocabulary::from_text(&vocab_text).map_err(data_err)?;
        let vocab_hash = sha256_hex(vocab_text.as_bytes());
        hashes.insert(VOCAB_FILE.to_string(), vocab_hash.clone());
        let mut facts = Vec::new();
        for split in Split::ALL {
            let name = facts_file(split);
            let text = read(&dir.join(&name))?;
            hashes.insert(name, sha256_hex(text.as_bytes()));
            facts.push(text);
        }
        let splits = GraphSplits::parse_with(&vocab, &facts[0], &facts[1], &facts[2]).map_err(data_err)?;
        let dataset = QueryDataset::read_dir(dir).map_err(data_err)?;
        hashes.insert("queries".to_string(), dataset.content_hash());
        Ok(DataDir {
            vocab,
            splits,
            dataset,
            vocab_hash,
            hashes,
        })
    }

    pub fn write(dir: &Path, splits: &GraphSplits, dataset: &QueryDataset) -> Result<(), CliError> {
        dataset.write_dir(dir).map_err(data_err)?;
        write(dir, VOCAB_FILE, splits.train.vocab().to_text())?;
        for (split, g) in [
            (Split::Train, &splits.train),
            (Split::Valid, &splits.valid),
            (Split::Test, &splits.test),
        ] {
            write(dir, &facts_file(split), g.to_facts_text())?;
        }
        Ok(())
    }

    pub fn graph(&self, split: Split) -> &KnowledgeHypergraph {
        match split {
            Split::Train => &self.splits.train,
            Split::Valid => &self.splits.valid,
            Split::Test => &self.splits.test,
        }
    }
}

fn sample(args: SampleArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let s = &file.sample;
    let mut manifest = Manifest::new("sample", args.common.seed, serde_json::to_value(s).expect("serializes"));
    let splits = match (&args.facts, &args.train_facts, &args.test_facts) {
        (Some(path), _, _) => {
            let text = read(path)?;
            manifest.input(path.display().to_string(), text.as_bytes());
            let full = KnowledgeHypergraph::parse_facts(&text).map_err(data_err)?;
            GraphSplits::holdout(&full, s.train_fraction, s.valid_fraction, args.common.seed).map_err(data_err)?
        }
        (None, Some(train), Some(test)) => {
            let train_text = read(train)?;
            let test_text = read(test)?;
            let valid_text = match &args.valid_facts {
                Some(v) => read(v)?,
                None => train_text.clone(),
            };
            for (p, t) in [(Some(train), &train_text), (args.valid_facts.as_ref(), &valid_text), (Some(test), &test_text)] {
                if let Some(p) = p {
                    manifest.input(p.display().to_string(), t.as_bytes());
                }
            }
            GraphSplits::parse(&train_text, &valid_text, &test_text).map_err(data_err)?
        }
        _ => return Err(config_err("give --facts, or --train-facts with --test-facts")),
    };
    let mut spec = if args.benchmark {
        SampleSpec::benchmark(args.common.seed)
    } else {
        SampleSpec::uniform(
            args.train_count.unwrap_or(s.train_count),
            args.valid_count.unwrap_or(s.valid_count),
            args.test_count.unwrap_or(s.test_count),
            args.common.seed,
        )
    };
    spec.retry_budget = s.retry_budget;
    let dataset = sampler::sample_dataset(&spec, &splits).map_err(data_err)?;
    let out = out_dir(&args.common)?;
    DataDir::write(&out, &splits, &dataset)?;
    eprintln!("sampled {} queries into {}", dataset.len(), out.display());
    manifest.input("queries", dataset.content_hash().as_bytes());
    manifest.write(&out, &["stats.tsv", VOCAB_FILE, "facts_*.tsv", "<split>_<TYPE>.jsonl"])
}

fn train(args: TrainArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let config = model_config(&file, &args.model, args.common.seed)?;
    let data = DataDir::load(&args.data)?;
    let out = out_dir(&args.common)?;
    let instances = data.dataset.split(Split::Train);
    let mut model = LkhgtModel::new(config.clone(), data.vocab.num_entities(), data.vocab.num_relations())
        .map_err(config_err)?;
    let report = train_with_log(&mut model, &instances, &args.types.filter(), |log| {
        eprintln!("epoch {}\tloss {:.6}", log.epoch, log.loss);
    })
    .map_err(data_err)?;
    let meta = BTreeMap::from([
        ("vocab_hash".to_string(), data.vocab_hash.clone()),
        ("dataset_hash".to_string(), data.dataset.content_hash()),
        ("types".to_string(), args.types.name().to_string()),
        ("seed".to_string(), args.common.seed.to_string()),
    ]);
    model.save(&out.join("model.ckpt"), &meta).map_err(data_err)?;
    write(&out, "train_log.tsv", report.to_tsv())?;
    let mut manifest = Manifest::new(
        "train",
        args.common.seed,
        json!({"model": config, "types": args.types.name()}),
    );
    manifest.inputs = data.hashes;
    manifest.write(&out, &["model.ckpt", "train_log.tsv"])
}

fn eval_cmd(args: EvalArgs) -> Result<(), CliError> {
    let data = DataDir::load(&args.data)?;
    let (mut model, meta) = LkhgtModel::load(&args.checkpoint).map_err(data_err)?;
    if meta.get("vocab_hash") != Some(&data.vocab_hash) {
        return Err(data_err("checkpoint was trained on a different vocabulary"));
    }
    if let Some(s) = args.score {
        model.set_score_mode(s.into());
    }
    let out = out_dir(&args.common)?;
    let split: Split = args.split.into();
    let options = EvalOptions {
        filter_hard: args.filter_hard,
    };
    let echo = json!({"model": model.config(), "split": split.name(), "filter_hard": args.filter_hard});
    let report = eval::evaluate(&model, &data.dataset.split(split), options, echo.clone()).map_err(data_err)?;
    write(&out, "report.tsv", report.to_tsv("lkhgt"))?;
    write(&out, "report.json", report.to_json() + "\n")?;
    print!("{}", report.to_tsv("lkhgt"));
    let mut manifest = Manifest::new("eval", args.common.seed, echo);
    manifest.inputs = data.hashes;
    manifest.input("checkpoint", &fs::read(&args.checkpoint).map_err(data_err)?);
    manifest.write(&out, &["report.tsv", "report.json"])
}

fn oracle_cmd(args: OracleArgs) -> Result<(), CliError> {
    FileConfig::load(args.common.config.as_deref())?;
    let data = DataDir::load(&args.data)?;
    let out = out_dir(&args.common)?;
    let mut manifest = Manifest::new("oracle", args.common.seed, serde_json::Value::Null);
    manifest.inputs = data.hashes.clone();
    if let Some(path) = &args.queries {
        let text = read(path)?;
        manifest.input(path.display().to_string(), text.as_bytes());
        let instances = query::parse_jsonl(&text).map_err(data_err)?;
        let vocab = data.splits.test.vocab();
        let mut lines = String::new();
        for q in &instances {
            let answers: Vec<&str> = oracle::answers(&q.tree, &data.splits.test)
                .into_iter()
                .filter_map(|e| vocab.entity_name(e))
                .collect();
            lines.push_str(&serde_json::to_string(&json!({"type": q.qtype, "answers": answers})).expect("serializes"));
            lines.push('\n');
        }
        write(&out, "answers.jsonl", lines)?;
        return manifest.write(&out, &["answers.jsonl"]);
    }
    let mut tsv = String::from("split\ttype\tcount\tlabel_mismatches\n");
    let mut bad = 0;
    for (split, qtype) in data.dataset.keys().collect::<Vec<_>>() {
        let graph = data.graph(split);
        let instances = data.dataset.get(split, qtype);
        let mismatches = instances
            .iter()
            .filter(|q| oracle::answers(&q.tree, graph) != q.answers())
            .count();
        bad += mismatches;
        tsv.push_str(&format!("{split}\t{qtype}\t{}\t{mismatches}\n", instances.len()));
    }
    write(&out, "oracle.tsv", &tsv)?;
    print!("{tsv}");
    manifest.write(&out, &["oracle.tsv"])?;
    if bad > 0 {
        return Err(data_err(format!("{bad} instances disagree with the oracle")));
    }
    Ok(())
}

fn baseline_cmd(args: BaselineArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let mut config = file.baseline.clone();
    config.seed = args.common.seed;
    if let Some(f) = args.family {
        config.family = f.into();
    }
    config.d = args.d.unwrap_or(config.d);
    config.epochs = args.epochs.unwrap_or(config.epochs);
    config.lr = args.lr.unwrap_or(config.lr);
    config.alpha = args.alpha.unwrap_or(config.alpha);
    let data = DataDir::load(&args.data)?;
    let out = out_dir(&args.common)?;
    let mut emb = KhgEmbedding::new(config.clone(), data.vocab.num_entities(), data.vocab.num_relations())
        .map_err(config_err)?;
    let log = emb.pretrain(&data.splits.train).map_err(data_err)?;
    emb.save(&out.join("baseline.ckpt")).map_err(data_err)?;
    let split: Split = args.split.into();
    let echo = json!({"baseline": config, "split": split.name(), "filter_hard": args.filter_hard});
    let options = EvalOptions {
        filter_hard: args.filter_hard,
    };
    let report = eval::evaluate(&emb, &data.dataset.split(split), options, echo.clone()).map_err(data_err)?;
    let mut curve = String::from("epoch\tloss\n");
    for (i, l) in log.losses.iter().enumerate() {
        curve.push_str(&format!("{}\t{l:.6}\n", i + 1));
    }
    write(&out, "pretrain_log.tsv", curve)?;
    write(&out, "report.tsv", report.to_tsv("hlmpnn"))?;
    write(&out, "report.json", report.to_json() + "\n")?;
    print!("{}", report.to_tsv("hlmpnn"));
    let mut manifest = Manifest::new("baseline", args.common.seed, echo);
    manifest.inputs = data.hashes;
    manifest.write(&out, &["baseline.ckpt", "pretrain_log.tsv", "report.tsv", "report.json"])
}

fn ablate_cmd(args: AblateArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let base = model_config(&file, &args.model, args.common.seed)?;
    if args.seeds.is_empty() {
        return Err(config_err("no seeds"));
    }
    let data = DataDir::load(&args.data)?;
    let out = out_dir(&args.common)?;
    let train = data.dataset.split(Split::Train);
    let test = data.dataset.split(Split::Test);
    let mut spec = AblationSpec::from_dataset(
        base.clone(),
        &data.dataset,
        &train,
        &test,
        data.vocab.num_entities(),
        data.vocab.num_relations(),
    );
    spec.seeds = args.seeds.clone();
    spec.filter = args.types.filter();
    spec.options = EvalOptions {
        filter_hard: args.filter_hard,
    };
    spec.variants = Variant::ALL.to_vec();
    let report = eval::ablate(&spec).map_err(data_err)?;
    write(&out, "ablation.tsv", report.to_tsv())?;
    write(
        &out,
        "ablation.json",
        serde_json::to_string_pretty(&report).expect("serializes") + "\n",
    )?;
    print!("{}", report.to_tsv());
    let mut manifest = Manifest::new(
        "ablate",
        args.common.seed,
        json!({"model": base, "seeds": args.seeds, "types": args.types.name()}),
    );
    manifest.inputs = data.hashes;
    manifest.write(&out, &["ablation.tsv", "ablation.json"])
}

fn stats_cmd(args: StatsArgs) -> Result<(), CliError> {
    FileConfig::load(args.common.config.as_deref())?;
    let mut manifest = Manifest::new("stats", args.common.seed, serde_json::Value::Null);
    let mut text = String::new();
    if let Some(path) = &args.facts {
        let facts = read(path)?;
        manifest.input(path.display().to_string(), facts.as_bytes());
        let g = KnowledgeHypergraph::parse_facts(&facts).map_err(data_err)?;
        text.push_str(&g.stats().to_tsv());
    }
    if let Some(dir) = &args.data {
        let data = DataDir::load(dir)?;
        for split in Split::ALL {
            text.push_str(&format!("# graph {split}\n"));
            text.push_str(&data.graph(split).stats().to_tsv());
        }
        text.push_str("# queries\n");
        text.push_str(&data.dataset.stats_tsv());
        manifest.inputs.extend(data.hashes);
    }
    print!("{text}");
    let has_out = std::env::var_os(OUT_ENV).is_some() || args.common.out.is_some();
    if has_out {
        let out = out_dir(&args.common)?;
        write(&out, "graph_stats.tsv", &text)?;
        manifest.write(&out, &["graph_stats.tsv"])?;
    }
    Ok(())
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Sample(a) => sample(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Oracle(a) => oracle_cmd(a),
        Command::Baseline(a) => baseline_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Stats(a) => stats_cmd(a),
    }
}

/// Parses `argv`, runs the command and returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
