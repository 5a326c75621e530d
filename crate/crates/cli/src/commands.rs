//! Subcommand definitions and their implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use avtag::active::{ALConfig, ActiveLearningState, SimulatedOracle, Strategy};
use avtag::corpus::{generate_synthetic, write_corpus, SplitKind, SynthSpec};
use avtag::model::{train, MetricHistory, Model, ModelConfig, Variant};
use avtag::tags::{Evaluation, Prf, SchemeKind};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::data::{load_dataset, scheme_for, SplitOptions};
use crate::error::{CliError, CliResult};

pub const EVAL_FORMAT: &str = "avtag.eval/1";
pub const CURVE_FORMAT: &str = "avtag.curve/1";
pub const CURVE_SUMMARY_FORMAT: &str = "avtag.curve-summary/1";
pub const TRAIN_SUMMARY_FORMAT: &str = "avtag.train-summary/1";

#[derive(Debug, Parser)]
#[command(name = "avtag", version, about = "Attribute value extraction by sequence tagging")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a tagger and write a checkpoint plus per-epoch metrics.
    Train(TrainArgs),
    /// Score a checkpoint on the test side of a split.
    Evaluate(EvaluateArgs),
    /// Simulate active learning with gold labels as the oracle.
    ActiveSim(ActiveSimArgs),
    /// Write the attention heatmap of one title as CSV and JSON.
    AttentionExport(AttentionArgs),
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Run the annotation service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// JSON model configuration; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub scheme: Option<SchemeKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub attention_dim: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub word_dropout: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub last_k: Option<usize>,
    #[arg(long)]
    pub bilstm_sigmoid: Option<bool>,
    #[arg(long)]
    pub attention_concat: Option<bool>,
    #[arg(long)]
    pub crf_constraints: Option<bool>,
    #[arg(long)]
    pub eval_window_only: Option<bool>,
    /// Pretrained embeddings in whitespace-separated text format.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
}

impl ModelArgs {
    pub fn resolve(&self) -> CliResult<ModelConfig> {
        let mut c = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                serde_json::from_str(&text)?
            }
            None => ModelConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag.clone() { c.$field = v; })*
            };
        }
        set!(variant => variant, scheme => scheme, epochs => epochs, seed => seed, embed_dim => embed_dim,
            hidden => hidden, attention_dim => attention_dim, learning_rate => learning_rate,
            dropout => dropout, word_dropout => word_dropout, batch_size => batch_size,
            last_k => last_k_average, bilstm_sigmoid => bilstm_sigmoid_concat,
            attention_concat => attention_concat_variant, crf_constraints => crf_hard_constraints,
            eval_window_only => eval_window_only);
        if let Some(p) = &self.pretrained {
            c.pretrained = Some(p.clone());
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    /// random, disjoint or hint; defaults to hint when every record has one.
    #[arg(long)]
    pub split: Option<SplitKind>,
    /// Train fraction.
    #[arg(long, default_value_t = 0.5)]
    pub ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

impl SplitArgs {
    fn options(&self) -> SplitOptions {
        SplitOptions {
            kind: self.split,
            ratio: self.ratio,
            seed: self.split_seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    /// Comma-separated attribute names; defaults to all annotated ones.
    #[arg(long, value_delimiter = ',')]
    pub attributes: Option<Vec<String>>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Metric history path; defaults to the checkpoint path with a
    /// `.metrics.jsonl` extension.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub split: SplitArgs,
    /// Fail unless the checkpoint holds this variant.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Fail unless the checkpoint uses this scheme.
    #[arg(long)]
    pub scheme: Option<SchemeKind>,
    /// Metric history whose last-k average is reported alongside.
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub last_k: Option<usize>,
    /// Write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ActiveSimArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long, value_delimiter = ',')]
    pub attributes: Option<Vec<String>>,
    #[arg(long, default_value = "TF")]
    pub strategy: Strategy,
    /// Number of seeds, run as `seed-base .. seed-base + seeds`.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed_base: u64,
    #[arg(long, default_value_t = 50)]
    pub initial: usize,
    #[arg(long, default_value_t = 25)]
    pub batch: usize,
    #[arg(long, default_value_t = 20)]
    pub rounds: usize,
    #[arg(long, default_value_t = 10)]
    pub committee_epochs: usize,
    #[arg(long)]
    pub normalize_flips: bool,
    #[arg(long)]
    pub reinit: bool,
    #[arg(long)]
    pub stop_threshold: Option<f64>,
    /// Output directory for curves and round histories.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttentionArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub text: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON generator spec; defaults to the built-in dog-food domain.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub n_train: usize,
    #[arg(long, default_value_t = 500)]
    pub n_test: usize,
    #[arg(long, default_value_t = 0.2)]
    pub owa: f64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Directory holding one subdirectory per project.
    #[arg(long)]
    pub store: PathBuf,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => run_train(&a),
        Command::Evaluate(a) => run_evaluate(&a),
        Command::ActiveSim(a) => run_active_sim(&a),
        Command::AttentionExport(a) => run_attention(&a),
        Command::Synth(a) => run_synth(&a),
        Command::Serve(a) => crate::service::serve(&a.host, a.port, &a.store),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn print_json(value: &impl Serialize) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    version: &'static str,
    variant: Variant,
    split: SplitKind,
    train: usize,
    test: usize,
    epochs: usize,
    final_loss: Option<f64>,
    last_k_average: Option<avtag::model::AveragedMetrics>,
}

fn run_train(a: &TrainArgs) -> CliResult<()> {
    let config = a.model.resolve()?;
    let ds = load_dataset(&a.corpus, &|c| scheme_for(c, config.scheme, a.attributes.clone()), &a.split.options())?;
    let (model, history) = train(&ds.train, &ds.test, &config, &ds.scheme)?;
    model.save(&a.out)?;
    let metrics = a.metrics.clone().unwrap_or_else(|| a.out.with_extension("metrics.jsonl"));
    write(&metrics, history.to_jsonl()?)?;
    print_json(&TrainSummary {
        version: TRAIN_SUMMARY_FORMAT,
        variant: config.variant,
        split: ds.split,
        train: ds.train.len(),
        test: ds.test.len(),
        epochs: history.len(),
        final_loss: history.records.last().map(|r| r.loss),
        last_k_average: history.last_k_average(config.last_k_average),
    })
}

#[derive(Serialize)]
struct EvalReport {
    version: &'static str,
    split: SplitKind,
    samples: usize,
    per_attribute: BTreeMap<String, Prf>,
    micro: Prf,
    last_k_average: Option<avtag::model::AveragedMetrics>,
}

fn prf_row(name: &str, p: &Prf) -> String {
    format!("{name:<16} {:>9.4} {:>9.4} {:>9.4}", p.precision, p.recall, p.f1)
}

fn run_evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let model = Model::load(&a.ckpt)?;
    model.check_compatible(a.variant, a.scheme)?;
    let scheme = model.scheme.clone();
    let ds = load_dataset(&a.corpus, &|_| Ok(scheme.clone()), &a.split.options())?;
    let Evaluation { per_attribute, micro } = model.evaluate(&ds.test)?;
    let last_k_average = match &a.history {
        Some(path) => MetricHistory::load(path)?.last_k_average(a.last_k.unwrap_or(model.config.last_k_average)),
        None => None,
    };
    println!("{:<16} {:>9} {:>9} {:>9}", "attribute", "precision", "recall", "f1");
    for (name, p) in &per_attribute {
        println!("{}", prf_row(name, p));
    }
    println!("{}", prf_row("micro", &micro));
    if let Some(avg) = &last_k_average {
        println!("last-{} average f1 {:.4}", avg.epochs, avg.f1);
    }
    let report = EvalReport {
        version: EVAL_FORMAT,
        split: ds.split,
        samples: ds.test.len(),
        per_attribute,
        micro,
        last_k_average,
    };
    if let Some(out) = &a.out {
        write(out, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct CurvePoint {
    pub version: &'static str,
    pub strategy: Strategy,
    pub seed: u64,
    pub round: usize,
    pub labeled: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BudgetSummary {
    pub labeled: usize,
    pub mean_f1: f64,
    pub min_f1: f64,
    pub max_f1: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct CurveSummary {
    pub version: &'static str,
    pub strategy: Strategy,
    pub seeds: Vec<u64>,
    pub budgets: Vec<BudgetSummary>,
}

/// Mean, min and max F per labeled-set size over all curve points.
pub fn summarize(strategy: Strategy, seeds: Vec<u64>, points: &[CurvePoint]) -> CurveSummary {
    let mut by_budget: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for p in points {
        by_budget.entry(p.labeled).or_default().push(p.f1);
    }
    let budgets = by_budget
        .into_iter()
        .map(|(labeled, fs)| BudgetSummary {
            labeled,
            mean_f1: fs.iter().sum::<f64>() / fs.len() as f64,
            min_f1: fs.iter().copied().fold(f64::INFINITY, f64::min),
            max_f1: fs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            seeds: fs.len(),
        })
        .collect();
    CurveSummary {
        version: CURVE_SUMMARY_FORMAT,
        strategy,
        seeds,
        budgets,
    }
}

fn run_active_sim(a: &ActiveSimArgs) -> CliResult<()> {
    let base = a.model.resolve()?;
    let ds = load_dataset(&a.corpus, &|c| scheme_for(c, base.scheme, a.attributes.clone()), &a.split.options())?;
    fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let seeds: Vec<u64> = (a.seed_base..a.seed_base + a.seeds).collect();
    let mut points = Vec::new();
    let mut curves = String::new();
    for &seed in &seeds {
        let model_config = ModelConfig { seed, ..base.clone() };
        let cfg = ALConfig {
            strategy: a.strategy,
            initial_labeled: a.initial,
            batch_size: a.batch,
            rounds: a.rounds,
            committee_epochs: a.committee_epochs,
            stop_threshold: a.stop_threshold,
            normalize_flips: a.normalize_flips,
            reinit_each_round: a.reinit,
            seed,
        };
        let mut state = ActiveLearningState::from_pool(&ds.train, &cfg, model_config, ds.scheme.clone())?;
        let mut oracle = SimulatedOracle::new(&ds.train);
        state.run(&cfg, &mut oracle, Some(&ds.test))?;
        write(&a.out.join(format!("rounds-seed{seed}.jsonl")), state.history_jsonl()?)?;
        for r in &state.history {
            let m = r.post_round_metrics.unwrap_or_default();
            let p = CurvePoint {
                version: CURVE_FORMAT,
                strategy: a.strategy,
                seed,
                round: r.round,
                labeled: r.labeled,
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
            };
            curves.push_str(&serde_json::to_string(&p)?);
            curves.push('\n');
            points.push(p);
        }
        log::info!("seed {seed}: {} rounds", state.history.len());
    }
    write(&a.out.join("curves.jsonl"), curves)?;
    let summary = summarize(a.strategy, seeds, &points);
    write(&a.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    print_json(&summary)
}

fn run_attention(a: &AttentionArgs) -> CliResult<()> {
    let model = Model::load(&a.ckpt)?;
    let prediction = model.predict_text(&a.text)?;
    let matrix = prediction
        .attention
        .ok_or_else(|| CliError::Invalid(format!("a {} model has no attention layer", model.variant())))?;
    fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let json = matrix.export_heatmap(&a.out.join("attention.csv"))?;
    println!("{}", json.display());
    Ok(())
}

fn run_synth(a: &SynthArgs) -> CliResult<()> {
    let spec = match &a.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            serde_json::from_str(&text)?
        }
        None => SynthSpec::dog_food(a.n_train, a.n_test, a.owa),
    };
    let corpus = generate_synthetic(&spec, a.seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    write_corpus(&a.out, &corpus)?;
    println!("{} records", corpus.len());
    Ok(())
}
