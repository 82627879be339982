use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use aosoboost::bench::{self, BenchReport, RunSummary};
use aosoboost::booster::{AbcBaseRule, Algorithm, TrainConfig};
use aosoboost::data::{self, DataFormat, Dataset};
use aosoboost::model_io;
use aosoboost::numerics::ClassLabel;
use aosoboost::pair::PairRule;

#[derive(Parser)]
#[command(
    name = "aosoboost",
    version,
    about = "Multiclass LogitBoost with adaptive one-vs-one vector trees"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and report its final training loss and test errors.
    Train(TrainArgs),
    /// Predict labels (and optionally probabilities) for a data file.
    Predict(PredictArgs),
    /// Score a predictions file against the labels of a data file.
    Eval(EvalArgs),
    /// Train two algorithms on an equal tree budget and compare them.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    Aoso,
    Abc,
    Logitboost,
}

impl From<AlgoArg> for Algorithm {
    fn from(a: AlgoArg) -> Self {
        match a {
            AlgoArg::Aoso => Algorithm::Aoso,
            AlgoArg::Abc => Algorithm::Abc,
            AlgoArg::Logitboost => Algorithm::Logitboost,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PairRuleArg {
    First,
    Second,
}

#[derive(Clone, Copy, ValueEnum)]
enum AbcBaseArg {
    Exhaustive,
    Worst,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Libsvm,
    Csv,
}

impl From<FormatArg> for DataFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Libsvm => DataFormat::Libsvm,
            FormatArg::Csv => DataFormat::Csv,
        }
    }
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Input format; detected from the content when omitted.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    /// Zero-based label column for CSV input (default: last column).
    #[arg(long)]
    label_column: Option<usize>,
}

impl DataArgs {
    fn load(&self, path: &Path) -> anyhow::Result<Dataset> {
        data::load(path, self.format.map(Into::into), self.label_column)
            .with_context(|| format!("loading {}", path.display()))
    }
}

#[derive(Args, Clone)]
struct BoostArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Hold out this fraction of the training data as the test set when --test is absent.
    #[arg(long)]
    holdout: Option<f64>,
    #[arg(short = 'J', long = "leaves", default_value_t = 20)]
    leaves: usize,
    #[arg(short = 'v', long, default_value_t = 0.1, allow_negative_numbers = true)]
    shrinkage: f64,
    #[arg(long, value_enum, default_value = "second")]
    pair_rule: PairRuleArg,
    #[arg(long, value_enum, default_value = "exhaustive")]
    abc_base: AbcBaseArg,
    #[arg(long, default_value_t = 1)]
    min_node: usize,
    /// Record metrics every this many trees.
    #[arg(long, default_value_t = 50)]
    eval_every: usize,
    /// Quantile bins per feature (2..=256); exact split search when omitted.
    #[arg(long)]
    bins: Option<usize>,
    /// Worker threads for split search (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    data: DataArgs,
}

impl BoostArgs {
    fn config(&self, algorithm: Algorithm, max_iterations: usize) -> TrainConfig {
        TrainConfig {
            algorithm,
            max_leaves: self.leaves,
            shrinkage: self.shrinkage,
            max_iterations,
            pair_rule: match self.pair_rule {
                PairRuleArg::First => PairRule::FirstOrder,
                PairRuleArg::Second => PairRule::SecondOrder,
            },
            abc_base_rule: match self.abc_base {
                AbcBaseArg::Exhaustive => AbcBaseRule::Exhaustive,
                AbcBaseArg::Worst => AbcBaseRule::WorstClass,
            },
            stop_eps: TrainConfig::default().stop_eps,
            min_node_size: self.min_node,
            eval_every: self.eval_every,
            bins: self.bins,
            seed: self.seed,
        }
    }

    /// Training set and optional test set, the latter aligned to the training classes.
    fn datasets(&self) -> anyhow::Result<(Dataset, Option<Dataset>)> {
        let train = self.data.load(&self.train)?;
        if let Some(note) = train.label_report() {
            eprintln!("note: {note}");
        }
        match (&self.test, self.holdout) {
            (Some(_), Some(_)) => bail!("--test and --holdout are mutually exclusive"),
            (Some(path), None) => {
                let test = self.data.load(path)?;
                let d = train.num_features().max(test.num_features());
                let train = train.padded_to(d)?;
                let test = test
                    .aligned_to(train.label_values(), d)
                    .with_context(|| format!("aligning {} to the training classes", path.display()))?;
                Ok((train, Some(test)))
            }
            (None, Some(fraction)) => {
                let (train, test) = train.split_holdout(fraction, self.seed)?;
                Ok((train, Some(test)))
            }
            (None, None) => Ok((train, None)),
        }
    }

    fn init_threads(&self) -> anyhow::Result<()> {
        if let Some(n) = self.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .context("configuring the thread pool")?;
        }
        Ok(())
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "aoso")]
    algo: AlgoArg,
    /// Maximum boosting iterations M (AOSO adds one tree per iteration,
    /// ABC K-1, LogitBoost K).
    #[arg(short = 'M', long = "trees", default_value_t = 10_000)]
    trees: usize,
    #[arg(long)]
    model_out: Option<PathBuf>,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    #[command(flatten)]
    boost: BoostArgs,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write class probabilities after each label.
    #[arg(long)]
    proba: bool,
    #[command(flatten)]
    data_args: DataArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// File with one predicted label per line (extra comma-separated fields are ignored).
    #[arg(long)]
    predictions: PathBuf,
    /// Data file holding the true labels.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    data_args: DataArgs,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_enum, default_value = "abc")]
    algo_a: AlgoArg,
    #[arg(long, value_enum, default_value = "aoso")]
    algo_b: AlgoArg,
    /// Tree budget shared by both runs; each gets budget / trees-per-iteration iterations.
    #[arg(long, default_value_t = 10_000)]
    budget: usize,
    /// Write the full report as JSON.
    #[arg(long)]
    report_out: Option<PathBuf>,
    /// Write per-run metrics as <prefix>-a.csv and <prefix>-b.csv.
    #[arg(long)]
    metrics_prefix: Option<String>,
    #[command(flatten)]
    boost: BoostArgs,
}

/// Failures that should exit with the usage status.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn check_config(config: &TrainConfig) -> anyhow::Result<()> {
    config.validate().map_err(|e| UsageError(e.to_string()).into())
}

fn write_metrics(path: &Path, rows: &[bench::MetricsRow]) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    bench::write_metrics(BufWriter::new(file), rows)?;
    Ok(())
}

fn summary_line(summary: &RunSummary) -> String {
    let test = match (summary.test_errors, summary.test_examples) {
        (Some(e), Some(n)) => format!("{e}/{n}"),
        _ => "-".to_string(),
    };
    format!(
        "trees={} train_loss={:.6e} test_errors={test}",
        summary.trees, summary.final_train_loss
    )
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let config = args.boost.config(args.algo.into(), args.trees);
    check_config(&config)?;
    args.boost.init_threads()?;
    let (train, test) = args.boost.datasets()?;
    let (model, summary) = bench::run(&train, test.as_ref(), &config)?;
    if let Some(path) = &args.model_out {
        model_io::save_model(&model, path).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &args.metrics_out {
        write_metrics(path, &summary.metrics)?;
    }
    println!("{}", summary_line(&summary));
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> anyhow::Result<()> {
    let model = model_io::load_model(&args.model).with_context(|| format!("loading {}", args.model.display()))?;
    let data = args.data_args.load(&args.data)?;
    if data.num_features() > model.num_features() {
        bail!(
            "{} has {} features, the model expects {}",
            args.data.display(),
            data.num_features(),
            model.num_features()
        );
    }
    let data = data.padded_to(model.num_features())?;
    let scores = model.score_dataset(&data)?;
    let file = File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut out = BufWriter::new(file);
    let mut p = vec![0.0; model.num_classes()];
    for i in 0..scores.rows() {
        let f = scores.row(i);
        let label = model.raw_label(ClassLabel::from_index(aosoboost::numerics::argmax(f)));
        write!(out, "{label}")?;
        if args.proba {
            aosoboost::numerics::link_into(f, &mut p);
            for v in &p {
                write!(out, ",{v}")?;
            }
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

fn read_predictions(path: &Path) -> anyhow::Result<Vec<i64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let field = l.split(',').next().unwrap_or("").trim();
            field
                .parse::<i64>()
                .with_context(|| format!("{}:{}: bad label `{field}`", path.display(), n + 1))
        })
        .collect()
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let predicted = read_predictions(&args.predictions)?;
    let data = args.data_args.load(&args.data)?;
    let truth = data.raw_labels();
    if predicted.len() != truth.len() {
        bail!("{} predictions for {} examples", predicted.len(), truth.len());
    }
    let mut classes: Vec<i64> = truth.iter().chain(&predicted).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    let index = |v: i64| ClassLabel::from_index(classes.binary_search(&v).expect("value collected above"));
    let p: Vec<ClassLabel> = predicted.iter().map(|&v| index(v)).collect();
    let t: Vec<ClassLabel> = truth.iter().map(|&v| index(v)).collect();
    let report = bench::evaluate(&p, &t, classes.len())?;
    println!(
        "errors={} total={} error_rate={:.6}",
        report.errors, report.total, report.error_rate
    );
    println!("confusion (rows: true, columns: predicted)");
    let width = classes
        .iter()
        .map(|c| c.to_string().len())
        .chain(report.confusion.iter().flatten().map(|c| c.to_string().len()))
        .max()
        .unwrap_or(1);
    print!("{:>width$}", "");
    for c in &classes {
        print!(" {c:>width$}");
    }
    println!();
    for (c, row) in classes.iter().zip(&report.confusion) {
        print!("{c:>width$}");
        for v in row {
            print!(" {v:>width$}");
        }
        println!();
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> anyhow::Result<()> {
    let (a, b): (Algorithm, Algorithm) = (args.algo_a.into(), args.algo_b.into());
    check_config(&args.boost.config(a, 1))?;
    if args.budget == 0 {
        return Err(UsageError("--budget must be positive".into()).into());
    }
    args.boost.init_threads()?;
    let (train, test) = args.boost.datasets()?;
    let report: BenchReport = bench::compare(&train, test.as_ref(), &args.boost.config(a, 1), a, b, args.budget)?;
    if let Some(prefix) = &args.metrics_prefix {
        write_metrics(Path::new(&format!("{prefix}-a.csv")), &report.a.metrics)?;
        write_metrics(Path::new(&format!("{prefix}-b.csv")), &report.b.metrics)?;
    }
    if let Some(path) = &args.report_out {
        let text = serde_json::to_string_pretty(&report)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    println!("budget={} trees", report.tree_budget);
    println!("a={} {}", a, summary_line(&report.a));
    println!("b={} {}", b, summary_line(&report.b));
    println!("R={:.4}", report.ratio);
    match report.loss_matched_ratio {
        Some(r) => println!("loss_matched_R={r:.4}"),
        None => println!("loss_matched_R=-"),
    }
    if let Some(s) = report.significance {
        println!("p_value={:.4} z={:.4}", s.p_value, s.z_stat);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
