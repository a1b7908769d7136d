use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use fairmatch_core::dataio;
use fairmatch_core::fairmatch::{self as fm, DEFAULT_GRID_STEP};
use fairmatch_core::fairtest::{self, Subset, DEFAULT_CURVE_SEEDS};
use fairmatch_core::harness::{
    self, DatasetSpec, ExperimentConfig, ExperimentResults, MethodSpec, PropensityTarget, ReportFormat,
};
use fairmatch_core::learners::{LearnerKind, Model, ProbabilisticClassifier};
use fairmatch_core::metrics::{format_value, Metric, MetricReport};
use fairmatch_core::psm::{self, DistanceMode, MatchConfig};
use fairmatch_core::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_PARTIAL: u8 = 2;

#[derive(Parser)]
#[command(name = "fairmatch", version, about = "Fairness testing and mitigation with propensity score matching")]
struct Cli {
    /// Directory holding the data files and `schemas/`.
    #[arg(long, global = true, default_value = "data")]
    data_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check which dataset files are present.
    Fetch {
        /// Only check this dataset.
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Match one split, report subsets and draw fairness curves.
    Audit(AuditArgs),
    /// Fit FairMatch on one split and write its certificate.
    Mitigate(SingleArgs),
    /// Run datasets × methods × seeds and write reports.
    Experiment(ExperimentArgs),
    /// Scott-Knott ranks from a saved results archive.
    Rank(RankArgs),
}

#[derive(Args, Clone)]
struct MatchArgs {
    #[arg(long, default_value_t = 0.05)]
    caliper: f64,
    /// Neighbor pool size.
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value = "propensity", value_parser = ["propensity", "euclidean"])]
    distance: String,
    /// Allow pairs whose scores fall on different sides of 0.5.
    #[arg(long)]
    allow_straddling: bool,
    /// Fit a separate propensity model of the protected attribute.
    #[arg(long)]
    pa_propensity: bool,
}

impl MatchArgs {
    fn config(&self) -> anyhow::Result<MatchConfig> {
        let cfg = MatchConfig {
            k: self.k,
            caliper: self.caliper,
            distance_mode: self.distance.parse::<DistanceMode>()?,
            decision_boundary: (!self.allow_straddling).then_some(fm::DECISION_THRESHOLD),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn target(&self) -> PropensityTarget {
        if self.pa_propensity {
            PropensityTarget::ProtectedAttribute
        } else {
            PropensityTarget::Label
        }
    }
}

#[derive(Args)]
struct SingleArgs {
    /// Dataset id, optionally with `:attribute`.
    #[arg(long)]
    dataset: String,
    #[arg(long)]
    protected_attr: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "logistic")]
    learner: LearnerKind,
    #[arg(long, default_value_t = dataio::DEFAULT_TRAIN_FRACTION)]
    train_fraction: f64,
    #[arg(long, default_value_t = DEFAULT_GRID_STEP)]
    grid_step: f64,
    #[command(flatten)]
    matching: MatchArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct AuditArgs {
    #[command(flatten)]
    single: SingleArgs,
    /// Seeds for the fairness curves.
    #[arg(long, default_value_t = DEFAULT_CURVE_SEEDS)]
    repeats: usize,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Dataset ids (`adult:sex`, or `adult` with --protected-attr); repeatable.
    #[arg(long, required = true)]
    dataset: Vec<String>,
    #[arg(long)]
    protected_attr: Option<String>,
    /// Base seed; repeat i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = harness::DEFAULT_REPEATS)]
    repeats: usize,
    #[arg(long, default_value = "logistic")]
    learner: LearnerKind,
    #[arg(long, default_value_t = dataio::DEFAULT_TRAIN_FRACTION)]
    train_fraction: f64,
    #[arg(long, default_value_t = DEFAULT_GRID_STEP)]
    grid_step: f64,
    /// Methods to run.
    #[arg(long, value_delimiter = ',', default_value = "baseline,fairmatch")]
    methods: Vec<String>,
    /// Externally computed scores as `name=path.csv`; repeatable.
    #[arg(long)]
    external: Vec<String>,
    /// Skip subset reports and fairness curves.
    #[arg(long)]
    no_audit: bool,
    #[arg(long, value_delimiter = ',', default_value = "csv,json,svg")]
    formats: Vec<ReportFormat>,
    #[command(flatten)]
    matching: MatchArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct RankArgs {
    /// Results archive written by `experiment`.
    #[arg(long, default_value = "out/results.json")]
    results: PathBuf,
    /// Metrics to rank; all eight by default.
    #[arg(long, value_delimiter = ',')]
    metric: Vec<Metric>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn dataset_spec(value: &str, protected: Option<&str>) -> anyhow::Result<DatasetSpec> {
    match (value.split_once(':'), protected) {
        (Some((schema, pa)), _) => Ok(DatasetSpec::new(schema, pa)),
        (None, Some(pa)) => Ok(DatasetSpec::new(value, pa)),
        (None, None) => Err(Error::Config(format!("dataset `{value}` needs --protected-attr or a `:attribute` suffix")).into()),
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write(dir: &Path, name: &str, contents: &str) -> anyhow::Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn print_report(label: &str, report: &MetricReport) {
    let cells: Vec<String> = Metric::ALL
        .iter()
        .map(|m| format!("{}={}", m.name(), report.get(*m).map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into())))
        .collect();
    println!("{label:<14} {}", cells.join(" "));
}

struct Prepared {
    spec: DatasetSpec,
    split: dataio::SplitPair,
    model: Model,
    propensity: psm::PropensityScores,
    match_cfg: MatchConfig,
}

fn prepare(data_dir: &Path, args: &SingleArgs) -> anyhow::Result<Prepared> {
    let spec = dataset_spec(&args.dataset, args.protected_attr.as_deref())?;
    let match_cfg = args.matching.config()?;
    fm::grid_intervals(args.grid_step)?;
    harness::load_schema(data_dir, &spec.schema)?.protected_attribute(&spec.protected)?;
    let (data, _) = harness::load_prepared(data_dir, &spec)?;
    let split = dataio::split(&data, args.train_fraction, args.seed)?;
    let model = Model::fit(args.learner, &split.train.features, &split.train.labels)?;
    let propensity = harness::propensity_for(args.matching.target(), &model, &split)?;
    Ok(Prepared {
        spec,
        split,
        model,
        propensity,
        match_cfg,
    })
}

fn audit(data_dir: &Path, args: &AuditArgs) -> anyhow::Result<u8> {
    let p = prepare(data_dir, &args.single)?;
    if args.repeats == 0 {
        return Err(Error::Config("repeats must be positive".into()).into());
    }
    let test = &p.split.test;
    let report = fairtest::subgroup_report(&p.model, test, Some(&p.propensity), &p.match_cfg, args.single.seed)?;
    let out = &args.single.out;
    create_dir(out)?;
    let stem = harness::file_stem(&p.spec.key());
    println!("{} seed {}: {} test rows, {} matched pairs", p.spec.key(), args.single.seed, test.len(), report.matching.pairs.len());
    let mut partial = false;
    for entry in &report.entries {
        match &entry.report {
            Some(r) => print_report(entry.subset.name(), r),
            None => {
                partial = true;
                println!("{:<14} failed: {}", entry.subset.name(), entry.failure.as_deref().unwrap_or(""));
            }
        }
    }
    write(out, &format!("{stem}_subgroup.csv"), &report.metrics_csv())?;
    write(out, &format!("{stem}_deltas.csv"), &report.deltas_csv())?;
    write(out, &format!("{stem}_subgroup.json"), &serde_json::to_string_pretty(&report)?)?;
    let base = args.single.seed;
    let seeds: Vec<u64> = (0..args.repeats as u64).map(|i| base.wrapping_add(i)).collect();
    for metric in Metric::FAIRNESS {
        let curve = fairtest::fairness_curve(&p.model, test, &report.matching, metric, &fairtest::default_grid(), &seeds)?;
        let auc = curve.f_auc.map(format_value).unwrap_or_else(|| "undefined".into());
        println!("f-AUC {:<4} {auc}", metric.name());
        write(out, &format!("{stem}_curve_{}.csv", metric.name()), &curve.to_csv())?;
        let title = format!("{} {}", p.spec.key(), metric.name());
        write(out, &format!("{stem}_curve_{}.svg", metric.name()), &curve.to_svg(&title))?;
    }
    let matched = report.entry(Subset::PsmMatched).ratio;
    println!("matched ratio {}", format_value(matched));
    Ok(if partial { EXIT_PARTIAL } else { 0 })
}

fn mitigate(data_dir: &Path, args: &SingleArgs) -> anyhow::Result<u8> {
    let p = prepare(data_dir, args)?;
    let test = &p.split.test;
    let cert = fm::fit_fairmatch(&p.model, test, Some(&p.propensity), &p.match_cfg, args.grid_step)?;
    let scores = p.model.predict_proba(&test.features)?;
    let before = MetricReport::evaluate(&test.labels, &fm::default_predict(&scores), &test.pa)?;
    let after = MetricReport::evaluate(&test.labels, &cert.predict(&p.model, test)?, &test.pa)?;
    let t = &cert.thresholds;
    println!(
        "{} seed {}: theta_priv={} theta_unpriv={} p={}{}",
        p.spec.key(),
        args.seed,
        format_value(t.theta_priv),
        format_value(t.theta_unpriv),
        format_value(t.p_value),
        if t.searched { "" } else { " (identity fallback)" }
    );
    print_report("baseline", &before);
    print_report("fairmatch", &after);
    create_dir(&args.out)?;
    let stem = harness::file_stem(&p.spec.key());
    write(&args.out, &format!("{stem}_certificate.json"), &cert.to_json()?)?;
    let model_path = args.out.join(format!("{stem}_model.json"));
    p.model.save(&model_path)?;
    println!("wrote {}", model_path.display());
    Ok(0)
}

fn experiment(data_dir: &Path, args: &ExperimentArgs) -> anyhow::Result<u8> {
    let datasets = args
        .dataset
        .iter()
        .map(|d| dataset_spec(d, args.protected_attr.as_deref()))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut methods = Vec::new();
    for m in &args.methods {
        methods.push(match m.as_str() {
            "baseline" => MethodSpec::Baseline,
            "fairmatch" => MethodSpec::Fairmatch,
            other => return Err(Error::Config(format!("unknown method `{other}`")).into()),
        });
    }
    for e in &args.external {
        let Some((name, path)) = e.split_once('=') else {
            return Err(Error::Config(format!("--external expects name=path, got `{e}`")).into());
        };
        methods.push(MethodSpec::External {
            name: name.into(),
            path: path.into(),
        });
    }
    let cfg = ExperimentConfig {
        datasets,
        data_dir: data_dir.to_path_buf(),
        learner: args.learner,
        methods,
        repeats: args.repeats,
        train_fraction: args.train_fraction,
        base_seed: args.seed,
        seeds: None,
        match_cfg: args.matching.config()?,
        grid_step: args.grid_step,
        propensity: args.matching.target(),
        audit: !args.no_audit,
        curve_metrics: if args.no_audit { Vec::new() } else { Metric::FAIRNESS.to_vec() },
    };
    let results = harness::run_experiment(&cfg)?;
    for path in harness::emit_reports(&results, &args.formats, &args.out)? {
        println!("wrote {}", path.display());
    }
    summarize(&results);
    let failures = results.records.iter().filter(|r| r.is_failure()).count();
    if failures > 0 {
        eprintln!("{failures} of {} cells failed", results.records.len());
        return Ok(EXIT_PARTIAL);
    }
    Ok(0)
}

fn summarize(results: &ExperimentResults) {
    for dataset in results.dataset_keys() {
        for method in results.config.methods.iter().map(MethodSpec::name) {
            let reports: Vec<MetricReport> = results.records_for(&dataset, &method).filter_map(|r| r.report).collect();
            let mean = |m: Metric| {
                let v: Vec<f64> = reports.iter().filter_map(|r| r.get(m)).collect();
                fairtest::mean_std(&v).0
            };
            let avg = MetricReport {
                accuracy: mean(Metric::Accuracy),
                precision: mean(Metric::Precision),
                recall: mean(Metric::Recall),
                f1: mean(Metric::F1),
                aod: mean(Metric::Aod),
                eod: mean(Metric::Eod),
                spd: mean(Metric::Spd),
                di: mean(Metric::Di),
            };
            print_report(&format!("{dataset} {method}"), &avg);
        }
    }
}

fn rank(args: &RankArgs) -> anyhow::Result<u8> {
    let text = std::fs::read_to_string(&args.results).with_context(|| format!("cannot read {}", args.results.display()))?;
    let results = ExperimentResults::from_json(&text)?;
    let metrics = if args.metric.is_empty() { Metric::ALL.to_vec() } else { args.metric.clone() };
    create_dir(&args.out)?;
    let mut partial = false;
    for metric in metrics {
        let rankings = match harness::rank_methods(&results, metric) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("{}: {e}", metric.name());
                partial = true;
                continue;
            }
        };
        for r in rankings {
            println!("{} {}", r.dataset, metric.name());
            for e in &r.table.entries {
                println!("  {} {:<12} median {}", e.rank, e.treatment, format_value(e.median));
            }
            let name = format!("{}_rank_{}.csv", harness::file_stem(&r.dataset), metric.name());
            write(&args.out, &name, &r.table.to_csv())?;
        }
    }
    Ok(if partial { EXIT_PARTIAL } else { 0 })
}

fn fetch(data_dir: &Path, only: Option<&str>) -> anyhow::Result<u8> {
    let schema_dir = data_dir.join("schemas");
    let mut ids: Vec<String> = std::fs::read_dir(&schema_dir)
        .with_context(|| format!("cannot list {}", schema_dir.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.path().file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    ids.sort();
    if let Some(only) = only {
        if !ids.iter().any(|i| i == only) {
            bail!(Error::Config(format!("unknown dataset `{only}`")));
        }
        ids.retain(|i| i == only);
    }
    let mut missing = 0;
    for id in ids {
        let schema = harness::load_schema(data_dir, &id)?;
        let file = schema.data_file.clone().unwrap_or_else(|| format!("{id}.csv"));
        let path = data_dir.join(&file);
        if path.exists() {
            println!("{id:<8} present  {}", path.display());
        } else {
            missing += 1;
            println!("{id:<8} missing  {}", path.display());
        }
    }
    if missing > 0 {
        println!("download missing files with: python3 scripts/fetch_datasets.py --out {}", data_dir.display());
        return Ok(EXIT_PARTIAL);
    }
    Ok(0)
}

fn run(cli: &Cli) -> anyhow::Result<u8> {
    match &cli.command {
        Command::Fetch { dataset } => fetch(&cli.data_dir, dataset.as_deref()),
        Command::Audit(args) => audit(&cli.data_dir, args),
        Command::Mitigate(args) => mitigate(&cli.data_dir, args),
        Command::Experiment(args) => experiment(&cli.data_dir, args),
        Command::Rank(args) => rank(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}
