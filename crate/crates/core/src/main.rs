use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use drlih::config::{Profile, RunConfig};
use drlih::dataio::{self, make_split, synth_clusters, Dataset, Similarity, Split};
use drlih::linalg::{streams, Rng};
use drlih::oracle;
use drlih::policy::PolicyParams;
use drlih::retrieval::{self, EmptyPolicy, Encoder, EvalOptions, MetricsReport};
use drlih::reward::RewardMode;
use drlih::trainer::{self, TrainLog};
use drlih::Error;

#[derive(Parser)]
#[command(name = "drlih", version, about = "Sequential image hashing with a recurrent policy agent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic Gaussian-cluster dataset.
    Synth(SynthArgs),
    /// Write the initial checkpoint a `train` run would start from.
    Init(RunArgs),
    /// Train the agent; writes the checkpoint, training log, metrics and manifest.
    Train(RunArgs),
    /// Write `id,code` for every image of a dataset.
    Encode(EncodeArgs),
    /// Evaluate a checkpoint on the query/database split.
    Eval(EvalArgs),
    /// Compare the agent against the no-group and no-sequence baselines.
    Ablate(AblateArgs),
    /// Run the brute-force oracle suite.
    Check(CheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 125)]
    per_class: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; `.csv` selects CSV, anything else the binary format.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    /// Feature file (binary, or CSV when the name ends in `.csv`).
    #[arg(long)]
    features: PathBuf,
    /// Labels are read from the feature file itself. This is the only
    /// supported layout; the flag is accepted for explicit scripts.
    #[arg(long)]
    labels_inline: bool,
}

#[derive(Args, Default)]
struct Overrides {
    /// TOML config or a previous run's manifest.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "config")]
    profile: Option<Profile>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    bits: Option<usize>,
    #[arg(long)]
    group: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    reward_mode: Option<RewardMode>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay_every: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// One policy head shared by every bit.
    #[arg(long)]
    tied_policy_layer: bool,
    /// Subtract the per-group batch-mean reward in REINFORCE.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    similarity: Option<Similarity>,
    #[arg(long)]
    query_per_class: Option<usize>,
    #[arg(long)]
    train_per_class: Option<usize>,
    /// Keep query images in the retrieval database.
    #[arg(long)]
    query_in_db: bool,
}

impl Overrides {
    fn resolve(&self) -> drlih::Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::for_profile(self.profile.unwrap_or_default()),
        };
        c.run = None;
        let t = &mut c.train;
        macro_rules! set {
            ($($flag:ident => $field:expr),* $(,)?) => {
                $(if let Some(v) = self.$flag { $field = v; })*
            };
        }
        set! {
            seed => t.seed,
            steps => t.steps,
            bits => t.bits,
            group => t.group,
            hidden => t.hidden,
            reward_mode => t.reward_mode,
            lr => t.lr0,
            lr_decay_every => t.lr_decay_every,
            batch_size => t.batch_size,
            margin => t.margin,
            weight_decay => t.weight_decay,
            momentum => t.momentum,
            eval_every => t.eval_every,
            similarity => t.similarity,
            query_per_class => c.split.query_per_class,
            train_per_class => c.split.train_per_class,
        }
        t.tied_policy |= self.tied_policy_layer;
        t.baseline_subtract |= self.baseline;
        c.split.query_in_db |= self.query_in_db;
        c.train.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Output CSV with columns `id,code`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricArgs {
    /// MAP over the top N returns only.
    #[arg(long)]
    top_n: Option<usize>,
    #[arg(long, default_value_t = 2)]
    radius: u32,
    /// How queries with no returns inside the radius count.
    #[arg(long, default_value_t = EmptyPolicy::Zero)]
    empty_policy: EmptyPolicy,
}

impl MetricArgs {
    fn options(&self, similarity: Similarity) -> EvalOptions {
        EvalOptions {
            top_n: self.top_n,
            radius: self.radius,
            empty_policy: self.empty_policy,
            similarity,
            ..EvalOptions::default()
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    overrides: Overrides,
    #[command(flatten)]
    metrics: MetricArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    overrides: Overrides,
    /// Seeds `seed, seed+1, ...`.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write `oracle_report.txt` and `oracle_report.csv` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
struct OracleFailure(usize);

impl std::fmt::Display for OracleFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} oracle check(s) failed", self.0)
    }
}

impl std::error::Error for OracleFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<OracleFailure>().is_some() {
        return 5;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InvalidArgument(_)) => 2,
        Some(Error::NonFinite(_)) => 4,
        Some(Error::Data(_) | Error::Shape { .. } | Error::Io(_)) => 3,
        None if err.downcast_ref::<std::io::Error>().is_some() => 3,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Init(a) => cmd_init(a),
        Command::Train(a) => cmd_train(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Check(a) => cmd_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_dataset(args: &DataArgs) -> anyhow::Result<Dataset> {
    let path = &args.features;
    if !path.is_file() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("feature file {} not found", path.display()),
        ))
        .into());
    }
    let ds = if is_csv(path) {
        dataio::load_csv(path)
    } else {
        dataio::load_features(path)
    };
    ds.with_context(|| format!("loading {}", path.display()))
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn split_for(ds: &Dataset, config: &RunConfig) -> drlih::Result<Split> {
    make_split(ds, &config.split, &mut Rng::new(config.train.seed).fork(streams::SPLIT))
}

/// Output directory that only appears under its final name once complete.
struct StagedDir {
    tmp: tempfile::TempDir,
    target: PathBuf,
}

impl StagedDir {
    fn new(target: &Path) -> anyhow::Result<Self> {
        if target.exists() && fs::read_dir(target)?.next().is_some() {
            return Err(Error::InvalidArgument(format!("output directory {} is not empty", target.display())).into());
        }
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent)?;
        let tmp = tempfile::Builder::new().prefix(".drlih-out-").tempdir_in(&parent)?;
        Ok(StagedDir { tmp, target: target.to_path_buf() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.tmp.path().join(name)
    }

    fn commit(self) -> anyhow::Result<()> {
        if self.target.exists() {
            fs::remove_dir(&self.target)?;
        }
        let staged = self.tmp.keep();
        fs::rename(&staged, &self.target)
            .with_context(|| format!("moving output into {}", self.target.display()))?;
        Ok(())
    }
}

fn write_with<F>(path: &Path, f: F) -> anyhow::Result<()>
where
    F: FnOnce(&mut BufWriter<fs::File>) -> drlih::Result<()>,
{
    let mut w = BufWriter::new(fs::File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<()> {
    let ds = synth_clusters(a.classes, a.per_class, a.dim, a.sigma, &mut Rng::new(a.seed).fork(streams::SYNTH))?;
    let parent = match a.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent)?;
    let tmp = tempfile::NamedTempFile::new_in(&parent)?;
    if is_csv(&a.out) {
        ds.write_csv(tmp.as_file())?;
    } else {
        fs::write(tmp.path(), ds.to_bytes())?;
    }
    tmp.persist(&a.out)?;
    println!("wrote {} images ({} classes, dim {}) to {}", ds.len(), a.classes, a.dim, a.out.display());
    Ok(())
}

fn cmd_init(a: RunArgs) -> anyhow::Result<()> {
    let config = a.overrides.resolve()?;
    let ds = load_dataset(&a.data)?;
    let params = trainer::initial_params(&config.train, ds.dim())?;
    let out = StagedDir::new(&a.out)?;
    params.save(out.path("model.ckpt"))?;
    config.write_manifest(out.path("manifest.toml"), "init", Some(&a.data.features))?;
    out.commit()?;
    println!("initial checkpoint written to {}", a.out.display());
    Ok(())
}

fn write_metrics(out: &StagedDir, report: &MetricsReport) -> anyhow::Result<()> {
    write_with(&out.path("map.csv"), |w| report.write_map_csv(w))?;
    write_with(&out.path("topk_precision.csv"), |w| report.write_topk_csv(w))?;
    write_with(&out.path("pr_curve.csv"), |w| report.write_pr_csv(w))?;
    write_with(&out.path("radius2.csv"), |w| report.write_radius_csv(w))?;
    Ok(())
}

fn write_log(out: &StagedDir, name: &str, log: &TrainLog) -> anyhow::Result<()> {
    write_with(&out.path(name), |w| log.write_csv(w))
}

fn cmd_train(a: RunArgs) -> anyhow::Result<()> {
    let config = a.overrides.resolve()?;
    let ds = load_dataset(&a.data)?;
    let split = split_for(&ds, &config)?;
    let out = StagedDir::new(&a.out)?;
    let outcome = trainer::train(&ds, &split, &config.train)?;
    outcome.params.save(out.path("model.ckpt"))?;
    write_log(&out, "train_log.csv", &outcome.log)?;
    let opts = EvalOptions { similarity: config.train.similarity, ..EvalOptions::default() };
    let report = retrieval::evaluate_split(&outcome.params, &ds, &split, &opts)?;
    write_metrics(&out, &report)?;
    config.write_manifest(out.path("manifest.toml"), "train", Some(&a.data.features))?;
    out.commit()?;
    if let Some(m) = outcome.log.initial_map {
        println!("initial MAP {m:.4}");
    }
    println!("final MAP {:.4} after {} steps; outputs in {}", report.map, config.train.steps, a.out.display());
    Ok(())
}

fn cmd_encode(a: EncodeArgs) -> anyhow::Result<()> {
    let params = PolicyParams::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let ds = load_dataset(&a.data)?;
    let all: Vec<usize> = (0..ds.len()).collect();
    let codes = retrieval::encode_all(&params, &ds, &all)?;
    let tmp = tempfile::NamedTempFile::new_in(a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        writeln!(w, "id,code")?;
        for (id, code) in ds.ids().iter().zip(&codes) {
            writeln!(w, "{id},{code}")?;
        }
        w.flush()?;
    }
    tmp.persist(&a.out)?;
    println!("encoded {} images with {} bits", codes.len(), params.code_len());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let config = a.overrides.resolve()?;
    let params = PolicyParams::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let ds = load_dataset(&a.data)?;
    let split = split_for(&ds, &config)?;
    let report = retrieval::evaluate_split(&params, &ds, &split, &a.metrics.options(config.train.similarity))?;
    let out = StagedDir::new(&a.out)?;
    write_metrics(&out, &report)?;
    config.write_manifest(out.path("manifest.toml"), "eval", Some(&a.data.features))?;
    out.commit()?;
    println!(
        "MAP {:.4} over {} queries; precision within radius {} = {:.4}",
        report.map, report.queries_evaluated, report.radius, report.radius_precision
    );
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> anyhow::Result<()> {
    let base = a.overrides.resolve()?;
    if a.seeds == 0 {
        bail!(Error::InvalidArgument("--seeds must be >= 1".into()));
    }
    let ds = load_dataset(&a.data)?;
    let out = StagedDir::new(&a.out)?;
    let variants = ["drlih", "baseline_ng", "baseline_noseq"];
    let mut maps = vec![Vec::new(); variants.len()];
    let mut rows = String::from("seed,variant,initial_map,final_map\n");
    for s in 0..a.seeds {
        let mut config = base.clone();
        config.train.seed = base.train.seed + s;
        let split = split_for(&ds, &config)?;
        let opts = EvalOptions { similarity: config.train.similarity, ..EvalOptions::default() };
        for (v, name) in variants.iter().enumerate() {
            let (log, report) = match v {
                0 | 1 => {
                    let cfg = if v == 0 { config.train.clone() } else { config.train.no_groups() };
                    let o = trainer::train(&ds, &split, &cfg)?;
                    (o.log, retrieval::evaluate_split(&o.params, &ds, &split, &opts)?)
                }
                _ => {
                    let o = trainer::train_noseq(&ds, &split, &config.train)?;
                    (o.log, retrieval::evaluate_split(&o.params, &ds, &split, &opts)?)
                }
            };
            let dir = format!("seed{}_{name}", config.train.seed);
            fs::create_dir(out.path(&dir))?;
            write_log(&out, &format!("{dir}/train_log.csv"), &log)?;
            write_with(&out.path(&format!("{dir}/map.csv")), |w| report.write_map_csv(w))?;
            write_with(&out.path(&format!("{dir}/topk_precision.csv")), |w| report.write_topk_csv(w))?;
            write_with(&out.path(&format!("{dir}/pr_curve.csv")), |w| report.write_pr_csv(w))?;
            write_with(&out.path(&format!("{dir}/radius2.csv")), |w| report.write_radius_csv(w))?;
            let init = log.initial_map.map(|m| m.to_string()).unwrap_or_default();
            rows.push_str(&format!("{},{name},{init},{}\n", config.train.seed, report.map));
            maps[v].push(report.map);
        }
    }
    fs::write(out.path("ablation_runs.csv"), rows)?;
    let means: Vec<f64> = maps.iter().map(|m| m.iter().sum::<f64>() / m.len() as f64).collect();
    let mut table = String::from("variant,mean_map,min_map,max_map,seeds\n");
    println!("{:<16} {:>9} {:>9} {:>9}", "variant", "mean MAP", "min", "max");
    for ((name, m), mean) in variants.iter().zip(&maps).zip(&means) {
        let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        table.push_str(&format!("{name},{mean},{lo},{hi},{}\n", m.len()));
        println!("{name:<16} {mean:>9.4} {lo:>9.4} {hi:>9.4}");
    }
    fs::write(out.path("comparison.csv"), table)?;
    base.write_manifest(out.path("manifest.toml"), "ablate", Some(&a.data.features))?;
    out.commit()?;
    let ordered = means[0] >= means[1] && means[1] >= means[2];
    println!("ordering drlih >= baseline_ng >= baseline_noseq: {}", if ordered { "holds" } else { "does not hold" });
    Ok(())
}

fn cmd_check(a: CheckArgs) -> anyhow::Result<()> {
    let report = oracle::run_suite(a.seed)?;
    print!("{}", report.to_text());
    if let Some(dir) = &a.out {
        let out = StagedDir::new(dir)?;
        fs::write(out.path("oracle_report.txt"), report.to_text())?;
        fs::write(out.path("oracle_report.csv"), report.to_csv())?;
        out.commit()?;
    }
    let failed = report.lines.iter().filter(|l| !l.passed).count();
    if failed > 0 {
        return Err(OracleFailure(failed).into());
    }
    Ok(())
}
