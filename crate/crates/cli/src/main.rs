mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use llpcs::bagging::{build_bags, read_bags, write_bags, MixedMode, Regime, DEFAULT_MIXED_SIZES};
use llpcs::bound_lab::{appendix_c_sweep, check_lemma1, check_theorem1_step, BoundReport, Lemma1Config};
use llpcs::data::{generate_synthetic, load_csv, save_dataset, CsvSchema, Domain, SynthSpec};
use llpcs::trainer::{
    grid_search, multi_run, run_once, save_results_csv, summary_json, with_jobs, write_timing_log, RunResult,
};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;

use config::{read_config, ExperimentConfig};

#[derive(Parser, Debug)]
#[command(name = "llpcs", version, about = "Label-proportion learning with a shifted labelled source domain")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment or generator config (TOML; `.json` files are read as JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory or file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace every seed named in the config with this value.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Worker threads for sweeps and multi-trial runs (0 = one per core).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic source/target/test CSVs with a schema sidecar.
    GenSynth {
        #[command(flatten)]
        common: Common,
    },
    /// Partition a dataset CSV into bags.
    Bag(BagArgs),
    /// One run per method and bag size.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Learning-rate × weight grid search per method and bag size.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Seeded repeated runs with mean ± std summaries.
    Multirun {
        #[command(flatten)]
        common: Common,
    },
    /// Monte Carlo checks of the bag-loss inequalities.
    BoundCheck(BoundArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RegimeKind {
    Random,
    Correlated,
    Sbb,
    Bbb,
    TwoStage,
}

#[derive(Args, Debug)]
struct BagArgs {
    /// Dataset CSV.
    #[arg(long)]
    dataset: PathBuf,
    /// Schema for the dataset (defaults to `<dataset>.schema.json`, then `schema.json` beside it).
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = RegimeKind::Random)]
    regime: RegimeKind,
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// Feature for correlated bags.
    #[arg(long)]
    feature: Option<String>,
    /// Bag sizes for mixed regimes.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BoundKind {
    Lemma1,
    Theorem1,
    AppendixC,
}

#[derive(Args, Debug)]
struct BoundArgs {
    #[arg(value_enum)]
    kind: BoundKind,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    /// Bag size (theorem1: one size; appendix-c: comma-separated list).
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Number of bags.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LLPCS_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth { common } => gen_synth(&common),
        Command::Bag(args) => bag(&args),
        Command::Train { common } => experiment(&common, Mode::Train),
        Command::Sweep { common } => experiment(&common, Mode::Sweep),
        Command::Multirun { common } => experiment(&common, Mode::Multirun),
        Command::BoundCheck(args) => bound_check(&args),
    }
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_synth(common: &Common) -> Result<()> {
    #[derive(serde::Deserialize, serde::Serialize)]
    #[serde(default)]
    struct GenConfig {
        spec: SynthSpec,
        seed: u64,
    }
    impl Default for GenConfig {
        fn default() -> Self {
            Self {
                spec: SynthSpec::default(),
                seed: 0,
            }
        }
    }
    let mut cfg: GenConfig = match &common.config {
        Some(p) => read_config(p)?,
        None => GenConfig::default(),
    };
    if let Some(s) = common.seed_override {
        cfg.seed = s;
    }
    let dir = out_dir(common)?;
    let out = generate_synthetic(&cfg.spec, cfg.seed)?;
    let schema = save_dataset(&out.source, &dir.join("source.csv"))?;
    save_dataset(&out.target, &dir.join("target.csv"))?;
    save_dataset(&out.test, &dir.join("test.csv"))?;
    write_json(&dir.join("schema.json"), &schema)?;
    write_json(&dir.join("spec.json"), &cfg)?;
    println!(
        "wrote {} source, {} target, {} test rows to {}",
        out.source.len(),
        out.target.len(),
        out.test.len(),
        dir.display()
    );
    Ok(())
}

fn locate_schema(dataset: &Path, given: Option<&PathBuf>) -> Result<PathBuf> {
    if let Some(p) = given {
        return Ok(p.clone());
    }
    let sidecar = dataset.with_extension("schema.json");
    if sidecar.exists() {
        return Ok(sidecar);
    }
    let shared = dataset.with_file_name("schema.json");
    if shared.exists() {
        return Ok(shared);
    }
    bail!("no schema given and none found beside {}", dataset.display())
}

fn bag(args: &BagArgs) -> Result<()> {
    let schema: CsvSchema = read_config(&locate_schema(&args.dataset, args.schema.as_ref())?)?;
    let ds = load_csv(&args.dataset, &schema, Domain::Target)?;
    let sizes = || args.sizes.clone().unwrap_or_else(|| DEFAULT_MIXED_SIZES.to_vec());
    let regime = match args.regime {
        RegimeKind::Random => Regime::Random { k: args.k },
        RegimeKind::TwoStage => Regime::TwoStage { k: args.k },
        RegimeKind::Correlated => Regime::Correlated {
            feature: args.feature.clone().context("--feature is required for correlated bags")?,
            k: args.k,
        },
        RegimeKind::Sbb => Regime::Mixed {
            sizes: sizes(),
            mode: MixedMode::Sbb,
        },
        RegimeKind::Bbb => Regime::Mixed {
            sizes: sizes(),
            mode: MixedMode::Bbb,
        },
    };
    let bags = build_bags(&ds, &regime, args.seed)?;
    bags.validate(&ds)?;
    write_bags(&bags, &args.out)?;
    read_bags(&args.out)?;
    println!(
        "wrote {} bags ({} rows, {} dropped) to {}",
        bags.len(),
        bags.member_count(),
        bags.dropped.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Train,
    Sweep,
    Multirun,
}

fn experiment(common: &Common, mode: Mode) -> Result<()> {
    let path = common.config.as_ref().context("--config is required")?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = common.seed_override {
        cfg.override_seed(s);
    }
    let dir = out_dir(common)?;
    let exp = cfg.load_experiment()?;
    with_jobs(common.jobs, || -> Result<()> {
        match mode {
            Mode::Sweep => sweep(&cfg, &exp, &dir),
            Mode::Train | Mode::Multirun => {
                let trials = if mode == Mode::Train { 1 } else { cfg.trials };
                let mut runs: Vec<RunResult> = Vec::new();
                for regime in cfg.regimes() {
                    for &method in &cfg.methods {
                        let tc = cfg.train_config(method);
                        if trials == 1 {
                            runs.push(run_once(&exp, &regime, &tc)?);
                        } else {
                            runs.extend(multi_run(&exp, &regime, &tc, trials)?.runs);
                        }
                        log::info!("finished {method} under {}", regime.tag());
                    }
                }
                save_results_csv(&dir.join("results.csv"), &runs, false)?;
                let mut summary = summary_json(&runs)?;
                summary.push('\n');
                fs::write(dir.join("summary.json"), &summary)?;
                write_timing_log(fs::File::create(dir.join("timing.log"))?, &runs)?;
                for row in llpcs::trainer::summarize(&runs) {
                    println!(
                        "{:<14} k={:<5} {}",
                        row.method.tag(),
                        row.k.map(|k| k.to_string()).unwrap_or_else(|| "-".into()),
                        row.display
                    );
                }
                Ok(())
            }
        }
    })?
}

fn sweep(cfg: &ExperimentConfig, exp: &llpcs::trainer::Experiment, dir: &Path) -> Result<()> {
    let mut w = csv_writer(&dir.join("grid.csv"))?;
    writeln!(w, "method,k,regime,lr,lambda,validation_mse,best")?;
    let mut best = std::collections::BTreeMap::new();
    for regime in cfg.regimes() {
        for &method in &cfg.methods {
            let result = grid_search(exp, &regime, &cfg.train_config(method), &cfg.grid)?;
            for row in &result.rows {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{}",
                    method.tag(),
                    regime.k().map(|k| k.to_string()).unwrap_or_default(),
                    regime.tag(),
                    row.lr,
                    row.lambda.map(|l| l.to_string()).unwrap_or_default(),
                    row.validation_mse,
                    row.best
                )?;
            }
            best.insert(format!("{}/{}", method.tag(), regime.tag_with_k()), result.best);
        }
    }
    w.flush()?;
    write_json(&dir.join("best.json"), &best)?;
    println!("grid results written to {}", dir.display());
    Ok(())
}

fn csv_writer(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    Ok(std::io::BufWriter::new(
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

trait RegimeLabel {
    fn tag_with_k(&self) -> String;
}

impl RegimeLabel for Regime {
    fn tag_with_k(&self) -> String {
        match self.k() {
            Some(k) => format!("{}-k{k}", self.tag()),
            None => self.tag(),
        }
    }
}

fn bound_check(args: &BoundArgs) -> Result<()> {
    let (json, line, passed) = match args.kind {
        BoundKind::Lemma1 => {
            let rep = check_lemma1(&Lemma1Config {
                trials: args.trials,
                seed: args.seed,
                ..Lemma1Config::default()
            })?;
            report_parts(&rep)?
        }
        BoundKind::Theorem1 => {
            let k = single_k(args, 2)?;
            let m = args.m.unwrap_or(2000);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
            // Uniform labels against a fixed predictor h ≡ 1/2.
            let residuals: Vec<f64> = (0..2 * m * k).map(|_| rng.random::<f64>() - 0.5).collect();
            let rep = check_theorem1_step(&residuals, k, args.trials, args.seed.wrapping_add(1))?;
            report_parts(&rep)?
        }
        BoundKind::AppendixC => {
            let ks = args.k.clone().unwrap_or_else(|| vec![2, 4, 8, 16, 32, 64]);
            let ks = if ks.len() == 1 { vec![ks[0], ks[0] * 2] } else { ks };
            let rep = appendix_c_sweep(&ks, args.m.unwrap_or(10_000), args.seed)?;
            for r in &rep.rows {
                println!(
                    "k={:<4} bag loss {:.6} (1/(12k) = {:.6})  instance loss {:.6}  ratio {:.3}",
                    r.k,
                    r.bag_loss,
                    1.0 / (12.0 * r.k as f64),
                    r.instance_loss,
                    r.ratio
                );
            }
            let passed = (rep.slope - 1.0).abs() <= 0.05;
            let line = format!("appendix-c: log-log slope {:.4}, {}", rep.slope, if passed { "PASS" } else { "FAIL" });
            (serde_json::to_string_pretty(&rep)?, line, passed)
        }
    };
    match &args.out {
        Some(p) => fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    println!("{line}");
    if !passed {
        bail!("bound check failed");
    }
    Ok(())
}

fn single_k(args: &BoundArgs, default: usize) -> Result<usize> {
    match args.k.as_deref() {
        None => Ok(default),
        Some([k]) => Ok(*k),
        Some(_) => bail!("this check takes a single --k"),
    }
}

fn report_parts(rep: &BoundReport) -> Result<(String, String, bool)> {
    Ok((rep.to_json()?, rep.summary_line(), rep.passed))
}
