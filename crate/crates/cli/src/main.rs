//! `alter`: corpus generation, base training, entropy profiling, unlearning,
//! evaluation and reporting over one run directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alter::corpus;
use alter::entropy::{load_profiles, profile_corpus, save_profiles};
use alter::evalkit::{round_dir, EvalReport, Predictor, METRICS_HEADER};
use alter::pipeline::{self, Data, RunConfig};
use alter::{AlterError, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

const RUN_DIR_ENV: &str = "ALTER_RUN_DIR";

#[derive(Parser, Debug)]
#[command(name = "alter", version, about = "Entropy-guided asymmetric LoRA unlearning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic QA corpus and echo the resolved config.
    CorpusGen(Common),
    /// Train the base model and the retain-only reference model.
    TrainBase(Common),
    /// Profile token entropies of the base model over the corpus.
    Profile(Common),
    /// Unlearn with entropy-routed asymmetric adapters.
    Unlearn(Common),
    /// Unlearn with the full-parameter gradient-difference baseline.
    UnlearnBaseline(Common),
    /// Re-evaluate a saved round of one method.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Method::Alter)]
        method: Method,
        /// Round to evaluate; defaults to the last one saved.
        #[arg(long)]
        round: Option<usize>,
    },
    /// Print metrics, plot-data paths and the quality/time trade-off.
    Report {
        #[command(flatten)]
        common: Common,
        /// Further run directories to include in the trade-off table.
        #[arg(long = "compare")]
        compare: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Method {
    Alter,
    Baseline,
}

impl Method {
    fn dir(self) -> &'static str {
        match self {
            Method::Alter => pipeline::ALTER_DIR,
            Method::Baseline => pipeline::BASELINE_DIR,
        }
    }
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Config file; otherwise the run's own config.json, otherwise defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory; falls back to the config, then ALTER_RUN_DIR.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long = "q-a")]
    q_a: Option<f64>,
    #[arg(long = "q-b")]
    q_b: Option<f64>,
    /// Evaluation workers; 0 uses every core.
    #[arg(long)]
    jobs: Option<usize>,
}

fn contract(msg: impl Into<String>) -> AlterError {
    AlterError::Contract(msg.into())
}

impl Common {
    fn run_dir(&self, cfg: Option<&RunConfig>) -> Result<PathBuf> {
        self.run
            .clone()
            .or_else(|| cfg.and_then(|c| c.paths.run_dir.clone()))
            .or_else(|| std::env::var_os(RUN_DIR_ENV).map(PathBuf::from))
            .ok_or_else(|| contract(format!("no run directory: pass --run or set {RUN_DIR_ENV}")))
    }

    /// Flag over config over default.
    fn resolve(&self) -> Result<(RunConfig, PathBuf)> {
        let explicit = self.config.as_deref().map(RunConfig::load).transpose()?;
        let run = self.run_dir(explicit.as_ref())?;
        let mut cfg = match explicit {
            Some(c) => c,
            None => {
                let echo = run.join(pipeline::CONFIG_FILE);
                if echo.exists() {
                    RunConfig::load(&echo)?
                } else {
                    RunConfig::default()
                }
            }
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.rounds {
            cfg.rounds = v;
        }
        if let Some(v) = self.beta {
            cfg.train.beta = v;
        }
        if let Some(v) = self.gamma {
            cfg.train.gamma = v;
        }
        if let Some(v) = self.lambda {
            cfg.train.lambda = v;
        }
        if let Some(v) = self.rank {
            cfg.train.adapter.rank = v;
        }
        if let Some(v) = self.q_a {
            cfg.train.entropy.q_a = v;
        }
        if let Some(v) = self.q_b {
            cfg.train.entropy.q_b = v;
        }
        if let Some(v) = self.jobs {
            cfg.jobs = v;
        }
        cfg.paths.run_dir = Some(run.clone());
        Ok((cfg.resolve()?, run))
    }
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(AlterError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("missing; run `{stage}` first")),
        ))
    }
}

fn load_data(run: &Path, cfg: &RunConfig) -> Result<Data> {
    let path = run.join(pipeline::CORPUS_FILE);
    require(&path, "corpus-gen")?;
    Data::new(&cfg.corpus, corpus::load(&path)?)
}

fn load_model(run: &Path, file: &str) -> Result<alter::model::BaseModel> {
    let path = run.join(file);
    require(&path, "train-base")?;
    pipeline::load_model(&path)
}

fn load_profiles_of(run: &Path, cfg: &RunConfig) -> Result<alter::entropy::Profiles> {
    let path = run.join(pipeline::PROFILES_FILE);
    require(&path, "profile")?;
    load_profiles(&path, &cfg.train.entropy)
}

fn corpus_gen(common: &Common) -> Result<()> {
    let (cfg, run) = common.resolve()?;
    fs::create_dir_all(&run).map_err(|e| AlterError::io(&run, e))?;
    let records = corpus::generate(&cfg.corpus)?;
    corpus::save(&run.join(pipeline::CORPUS_FILE), &records)?;
    cfg.save(&run.join(pipeline::CONFIG_FILE))?;
    println!("{} records -> {}", records.len(), run.join(pipeline::CORPUS_FILE).display());
    Ok(())
}

fn train_base(common: &Common) -> Result<()> {
    let (cfg, run) = common.resolve()?;
    let data = load_data(&run, &cfg)?;
    let (base, retain, report) = pipeline::train_models(&cfg, &data)?;
    pipeline::save_model(&run.join(pipeline::BASE_FILE), &base, &cfg)?;
    pipeline::save_model(&run.join(pipeline::RETAIN_FILE), &retain, &cfg)?;
    let log_path = run.join(pipeline::BASE_LOG_FILE);
    let text = serde_json::to_string_pretty(&report)? + "\n";
    fs::write(&log_path, text).map_err(|e| AlterError::io(&log_path, e))?;
    println!(
        "base answer accuracy {:.4} over {} parameters",
        report.base_accuracy, report.base_params
    );
    pipeline::check_gate(&report, &cfg)
}

fn profile(common: &Common) -> Result<()> {
    let (cfg, run) = common.resolve()?;
    let data = load_data(&run, &cfg)?;
    let base = load_model(&run, pipeline::BASE_FILE)?;
    let profiles = profile_corpus(&base, &data.examples, &cfg.train.entropy, cfg.jobs())?;
    let path = run.join(pipeline::PROFILES_FILE);
    save_profiles(&path, &profiles, &cfg.train.entropy)?;
    let rows: usize = profiles.iter().map(Vec::len).sum();
    println!("{rows} token profiles -> {}", path.display());
    Ok(())
}

fn print_last(reports: &[EvalReport]) {
    if let Some(r) = reports.last() {
        println!(
            "round {}: forget_acc {:.4} retain_acc {:.4} ks_p {:.3e} wall {:.1}s",
            r.round, r.forget_acc, r.retain_acc, r.forget_ks_p, r.wall_clock_s
        );
    }
}

fn unlearn(common: &Common, method: Method) -> Result<()> {
    let (cfg, run) = common.resolve()?;
    let data = load_data(&run, &cfg)?;
    let base = load_model(&run, pipeline::BASE_FILE)?;
    let retain = load_model(&run, pipeline::RETAIN_FILE)?;
    let profiles = load_profiles_of(&run, &cfg)?;
    let (task, centroids) = pipeline::prepare_task(&base, &data, &profiles, &cfg)?;
    let ctx = pipeline::eval_context(&retain, &data, &profiles, &cfg)?;
    let dir = run.join(method.dir());
    let reports = match method {
        Method::Alter => pipeline::run_alter(&dir, &base, &task, &centroids, &ctx, &cfg)?.reports,
        Method::Baseline => pipeline::run_grad_diff(&dir, &base, &task, &ctx, &cfg)?.1,
    };
    print_last(&reports);
    Ok(())
}

fn eval(common: &Common, method: Method, round: Option<usize>) -> Result<()> {
    let (_, run) = common.resolve()?;
    let dir = run.join(method.dir());
    let method_cfg = dir.join(pipeline::CONFIG_FILE);
    require(&method_cfg, "unlearn")?;
    let cfg = RunConfig::load(&method_cfg)?;
    let cfg = RunConfig {
        jobs: common.jobs.unwrap_or(cfg.jobs),
        ..cfg
    };
    let plan = cfg.round_plan();
    let k = round.unwrap_or(plan.len());
    if k > plan.len() {
        return Err(contract(format!("round {k} outside 0..={}", plan.len())));
    }
    let data = load_data(&run, &cfg)?;
    let base = load_model(&run, pipeline::BASE_FILE)?;
    let retain = load_model(&run, pipeline::RETAIN_FILE)?;
    let profiles = load_profiles_of(&run, &cfg)?;
    let ctx = pipeline::eval_context(&retain, &data, &profiles, &cfg)?;
    let subdomains = &plan[k.saturating_sub(1)];
    let rd = round_dir(&dir, k);
    let start = std::time::Instant::now();
    let report = match (k, method) {
        (0, _) => ctx.evaluate(Predictor::Base(&base), subdomains, 0, 0.0)?,
        (_, Method::Alter) => {
            let path = rd.join("adapters.ckpt");
            require(&path, "unlearn")?;
            let set = pipeline::load_adapters(&path, base.config())?;
            let pred = Predictor::Adapted {
                model: &base,
                set: &set,
                entropy: &cfg.train.entropy,
            };
            ctx.evaluate(pred, subdomains, k, 0.0)?
        }
        (_, Method::Baseline) => {
            let path = rd.join("model.ckpt");
            require(&path, "unlearn-baseline")?;
            let model = pipeline::load_model(&path)?;
            ctx.evaluate(Predictor::Base(&model), subdomains, k, 0.0)?
        }
    };
    log::info!("evaluated in {:.1}s", start.elapsed().as_secs_f64());
    let out = rd.join("eval.json");
    fs::create_dir_all(&rd).map_err(|e| AlterError::io(&rd, e))?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    fs::write(&out, &text).map_err(|e| AlterError::io(&out, e))?;
    print!("{text}");
    Ok(())
}

fn tail(path: &Path, n: usize) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| AlterError::io(path, e))?;
    let lines: Vec<String> = text.lines().map(str::to_owned).collect();
    Ok(lines[lines.len().saturating_sub(n)..].to_vec())
}

fn report(common: &Common, compare: &[PathBuf]) -> Result<()> {
    let run = common.run_dir(None)?;
    let mut methods = Vec::new();
    for dir in std::iter::once(&run).chain(compare) {
        for m in [Method::Alter, Method::Baseline] {
            let mdir = dir.join(m.dir());
            if !mdir.join("metrics.csv").exists() {
                continue;
            }
            println!("== {}", mdir.display());
            let lines = tail(&mdir.join("metrics.csv"), 3)?;
            if lines.first().map(String::as_str) != Some(METRICS_HEADER) {
                println!("{METRICS_HEADER}");
            }
            for line in lines {
                println!("{line}");
            }
            for plot in ["plot_round_utility.csv", "plot_time_forget.csv", "timings.csv"] {
                println!("plot data: {}", mdir.join(plot).display());
            }
            let name = if compare.is_empty() {
                m.dir().to_owned()
            } else {
                format!("{}:{}", dir.display(), m.dir())
            };
            methods.push((name, pipeline::load_reports(&mdir)?));
        }
    }
    if methods.is_empty() {
        return Err(AlterError::io(
            run.join(pipeline::ALTER_DIR).join("metrics.csv"),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no finished method under the run"),
        ));
    }
    println!("== trade-off");
    print!("{}", pipeline::tradeoff_table(&methods));
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::CorpusGen(c) => corpus_gen(c),
        Command::TrainBase(c) => train_base(c),
        Command::Profile(c) => profile(c),
        Command::Unlearn(c) => unlearn(c, Method::Alter),
        Command::UnlearnBaseline(c) => unlearn(c, Method::Baseline),
        Command::Eval { common, method, round } => eval(common, *method, *round),
        Command::Report { common, compare } => report(common, compare),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
