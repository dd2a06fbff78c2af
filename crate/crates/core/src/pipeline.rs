//! Run configuration, run-directory layout and the stages the command line
//! composes.
//!
//! A run directory holds `config.json`, `corpus.jsonl`, `base.ckpt`,
//! `retain.ckpt`, `base_train.json` and `profiles.jsonl`, plus one
//! directory per unlearning method with `config.json`,
//! `round_k/{adapters,model}.ckpt`, `round_k/report.json`, `metrics.csv`,
//! `timings.csv` and plot data. Round 0 is the model before unlearning.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use numkit::Tensor;
use serde::{Deserialize, Serialize};

use crate::adapters::{route_inputs, AsymAdapterSet, Centroids, Expert};
use crate::checkpoint::Checkpoint;
use crate::corpus::{self, CorpusSpec, Example, QaRecord, Subdomain};
use crate::entropy::Profiles;
use crate::error::{contract, AlterError, Result};
use crate::evalkit::{answer_nlls, emit_report, round_dir, utility_accuracy, EvalContext, EvalReport, Predictor};
use crate::model::{train_base, BaseModel, BaseTrainConfig, ModelConfig, TrainLog};
use crate::parallel::{default_jobs, par_map};
use crate::tokenizer::Tokenizer;
use crate::unlearn::{run_baseline, run_unlearn, Sample, TrainConfig, UnlearnTask};

pub const CONFIG_FILE: &str = "config.json";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const BASE_FILE: &str = "base.ckpt";
pub const RETAIN_FILE: &str = "retain.ckpt";
pub const BASE_LOG_FILE: &str = "base_train.json";
pub const PROFILES_FILE: &str = "profiles.jsonl";
pub const ALTER_DIR: &str = "alter";
pub const BASELINE_DIR: &str = "baseline";
pub const TIMINGS_HEADER: &str = "round,train_s,eval_s";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Output root; the command line falls back to `ALTER_RUN_DIR`.
    pub run_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds adapter initialization and unlearning order; overrides
    /// `train.seed` on resolution.
    pub seed: u64,
    /// Expanding unlearning rounds; 1 forgets every subdomain at once.
    pub rounds: usize,
    /// Evaluation workers; 0 uses the available cores.
    pub jobs: usize,
    /// Minimum base-model answer accuracy on the training set.
    pub gate_accuracy: f64,
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub base_train: BaseTrainConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rounds: 1,
            jobs: 0,
            gate_accuracy: 0.9,
            corpus: CorpusSpec::default(),
            model: ModelConfig::default(),
            base_train: BaseTrainConfig::default(),
            train: TrainConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| AlterError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| AlterError::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| AlterError::io(path, e))
    }

    /// Applies the top-level seed and checks every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.train.validate()?;
        self.model.validate()?;
        if self.rounds == 0 || self.rounds > self.corpus.subdomains {
            return Err(contract(format!(
                "rounds must lie in 1..={}, got {}",
                self.corpus.subdomains, self.rounds
            )));
        }
        if !(0.0..=1.0).contains(&self.gate_accuracy) {
            return Err(contract("gate_accuracy must lie in [0, 1]"));
        }
        Ok(self)
    }

    pub fn jobs(&self) -> usize {
        if self.jobs == 0 {
            default_jobs()
        } else {
            self.jobs
        }
    }

    pub fn round_plan(&self) -> Vec<Vec<usize>> {
        round_plan(self.rounds, self.corpus.subdomains)
    }
}

/// Round `i` of `rounds` forgets the first `⌈(i+1)·n/rounds⌉` subdomains.
pub fn round_plan(rounds: usize, n: usize) -> Vec<Vec<usize>> {
    (0..rounds).map(|i| (0..((i + 1) * n).div_ceil(rounds)).collect()).collect()
}

/// The encoded corpus and its fluency holdout.
#[derive(Clone, Debug)]
pub struct Data {
    pub spec: CorpusSpec,
    pub records: Vec<QaRecord>,
    pub tokenizer: Tokenizer,
    pub examples: Vec<Example>,
    pub holdout: Vec<Example>,
    pub connectives: Vec<usize>,
}

impl Data {
    pub fn new(spec: &CorpusSpec, records: Vec<QaRecord>) -> Result<Self> {
        corpus::check_nonempty(&records, "corpus")?;
        let tokenizer = corpus::build_tokenizer(spec, &records);
        let examples = corpus::encode_all(&tokenizer, &spec.connectives, &records);
        let holdout = corpus::encode_all(&tokenizer, &spec.connectives, &corpus::holdout_variants(spec, &records));
        let connectives = spec.connectives.iter().filter_map(|c| tokenizer.id(c)).collect();
        Ok(Self {
            spec: spec.clone(),
            records,
            tokenizer,
            examples,
            holdout,
            connectives,
        })
    }

    pub fn generate(spec: &CorpusSpec) -> Result<Self> {
        Self::new(spec, corpus::generate(spec)?)
    }

    pub fn indices(&self, subdomain: Subdomain) -> Vec<usize> {
        (0..self.examples.len())
            .filter(|&i| self.examples[i].subdomain == subdomain)
            .collect()
    }

    pub fn subset(&self, subdomain: Subdomain) -> Vec<Example> {
        self.indices(subdomain).into_iter().map(|i| self.examples[i].clone()).collect()
    }

    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            vocab_size: self.tokenizer.vocab_size(),
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BaseTrainReport {
    pub base: TrainLog,
    pub retain: TrainLog,
    pub base_accuracy: f64,
    pub base_params: usize,
}

/// The base model on the whole corpus and the reference model on the
/// retention set only, with identical configuration and seed.
pub fn train_models(cfg: &RunConfig, data: &Data) -> Result<(BaseModel, BaseModel, BaseTrainReport)> {
    let mcfg = data.model_config(&cfg.model);
    let mut base = BaseModel::new(mcfg.clone(), cfg.base_train.seed)?;
    let base_log = train_base(&mut base, &data.examples, &data.connectives, &cfg.base_train)?;
    let mut retain = BaseModel::new(mcfg, cfg.base_train.seed)?;
    let retain_set = data.subset(Subdomain::Retain);
    let retain_log = train_base(&mut retain, &retain_set, &data.connectives, &cfg.base_train)?;
    let base_accuracy = utility_accuracy(Predictor::Base(&base), &data.examples, cfg.jobs())?;
    log::info!("base answer accuracy {base_accuracy:.3}");
    let report = BaseTrainReport {
        base: base_log,
        retain: retain_log,
        base_accuracy,
        base_params: base.num_params(),
    };
    Ok((base, retain, report))
}

pub fn check_gate(report: &BaseTrainReport, cfg: &RunConfig) -> Result<()> {
    if report.base_accuracy < cfg.gate_accuracy {
        return Err(contract(format!(
            "base model answer accuracy {:.3} is below the gate {:.3}",
            report.base_accuracy, cfg.gate_accuracy
        )));
    }
    Ok(())
}

/// Expert centroids (one per forget subdomain, then retention) and the
/// training samples with route inputs from the base model.
pub fn prepare_task(base: &BaseModel, data: &Data, profiles: &Profiles, cfg: &RunConfig) -> Result<(UnlearnTask, Centroids)> {
    crate::entropy::check_alignment(profiles, &data.examples)?;
    let n = data.spec.subdomains;
    let groups: Vec<Subdomain> = (1..=n).map(Subdomain::Forget).chain([Subdomain::Retain]).collect();
    let (mut init, mut route) = (Vec::new(), Vec::new());
    for &g in &groups {
        let idx = data.indices(g);
        let ex: Vec<Example> = idx.iter().map(|&i| data.examples[i].clone()).collect();
        let pr: Vec<_> = idx.iter().map(|&i| profiles[i].clone()).collect();
        init.push(corpus::subdomain_centroid(base, &ex, &pr)?);
        route.push(corpus::route_centroid(base, &ex, &pr)?);
    }
    let centroids = Centroids {
        init: Tensor::from_rows(&init)?,
        route: Tensor::from_rows(&route)?,
    };
    let ecfg = &cfg.train.entropy;
    let indices: Vec<usize> = (0..data.examples.len()).collect();
    let samples = par_map(&indices, cfg.jobs(), |&i| -> Result<Sample> {
        let ex = &data.examples[i];
        let logits = base.logits(ex.inputs())?;
        Ok(Sample {
            ex: ex.clone(),
            profile: profiles[i].clone(),
            route: route_inputs(&logits, &centroids.route, ecfg)?,
            expert: ex.subdomain.forget_index().map_or(Expert::Retain, Expert::Forget),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut forget = vec![Vec::new(); n];
    let mut retain = Vec::new();
    for s in samples {
        match s.expert {
            Expert::Forget(d) => forget[d].push(s),
            Expert::Retain => retain.push(s),
        }
    }
    let task = UnlearnTask {
        forget,
        retain,
        rounds: cfg.round_plan(),
    };
    task.validate()?;
    Ok((task, centroids))
}

/// Evaluation inputs, with reference NLLs from the retain-only model.
pub fn eval_context(retain_model: &BaseModel, data: &Data, profiles: &Profiles, cfg: &RunConfig) -> Result<EvalContext> {
    let forget: Vec<Vec<Example>> = (0..data.spec.subdomains)
        .map(|d| data.subset(Subdomain::Forget(d + 1)))
        .collect();
    let reference_nll = forget
        .iter()
        .map(|f| answer_nlls(Predictor::Base(retain_model), f, cfg.jobs()))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalContext {
        forget,
        reference_nll,
        retain: data.subset(Subdomain::Retain),
        holdout: data.holdout.clone(),
        corpus: data.examples.clone(),
        profiles: profiles.clone(),
        entropy: cfg.train.entropy.clone(),
        jobs: cfg.jobs(),
    })
}

pub fn save_model(path: &Path, model: &BaseModel, cfg: &RunConfig) -> Result<()> {
    let mut ck = Checkpoint::new(cfg.seed, serde_json::to_value(cfg)?);
    model.write_to(&mut ck)?;
    ck.save(path)
}

pub fn load_model(path: &Path) -> Result<BaseModel> {
    BaseModel::read_from(&Checkpoint::load(path)?, path)
}

pub fn save_adapters(path: &Path, set: &AsymAdapterSet, cfg: &RunConfig) -> Result<()> {
    let mut ck = Checkpoint::new(cfg.seed, serde_json::to_value(cfg)?);
    set.write_to(&mut ck)?;
    ck.save(path)
}

pub fn load_adapters(path: &Path, model: &ModelConfig) -> Result<AsymAdapterSet> {
    AsymAdapterSet::read_from(&Checkpoint::load(path)?, model, path)
}

fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| AlterError::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| AlterError::io(dir, e))
}

struct MethodLog<'a> {
    dir: &'a Path,
    timings: String,
    reports: Vec<EvalReport>,
}

impl<'a> MethodLog<'a> {
    fn start(dir: &'a Path, cfg: &RunConfig) -> Result<Self> {
        fresh_dir(dir)?;
        cfg.save(&dir.join(CONFIG_FILE))?;
        Ok(Self {
            dir,
            timings: format!("{TIMINGS_HEADER}\n"),
            reports: Vec::new(),
        })
    }

    fn record(&mut self, report: EvalReport, train_s: f64, eval_s: f64) -> Result<()> {
        emit_report(self.dir, &report)?;
        self.timings.push_str(&format!("{},{train_s},{eval_s}\n", report.round));
        let path = self.dir.join("timings.csv");
        fs::write(&path, &self.timings).map_err(|e| AlterError::io(&path, e))?;
        self.reports.push(report);
        Ok(())
    }

    fn baseline_round(&mut self, base: &BaseModel, ctx: &EvalContext, first: &[usize]) -> Result<()> {
        let t0 = Instant::now();
        let report = ctx.evaluate(Predictor::Base(base), first, 0, 0.0)?;
        self.record(report, 0.0, t0.elapsed().as_secs_f64())
    }
}

pub struct AlterOutcome {
    pub set: AsymAdapterSet,
    pub reports: Vec<EvalReport>,
    pub stage1_curve: Vec<f64>,
}

/// Trains the adapters round by round, checkpointing and evaluating after
/// each round into `dir`.
pub fn run_alter(
    dir: &Path,
    base: &BaseModel,
    task: &UnlearnTask,
    centroids: &Centroids,
    ctx: &EvalContext,
    cfg: &RunConfig,
) -> Result<AlterOutcome> {
    let mut log = MethodLog::start(dir, cfg)?;
    log.baseline_round(base, ctx, &task.rounds[0])?;
    let mut set = AsymAdapterSet::new(base.config(), cfg.train.adapter.clone(), centroids, cfg.seed)?;
    let mut last = 0.0;
    let stage1_curve = run_unlearn(base, &mut set, task, &cfg.train, |round, set, trained| {
        let k = round + 1;
        let rd = round_dir(dir, k);
        fs::create_dir_all(&rd).map_err(|e| AlterError::io(&rd, e))?;
        save_adapters(&rd.join("adapters.ckpt"), set, cfg)?;
        let t0 = Instant::now();
        let pred = Predictor::Adapted {
            model: base,
            set,
            entropy: &cfg.train.entropy,
        };
        let report = ctx.evaluate(pred, &task.rounds[round], k, trained)?;
        let train_s = trained - last;
        last = trained;
        log.record(report, train_s, t0.elapsed().as_secs_f64())
    })?;
    Ok(AlterOutcome {
        set,
        reports: log.reports,
        stage1_curve,
    })
}

/// Full-parameter gradient-difference baseline with the same rounds.
pub fn run_grad_diff(
    dir: &Path,
    base: &BaseModel,
    task: &UnlearnTask,
    ctx: &EvalContext,
    cfg: &RunConfig,
) -> Result<(BaseModel, Vec<EvalReport>)> {
    let mut log = MethodLog::start(dir, cfg)?;
    log.baseline_round(base, ctx, &task.rounds[0])?;
    let mut last = 0.0;
    let model = run_baseline(base, task, &cfg.train, |round, model, trained| {
        let k = round + 1;
        let rd = round_dir(dir, k);
        fs::create_dir_all(&rd).map_err(|e| AlterError::io(&rd, e))?;
        save_model(&rd.join("model.ckpt"), model, cfg)?;
        let t0 = Instant::now();
        let report = ctx.evaluate(Predictor::Base(model), &task.rounds[round], k, trained)?;
        let train_s = trained - last;
        last = trained;
        log.record(report, train_s, t0.elapsed().as_secs_f64())
    })?;
    Ok((model, log.reports))
}

/// Reports of `method_dir` in round order.
pub fn load_reports(method_dir: &Path) -> Result<Vec<EvalReport>> {
    let mut out = Vec::new();
    for k in 0.. {
        let path = round_dir(method_dir, k).join("report.json");
        if !path.exists() {
            break;
        }
        out.push(crate::evalkit::load_report(&path)?);
    }
    if out.is_empty() {
        return Err(contract(format!("no reports under {}", method_dir.display())));
    }
    Ok(out)
}

/// Final-round quality and cost of each method, with time relative to the
/// first row.
pub fn tradeoff_table(methods: &[(String, Vec<EvalReport>)]) -> String {
    let mut out = String::from("method,rounds,forget_ks_p,forget_acc,retain_acc,utility_holdout_acc,wall_clock_s,relative_time\n");
    let reference = methods
        .first()
        .and_then(|(_, r)| r.last())
        .map(|r| r.wall_clock_s)
        .unwrap_or(0.0);
    for (name, reports) in methods {
        let Some(last) = reports.last() else { continue };
        let rel = if reference > 0.0 { last.wall_clock_s / reference } else { f64::NAN };
        out.push_str(&format!(
            "{name},{},{:.4},{:.4},{:.4},{:.4},{:.3},{rel:.3}\n",
            last.round,
            last.forget_ks_p,
            last.forget_acc,
            last.retain_acc,
            last.utility_holdout_acc,
            last.wall_clock_s
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_plans_expand() {
        assert_eq!(round_plan(1, 3), vec![vec![0, 1, 2]]);
        assert_eq!(round_plan(3, 3), vec![vec![0], vec![0, 1], vec![0, 1, 2]]);
        assert_eq!(round_plan(2, 3), vec![vec![0, 1], vec![0, 1, 2]]);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"seed": 1, "epochz": 2}"#).is_err());
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 5, "train": {"beta": 2.0}}"#).unwrap();
        let cfg = cfg.resolve().unwrap();
        assert_eq!((cfg.train.seed, cfg.train.beta), (5, 2.0));
    }

    #[test]
    fn resolve_checks_rounds() {
        let cfg = RunConfig {
            rounds: 4,
            ..Default::default()
        };
        assert!(cfg.resolve().is_err());
    }

    #[test]
    fn tradeoff_times_are_relative_to_the_first_method() {
        let r = |t| EvalReport {
            round: 1,
            wall_clock_s: t,
            ..Default::default()
        };
        let table = tradeoff_table(&[("a".into(), vec![r(2.0)]), ("b".into(), vec![r(5.0)])]);
        assert!(table.lines().nth(2).unwrap().ends_with(",2.500"));
    }
}
