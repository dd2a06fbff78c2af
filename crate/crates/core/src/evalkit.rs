//! Forget quality, utility, fluency, entropy conservation and reports.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use numkit::{Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::adapters::{routed_coefficients, route_inputs, AdapterHook, AsymAdapterSet, Composition};
use crate::corpus::Example;
use crate::entropy::{conservation_stats, EntropyConfig, Profiles, TokenProfile};
use crate::error::{contract, AlterError, Result};
use crate::model::{forward, BaseModel};
use crate::parallel::par_map;

const KS_TERMS: usize = 100;

/// Asymptotic Kolmogorov survival function `Q(λ) = P(K > λ)`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let q = if lambda < 1.0 {
        // Jacobi form, fast for small λ.
        let c = std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let s: f64 = (1..=KS_TERMS)
            .map(|j| (-((2 * j - 1) as f64).powi(2) * c).exp())
            .sum();
        1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s
    } else {
        let s: f64 = (1..=KS_TERMS)
            .map(|j| {
                let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
                sign * (-2.0 * (j * j) as f64 * lambda * lambda).exp()
            })
            .sum();
        2.0 * s
    };
    q.clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value with
/// effective size `n_a n_b / (n_a + n_b)`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(contract("KS test needs two non-empty samples"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(contract("KS samples must be finite"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < na && j < nb {
        let x = a[i].min(b[j]);
        while i < na && a[i] <= x {
            i += 1;
        }
        while j < nb && b[j] <= x {
            j += 1;
        }
        d = d.max(cdf_gap(i, na, j, nb));
    }
    let ne = (na * nb) as f64 / (na + nb) as f64;
    Ok((d, kolmogorov_q(ne.sqrt() * d)))
}

fn cdf_gap(i: usize, na: usize, j: usize, nb: usize) -> f64 {
    (i as f64 / na as f64 - j as f64 / nb as f64).abs()
}

/// A model with or without adapters, queried for logits.
#[derive(Clone, Copy)]
pub enum Predictor<'a> {
    Base(&'a BaseModel),
    Adapted {
        model: &'a BaseModel,
        set: &'a AsymAdapterSet,
        entropy: &'a EntropyConfig,
    },
}

impl Predictor<'_> {
    /// Logits at every row. Adapted models route each row by the live
    /// entropy of the base distribution at that row.
    pub fn logits(&self, ids: &[usize]) -> Result<Tensor> {
        match *self {
            Predictor::Base(m) => m.logits(ids),
            Predictor::Adapted { model, set, entropy } => {
                let route = route_inputs(&model.logits(ids)?, &set.route_centroids, entropy)?;
                let g = Graph::new();
                g.no_grad(|| {
                    let p = model.bind(&g, false);
                    let vars = set.bind(&g);
                    let composition = if set.config.gate {
                        Composition::Routed(routed_coefficients(&vars, set, &route))
                    } else {
                        Composition::Joint
                    };
                    let hook = AdapterHook {
                        vars: &vars,
                        composition,
                    };
                    let out = forward(model.config(), &p, ids, Some(&hook))?;
                    let v = out.logits.value();
                    Ok((*v).clone())
                })
            }
        }
    }
}

fn row_nll(logits: &Tensor, t: usize, y: usize) -> f64 {
    let row = logits.row(t);
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - row[y]
}

/// Mean negative log-likelihood over the answer rows of `ex`.
pub fn answer_nll(logits: &Tensor, ex: &Example) -> Result<f64> {
    let rows: Vec<usize> = (0..ex.rows()).filter(|&t| ex.answer[t]).collect();
    if rows.is_empty() {
        return Err(contract(format!("example {} has no answer rows", ex.id)));
    }
    let targets = ex.targets();
    Ok(rows.iter().map(|&t| row_nll(logits, t, targets[t])).sum::<f64>() / rows.len() as f64)
}

pub fn answer_nlls(pred: Predictor, examples: &[Example], jobs: usize) -> Result<Vec<f64>> {
    par_map(examples, jobs, |ex| answer_nll(&pred.logits(ex.inputs())?, ex))
        .into_iter()
        .collect()
}

/// KS comparison of per-example answer NLLs against the reference values of
/// a model trained on the retention set only.
pub fn forget_quality(pred: Predictor, reference_nll: &[f64], forget: &[Example], jobs: usize) -> Result<(f64, f64)> {
    let nll = answer_nlls(pred, forget, jobs)?;
    ks_two_sample(&nll, reference_nll)
}

pub fn exact_match(pred: &[usize], gold: &[usize]) -> bool {
    !gold.is_empty() && pred == gold
}

/// Knowledge tokens predicted greedily with the gold prefix: the tokens at
/// scored rows, as `(predicted, gold)`.
pub fn predicted_answer(logits: &Tensor, ex: &Example) -> (Vec<usize>, Vec<usize>) {
    let targets = ex.targets();
    (0..ex.rows())
        .filter(|&t| ex.scored[t])
        .map(|t| (crate::adapters::argmax(logits.row(t)), targets[t]))
        .unzip()
}

/// Fraction of examples whose knowledge tokens all match.
pub fn utility_accuracy(pred: Predictor, examples: &[Example], jobs: usize) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let hits = par_map(examples, jobs, |ex| -> Result<bool> {
        let (p, g) = predicted_answer(&pred.logits(ex.inputs())?, ex);
        Ok(exact_match(&p, &g))
    })
    .into_iter()
    .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / examples.len() as f64)
}

/// `exp` of the mean NLL over every row of `holdout`.
pub fn fluency_proxy(pred: Predictor, holdout: &[Example], jobs: usize) -> Result<f64> {
    if holdout.is_empty() {
        return Err(contract("fluency holdout is empty"));
    }
    let sums = par_map(holdout, jobs, |ex| -> Result<(f64, usize)> {
        let logits = pred.logits(ex.inputs())?;
        let s = ex
            .targets()
            .iter()
            .enumerate()
            .map(|(t, &y)| row_nll(&logits, t, y))
            .sum();
        Ok((s, ex.rows()))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let (s, n) = sums.iter().fold((0.0, 0), |(a, b), (s, n)| (a + s, b + n));
    Ok((s / n as f64).exp())
}

/// Shannon entropy of every row of every example under `pred`.
pub fn row_entropies(pred: Predictor, examples: &[Example], jobs: usize) -> Result<Vec<f64>> {
    let per = par_map(examples, jobs, |ex| -> Result<Vec<f64>> {
        let p = pred.logits(ex.inputs())?.softmax_rows();
        Ok((0..p.rows())
            .map(|t| {
                p.row(t)
                    .iter()
                    .filter(|&&v| v > 0.0)
                    .map(|&v| -v * v.ln())
                    .sum::<f64>()
                    .max(0.0)
            })
            .collect())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// High and Low retention fractions of `pred` relative to base profiles.
pub fn conservation(
    pred: Predictor,
    examples: &[Example],
    profiles: &Profiles,
    cfg: &EntropyConfig,
    jobs: usize,
) -> Result<(f64, f64)> {
    let after = row_entropies(pred, examples, jobs)?;
    let before: Vec<TokenProfile> = profiles.iter().flatten().cloned().collect();
    conservation_stats(&before, &after, cfg)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub round: usize,
    pub forget_ks_stat: f64,
    pub forget_ks_p: f64,
    pub forget_acc: f64,
    pub retain_acc: f64,
    pub utility_holdout_acc: f64,
    pub high_retained: f64,
    pub low_retained: f64,
    pub fluency_ppl: f64,
    pub wall_clock_s: f64,
}

pub const METRICS_HEADER: &str = "round,forget_ks_stat,forget_ks_p,forget_acc,retain_acc,utility_holdout_acc,high_retained,low_retained,fluency_ppl,wall_clock_s";

impl EvalReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.round,
            self.forget_ks_stat,
            self.forget_ks_p,
            self.forget_acc,
            self.retain_acc,
            self.utility_holdout_acc,
            self.high_retained,
            self.low_retained,
            self.fluency_ppl,
            self.wall_clock_s
        )
    }

    pub fn validate(&self) -> Result<()> {
        let fracs = [
            self.forget_ks_stat,
            self.forget_ks_p,
            self.forget_acc,
            self.retain_acc,
            self.utility_holdout_acc,
            self.high_retained,
            self.low_retained,
        ];
        if fracs.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(contract("report fractions must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Everything evaluation needs besides the model.
pub struct EvalContext {
    /// Forget examples of each subdomain.
    pub forget: Vec<Vec<Example>>,
    /// Answer NLLs of the retain-only model on `forget`, same layout.
    pub reference_nll: Vec<Vec<f64>>,
    pub retain: Vec<Example>,
    pub holdout: Vec<Example>,
    /// Profiled corpus for conservation statistics.
    pub corpus: Vec<Example>,
    pub profiles: Profiles,
    pub entropy: EntropyConfig,
    pub jobs: usize,
}

impl EvalContext {
    /// Evaluates `pred` with the forget set formed by `subdomains`.
    pub fn evaluate(&self, pred: Predictor, subdomains: &[usize], round: usize, wall_clock_s: f64) -> Result<EvalReport> {
        let forget: Vec<Example> = subdomains
            .iter()
            .flat_map(|&d| self.forget[d].iter().cloned())
            .collect();
        let reference: Vec<f64> = subdomains
            .iter()
            .flat_map(|&d| self.reference_nll[d].iter().copied())
            .collect();
        let (ks, p) = forget_quality(pred, &reference, &forget, self.jobs)?;
        let (high, low) = conservation(pred, &self.corpus, &self.profiles, &self.entropy, self.jobs)?;
        let report = EvalReport {
            round,
            forget_ks_stat: ks,
            forget_ks_p: p,
            forget_acc: utility_accuracy(pred, &forget, self.jobs)?,
            retain_acc: utility_accuracy(pred, &self.retain, self.jobs)?,
            utility_holdout_acc: utility_accuracy(pred, &self.holdout, self.jobs)?,
            high_retained: high,
            low_retained: low,
            fluency_ppl: fluency_proxy(pred, &self.holdout, self.jobs)?,
            wall_clock_s,
        };
        report.validate()?;
        Ok(report)
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| AlterError::io(path, e))
}

fn append_line(path: &Path, header: &str, line: &str) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| AlterError::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(header);
        text.push('\n');
    }
    text.push_str(line);
    text.push('\n');
    f.write_all(text.as_bytes()).map_err(|e| AlterError::io(path, e))
}

pub fn round_dir(method_dir: &Path, round: usize) -> PathBuf {
    method_dir.join(format!("round_{round}"))
}

/// Writes `round_k/report.json`, appends to `metrics.csv` and to the plot
/// data files `plot_round_utility.csv` and `plot_time_forget.csv`.
pub fn emit_report(method_dir: &Path, report: &EvalReport) -> Result<PathBuf> {
    let dir = round_dir(method_dir, report.round);
    fs::create_dir_all(&dir).map_err(|e| AlterError::io(&dir, e))?;
    let path = dir.join("report.json");
    write_file(&path, &(serde_json::to_string_pretty(report)? + "\n"))?;
    append_line(&method_dir.join("metrics.csv"), METRICS_HEADER, &report.csv_row())?;
    append_line(
        &method_dir.join("plot_round_utility.csv"),
        "round,retain_acc,utility_holdout_acc",
        &format!("{},{},{}", report.round, report.retain_acc, report.utility_holdout_acc),
    )?;
    append_line(
        &method_dir.join("plot_time_forget.csv"),
        "wall_clock_s,forget_ks_p,forget_acc",
        &format!("{},{},{}", report.wall_clock_s, report.forget_ks_p, report.forget_acc),
    )?;
    Ok(path)
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| AlterError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
