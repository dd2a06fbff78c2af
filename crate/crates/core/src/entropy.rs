//! Token-level Shannon and Tsallis entropies and cached corpus profiles.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use numkit::Tensor;
use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::error::{contract, AlterError, Result};
use crate::model::BaseModel;
use crate::parallel::par_map;

const SUM_TOL: f64 = 1e-9;

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(contract("empty distribution"));
    }
    if let Some(v) = p.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(contract(format!("probability {v} is negative or not finite")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(contract(format!("probabilities sum to {s}")));
    }
    Ok(())
}

/// `-sum p ln p` in nats, with `0 ln 0 = 0`.
pub fn shannon_entropy(p: &[f64]) -> Result<f64> {
    check_distribution(p)?;
    Ok(shannon_unchecked(p))
}

fn shannon_unchecked(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
    h.max(0.0)
}

/// `(1 - sum p^q) / (q - 1)`. Within 1e-8 of `q = 1` the Shannon limit is
/// returned.
pub fn tsallis_entropy(p: &[f64], q: f64) -> Result<f64> {
    if q.is_nan() || q <= 0.0 || !q.is_finite() {
        return Err(contract(format!("Tsallis q must be positive, got {q}")));
    }
    check_distribution(p)?;
    Ok(tsallis_unchecked(p, q))
}

fn tsallis_unchecked(p: &[f64], q: f64) -> f64 {
    if (q - 1.0).abs() <= 1e-8 {
        return shannon_unchecked(p);
    }
    let s: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| v.powf(q)).sum();
    ((1.0 - s) / (q - 1.0)).max(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntropyConfig {
    pub q_a: f64,
    pub q_b: f64,
    pub shannon_threshold: f64,
    pub route_threshold: f64,
    /// Deformation of the live entropy compared against `route_threshold`.
    pub q_route: f64,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self {
            q_a: 0.5,
            q_b: 2.0,
            shannon_threshold: 2.0,
            route_threshold: 1.2,
            q_route: 1.0,
        }
    }
}

impl EntropyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q_a > 0.0 && self.q_a < 1.0 && self.q_b > 1.0) {
            return Err(contract(format!(
                "need 0 < q_a < 1 < q_b, got q_a={} q_b={}",
                self.q_a, self.q_b
            )));
        }
        if self.q_route.is_nan() || self.q_route <= 0.0 {
            return Err(contract(format!("q_route must be positive, got {}", self.q_route)));
        }
        if !(self.shannon_threshold > 0.0 && self.route_threshold > 0.0) {
            return Err(contract("entropy thresholds must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Class {
    High,
    Low,
}

impl Class {
    pub fn of(h: f64, cfg: &EntropyConfig) -> Self {
        if h > cfg.shannon_threshold {
            Class::High
        } else {
            Class::Low
        }
    }
}

/// Statistics of the base distribution at output row `t`, which predicts
/// `token_id`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenProfile {
    pub t: usize,
    pub token_id: usize,
    pub h: f64,
    pub sq_a: f64,
    pub sq_b: f64,
    pub class: Class,
}

impl TokenProfile {
    pub fn from_probs(t: usize, token_id: usize, p: &[f64], cfg: &EntropyConfig) -> Self {
        let h = shannon_unchecked(p);
        Self {
            t,
            token_id,
            h,
            sq_a: tsallis_unchecked(p, cfg.q_a),
            sq_b: tsallis_unchecked(p, cfg.q_b),
            class: Class::of(h, cfg),
        }
    }
}

/// Key used for a deformation value in the cache, e.g. `"0.5"` or `"2.0"`.
pub fn q_key(q: f64) -> String {
    if q.fract() == 0.0 {
        format!("{q:.1}")
    } else {
        format!("{q}")
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileLine {
    t: usize,
    token_id: usize,
    #[serde(rename = "H")]
    h: f64,
    #[serde(rename = "Sq")]
    sq: BTreeMap<String, f64>,
    class: Class,
}

/// Per-example profiles of every output row, in corpus order.
pub type Profiles = Vec<Vec<TokenProfile>>;

pub fn profile_example(logits: &Tensor, ex: &Example, cfg: &EntropyConfig) -> Vec<TokenProfile> {
    let probs = logits.softmax_rows();
    ex.targets()
        .iter()
        .enumerate()
        .map(|(t, &y)| TokenProfile::from_probs(t, y, probs.row(t), cfg))
        .collect()
}

/// Profiles of every output row of `examples` under the frozen `model`.
pub fn profile_corpus(
    model: &BaseModel,
    examples: &[Example],
    cfg: &EntropyConfig,
    jobs: usize,
) -> Result<Profiles> {
    cfg.validate()?;
    let v = model.config().vocab_size;
    if let Some(ex) = examples.iter().find(|e| e.ids.iter().any(|&i| i >= v)) {
        return Err(contract(format!(
            "example {} has tokens outside the model vocabulary of {v}",
            ex.id
        )));
    }
    par_map(examples, jobs, |ex| {
        let logits = model.logits(ex.inputs())?;
        Ok(profile_example(&logits, ex, cfg))
    })
    .into_iter()
    .collect()
}

pub fn save_profiles(path: &Path, profiles: &Profiles, cfg: &EntropyConfig) -> Result<()> {
    let mut buf = Vec::new();
    for p in profiles.iter().flatten() {
        let line = ProfileLine {
            t: p.t,
            token_id: p.token_id,
            h: p.h,
            sq: BTreeMap::from([(q_key(cfg.q_a), p.sq_a), (q_key(cfg.q_b), p.sq_b)]),
            class: p.class,
        };
        serde_json::to_writer(&mut buf, &line)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| AlterError::io(path, e))?;
    f.write_all(&buf).map_err(|e| AlterError::io(path, e))
}

/// Reads a cache written by [`save_profiles`]. A record with `t == 0`
/// starts a new example.
pub fn load_profiles(path: &Path, cfg: &EntropyConfig) -> Result<Profiles> {
    let f = fs::File::open(path).map_err(|e| AlterError::io(path, e))?;
    let (ka, kb) = (q_key(cfg.q_a), q_key(cfg.q_b));
    let mut out: Profiles = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| AlterError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |detail: String| AlterError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            detail,
        };
        let rec: ProfileLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let get = |k: &str| {
            rec.sq
                .get(k)
                .copied()
                .ok_or_else(|| err(format!("no Sq entry for q={k}")))
        };
        let p = TokenProfile {
            t: rec.t,
            token_id: rec.token_id,
            h: rec.h,
            sq_a: get(&ka)?,
            sq_b: get(&kb)?,
            class: rec.class,
        };
        match out.last_mut() {
            Some(cur) if rec.t != 0 => {
                if rec.t != cur.len() {
                    return Err(err(format!("expected t={}, got {}", cur.len(), rec.t)));
                }
                cur.push(p);
            }
            _ if rec.t == 0 => out.push(vec![p]),
            _ => return Err(err(format!("first record has t={}", rec.t))),
        }
    }
    Ok(out)
}

/// Checks that `profiles` line up row for row with `examples`.
pub fn check_alignment(profiles: &Profiles, examples: &[Example]) -> Result<()> {
    if profiles.len() != examples.len() {
        return Err(contract(format!(
            "{} profiled examples for {} corpus examples",
            profiles.len(),
            examples.len()
        )));
    }
    for (p, ex) in profiles.iter().zip(examples) {
        if p.len() != ex.rows() || p.iter().zip(ex.targets()).any(|(p, &y)| p.token_id != y) {
            return Err(contract(format!("profile does not match example {}", ex.id)));
        }
    }
    Ok(())
}

/// Fraction of High rows still above the Shannon threshold and of Low rows
/// still at or below it, given the entropies of the same rows afterwards.
pub fn conservation_stats(
    before: &[TokenProfile],
    after_h: &[f64],
    cfg: &EntropyConfig,
) -> Result<(f64, f64)> {
    if before.len() != after_h.len() {
        return Err(contract("conservation inputs differ in length"));
    }
    let (mut high, mut high_kept, mut low, mut low_kept) = (0usize, 0usize, 0usize, 0usize);
    for (p, &h) in before.iter().zip(after_h) {
        let now = Class::of(h, cfg);
        match p.class {
            Class::High => {
                high += 1;
                high_kept += usize::from(now == Class::High);
            }
            Class::Low => {
                low += 1;
                low_kept += usize::from(now == Class::Low);
            }
        }
    }
    let frac = |k: usize, n: usize| if n == 0 { 1.0 } else { k as f64 / n as f64 };
    Ok((frac(high_kept, high), frac(low_kept, low)))
}
