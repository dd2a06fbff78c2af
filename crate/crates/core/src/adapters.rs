//! Asymmetric LoRA: one shared `A` per injection point, forgetting experts
//! `B_f^d`, a retention expert `B_r`, expert weights `ω` and the entropy gate.
//!
//! Matrices follow the column-vector convention `ΔW = B A` with `A` of
//! shape `r×k` and `B` of shape `d×r`. Activations are rows, so the
//! contribution to `x W0` is `x Aᵀ Bᵀ`.

use std::path::Path;

use numkit::{ops, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::entropy::{tsallis_entropy, EntropyConfig};
use crate::error::{contract, AlterError, Result};
use crate::model::{InjectionPoint, ModelConfig, ProjectionHook, Proj};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub rank: usize,
    /// Projections that carry adapters. Empty means every projection.
    pub points: Vec<InjectionPoint>,
    pub init_eps: f64,
    pub tau_high: f64,
    pub tau_low: f64,
    pub top_k: usize,
    /// Without the gate every row uses the joint composition at inference.
    pub gate: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            points: vec![InjectionPoint {
                layer: 0,
                proj: Proj::O,
            }],
            init_eps: 1e-3,
            tau_high: 0.8,
            tau_low: 0.01,
            top_k: 3,
            gate: true,
        }
    }
}

impl AdapterConfig {
    pub fn resolved_points(&self, model: &ModelConfig) -> Result<Vec<InjectionPoint>> {
        if self.points.is_empty() {
            return Ok(model.all_points());
        }
        for p in &self.points {
            if p.layer >= model.n_layers {
                return Err(contract(format!("injection point {p} beyond {} blocks", model.n_layers)));
            }
        }
        let mut pts = self.points.clone();
        pts.sort();
        pts.dedup();
        Ok(pts)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(contract("rank must be at least 1"));
        }
        if !(self.init_eps >= 0.0 && self.tau_high > 0.0 && self.tau_low > 0.0) {
            return Err(contract("init_eps must be non-negative and temperatures positive"));
        }
        if self.top_k == 0 {
            return Err(contract("top_k must be at least 1"));
        }
        Ok(())
    }
}

/// Kaiming-normal `r×k` matrix with variance `2/k`.
pub fn init_shared_a(r: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let n = Normal::new(0.0, (2.0 / k as f64).sqrt()).expect("positive variance");
    let data = (0..r * k).map(|_| n.sample(rng)).collect();
    Tensor::new(r, k, data).expect("shape")
}

/// `ε ĉ u₁ᵀ` as a `d×r` matrix: the unit centroid in the first column.
/// A zero centroid, or one whose width is not `d`, gives zeros.
pub fn init_expert_b(centroid: &[f64], d: usize, r: usize, eps: f64) -> Tensor {
    let mut b = Tensor::zeros(d, r);
    let norm = centroid.iter().map(|v| v * v).sum::<f64>().sqrt();
    if centroid.len() != d || norm == 0.0 {
        log::warn!("expert initialised to zero (centroid width {}, norm {norm})", centroid.len());
        return b;
    }
    for (i, c) in centroid.iter().enumerate() {
        b.set(i, 0, eps * c / norm);
    }
    b
}

/// `softmax(W_g · s / τ)` with `τ` switched on the route threshold.
pub fn gate(s: f64, w_g: &[f64], ecfg: &EntropyConfig, acfg: &AdapterConfig) -> Vec<f64> {
    gate_with_features(s, w_g, &vec![1.0; w_g.len()], ecfg, acfg)
}

/// Gate whose logit for expert `e` is `W_g[e] φ[e] s / τ`.
pub fn gate_with_features(
    s: f64,
    w_g: &[f64],
    phi: &[f64],
    ecfg: &EntropyConfig,
    acfg: &AdapterConfig,
) -> Vec<f64> {
    let tau = temperature(s, ecfg, acfg);
    let mut z: Vec<f64> = w_g.iter().zip(phi).map(|(w, f)| w * f * s / tau).collect();
    numkit::softmax_in_place(&mut z);
    z
}

fn temperature(s: f64, ecfg: &EntropyConfig, acfg: &AdapterConfig) -> f64 {
    if s > ecfg.route_threshold {
        acfg.tau_high
    } else {
        acfg.tau_low
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest values in increasing index order; ties keep
/// the lower index.
pub fn top_k(v: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Which expert an example trains or is routed to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Expert {
    /// Zero-based forgetting expert.
    Forget(usize),
    Retain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointAdapter {
    pub point: InjectionPoint,
    pub a: Tensor,
    pub b_f: Vec<Tensor>,
    pub b_r: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsymAdapterSet {
    pub config: AdapterConfig,
    pub points: Vec<PointAdapter>,
    /// `1×N` expert weights used by the training composition.
    pub omega: Tensor,
    /// `1×(N+1)` gate weights; the last entry belongs to the retention expert.
    pub w_g: Tensor,
    /// `(N+1)×V` mean next-token distributions the router compares against
    /// (forgetting experts, then retention).
    pub route_centroids: Tensor,
}

/// Per-expert centroids, one row per forgetting expert then the retention
/// row: hidden-state means seed the experts, next-token distribution means
/// drive routing.
#[derive(Clone, Debug, PartialEq)]
pub struct Centroids {
    pub init: Tensor,
    pub route: Tensor,
}

impl AsymAdapterSet {
    pub fn new(model: &ModelConfig, config: AdapterConfig, centroids: &Centroids, seed: u64) -> Result<Self> {
        config.validate()?;
        let (init, route) = (&centroids.init, &centroids.route);
        if init.rows() < 2 || init.cols() != model.d_model {
            return Err(contract(format!(
                "initial centroids must be (N+1)×{} with N ≥ 1, got {:?}",
                model.d_model,
                init.shape()
            )));
        }
        if route.shape() != [init.rows(), model.vocab_size] {
            return Err(contract(format!(
                "routing centroids must be {}×{}, got {:?}",
                init.rows(),
                model.vocab_size,
                route.shape()
            )));
        }
        let n = init.rows() - 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = config
            .resolved_points(model)?
            .into_iter()
            .map(|point| {
                let (d, k) = model.point_dims(point);
                let r = config.rank;
                PointAdapter {
                    point,
                    a: init_shared_a(r, k, &mut rng),
                    b_f: (0..n)
                        .map(|e| init_expert_b(init.row(e), d, r, config.init_eps))
                        .collect(),
                    b_r: init_expert_b(init.row(n), d, r, config.init_eps),
                }
            })
            .collect();
        Ok(Self {
            config,
            points,
            omega: Tensor::ones(1, n),
            w_g: Tensor::ones(1, n + 1),
            route_centroids: route.clone(),
        })
    }

    pub fn n_experts(&self) -> usize {
        self.omega.cols()
    }

    /// Trainable scalars: every `A` and `B`, `ω` and `W_g`.
    pub fn num_trainable(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Every trainable tensor in slot order: per point `A`, `B_f^1..N`,
    /// `B_r`; then `ω` and `W_g`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for p in &self.points {
            out.push(&p.a);
            out.extend(p.b_f.iter());
            out.push(&p.b_r);
        }
        out.push(&self.omega);
        out.push(&self.w_g);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for p in &mut self.points {
            out.push(&mut p.a);
            out.extend(p.b_f.iter_mut());
            out.push(&mut p.b_r);
        }
        out.push(&mut self.omega);
        out.push(&mut self.w_g);
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for p in &self.points {
            out.push(format!("{}.A", p.point));
            out.extend((1..=p.b_f.len()).map(|d| format!("{}.B_f{d}", p.point)));
            out.push(format!("{}.B_r", p.point));
        }
        out.push("omega".into());
        out.push("W_g".into());
        out
    }

    /// Slot indices of the tensors that belong to `group`.
    pub fn slots(&self, group: ParamGroup) -> Vec<usize> {
        let n = self.n_experts();
        let per = n + 2;
        let np = self.points.len();
        match group {
            ParamGroup::A => (0..np).map(|i| i * per).collect(),
            ParamGroup::Forget(d) => (0..np).map(|i| i * per + 1 + d).collect(),
            ParamGroup::Retain => (0..np).map(|i| i * per + 1 + n).collect(),
            ParamGroup::Omega => vec![np * per],
            ParamGroup::Gate => vec![np * per + 1],
        }
    }

    pub fn bind<'g>(&self, g: &'g Graph) -> AdapterVars<'g> {
        let vars = self.tensors().into_iter().map(|t| g.param(t.clone())).collect();
        self.wrap(vars).expect("one var per tensor")
    }

    /// Treats `vars` as this set's tensors, in [`Self::tensors`] order.
    pub fn wrap<'g>(&self, vars: Vec<Var<'g>>) -> Result<AdapterVars<'g>> {
        let shapes: Vec<[usize; 2]> = self.tensors().iter().map(|t| t.shape()).collect();
        if vars.len() != shapes.len() || vars.iter().zip(&shapes).any(|(v, s)| v.shape() != *s) {
            return Err(contract("vars do not match the adapter tensors"));
        }
        Ok(AdapterVars {
            vars,
            n: self.n_experts(),
            points: self.points.iter().map(|p| p.point).collect(),
        })
    }

    /// Effective `ΔW = (B_r + Σ ω_d B_f^d) A` per injection point, `d×k`.
    pub fn compose_weights(&self) -> Vec<(InjectionPoint, Tensor)> {
        self.points
            .iter()
            .map(|p| {
                let mut b = p.b_r.clone();
                for (d, bf) in p.b_f.iter().enumerate() {
                    b = b.add(&bf.scale(self.omega.get(0, d))).expect("same shape");
                }
                (p.point, b.matmul(&p.a).expect("inner dims"))
            })
            .collect()
    }

    pub fn write_to(&self, ck: &mut Checkpoint) -> Result<()> {
        ck.meta.insert("adapters".into(), serde_json::to_value(&self.config)?);
        for (name, t) in self.tensor_names().into_iter().zip(self.tensors()) {
            ck.push(SECTION, name, t.clone());
        }
        ck.push(BUFFERS, "route_centroids", self.route_centroids.clone());
        for (point, dw) in self.compose_weights() {
            ck.push(MERGED, format!("{point}.delta_W"), dw);
        }
        Ok(())
    }

    pub fn read_from(ck: &Checkpoint, model: &ModelConfig, path: &Path) -> Result<Self> {
        let bad = |d: String| AlterError::format(path, d);
        let cfg = ck
            .meta
            .get("adapters")
            .ok_or_else(|| bad("checkpoint has no adapter config".into()))?;
        let config: AdapterConfig =
            serde_json::from_value(cfg.clone()).map_err(|e| bad(format!("adapter config: {e}")))?;
        let route = ck
            .section(BUFFERS)
            .into_iter()
            .find(|(n, _)| *n == "route_centroids")
            .map(|(_, t)| t.clone())
            .ok_or_else(|| bad("checkpoint has no routing centroids".into()))?;
        // Experts are overwritten below, so any well-shaped seed will do.
        let centroids = Centroids {
            init: Tensor::ones(route.rows(), model.d_model),
            route,
        };
        let mut set = Self::new(model, config, &centroids, 0).map_err(|e| bad(e.to_string()))?;
        let stored = ck.section(SECTION);
        let names = set.tensor_names();
        if stored.len() != names.len() || stored.iter().zip(&names).any(|((n, _), m)| n != m) {
            return Err(bad("adapter tensors do not match the adapter config".into()));
        }
        for (slot, (_, t)) in set.tensors_mut().into_iter().zip(stored) {
            if slot.shape() != t.shape() {
                return Err(bad("adapter tensor shape mismatch".into()));
            }
            *slot = t.clone();
        }
        Ok(set)
    }
}

const SECTION: &str = "adapters";
const BUFFERS: &str = "adapter_buffers";
const MERGED: &str = "merged";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    A,
    Forget(usize),
    Retain,
    Omega,
    Gate,
}

/// Graph leaves of an adapter set, in [`AsymAdapterSet::tensors`] order.
pub struct AdapterVars<'g> {
    pub vars: Vec<Var<'g>>,
    n: usize,
    points: Vec<InjectionPoint>,
}

impl<'g> AdapterVars<'g> {
    fn base(&self, point: InjectionPoint) -> Option<usize> {
        self.points.iter().position(|&p| p == point).map(|i| i * (self.n + 2))
    }

    pub fn a_vars(&self) -> Vec<Var<'g>> {
        (0..self.points.len()).map(|i| self.vars[i * (self.n + 2)]).collect()
    }

    pub fn omega(&self) -> Var<'g> {
        self.vars[self.points.len() * (self.n + 2)]
    }

    pub fn w_g(&self) -> Var<'g> {
        self.vars[self.points.len() * (self.n + 2) + 1]
    }

    pub fn group(&self, set: &AsymAdapterSet, group: ParamGroup) -> Vec<Var<'g>> {
        set.slots(group).into_iter().map(|s| self.vars[s]).collect()
    }
}

/// Per-row inputs of the gate, computed from a pass of the frozen base.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteInputs {
    /// Entropy compared against the route threshold.
    pub s: Vec<f64>,
    /// `T×(N+1)` centred cosine between each row's next-token distribution
    /// and each expert's routing centroid.
    pub phi: Tensor,
    /// Rows taking the multi-expert branch.
    pub high: Vec<bool>,
}

/// Centred cosine similarities of `rows` to the centroids.
pub fn centroid_features(rows: &Tensor, centroids: &Tensor) -> Tensor {
    let (m, d) = (centroids.rows(), centroids.cols());
    let mut mu = vec![0.0; d];
    for e in 0..m {
        for (acc, v) in mu.iter_mut().zip(centroids.row(e)) {
            *acc += v / m as f64;
        }
    }
    let centred = |row: &[f64]| -> Vec<f64> { row.iter().zip(&mu).map(|(a, b)| a - b).collect() };
    let cs: Vec<Vec<f64>> = (0..m).map(|e| centred(centroids.row(e))).collect();
    let mut out = Tensor::zeros(rows.rows(), m);
    for t in 0..rows.rows() {
        let h = centred(rows.row(t));
        let hn = h.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (e, c) in cs.iter().enumerate() {
            let cn = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot: f64 = h.iter().zip(c).map(|(a, b)| a * b).sum();
            let denom = hn * cn;
            out.set(t, e, if denom > 0.0 { dot / denom } else { 0.0 });
        }
    }
    out
}

/// Gate inputs for one example from the base next-token distribution. Rows
/// whose routing entropy exceeds the threshold take the High branch.
pub fn route_inputs(base_logits: &Tensor, route_centroids: &Tensor, ecfg: &EntropyConfig) -> Result<RouteInputs> {
    let probs = base_logits.softmax_rows();
    let s = (0..probs.rows())
        .map(|t| tsallis_entropy(probs.row(t), ecfg.q_route))
        .collect::<Result<Vec<f64>>>()?;
    let high = s.iter().map(|&v| v > ecfg.route_threshold).collect();
    Ok(RouteInputs {
        s,
        phi: centroid_features(&probs, route_centroids),
        high,
    })
}

/// How expert outputs are combined.
pub enum Composition<'g> {
    /// `B_r + Σ ω_d B_f^d` on every row.
    Joint,
    /// One expert on every row: `ω_d B_f^d` or `B_r`.
    Single(Expert),
    /// Per-row coefficients: column `d < N` multiplies `B_f^d`, column `N`
    /// multiplies `B_r`.
    Routed(Var<'g>),
}

/// Builds the `T×(N+1)` routed coefficients. High rows use `B_r` plus the
/// top-k gated forgetting experts; Low rows use only the highest-weight
/// expert, including the retention expert.
pub fn routed_coefficients<'g>(
    vars: &AdapterVars<'g>,
    set: &AsymAdapterSet,
    route: &RouteInputs,
) -> Var<'g> {
    let g = vars.w_g().graph();
    let n = set.n_experts();
    let t_len = route.s.len();
    let acfg = &set.config;
    let mut scale = Tensor::zeros(t_len, n + 1);
    for t in 0..t_len {
        let tau = if route.high[t] { acfg.tau_high } else { acfg.tau_low };
        for e in 0..=n {
            scale.set(t, e, route.phi.get(t, e) * route.s[t] / tau);
        }
    }
    let logits = vars.w_g().broadcast_rows(t_len).mul(g.constant(scale));
    let lv = logits.value();
    let gates = ops::softmax_rows(logits.slice_cols(0, n));
    let gv = gates.value();
    let mut keep = Tensor::zeros(t_len, n + 1);
    let mut fixed = Tensor::zeros(t_len, n + 1);
    for t in 0..t_len {
        if route.high[t] {
            for d in top_k(gv.row(t), acfg.top_k.min(n)) {
                keep.set(t, d, 1.0);
            }
            fixed.set(t, n, 1.0);
        } else {
            fixed.set(t, argmax(lv.row(t)), 1.0);
        }
    }
    gates
        .pad_cols(0, n + 1)
        .mul(g.constant(keep))
        .add(g.constant(fixed))
}

/// Projection hook that adds the adapter term under a composition.
pub struct AdapterHook<'g, 'a> {
    pub vars: &'a AdapterVars<'g>,
    pub composition: Composition<'g>,
}

impl<'g> ProjectionHook<'g> for AdapterHook<'g, '_> {
    fn delta(&self, point: InjectionPoint, x: Var<'g>) -> Option<Var<'g>> {
        let base = self.vars.base(point)?;
        let n = self.vars.n;
        let v = &self.vars.vars;
        let u = x.matmul(v[base].t());
        let b_f = |d: usize| v[base + 1 + d];
        let b_r = v[base + 1 + n];
        let omega = self.vars.omega();
        Some(match &self.composition {
            Composition::Joint => {
                let mut b = b_r;
                for d in 0..n {
                    b = b.add(ops::scale_by(b_f(d), omega.slice_cols(d, 1)));
                }
                u.matmul(b.t())
            }
            Composition::Single(Expert::Forget(d)) => {
                ops::scale_by(u.matmul(b_f(*d).t()), omega.slice_cols(*d, 1))
            }
            Composition::Single(Expert::Retain) => u.matmul(b_r.t()),
            Composition::Routed(coef) => {
                let mut y = ops::scale_rows(u.matmul(b_r.t()), coef.slice_cols(n, 1));
                for d in 0..n {
                    y = y.add(ops::scale_rows(u.matmul(b_f(d).t()), coef.slice_cols(d, 1)));
                }
                y
            }
        })
    }
}
