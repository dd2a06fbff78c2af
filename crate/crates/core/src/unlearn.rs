//! Unlearning losses, the two training stages with gradient isolation,
//! sequential rounds and the gradient-difference baseline.

use std::time::Instant;

use numkit::{grad_norm_penalty, ops, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    routed_coefficients, AdapterConfig, AdapterHook, AdapterVars, AsymAdapterSet, Composition,
    Expert, ParamGroup, RouteInputs,
};
use crate::corpus::Example;
use crate::entropy::{Class, EntropyConfig, TokenProfile};
use crate::error::{contract, AlterError, Result};
use crate::model::{forward, shuffled_order, BaseModel};
use crate::optim::{Optimizer, OptimizerKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub lr_a: f64,
    pub lr_b: f64,
    /// Learning rate of the gate weights during stage 1.
    pub lr_gate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub stage1_epochs: usize,
    /// High rows sampled per step for the structural penalty.
    pub structural_positions: usize,
    pub optimizer: OptimizerKind,
    pub entropy: EntropyConfig,
    pub adapter: AdapterConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            gamma: 1.0,
            lambda: 0.01,
            lr_a: 1e-5,
            lr_b: 1e-3,
            lr_gate: 1e-3,
            batch_size: 4,
            epochs: 3,
            stage1_epochs: 1,
            structural_positions: 4,
            optimizer: OptimizerKind::Adam,
            entropy: EntropyConfig::default(),
            adapter: AdapterConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.gamma >= 0.0 && self.lambda >= 0.0) {
            return Err(contract("beta, gamma and lambda must be non-negative"));
        }
        if !(self.lr_a > 0.0 && self.lr_b > 0.0 && self.lr_gate > 0.0) {
            return Err(contract("learning rates must be positive"));
        }
        if self.batch_size == 0 {
            return Err(contract("batch size must be positive"));
        }
        self.entropy.validate()?;
        self.adapter.validate()
    }
}

/// Mean over masked rows of `1 + p(y) - max_{v≠y} p(v)`. The competitor
/// is the lowest-index maximiser and is treated as a fixed selection.
pub fn loss_ihl<'g>(logits: Var<'g>, targets: &[usize], mask: &[bool]) -> Result<Var<'g>> {
    let [rows, v] = logits.shape();
    check_rows(rows, v, targets, mask)?;
    let p = ops::softmax_rows(logits);
    let pv = p.value();
    let rivals: Vec<usize> = (0..rows)
        .map(|t| {
            let row = pv.row(t);
            let mut best = usize::MAX;
            for (i, &x) in row.iter().enumerate() {
                if i != targets[t] && (best == usize::MAX || x > row[best]) {
                    best = i;
                }
            }
            best.min(v - 1)
        })
        .collect();
    let g = logits.graph();
    let per_row = g
        .scalar(1.0)
        .broadcast_all(rows, 1)
        .add(p.pick_cols(targets))
        .sub(p.pick_cols_selected(&rivals));
    Ok(ops::masked_mean(per_row, mask)?)
}

fn check_rows(rows: usize, v: usize, targets: &[usize], mask: &[bool]) -> Result<()> {
    if targets.len() != rows || mask.len() != rows {
        return Err(contract(format!(
            "{rows} logit rows but {} targets and {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    if v < 2 {
        return Err(contract("vocabulary needs at least two tokens"));
    }
    if let Some(&y) = targets.iter().find(|&&y| y >= v) {
        return Err(contract(format!("target {y} outside vocabulary of {v}")));
    }
    Ok(())
}

/// Cross-entropy over masked rows.
pub fn loss_retain<'g>(logits: Var<'g>, targets: &[usize], mask: &[bool]) -> Result<Var<'g>> {
    Ok(ops::cross_entropy(logits, targets, mask)?)
}

/// Recorded `S_q` of the distribution at row `t` of `logits`.
pub fn tsallis_row<'g>(logits: Var<'g>, t: usize, q: f64) -> Var<'g> {
    let logp = ops::log_softmax_rows(logits.gather_rows(&[t]));
    let g = logits.graph();
    if (q - 1.0).abs() <= 1e-8 {
        return logp.exp().mul(logp).sum().neg();
    }
    g.scalar(1.0)
        .sub(logp.scale(q).exp().sum())
        .scale(1.0 / (q - 1.0))
}

/// Mean over `entropies` of `||∂S/∂A||²`, summed over every `A` in
/// `a_vars`. The result can be differentiated again. An empty batch gives
/// zero.
pub fn loss_structural<'g>(g: &'g Graph, a_vars: &[Var<'g>], entropies: &[Var<'g>]) -> Result<Var<'g>> {
    if entropies.is_empty() {
        log::warn!("structural penalty over an empty high-entropy batch");
        return Ok(g.scalar(0.0));
    }
    let mut total: Option<Var<'g>> = None;
    for &s in entropies {
        let pen = grad_norm_penalty(g, s, a_vars)?;
        total = Some(match total {
            Some(t) => t.add(pen),
            None => pen,
        });
    }
    Ok(total.expect("non-empty").scale(1.0 / entropies.len() as f64))
}

/// `β·(-CE on the forget rows) + γ·CE on the retain rows`.
#[allow(clippy::too_many_arguments)]
pub fn loss_baseline_graddiff<'g>(
    logits_f: Var<'g>,
    targets_f: &[usize],
    mask_f: &[bool],
    logits_r: Var<'g>,
    targets_r: &[usize],
    mask_r: &[bool],
    beta: f64,
    gamma: f64,
) -> Result<Var<'g>> {
    let f = ops::cross_entropy(logits_f, targets_f, mask_f)?;
    let r = ops::cross_entropy(logits_r, targets_r, mask_r)?;
    Ok(f.scale(-beta).add(r.scale(gamma)))
}

/// An example prepared for adapter training.
#[derive(Clone, Debug)]
pub struct Sample {
    pub ex: Example,
    pub profile: Vec<TokenProfile>,
    pub route: RouteInputs,
    pub expert: Expert,
}

impl Sample {
    /// Answer rows of class Low: the rows the expert losses act on.
    pub fn low_answer_mask(&self) -> Vec<bool> {
        (0..self.ex.rows())
            .map(|t| self.ex.answer[t] && self.profile[t].class == Class::Low)
            .collect()
    }

    pub fn high_mask(&self) -> Vec<bool> {
        self.profile.iter().map(|p| p.class == Class::High).collect()
    }

    /// Route inputs with branches taken from the cached classes.
    pub fn static_route(&self) -> RouteInputs {
        RouteInputs {
            high: self.high_mask(),
            ..self.route.clone()
        }
    }
}

/// Forget subdomains (zero-based experts) and the retention set, with the
/// subdomains forgotten in each round.
#[derive(Clone, Debug)]
pub struct UnlearnTask {
    pub forget: Vec<Vec<Sample>>,
    pub retain: Vec<Sample>,
    /// Expert indices whose forget sets are active in each round.
    pub rounds: Vec<Vec<usize>>,
}

impl UnlearnTask {
    pub fn validate(&self) -> Result<()> {
        if self.forget.is_empty() || self.forget.iter().any(Vec::is_empty) {
            return Err(contract("every forget subdomain needs examples"));
        }
        if self.retain.is_empty() {
            return Err(contract("retention set is empty"));
        }
        if self.rounds.is_empty() {
            return Err(contract("at least one round is required"));
        }
        for r in &self.rounds {
            if r.is_empty() || r.iter().any(|&d| d >= self.forget.len()) {
                return Err(contract(format!("round {r:?} names an unknown subdomain")));
            }
        }
        let mut ids = std::collections::HashSet::new();
        for s in self.forget.iter().flatten().chain(&self.retain) {
            if !ids.insert(&s.ex.id) {
                return Err(contract(format!("example {} appears twice", s.ex.id)));
            }
        }
        Ok(())
    }

    /// Forget samples of `round` followed by the retention set.
    pub fn round_samples(&self, round: usize) -> Vec<&Sample> {
        self.rounds[round]
            .iter()
            .flat_map(|&d| self.forget[d].iter())
            .chain(&self.retain)
            .collect()
    }

    pub fn all_samples(&self) -> Vec<&Sample> {
        self.forget.iter().flatten().chain(&self.retain).collect()
    }
}

/// Logits of `model` with the adapter term added under `composition`.
pub fn adapted_logits<'g>(
    model: &BaseModel,
    g: &'g Graph,
    vars: &AdapterVars<'g>,
    composition: Composition<'g>,
    ids: &[usize],
) -> Result<Var<'g>> {
    let base = model.bind(g, false);
    let hook = AdapterHook { vars, composition };
    Ok(forward(model.config(), &base, ids, Some(&hook))?.logits)
}

fn grads_of(g: &Graph, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
    Ok(g.grad(loss, wrt, false)?
        .into_iter()
        .map(|v| (*v.value()).clone())
        .collect())
}

fn ensure_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(AlterError::Divergence {
            step,
            detail: format!("{what} loss is {v}"),
        })
    }
}

/// Losses recorded by one stage-2 step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub ihl: Vec<Option<f64>>,
    pub retain: Option<f64>,
    pub structural: Option<f64>,
}

/// Holds optimizer state across steps; slots follow
/// [`AsymAdapterSet::tensors`], with each `ω_d` kept as its own slot.
pub struct Trainer {
    opt: Optimizer,
    step: usize,
}

impl Trainer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            opt: Optimizer::new(kind),
            step: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    fn apply(&mut self, set: &mut AsymAdapterSet, slots: &[usize], grads: &[Tensor], lr: f64) {
        let mut tensors = set.tensors_mut();
        for (&slot, grad) in slots.iter().zip(grads) {
            self.opt.update(slot, tensors[slot], grad, lr);
        }
    }

    fn apply_omega(&mut self, set: &mut AsymAdapterSet, d: usize, grad: &Tensor, lr: f64) {
        const OMEGA_SLOTS: usize = 1 << 20;
        let mut w = Tensor::scalar(set.omega.get(0, d));
        self.opt
            .update(OMEGA_SLOTS + d, &mut w, &Tensor::scalar(grad.get(0, d)), lr);
        set.omega.set(0, d, w.get(0, 0));
    }
}

/// Stage 1: trains `A` and the gate on High rows of `samples`. Experts and
/// `ω` are not touched. Returns the High-row perplexity before training
/// and after every epoch.
pub fn stage1(
    model: &BaseModel,
    set: &mut AsymAdapterSet,
    samples: &[&Sample],
    cfg: &TrainConfig,
    trainer: &mut Trainer,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut curve = vec![high_perplexity(model, set, samples)?];
    let a_slots = set.slots(ParamGroup::A);
    let gate_slots = set.slots(ParamGroup::Gate);
    let use_gate = set.config.gate;
    for epoch in 0..cfg.stage1_epochs {
        let order = shuffled_order(samples.len(), cfg.seed ^ 0x57a6e1, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let total: usize = chunk
                .iter()
                .map(|&i| samples[i].high_mask().iter().filter(|&&h| h).count())
                .sum();
            if total == 0 {
                continue;
            }
            let g = Graph::new();
            let vars = set.bind(&g);
            let mut loss: Option<Var> = None;
            for &i in chunk {
                let s = samples[i];
                let mask = s.high_mask();
                let n = mask.iter().filter(|&&h| h).count();
                if n == 0 {
                    continue;
                }
                let comp = stage1_composition(&vars, set, s, use_gate);
                let logits = adapted_logits(model, &g, &vars, comp, s.ex.inputs())?;
                let ce = loss_retain(logits, s.ex.targets(), &mask)?.scale(n as f64 / total as f64);
                loss = Some(match loss {
                    Some(l) => l.add(ce),
                    None => ce,
                });
            }
            let loss = loss.expect("at least one High row");
            ensure_finite(trainer.step, "stage 1", loss.value().scalar_value()?)?;
            let a = vars.group(set, ParamGroup::A);
            let ga = grads_of(&g, loss, &a)?;
            let gg = if use_gate {
                grads_of(&g, loss, &[vars.w_g()])?
            } else {
                Vec::new()
            };
            trainer.apply(set, &a_slots, &ga, cfg.lr_a);
            if use_gate {
                trainer.apply(set, &gate_slots, &gg, cfg.lr_gate);
            }
            trainer.step += 1;
        }
        curve.push(high_perplexity(model, set, samples)?);
        log::info!("stage 1 epoch {epoch}: high-row perplexity {:.4}", curve[curve.len() - 1]);
    }
    Ok(curve)
}

fn stage1_composition<'g>(
    vars: &AdapterVars<'g>,
    set: &AsymAdapterSet,
    s: &Sample,
    use_gate: bool,
) -> Composition<'g> {
    if use_gate {
        Composition::Routed(routed_coefficients(vars, set, &s.static_route()))
    } else {
        Composition::Joint
    }
}

/// Perplexity over the High rows of `samples` under the stage-1 composition.
pub fn high_perplexity(model: &BaseModel, set: &AsymAdapterSet, samples: &[&Sample]) -> Result<f64> {
    let mut nll = 0.0;
    let mut n = 0usize;
    for s in samples {
        let mask = s.high_mask();
        let k = mask.iter().filter(|&&h| h).count();
        if k == 0 {
            continue;
        }
        let g = Graph::new();
        let ce = g.no_grad(|| -> Result<f64> {
            let vars = set.bind(&g);
            let comp = stage1_composition(&vars, set, s, set.config.gate);
            let logits = adapted_logits(model, &g, &vars, comp, s.ex.inputs())?;
            Ok(loss_retain(logits, s.ex.targets(), &mask)?.value().scalar_value()?)
        })?;
        nll += ce * k as f64;
        n += k;
    }
    if n == 0 {
        return Err(contract("no High rows to evaluate"));
    }
    Ok((nll / n as f64).exp())
}

/// One stage-2 step. `B_f^d` and `ω_d` move only with the inverted hinge
/// loss of subdomain `d`, `B_r` only with the retention loss and `A` only
/// with the structural penalty. The gate is frozen.
pub fn stage2_step(
    model: &BaseModel,
    set: &mut AsymAdapterSet,
    batch: &[&Sample],
    cfg: &TrainConfig,
    trainer: &mut Trainer,
    rng: &mut ChaCha8Rng,
) -> Result<StepLog> {
    let n = set.n_experts();
    for s in batch {
        if let Expert::Forget(d) = s.expert {
            if d >= n {
                return Err(contract(format!(
                    "example {} is labelled with subdomain {} but there are {n} experts",
                    s.ex.id,
                    d + 1
                )));
            }
        }
        if s.profile.len() != s.ex.rows() {
            return Err(contract(format!("example {} has no matching profile", s.ex.id)));
        }
    }
    let step = trainer.step;
    let mut log = StepLog {
        ihl: vec![None; n],
        ..Default::default()
    };
    // Every term is computed from the adapters as they were at the start
    // of the step and applied afterwards.
    let frozen = set.clone();

    let mut updates: Vec<(Vec<usize>, Vec<Tensor>, f64)> = Vec::new();
    let mut omega_updates: Vec<(usize, Tensor)> = Vec::new();
    for d in 0..n {
        let members: Vec<&Sample> = batch
            .iter()
            .copied()
            .filter(|s| s.expert == Expert::Forget(d))
            .collect();
        let g = Graph::new();
        let vars = frozen.bind(&g);
        let Some(loss) = expert_term(model, &g, &vars, &members, Expert::Forget(d), cfg.beta)? else {
            continue;
        };
        let value = loss.value().scalar_value()?;
        ensure_finite(step, "forgetting", value)?;
        log.ihl[d] = Some(value);
        let b = vars.group(&frozen, ParamGroup::Forget(d));
        let mut wrt = b.clone();
        wrt.push(vars.omega());
        let mut grads = grads_of(&g, loss, &wrt)?;
        let g_omega = grads.pop().expect("omega gradient");
        updates.push((frozen.slots(ParamGroup::Forget(d)), grads, cfg.lr_b));
        omega_updates.push((d, g_omega));
    }

    let members: Vec<&Sample> = batch.iter().copied().filter(|s| s.expert == Expert::Retain).collect();
    let g = Graph::new();
    let vars = frozen.bind(&g);
    if let Some(loss) = expert_term(model, &g, &vars, &members, Expert::Retain, cfg.gamma)? {
        let value = loss.value().scalar_value()?;
        ensure_finite(step, "retention", value)?;
        log.retain = Some(value);
        let b = vars.group(&frozen, ParamGroup::Retain);
        let grads = grads_of(&g, loss, &b)?;
        updates.push((frozen.slots(ParamGroup::Retain), grads, cfg.lr_b));
    }

    if cfg.lambda > 0.0 {
        let mut rows: Vec<(usize, usize)> = batch
            .iter()
            .enumerate()
            .flat_map(|(i, s)| {
                s.high_mask()
                    .into_iter()
                    .enumerate()
                    .filter(|(_, h)| *h)
                    .map(move |(t, _)| (i, t))
            })
            .collect();
        rows.shuffle(rng);
        rows.truncate(cfg.structural_positions);
        rows.sort_unstable();
        let g = Graph::new();
        let vars = frozen.bind(&g);
        let a = vars.a_vars();
        let mut entropies = Vec::new();
        let mut i = 0;
        while i < rows.len() {
            let ex = batch[rows[i].0];
            let logits = adapted_logits(model, &g, &vars, Composition::Joint, ex.ex.inputs())?;
            while i < rows.len() && batch[rows[i].0].ex.id == ex.ex.id {
                entropies.push(tsallis_row(logits, rows[i].1, cfg.entropy.q_a));
                i += 1;
            }
        }
        if !entropies.is_empty() {
            let penalty = loss_structural(&g, &a, &entropies)?.scale(cfg.lambda);
            let value = penalty.value().scalar_value()?;
            ensure_finite(step, "structural", value)?;
            log.structural = Some(value);
            let grads = grads_of(&g, penalty, &a)?;
            updates.push((frozen.slots(ParamGroup::A), grads, cfg.lr_a));
        }
    }

    for (slots, grads, lr) in updates {
        trainer.apply(set, &slots, &grads, lr);
    }
    for (d, grad) in omega_updates {
        trainer.apply_omega(set, d, &grad, cfg.lr_b);
    }
    trainer.step += 1;
    Ok(log)
}

/// Row-weighted loss of one expert over its members' Low answer rows,
/// under that expert's composition alone.
fn expert_term<'g>(
    model: &BaseModel,
    g: &'g Graph,
    vars: &AdapterVars<'g>,
    members: &[&Sample],
    expert: Expert,
    weight: f64,
) -> Result<Option<Var<'g>>> {
    let masks: Vec<Vec<bool>> = members.iter().map(|s| s.low_answer_mask()).collect();
    let total: usize = masks.iter().map(|m| m.iter().filter(|&&b| b).count()).sum();
    if total == 0 {
        return Ok(None);
    }
    let mut loss: Option<Var<'g>> = None;
    for (s, mask) in members.iter().zip(&masks) {
        let k = mask.iter().filter(|&&b| b).count();
        if k == 0 {
            continue;
        }
        let logits = adapted_logits(model, g, vars, Composition::Single(expert), s.ex.inputs())?;
        let term = match expert {
            Expert::Forget(_) => loss_ihl(logits, s.ex.targets(), mask)?,
            Expert::Retain => loss_retain(logits, s.ex.targets(), mask)?,
        }
        .scale(weight * k as f64 / total as f64);
        loss = Some(match loss {
            Some(l) => l.add(term),
            None => term,
        });
    }
    Ok(loss)
}

fn seeded(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt)
}

/// Stage 1 once over every sample, then `cfg.epochs` of stage 2 per round.
/// `after_round` receives the round index, the adapters and the training
/// seconds spent so far. Returns the stage-1 perplexity curve.
pub fn run_unlearn<F>(
    model: &BaseModel,
    set: &mut AsymAdapterSet,
    task: &UnlearnTask,
    cfg: &TrainConfig,
    mut after_round: F,
) -> Result<Vec<f64>>
where
    F: FnMut(usize, &AsymAdapterSet, f64) -> Result<()>,
{
    cfg.validate()?;
    task.validate()?;
    if task.forget.len() != set.n_experts() {
        return Err(contract(format!(
            "{} forget subdomains for {} experts",
            task.forget.len(),
            set.n_experts()
        )));
    }
    let mut trainer = Trainer::new(cfg.optimizer);
    let mut rng = seeded(cfg.seed, 0x5712);
    let mut trained = 0.0;
    let t0 = Instant::now();
    let curve = stage1(model, set, &task.all_samples(), cfg, &mut trainer)?;
    trained += t0.elapsed().as_secs_f64();
    for round in 0..task.rounds.len() {
        let t0 = Instant::now();
        let samples = task.round_samples(round);
        for epoch in 0..cfg.epochs {
            let order = shuffled_order(samples.len(), cfg.seed ^ ((round as u64 + 1) << 32), epoch);
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| samples[i]).collect();
                stage2_step(model, set, &batch, cfg, &mut trainer, &mut rng)?;
            }
        }
        trained += t0.elapsed().as_secs_f64();
        log::info!("round {round}: {} steps, {:.1}s training", trainer.steps(), trained);
        after_round(round, set, trained)?;
    }
    Ok(curve)
}

/// Full-parameter gradient-difference fine-tuning over the same rounds and
/// batches, on answer rows. `after_round` works as in [`run_unlearn`].
pub fn run_baseline<F>(
    model: &BaseModel,
    task: &UnlearnTask,
    cfg: &TrainConfig,
    mut after_round: F,
) -> Result<BaseModel>
where
    F: FnMut(usize, &BaseModel, f64) -> Result<()>,
{
    cfg.validate()?;
    task.validate()?;
    let mut model = model.clone();
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut step = 0usize;
    let mut trained = 0.0;
    for round in 0..task.rounds.len() {
        let t0 = Instant::now();
        let samples = task.round_samples(round);
        for epoch in 0..cfg.epochs {
            let order = shuffled_order(samples.len(), cfg.seed ^ ((round as u64 + 1) << 32), epoch);
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| samples[i]).collect();
                baseline_step(&mut model, &batch, cfg, &mut opt, step)?;
                step += 1;
            }
        }
        trained += t0.elapsed().as_secs_f64();
        after_round(round, &model, trained)?;
    }
    Ok(model)
}

fn baseline_step(
    model: &mut BaseModel,
    batch: &[&Sample],
    cfg: &TrainConfig,
    opt: &mut Optimizer,
    step: usize,
) -> Result<()> {
    let g = Graph::new();
    let params = model.bind(&g, true);
    let rows = |forget: bool| -> usize {
        batch
            .iter()
            .filter(|s| matches!(s.expert, Expert::Forget(_)) == forget)
            .map(|s| s.ex.answer.iter().filter(|&&a| a).count())
            .sum()
    };
    let (nf, nr) = (rows(true), rows(false));
    let mut loss: Option<Var> = None;
    for s in batch {
        let k = s.ex.answer.iter().filter(|&&a| a).count();
        if k == 0 {
            continue;
        }
        let logits = forward(model.config(), &params, s.ex.inputs(), None)?.logits;
        let ce = ops::cross_entropy(logits, s.ex.targets(), &s.ex.answer)?;
        let term = match s.expert {
            Expert::Forget(_) => ce.scale(-cfg.beta * k as f64 / nf as f64),
            Expert::Retain => ce.scale(cfg.gamma * k as f64 / nr as f64),
        };
        loss = Some(match loss {
            Some(l) => l.add(term),
            None => term,
        });
    }
    let Some(loss) = loss else {
        return Ok(());
    };
    ensure_finite(step, "grad-diff", loss.value().scalar_value()?)?;
    let grads = grads_of(&g, loss, &params)?;
    for (slot, (p, gr)) in model.params_mut().iter_mut().zip(&grads).enumerate() {
        opt.update(slot, p, gr, cfg.lr_b);
    }
    Ok(())
}
