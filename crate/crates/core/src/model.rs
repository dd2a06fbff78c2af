//! Miniature decoder-only transformer used as the frozen base model.
//!
//! Weights are stored input-major (`k×d`, so a projection is `x · W`).
//! Every attention and MLP projection is an [`InjectionPoint`] where an
//! adapter may add a low-rank term through a [`ProjectionHook`].

use numkit::{ops, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::corpus::Example;
use crate::error::{contract, AlterError, Result};
use crate::optim::{clip_global_norm, Optimizer, OptimizerKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proj {
    Q,
    K,
    V,
    O,
    Up,
    Down,
}

impl Proj {
    pub const ALL: [Proj; 6] = [Proj::Q, Proj::K, Proj::V, Proj::O, Proj::Up, Proj::Down];

    fn offset(self) -> usize {
        match self {
            Proj::Q => 2,
            Proj::K => 3,
            Proj::V => 4,
            Proj::O => 5,
            Proj::Up => 8,
            Proj::Down => 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InjectionPoint {
    pub layer: usize,
    pub proj: Proj,
}

impl std::fmt::Display for InjectionPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "block{}.{:?}", self.layer, self.proj)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_mlp: usize,
    pub context: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_mlp: 256,
            context: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.context == 0 {
            return Err(contract("model dimensions must be positive"));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(contract("d_model must be divisible by n_heads"));
        }
        Ok(())
    }

    /// Every projection of every block.
    pub fn all_points(&self) -> Vec<InjectionPoint> {
        (0..self.n_layers)
            .flat_map(|layer| Proj::ALL.map(|proj| InjectionPoint { layer, proj }))
            .collect()
    }

    /// `(d, k)`: output and input width of the projection at `point`.
    pub fn point_dims(&self, point: InjectionPoint) -> (usize, usize) {
        match point.proj {
            Proj::Q | Proj::K | Proj::V | Proj::O => (self.d_model, self.d_model),
            Proj::Up => (self.d_mlp, self.d_model),
            Proj::Down => (self.d_model, self.d_mlp),
        }
    }
}

const PER_BLOCK: usize = 12;

/// Index of each block tensor relative to the block start:
/// ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w_up, b_up, w_down, b_down.
const BLOCK_NAMES: [&str; PER_BLOCK] = [
    "ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w_up", "b_up", "w_down", "b_down",
];

#[derive(Clone, Debug, PartialEq)]
pub struct BaseModel {
    config: ModelConfig,
    params: Vec<Tensor>,
}

impl BaseModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut normal = |rows: usize, cols: usize, std: f64| {
            let n = Normal::new(0.0, std).expect("positive std");
            let data = (0..rows * cols).map(|_| n.sample(&mut rng)).collect();
            Tensor::new(rows, cols, data).expect("shape")
        };
        let resid_std = 0.02 / (2.0 * config.n_layers as f64).sqrt();
        let mut params = vec![
            normal(config.vocab_size, d, 0.02),
            normal(config.context, d, 0.02),
        ];
        for _ in 0..config.n_layers {
            params.push(Tensor::ones(1, d));
            params.push(Tensor::zeros(1, d));
            params.push(normal(d, d, 0.02));
            params.push(normal(d, d, 0.02));
            params.push(normal(d, d, 0.02));
            params.push(normal(d, d, resid_std));
            params.push(Tensor::ones(1, d));
            params.push(Tensor::zeros(1, d));
            params.push(normal(d, config.d_mlp, 0.02));
            params.push(Tensor::zeros(1, config.d_mlp));
            params.push(normal(config.d_mlp, d, resid_std));
            params.push(Tensor::zeros(1, d));
        }
        params.push(Tensor::ones(1, d));
        params.push(Tensor::zeros(1, d));
        params.push(normal(d, config.vocab_size, 0.02));
        Ok(Self { config, params })
    }

    /// Rebuilds a model from named tensors in [`BaseModel::param_names`] order.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        let template = Self::new(config.clone(), 0)?;
        if params.len() != template.params.len() {
            return Err(contract(format!(
                "expected {} tensors, got {}",
                template.params.len(),
                params.len()
            )));
        }
        for (i, (a, b)) in params.iter().zip(&template.params).enumerate() {
            if a.shape() != b.shape() {
                return Err(contract(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    template.param_names()[i],
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
        for b in 0..self.config.n_layers {
            names.extend(BLOCK_NAMES.iter().map(|n| format!("block{b}.{n}")));
        }
        names.extend(["lnf_g", "lnf_b", "w_out"].map(String::from));
        names
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Index into [`BaseModel::params`] of the weight at `point`.
    pub fn weight_index(&self, point: InjectionPoint) -> usize {
        2 + PER_BLOCK * point.layer + point.proj.offset()
    }

    pub fn weight(&self, point: InjectionPoint) -> &Tensor {
        &self.params[self.weight_index(point)]
    }

    /// Graph leaves for every tensor; trainable ones when `trainable`.
    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> Vec<Var<'g>> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect()
    }

    /// Logits and final hidden states without any adapter.
    pub fn forward_plain(&self, ids: &[usize]) -> Result<(Tensor, Tensor)> {
        let g = Graph::new();
        g.no_grad(|| {
            let vars = self.bind(&g, false);
            let out = forward(&self.config, &vars, ids, None)?;
            Ok(((*out.logits.value()).clone(), (*out.hidden.value()).clone()))
        })
    }

    pub fn logits(&self, ids: &[usize]) -> Result<Tensor> {
        Ok(self.forward_plain(ids)?.0)
    }

    /// Adds the model under section `base` and its config under meta `model`.
    pub fn write_to(&self, ck: &mut Checkpoint) -> Result<()> {
        ck.meta.insert("model".into(), serde_json::to_value(&self.config)?);
        for (name, t) in self.param_names().into_iter().zip(&self.params) {
            ck.push(SECTION, name, t.clone());
        }
        Ok(())
    }

    pub fn read_from(ck: &Checkpoint, path: &Path) -> Result<Self> {
        let cfg = ck
            .meta
            .get("model")
            .ok_or_else(|| AlterError::format(path, "checkpoint has no model config"))?;
        let config: ModelConfig = serde_json::from_value(cfg.clone())
            .map_err(|e| AlterError::format(path, format!("model config: {e}")))?;
        let template = Self::new(config.clone(), 0)?;
        let stored = ck.section(SECTION);
        let names = template.param_names();
        if stored.len() != names.len()
            || stored.iter().zip(&names).any(|((n, _), m)| n != m)
        {
            return Err(AlterError::format(path, "base tensors do not match the model config"));
        }
        let params = stored.into_iter().map(|(_, t)| t.clone()).collect();
        Self::from_params(config, params).map_err(|e| AlterError::format(path, e.to_string()))
    }
}

const SECTION: &str = "base";

/// Supplies the low-rank term added to a projection output.
pub trait ProjectionHook<'g> {
    /// Term to add to `x · W0` at `point`, if any. `x` is `T×k`.
    fn delta(&self, point: InjectionPoint, x: Var<'g>) -> Option<Var<'g>>;
}

pub struct ForwardOut<'g> {
    /// `T×V`.
    pub logits: Var<'g>,
    /// Final residual stream before the output norm, `T×d_model`.
    pub hidden: Var<'g>,
}

fn causal_mask(t: usize) -> Tensor {
    let mut m = Tensor::zeros(t, t);
    for i in 0..t {
        for j in i + 1..t {
            m.set(i, j, -1e9);
        }
    }
    m
}

/// Records the forward pass of the model whose tensors are `p`.
pub fn forward<'g>(
    cfg: &ModelConfig,
    p: &[Var<'g>],
    ids: &[usize],
    hook: Option<&dyn ProjectionHook<'g>>,
) -> Result<ForwardOut<'g>> {
    let t = ids.len();
    if t == 0 {
        return Err(contract("forward needs at least one token"));
    }
    if t > cfg.context {
        return Err(contract(format!(
            "sequence of {t} tokens exceeds context {}",
            cfg.context
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(contract(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let g = p[0].graph();
    let d = cfg.d_model;
    let dh = d / cfg.n_heads;
    let positions: Vec<usize> = (0..t).collect();
    let mut x = p[0].gather_rows(ids).add(p[1].gather_rows(&positions));
    let mask = g.constant(causal_mask(t));
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    let project = |x: Var<'g>, layer: usize, proj: Proj| -> Var<'g> {
        let w = p[2 + PER_BLOCK * layer + proj.offset()];
        let y = x.matmul(w);
        match hook.and_then(|h| h.delta(InjectionPoint { layer, proj }, x)) {
            Some(delta) => y.add(delta),
            None => y,
        }
    };

    for layer in 0..cfg.n_layers {
        let b = 2 + PER_BLOCK * layer;
        let h = ops::layer_norm(x, p[b], p[b + 1], 1e-5);
        let q = project(h, layer, Proj::Q);
        let k = project(h, layer, Proj::K);
        let v = project(h, layer, Proj::V);
        let mut heads: Option<Var<'g>> = None;
        for head in 0..cfg.n_heads {
            let qh = q.slice_cols(head * dh, dh);
            let kh = k.slice_cols(head * dh, dh);
            let vh = v.slice_cols(head * dh, dh);
            let scores = qh.matmul(kh.t()).scale(inv_sqrt).add(mask);
            let out = ops::softmax_rows(scores).matmul(vh).pad_cols(head * dh, d);
            heads = Some(match heads {
                Some(acc) => acc.add(out),
                None => out,
            });
        }
        let attn = heads.expect("at least one head");
        x = x.add(project(attn, layer, Proj::O));

        let h2 = ops::layer_norm(x, p[b + 6], p[b + 7], 1e-5);
        let up = project(h2, layer, Proj::Up).add(p[b + 9].broadcast_rows(t));
        let down = project(ops::gelu(up), layer, Proj::Down).add(p[b + 11].broadcast_rows(t));
        x = x.add(down);
    }
    let n = p.len();
    let hf = ops::layer_norm(x, p[n - 3], p[n - 2], 1e-5);
    let logits = hf.matmul(p[n - 1]);
    Ok(ForwardOut { logits, hidden: x })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub clip: f64,
    pub seed: u64,
    /// Redraw answer connectives every epoch so they stay unpredictable.
    pub resample_connectives: bool,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 3e-3,
            batch_size: 8,
            clip: 1.0,
            seed: 7,
            resample_connectives: true,
        }
    }
}

/// Mean training loss of each epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
}

/// Deterministic per-epoch permutation.
pub fn shuffled_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order
}

/// Copy of `ex` with every answer connective replaced by a random one.
pub fn resample_connectives(ex: &Example, connectives: &[usize], rng: &mut ChaCha8Rng) -> Example {
    use rand::seq::SliceRandom;
    let mut out = ex.clone();
    for t in 0..ex.rows() {
        if ex.answer[t] && !ex.scored[t] {
            if let Some(&c) = connectives.choose(rng) {
                out.ids[t + 1] = c;
            }
        }
    }
    out
}

/// Next-token cross-entropy training over every position of `examples`.
/// `connectives` are the ids drawn from when resampling is enabled.
pub fn train_base(
    model: &mut BaseModel,
    examples: &[Example],
    connectives: &[usize],
    cfg: &BaseTrainConfig,
) -> Result<TrainLog> {
    if examples.is_empty() {
        return Err(contract("training corpus is empty"));
    }
    let mut opt = Optimizer::new(OptimizerKind::Adam);
    let mut log = TrainLog::default();
    let mut step = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc0ff_ee00);
    for epoch in 0..cfg.epochs {
        let order = shuffled_order(examples.len(), cfg.seed, epoch);
        let epoch_examples: Vec<Example> = if cfg.resample_connectives {
            examples
                .iter()
                .map(|ex| resample_connectives(ex, connectives, &mut rng))
                .collect()
        } else {
            examples.to_vec()
        };
        let examples = &epoch_examples;
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let g = Graph::new();
            let vars = model.bind(&g, true);
            let rows: usize = chunk.iter().map(|&i| examples[i].rows()).sum();
            let mut loss: Option<Var> = None;
            for &i in chunk {
                let ex = &examples[i];
                let out = forward(model.config(), &vars, ex.inputs(), None)?;
                let mask = vec![true; ex.rows()];
                let ce = ops::cross_entropy(out.logits, ex.targets(), &mask)?
                    .scale(ex.rows() as f64 / rows as f64);
                loss = Some(match loss {
                    Some(l) => l.add(ce),
                    None => ce,
                });
            }
            let loss = loss.expect("non-empty batch");
            let value = loss.value().scalar_value()?;
            if !value.is_finite() {
                return Err(AlterError::Divergence {
                    step,
                    detail: format!("loss {value}"),
                });
            }
            let mut grads: Vec<Tensor> = g
                .grad(loss, &vars, false)?
                .into_iter()
                .map(|v| (*v.value()).clone())
                .collect();
            clip_global_norm(&mut grads, cfg.clip);
            for (slot, (p, gr)) in model.params.iter_mut().zip(&grads).enumerate() {
                opt.update(slot, p, gr, cfg.lr);
            }
            total += value;
            batches += 1;
            step += 1;
        }
        log.epoch_loss.push(total / batches as f64);
        log::debug!("base epoch {epoch}: loss {:.4}", total / batches as f64);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_mlp: 16,
            context: 8,
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let m = BaseModel::new(tiny(), 3).unwrap();
        let a = m.logits(&[1, 4, 5, 2]).unwrap();
        let b = m.logits(&[1, 4, 5, 2]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), [4, 11]);
    }

    #[test]
    fn causal_prefix_is_unaffected_by_later_tokens() {
        let m = BaseModel::new(tiny(), 3).unwrap();
        let a = m.logits(&[1, 4, 5, 2]).unwrap();
        let b = m.logits(&[1, 4, 9, 9]).unwrap();
        assert!(a.row(1).iter().zip(b.row(1)).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn bad_inputs_are_contract_errors() {
        let m = BaseModel::new(tiny(), 3).unwrap();
        assert!(m.logits(&[]).is_err());
        assert!(m.logits(&[11]).is_err());
        assert!(m.logits(&[1; 9]).is_err());
    }

    #[test]
    fn names_match_tensors() {
        let m = BaseModel::new(tiny(), 3).unwrap();
        assert_eq!(m.param_names().len(), m.params().len());
        let w = m.weight(InjectionPoint { layer: 1, proj: Proj::Down });
        assert_eq!(w.shape(), [16, 8]);
        let names = m.param_names();
        assert_eq!(names[m.weight_index(InjectionPoint { layer: 0, proj: Proj::O })], "block0.wo");
        assert_eq!(names[m.weight_index(InjectionPoint { layer: 1, proj: Proj::Up })], "block1.w_up");
    }

    #[test]
    fn zero_epochs_changes_nothing() {
        let mut m = BaseModel::new(tiny(), 3).unwrap();
        let before = m.clone();
        let ex = Example {
            id: "x".into(),
            subdomain: crate::corpus::Subdomain::Retain,
            ids: vec![1, 4, 5, 2],
            answer: vec![false, true, true],
            scored: vec![false, true, true],
        };
        let cfg = BaseTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        train_base(&mut m, &[ex], &[], &cfg).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn model_gradients_match_central_differences() {
        let cfg = ModelConfig {
            vocab_size: 5,
            d_model: 4,
            n_heads: 2,
            n_layers: 1,
            d_mlp: 6,
            context: 4,
        };
        let m = BaseModel::new(cfg.clone(), 5).unwrap();
        // Larger weights than the default init keep every gradient entry
        // well above central-difference noise.
        let params: Vec<Tensor> = m.params().iter().map(|t| t.map(|v| v * 4.0 + 0.05)).collect();
        let err = numkit::finite_diff_check(
            |_, vars| {
                let out = forward(&cfg, vars, &[1, 3, 2], None).map_err(|e| match e {
                    AlterError::Num(n) => n,
                    other => numkit::NumError::Contract(other.to_string()),
                })?;
                ops::cross_entropy(out.logits, &[3, 2, 4], &[true, true, true])
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
