//! Gradient-descent training on synthetic scenes, checkpoints and the
//! foreground-mask quality probe.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::head::{build_targets, total_loss_t, DetTargets, LossComponents};
use crate::kernels::LossConfig;
use crate::model::{forward_t, init_params, Bound, ModelConfig, ModelParams};
use crate::synth::Scene;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::view::GridView;
use crate::voxelize::{voxelize, FeatureMap, GridSpec};
use crate::weights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            steps: 200,
            batch_size: 1,
            seed: 0,
            clip_norm: 10.0,
            optimizer: Optimizer::Sgd,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr must be finite and >= 0"));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::config("train.steps and train.batch_size must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("train.clip_norm must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::config("train.beta1/beta2 must lie in [0, 1) and train.eps be positive"));
        }
        Ok(())
    }
}

/// One voxelized scene with its training targets.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: FeatureMap,
    pub targets: DetTargets,
}

pub fn make_sample(scene: &Scene, spec: &GridSpec, view: &GridView, n_classes: usize, seed: u64) -> Sample {
    Sample {
        input: voxelize(&scene.cloud, spec),
        targets: build_targets(view, &scene.labeled(), n_classes, seed),
    }
}

/// Everything a step needs besides parameters and data.
#[derive(Debug, Clone, Copy)]
pub struct TrainContext<'a> {
    pub view: &'a GridView,
    pub model: &'a ModelConfig,
    pub loss: &'a LossConfig,
    pub train: &'a TrainConfig,
}

pub type Grads = BTreeMap<String, Tensor>;

/// Loss components and parameter gradients for one sample.
pub fn loss_and_grads(params: &ModelParams, sample: &Sample, ctx: &TrainContext) -> (LossComponents, Grads) {
    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, params, ctx.model);
    let (pred, _) = forward_t(&mut tape, &b, ctx.model, &sample.input, ctx.view);
    let (total, comp) = total_loss_t(&mut tape, &pred, &sample.targets, ctx.view, ctx.loss);
    let g = tape.backward(total);
    let grads = b
        .vars
        .iter()
        .map(|(name, v)| {
            let t = g.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(params.get(name).shape()));
            (name.clone(), t)
        })
        .collect();
    (comp, grads)
}

/// Loss components without gradients.
pub fn evaluate_loss(params: &ModelParams, sample: &Sample, ctx: &TrainContext) -> LossComponents {
    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, params, ctx.model);
    let (pred, _) = forward_t(&mut tape, &b, ctx.model, &sample.input, ctx.view);
    total_loss_t(&mut tape, &pred, &sample.targets, ctx.view, ctx.loss).1
}

pub fn grad_norm(grads: &Grads) -> f64 {
    grads.values().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.scale(s);
        }
    }
    norm
}

/// Optimizer state carried between steps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptState {
    pub step: usize,
    m: Grads,
    v: Grads,
}

fn non_finite(name: impl Into<String>, step: usize) -> Error {
    Error::NonFinite { tensor: name.into(), step }
}

/// One optimizer step on the mean loss of `batch`. Fails with the name of
/// the first non-finite quantity: a loss component, a gradient or an
/// updated parameter.
pub fn train_step(params: &ModelParams, state: &mut OptState, batch: &[Sample], ctx: &TrainContext) -> Result<(ModelParams, LossComponents)> {
    let step = state.step;
    let inv = 1.0 / batch.len() as f64;
    let mut comp = LossComponents::default();
    let mut grads: Option<Grads> = None;
    for s in batch {
        let (c, g) = loss_and_grads(params, s, ctx);
        for (name, v) in c.named() {
            if !v.is_finite() {
                return Err(non_finite(format!("loss.{name}"), step));
            }
        }
        comp.cls += c.cls * inv;
        comp.reg += c.reg * inv;
        comp.fg += c.fg * inv;
        comp.dis += c.dis * inv;
        comp.iou += c.iou * inv;
        comp.total += c.total * inv;
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => {
                for (name, t) in g {
                    acc.get_mut(&name).expect("same parameter set").add_assign(&t);
                }
            }
        }
    }
    let mut grads = grads.expect("non-empty batch");
    for (name, g) in grads.iter_mut() {
        g.scale(inv);
        if !g.is_finite() {
            return Err(non_finite(format!("grad.{name}"), step));
        }
    }
    clip_gradients(&mut grads, ctx.train.clip_norm);
    let t = ctx.train;
    let mut out = params.clone();
    state.step += 1;
    for (name, p) in out.tensors.iter_mut() {
        let g = &grads[name];
        match t.optimizer {
            Optimizer::Sgd => {
                for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= t.lr * d;
                }
            }
            Optimizer::Adam => {
                let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                let k = state.step as i32;
                let (c1, c2) = (1.0 - t.beta1.powi(k), 1.0 - t.beta2.powi(k));
                for (((w, d), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                    *mi = t.beta1 * *mi + (1.0 - t.beta1) * d;
                    *vi = t.beta2 * *vi + (1.0 - t.beta2) * d * d;
                    *w -= t.lr * (*mi / c1) / ((*vi / c2).sqrt() + t.eps);
                }
            }
        }
        if !p.is_finite() {
            return Err(non_finite(format!("param.{name}"), step));
        }
    }
    Ok((out, comp))
}

/// Loss components recorded before the update of each step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub cls: f64,
    pub reg: f64,
    pub fg: f64,
    pub dis: f64,
    pub iou: f64,
    pub total: f64,
}

pub const TRACE_COLUMNS: [&str; 7] = ["step", "cls", "reg", "fg", "dis", "iou", "total"];

impl TraceRow {
    fn new(step: usize, c: &LossComponents) -> Self {
        Self { step, cls: c.cls, reg: c.reg, fg: c.fg, dis: c.dis, iou: c.iou, total: c.total }
    }
}

/// Trained weights with the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub step: usize,
    pub config: RunConfig,
}

impl Checkpoint {
    pub const WEIGHTS: &'static str = "weights.bin";
    pub const SIDECAR: &'static str = "weights.json";
    pub const CONFIG: &'static str = "config.json";

    /// Writes `weights.bin`, `weights.json` and `config.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        weights::save(&self.params, self.step, &self.config.hash(), &dir.join(Self::WEIGHTS), &dir.join(Self::SIDECAR))?;
        let cfg = dir.join(Self::CONFIG);
        std::fs::write(&cfg, self.config.to_json()).map_err(|e| Error::io(&cfg, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = RunConfig::load(&dir.join(Self::CONFIG))?;
        let (params, side) = weights::load(&dir.join(Self::WEIGHTS), &dir.join(Self::SIDECAR))?;
        if side.config_hash != config.hash() {
            return Err(Error::Format {
                path: dir.join(Self::SIDECAR),
                reason: format!("config hash {} does not match config.json ({})", side.config_hash, config.hash()),
            });
        }
        params.check(&config.model)?;
        Ok(Self { params, step: side.step, config })
    }
}

/// Trains on `samples`, cycling through them `batch_size` at a time.
pub fn train(samples: &[Sample], cfg: &RunConfig) -> Result<(Checkpoint, Vec<TraceRow>)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::config("training needs at least one scene"));
    }
    let spec = cfg.grid_spec()?;
    let view = GridView::full(&spec);
    let ctx = TrainContext { view: &view, model: &cfg.model, loss: &cfg.loss, train: &cfg.train };
    let mut params = init_params(&cfg.model, cfg.train.seed);
    let mut state = OptState::default();
    let mut trace = Vec::with_capacity(cfg.train.steps);
    let bs = cfg.train.batch_size;
    for step in 0..cfg.train.steps {
        let batch: Vec<Sample> = (0..bs).map(|j| samples[(step * bs + j) % samples.len()].clone()).collect();
        let (next, comp) = train_step(&params, &mut state, &batch, &ctx)?;
        trace.push(TraceRow::new(step, &comp));
        params = next;
    }
    Ok((Checkpoint { params, step: cfg.train.steps, config: cfg.clone() }, trace))
}

/// Samples for `scenes` under `cfg`; target tie-breaking uses the training
/// seed.
pub fn samples_for(scenes: &[Scene], cfg: &RunConfig) -> Result<Vec<Sample>> {
    let spec = cfg.grid_spec()?;
    let view = GridView::full(&spec);
    Ok(scenes.iter().map(|s| make_sample(s, &spec, &view, cfg.model.n_classes, cfg.train.seed)).collect())
}

/// Trains on a single scene.
pub fn overfit(scene: &Scene, cfg: &RunConfig) -> Result<(Checkpoint, Vec<TraceRow>)> {
    train(&samples_for(std::slice::from_ref(scene), cfg)?, cfg)
}

/// Intersection over union of the predicted foreground mask (H > 0.5)
/// and the target mask; `None` without the geometry-aware branch or when
/// both masks are empty.
pub fn foreground_iou(params: &ModelParams, model: &ModelConfig, sample: &Sample, view: &GridView) -> Option<f64> {
    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, params, model);
    let (pred, _) = forward_t(&mut tape, &b, model, &sample.input, view);
    let fg = tape.value(pred.fg?).data();
    let (mut inter, mut union) = (0usize, 0usize);
    for (h, t) in fg.iter().zip(&sample.targets.aux.h_hat) {
        let (p, q) = (*h > 0.5, *t > 0.5);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    (union > 0).then(|| inter as f64 / union as f64)
}
