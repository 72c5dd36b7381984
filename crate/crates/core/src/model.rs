//! Full detector: input embedding, re-alignment, neck, geometry-aware
//! aggregation and head, with named parameters.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::AttnVars;
use crate::error::{Error, Result};
use crate::ga::{self, GaConfig, GaVars, GEO_IN};
use crate::grr::{self, GrrBlockVars, GrrConfig, RepresentativeSet};
use crate::head::{self, decode, DecodeConfig, Detection, HeadMaps, HeadVars, NeckVars, Predictions, REG_DIM};
use crate::kernels::POS_DIM;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::view::GridView;
use crate::voxelize::{sectorize, voxelize, FeatureMap, GridSpec, PointCloud, C_FINE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature width C; attention runs at the same width.
    pub channels: usize,
    pub heads: usize,
    pub n_classes: usize,
    pub grr: GrrConfig,
    pub ga: GaConfig,
    pub use_grr: bool,
    pub use_ga: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            heads: 4,
            n_classes: 1,
            grr: GrrConfig::default(),
            ga: GaConfig::default(),
            use_grr: true,
            use_ga: true,
        }
    }
}

impl ModelConfig {
    /// Narrow model used by the reference training run and tests.
    pub fn reference() -> Self {
        Self {
            channels: 16,
            ga: GaConfig {
                mlp_hidden: 16,
                ..GaConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self, view: &GridView) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::config(format!(
                "model.channels={} must be a positive multiple of model.heads={}",
                self.channels, self.heads
            )));
        }
        if self.n_classes == 0 {
            return Err(Error::config("model.n_classes must be positive"));
        }
        if self.use_grr && self.grr.n_stacks > 0 {
            self.grr.validate(view)?;
        }
        if self.use_ga && self.ga.n_stacks > 0 {
            self.ga.validate(view)?;
        }
        Ok(())
    }
}

/// Name, shape and fan-in (`None` for biases) of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: Option<usize>,
}

fn weight(out: &mut Vec<ParamSpec>, name: String, shape: &[usize], fan_in: usize) {
    out.push(ParamSpec { name, shape: shape.to_vec(), fan_in: Some(fan_in) });
}

fn bias(out: &mut Vec<ParamSpec>, name: String, n: usize) {
    out.push(ParamSpec { name, shape: vec![n], fan_in: None });
}

fn attention_specs(out: &mut Vec<ParamSpec>, prefix: &str, c: usize, with_pos: bool) {
    for w in ["wq", "wk", "wv"] {
        weight(out, format!("{prefix}.{w}"), &[c, c], c);
    }
    if with_pos {
        weight(out, format!("{prefix}.wpos"), &[POS_DIM, c], POS_DIM);
        weight(out, format!("{prefix}.wo"), &[c, c], c);
        bias(out, format!("{prefix}.bo"), c);
    }
}

fn conv_specs(out: &mut Vec<ParamSpec>, prefix: &str, k: usize, ci: usize, co: usize) {
    weight(out, format!("{prefix}.k"), &[k, k, ci, co], k * k * ci);
    bias(out, format!("{prefix}.b"), co);
}

/// Every parameter of the configured model, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let c = cfg.channels;
    let mut out = Vec::new();
    weight(&mut out, "embed.w".into(), &[C_FINE, c], C_FINE);
    bias(&mut out, "embed.b".into(), c);
    if cfg.use_grr {
        for s in 0..cfg.grr.n_stacks {
            for part in ["condense", "angular", "broadcast"] {
                attention_specs(&mut out, &format!("grr.{s}.{part}"), c, true);
            }
        }
    }
    conv_specs(&mut out, "neck.c1", 3, c, c);
    conv_specs(&mut out, "neck.c2", 3, c, c);
    conv_specs(&mut out, "neck.fuse", 1, 2 * c, c);
    if cfg.use_ga {
        conv_specs(&mut out, "ga.fg", 3, c, 1);
        conv_specs(&mut out, "ga.dis", 3, c, 4);
        let hdn = cfg.ga.mlp_hidden;
        weight(&mut out, "ga.mlp.0.w".into(), &[GEO_IN, hdn], GEO_IN);
        bias(&mut out, "ga.mlp.0.b".into(), hdn);
        weight(&mut out, "ga.mlp.1.w".into(), &[hdn, c], hdn);
        bias(&mut out, "ga.mlp.1.b".into(), c);
        for s in 0..cfg.ga.n_stacks {
            attention_specs(&mut out, &format!("ga.att.{s}"), c, false);
        }
    }
    conv_specs(&mut out, "head.shared", 3, c, c);
    weight(&mut out, "head.cls.w".into(), &[c, cfg.n_classes], c);
    bias(&mut out, "head.cls.b".into(), cfg.n_classes);
    weight(&mut out, "head.reg.w".into(), &[c, REG_DIM], c);
    bias(&mut out, "head.reg.b".into(), REG_DIM);
    weight(&mut out, "head.iou.w".into(), &[c, 1], c);
    bias(&mut out, "head.iou.b".into(), 1);
    out
}

/// Named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Checks that names and shapes match the configuration.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = param_specs(cfg);
        if specs.len() != self.tensors.len() {
            return Err(Error::shape(format!("expected {} tensors, found {}", specs.len(), self.tensors.len())));
        }
        for s in specs {
            match self.tensors.get(&s.name) {
                Some(t) if t.shape() == s.shape.as_slice() => {}
                Some(t) => return Err(Error::shape(format!("{}: shape {:?}, expected {:?}", s.name, t.shape(), s.shape))),
                None => return Err(Error::shape(format!("missing tensor {}", s.name))),
            }
        }
        Ok(())
    }
}

/// Weights ~ U(-1/√fan_in, 1/√fan_in) drawn from ChaCha8 seeded with
/// `seed`, in [`param_specs`] order; biases zero.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for s in param_specs(cfg) {
        let t = match s.fan_in {
            None => Tensor::zeros(&s.shape),
            Some(f) => {
                let b = 1.0 / (f as f64).sqrt();
                let dist = Uniform::new_inclusive(-b, b);
                Tensor::from_fn(&s.shape, |_| dist.sample(&mut rng))
            }
        };
        tensors.insert(s.name, t);
    }
    ModelParams { tensors }
}

/// Parameters recorded on a tape.
pub struct Bound {
    pub vars: BTreeMap<String, Var>,
    embed: (Var, Var),
    grr: Vec<GrrBlockVars>,
    neck: NeckVars,
    ga: Option<GaVars>,
    head: HeadVars,
}

fn pair(v: &BTreeMap<String, Var>, a: &str, b: &str) -> (Var, Var) {
    (v[a], v[b])
}

fn attn_vars(v: &BTreeMap<String, Var>, prefix: &str, heads: usize, with_pos: bool) -> AttnVars {
    let g = |n: &str| v[&format!("{prefix}.{n}")];
    AttnVars {
        wq: g("wq"),
        wk: g("wk"),
        wv: g("wv"),
        wpos: with_pos.then(|| g("wpos")),
        wo: with_pos.then(|| (g("wo"), g("bo"))),
        heads,
    }
}

impl Bound {
    pub fn new(tape: &mut Tape, params: &ModelParams, cfg: &ModelConfig) -> Self {
        let vars: BTreeMap<String, Var> = params.tensors.iter().map(|(k, t)| (k.clone(), tape.param(t.clone()))).collect();
        let h = cfg.heads;
        let grr = if cfg.use_grr {
            (0..cfg.grr.n_stacks)
                .map(|s| GrrBlockVars {
                    condense: attn_vars(&vars, &format!("grr.{s}.condense"), h, true),
                    angular: attn_vars(&vars, &format!("grr.{s}.angular"), h, true),
                    broadcast: attn_vars(&vars, &format!("grr.{s}.broadcast"), h, true),
                })
                .collect()
        } else {
            Vec::new()
        };
        let ga = cfg.use_ga.then(|| GaVars {
            fg: pair(&vars, "ga.fg.k", "ga.fg.b"),
            dis: pair(&vars, "ga.dis.k", "ga.dis.b"),
            mlp: vec![pair(&vars, "ga.mlp.0.w", "ga.mlp.0.b"), pair(&vars, "ga.mlp.1.w", "ga.mlp.1.b")],
            att: (0..cfg.ga.n_stacks).map(|s| attn_vars(&vars, &format!("ga.att.{s}"), h, false)).collect(),
        });
        Self {
            embed: pair(&vars, "embed.w", "embed.b"),
            grr,
            neck: NeckVars {
                c1: pair(&vars, "neck.c1.k", "neck.c1.b"),
                c2: pair(&vars, "neck.c2.k", "neck.c2.b"),
                fuse: pair(&vars, "neck.fuse.k", "neck.fuse.b"),
            },
            ga,
            head: HeadVars {
                shared: pair(&vars, "head.shared.k", "head.shared.b"),
                cls: pair(&vars, "head.cls.w", "head.cls.b"),
                reg: pair(&vars, "head.reg.w", "head.reg.b"),
                iou: pair(&vars, "head.iou.w", "head.iou.b"),
            },
            vars,
        }
    }
}

/// Forward pass on the tape for one voxelized map.
pub fn forward_t(tape: &mut Tape, b: &Bound, cfg: &ModelConfig, input: &FeatureMap, view: &GridView) -> (Predictions, Vec<RepresentativeSet>) {
    let (r, a) = (input.rows(), input.cols());
    let c = cfg.channels;
    let x = tape.constant(input.tensor().clone().reshape(&[r * a, input.channels()]).expect("input shape"));
    let e = tape.linear(x, b.embed.0, Some(b.embed.1));
    let mut f = tape.relu(e);
    let mut reps = Vec::new();
    if cfg.use_grr {
        let (g, rs) = grr::grr_forward_t(tape, f, view, &cfg.grr, &b.grr);
        f = g;
        reps = rs;
    }
    let f3 = tape.reshape(f, &[r, a, c]);
    let neck = head::neck_t(tape, f3, view.circular, &b.neck);
    let (agg, fg, dis) = match &b.ga {
        Some(gv) => {
            let (h, d) = ga::geometry_prediction_t(tape, neck, view.circular, gv);
            let fgeo = ga::geometry_embedding_t(tape, h, d, view, &gv.mlp);
            let nflat = tape.reshape(neck, &[r * a, c]);
            let agg = ga::ga_window_attention_t(tape, nflat, fgeo, view, &cfg.ga, &gv.att);
            (tape.reshape(agg, &[r, a, c]), Some(h), Some(d))
        }
        None => (neck, None, None),
    };
    let (heat, reg, iou) = head::head_t(tape, agg, view.circular, &b.head);
    (Predictions { heat, reg, iou, fg, dis }, reps)
}

/// Head maps for one voxelized map.
pub fn infer(params: &ModelParams, cfg: &ModelConfig, input: &FeatureMap, view: &GridView) -> HeadMaps {
    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, params, cfg);
    let (p, _) = forward_t(&mut tape, &b, cfg, input, view);
    HeadMaps::from_tape(&tape, &p, input.rows(), input.cols())
}

/// Grid, weights and decoding settings: everything needed to go from a
/// point cloud to detections.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub grid: GridSpec,
    pub model: ModelConfig,
    pub params: ModelParams,
    pub decode: DecodeConfig,
}

impl Pipeline {
    pub fn new(grid: GridSpec, model: ModelConfig, params: ModelParams, decode: DecodeConfig) -> Result<Self> {
        model.validate(&GridView::full(&grid))?;
        params.check(&model)?;
        decode.validate()?;
        Ok(Self { grid, model, params, decode })
    }

    /// Full-sweep detection.
    pub fn detect(&self, cloud: &PointCloud) -> Vec<Detection> {
        let view = GridView::full(&self.grid);
        let maps = infer(&self.params, &self.model, &voxelize(cloud, &self.grid), &view);
        decode(&maps, &view, &self.decode)
    }

    /// Detection on sector `k` of `n`, given only that sector's points.
    pub fn detect_sector(&self, sector: &PointCloud, k: usize, n: usize) -> Result<Vec<Detection>> {
        let view = GridView::sector(&self.grid, k, n)?;
        self.model.validate(&view)?;
        let full = voxelize(sector, &self.grid);
        let input = full.columns(view.col_offset, view.col_offset + view.cols);
        let maps = infer(&self.params, &self.model, &input, &view);
        Ok(decode(&maps, &view, &self.decode))
    }

    /// Per-sector detections over a whole sweep.
    pub fn detect_sectors(&self, cloud: &PointCloud, n: usize) -> Result<Vec<Vec<Detection>>> {
        sectorize(cloud, &self.grid, n)?
            .iter()
            .enumerate()
            .map(|(k, s)| self.detect_sector(s, k, n))
            .collect()
    }
}
