//! Finite-difference checks of every kernel gradient and of the full model
//! on a toy map.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use polarbev::geometry::Box3D;
use polarbev::head::{build_targets, total_loss_frozen_t};
use polarbev::kernels::attention::{relative_pos_encoding, relative_pos_encoding_vjp, scaled_dot_attention, scaled_dot_attention_vjp};
use polarbev::kernels::conv::{conv2d, conv2d_vjp, upsample2, upsample2_vjp, ConvSpec};
use polarbev::kernels::dense::{linear, linear_vjp, mlp, mlp_vjp, relu, relu_vjp, sigmoid, sigmoid_vjp, softmax, softmax_vjp, Layer};
use polarbev::kernels::loss::{focal_loss_vjp, focal_loss_with_norm, gaussian_focal_loss, gaussian_focal_loss_vjp, smooth_l1, smooth_l1_vjp, LossConfig};
use polarbev::model::{forward_t, init_params, Bound, ModelConfig, ModelParams};
use polarbev::tape::Tape;
use polarbev::view::GridView;
use polarbev::voxelize::{FeatureMap, C_FINE};
use polarbev::Tensor;

use super::{away_from_zero, dot, rand_tensor, rel_err, rng, uniform, Check};

pub const KERNEL_STEP: f64 = 1e-5;
pub const KERNEL_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;
/// Step ladder for the fourth-order stencil on the model. Small steps suit
/// most weights; weakly coupled attention weights (gradients near 1e-8 on a
/// loss near 25) need larger ones to rise above round-off.
pub const MODEL_STEPS: [f64; 7] = [1e-5, 3e-5, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2];
pub const KERNEL_PROBES: u64 = 100;
pub const MODEL_PARAMS_PER_MODULE: usize = 20;

/// One probe: inputs, their analytic gradients of `L = <up, f(x)>`, and `L`
/// itself as a function of the inputs.
pub struct Probe {
    pub inputs: Vec<Tensor>,
    pub grads: Vec<Tensor>,
    pub eval: Box<dyn Fn(&[Tensor]) -> f64>,
}

fn shifted(inputs: &[Tensor], dirs: &[Tensor], h: f64) -> Vec<Tensor> {
    inputs
        .iter()
        .zip(dirs)
        .map(|(x, d)| Tensor::new(x.shape().to_vec(), x.data().iter().zip(d.data()).map(|(a, b)| a + h * b).collect()).unwrap())
        .collect()
}

/// Directional derivative along a random direction: analytic vs central
/// difference. Returns `(analytic, numeric)`.
pub fn directional(p: &Probe, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let dirs: Vec<Tensor> = p.inputs.iter().map(|x| rand_tensor(rng, x.shape())).collect();
    let an: f64 = p.grads.iter().zip(&dirs).map(|(g, d)| dot(g.data(), d.data())).sum();
    let plus = (p.eval)(&shifted(&p.inputs, &dirs, KERNEL_STEP));
    let minus = (p.eval)(&shifted(&p.inputs, &dirs, -KERNEL_STEP));
    (an, (plus - minus) / (2.0 * KERNEL_STEP))
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=8)
}

fn probe_linear(rng: &mut ChaCha8Rng) -> Probe {
    let (m, k, n) = (dim(rng), dim(rng), dim(rng));
    let (x, w, b) = (rand_tensor(rng, &[m, k]), rand_tensor(rng, &[k, n]), rand_tensor(rng, &[n]));
    let up = rand_tensor(rng, &[m, n]);
    let g = linear_vjp(&x, &w, &up);
    Probe {
        inputs: vec![x, w, b],
        grads: vec![g.dx, g.dw, g.db],
        eval: Box::new(move |t| dot(linear(&t[0], &t[1], Some(&t[2])).data(), up.data())),
    }
}

fn probe_relu(rng: &mut ChaCha8Rng) -> Probe {
    let shape = [dim(rng), dim(rng)];
    let x = Tensor::from_fn(&shape, |_| away_from_zero(rng, 0.1));
    let up = rand_tensor(rng, &shape);
    let g = relu_vjp(&x, &up);
    Probe {
        inputs: vec![x],
        grads: vec![g],
        eval: Box::new(move |t| dot(relu(&t[0]).data(), up.data())),
    }
}

fn probe_sigmoid(rng: &mut ChaCha8Rng) -> Probe {
    let shape = [dim(rng), dim(rng)];
    let x = Tensor::from_fn(&shape, |_| uniform(rng, -4.0, 4.0));
    let up = rand_tensor(rng, &shape);
    let g = sigmoid_vjp(&sigmoid(&x), &up);
    Probe {
        inputs: vec![x],
        grads: vec![g],
        eval: Box::new(move |t| dot(sigmoid(&t[0]).data(), up.data())),
    }
}

fn probe_softmax(rng: &mut ChaCha8Rng) -> Probe {
    let shape = [dim(rng), dim(rng), dim(rng)];
    let axis = rng.gen_range(0..3);
    let x = Tensor::from_fn(&shape, |_| uniform(rng, -3.0, 3.0));
    let up = rand_tensor(rng, &shape);
    let g = softmax_vjp(&softmax(&x, axis), &up, axis);
    Probe {
        inputs: vec![x],
        grads: vec![g],
        eval: Box::new(move |t| dot(softmax(&t[0], axis).data(), up.data())),
    }
}

fn probe_mlp(rng: &mut ChaCha8Rng) -> Probe {
    loop {
        let n_layers = rng.gen_range(2..=3);
        let m = dim(rng);
        let mut widths = vec![dim(rng)];
        for _ in 0..n_layers {
            widths.push(dim(rng));
        }
        let x = rand_tensor(rng, &[m, widths[0]]);
        let layers: Vec<Layer> = widths
            .windows(2)
            .map(|w| Layer { w: rand_tensor(rng, &[w[0], w[1]]), b: rand_tensor(rng, &[w[1]]) })
            .collect();
        let (_, pre) = mlp(&x, &layers);
        // Keep hidden pre-activations clear of the ReLU kink.
        if pre[..pre.len() - 1].iter().any(|z| z.data().iter().any(|v| v.abs() < 1e-3)) {
            continue;
        }
        let up = rand_tensor(rng, &[m, *widths.last().unwrap()]);
        let (dx, lg) = mlp_vjp(&x, &layers, &pre, &up);
        let mut inputs = vec![x];
        let mut grads = vec![dx];
        for (l, (dw, db)) in layers.iter().zip(lg) {
            inputs.push(l.w.clone());
            inputs.push(l.b.clone());
            grads.push(dw);
            grads.push(db);
        }
        return Probe {
            inputs,
            grads,
            eval: Box::new(move |t| {
                let layers: Vec<Layer> = t[1..].chunks(2).map(|c| Layer { w: c[0].clone(), b: c[1].clone() }).collect();
                dot(mlp(&t[0], &layers).0.data(), up.data())
            }),
        };
    }
}

fn random_mask(rng: &mut ChaCha8Rng, b: usize, n: usize) -> Option<Vec<bool>> {
    if rng.gen_bool(0.5) {
        return None;
    }
    let mut m: Vec<bool> = (0..b * n).map(|_| rng.gen_bool(0.7)).collect();
    for bi in 0..b {
        m[bi * n] = true;
    }
    Some(m)
}

fn probe_attention(rng: &mut ChaCha8Rng) -> Probe {
    let heads = rng.gen_range(1..=2);
    let (b, m, n) = (rng.gen_range(1..=3), dim(rng), dim(rng));
    let d = heads * rng.gen_range(1..=4);
    let dv = heads * rng.gen_range(1..=4);
    let (q, k, v) = (rand_tensor(rng, &[b, m, d]), rand_tensor(rng, &[b, n, d]), rand_tensor(rng, &[b, n, dv]));
    let mask = random_mask(rng, b, n);
    let up = rand_tensor(rng, &[b, m, dv]);
    let fwd = scaled_dot_attention(&q, &k, &v, heads, mask.as_deref());
    let g = scaled_dot_attention_vjp(&q, &k, &v, heads, &fwd.probs, &up);
    Probe {
        inputs: vec![q, k, v],
        grads: vec![g.dq, g.dk, g.dv],
        eval: Box::new(move |t| dot(scaled_dot_attention(&t[0], &t[1], &t[2], heads, mask.as_deref()).out.data(), up.data())),
    }
}

fn probe_rel_pos(rng: &mut ChaCha8Rng) -> Probe {
    loop {
        let (b, m, n, d) = (rng.gen_range(1..=3), dim(rng), dim(rng), dim(rng));
        let deltas = rand_tensor(rng, &[b, m, n, 4]);
        let w = rand_tensor(rng, &[4, d]);
        let z = linear(&deltas.clone().reshape(&[b * m * n, 4]).unwrap(), &w, None);
        if z.data().iter().any(|v| v.abs() < 1e-3) {
            continue;
        }
        let mask = random_mask(rng, b, n);
        let up = rand_tensor(rng, &[b, m, d]);
        let g = relative_pos_encoding_vjp(&deltas, &w, mask.as_deref(), &up);
        return Probe {
            inputs: vec![w],
            grads: vec![g],
            eval: Box::new(move |t| dot(relative_pos_encoding(&deltas, &t[0], mask.as_deref()).data(), up.data())),
        };
    }
}

fn probe_conv(rng: &mut ChaCha8Rng) -> Probe {
    let spec = ConvSpec { stride: rng.gen_range(1..=2), circular: rng.gen_bool(0.5) };
    let (kh, kw) = ([1, 3][rng.gen_range(0..2)], [1, 3][rng.gen_range(0..2)]);
    let (r, a, ci, co) = (dim(rng), dim(rng), dim(rng), dim(rng));
    let x = rand_tensor(rng, &[r, a, ci]);
    let kernel = rand_tensor(rng, &[kh, kw, ci, co]);
    let bias = rand_tensor(rng, &[co]);
    let out = conv2d(&x, &kernel, &bias, spec);
    let up = rand_tensor(rng, out.shape());
    let g = conv2d_vjp(&x, &kernel, spec, &up);
    Probe {
        inputs: vec![x, kernel, bias],
        grads: vec![g.dx, g.dk, g.db],
        eval: Box::new(move |t| dot(conv2d(&t[0], &t[1], &t[2], spec).data(), up.data())),
    }
}

fn probe_upsample(rng: &mut ChaCha8Rng) -> Probe {
    let (r, a, c) = (dim(rng), dim(rng), dim(rng));
    let (out_r, out_a) = (2 * r - rng.gen_range(0..=1), 2 * a - rng.gen_range(0..=1));
    let x = rand_tensor(rng, &[r, a, c]);
    let up = rand_tensor(rng, &[out_r, out_a, c]);
    let g = upsample2_vjp(x.shape(), &up);
    Probe {
        inputs: vec![x],
        grads: vec![g],
        eval: Box::new(move |t| dot(upsample2(&t[0], out_r, out_a).data(), up.data())),
    }
}

fn probs(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::from_fn(&[n], |_| uniform(rng, 0.05, 0.95))
}

fn probe_focal(rng: &mut ChaCha8Rng) -> Probe {
    let n = rng.gen_range(1..=64);
    let h = probs(rng, n);
    let target: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
    let (alpha, gamma) = (uniform(rng, 0.1, 0.9), uniform(rng, 0.5, 3.0));
    let n_pos = uniform(rng, 1.0, 10.0);
    let up = uniform(rng, -2.0, 2.0);
    let g = focal_loss_vjp(h.data(), &target, alpha, gamma, n_pos, up);
    Probe {
        inputs: vec![h],
        grads: vec![Tensor::new(vec![n], g).unwrap()],
        eval: Box::new(move |t| up * focal_loss_with_norm(t[0].data(), &target, alpha, gamma, n_pos)),
    }
}

fn probe_gaussian_focal(rng: &mut ChaCha8Rng) -> Probe {
    let n = rng.gen_range(1..=64);
    let h = probs(rng, n);
    let target: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.2) { 1.0 } else { uniform(rng, 0.0, 0.99) }).collect();
    let up = uniform(rng, -2.0, 2.0);
    let g = gaussian_focal_loss_vjp(h.data(), &target, up);
    Probe {
        inputs: vec![h],
        grads: vec![Tensor::new(vec![n], g).unwrap()],
        eval: Box::new(move |t| up * gaussian_focal_loss(t[0].data(), &target)),
    }
}

fn probe_smooth_l1(rng: &mut ChaCha8Rng) -> Probe {
    let n = rng.gen_range(1..=64);
    let target: Vec<f64> = (0..n).map(|_| uniform(rng, -2.0, 2.0)).collect();
    // Residuals stay clear of the quadratic/linear switch at |d| = 1.
    let pred: Vec<f64> = target
        .iter()
        .map(|t| {
            let d = if rng.gen_bool(0.5) { away_from_zero(rng, 0.0) * 0.95 } else { away_from_zero(rng, 0.0) * 2.0 };
            let d = if (d.abs() - 1.0).abs() < 0.05 { d * 0.5 } else { d };
            t + d
        })
        .collect();
    let weights: Option<Vec<f64>> = rng.gen_bool(0.5).then(|| (0..n).map(|_| uniform(rng, 0.0, 1.0)).collect());
    let up = uniform(rng, -2.0, 2.0);
    let g = smooth_l1_vjp(&pred, &target, weights.as_deref(), up);
    Probe {
        inputs: vec![Tensor::new(vec![n], pred).unwrap()],
        grads: vec![Tensor::new(vec![n], g).unwrap()],
        eval: Box::new(move |t| up * smooth_l1(t[0].data(), &target, weights.as_deref())),
    }
}

pub type ProbeFn = fn(&mut ChaCha8Rng) -> Probe;

pub const KERNELS: [(&str, ProbeFn); 12] = [
    ("linear", probe_linear),
    ("relu", probe_relu),
    ("sigmoid", probe_sigmoid),
    ("softmax", probe_softmax),
    ("mlp", probe_mlp),
    ("attention", probe_attention),
    ("rel_pos", probe_rel_pos),
    ("conv2d", probe_conv),
    ("upsample2", probe_upsample),
    ("focal", probe_focal),
    ("gaussian_focal", probe_gaussian_focal),
    ("smooth_l1", probe_smooth_l1),
];

/// Worst relative error over `n` probes of one kernel.
pub fn kernel_worst(name: &str, make: ProbeFn, n: u64) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for seed in 0..n {
        let mut r = rng(seed);
        let p = make(&mut r);
        let (an, fd) = directional(&p, &mut r);
        let e = rel_err(an, fd);
        if e > worst.0 || worst.1.is_empty() {
            worst = (e, format!("{name} seed {seed}: analytic {an:.6e} numeric {fd:.6e}"));
        }
    }
    worst
}

pub fn check_kernels() -> Check {
    let mut worst = 0.0f64;
    for (name, make) in KERNELS {
        let (e, detail) = kernel_worst(name, make, KERNEL_PROBES);
        if e > KERNEL_TOL {
            return Err(format!("relative error {e:.2e} > {KERNEL_TOL:.0e} at {detail}"));
        }
        worst = worst.max(e);
    }
    Ok(format!("{} kernels x {KERNEL_PROBES} probes, worst rel err {worst:.1e}", KERNELS.len()))
}

/// Toy setting: a 16 x 16 map, width 8, two stacks of each attention module.
pub fn toy_config() -> ModelConfig {
    let mut m = ModelConfig { channels: 8, heads: 2, ..ModelConfig::default() };
    m.ga.mlp_hidden = 8;
    m
}

pub struct ToyProblem {
    pub cfg: ModelConfig,
    pub view: GridView,
    pub input: FeatureMap,
    pub targets: polarbev::head::DetTargets,
    pub params: ModelParams,
    pub loss: LossConfig,
}

/// Dense random input and parameters with random biases, so no ReLU sits
/// exactly at its kink.
pub fn toy_problem(seed: u64) -> ToyProblem {
    let cfg = toy_config();
    let view = GridView::toy(16, 16);
    let mut r = rng(seed);
    let input = FeatureMap(Tensor::from_fn(&[16, 16, C_FINE], |_| uniform(&mut r, 0.05, 1.0)));
    let boxes = [
        (0, Box3D::from_array([6.0, 3.0, 0.8, 4.2, 1.9, 1.6, 0.3])),
        (0, Box3D::from_array([-4.0, -9.0, 0.8, 4.5, 2.0, 1.5, -1.2])),
        (0, Box3D::from_array([-10.0, 5.0, 0.8, 3.9, 1.8, 1.6, 2.0])),
    ];
    let targets = build_targets(&view, &boxes, cfg.n_classes, seed);
    let mut params = init_params(&cfg, seed);
    for (name, t) in params.tensors.iter_mut() {
        if name.ends_with(".b") || name.ends_with(".bo") {
            for v in t.data_mut() {
                *v = uniform(&mut r, -0.1, 0.1);
            }
        }
    }
    ToyProblem { cfg, view, input, targets, params, loss: LossConfig::default() }
}

impl ToyProblem {
    /// Loss, gradients by name, IoU targets and representative indices.
    pub fn loss_and_grads(&self) -> (f64, Vec<(String, Tensor)>, Vec<f64>, Vec<Vec<Vec<usize>>>) {
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, &self.params, &self.cfg);
        let (pred, reps) = forward_t(&mut tape, &b, &self.cfg, &self.input, &self.view);
        let (total, _, iou_t) = total_loss_frozen_t(&mut tape, &pred, &self.targets, &self.view, &self.loss, None);
        let g = tape.backward(total);
        let grads = b
            .vars
            .iter()
            .map(|(n, v)| (n.clone(), g.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(self.params.get(n).shape()))))
            .collect();
        (tape.value(total).item(), grads, iou_t, reps.into_iter().map(|r| r.indices).collect())
    }

    /// Loss at `params` with the IoU targets held fixed.
    pub fn loss_at(&self, params: &ModelParams, iou_t: &[f64]) -> (f64, Vec<Vec<Vec<usize>>>) {
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, params, &self.cfg);
        let (pred, reps) = forward_t(&mut tape, &b, &self.cfg, &self.input, &self.view);
        let (total, _, _) = total_loss_frozen_t(&mut tape, &pred, &self.targets, &self.view, &self.loss, Some(iou_t));
        (tape.value(total).item(), reps.into_iter().map(|r| r.indices).collect())
    }
}

pub const MODULES: [&str; 5] = ["embed", "grr", "neck", "ga", "head"];

/// Fourth-order central difference at each ladder step, or `None` where
/// the representative selection moved (the loss is not smooth there).
fn stencil_ladder(prob: &ToyProblem, name: &str, i: usize, iou_t: &[f64], reps: &[Vec<Vec<usize>>]) -> Vec<Option<f64>> {
    let eval = |h: f64| {
        let mut p = prob.params.clone();
        p.tensors.get_mut(name).unwrap().data_mut()[i] += h;
        let (l, sel) = prob.loss_at(&p, iou_t);
        (sel == reps).then_some(l)
    };
    MODEL_STEPS
        .iter()
        .map(|&h| {
            let (a, b, c, d) = (eval(h)?, eval(-h)?, eval(2.0 * h)?, eval(-2.0 * h)?);
            Some((8.0 * (a - b) - (c - d)) / (12.0 * h))
        })
        .collect()
}

/// Estimate from the ladder chosen on numeric evidence alone: the step whose
/// neighbour agrees best, both with an unchanged selection.
pub fn best_estimate(ladder: &[Option<f64>]) -> Option<f64> {
    ladder
        .windows(2)
        .filter_map(|w| Some((w[0]?, (w[0]? - w[1]?).abs())))
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .map(|(fd, _)| fd)
}

/// Central differences on randomly chosen scalar parameters of every module.
/// Returns `(module, name, index, analytic, numeric)` per probe; `numeric`
/// is NaN when no two neighbouring steps keep the selection fixed.
pub fn model_probes(seed: u64, per_module: usize) -> Vec<(String, String, usize, f64, f64)> {
    let prob = toy_problem(seed);
    let (_, grads, iou_t, reps) = prob.loss_and_grads();
    let mut r = rng(seed ^ 0x5eed);
    let mut out = Vec::new();
    for module in MODULES {
        let scalars: Vec<(String, usize)> = prob
            .params
            .tensors
            .iter()
            .filter(|(n, _)| n.split('.').next() == Some(module))
            .flat_map(|(n, t)| (0..t.len()).map(move |i| (n.clone(), i)))
            .collect();
        for _ in 0..per_module {
            let (name, i) = scalars[r.gen_range(0..scalars.len())].clone();
            let an = grads.iter().find(|g| g.0 == name).unwrap().1.data()[i];
            let fd = best_estimate(&stencil_ladder(&prob, &name, i, &iou_t, &reps)).unwrap_or(f64::NAN);
            out.push((module.to_string(), name, i, an, fd));
        }
    }
    out
}

pub fn rel_err_ok(an: f64, fd: f64, tol: f64) -> bool {
    super::rel_err(an, fd) <= tol
}

pub fn check_model() -> Check {
    let probes = model_probes(0, MODEL_PARAMS_PER_MODULE);
    let mut worst = 0.0f64;
    for (_, name, i, an, fd) in &probes {
        let e = rel_err(*an, *fd);
        if !(e <= MODEL_TOL) {
            return Err(format!("{name}[{i}]: analytic {an:.6e} numeric {fd:.6e} (rel err {e:.2e} > {MODEL_TOL:.0e})"));
        }
        worst = worst.max(e);
    }
    Ok(format!("{} model parameters on the 16x16x8 toy map, worst rel err {worst:.1e}", probes.len()))
}

pub fn check_gradients() -> Check {
    let k = check_kernels()?;
    let m = check_model()?;
    Ok(format!("{k}; {m}"))
}
