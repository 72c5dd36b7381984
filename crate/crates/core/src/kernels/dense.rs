//! Dense per-row kernels: matrix products, affine maps and activations.

use crate::tensor::Tensor;

/// `out[m,n] = a[m,k] · b[k,n]`, row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[k,n] = a[m,k]ᵀ · b[m,n]`.
pub fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[m,k] = a[m,n] · b[k,n]ᵀ`.
pub fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// Affine map over the trailing axis: `x[..., K] · w[K, N] + b[N]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.last_dim(), k, "linear: input width {} vs weight rows {}", x.last_dim(), k);
    let m = x.rows();
    let mut out = matmul(x.data(), w.data(), m, k, n);
    if let Some(b) = b {
        assert_eq!(b.len(), n, "linear: bias length");
        for row in out.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Tensor::new(shape, out).unwrap()
}

pub struct LinearGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

pub fn linear_vjp(x: &Tensor, w: &Tensor, up: &Tensor) -> LinearGrads {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let m = x.rows();
    let dx = matmul_a_bt(up.data(), w.data(), m, n, k);
    let dw = matmul_at_b(x.data(), up.data(), m, k, n);
    let mut db = vec![0.0; n];
    for row in up.data().chunks(n) {
        for (d, u) in db.iter_mut().zip(row) {
            *d += u;
        }
    }
    LinearGrads {
        dx: Tensor::new(x.shape().to_vec(), dx).unwrap(),
        dw: Tensor::new(vec![k, n], dw).unwrap(),
        db: Tensor::new(vec![n], db).unwrap(),
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| v.max(0.0)).collect()).unwrap()
}

pub fn relu_vjp(x: &Tensor, up: &Tensor) -> Tensor {
    let d = x
        .data()
        .iter()
        .zip(up.data())
        .map(|(&v, &u)| if v > 0.0 { u } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), d).unwrap()
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| sigmoid_scalar(v)).collect()).unwrap()
}

/// Takes the forward output `y`, not the input.
pub fn sigmoid_vjp(y: &Tensor, up: &Tensor) -> Tensor {
    let d = y
        .data()
        .iter()
        .zip(up.data())
        .map(|(&s, &u)| u * s * (1.0 - s))
        .collect();
    Tensor::new(y.shape().to_vec(), d).unwrap()
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_layout(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |t: usize| (o * len + t) * inner + i;
            let max = (0..len).map(|t| src[idx(t)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for t in 0..len {
                let e = (src[idx(t)] - max).exp();
                out[idx(t)] = e;
                sum += e;
            }
            for t in 0..len {
                out[idx(t)] /= sum;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

/// Takes the forward output `y`.
pub fn softmax_vjp(y: &Tensor, up: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_layout(y.shape(), axis);
    let (yd, ud) = (y.data(), up.data());
    let mut out = vec![0.0; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |t: usize| (o * len + t) * inner + i;
            let dot: f64 = (0..len).map(|t| yd[idx(t)] * ud[idx(t)]).sum();
            for t in 0..len {
                out[idx(t)] = yd[idx(t)] * (ud[idx(t)] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), out).unwrap()
}

/// One affine layer of an MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Tensor,
    pub b: Tensor,
}

/// Linear layers with ReLU between them (none after the last).
/// Returns the output and the pre-activation of every layer.
pub fn mlp(x: &Tensor, layers: &[Layer]) -> (Tensor, Vec<Tensor>) {
    let mut cur = x.clone();
    let mut pre = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let z = linear(&cur, &layer.w, Some(&layer.b));
        cur = if i + 1 < layers.len() { relu(&z) } else { z.clone() };
        pre.push(z);
    }
    (cur, pre)
}

/// Gradients of [`mlp`]: input gradient and per-layer `(dw, db)`.
pub fn mlp_vjp(x: &Tensor, layers: &[Layer], pre: &[Tensor], up: &Tensor) -> (Tensor, Vec<(Tensor, Tensor)>) {
    let mut grads = vec![None; layers.len()];
    let mut g = up.clone();
    for i in (0..layers.len()).rev() {
        if i + 1 < layers.len() {
            g = relu_vjp(&pre[i], &g);
        }
        let input = if i == 0 { x.clone() } else { relu(&pre[i - 1]) };
        let lg = linear_vjp(&input, &layers[i].w, &g);
        grads[i] = Some((lg.dw, lg.db));
        g = lg.dx;
    }
    (g, grads.into_iter().map(Option::unwrap).collect())
}
