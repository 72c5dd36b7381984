//! 2D convolution and nearest upsampling over `(R, A, C)` polar maps.
//!
//! The angular axis may wrap (the map covers the full circle) or be
//! zero-padded (a sector). The radial axis is always zero-padded.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub circular: bool,
}

fn out_len(len: usize, k: usize, stride: usize) -> usize {
    let pad = k / 2;
    (len + 2 * pad - k) / stride + 1
}

#[inline]
fn src_col(oj: usize, dj: usize, pad: usize, stride: usize, a: usize, circular: bool) -> Option<usize> {
    let j = (oj * stride + dj) as isize - pad as isize;
    if circular {
        Some(j.rem_euclid(a as isize) as usize)
    } else if j >= 0 && (j as usize) < a {
        Some(j as usize)
    } else {
        None
    }
}

#[inline]
fn src_row(oi: usize, di: usize, pad: usize, stride: usize, r: usize) -> Option<usize> {
    let i = (oi * stride + di) as isize - pad as isize;
    (i >= 0 && (i as usize) < r).then_some(i as usize)
}

/// `x: [R, A, Cin]`, `kernel: [kh, kw, Cin, Cout]`, `bias: [Cout]`,
/// "same" padding of `k/2` on each side.
pub fn conv2d(x: &Tensor, kernel: &Tensor, bias: &Tensor, spec: ConvSpec) -> Tensor {
    let (r, a, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ks = kernel.shape();
    let (kh, kw, co) = (ks[0], ks[1], ks[3]);
    assert_eq!(ks[2], ci, "conv2d: channel mismatch");
    let (ro, ao) = (out_len(r, kh, spec.stride), out_len(a, kw, spec.stride));
    let (ph, pw) = (kh / 2, kw / 2);
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = vec![0.0; ro * ao * co];
    for oi in 0..ro {
        for oj in 0..ao {
            let opx = &mut out[(oi * ao + oj) * co..(oi * ao + oj + 1) * co];
            opx.copy_from_slice(bias.data());
            for di in 0..kh {
                let Some(ii) = src_row(oi, di, ph, spec.stride, r) else { continue };
                for dj in 0..kw {
                    let Some(jj) = src_col(oj, dj, pw, spec.stride, a, spec.circular) else { continue };
                    let xpx = &xd[(ii * a + jj) * ci..(ii * a + jj + 1) * ci];
                    let kbase = (di * kw + dj) * ci * co;
                    for (c, &xv) in xpx.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let krow = &kd[kbase + c * co..kbase + (c + 1) * co];
                        for (o, &kv) in opx.iter_mut().zip(krow) {
                            *o += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![ro, ao, co], out).unwrap()
}

pub struct ConvGrads {
    pub dx: Tensor,
    pub dk: Tensor,
    pub db: Tensor,
}

pub fn conv2d_vjp(x: &Tensor, kernel: &Tensor, spec: ConvSpec, up: &Tensor) -> ConvGrads {
    let (r, a, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ks = kernel.shape();
    let (kh, kw, co) = (ks[0], ks[1], ks[3]);
    let (ro, ao) = (up.shape()[0], up.shape()[1]);
    let (ph, pw) = (kh / 2, kw / 2);
    let (xd, kd, ud) = (x.data(), kernel.data(), up.data());
    let mut dx = vec![0.0; xd.len()];
    let mut dk = vec![0.0; kd.len()];
    let mut db = vec![0.0; co];
    for oi in 0..ro {
        for oj in 0..ao {
            let upx = &ud[(oi * ao + oj) * co..(oi * ao + oj + 1) * co];
            for (d, u) in db.iter_mut().zip(upx) {
                *d += u;
            }
            for di in 0..kh {
                let Some(ii) = src_row(oi, di, ph, spec.stride, r) else { continue };
                for dj in 0..kw {
                    let Some(jj) = src_col(oj, dj, pw, spec.stride, a, spec.circular) else { continue };
                    let xoff = (ii * a + jj) * ci;
                    let kbase = (di * kw + dj) * ci * co;
                    for c in 0..ci {
                        let krow = &kd[kbase + c * co..kbase + (c + 1) * co];
                        dx[xoff + c] += krow.iter().zip(upx).map(|(k, u)| k * u).sum::<f64>();
                        let xv = xd[xoff + c];
                        if xv != 0.0 {
                            let dkrow = &mut dk[kbase + c * co..kbase + (c + 1) * co];
                            for (d, u) in dkrow.iter_mut().zip(upx) {
                                *d += xv * u;
                            }
                        }
                    }
                }
            }
        }
    }
    ConvGrads {
        dx: Tensor::new(x.shape().to_vec(), dx).unwrap(),
        dk: Tensor::new(kernel.shape().to_vec(), dk).unwrap(),
        db: Tensor::new(vec![co], db).unwrap(),
    }
}

/// Nearest-neighbour 2x upsampling of `[r, a, c]`, cropped to `(out_r, out_a)`.
pub fn upsample2(x: &Tensor, out_r: usize, out_a: usize) -> Tensor {
    let (a, c) = (x.shape()[1], x.shape()[2]);
    let xd = x.data();
    let mut out = Vec::with_capacity(out_r * out_a * c);
    for i in 0..out_r {
        for j in 0..out_a {
            let s = ((i / 2) * a + j / 2) * c;
            out.extend_from_slice(&xd[s..s + c]);
        }
    }
    Tensor::new(vec![out_r, out_a, c], out).unwrap()
}

pub fn upsample2_vjp(x_shape: &[usize], up: &Tensor) -> Tensor {
    let (a, c) = (x_shape[1], x_shape[2]);
    let (out_r, out_a) = (up.shape()[0], up.shape()[1]);
    let mut dx = Tensor::zeros(x_shape);
    let d = dx.data_mut();
    for i in 0..out_r {
        for j in 0..out_a {
            let s = ((i / 2) * a + j / 2) * c;
            let u = &up.data()[(i * out_a + j) * c..(i * out_a + j + 1) * c];
            for (dv, uv) in d[s..s + c].iter_mut().zip(u) {
                *dv += uv;
            }
        }
    }
    dx
}
