//! Minimal dense differentiable kernels. Every forward function here has a
//! matching `*_vjp` that returns input gradients given an upstream gradient.

pub mod attention;
pub mod conv;
pub mod dense;
pub mod loss;

pub use attention::{pairwise_pos_encoding, relative_pos_encoding, scaled_dot_attention, KeyMask};
pub use conv::{conv2d, upsample2, ConvSpec};
pub use dense::{linear, matmul, mlp, relu, sigmoid, softmax, Layer};
pub use loss::{focal_loss, gaussian_focal_loss, smooth_l1, LossConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Width of the relative positional input: (Δr, Δa, Δx, Δy).
pub const POS_DIM: usize = 4;

/// Projection weights of one attention block. `w_pos` adds the relative
/// positional encoding to the attention output; `w_o`/`b_o` project the
/// result back to the input width.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_pos: Option<Tensor>,
    pub w_o: Option<(Tensor, Tensor)>,
    pub n_heads: usize,
}

impl AttentionParams {
    pub fn validate(&self) -> Result<()> {
        let c_in = self.w_q.shape()[0];
        let d = self.w_q.shape()[1];
        let dv = self.w_v.shape()[1];
        let ok = self.w_k.shape() == [c_in, d]
            && self.w_v.shape()[0] == c_in
            && self.w_pos.as_ref().map_or(true, |w| w.shape() == [POS_DIM, dv])
            && self.w_o.as_ref().map_or(true, |(w, b)| w.shape()[0] == dv && b.shape() == [w.shape()[1]])
            && self.n_heads > 0
            && d % self.n_heads == 0
            && dv % self.n_heads == 0;
        if ok {
            Ok(())
        } else {
            Err(Error::shape("inconsistent attention parameter shapes"))
        }
    }
}
