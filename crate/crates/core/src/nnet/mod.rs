//! Minimal tensor engine for the U-Net: NCHW tensors, the layer set of the
//! network with hand-written backward passes, Adam with L2 coupling,
//! finite-difference gradient checking and a binary checkpoint format.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! training and `f64` for gradient checks. Convolutions are
//! cross-correlations lowered to GEMM through `im2col`.

mod adam;
mod checkpoint;
mod gradcheck;
mod ops;
mod tensor;
mod unet;

pub use adam::{adam_step, TrainHyper};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use ops::{
    concat_channels, conv2d_backward, conv2d_forward, conv2x2_stride2, maxpool2, maxpool2_backward,
    relu, relu_backward_inplace, softmax_cross_entropy, split_channels, upconv2, upconv2_backward,
    ConvGrads,
};
pub use tensor::Tensor4;
pub use unet::{argmax_labels, Gradients, LayerKind, LayerParams, ModelParams, UNet, UNetConfig};

use std::fmt::Debug;

/// Scalar type of a network: `f32` for training, `f64` for gradient checks.
pub trait Real:
    num_traits::Float + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    /// `c = alpha * a * b + beta * c` for an `m x k` by `k x n` product, with
    /// explicit row and column strides for every operand.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

fn check_span(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                check_span(a.len(), m, k, rsa, csa);
                check_span(b.len(), k, n, rsb, csb);
                check_span(c.len(), m, n, rsc, csc);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every operand's extent was bounds-checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }

            fn from_f64(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);
