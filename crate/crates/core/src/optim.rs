//! RMSProp with momentum and L2 weight decay.

use crate::error::Result;
use crate::tensor::Tensor;

/// Smoothing constant of the squared-gradient average.
pub const RHO: f64 = 0.99;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Per-parameter accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsPropSlots {
    pub square_avg: Tensor,
    pub momentum_buf: Tensor,
}

impl RmsPropSlots {
    pub fn zeros(shape: &[usize]) -> Self {
        RmsPropSlots {
            square_avg: Tensor::zeros(shape),
            momentum_buf: Tensor::zeros(shape),
        }
    }
}

/// One step:
///
/// ```text
/// g' = g + wd * p
/// v  = rho * v + (1 - rho) * g'^2
/// b  = momentum * b + g' / sqrt(v + eps)
/// p  = p - lr * b
/// ```
pub fn rmsprop_update(
    param: &mut Tensor,
    grad: &Tensor,
    slots: &mut RmsPropSlots,
    cfg: RmsPropConfig,
) -> Result<()> {
    param.same_shape("rmsprop_update", grad)?;
    param.same_shape("rmsprop_update", &slots.square_avg)?;
    let RmsPropSlots {
        square_avg,
        momentum_buf,
    } = slots;
    for (((p, &g), v), b) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(square_avg.data_mut())
        .zip(momentum_buf.data_mut())
    {
        let g = g + cfg.weight_decay * *p;
        *v = RHO * *v + (1.0 - RHO) * g * g;
        *b = cfg.momentum * *b + g / (*v + EPS).sqrt();
        *p -= cfg.lr * *b;
    }
    Ok(())
}
