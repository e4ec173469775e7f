//! Pixel-wise softmax fusion of the spatial and frequency feature maps.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{dim_err, Result};
use crate::nn::{init_conv, Forward, ParamStore};
use crate::ops;

pub const PREFIX: &str = "fusion.psi";

/// Fused map `W_s * theta_s + W_f * theta_f` and the `[B,1,H,W]` weight maps.
pub struct FusionOutput<'t> {
    pub fused: Var<'t>,
    pub w_spatial: Var<'t>,
    pub w_frequency: Var<'t>,
}

/// Adds the score network `2C -> C -> C -> 2` (3x3 convs with bias).
pub fn init_fusion(channels: usize, params: &mut ParamStore, rng: &mut impl Rng) {
    init_conv(&format!("{PREFIX}.conv1"), 2 * channels, channels, (3, 3), true, params, rng);
    init_conv(&format!("{PREFIX}.conv2"), channels, channels, (3, 3), true, params, rng);
    init_conv(&format!("{PREFIX}.conv3"), channels, 2, (3, 3), true, params, rng);
}

/// Two-channel score map `A = psi([theta_s, theta_f])`, `[B,2,H,W]`.
pub fn scores<'t>(ctx: &Forward<'_, 't>, theta_s: Var<'t>, theta_f: Var<'t>) -> Result<Var<'t>> {
    let cat = ops::concat(&[theta_s, theta_f], 1)?;
    let h = ctx.leaky(ctx.conv(&format!("{PREFIX}.conv1"), cat)?);
    let h = ctx.leaky(ctx.conv(&format!("{PREFIX}.conv2"), h)?);
    ctx.conv(&format!("{PREFIX}.conv3"), h)
}

/// Convex combination of two `[B,C,H,W]` maps with weights from a `[B,2,H,W]` score map.
pub fn combine<'t>(theta_s: Var<'t>, theta_f: Var<'t>, scores: Var<'t>) -> Result<FusionOutput<'t>> {
    let weights = ops::softmax(scores, 1)?;
    let w_spatial = ops::slice(weights, 1, 0, 1)?;
    let w_frequency = ops::slice(weights, 1, 1, 1)?;
    let fused = ops::add(ops::mul(theta_s, w_spatial)?, ops::mul(theta_f, w_frequency)?)?;
    Ok(FusionOutput { fused, w_spatial, w_frequency })
}

pub fn fuse<'t>(ctx: &Forward<'_, 't>, theta_s: Var<'t>, theta_f: Var<'t>) -> Result<FusionOutput<'t>> {
    let (s, f) = (theta_s.shape(), theta_f.shape());
    if s != f || s.len() != 4 {
        return Err(dim_err!("fusion branches must share a [B,C,H,W] shape, got {:?} and {:?}", s, f));
    }
    let a = scores(ctx, theta_s, theta_f)?;
    combine(theta_s, theta_f, a)
}
