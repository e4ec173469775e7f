//! Adaptive receptive field (ARF) convolution.
//!
//! Per sample, two scale heads read axis-pooled descriptors of the input and
//! predict continuous kernel scales `lambda_u` (vertical) and `lambda_v`
//! (horizontal) in `[1, rho_max]`. The scales are discretized to an odd
//! kernel size that selects a filter from a bank, and they also shift a
//! sampling grid through which the input is bilinearly resampled before the
//! bank convolution. Gradients reach the scale heads only through that grid
//! offset. The convolved response is modulated and biased by two small
//! convolutional heads and finally reweighted by channel attention.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{init_batch_norm, init_conv, kaiming, Forward, ParamStore};
use crate::ops::{self, PoolAxis};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ArfConfig {
    /// Largest selectable kernel scale; odd, at least 3.
    pub rho_max: usize,
    /// Discretization step for `N = 2 floor(lambda / step) + 1`.
    pub sigma_step: usize,
    /// Offset scaling of the deformed sampling grid.
    pub kappa: f64,
    pub channels_in: usize,
    pub channels_out: usize,
    /// Window of the 1-D convolution across channels in the attention step.
    pub eca_window: usize,
    /// Keep the kernel bank at its random initialization.
    pub frozen_bank: bool,
}

impl ArfConfig {
    pub fn new(channels_in: usize, channels_out: usize) -> Self {
        Self {
            rho_max: 9,
            sigma_step: 2,
            kappa: 0.1,
            channels_in,
            channels_out,
            eca_window: 3,
            frozen_bank: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rho_max < 3 || self.rho_max % 2 == 0 {
            return Err(Error::Config(format!("rho_max must be odd and >= 3, got {}", self.rho_max)));
        }
        if self.sigma_step == 0 || self.sigma_step > self.rho_max {
            return Err(Error::Config(format!("sigma_step must be in 1..={}, got {}", self.rho_max, self.sigma_step)));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::Config(format!("kappa must be finite and >= 0, got {}", self.kappa)));
        }
        if self.channels_in == 0 || self.channels_out == 0 {
            return Err(Error::Config("ARF channel counts must be positive".into()));
        }
        if self.eca_window % 2 == 0 {
            return Err(Error::Config(format!("eca_window must be odd, got {}", self.eca_window)));
        }
        Ok(())
    }

    /// Scale at which the grid offset vanishes, `(rho_max + 1) / 2`.
    pub fn tau(&self) -> f64 {
        (self.rho_max as f64 + 1.0) / 2.0
    }

    /// Every odd extent `discretize_scale` can return for `lambda` in `[1, rho_max]`.
    pub fn achievable_sizes(&self) -> Vec<usize> {
        let lo = 1 / self.sigma_step;
        let hi = self.rho_max / self.sigma_step;
        (lo..=hi).map(|k| 2 * k + 1).collect()
    }

    /// Every `(N_u, N_v)` pair, i.e. the keys of the kernel bank.
    pub fn bank_keys(&self) -> Vec<(usize, usize)> {
        let sizes = self.achievable_sizes();
        sizes.iter().flat_map(|&u| sizes.iter().map(move |&v| (u, v))).collect()
    }
}

/// Initial weight of bank taps outside the central 3x3, relative to the center.
pub const BANK_OUTER_GAIN: f64 = 0.25;

/// Initial scale of the last convolution in every head, so that scales start
/// near `tau` (one shared kernel size) and modulation and bias near constants.
pub const HEAD_OUTPUT_GAIN: f64 = 0.1;

/// Maps a raw head output through the sigmoid onto `[1, rho_max]`.
pub fn lambda_from_raw(raw: f64, rho_max: usize) -> f64 {
    ops::Activation::Sigmoid.apply(raw) * (rho_max as f64 - 1.0) + 1.0
}

/// `N = 2 floor(lambda / sigma_step) + 1`.
pub fn discretize_scale(lambda: f64, sigma_step: usize, rho_max: usize) -> Result<usize> {
    if !(1.0..=rho_max as f64).contains(&lambda) {
        return Err(Error::Contract(format!("scale {lambda} outside [1, {rho_max}]")));
    }
    if sigma_step == 0 {
        return Err(Error::Contract("sigma_step must be positive".into()));
    }
    Ok(2 * (lambda / sigma_step as f64).floor() as usize + 1)
}

/// Base `N_u x N_v` lattice over `[-1,1]^2` resized to `h x w`, as `[1,2,h,w]`.
pub fn upsampled_base_grid(n_u: usize, n_v: usize, h: usize, w: usize) -> Tensor {
    let lattice = ops::identity_grid(n_u, n_v);
    ops::grid_sample_forward(&lattice, &ops::identity_grid(h, w)).expect("lattice resize shapes are consistent")
}

/// Deformed sampling grids for a batch.
///
/// `sizes[b]` is the discrete `(N_u, N_v)` of sample `b`; `lambda_u` and
/// `lambda_v` are `[B]`. The grid is `clip(G~ + kappa [V^, U^], -1, 1)` with
/// `U^ = (lambda_u - tau) / tau` on the vertical channel and `V^` on the
/// horizontal one. Result is `[B,2,h,w]`, differentiable in the scales.
pub fn build_deformed_grids<'t>(
    sizes: &[(usize, usize)],
    lambda_u: Var<'t>,
    lambda_v: Var<'t>,
    h: usize,
    w: usize,
    config: &ArfConfig,
) -> Result<Var<'t>> {
    let b = sizes.len();
    if lambda_u.shape() != [b] || lambda_v.shape() != [b] {
        return Err(Error::Dimension(format!(
            "{} grid sizes for scales {:?}/{:?}",
            b,
            lambda_u.shape(),
            lambda_v.shape()
        )));
    }
    let tape = lambda_u.tape();
    let mut cache: BTreeMap<(usize, usize), Tensor> = BTreeMap::new();
    let bases: Vec<Tensor> = sizes
        .iter()
        .map(|&(nu, nv)| cache.entry((nu, nv)).or_insert_with(|| upsampled_base_grid(nu, nv, h, w)).clone())
        .collect();
    let base_refs: Vec<&Tensor> = bases.iter().map(|t| t).collect();
    let base = Tensor::stack(&base_refs)?.into_reshape(&[b, 2, h, w])?;
    let base = tape.constant(base);

    let tau = config.tau();
    let normalize = |l: Var<'t>| ops::reshape(ops::scale(ops::add_scalar(l, -tau), 1.0 / tau), &[b, 1]);
    let (u_hat, v_hat) = (normalize(lambda_u)?, normalize(lambda_v)?);
    // Channel 0 is horizontal (driven by lambda_v), channel 1 vertical (lambda_u).
    let offsets = ops::scale(ops::concat(&[v_hat, u_hat], 1)?, config.kappa);
    let offsets = ops::reshape(offsets, &[b, 2, 1, 1])?;
    Ok(ops::clip(ops::add(base, offsets)?, -1.0, 1.0))
}

/// Single-sample form of [`build_deformed_grids`]; scales are `[1]` variables.
pub fn build_deformed_grid<'t>(
    n_u: usize,
    n_v: usize,
    lambda_u: Var<'t>,
    lambda_v: Var<'t>,
    h: usize,
    w: usize,
    config: &ArfConfig,
) -> Result<Var<'t>> {
    build_deformed_grids(&[(n_u, n_v)], lambda_u, lambda_v, h, w, config)
}

/// Test and diagnostic overrides that pin parts of the operator.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ArfOverrides {
    /// Use this `(N_u, N_v)` instead of the discretized prediction.
    pub kernel_size: Option<(usize, usize)>,
    /// Replace the modulation map with a constant.
    pub modulation: Option<f64>,
    /// Replace the bias map with a constant.
    pub bias: Option<f64>,
    /// Replace the channel-attention weights with a constant.
    pub attention: Option<f64>,
}

/// Result of one ARF pass.
pub struct ArfOutput<'t> {
    /// `[B, C_out, H, W]`.
    pub y: Var<'t>,
    /// `[B]`.
    pub lambda_u: Var<'t>,
    /// `[B]`.
    pub lambda_v: Var<'t>,
    /// Kernel extents used per sample.
    pub sizes: Vec<(usize, usize)>,
}

/// One ARF layer; parameters live under `prefix` in the model's store.
#[derive(Clone, Debug)]
pub struct ArfLayer {
    pub prefix: String,
    pub config: ArfConfig,
    pub overrides: ArfOverrides,
}

impl ArfLayer {
    pub fn new(prefix: impl Into<String>, config: ArfConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { prefix: prefix.into(), config, overrides: ArfOverrides::default() })
    }

    pub fn bank_name(&self, (n_u, n_v): (usize, usize)) -> String {
        format!("{}.bank.k{}x{}", self.prefix, n_u, n_v)
    }

    pub fn is_bank_param(&self, name: &str) -> bool {
        name.starts_with(&format!("{}.bank.", self.prefix))
    }

    pub fn init(&self, params: &mut ParamStore, buffers: &mut ParamStore, rng: &mut impl Rng) {
        let (ci, co) = (self.config.channels_in, self.config.channels_out);
        let p = &self.prefix;
        for head in ["scale_u", "scale_v"] {
            params.insert(format!("{p}.{head}.conv1.weight"), kaiming(&[ci, ci, 3], ci * 3, rng));
            params.insert(format!("{p}.{head}.conv1.bias"), Tensor::zeros(&[ci]));
            init_batch_norm(&format!("{p}.{head}.bn"), ci, params, buffers);
            params.insert(format!("{p}.{head}.conv2.weight"), kaiming(&[1, ci, 3], ci * 3, rng).map(|v| HEAD_OUTPUT_GAIN * v));
            params.insert(format!("{p}.{head}.conv2.bias"), Tensor::zeros(&[1]));
        }
        for (key, filter) in self.initial_bank(rng) {
            params.insert(self.bank_name(key), filter);
        }
        for head in ["modulation", "bias"] {
            init_conv(&format!("{p}.{head}.conv1"), ci, co, (3, 3), true, params, rng);
            init_conv(&format!("{p}.{head}.conv2"), co, co, (3, 3), true, params, rng);
            let w = params.get_mut(&format!("{p}.{head}.conv2.weight")).expect("just inserted");
            *w = w.map(|v| HEAD_OUTPUT_GAIN * v);
        }
        // Start near a plain bank convolution: modulation ~tanh(1), bias ~0.
        params.insert(format!("{p}.modulation.conv2.bias"), Tensor::ones(&[co]));
        let k = self.config.eca_window;
        params.insert(format!("{p}.attention.weight"), kaiming(&[1, 1, k], k, rng));
    }

    /// Centered crops of one shared `n_max x n_max` kernel whose taps outside
    /// the central 3x3 are damped by [`BANK_OUTER_GAIN`], so every size starts
    /// with a similar response.
    fn initial_bank(&self, rng: &mut impl Rng) -> Vec<((usize, usize), Tensor)> {
        let (ci, co) = (self.config.channels_in, self.config.channels_out);
        let n = *self.config.achievable_sizes().last().expect("at least one size");
        let c = n / 2;
        let mut base = kaiming(&[co, ci, n, n], ci * 9, rng);
        for (i, v) in base.data_mut().iter_mut().enumerate() {
            let (y, x) = ((i / n) % n, i % n);
            if y.abs_diff(c) > 1 || x.abs_diff(c) > 1 {
                *v *= BANK_OUTER_GAIN;
            }
        }
        self.config
            .bank_keys()
            .into_iter()
            .map(|(nu, nv)| {
                let (y0, x0) = (c - nu / 2, c - nv / 2);
                let mut data = Vec::with_capacity(co * ci * nu * nv);
                for plane in base.data().chunks(n * n) {
                    for y in y0..y0 + nu {
                        data.extend_from_slice(&plane[y * n + x0..y * n + x0 + nv]);
                    }
                }
                ((nu, nv), Tensor::from_parts(vec![co, ci, nu, nv], data))
            })
            .collect()
    }

    /// Raw head output (before the sigmoid) for `[B,C,H,W]` input, as `[B]`.
    fn scale_head<'t>(&self, ctx: &Forward<'_, 't>, x: Var<'t>, head: &str, axis: PoolAxis) -> Result<Var<'t>> {
        let p = format!("{}.{head}", self.prefix);
        let b = x.shape()[0];
        let pooled = ops::gap_axis(x, axis)?;
        let h = ctx.conv(&format!("{p}.conv1"), pooled)?;
        let h = ctx.leaky(ctx.batch_norm(&format!("{p}.bn"), h)?);
        let h = ctx.conv(&format!("{p}.conv2"), h)?;
        let raw = ops::mean_axis(h, 2)?;
        ops::reshape(raw, &[b])
    }

    /// Continuous scales `(lambda_u, lambda_v)`, each `[B]` in `[1, rho_max]`.
    pub fn predict_scales<'t>(&self, ctx: &Forward<'_, 't>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let span = self.config.rho_max as f64 - 1.0;
        let to_lambda = |raw: Var<'t>| ops::add_scalar(ops::scale(ops::sigmoid(raw), span), 1.0);
        let u = to_lambda(self.scale_head(ctx, x, "scale_u", PoolAxis::Vertical)?);
        let v = to_lambda(self.scale_head(ctx, x, "scale_v", PoolAxis::Horizontal)?);
        Ok((u, v))
    }

    /// Convolves each sample with the bank filter of its selected size.
    fn bank_conv<'t>(&self, ctx: &Forward<'_, 't>, x: Var<'t>, sizes: &[(usize, usize)]) -> Result<Var<'t>> {
        let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (i, &s) in sizes.iter().enumerate() {
            groups.entry(s).or_default().push(i);
        }
        let kernel = |key: (usize, usize)| {
            ctx.param(&self.bank_name(key)).map_err(|_| {
                Error::Internal(format!("kernel bank of `{}` has no {}x{} filter", self.prefix, key.0, key.1))
            })
        };
        if groups.len() == 1 {
            return ops::conv2d(x, kernel(sizes[0])?, None);
        }
        let mut parts = Vec::with_capacity(groups.len());
        let mut order = Vec::with_capacity(sizes.len());
        for (key, members) in &groups {
            let sub = ops::index_select(x, members)?;
            parts.push(ops::conv2d(sub, kernel(*key)?, None)?);
            order.extend_from_slice(members);
        }
        let stacked = ops::concat(&parts, 0)?;
        let mut inverse = vec![0; order.len()];
        for (pos, &i) in order.iter().enumerate() {
            inverse[i] = pos;
        }
        ops::index_select(stacked, &inverse)
    }

    fn head_map<'t>(&self, ctx: &Forward<'_, 't>, x: Var<'t>, head: &str) -> Result<Var<'t>> {
        let p = format!("{}.{head}", self.prefix);
        let h = ops::sigmoid(ctx.conv(&format!("{p}.conv1"), x)?);
        ctx.conv(&format!("{p}.conv2"), h)
    }

    fn constant_like<'t>(&self, ctx: &Forward<'_, 't>, shape: &[usize], value: f64) -> Var<'t> {
        ctx.tape.constant(Tensor::full(shape, value))
    }

    /// Applies the layer to `[B, C_in, H, W]`, returning `[B, C_out, H, W]`.
    pub fn forward<'t>(&self, ctx: &Forward<'_, 't>, x: Var<'t>) -> Result<ArfOutput<'t>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.config.channels_in {
            return Err(Error::Dimension(format!(
                "ARF `{}` expects [B,{},H,W], got {:?}",
                self.prefix, self.config.channels_in, s
            )));
        }
        let (b, h, w, co) = (s[0], s[2], s[3], self.config.channels_out);

        let (lambda_u, lambda_v) = self.predict_scales(ctx, x)?;
        let sizes: Vec<(usize, usize)> = match self.overrides.kernel_size {
            Some(k) => vec![k; b],
            None => {
                let (lu, lv) = (lambda_u.value(), lambda_v.value());
                let (step, rho) = (self.config.sigma_step, self.config.rho_max);
                lu.data()
                    .iter()
                    .zip(lv.data())
                    .map(|(&u, &v)| Ok((discretize_scale(u, step, rho)?, discretize_scale(v, step, rho)?)))
                    .collect::<Result<_>>()?
            }
        };

        let grid = build_deformed_grids(&sizes, lambda_u, lambda_v, h, w, &self.config)?;
        let resampled = ops::bilinear_grid_sample(x, grid)?;
        let filtered = self.bank_conv(ctx, resampled, &sizes)?;

        let modulation = match self.overrides.modulation {
            Some(m) => self.constant_like(ctx, &[b, co, h, w], m),
            None => ops::tanh(self.head_map(ctx, x, "modulation")?),
        };
        let bias = match self.overrides.bias {
            Some(v) => self.constant_like(ctx, &[b, co, h, w], v),
            None => self.head_map(ctx, x, "bias")?,
        };
        let response = ops::add(ops::mul(filtered, modulation)?, bias)?;

        let attention = match self.overrides.attention {
            Some(a) => self.constant_like(ctx, &[b, co, 1, 1], a),
            None => {
                let pooled = ops::mean_axis(ops::reshape(response, &[b, co, h * w])?, 2)?;
                let pooled = ops::reshape(pooled, &[b, 1, co])?;
                let mixed = ops::conv1d(pooled, ctx.param(&format!("{}.attention.weight", self.prefix))?, None)?;
                ops::reshape(ops::sigmoid(mixed), &[b, co, 1, 1])?
            }
        };
        let y = ops::mul(response, attention)?;
        Ok(ArfOutput { y, lambda_u, lambda_v, sizes })
    }
}
