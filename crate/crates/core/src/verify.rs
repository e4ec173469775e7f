//! Finite-difference suite over every differentiable stage of the pipeline.
//!
//! Each case reduces its stage's output to a scalar through a fixed random
//! projection and compares tape gradients against central differences for
//! every input and parameter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arf::{ArfConfig, ArfLayer};
use crate::autograd::Var;
use crate::encoder::{parse_placement, Backbone, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion;
use crate::gradcheck::{finite_diff_check, scalar_fn, GradCheckReport};
use crate::nn::{Forward, ParamStore, ParamVars};
use crate::ops::{self, BnMode};
use crate::similarity::{self, Metric};
use crate::spectral;
use crate::tensor::Tensor;

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

pub const MODULES: [&str; 6] = ["tensor-core", "spectral", "fusion", "arf", "similarity", "encoder"];

pub struct SuiteRow {
    pub module: &'static str,
    pub case: &'static str,
    pub report: GradCheckReport,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.report.passes(TOLERANCE)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// `sum(y * r)` for a fixed random `r` shaped like `y`.
fn project<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let r = y.tape().constant(randn(&y.shape(), seed));
    Ok(ops::sum(ops::mul(y, r)?))
}

/// Checks `f(inputs, params)` w.r.t. the leading `inputs` and every tensor in `params`.
fn check_with_params<F>(inputs: Vec<Tensor>, params: &ParamStore, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&[Var<'t>], &ParamVars<'t>) -> Result<Var<'t>>,
{
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let n_in = inputs.len();
    let mut all = inputs;
    all.extend(names.iter().map(|n| params.get(n).expect("listed name").clone()));
    let g = scalar_fn(move |_, v| {
        let vars = ParamVars::from_pairs(names.iter().cloned().zip(v[n_in..].iter().copied()));
        f(&v[..n_in], &vars)
    });
    finite_diff_check(g, &all, EPS)
}

/// Adds small noise to every parameter so no case sits at a symmetric initialization.
fn jitter(params: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    for (_, t) in params.iter_mut() {
        let noise = Tensor::randn(t.shape(), 0.1, &mut r);
        *t = t.zip_map(&noise, |a, b| a + b).expect("same shape");
    }
}

fn conv2d() -> Result<GradCheckReport> {
    let f = scalar_fn(|_, v| project(ops::conv2d(v[0], v[1], Some(v[2]))?, 10));
    finite_diff_check(f, &[randn(&[2, 3, 6, 6], 1), randn(&[4, 3, 3, 3], 2), randn(&[4], 3)], EPS)
}

fn grid_sample() -> Result<GradCheckReport> {
    let grid = Tensor::uniform(&[2, 2, 4, 5], -0.95, 0.95, &mut rng(4));
    let f = scalar_fn(|_, v| project(ops::bilinear_grid_sample(v[0], v[1])?, 11));
    finite_diff_check(f, &[randn(&[2, 3, 6, 7], 5), grid], EPS)
}

fn batch_norm() -> Result<GradCheckReport> {
    let f = scalar_fn(|_, v| project(ops::batch_norm(v[0], v[1], v[2], BnMode::Train)?.0, 12));
    finite_diff_check(f, &[randn(&[4, 3, 3, 3], 6), randn(&[3], 7), randn(&[3], 8)], EPS)
}

fn spectral_chain() -> Result<GradCheckReport> {
    let f = scalar_fn(|_, v| {
        let masked = spectral::apply_spectral_mask(spectral::dct2(v[0])?, v[1])?;
        project(spectral::idct2(masked)?, 13)
    });
    let template = randn(&[1, 3, spectral::TEMPLATE_SIZE, spectral::TEMPLATE_SIZE], 14);
    finite_diff_check(f, &[randn(&[2, 3, 8, 8], 15), template], EPS)
}

fn fuse() -> Result<GradCheckReport> {
    let mut params = ParamStore::new();
    fusion::init_fusion(3, &mut params, &mut rng(16));
    jitter(&mut params, 17);
    let buffers = ParamStore::new();
    check_with_params(vec![randn(&[2, 3, 5, 5], 18), randn(&[2, 3, 5, 5], 19)], &params, move |v, vars| {
        let ctx = Forward::new(v[0].tape(), vars, &buffers, true, 0.1);
        project(fusion::fuse(&ctx, v[0], v[1])?.fused, 20)
    })
}

fn arf_apply() -> Result<GradCheckReport> {
    let layer = ArfLayer::new("arf", ArfConfig::new(3, 4))?;
    let (mut params, mut buffers) = (ParamStore::new(), ParamStore::new());
    layer.init(&mut params, &mut buffers, &mut rng(21));
    jitter(&mut params, 22);
    check_with_params(vec![randn(&[3, 3, 7, 6], 23)], &params, move |v, vars| {
        let ctx = Forward::new(v[0].tape(), vars, &buffers, true, 0.1);
        let out = layer.forward(&ctx, v[0])?;
        let scales = ops::add(ops::sum(out.lambda_u), ops::sum(out.lambda_v))?;
        ops::add(project(out.y, 24)?, scales)
    })
}

fn similarity_ce() -> Result<GradCheckReport> {
    let (way, shot, q, c, d_g) = (2, 2, 2, 3, 4);
    let mut params = ParamStore::new();
    similarity::init_metric(c, d_g, &mut params, &mut rng(25));
    jitter(&mut params, 26);
    let features = randn(&[way * shot + way * q, c, 2, 2], 27).map(|v| 0.3 * v);
    let labels: Vec<usize> = (0..way).flat_map(|l| std::iter::repeat_n(l, q)).collect();
    check_with_params(vec![features], &params, move |v, vars| {
        let tokens = similarity::tokenize(v[0])?;
        let m = 4;
        let support = ops::slice(tokens, 0, 0, way * shot * m)?;
        let query = ops::slice(tokens, 0, way * shot * m, way * q * m)?;
        let d = similarity::episode_distances(support, query, way, m, &Metric::from_vars(vars)?)?;
        ops::cross_entropy(similarity::logits_from_distances(d), &labels)
    })
}

/// Inference-mode normalization: in training mode a conv bias feeding a batch norm has an
/// exactly zero gradient, which central differences only reproduce up to rounding noise.
fn encoder_end_to_end() -> Result<GradCheckReport> {
    let mut cfg = EncoderConfig { widths: vec![2, 2], pool: vec![true, false], image_size: 8, ..EncoderConfig::default() };
    cfg.arf_placement = parse_placement("all", Backbone::Conv4Mini, 2)?;
    let encoder = Encoder::new(cfg)?;
    let (mut params, mut buffers) = (ParamStore::new(), ParamStore::new());
    encoder.init(&mut params, &mut buffers, &mut rng(28));
    jitter(&mut params, 29);
    check_with_params(vec![randn(&[3, 3, 8, 8], 30)], &params, move |v, vars| {
        let ctx = Forward::new(v[0].tape(), vars, &buffers, false, 0.1);
        project(encoder.encode(&ctx, v[0])?.features, 31)
    })
}

type Case = (&'static str, &'static str, fn() -> Result<GradCheckReport>);

const CASES: [Case; 8] = [
    ("tensor-core", "conv2d", conv2d),
    ("tensor-core", "bilinear_grid_sample", grid_sample),
    ("tensor-core", "batch_norm", batch_norm),
    ("spectral", "dct2-mask-idct2", spectral_chain),
    ("fusion", "fuse", fuse),
    ("arf", "arf_apply", arf_apply),
    ("similarity", "tokenize-classify-ce", similarity_ce),
    ("encoder", "encode", encoder_end_to_end),
];

/// Runs every case, or only those of `module`.
pub fn gradient_suite(module: Option<&str>) -> Result<Vec<SuiteRow>> {
    if let Some(m) = module {
        if !MODULES.contains(&m) {
            return Err(Error::Config(format!("unknown module `{m}`; expected one of {}", MODULES.join(", "))));
        }
    }
    CASES
        .iter()
        .filter(|(m, _, _)| module.is_none_or(|want| want == *m))
        .map(|&(module, case, run)| Ok(SuiteRow { module, case, report: run()? }))
        .collect()
}
