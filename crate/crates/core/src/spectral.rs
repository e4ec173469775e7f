//! Channel-wise orthonormal 2-D DCT-II, the learnable spectral mask, and the inverse transform.

use crate::autograd::Var;
use crate::error::{dim_err, Result};
use crate::ops::{self, gemm};
use crate::tensor::Tensor;

/// Resolution of the learnable mask template.
pub const TEMPLATE_SIZE: usize = 16;
pub const TEMPLATE_NAME: &str = "spectral.mask_template";

/// Orthonormal DCT-II basis, `D[u][x] = alpha(u) cos(pi (2x+1) u / 2n)`, row-major `n x n`.
pub fn dct_matrix(n: usize) -> Vec<f64> {
    let mut d = vec![0.0; n * n];
    for u in 0..n {
        let alpha = if u == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for x in 0..n {
            d[u * n + x] = alpha * (std::f64::consts::PI * (2 * x + 1) as f64 * u as f64 / (2 * n) as f64).cos();
        }
    }
    d
}

/// Applies `D_h X D_w^T` (forward) or `D_h^T X D_w` (inverse) to every `h x w` plane.
fn transform_planes(data: &[f64], h: usize, w: usize, inverse: bool) -> Vec<f64> {
    let (dh, dw) = (dct_matrix(h), dct_matrix(w));
    let planes = data.len() / (h * w);
    let mut out = vec![0.0; data.len()];
    let mut tmp = vec![0.0; h * w];
    // Row-major D has strides (n, 1); its transpose reads with (1, n).
    let (left, right) = if inverse {
        ((1, h as isize), (w as isize, 1))
    } else {
        ((h as isize, 1), (1, w as isize))
    };
    for p in 0..planes {
        let x = &data[p * h * w..(p + 1) * h * w];
        gemm(h, h, w, &dh, left, x, (w as isize, 1), &mut tmp, false);
        gemm(h, w, w, &tmp, (w as isize, 1), &dw, right, &mut out[p * h * w..(p + 1) * h * w], false);
    }
    out
}

fn spatial_dims(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() < 3 {
        return Err(dim_err!("DCT expects [..,C,H,W], got {:?}", shape));
    }
    Ok((shape[shape.len() - 2], shape[shape.len() - 1]))
}

fn dct_op(x: Var<'_>, inverse: bool) -> Result<Var<'_>> {
    let xv = x.value();
    let (h, w) = spatial_dims(xv.shape())?;
    let y = Tensor::from_parts(xv.shape().to_vec(), transform_planes(xv.data(), h, w, inverse));
    Ok(x.tape().push(
        y,
        &[x],
        Box::new(move |g, _, _| {
            // The transform is orthogonal, so its adjoint is the opposite direction.
            vec![Some(Tensor::from_parts(g.shape().to_vec(), transform_planes(g.data(), h, w, !inverse)))]
        }),
    ))
}

/// Orthonormal DCT-II of every `H x W` plane of `[C,H,W]` or `[B,C,H,W]`.
pub fn dct2(x: Var<'_>) -> Result<Var<'_>> {
    dct_op(x, false)
}

/// Inverse of [`dct2`].
pub fn idct2(x: Var<'_>) -> Result<Var<'_>> {
    dct_op(x, true)
}

/// Plain-tensor forms of the transforms.
pub fn dct2_tensor(x: &Tensor) -> Result<Tensor> {
    let (h, w) = spatial_dims(x.shape())?;
    Ok(Tensor::from_parts(x.shape().to_vec(), transform_planes(x.data(), h, w, false)))
}

pub fn idct2_tensor(x: &Tensor) -> Result<Tensor> {
    let (h, w) = spatial_dims(x.shape())?;
    Ok(Tensor::from_parts(x.shape().to_vec(), transform_planes(x.data(), h, w, true)))
}

/// Zero-initialized `[1,C,16,16]` template; its effective mask is 0.5 everywhere.
pub fn init_template(channels: usize) -> Tensor {
    Tensor::zeros(&[1, channels, TEMPLATE_SIZE, TEMPLATE_SIZE])
}

/// Effective mask `1 - sigmoid(resize(template))`, `[1,C,H,W]`, entries in (0,1).
pub fn spectral_mask(template: Var<'_>, h: usize, w: usize) -> Result<Var<'_>> {
    let s = template.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(dim_err!("mask template must be [1,C,h,w], got {:?}", s));
    }
    let resized = ops::upsample_bilinear(template, h, w)?;
    Ok(ops::add_scalar(ops::scale(ops::sigmoid(resized), -1.0), 1.0))
}

/// Gates the coefficients `[B,C,H,W]` (or `[C,H,W]`) by the template's mask.
pub fn apply_spectral_mask<'t>(coeffs: Var<'t>, template: Var<'t>) -> Result<Var<'t>> {
    let s = coeffs.shape();
    let (h, w) = spatial_dims(&s)?;
    let channels = s[s.len() - 3];
    if template.shape().get(1) != Some(&channels) {
        return Err(dim_err!("mask template {:?} for {} channels", template.shape(), channels));
    }
    let mask = spectral_mask(template, h, w)?;
    if s.len() == 3 {
        ops::mul(coeffs, ops::reshape(mask, &[channels, h, w])?)
    } else {
        ops::mul(coeffs, mask)
    }
}

/// Frequency-branch input `idct2(mask(dct2(image)))`.
pub fn frequency_view<'t>(image: Var<'t>, template: Var<'t>) -> Result<Var<'t>> {
    idct2(apply_spectral_mask(dct2(image)?, template)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_image_is_dc_only() {
        let c = 1.75;
        let f = dct2_tensor(&Tensor::full(&[1, 2, 2], c)).unwrap();
        assert!((f.get(&[0, 0, 0]) - 2.0 * c).abs() < 1e-15);
        for (u, v) in [(0, 1), (1, 0), (1, 1)] {
            assert!(f.get(&[0, u, v]).abs() < 1e-15);
        }
        let back = idct2_tensor(&f).unwrap();
        assert!(back.max_abs_diff(&Tensor::full(&[1, 2, 2], c)) < 1e-15);
    }

    #[test]
    fn delta_image() {
        let mut x = Tensor::zeros(&[1, 2, 2]);
        x.set(&[0, 0, 0], 1.0);
        let f = dct2_tensor(&x).unwrap();
        assert!(f.data().iter().all(|&v| (v - 0.5).abs() < 1e-15), "{:?}", f.data());
    }

    #[test]
    fn roundtrip_over_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for h in 1..=16 {
            for w in 1..=16 {
                let x = Tensor::randn(&[1, h, w], 1.0, &mut rng);
                let back = idct2_tensor(&dct2_tensor(&x).unwrap()).unwrap();
                assert!(back.max_abs_diff(&x) <= 1e-10, "{h}x{w}");
            }
        }
    }

    #[test]
    fn mask_limits() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let coeffs = tape.constant(Tensor::randn(&[2, 2, 5, 6], 1.0, &mut rng));
        let half = apply_spectral_mask(coeffs, tape.constant(init_template(2))).unwrap();
        assert!(half.value().max_abs_diff(&coeffs.value().map(|v| 0.5 * v)) < 1e-15);

        let closed = tape.constant(Tensor::full(&[1, 2, 16, 16], 800.0));
        let suppressed = apply_spectral_mask(coeffs, closed).unwrap();
        assert!(suppressed.value().data().iter().all(|&v| v == 0.0));

        let open = tape.constant(Tensor::full(&[1, 2, 16, 16], -800.0));
        let passed = apply_spectral_mask(coeffs, open).unwrap();
        assert_eq!(*passed.value(), *coeffs.value());
    }

    #[test]
    fn mask_channel_mismatch() {
        let tape = Tape::new();
        let coeffs = tape.constant(Tensor::zeros(&[3, 4, 4]));
        assert!(apply_spectral_mask(coeffs, tape.constant(init_template(2))).is_err());
    }
}
