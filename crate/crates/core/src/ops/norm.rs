use crate::autograd::Var;
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

/// Statistic source for [`batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with stored running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics of one training-mode batch, used to update running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (biased when only one value per channel exists).
    pub var: Vec<f64>,
}

/// Batch normalization over every axis except axis 1 (channels), followed by
/// the per-channel affine `gamma * x_hat + beta`.
///
/// Input is `[B,C,...]`. Train mode also returns the batch statistics.
pub fn batch_norm<'t>(
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    mode: BnMode<'_>,
) -> Result<(Var<'t>, Option<BatchStats>)> {
    let xv = x.value();
    let s = xv.shape().to_vec();
    if s.len() < 2 {
        return Err(dim_err!("batch_norm expects [B,C,...], got {:?}", s));
    }
    let (b, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(dim_err!("batch_norm affine shapes {:?}/{:?} for {} channels", gamma.shape(), beta.shape(), c));
    }
    let n = (b * inner) as f64;
    let d = xv.data();
    let channel = |ci: usize| (0..b).flat_map(move |bi| ((bi * c + ci) * inner)..((bi * c + ci + 1) * inner));

    let (mean, var, stats) = match mode {
        BnMode::Train => {
            if b == 1 {
                log::warn!("batch_norm in train mode with batch size 1");
            }
            let mean: Vec<f64> = (0..c).map(|ci| channel(ci).map(|i| d[i]).sum::<f64>() / n).collect();
            let var: Vec<f64> = (0..c)
                .map(|ci| channel(ci).map(|i| (d[i] - mean[ci]).powi(2)).sum::<f64>() / n)
                .collect();
            let unbiased = if n > 1.0 { var.iter().map(|v| v * n / (n - 1.0)).collect() } else { var.clone() };
            let stats = BatchStats { mean: mean.clone(), var: unbiased };
            (mean, var, Some(stats))
        }
        BnMode::Eval { mean, var } => {
            if mean.len() != c || var.len() != c {
                return Err(dim_err!("running stats for {} channels, input has {}", mean.len(), c));
            }
            (mean.to_vec(), var.to_vec(), None)
        }
    };
    let train = stats.is_some();
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut x_hat = vec![0.0; d.len()];
    for ci in 0..c {
        for i in channel(ci) {
            x_hat[i] = (d[i] - mean[ci]) * inv_std[ci];
        }
    }
    let (gv, bv) = (gamma.value(), beta.value());
    let mut out = vec![0.0; d.len()];
    for ci in 0..c {
        for i in channel(ci) {
            out[i] = gv.data()[ci] * x_hat[i] + bv.data()[ci];
        }
    }
    let y = x.tape().push(
        Tensor::from_parts(s.clone(), out),
        &[x, gamma, beta],
        Box::new(move |g, inputs, _| {
            let gamma = inputs[1].data();
            let gd = g.data();
            let channel = |ci: usize| (0..b).flat_map(move |bi| ((bi * c + ci) * inner)..((bi * c + ci + 1) * inner));
            let mut dx = vec![0.0; gd.len()];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for ci in 0..c {
                let (mut sum_g, mut sum_gx) = (0.0, 0.0);
                for i in channel(ci) {
                    sum_g += gd[i];
                    sum_gx += gd[i] * x_hat[i];
                }
                dgamma[ci] = sum_gx;
                dbeta[ci] = sum_g;
                let k = gamma[ci] * inv_std[ci];
                if train {
                    for i in channel(ci) {
                        dx[i] = k * (gd[i] - sum_g / n - x_hat[i] * sum_gx / n);
                    }
                } else {
                    for i in channel(ci) {
                        dx[i] = k * gd[i];
                    }
                }
            }
            vec![
                Some(Tensor::from_parts(s.clone(), dx)),
                Some(Tensor::from_parts(vec![c], dgamma)),
                Some(Tensor::from_parts(vec![c], dbeta)),
            ]
        }),
    );
    Ok((y, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn affine(tape: &Tape, c: usize) -> (Var<'_>, Var<'_>) {
        (tape.constant(Tensor::ones(&[c])), tape.constant(Tensor::zeros(&[c])))
    }

    #[test]
    fn normalized_batch_is_unchanged() {
        // Per channel the 4 values are {-1, 1, -1, 1}: zero mean, unit variance.
        let tape = Tape::new();
        let x = Tensor::new(vec![2, 1, 1, 2], vec![-1.0, 1.0, 1.0, -1.0]).unwrap();
        let (g, b) = affine(&tape, 1);
        let (y, _) = batch_norm(tape.constant(x.clone()), g, b, BnMode::Train).unwrap();
        assert!(y.value().max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn constant_batch_maps_to_zero() {
        let tape = Tape::new();
        let (g, b) = affine(&tape, 2);
        let (y, stats) = batch_norm(tape.constant(Tensor::full(&[3, 2, 2, 2], 7.0)), g, b, BnMode::Train).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
        assert_eq!(stats.unwrap().var, vec![0.0, 0.0]);
    }

    #[test]
    fn random_batch_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tape = Tape::new();
        let x = Tensor::randn(&[4, 3, 5, 5], 5.0, &mut rng).map(|v| v + 2.0);
        let (g, b) = affine(&tape, 3);
        let (y, _) = batch_norm(tape.constant(x), g, b, BnMode::Train).unwrap();
        let yv = y.value();
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|bi| (0..25).map(move |i| (bi, i)))
                .map(|(bi, i)| yv.data()[(bi * 3 + c) * 25 + i])
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-10);
            // The epsilon floor shrinks the variance by var/(var+eps); input std 5 keeps that under 1e-6.
            assert!((var - 1.0).abs() < 1e-6, "variance {var}");
        }
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let tape = Tape::new();
        let (g, b) = affine(&tape, 1);
        let x = tape.constant(Tensor::from_vec(vec![3.0, 5.0]).reshape(&[2, 1]).unwrap());
        let (y, stats) = batch_norm(x, g, b, BnMode::Eval { mean: &[1.0], var: &[4.0] }).unwrap();
        assert!(stats.is_none());
        let expect = [2.0 / (4.0 + BN_EPS).sqrt(), 4.0 / (4.0 + BN_EPS).sqrt()];
        assert!((y.value().data()[0] - expect[0]).abs() < 1e-15);
        assert!((y.value().data()[1] - expect[1]).abs() < 1e-15);
    }
}
