//! Bidirectional attention-reconstruction distance and the episode classifier.
//!
//! A query's tokens are reconstructed from a class's pooled support tokens by
//! scaled dot-product attention, and the support tokens are reconstructed from
//! the query's. The weighted sum of both squared reconstruction errors is the
//! class distance; class probabilities are a softmax over negative distances.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{dim_err, Error, Result};
use crate::nn::{ParamStore, ParamVars};
use crate::ops;
use crate::tensor::Tensor;

pub const WQ: &str = "metric.wq";
pub const WK: &str = "metric.wk";
pub const WV: &str = "metric.wv";
pub const RAW_LAMBDA1: &str = "metric.raw_lambda1";
pub const RAW_LAMBDA2: &str = "metric.raw_lambda2";

/// Raw value whose softplus is 0.5.
pub fn initial_raw_lambda() -> f64 {
    0.5f64.exp_m1().ln()
}

/// Adds `W_Q, W_K, W_V` (`[C, d_g]`, `N(0, 1/C)`) and the two raw weights.
pub fn init_metric(channels: usize, d_g: usize, params: &mut ParamStore, rng: &mut impl Rng) {
    let std = (1.0 / channels as f64).sqrt();
    for name in [WQ, WK, WV] {
        params.insert(name, Tensor::randn(&[channels, d_g], std, rng));
    }
    params.insert(RAW_LAMBDA1, Tensor::scalar(initial_raw_lambda()));
    params.insert(RAW_LAMBDA2, Tensor::scalar(initial_raw_lambda()));
}

/// Metric parameters registered on a tape.
#[derive(Clone, Copy)]
pub struct Metric<'t> {
    pub wq: Var<'t>,
    pub wk: Var<'t>,
    pub wv: Var<'t>,
    pub raw_lambda1: Var<'t>,
    pub raw_lambda2: Var<'t>,
}

impl<'t> Metric<'t> {
    pub fn from_vars(vars: &ParamVars<'t>) -> Result<Self> {
        Ok(Self {
            wq: vars.get(WQ)?,
            wk: vars.get(WK)?,
            wv: vars.get(WV)?,
            raw_lambda1: vars.get(RAW_LAMBDA1)?,
            raw_lambda2: vars.get(RAW_LAMBDA2)?,
        })
    }

    pub fn d_g(&self) -> usize {
        self.wq.shape()[1]
    }

    /// `(lambda1, lambda2)` as `[1]` variables.
    pub fn lambdas(&self) -> (Var<'t>, Var<'t>) {
        (ops::softplus(self.raw_lambda1), ops::softplus(self.raw_lambda2))
    }

    /// `(Q, K, V)` projections of `[n,C]` tokens.
    pub fn project(&self, tokens: Var<'t>) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let c = tokens.shape()[1];
        if self.wq.shape()[0] != c {
            return Err(dim_err!("tokens of width {} for projections {:?}", c, self.wq.shape()));
        }
        Ok((ops::matmul(tokens, self.wq)?, ops::matmul(tokens, self.wk)?, ops::matmul(tokens, self.wv)?))
    }
}

/// `[B,C,h,w]` feature maps to `[B*h*w, C]` tokens, row-major over positions.
pub fn tokenize(features: Var<'_>) -> Result<Var<'_>> {
    ops::to_tokens(features)
}

/// Row-stochastic `softmax(Q K^T / sqrt(d_g))` for projected queries `[n,d_g]` and keys `[k,d_g]`.
pub fn attention_weights<'t>(queries: Var<'t>, keys: Var<'t>) -> Result<Var<'t>> {
    let d = queries.shape()[1] as f64;
    let logits = ops::scale(ops::matmul(queries, ops::transpose(keys)?)?, 1.0 / d.sqrt());
    ops::softmax(logits, 1)
}

fn attend<'t>(queries: Var<'t>, keys: Var<'t>, values: Var<'t>) -> Result<Var<'t>> {
    ops::matmul(attention_weights(queries, keys)?, values)
}

/// Reconstructions `(q^, s^)` of one query's tokens `[m,C]` from a class's
/// support tokens `[Km,C]` and vice versa.
pub fn reconstruct<'t>(query: Var<'t>, support: Var<'t>, metric: &Metric<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let (qq, qk, qv) = metric.project(query)?;
    let (sq, sk, sv) = metric.project(support)?;
    Ok((attend(qq, sk, sv)?, attend(sq, qk, qv)?))
}

/// `lambda1 ||q^V - q^||^2 + lambda2 ||s^V - s^||^2`, as `[1]`.
pub fn class_dissimilarity<'t>(query: Var<'t>, support: Var<'t>, metric: &Metric<'t>) -> Result<Var<'t>> {
    let (q_hat, s_hat) = reconstruct(query, support, metric)?;
    let qv = ops::matmul(query, metric.wv)?;
    let sv = ops::matmul(support, metric.wv)?;
    let (l1, l2) = metric.lambdas();
    let e1 = ops::sum_squares(ops::sub(qv, q_hat)?);
    let e2 = ops::sum_squares(ops::sub(sv, s_hat)?);
    ops::add(ops::mul(l1, e1)?, ops::mul(l2, e2)?)
}

/// Class probabilities `softmax(-d)` of one query against per-class support tokens.
pub fn classify<'t>(query: Var<'t>, supports: &[Var<'t>], metric: &Metric<'t>) -> Result<Var<'t>> {
    if supports.len() < 2 {
        return Err(Error::Episode(format!("classification needs at least 2 classes, got {}", supports.len())));
    }
    let d = supports.iter().map(|&s| class_dissimilarity(query, s, metric)).collect::<Result<Vec<_>>>()?;
    let d = ops::reshape(ops::concat(&d, 0)?, &[1, supports.len()])?;
    ops::softmax(ops::scale(d, -1.0), 1)
}

/// Distances `[n_query, way]` between every query and every class.
///
/// `support_tokens` is `[way*shot*m, C]`, class-major (all tokens of class 0
/// first); `query_tokens` is `[n_query*m, C]`. Projections are applied once and
/// every query-class pair is handled by batched attention.
pub fn episode_distances<'t>(
    support_tokens: Var<'t>,
    query_tokens: Var<'t>,
    way: usize,
    tokens_per_sample: usize,
    metric: &Metric<'t>,
) -> Result<Var<'t>> {
    let m = tokens_per_sample;
    let (rows_s, rows_q) = (support_tokens.shape()[0], query_tokens.shape()[0]);
    if way == 0 || m == 0 || rows_s % (way * m) != 0 || rows_q % m != 0 {
        return Err(dim_err!("{} support / {} query tokens for {}-way with {} tokens per sample", rows_s, rows_q, way, m));
    }
    let km = rows_s / way;
    let nq = rows_q / m;
    let d = metric.d_g();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let (sq, sk, sv) = metric.project(support_tokens)?;
    let (qq, qk, qv) = metric.project(query_tokens)?;
    let qv3 = ops::reshape(qv, &[nq, m, d])?;
    let (l1, l2) = metric.lambdas();

    let mut columns = Vec::with_capacity(way);
    for r in 0..way {
        let (sq_r, sk_r, sv_r) = (ops::slice(sq, 0, r * km, km)?, ops::slice(sk, 0, r * km, km)?, ops::slice(sv, 0, r * km, km)?);

        // Query side: every query token attends over the class's support tokens.
        let q_hat = attend(qq, sk_r, sv_r)?;
        let err_q = ops::reshape(ops::sub(qv, q_hat)?, &[nq, m * d])?;
        let err_q = ops::scale(ops::mean_axis(ops::mul(err_q, err_q)?, 1)?, (m * d) as f64);

        // Support side: the class's support tokens attend over each query's tokens.
        // Logits are built as [nq, m, km] and normalized over the query tokens.
        let logits = ops::scale(ops::matmul(qk, ops::transpose(sq_r)?)?, inv_sqrt_d);
        let attn = ops::softmax(ops::reshape(logits, &[nq, m, km])?, 1)?;
        let s_hat = ops::batched_matmul(attn, qv3, true, false)?;
        let err_s = ops::sub(ops::reshape(sv_r, &[1, km, d])?, s_hat)?;
        let err_s = ops::reshape(err_s, &[nq, km * d])?;
        let err_s = ops::scale(ops::mean_axis(ops::mul(err_s, err_s)?, 1)?, (km * d) as f64);

        let dist = ops::add(ops::mul(err_q, l1)?, ops::mul(err_s, l2)?)?;
        columns.push(ops::reshape(dist, &[nq, 1])?);
    }
    ops::concat(&columns, 1)
}

/// Logits `-d` for cross-entropy and probabilities.
pub fn logits_from_distances(distances: Var<'_>) -> Var<'_> {
    ops::scale(distances, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn metric_store(c: usize, d: usize, seed: u64) -> ParamStore {
        let mut params = ParamStore::new();
        init_metric(c, d, &mut params, &mut ChaCha8Rng::seed_from_u64(seed));
        params
    }

    #[test]
    fn initial_lambdas_are_half() {
        let params = metric_store(2, 2, 0);
        let tape = Tape::new();
        let vars = params.vars(&tape, |_| true);
        let metric = Metric::from_vars(&vars).unwrap();
        let (l1, l2) = metric.lambdas();
        assert!((l1.item() - 0.5).abs() < 1e-15 && (l2.item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn tokens_are_row_major() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let t = tokenize(x).unwrap();
        assert_eq!(t.shape(), vec![4, 1]);
        assert_eq!(t.value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let x = tape.constant(Tensor::new(vec![1, 2, 1, 1], vec![5.0, 6.0]).unwrap());
        assert_eq!(tokenize(x).unwrap().value().data(), &[5.0, 6.0]);
    }

    #[test]
    fn single_key_reconstructs_its_value() {
        let params = metric_store(3, 2, 1);
        let tape = Tape::new();
        let vars = params.vars(&tape, |_| true);
        let metric = Metric::from_vars(&vars).unwrap();
        let q = tape.constant(Tensor::from_vec(vec![0.3, -1.0, 2.0]).into_reshape(&[1, 3]).unwrap());
        let s = tape.constant(Tensor::from_vec(vec![1.5, 0.2, -0.7]).into_reshape(&[1, 3]).unwrap());
        let (q_hat, _) = reconstruct(q, s, &metric).unwrap();
        let sv = ops::matmul(s, metric.wv).unwrap();
        assert_eq!(*q_hat.value(), *sv.value());
        let d = class_dissimilarity(q, q, &metric).unwrap();
        assert_eq!(d.item(), 0.0);
    }

    #[test]
    fn tied_keys_average_values() {
        let tape = Tape::new();
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut wk = Tensor::zeros(&[2, 2]);
        wk.set(&[0, 0], 1.0);
        let metric = Metric {
            wq: tape.constant(eye.clone()),
            wk: tape.constant(wk),
            wv: tape.constant(eye),
            raw_lambda1: tape.constant(Tensor::scalar(initial_raw_lambda())),
            raw_lambda2: tape.constant(Tensor::scalar(initial_raw_lambda())),
        };
        // Keys depend only on the first feature, which both support tokens share.
        let s = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 4.0, 1.0, -2.0]).unwrap());
        let q = tape.constant(Tensor::new(vec![1, 2], vec![0.7, 0.1]).unwrap());
        let (q_hat, _) = reconstruct(q, s, &metric).unwrap();
        assert!(q_hat.value().max_abs_diff(&Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap()) < 1e-15);
    }

    #[test]
    fn hand_computed_two_token_case() {
        let tape = Tape::new();
        let col = |v: [f64; 2]| tape.constant(Tensor::new(vec![2, 1], v.to_vec()).unwrap());
        let metric = Metric {
            wq: col([1.0, 0.0]),
            wk: col([0.0, 1.0]),
            wv: col([1.0, 1.0]),
            raw_lambda1: tape.constant(Tensor::scalar(initial_raw_lambda())),
            raw_lambda2: tape.constant(Tensor::scalar(initial_raw_lambda())),
        };
        let q = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap());
        let s = tape.constant(Tensor::new(vec![2, 2], vec![0.5, 1.0, 2.0, -1.0]).unwrap());
        let (q_hat, s_hat) = reconstruct(q, s, &metric).unwrap();
        // Projections: qQ = [1,-1], qK = [2,0.5], qV = [3,-0.5]; sQ = [0.5,2], sK = [1,-1], sV = [1.5,1].
        let row = |x: f64, keys: [f64; 2], vals: [f64; 2]| {
            let (a, b) = ((x * keys[0]).exp(), (x * keys[1]).exp());
            (a * vals[0] + b * vals[1]) / (a + b)
        };
        let expect_q = [row(1.0, [1.0, -1.0], [1.5, 1.0]), row(-1.0, [1.0, -1.0], [1.5, 1.0])];
        let expect_s = [row(0.5, [2.0, 0.5], [3.0, -0.5]), row(2.0, [2.0, 0.5], [3.0, -0.5])];
        for i in 0..2 {
            assert!((q_hat.value().data()[i] - expect_q[i]).abs() <= 1e-12);
            assert!((s_hat.value().data()[i] - expect_s[i]).abs() <= 1e-12);
        }
        let d = class_dissimilarity(q, s, &metric).unwrap().item();
        let e1: f64 = [3.0, -0.5].iter().zip(expect_q).map(|(v, h)| (v - h) * (v - h)).sum();
        let e2: f64 = [1.5, 1.0].iter().zip(expect_s).map(|(v, h)| (v - h) * (v - h)).sum();
        assert!((d - 0.5 * (e1 + e2)).abs() <= 1e-12);
    }

    #[test]
    fn batched_distances_match_per_pair() {
        let (c, d, way, shot, m, nq) = (3, 2, 3, 2, 4, 5);
        let params = metric_store(c, d, 4);
        let tape = Tape::new();
        let vars = params.vars(&tape, |_| true);
        let metric = Metric::from_vars(&vars).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let support = tape.constant(Tensor::randn(&[way * shot * m, c], 1.0, &mut rng));
        let query = tape.constant(Tensor::randn(&[nq * m, c], 1.0, &mut rng));
        let dist = episode_distances(support, query, way, m, &metric).unwrap();
        assert_eq!(dist.shape(), vec![nq, way]);
        for i in 0..nq {
            let q = ops::slice(query, 0, i * m, m).unwrap();
            for r in 0..way {
                let s = ops::slice(support, 0, r * shot * m, shot * m).unwrap();
                let expect = class_dissimilarity(q, s, &metric).unwrap().item();
                assert!((dist.value().get(&[i, r]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tied_distances_give_uniform_probabilities() {
        let params = metric_store(2, 2, 6);
        let tape = Tape::new();
        let vars = params.vars(&tape, |_| true);
        let metric = Metric::from_vars(&vars).unwrap();
        let q = tape.constant(Tensor::new(vec![1, 2], vec![0.1, 0.2]).unwrap());
        let s = tape.constant(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
        let p = classify(q, &[s; 5], &metric).unwrap();
        assert!(p.value().data().iter().all(|&x| (x - 0.2).abs() < 1e-15));
        assert!(matches!(classify(q, &[s], &metric), Err(Error::Episode(_))));
    }

    #[test]
    fn softmax_of_separated_distances() {
        let tape = Tape::new();
        let d = tape.constant(Tensor::new(vec![1, 5], vec![0.0, 10.0, 10.0, 10.0, 10.0]).unwrap());
        let p = ops::softmax(logits_from_distances(d), 1).unwrap();
        let p0 = 1.0 / (1.0 + 4.0 * (-10.0f64).exp());
        assert!((p.value().data()[0] - p0).abs() < 1e-15);
        assert!((p0 - 0.9998).abs() < 5e-5);
    }
}
