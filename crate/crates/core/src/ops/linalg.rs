use super::conv::gemm;
use crate::autograd::Var;
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// `[m,k] x [k,n] -> [m,n]`.
pub fn matmul<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let (av, bv) = (a.value(), b.value());
    let (sa, sb) = (av.shape(), bv.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(dim_err!("matmul {:?} x {:?}", sa, sb));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, av.data(), (k as isize, 1), bv.data(), (n as isize, 1), &mut out, false);
    Ok(a.tape().push(
        Tensor::from_parts(vec![m, n], out),
        &[a, b],
        Box::new(move |g, inputs, _| {
            let (a, b) = (inputs[0], inputs[1]);
            // dA = G B^T, dB = A^T G
            let mut da = vec![0.0; m * k];
            gemm(m, n, k, g.data(), (n as isize, 1), b.data(), (1, n as isize), &mut da, false);
            let mut db = vec![0.0; k * n];
            gemm(k, m, n, a.data(), (1, k as isize), g.data(), (n as isize, 1), &mut db, false);
            vec![Some(Tensor::from_parts(vec![m, k], da)), Some(Tensor::from_parts(vec![k, n], db))]
        }),
    ))
}

/// Batched product of `[G,m,k]` and `[G,k,n]`; `trans_a` reads `a` as `[G,k,m]`, `trans_b` reads `b` as `[G,n,k]`.
pub fn batched_matmul<'t>(a: Var<'t>, b: Var<'t>, trans_a: bool, trans_b: bool) -> Result<Var<'t>> {
    let (av, bv) = (a.value(), b.value());
    let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
        return Err(dim_err!("batched_matmul {:?} x {:?}", sa, sb));
    }
    let g = sa[0];
    let (m, k) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
    let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
    if k != kb {
        return Err(dim_err!("batched_matmul inner extents {:?} x {:?}", sa, sb));
    }
    let sta: (isize, isize) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let stb: (isize, isize) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let swap = |s: (isize, isize)| (s.1, s.0);
    let mut out = vec![0.0; g * m * n];
    for i in 0..g {
        let (ai, bi) = (&av.data()[i * m * k..(i + 1) * m * k], &bv.data()[i * k * n..(i + 1) * k * n]);
        gemm(m, k, n, ai, sta, bi, stb, &mut out[i * m * n..(i + 1) * m * n], false);
    }
    Ok(a.tape().push(
        Tensor::from_parts(vec![g, m, n], out),
        &[a, b],
        Box::new(move |grad, inputs, _| {
            let (a, b) = (inputs[0], inputs[1]);
            let mut da = vec![0.0; g * m * k];
            let mut db = vec![0.0; g * k * n];
            for i in 0..g {
                let gi = &grad.data()[i * m * n..(i + 1) * m * n];
                let ai = &a.data()[i * m * k..(i + 1) * m * k];
                let bi = &b.data()[i * k * n..(i + 1) * k * n];
                let dai = &mut da[i * m * k..(i + 1) * m * k];
                if trans_a {
                    gemm(k, n, m, bi, stb, gi, (1, n as isize), dai, false);
                } else {
                    gemm(m, n, k, gi, (n as isize, 1), bi, swap(stb), dai, false);
                }
                let dbi = &mut db[i * k * n..(i + 1) * k * n];
                if trans_b {
                    gemm(n, m, k, gi, (1, n as isize), ai, sta, dbi, false);
                } else {
                    gemm(k, m, n, ai, swap(sta), gi, (n as isize, 1), dbi, false);
                }
            }
            vec![Some(Tensor::from_parts(a.shape().to_vec(), da)), Some(Tensor::from_parts(b.shape().to_vec(), db))]
        }),
    ))
}

fn transpose_data(d: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    out
}

pub fn transpose(a: Var<'_>) -> Result<Var<'_>> {
    let av = a.value();
    let s = av.shape();
    if s.len() != 2 {
        return Err(dim_err!("transpose expects a matrix, got {:?}", s));
    }
    let (m, n) = (s[0], s[1]);
    Ok(a.tape().push(
        Tensor::from_parts(vec![n, m], transpose_data(av.data(), m, n)),
        &[a],
        Box::new(move |g, _, _| vec![Some(Tensor::from_parts(vec![m, n], transpose_data(g.data(), n, m)))]),
    ))
}

/// Flattens `[B,C,h,w]` feature maps into `[B*h*w, C]` token rows; tokens of
/// one sample are contiguous and in row-major (h,w) order.
pub fn to_tokens(x: Var<'_>) -> Result<Var<'_>> {
    let xv = x.value();
    let s = xv.shape();
    if s.len() != 4 {
        return Err(dim_err!("to_tokens expects [B,C,h,w], got {:?}", s));
    }
    let (b, c, m) = (s[0], s[1], s[2] * s[3]);
    let mut out = vec![0.0; xv.numel()];
    for bi in 0..b {
        let src = &xv.data()[bi * c * m..(bi + 1) * c * m];
        out[bi * c * m..(bi + 1) * c * m].copy_from_slice(&transpose_data(src, c, m));
    }
    let shape = s.to_vec();
    Ok(x.tape().push(
        Tensor::from_parts(vec![b * m, c], out),
        &[x],
        Box::new(move |g, _, _| {
            let mut dx = vec![0.0; g.numel()];
            for bi in 0..b {
                let src = &g.data()[bi * c * m..(bi + 1) * c * m];
                dx[bi * c * m..(bi + 1) * c * m].copy_from_slice(&transpose_data(src, m, c));
            }
            vec![Some(Tensor::from_parts(shape.clone(), dx))]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    #[test]
    fn matmul_small() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let b = tape.constant(Tensor::new(vec![3, 1], vec![1.0, 0.0, -1.0]).unwrap());
        assert_eq!(matmul(a, b).unwrap().value().data(), &[-2.0, -2.0]);
        assert_eq!(transpose(a).unwrap().value().data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn tokens_are_row_major_positions() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let t = to_tokens(x).unwrap();
        assert_eq!(t.shape(), vec![4, 1]);
        assert_eq!(t.value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let y = tape.constant(Tensor::new(vec![1, 2, 1, 1], vec![5.0, 6.0]).unwrap());
        let t = to_tokens(y).unwrap();
        assert_eq!(t.shape(), vec![1, 2]);
    }

    #[test]
    fn batched_matmul_matches_loops() {
        let a = Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.37).sin());
        let b = Tensor::from_fn(&[2, 4, 5], |i| (i as f64 * 0.91).cos());
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let stored_a = if ta { permute_last(&a) } else { a.clone() };
            let stored_b = if tb { permute_last(&b) } else { b.clone() };
            let f = crate::gradcheck::scalar_fn(move |_, v| {
                let y = batched_matmul(v[0], v[1], ta, tb)?;
                Ok(crate::ops::sum(crate::ops::mul(y, y)?))
            });
            let tape = Tape::new();
            let y = batched_matmul(tape.constant(stored_a.clone()), tape.constant(stored_b.clone()), ta, tb).unwrap();
            for g in 0..2 {
                for i in 0..3 {
                    for j in 0..5 {
                        let e: f64 = (0..4).map(|l| a.get(&[g, i, l]) * b.get(&[g, l, j])).sum();
                        assert!((y.value().get(&[g, i, j]) - e).abs() < 1e-13);
                    }
                }
            }
            let report = crate::gradcheck::finite_diff_check(&f, &[stored_a, stored_b], 1e-5).unwrap();
            assert!(report.passes(1e-6), "{ta} {tb} {report:?}");
        }
    }

    fn permute_last(x: &Tensor) -> Tensor {
        let s = x.shape();
        Tensor::from_fn(&[s[0], s[2], s[1]], |flat| {
            let (g, rest) = (flat / (s[1] * s[2]), flat % (s[1] * s[2]));
            let (j, i) = (rest / s[1], rest % s[1]);
            x.get(&[g, i, j])
        })
    }
}
