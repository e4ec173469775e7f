use crate::autograd::Var;
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product())
}

/// Max-shifted softmax along `axis` on a plain tensor.
pub fn softmax_forward(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(dim_err!("softmax axis {} of {:?}", axis, x.shape()));
    }
    let (outer, len, inner) = split(x.shape(), axis);
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| d[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (d[idx(k)] - max).exp();
                out[idx(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[idx(k)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Softmax along `axis`.
pub fn softmax(x: Var<'_>, axis: usize) -> Result<Var<'_>> {
    let y = softmax_forward(&x.value(), axis)?;
    let (outer, len, inner) = split(y.shape(), axis);
    Ok(x.tape().push(
        y,
        &[x],
        Box::new(move |g, _, y| {
            let (gd, yd) = (g.data(), y.data());
            let mut dx = vec![0.0; gd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * len + k) * inner + i;
                    let dot: f64 = (0..len).map(|k| gd[idx(k)] * yd[idx(k)]).sum();
                    for k in 0..len {
                        dx[idx(k)] = yd[idx(k)] * (gd[idx(k)] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(y.shape().to_vec(), dx))]
        }),
    ))
}

/// Mean cross-entropy of row-wise softmax(`logits` `[n,c]`) against class indices.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let lv = logits.value();
    let s = lv.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(dim_err!("cross_entropy logits {:?} for {} labels", s, labels.len()));
    }
    let (n, c) = (s[0], s[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(dim_err!("label {} for {} classes", bad, c));
    }
    let probs = softmax_forward(&lv, 1)?;
    let loss = labels
        .iter()
        .enumerate()
        .map(|(r, &l)| {
            let row = &lv.data()[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[l]
        })
        .sum::<f64>()
        / n as f64;
    let labels = labels.to_vec();
    Ok(logits.tape().push(
        Tensor::scalar(loss),
        &[logits],
        Box::new(move |g, _, _| {
            let k = g.item() / n as f64;
            let mut dx = probs.clone();
            for (r, &l) in labels.iter().enumerate() {
                dx.data_mut()[r * c + l] -= 1.0;
            }
            dx.data_mut().iter_mut().for_each(|v| *v *= k);
            vec![Some(dx)]
        }),
    ))
}
