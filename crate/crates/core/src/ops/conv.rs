use crate::autograd::Var;
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// `c[m,n] += a[m,k] * b[k,n]` with explicit strides, all row-major unless transposed by stride.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: callers pass slices covering every strided index touched for the given extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output columns `lo..hi` whose source column `x + dx` lies inside `0..w`.
fn valid_span(w: isize, dx: isize) -> (usize, usize) {
    let lo = (-dx).clamp(0, w) as usize;
    let hi = (w - dx).clamp(0, w) as usize;
    (lo, hi)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.h * self.w
    }

    /// Unfolds one zero-padded sample into `[C*kh*kw, H*W]`.
    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let (h, w, kh, kw) = (self.h as isize, self.w as isize, self.kh, self.kw);
        let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
        let hw = self.cols();
        for c in 0..self.c_in {
            let plane = &x[c * hw..(c + 1) * hw];
            for i in 0..kh {
                for j in 0..kw {
                    let row = (c * kh + i) * kw + j;
                    let dst = &mut col[row * hw..(row + 1) * hw];
                    let dy = i as isize - ph;
                    let dx = j as isize - pw;
                    for y in 0..h {
                        let sy = y + dy;
                        let line = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                        if sy < 0 || sy >= h {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[(sy * w) as usize..((sy + 1) * w) as usize];
                        let (lo, hi) = valid_span(w, dx);
                        line[..lo].fill(0.0);
                        line[hi.max(lo)..].fill(0.0);
                        if hi > lo {
                            line[lo..hi].copy_from_slice(&src[(lo as isize + dx) as usize..(hi as isize + dx) as usize]);
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters columns back onto the input plane.
    fn col2im(&self, col: &[f64], x: &mut [f64]) {
        let (h, w, kh, kw) = (self.h as isize, self.w as isize, self.kh, self.kw);
        let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
        let hw = self.cols();
        for c in 0..self.c_in {
            let plane = &mut x[c * hw..(c + 1) * hw];
            for i in 0..kh {
                for j in 0..kw {
                    let row = (c * kh + i) * kw + j;
                    let src = &col[row * hw..(row + 1) * hw];
                    let dy = i as isize - ph;
                    let dx = j as isize - pw;
                    for y in 0..h {
                        let sy = y + dy;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        let line = &src[(y * w) as usize..((y + 1) * w) as usize];
                        let dst = &mut plane[(sy * w) as usize..((sy + 1) * w) as usize];
                        let (lo, hi) = valid_span(w, dx);
                        if hi > lo {
                            let dst = &mut dst[(lo as isize + dx) as usize..(hi as isize + dx) as usize];
                            for (d, &v) in dst.iter_mut().zip(&line[lo..hi]) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_conv(x: &[usize], k: &[usize], bias: Option<&[usize]>) -> Result<(usize, usize, ConvGeom)> {
    if x.len() != 4 || k.len() != 4 {
        return Err(dim_err!("conv2d expects [B,C,H,W] input and [O,C,kh,kw] kernel, got {:?} and {:?}", x, k));
    }
    if k[2] % 2 == 0 || k[3] % 2 == 0 {
        return Err(Error::Config(format!("conv2d kernel extent {}x{} must be odd", k[2], k[3])));
    }
    if k[1] != x[1] {
        return Err(dim_err!("kernel expects {} input channels, input has {}", k[1], x[1]));
    }
    if let Some(b) = bias {
        if b != [k[0]] {
            return Err(dim_err!("bias shape {:?} for {} output channels", b, k[0]));
        }
    }
    Ok((x[0], k[0], ConvGeom { c_in: x[1], h: x[2], w: x[3], kh: k[2], kw: k[3] }))
}

/// Same-padded stride-1 convolution on plain tensors (no tape).
pub fn conv2d_forward(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (batch, c_out, geom) = check_conv(x.shape(), kernel.shape(), bias.map(|b| b.shape()))?;
    let (rows, hw) = (geom.rows(), geom.cols());
    let in_stride = geom.c_in * hw;
    let mut out = vec![0.0; batch * c_out * hw];
    let mut col = vec![0.0; rows * hw];
    for b in 0..batch {
        geom.im2col(&x.data()[b * in_stride..(b + 1) * in_stride], &mut col);
        let dst = &mut out[b * c_out * hw..(b + 1) * c_out * hw];
        if let Some(bias) = bias {
            for (o, &bv) in bias.data().iter().enumerate() {
                dst[o * hw..(o + 1) * hw].fill(bv);
            }
        }
        gemm(
            c_out,
            rows,
            hw,
            kernel.data(),
            (rows as isize, 1),
            &col,
            (hw as isize, 1),
            dst,
            bias.is_some(),
        );
    }
    Ok(Tensor::from_parts(vec![batch, c_out, geom.h, geom.w], out))
}

/// Same-padded, stride-1 2-D convolution.
///
/// `input` is `[B,C_in,H,W]` (or `[C_in,H,W]`, returning rank 3), `kernel` is
/// `[C_out,C_in,k_h,k_w]` with odd extents and `bias` is `[C_out]`.
pub fn conv2d<'t>(input: Var<'t>, kernel: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
    let xv = input.value();
    if xv.rank() == 3 {
        let s = xv.shape();
        let batched = super::reshape(input, &[1, s[0], s[1], s[2]])?;
        let y = conv2d(batched, kernel, bias)?;
        let ys = y.shape();
        return super::reshape(y, &ys[1..]);
    }
    let kv = kernel.value();
    let bv = bias.map(|b| b.value());
    let out = conv2d_forward(&xv, &kv, bv.as_deref())?;
    let (batch, c_out, geom) = check_conv(xv.shape(), kv.shape(), None)?;
    let mut parents = vec![input, kernel];
    parents.extend(bias);
    Ok(input.tape().push(
        out,
        &parents,
        Box::new(move |g, inputs, _| {
            let (x, k) = (inputs[0], inputs[1]);
            let (rows, hw) = (geom.rows(), geom.cols());
            let in_stride = geom.c_in * hw;
            let mut dx = vec![0.0; x.numel()];
            let mut dk = vec![0.0; k.numel()];
            let mut col = vec![0.0; rows * hw];
            let mut dcol = vec![0.0; rows * hw];
            for b in 0..batch {
                let gb = &g.data()[b * c_out * hw..(b + 1) * c_out * hw];
                geom.im2col(&x.data()[b * in_stride..(b + 1) * in_stride], &mut col);
                // dK[o, r] += sum_p g[o,p] * col[r,p]
                gemm(c_out, hw, rows, gb, (hw as isize, 1), &col, (1, hw as isize), &mut dk, true);
                // dcol[r, p] = sum_o K[o, r] * g[o, p]
                gemm(rows, c_out, hw, k.data(), (1, rows as isize), gb, (hw as isize, 1), &mut dcol, false);
                geom.col2im(&dcol, &mut dx[b * in_stride..(b + 1) * in_stride]);
            }
            let mut grads = vec![
                Some(Tensor::from_parts(x.shape().to_vec(), dx)),
                Some(Tensor::from_parts(k.shape().to_vec(), dk)),
            ];
            if inputs.len() == 3 {
                let mut db = vec![0.0; c_out];
                for b in 0..batch {
                    for (o, acc) in db.iter_mut().enumerate() {
                        let s = (b * c_out + o) * hw;
                        *acc += g.data()[s..s + hw].iter().sum::<f64>();
                    }
                }
                grads.push(Some(Tensor::from_parts(vec![c_out], db)));
            }
            grads
        }),
    ))
}

/// Same-padded 1-D convolution: `[B,C_in,L]` with kernel `[C_out,C_in,k]`.
pub fn conv1d<'t>(input: Var<'t>, kernel: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
    let (xs, ks) = (input.shape(), kernel.shape());
    if xs.len() != 3 || ks.len() != 3 {
        return Err(dim_err!("conv1d expects [B,C,L] and [O,C,k], got {:?} and {:?}", xs, ks));
    }
    let x4 = super::reshape(input, &[xs[0], xs[1], xs[2], 1])?;
    let k4 = super::reshape(kernel, &[ks[0], ks[1], ks[2], 1])?;
    let y = conv2d(x4, k4, bias)?;
    super::reshape(y, &[xs[0], ks[0], xs[2]])
}
