use crate::autograd::Var;
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

// Grid values are allowed to exceed [-1,1] by this much before they count as
// out of contract; interpolated lattices can land an ulp outside.
const GRID_SLACK: f64 = 1e-9;

/// Uniform lattice over `[-1,1]^2` as a `[1,2,h,w]` grid; channel 0 is the
/// horizontal coordinate, channel 1 the vertical one. A unit extent maps to 0.
pub fn identity_grid(h: usize, w: usize) -> Tensor {
    let coord = |i: usize, n: usize| if n == 1 { 0.0 } else { -1.0 + 2.0 * i as f64 / (n - 1) as f64 };
    let mut data = Vec::with_capacity(2 * h * w);
    for _ in 0..h {
        for x in 0..w {
            data.push(coord(x, w));
        }
    }
    for y in 0..h {
        for _ in 0..w {
            data.push(coord(y, h));
        }
    }
    Tensor::from_parts(vec![1, 2, h, w], data)
}

struct Tap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    wx: f64,
    wy: f64,
}

fn tap(gx: f64, gy: f64, h: usize, w: usize) -> Tap {
    let px = ((gx + 1.0) * 0.5 * (w - 1) as f64).clamp(0.0, (w - 1) as f64);
    let py = ((gy + 1.0) * 0.5 * (h - 1) as f64).clamp(0.0, (h - 1) as f64);
    let x0 = (px.floor() as usize).min(w - 1);
    let y0 = (py.floor() as usize).min(h - 1);
    Tap { x0, x1: (x0 + 1).min(w - 1), y0, y1: (y0 + 1).min(h - 1), wx: px - x0 as f64, wy: py - y0 as f64 }
}

fn check_sample(x: &[usize], grid: &[usize]) -> Result<()> {
    if x.len() != 4 || grid.len() != 4 || grid[1] != 2 {
        return Err(dim_err!("grid sample expects [B,C,H,W] and [B,2,Ho,Wo], got {:?} and {:?}", x, grid));
    }
    if grid[0] != x[0] && grid[0] != 1 {
        return Err(dim_err!("grid batch {} vs input batch {}", grid[0], x[0]));
    }
    Ok(())
}

/// Bilinear sampling on plain tensors (align-corners convention).
pub fn grid_sample_forward(x: &Tensor, grid: &Tensor) -> Result<Tensor> {
    check_sample(x.shape(), grid.shape())?;
    if let Some(bad) = grid.data().iter().find(|v| !(v.abs() <= 1.0 + GRID_SLACK)) {
        return Err(Error::Contract(format!("grid value {bad} outside [-1,1]")));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (grid.shape()[2], grid.shape()[3]);
    let plane = ho * wo;
    let mut out = vec![0.0; b * c * plane];
    for bi in 0..b {
        let gb = if grid.shape()[0] == 1 { 0 } else { bi };
        let gd = &grid.data()[gb * 2 * plane..(gb + 1) * 2 * plane];
        for p in 0..plane {
            let t = tap(gd[p], gd[plane + p], h, w);
            for ci in 0..c {
                let src = &x.data()[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                let top = (1.0 - t.wx) * src[t.y0 * w + t.x0] + t.wx * src[t.y0 * w + t.x1];
                let bot = (1.0 - t.wx) * src[t.y1 * w + t.x0] + t.wx * src[t.y1 * w + t.x1];
                out[(bi * c + ci) * plane + p] = (1.0 - t.wy) * top + t.wy * bot;
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, c, ho, wo], out))
}

/// Bilinear resampling of `input` `[B,C,H,W]` at the normalized locations of
/// `grid` `[B,2,Ho,Wo]` (or `[1,2,Ho,Wo]`, shared across the batch).
///
/// Coordinates follow the align-corners convention: -1 is the center of the
/// first pixel and +1 the center of the last. Differentiable with respect to
/// both the input and the grid. Grid values outside `[-1,1]` are rejected.
pub fn bilinear_grid_sample<'t>(input: Var<'t>, grid: Var<'t>) -> Result<Var<'t>> {
    let (xv, gv) = (input.value(), grid.value());
    let out = grid_sample_forward(&xv, &gv)?;
    Ok(input.tape().push(
        out,
        &[input, grid],
        Box::new(|g, inputs, _| {
            let (x, grid) = (inputs[0], inputs[1]);
            let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (ho, wo) = (grid.shape()[2], grid.shape()[3]);
            let plane = ho * wo;
            let shared = grid.shape()[0] == 1;
            let mut dx = vec![0.0; x.numel()];
            let mut dgrid = vec![0.0; grid.numel()];
            let (sx, sy) = (0.5 * (w - 1) as f64, 0.5 * (h - 1) as f64);
            for bi in 0..b {
                let gb = if shared { 0 } else { bi };
                let gd = &grid.data()[gb * 2 * plane..(gb + 1) * 2 * plane];
                for p in 0..plane {
                    let t = tap(gd[p], gd[plane + p], h, w);
                    let (mut dpx, mut dpy) = (0.0, 0.0);
                    for ci in 0..c {
                        let base = (bi * c + ci) * h * w;
                        let go = g.data()[(bi * c + ci) * plane + p];
                        let src = &x.data()[base..base + h * w];
                        let (v00, v01) = (src[t.y0 * w + t.x0], src[t.y0 * w + t.x1]);
                        let (v10, v11) = (src[t.y1 * w + t.x0], src[t.y1 * w + t.x1]);
                        let d = &mut dx[base..base + h * w];
                        d[t.y0 * w + t.x0] += go * (1.0 - t.wy) * (1.0 - t.wx);
                        d[t.y0 * w + t.x1] += go * (1.0 - t.wy) * t.wx;
                        d[t.y1 * w + t.x0] += go * t.wy * (1.0 - t.wx);
                        d[t.y1 * w + t.x1] += go * t.wy * t.wx;
                        dpx += go * ((1.0 - t.wy) * (v01 - v00) + t.wy * (v11 - v10));
                        dpy += go * ((1.0 - t.wx) * (v10 - v00) + t.wx * (v11 - v01));
                    }
                    dgrid[gb * 2 * plane + p] += dpx * sx;
                    dgrid[gb * 2 * plane + plane + p] += dpy * sy;
                }
            }
            vec![
                Some(Tensor::from_parts(x.shape().to_vec(), dx)),
                Some(Tensor::from_parts(grid.shape().to_vec(), dgrid)),
            ]
        }),
    ))
}

/// Align-corners bilinear resize of `[B,C,h,w]` to `[B,C,out_h,out_w]`.
pub fn upsample_bilinear(input: Var<'_>, out_h: usize, out_w: usize) -> Result<Var<'_>> {
    let grid = input.tape().constant(identity_grid(out_h, out_w));
    bilinear_grid_sample(input, grid)
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
pub fn max_pool2(input: Var<'_>) -> Result<Var<'_>> {
    let xv = input.value();
    let s = xv.shape();
    if s.len() != 4 || s[2] < 2 || s[3] < 2 {
        return Err(dim_err!("max_pool2 expects [B,C,H>=2,W>=2], got {:?}", s));
    }
    let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(bc * ho * wo);
    let mut argmax = Vec::with_capacity(bc * ho * wo);
    let d = xv.data();
    for p in 0..bc {
        for y in 0..ho {
            for x in 0..wo {
                let mut best = p * h * w + 2 * y * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = p * h * w + (2 * y + dy) * w + 2 * x + dx;
                    if d[i] > d[best] {
                        best = i;
                    }
                }
                out.push(d[best]);
                argmax.push(best);
            }
        }
    }
    Ok(input.tape().push(
        Tensor::from_parts(vec![s[0], s[1], ho, wo], out),
        &[input],
        Box::new(move |g, inputs, _| {
            let mut dx = Tensor::zeros(inputs[0].shape());
            let dd = dx.data_mut();
            for (&i, &gv) in argmax.iter().zip(g.data()) {
                dd[i] += gv;
            }
            vec![Some(dx)]
        }),
    ))
}
