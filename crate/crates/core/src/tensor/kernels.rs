//! Raw numeric kernels behind the autodiff graph.
//!
//! Every parallel loop here owns a disjoint output slice and accumulates in
//! a fixed sequential order, so results are bit-identical regardless of the
//! rayon thread count.

use rayon::prelude::*;

use super::{dims5, Element, Tensor};
use crate::error::{Error, Result};

/// Below this output size the rayon spawn/join overhead outweighs the
/// kernel work; run the chunk loop inline instead.
const PAR_MIN_ELEMS: usize = 1 << 15;

/// Apply `body(chunk_index, chunk)` over equal chunks, in parallel only
/// when the buffer is large enough to amortize scheduling.
fn for_chunks<T: Send, F>(data: &mut [T], chunk: usize, body: F)
where
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if data.len() < PAR_MIN_ELEMS {
        for (i, c) in data.chunks_mut(chunk).enumerate() {
            body(i, c);
        }
    } else {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| body(i, c));
    }
}

/// Output extent of one convolution axis: `floor((d + 2p - k)/s) + 1`.
fn conv_out_dim(d: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    if d + 2 * p < k {
        return Err(Error::Shape(format!(
            "kernel extent {k} exceeds padded input extent {}",
            d + 2 * p
        )));
    }
    let out = (d + 2 * p - k) / s + 1;
    if out == 0 {
        return Err(Error::Shape(
            "non-positive convolution output dimension".into(),
        ));
    }
    Ok(out)
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `k`:
/// exactly the `o` with `0 <= o*s + k - p < d`.
#[inline]
fn out_range(d: usize, out: usize, k: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    let hi_in = d + p;
    let hi = if hi_in > k {
        (((hi_in - k - 1) / s) + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

pub fn conv3d_out_shape(
    input: &[usize],
    weight: &[usize],
    spec: &Conv3dSpec,
) -> Result<[usize; 5]> {
    let [n, cin, d, h, w] = dims5(input)?;
    let [cout, wcin, kd, kh, kw] = dims5(weight)?;
    if cin != wcin {
        return Err(Error::Shape(format!(
            "conv3d input has {cin} channels but weight expects {wcin}"
        )));
    }
    let od = conv_out_dim(d, kd, spec.stride[0], spec.padding[0])?;
    let oh = conv_out_dim(h, kh, spec.stride[1], spec.padding[1])?;
    let ow = conv_out_dim(w, kw, spec.stride[2], spec.padding[2])?;
    Ok([n, cout, od, oh, ow])
}

pub fn conv3d_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &Conv3dSpec,
) -> Result<Tensor<T>> {
    let out_shape = conv3d_out_shape(input.shape(), weight.shape(), spec)?;
    let [_n, cin, d, h, w] = dims5(input.shape())?;
    let [cout, _, kd, kh, kw] = dims5(weight.shape())?;
    let [_, _, od, oh, ow] = out_shape;
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::Shape(format!(
                "conv3d bias shape {:?} does not match {cout} output channels",
                b.shape()
            )));
        }
    }
    let [sd, sh, sw] = spec.stride;
    let [pd, ph, pw] = spec.padding;
    let in_plane = h * w;
    let in_vol = d * in_plane;
    let kvol = kd * kh * kw;

    let x = input.data();
    let wt = weight.data();
    let mut out = Tensor::zeros(&out_shape);

    // One task per output (n, co, od) plane.
    for_chunks(out.data_mut(), oh * ow, |plane, out_plane| {
        let zo = plane % od;
        let co = (plane / od) % cout;
        let ni = plane / (od * cout);
        if let Some(b) = bias {
            out_plane.fill(b.data()[co]);
        }
        for ci in 0..cin {
            let x_base = (ni * cin + ci) * in_vol;
            let w_base = (co * cin + ci) * kvol;
            for kz in 0..kd {
                let iz = zo * sd + kz;
                if iz < pd || iz - pd >= d {
                    continue;
                }
                let iz = iz - pd;
                for ky in 0..kh {
                    let (ylo, yhi) = out_range(h, oh, ky, sh, ph);
                    for kx in 0..kw {
                        let wv = wt[w_base + (kz * kh + ky) * kw + kx];
                        let (xlo, xhi) = out_range(w, ow, kx, sw, pw);
                        if xlo >= xhi {
                            continue;
                        }
                        for yo in ylo..yhi {
                            let iy = yo * sh + ky - ph;
                            let row = x_base + iz * in_plane + iy * w;
                            let orow = yo * ow;
                            if sw == 1 {
                                let ix0 = xlo + kx - pw;
                                let src = &x[row + ix0..row + ix0 + (xhi - xlo)];
                                let dst = &mut out_plane[orow + xlo..orow + xhi];
                                for (o, s) in dst.iter_mut().zip(src) {
                                    *o = *o + wv * *s;
                                }
                            } else {
                                for xo in xlo..xhi {
                                    let ix = xo * sw + kx - pw;
                                    out_plane[orow + xo] = out_plane[orow + xo] + wv * x[row + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Gradient w.r.t. the convolution input, computed as a gather so each
/// input element is written by exactly one task.
pub fn conv3d_backward_input<T: Element>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
    weight: &Tensor<T>,
    spec: &Conv3dSpec,
) -> Tensor<T> {
    let [_n, cin, d, h, w] = dims5(input_shape).expect("validated at forward");
    let [cout, _, kd, kh, kw] = dims5(weight.shape()).expect("validated at forward");
    let [_, _, od, oh, ow] = dims5(grad_out.shape()).expect("validated at forward");
    let [sd, sh, sw] = spec.stride;
    let [pd, ph, pw] = spec.padding;
    let out_plane_len = oh * ow;
    let out_vol = od * out_plane_len;
    let kvol = kd * kh * kw;

    let g = grad_out.data();
    let wt = weight.data();
    let mut grad_in = Tensor::zeros(input_shape);

    for_chunks(grad_in.data_mut(), h * w, |plane, gin_plane| {
        let iz = plane % d;
        let ci = (plane / d) % cin;
        let ni = plane / (d * cin);
        for co in 0..cout {
            let g_base = (ni * cout + co) * out_vol;
            let w_base = (co * cin + ci) * kvol;
            for kz in 0..kd {
                // output depth feeding input depth iz through offset kz
                let num = iz + pd;
                if num < kz || (num - kz) % sd != 0 {
                    continue;
                }
                let zo = (num - kz) / sd;
                if zo >= od {
                    continue;
                }
                for ky in 0..kh {
                    let (ylo, yhi) = out_range(h, oh, ky, sh, ph);
                    for kx in 0..kw {
                        let wv = wt[w_base + (kz * kh + ky) * kw + kx];
                        let (xlo, xhi) = out_range(w, ow, kx, sw, pw);
                        if xlo >= xhi {
                            continue;
                        }
                        for yo in ylo..yhi {
                            let iy = yo * sh + ky - ph;
                            let grow = g_base + zo * out_plane_len + yo * ow;
                            let irow = iy * w;
                            if sw == 1 {
                                let ix0 = xlo + kx - pw;
                                let src = &g[grow + xlo..grow + xhi];
                                let dst = &mut gin_plane[irow + ix0..irow + ix0 + (xhi - xlo)];
                                for (di, s) in dst.iter_mut().zip(src) {
                                    *di = *di + wv * *s;
                                }
                            } else {
                                for xo in xlo..xhi {
                                    let ix = xo * sw + kx - pw;
                                    gin_plane[irow + ix] = gin_plane[irow + ix] + wv * g[grow + xo];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    grad_in
}

pub fn conv3d_backward_weight<T: Element>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight_shape: &[usize],
    spec: &Conv3dSpec,
) -> Tensor<T> {
    let [n, cin, d, h, w] = dims5(input.shape()).expect("validated at forward");
    let [cout, _, kd, kh, kw] = dims5(weight_shape).expect("validated at forward");
    let [_, _, od, oh, ow] = dims5(grad_out.shape()).expect("validated at forward");
    let [sd, sh, sw] = spec.stride;
    let [pd, ph, pw] = spec.padding;
    let in_plane = h * w;
    let in_vol = d * in_plane;
    let out_plane_len = oh * ow;
    let out_vol = od * out_plane_len;
    let kvol = kd * kh * kw;

    let g = grad_out.data();
    let x = input.data();
    let mut grad_w = Tensor::zeros(weight_shape);

    // One task per (co, ci) kernel slice; the work estimate is the output
    // volume each slice reduces over, not the tiny slice itself.
    let reduce_work = n * cout * out_vol;
    let run = |pair: usize, gw: &mut [T]| {
        let ci = pair % cin;
        let co = pair / cin;
        for kz in 0..kd {
            for ky in 0..kh {
                let (ylo, yhi) = out_range(h, oh, ky, sh, ph);
                for kx in 0..kw {
                    let (xlo, xhi) = out_range(w, ow, kx, sw, pw);
                    let mut acc = T::zero();
                    for ni in 0..n {
                        let g_base = (ni * cout + co) * out_vol;
                        let x_base = (ni * cin + ci) * in_vol;
                        for zo in 0..od {
                            let iz = zo * sd + kz;
                            if iz < pd || iz - pd >= d {
                                continue;
                            }
                            let iz = iz - pd;
                            for yo in ylo..yhi {
                                let iy = yo * sh + ky - ph;
                                let grow = g_base + zo * out_plane_len + yo * ow;
                                let xrow = x_base + iz * in_plane + iy * w;
                                if sw == 1 && xlo < xhi {
                                    let ix0 = xlo + kx - pw;
                                    let gs = &g[grow + xlo..grow + xhi];
                                    let xs = &x[xrow + ix0..xrow + ix0 + (xhi - xlo)];
                                    for (gv, xv) in gs.iter().zip(xs) {
                                        acc = acc + *gv * *xv;
                                    }
                                } else {
                                    for xo in xlo..xhi {
                                        let ix = xo * sw + kx - pw;
                                        acc = acc + g[grow + xo] * x[xrow + ix];
                                    }
                                }
                            }
                        }
                    }
                    gw[(kz * kh + ky) * kw + kx] = acc;
                }
            }
        }
    };
    if reduce_work < PAR_MIN_ELEMS {
        for (pair, gw) in grad_w.data_mut().chunks_mut(kvol).enumerate() {
            run(pair, gw);
        }
    } else {
        grad_w
            .data_mut()
            .par_chunks_mut(kvol)
            .enumerate()
            .for_each(|(pair, gw)| run(pair, gw));
    }
    grad_w
}

pub fn conv3d_backward_bias<T: Element>(grad_out: &Tensor<T>, cout: usize) -> Tensor<T> {
    let [n, _, od, oh, ow] = dims5(grad_out.shape()).expect("validated at forward");
    let vol = od * oh * ow;
    let g = grad_out.data();
    let mut grad_b = Tensor::zeros(&[cout]);
    for (co, gb) in grad_b.data_mut().iter_mut().enumerate() {
        let mut acc = T::zero();
        for ni in 0..n {
            let base = (ni * cout + co) * vol;
            for v in &g[base..base + vol] {
                acc = acc + *v;
            }
        }
        *gb = acc;
    }
    grad_b
}

/// 2x2x2 max pooling with stride 2. Returns the pooled tensor and the flat
/// argmax index (into the input) per output element; ties take the first
/// element in (dz, dy, dx) scan order.
pub fn maxpool2_forward<T: Element>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, d, h, w] = dims5(input.shape())?;
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "maxpool3d requires even spatial dims, got {d}x{h}x{w}"
        )));
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let x = input.data();
    let mut out = Tensor::zeros(&[n, c, od, oh, ow]);
    let mut argmax = vec![0usize; out.numel()];
    let out_vol = od * oh * ow;

    let run = |nc: usize, out_sl: &mut [T], arg_sl: &mut [usize]| {
        let base = nc * d * h * w;
        for zo in 0..od {
            for yo in 0..oh {
                for xo in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = base
                                    + (zo * 2 + dz) * h * w
                                    + (yo * 2 + dy) * w
                                    + (xo * 2 + dx);
                                if x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    let o = (zo * oh + yo) * ow + xo;
                    out_sl[o] = best;
                    arg_sl[o] = best_idx;
                }
            }
        }
    };
    if out.numel() < PAR_MIN_ELEMS {
        for (nc, (out_sl, arg_sl)) in out
            .data_mut()
            .chunks_mut(out_vol)
            .zip(argmax.chunks_mut(out_vol))
            .enumerate()
        {
            run(nc, out_sl, arg_sl);
        }
    } else {
        out.data_mut()
            .par_chunks_mut(out_vol)
            .zip(argmax.par_chunks_mut(out_vol))
            .enumerate()
            .for_each(|(nc, (out_sl, arg_sl))| run(nc, out_sl, arg_sl));
    }
    Ok((out, argmax))
}

pub fn maxpool2_backward<T: Element>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Tensor<T> {
    let mut grad_in = Tensor::zeros(input_shape);
    let gi = grad_in.data_mut();
    for (g, &idx) in grad_out.data().iter().zip(argmax.iter()) {
        gi[idx] = gi[idx] + *g;
    }
    grad_in
}

/// Per-axis sampling table for trilinear interpolation with the
/// align-corners=false convention: `s = (t + 0.5) * in/out - 0.5`, clamped.
fn resize_axis<T: Element>(in_dim: usize, out_dim: usize) -> Vec<(usize, usize, T)> {
    let scale = in_dim as f64 / out_dim as f64;
    (0..out_dim)
        .map(|t| {
            let s = ((t as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(in_dim - 1);
            let i1 = (i0 + 1).min(in_dim - 1);
            (i0, i1, T::from_f64(s - i0 as f64))
        })
        .collect()
}

pub fn resize3_forward<T: Element>(
    input: &Tensor<T>,
    out_spatial: [usize; 3],
) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = dims5(input.shape())?;
    let [od, oh, ow] = out_spatial;
    if od == 0 || oh == 0 || ow == 0 {
        return Err(Error::Shape("resize target must be positive".into()));
    }
    let tz = resize_axis::<T>(d, od);
    let ty = resize_axis::<T>(h, oh);
    let tx = resize_axis::<T>(w, ow);
    let x = input.data();
    let mut out = Tensor::zeros(&[n, c, od, oh, ow]);

    for_chunks(out.data_mut(), od * oh * ow, |nc, out_sl| {
        let base = nc * d * h * w;
        let mut o = 0usize;
        for &(z0, z1, fz) in &tz {
            let gz = T::one() - fz;
            for &(y0, y1, fy) in &ty {
                let gy = T::one() - fy;
                for &(x0, x1, fx) in &tx {
                    let gx = T::one() - fx;
                    let c00 = x[base + (z0 * h + y0) * w + x0] * gx
                        + x[base + (z0 * h + y0) * w + x1] * fx;
                    let c01 = x[base + (z0 * h + y1) * w + x0] * gx
                        + x[base + (z0 * h + y1) * w + x1] * fx;
                    let c10 = x[base + (z1 * h + y0) * w + x0] * gx
                        + x[base + (z1 * h + y0) * w + x1] * fx;
                    let c11 = x[base + (z1 * h + y1) * w + x0] * gx
                        + x[base + (z1 * h + y1) * w + x1] * fx;
                    out_sl[o] = (c00 * gy + c01 * fy) * gz + (c10 * gy + c11 * fy) * fz;
                    o += 1;
                }
            }
        }
    });
    Ok(out)
}

pub fn resize3_backward<T: Element>(grad_out: &Tensor<T>, input_shape: &[usize]) -> Tensor<T> {
    let [_, _, d, h, w] = dims5(input_shape).expect("validated at forward");
    let [_, _, od, oh, ow] = dims5(grad_out.shape()).expect("validated at forward");
    let tz = resize_axis::<T>(d, od);
    let ty = resize_axis::<T>(h, oh);
    let tx = resize_axis::<T>(w, ow);
    let g = grad_out.data();
    let mut grad_in = Tensor::zeros(input_shape);

    for_chunks(grad_in.data_mut(), d * h * w, |nc, gin_sl| {
        let base = nc * od * oh * ow;
        let mut o = base;
        for &(z0, z1, fz) in &tz {
            let gz = T::one() - fz;
            for &(y0, y1, fy) in &ty {
                let gy = T::one() - fy;
                for &(x0, x1, fx) in &tx {
                    let gx = T::one() - fx;
                    let gv = g[o];
                    o += 1;
                    gin_sl[(z0 * h + y0) * w + x0] =
                        gin_sl[(z0 * h + y0) * w + x0] + gv * gz * gy * gx;
                    gin_sl[(z0 * h + y0) * w + x1] =
                        gin_sl[(z0 * h + y0) * w + x1] + gv * gz * gy * fx;
                    gin_sl[(z0 * h + y1) * w + x0] =
                        gin_sl[(z0 * h + y1) * w + x0] + gv * gz * fy * gx;
                    gin_sl[(z0 * h + y1) * w + x1] =
                        gin_sl[(z0 * h + y1) * w + x1] + gv * gz * fy * fx;
                    gin_sl[(z1 * h + y0) * w + x0] =
                        gin_sl[(z1 * h + y0) * w + x0] + gv * fz * gy * gx;
                    gin_sl[(z1 * h + y0) * w + x1] =
                        gin_sl[(z1 * h + y0) * w + x1] + gv * fz * gy * fx;
                    gin_sl[(z1 * h + y1) * w + x0] =
                        gin_sl[(z1 * h + y1) * w + x0] + gv * fz * fy * gx;
                    gin_sl[(z1 * h + y1) * w + x1] =
                        gin_sl[(z1 * h + y1) * w + x1] + gv * fz * fy * fx;
                }
            }
        }
    });
    grad_in
}

/// Saved statistics from a group-norm forward pass, one entry per
/// (sample, group).
pub struct GroupNormStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn groupnorm_forward<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
    eps: f64,
) -> Result<(Tensor<T>, GroupNormStats<T>)> {
    let [n, c, d, h, w] = dims5(input.shape())?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::Shape(format!(
            "group count {groups} must divide {c} channels"
        )));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Shape(format!(
            "norm scale/offset shapes {:?}/{:?} do not match {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    let vol = d * h * w;
    let cg = c / groups;
    let group_len = cg * vol;
    let x = input.data();
    let mut out = Tensor::zeros(input.shape());
    let mut stats = GroupNormStats {
        mean: Vec::with_capacity(n * groups),
        inv_std: Vec::with_capacity(n * groups),
    };
    let m = T::from_f64(group_len as f64);
    let epsv = T::from_f64(eps);

    for ni in 0..n {
        for gi in 0..groups {
            let base = (ni * c + gi * cg) * vol;
            let xs = &x[base..base + group_len];
            let mean = xs.iter().copied().sum::<T>() / m;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
            let inv_std = T::one() / (var + epsv).sqrt();
            let os = &mut out.data_mut()[base..base + group_len];
            for ch in 0..cg {
                let gam = gamma.data()[gi * cg + ch];
                let bet = beta.data()[gi * cg + ch];
                for v in 0..vol {
                    let i = ch * vol + v;
                    os[i] = gam * (xs[i] - mean) * inv_std + bet;
                }
            }
            stats.mean.push(mean);
            stats.inv_std.push(inv_std);
        }
    }
    Ok((out, stats))
}

/// Returns (grad_input, grad_gamma, grad_beta).
pub fn groupnorm_backward<T: Element>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    groups: usize,
    stats: &GroupNormStats<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, d, h, w] = dims5(input.shape()).expect("validated at forward");
    let vol = d * h * w;
    let cg = c / groups;
    let group_len = cg * vol;
    let m = T::from_f64(group_len as f64);
    let x = input.data();
    let g = grad_out.data();
    let mut grad_in = Tensor::zeros(input.shape());
    let mut grad_gamma = Tensor::zeros(&[c]);
    let mut grad_beta = Tensor::zeros(&[c]);

    for ni in 0..n {
        for gi in 0..groups {
            let sidx = ni * groups + gi;
            let mean = stats.mean[sidx];
            let inv_std = stats.inv_std[sidx];
            let base = (ni * c + gi * cg) * vol;
            let xs = &x[base..base + group_len];
            let gs = &g[base..base + group_len];

            // dxhat = g * gamma_c; accumulate its mean and <dxhat, xhat>.
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for ch in 0..cg {
                let gam = gamma.data()[gi * cg + ch];
                for v in 0..vol {
                    let i = ch * vol + v;
                    let xhat = (xs[i] - mean) * inv_std;
                    let dxhat = gs[i] * gam;
                    sum_dxhat = sum_dxhat + dxhat;
                    sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                }
            }
            let mean_dxhat = sum_dxhat / m;
            let mean_dxhat_xhat = sum_dxhat_xhat / m;

            let gin = &mut grad_in.data_mut()[base..base + group_len];
            for ch in 0..cg {
                let gam = gamma.data()[gi * cg + ch];
                let mut dg = T::zero();
                let mut db = T::zero();
                for v in 0..vol {
                    let i = ch * vol + v;
                    let xhat = (xs[i] - mean) * inv_std;
                    let dxhat = gs[i] * gam;
                    gin[i] = inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    dg = dg + gs[i] * xhat;
                    db = db + gs[i];
                }
                let cidx = gi * cg + ch;
                grad_gamma.data_mut()[cidx] = grad_gamma.data_mut()[cidx] + dg;
                grad_beta.data_mut()[cidx] = grad_beta.data_mut()[cidx] + db;
            }
        }
    }
    (grad_in, grad_gamma, grad_beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(p: [usize; 3]) -> Conv3dSpec {
        Conv3dSpec {
            stride: [1, 1, 1],
            padding: p,
        }
    }

    #[test]
    fn conv_identity_1x1x1() {
        // per-channel identity weight, zero bias: output equals input
        let input =
            Tensor::<f64>::from_vec(&[1, 2, 2, 2, 2], (0..16).map(|i| i as f64).collect()).unwrap();
        let weight = Tensor::<f64>::from_vec(&[2, 2, 1, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let bias = Tensor::<f64>::zeros(&[2]);
        let out = conv3d_forward(&input, &weight, Some(&bias), &spec([0, 0, 0])).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn conv_ones_count_pattern() {
        // all-ones 3x3x3 input, one 1x3x3 ones kernel, padding (0,1,1):
        // each plane counts the in-bounds window: corner 4, edge 6, center 9.
        let input = Tensor::<f64>::full(&[1, 1, 3, 3, 3], 1.0);
        let weight = Tensor::<f64>::full(&[1, 1, 1, 3, 3], 1.0);
        let out = conv3d_forward(&input, &weight, None, &spec([0, 1, 1])).unwrap();
        assert_eq!(out.shape(), &[1, 1, 3, 3, 3]);
        let expect_plane = [4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0];
        for z in 0..3 {
            assert_eq!(&out.data()[z * 9..(z + 1) * 9], &expect_plane);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let input = Tensor::<f64>::zeros(&[1, 3, 2, 2, 2]);
        let weight = Tensor::<f64>::zeros(&[1, 2, 1, 1, 1]);
        assert!(conv3d_forward(&input, &weight, None, &spec([0, 0, 0])).is_err());
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let input = Tensor::<f64>::zeros(&[1, 1, 2, 2, 2]);
        let weight = Tensor::<f64>::zeros(&[1, 1, 3, 3, 3]);
        assert!(conv3d_forward(&input, &weight, None, &spec([0, 0, 0])).is_err());
    }

    #[test]
    fn maxpool_block_max_and_argmax() {
        let input =
            Tensor::<f64>::from_vec(&[1, 1, 2, 2, 2], (0..8).map(|i| i as f64).collect()).unwrap();
        let (out, argmax) = maxpool2_forward(&input).unwrap();
        assert_eq!(out.data(), &[7.0]);
        assert_eq!(argmax, &[7]);
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let input = Tensor::<f64>::zeros(&[1, 1, 3, 2, 2]);
        assert!(maxpool2_forward(&input).is_err());
    }

    #[test]
    fn maxpool_constant_input() {
        let input = Tensor::<f64>::full(&[1, 2, 4, 4, 4], 2.5);
        let (out, _) = maxpool2_forward(&input).unwrap();
        assert!(out.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn resize_identity_is_exact() {
        let data: Vec<f64> = (0..27).map(|i| (i as f64).sin()).collect();
        let input = Tensor::<f64>::from_vec(&[1, 1, 3, 3, 3], data).unwrap();
        let out = resize3_forward(&input, [3, 3, 3]).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn resize_constant_stays_constant() {
        let input = Tensor::<f64>::full(&[1, 1, 2, 2, 2], 3.25);
        for target in [[1, 1, 1], [4, 4, 4], [2, 6, 3]] {
            let out = resize3_forward(&input, target).unwrap();
            assert!(out.data().iter().all(|&v| (v - 3.25).abs() < 1e-12));
        }
    }

    #[test]
    fn resize_ramp_matches_coordinate_formula() {
        // ramp along x upsampled 2x: out[t] = clamp((t+0.5)*in/out - 0.5, 0, in-1)
        let w = 4;
        let input =
            Tensor::<f64>::from_vec(&[1, 1, 1, 1, w], (0..w).map(|i| i as f64).collect()).unwrap();
        let out = resize3_forward(&input, [1, 1, 2 * w]).unwrap();
        for t in 0..2 * w {
            let s = ((t as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, (w - 1) as f64);
            assert!(
                (out.data()[t] - s).abs() < 1e-12,
                "t={t}: got {}, want {s}",
                out.data()[t]
            );
        }
    }

    #[test]
    fn groupnorm_zero_input_stays_zero() {
        // all-zero input normalizes to zero; identity affine keeps it zero
        let input = Tensor::<f64>::zeros(&[1, 4, 2, 2, 2]);
        let gamma = Tensor::<f64>::full(&[4], 1.0);
        let beta = Tensor::<f64>::zeros(&[4]);
        let (out, _) = groupnorm_forward(&input, &gamma, &beta, 4, 1e-5).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn groupnorm_normalizes_each_group() {
        let data: Vec<f64> = (0..32).map(|i| i as f64 * 0.37 - 2.0).collect();
        let input = Tensor::<f64>::from_vec(&[1, 4, 2, 2, 2], data).unwrap();
        let gamma = Tensor::<f64>::full(&[4], 1.0);
        let beta = Tensor::<f64>::zeros(&[4]);
        let (out, _) = groupnorm_forward(&input, &gamma, &beta, 2, 1e-8).unwrap();
        // each group of 2 channels x 8 voxels has ~zero mean and unit variance
        for g in 0..2 {
            let sl = &out.data()[g * 16..(g + 1) * 16];
            let mean: f64 = sl.iter().sum::<f64>() / 16.0;
            let var: f64 = sl.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }
}
