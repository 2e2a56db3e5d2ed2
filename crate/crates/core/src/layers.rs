//! Neural building blocks: convolution (with dilation), max pooling,
//! ROI max pooling, bilinear upsampling, fully connected layers, relu,
//! and the softmax cross-entropy / smooth-L1 losses.
//!
//! Each operation exists as a pure forward/backward kernel pair (crate
//! internal) plus a graph-building function that records the op for
//! reverse-mode differentiation.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Op};
use crate::tensor::Tensor;

/// Output sides larger than this are rejected by bilinear upsampling.
pub const MAX_UPSAMPLED_SIDE: usize = 8192;

/// Convolution hyperparameters. The kernel and bias travel separately
/// as tensors (graph nodes), so they can be trained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvParams {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvParams {
    pub fn new(stride: usize, pad: usize, dilation: usize) -> Result<ConvParams> {
        if stride == 0 || dilation == 0 {
            return Err(Error::invalid(format!(
                "conv stride and dilation must be positive, got stride={stride} dilation={dilation}"
            )));
        }
        Ok(ConvParams {
            stride,
            pad,
            dilation,
        })
    }

    pub fn unit() -> ConvParams {
        ConvParams {
            stride: 1,
            pad: 0,
            dilation: 1,
        }
    }

    /// Effective kernel extent once dilation spreads the taps.
    pub fn effective_extent(&self, k: usize) -> usize {
        k + (k - 1) * (self.dilation - 1)
    }

    /// Spatial output size, or an error if it would be empty.
    pub fn out_extent(&self, input: usize, k: usize) -> Result<usize> {
        let eff = self.effective_extent(k);
        let padded = input + 2 * self.pad;
        if padded < eff {
            return Err(Error::invalid(format!(
                "conv output empty: input {input} + 2*pad {} < effective kernel {eff}",
                self.pad
            )));
        }
        Ok((padded - eff) / self.stride + 1)
    }
}

/// Max-pooling hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoolParams {
    pub window: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolParams {
    pub fn new(window: usize, stride: usize, pad: usize) -> Result<PoolParams> {
        if window == 0 {
            return Err(Error::invalid("pool window must be positive"));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::invalid(format!(
                "pool stride must be 1 or 2, got {stride}"
            )));
        }
        if pad >= window {
            return Err(Error::invalid(format!(
                "pool pad {pad} must be smaller than window {window}"
            )));
        }
        Ok(PoolParams {
            window,
            stride,
            pad,
        })
    }

    /// Size-preserving pool: stride 1, pad (window-1)/2, odd window.
    pub fn preserving(window: usize) -> Result<PoolParams> {
        if window % 2 == 0 {
            return Err(Error::invalid(
                "size-preserving pooling needs an odd window",
            ));
        }
        PoolParams::new(window, 1, (window - 1) / 2)
    }

    pub fn out_extent(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.pad;
        if padded < self.window {
            return Err(Error::invalid(format!(
                "pool window {} larger than padded input {padded}",
                self.window
            )));
        }
        Ok((padded - self.window) / self.stride + 1)
    }
}

pub(crate) fn dims4(t: &Tensor) -> Result<[usize; 4]> {
    let d = t.dims();
    if d.len() != 4 {
        return Err(Error::shape(format!("expected rank-4 tensor, got {:?}", d)));
    }
    Ok([d[0], d[1], d[2], d[3]])
}

fn dims2(t: &Tensor) -> Result<[usize; 2]> {
    let d = t.dims();
    if d.len() != 2 {
        return Err(Error::shape(format!("expected rank-2 tensor, got {:?}", d)));
    }
    Ok([d[0], d[1]])
}

// ---------------------------------------------------------------------------
// conv2d

pub(crate) fn conv2d_fwd(x: &Tensor, w: &Tensor, b: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let [n, ci, h, wd] = dims4(x)?;
    let [co, ciw, kh, kw] = dims4(w)?;
    if ciw != ci {
        return Err(Error::shape(format!(
            "conv kernel expects {ciw} input channels, input has {ci}"
        )));
    }
    if b.dims() != [co] {
        return Err(Error::shape(format!(
            "conv bias dims {:?} do not match {co} output channels",
            b.dims()
        )));
    }
    let oh = p.out_extent(h, kh)?;
    let ow = p.out_extent(wd, kw)?;
    let mut out = Tensor::zeros(&[n, co, oh, ow])?;
    let xd = x.data();
    let wv = w.data();
    let bd = b.data();
    let od = out.data_mut();
    for ni in 0..n {
        for o in 0..co {
            let obase = ((ni * co + o) * oh) * ow;
            od[obase..obase + oh * ow].fill(bd[o]);
            for c in 0..ci {
                let xbase = ((ni * ci + c) * h) * wd;
                let wbase = ((o * ci + c) * kh) * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let tap = wv[wbase + ky * kw + kx];
                        let dy = (ky * p.dilation) as isize - p.pad as isize;
                        let dx = (kx * p.dilation) as isize - p.pad as isize;
                        if p.stride == 1 {
                            let y0 = (-dy).max(0) as usize;
                            let y1 = (h as isize - dy).clamp(0, oh as isize) as usize;
                            let x0 = (-dx).max(0) as usize;
                            let x1 = (wd as isize - dx).clamp(0, ow as isize) as usize;
                            if x0 >= x1 {
                                continue;
                            }
                            for y in y0..y1 {
                                let iy = (y as isize + dy) as usize;
                                let orow = obase + y * ow;
                                let irow = (xbase + iy * wd) as isize + dx;
                                let dst = &mut od[orow + x0..orow + x1];
                                let src = &xd[(irow + x0 as isize) as usize
                                    ..(irow + x1 as isize) as usize];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += tap * s;
                                }
                            }
                        } else {
                            for y in 0..oh {
                                let iy = (y * p.stride) as isize + dy;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let orow = obase + y * ow;
                                let irow = xbase + iy as usize * wd;
                                for xo in 0..ow {
                                    let ix = (xo * p.stride) as isize + dx;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    od[orow + xo] += tap * xd[irow + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_bwd(
    x: &Tensor,
    w: &Tensor,
    p: &ConvParams,
    gout: &[f64],
    gx: &mut [f64],
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let [n, ci, h, wd] = dims4(x).expect("validated at forward");
    let [co, _, kh, kw] = dims4(w).expect("validated at forward");
    let oh = p.out_extent(h, kh).expect("validated at forward");
    let ow = p.out_extent(wd, kw).expect("validated at forward");
    let xd = x.data();
    let wv = w.data();
    for ni in 0..n {
        for o in 0..co {
            let obase = ((ni * co + o) * oh) * ow;
            gb[o] += gout[obase..obase + oh * ow].iter().sum::<f64>();
            for c in 0..ci {
                let xbase = ((ni * ci + c) * h) * wd;
                let wbase = ((o * ci + c) * kh) * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let tap = wv[wbase + ky * kw + kx];
                        let mut tap_grad = 0.0;
                        let dy = (ky * p.dilation) as isize - p.pad as isize;
                        let dx = (kx * p.dilation) as isize - p.pad as isize;
                        if p.stride == 1 {
                            let y0 = (-dy).max(0) as usize;
                            let y1 = (h as isize - dy).clamp(0, oh as isize) as usize;
                            let x0 = (-dx).max(0) as usize;
                            let x1 = (wd as isize - dx).clamp(0, ow as isize) as usize;
                            if x0 >= x1 {
                                continue;
                            }
                            for y in y0..y1 {
                                let iy = (y as isize + dy) as usize;
                                let orow = obase + y * ow;
                                let irow = (xbase + iy * wd) as isize + dx;
                                let go = &gout[orow + x0..orow + x1];
                                let ia = (irow + x0 as isize) as usize;
                                let ib = (irow + x1 as isize) as usize;
                                for (g, s) in go.iter().zip(&xd[ia..ib]) {
                                    tap_grad += g * s;
                                }
                                for (gi, g) in gx[ia..ib].iter_mut().zip(go) {
                                    *gi += tap * g;
                                }
                            }
                        } else {
                            for y in 0..oh {
                                let iy = (y * p.stride) as isize + dy;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let orow = obase + y * ow;
                                let irow = xbase + iy as usize * wd;
                                for xo in 0..ow {
                                    let ix = (xo * p.stride) as isize + dx;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let g = gout[orow + xo];
                                    tap_grad += g * xd[irow + ix as usize];
                                    gx[irow + ix as usize] += tap * g;
                                }
                            }
                        }
                        gw[wbase + ky * kw + kx] += tap_grad;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// maxpool2d

pub(crate) fn maxpool2d_fwd(x: &Tensor, p: &PoolParams) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = dims4(x)?;
    let oh = p.out_extent(h)?;
    let ow = p.out_extent(w)?;
    let mut out = Tensor::zeros(&[n, c, oh, ow])?;
    let mut argmax = vec![0usize; n * c * oh * ow];
    let xd = x.data();
    let od = out.data_mut();
    let mut oi = 0;
    for ni in 0..n {
        for ch in 0..c {
            let xbase = ((ni * c + ch) * h) * w;
            for oy in 0..oh {
                let ya = (oy * p.stride) as isize - p.pad as isize;
                for ox in 0..ow {
                    let xa = (ox * p.stride) as isize - p.pad as isize;
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for ky in 0..p.window {
                        let iy = ya + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = xbase + iy as usize * w;
                        for kx in 0..p.window {
                            let ix = xa + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let v = xd[row + ix as usize];
                            // strict > keeps the first cell in scan order on ties
                            if v > best {
                                best = v;
                                best_idx = row + ix as usize;
                            }
                        }
                    }
                    debug_assert!(best_idx != usize::MAX, "pool window saw no real cells");
                    od[oi] = best;
                    argmax[oi] = best_idx;
                    oi += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub(crate) fn maxpool2d_bwd(argmax: &[usize], gout: &[f64], gx: &mut [f64]) {
    for (&src, &g) in argmax.iter().zip(gout) {
        gx[src] += g;
    }
}

// ---------------------------------------------------------------------------
// roi max pooling

/// Bin boundaries for one axis: start floors, end ceils, at least one
/// cell, clamped to the map.
fn roi_bin(lo: f64, hi: f64, i: usize, grid: usize, cells: usize) -> (usize, usize) {
    let span = hi - lo;
    let raw_start = (lo + span * i as f64 / grid as f64).floor();
    let raw_end = (lo + span * (i + 1) as f64 / grid as f64).ceil();
    let start = (raw_start as isize).clamp(0, cells as isize - 1) as usize;
    let end = (raw_end as isize).clamp(1, cells as isize) as usize;
    let end = end.max(start + 1);
    (start, end)
}

/// Adaptive max pooling of rectangular regions of a [1,C,H,W] feature
/// map into a fixed G x G grid. Rois are (x0, y0, x1, y1) in feature-map
/// coordinates; output is [R, C, G, G].
pub(crate) fn roi_maxpool_fwd(
    feat: &Tensor,
    rois: &[[f64; 4]],
    grid: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = dims4(feat)?;
    if n != 1 {
        return Err(Error::shape("roi_maxpool expects a single-image feature map"));
    }
    if grid == 0 {
        return Err(Error::invalid("roi grid must be positive"));
    }
    if rois.is_empty() {
        return Err(Error::invalid("roi_maxpool needs at least one roi"));
    }
    let mut out = Tensor::zeros(&[rois.len(), c, grid, grid])?;
    let mut argmax = vec![0usize; rois.len() * c * grid * grid];
    let xd = feat.data();
    let od = out.data_mut();
    let mut oi = 0;
    for roi in rois {
        let x0 = roi[0].clamp(0.0, w as f64);
        let y0 = roi[1].clamp(0.0, h as f64);
        let x1 = roi[2].clamp(0.0, w as f64);
        let y1 = roi[3].clamp(0.0, h as f64);
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::DegenerateRoi(format!(
                "roi {:?} has no area after clipping to {w}x{h}",
                roi
            )));
        }
        for ch in 0..c {
            let base = ch * h * w;
            for gy in 0..grid {
                let (ys, ye) = roi_bin(y0, y1, gy, grid, h);
                for gx in 0..grid {
                    let (xs, xe) = roi_bin(x0, x1, gx, grid, w);
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for y in ys..ye {
                        let row = base + y * w;
                        for x in xs..xe {
                            let v = xd[row + x];
                            if v > best {
                                best = v;
                                best_idx = row + x;
                            }
                        }
                    }
                    od[oi] = best;
                    argmax[oi] = best_idx;
                    oi += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Pure single-roi variant returning [C, G, G].
pub fn roi_maxpool_region(feat: &Tensor, roi: [f64; 4], grid: usize) -> Result<Tensor> {
    let (out, _) = roi_maxpool_fwd(feat, &[roi], grid)?;
    let c = feat.dims()[1];
    out.reshaped(&[c, grid, grid])
}

// ---------------------------------------------------------------------------
// bilinear upsampling

/// Source coordinate and lerp weights under the align-corners convention.
fn bilerp_coords(out_i: usize, out_n: usize, in_n: usize) -> (usize, usize, f64) {
    if out_n == 1 || in_n == 1 {
        return (0, 0, 0.0);
    }
    let src = out_i as f64 * (in_n - 1) as f64 / (out_n - 1) as f64;
    let lo = (src.floor() as usize).min(in_n - 1);
    let hi = (lo + 1).min(in_n - 1);
    (lo, hi, src - lo as f64)
}

pub(crate) fn bilinear_fwd(x: &Tensor, factor: usize) -> Result<Tensor> {
    let [n, c, h, w] = dims4(x)?;
    if factor == 0 {
        return Err(Error::invalid("upsample factor must be >= 1"));
    }
    let (oh, ow) = (h * factor, w * factor);
    if oh > MAX_UPSAMPLED_SIDE || ow > MAX_UPSAMPLED_SIDE {
        return Err(Error::invalid(format!(
            "upsampled size {oh}x{ow} exceeds maximum {MAX_UPSAMPLED_SIDE}"
        )));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let mut out = Tensor::zeros(&[n, c, oh, ow])?;
    let xd = x.data();
    let od = out.data_mut();
    let xcoords: Vec<(usize, usize, f64)> = (0..ow).map(|i| bilerp_coords(i, ow, w)).collect();
    let mut oi = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let (ylo, yhi, fy) = bilerp_coords(oy, oh, h);
            let rlo = base + ylo * w;
            let rhi = base + yhi * w;
            for &(xlo, xhi, fx) in &xcoords {
                let v00 = xd[rlo + xlo];
                let v01 = xd[rlo + xhi];
                let v10 = xd[rhi + xlo];
                let v11 = xd[rhi + xhi];
                od[oi] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                    + fy * ((1.0 - fx) * v10 + fx * v11);
                oi += 1;
            }
        }
    }
    Ok(out)
}

pub(crate) fn bilinear_bwd(in_dims: &[usize], factor: usize, gout: &[f64], gx: &mut [f64]) {
    let (n, c, h, w) = (in_dims[0], in_dims[1], in_dims[2], in_dims[3]);
    if factor == 1 {
        for (gi, g) in gx.iter_mut().zip(gout) {
            *gi += g;
        }
        return;
    }
    let (oh, ow) = (h * factor, w * factor);
    let xcoords: Vec<(usize, usize, f64)> = (0..ow).map(|i| bilerp_coords(i, ow, w)).collect();
    let mut oi = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let (ylo, yhi, fy) = bilerp_coords(oy, oh, h);
            let rlo = base + ylo * w;
            let rhi = base + yhi * w;
            for &(xlo, xhi, fx) in &xcoords {
                let g = gout[oi];
                oi += 1;
                gx[rlo + xlo] += (1.0 - fy) * (1.0 - fx) * g;
                gx[rlo + xhi] += (1.0 - fy) * fx * g;
                gx[rhi + xlo] += fy * (1.0 - fx) * g;
                gx[rhi + xhi] += fy * fx * g;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// fully connected

pub(crate) fn fully_connected_fwd(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, d] = dims2(x)?;
    let [dw, k] = dims2(w)?;
    if d != dw {
        return Err(Error::shape(format!(
            "fully_connected inner dims differ: input {d}, weight {dw}"
        )));
    }
    if b.dims() != [k] {
        return Err(Error::shape(format!(
            "fully_connected bias dims {:?} do not match {k} outputs",
            b.dims()
        )));
    }
    let mut out = Tensor::zeros(&[m, k])?;
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let od = out.data_mut();
    for i in 0..m {
        let orow = i * k;
        od[orow..orow + k].copy_from_slice(bd);
        for j in 0..d {
            let xv = xd[i * d + j];
            let wrow = j * k;
            for (o, wv) in od[orow..orow + k].iter_mut().zip(&wd[wrow..wrow + k]) {
                *o += xv * wv;
            }
        }
    }
    Ok(out)
}

pub(crate) fn fully_connected_bwd(
    x: &Tensor,
    w: &Tensor,
    gout: &[f64],
    gx: &mut [f64],
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let [m, d] = dims2(x).expect("validated at forward");
    let [_, k] = dims2(w).expect("validated at forward");
    let xd = x.data();
    let wd = w.data();
    for i in 0..m {
        let grow = &gout[i * k..(i + 1) * k];
        for (gbj, g) in gb.iter_mut().zip(grow) {
            *gbj += g;
        }
        for j in 0..d {
            let wrow = &wd[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (g, wv) in grow.iter().zip(wrow) {
                acc += g * wv;
            }
            gx[i * d + j] += acc;
            let xv = xd[i * d + j];
            for (gwv, g) in gw[j * k..(j + 1) * k].iter_mut().zip(grow) {
                *gwv += xv * g;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise

pub(crate) fn relu_fwd(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        } else if *v == 0.0 {
            *v = 0.0; // normalize -0.0
        }
    }
    out
}

pub(crate) fn relu_bwd(x: &Tensor, gout: &[f64], gx: &mut [f64]) {
    for ((gi, &xi), &g) in gx.iter_mut().zip(x.data()).zip(gout) {
        if xi > 0.0 {
            *gi += g;
        }
    }
}

/// Per element: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
pub(crate) fn smooth_l1_fwd(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        let a = v.abs();
        *v = if a < 1.0 { 0.5 * *v * *v } else { a - 0.5 };
    }
    out
}

pub(crate) fn smooth_l1_bwd(x: &Tensor, gout: &[f64], gx: &mut [f64]) {
    for ((gi, &xi), &g) in gx.iter_mut().zip(x.data()).zip(gout) {
        let d = if xi.abs() < 1.0 { xi } else { xi.signum() };
        *gi += d * g;
    }
}

// ---------------------------------------------------------------------------
// softmax cross-entropy

/// Row-wise softmax of a [M, K] tensor (inference helper).
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let [m, k] = dims2(logits)?;
    let mut out = logits.clone();
    let od = out.data_mut();
    for i in 0..m {
        let row = &mut od[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Mean negative log-likelihood over non-ignored rows. Returns the loss,
/// the row softmax (kept for backward), and the number of counted rows.
pub(crate) fn softmax_xent_fwd(
    logits: &Tensor,
    labels: &[Option<usize>],
) -> Result<(f64, Vec<f64>, usize)> {
    let [m, k] = dims2(logits)?;
    if labels.len() != m {
        return Err(Error::shape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            m
        )));
    }
    for l in labels.iter().flatten() {
        if *l >= k {
            return Err(Error::invalid(format!("label {l} out of range for {k} classes")));
        }
    }
    let probs = softmax_rows(logits)?.into_data();
    let mut n_eff = 0usize;
    let mut loss = 0.0;
    for (i, l) in labels.iter().enumerate() {
        if let Some(y) = l {
            n_eff += 1;
            loss -= probs[i * k + y].ln();
        }
    }
    if n_eff > 0 {
        loss /= n_eff as f64;
    } else {
        loss = 0.0;
    }
    Ok((loss, probs, n_eff))
}

pub(crate) fn softmax_xent_bwd(
    probs: &[f64],
    labels: &[Option<usize>],
    n_eff: usize,
    k: usize,
    gout: f64,
    gx: &mut [f64],
) {
    if n_eff == 0 {
        return;
    }
    let scale = gout / n_eff as f64;
    for (i, l) in labels.iter().enumerate() {
        if let Some(y) = l {
            let row = i * k;
            for j in 0..k {
                let onehot = if j == *y { 1.0 } else { 0.0 };
                gx[row + j] += scale * (probs[row + j] - onehot);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// graph builders

pub fn conv2d(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId, p: ConvParams) -> Result<NodeId> {
    let out = conv2d_fwd(g.value(x), g.value(w), g.value(b), &p)?;
    g.push(Op::Conv2d { x, w, b, p }, out)
}

pub fn maxpool2d(g: &mut Graph, x: NodeId, p: PoolParams) -> Result<NodeId> {
    let (out, argmax) = maxpool2d_fwd(g.value(x), &p)?;
    g.push(Op::MaxPool2d { x, argmax }, out)
}

pub fn roi_maxpool(g: &mut Graph, x: NodeId, rois: &[[f64; 4]], grid: usize) -> Result<NodeId> {
    let (out, argmax) = roi_maxpool_fwd(g.value(x), rois, grid)?;
    g.push(Op::RoiMaxPool { x, argmax }, out)
}

pub fn bilinear_upsample(g: &mut Graph, x: NodeId, factor: usize) -> Result<NodeId> {
    let out = bilinear_fwd(g.value(x), factor)?;
    let in_dims = g.value(x).dims().to_vec();
    g.push(Op::BilinearUpsample { x, in_dims, factor }, out)
}

pub fn fully_connected(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let out = fully_connected_fwd(g.value(x), g.value(w), g.value(b))?;
    g.push(Op::FullyConnected { x, w, b }, out)
}

pub fn relu(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let out = relu_fwd(g.value(x));
    g.push(Op::Relu { x }, out)
}

pub fn smooth_l1(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let out = smooth_l1_fwd(g.value(x));
    g.push(Op::SmoothL1 { x }, out)
}

pub fn softmax_cross_entropy(
    g: &mut Graph,
    logits: NodeId,
    labels: &[Option<usize>],
) -> Result<NodeId> {
    let (loss, probs, n_eff) = softmax_xent_fwd(g.value(logits), labels)?;
    let k = g.value(logits).dims()[1];
    g.push(
        Op::SoftmaxXent {
            x: logits,
            labels: labels.to_vec(),
            probs,
            n_eff,
            k,
        },
        Tensor::scalar(loss),
    )
}
