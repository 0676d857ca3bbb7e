//! Direct 3D convolution kernels.
//!
//! Kernels are stored as `(out_channels * in_channels) x k x k x k`, i.e.
//! weight `(co, ci, kd, kh, kw)` lives at flat index
//! `(((co * cin + ci) * k + kd) * k + kh) * k + kw`.
//!
//! Work is split per output channel (forward, parameter gradients) or per
//! input channel (input gradient). Each channel plane is computed by one
//! thread in a fixed order, so results do not depend on the thread count.
//! On x86-64 the per-channel loops are also compiled with AVX2 enabled and
//! picked at runtime; the arithmetic order is identical in both builds.

use super::{Grid, Shape, TensorError};
use crate::exec;

/// Spatial padding mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding that keeps the spatial extent (odd kernels only).
    Same,
    /// No padding; output extent shrinks by `k - 1`.
    Valid,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub offset: usize,
}

impl ConvGeometry {
    pub fn new(
        input: Shape,
        kernel: Shape,
        bias: Shape,
        padding: Padding,
    ) -> Result<Self, TensorError> {
        let cin = input.channels();
        let cout = bias.len();
        let [kc, kd, kh, kw] = kernel.0;
        if kd != kh || kh != kw || kd == 0 {
            return Err(TensorError::Shape(format!(
                "conv3d kernel must be cubic, got spatial {kd}x{kh}x{kw}"
            )));
        }
        if kd % 2 == 0 {
            return Err(TensorError::Shape(format!(
                "conv3d kernel extent must be odd, got {kd}"
            )));
        }
        if cout == 0 || kc != cout * cin {
            return Err(TensorError::Shape(format!(
                "conv3d kernel {kernel} does not match {cin} input channels and {cout} bias entries"
            )));
        }
        let k = kd;
        let spatial = input.spatial();
        let (offset, output) = match padding {
            Padding::Same => (k / 2, spatial),
            Padding::Valid => {
                if spatial.iter().any(|&e| e < k) {
                    return Err(TensorError::Shape(format!(
                        "conv3d valid padding: input {input} smaller than kernel {k}"
                    )));
                }
                (0, spatial.map(|e| e - k + 1))
            }
        };
        Ok(ConvGeometry {
            cin,
            cout,
            k,
            input: spatial,
            output,
            offset,
        })
    }

    pub fn output_shape(&self) -> Shape {
        Shape::new(self.cout, self.output[0], self.output[1], self.output[2])
    }

    fn taps(&self) -> usize {
        self.k * self.k * self.k
    }

    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }
}

/// Row-level primitives. `off` is the padding offset: output position `o`
/// reads input position `o + tap - off`.
mod rows {
    /// `dst[o] += sum_t w[t] * src[o + t - off]` over valid positions.
    #[inline(always)]
    pub fn correlate(dst: &mut [f32], src: &[f32], w: &[f32], off: usize) {
        let k = w.len();
        let (n_out, n_in) = (dst.len(), src.len());
        // interior: every tap in range
        let lo = off.min(n_out);
        let hi = (n_in + off + 1).saturating_sub(k).clamp(lo, n_out);
        for o in (0..lo).chain(hi..n_out) {
            let mut acc = 0.0f32;
            for (t, &wt) in w.iter().enumerate() {
                if let Some(i) = (o + t).checked_sub(off).filter(|&i| i < n_in) {
                    acc += wt * src[i];
                }
            }
            dst[o] += acc;
        }
        if hi > lo {
            let base = lo - off;
            let n = hi - lo;
            let d = &mut dst[lo..hi];
            match k {
                1 => {
                    let s0 = &src[base..base + n];
                    for (d, &a) in d.iter_mut().zip(s0) {
                        *d += w[0] * a;
                    }
                }
                3 => {
                    let (s0, s1, s2) = (
                        &src[base..base + n],
                        &src[base + 1..base + 1 + n],
                        &src[base + 2..base + 2 + n],
                    );
                    let (w0, w1, w2) = (w[0], w[1], w[2]);
                    for (((d, &a), &b), &c) in d.iter_mut().zip(s0).zip(s1).zip(s2) {
                        *d += w0 * a + w1 * b + w2 * c;
                    }
                }
                _ => {
                    for i in 0..n {
                        let mut acc = 0.0f32;
                        for (t, &wt) in w.iter().enumerate() {
                            acc += wt * src[base + i + t];
                        }
                        d[i] += acc;
                    }
                }
            }
        }
    }

    /// Transpose of [`correlate`]: `dst[i] += sum_t w[t] * src[i - t + off]`.
    #[inline(always)]
    pub fn convolve(dst: &mut [f32], src: &[f32], w: &[f32], off: usize) {
        let k = w.len();
        let (n_in, n_out) = (dst.len(), src.len());
        // interior: i - t + off in [0, n_out) for every t
        let lo = (k - 1).saturating_sub(off).min(n_in);
        let hi = n_out.saturating_sub(off).min(n_in).max(lo);
        for i in (0..lo).chain(hi..n_in) {
            let mut acc = 0.0f32;
            for (t, &wt) in w.iter().enumerate() {
                if let Some(o) = (i + off).checked_sub(t).filter(|&o| o < n_out) {
                    acc += wt * src[o];
                }
            }
            dst[i] += acc;
        }
        if hi > lo {
            let n = hi - lo;
            let d = &mut dst[lo..hi];
            // src index for tap t at i = lo: lo + off - t
            let s_at = |t: usize| lo + off - t;
            match k {
                1 => {
                    let s0 = &src[s_at(0)..s_at(0) + n];
                    for (d, &a) in d.iter_mut().zip(s0) {
                        *d += w[0] * a;
                    }
                }
                3 => {
                    let (s0, s1, s2) = (
                        &src[s_at(0)..s_at(0) + n],
                        &src[s_at(1)..s_at(1) + n],
                        &src[s_at(2)..s_at(2) + n],
                    );
                    let (w0, w1, w2) = (w[0], w[1], w[2]);
                    for (((d, &a), &b), &c) in d.iter_mut().zip(s0).zip(s1).zip(s2) {
                        *d += w0 * a + w1 * b + w2 * c;
                    }
                }
                _ => {
                    for i in 0..n {
                        let mut acc = 0.0f32;
                        for (t, &wt) in w.iter().enumerate() {
                            acc += wt * src[s_at(t) + i];
                        }
                        d[i] += acc;
                    }
                }
            }
        }
    }

    /// Eight-lane dot product with a fixed summation order.
    #[inline(always)]
    pub fn dot(a: &[f32], b: &[f32]) -> f32 {
        let n = a.len().min(b.len());
        let mut lanes = [0.0f32; 8];
        let chunks = n / 8;
        for (x, y) in a[..chunks * 8].chunks_exact(8).zip(b[..chunks * 8].chunks_exact(8)) {
            for l in 0..8 {
                lanes[l] += x[l] * y[l];
            }
        }
        let mut tail = 0.0f32;
        for i in chunks * 8..n {
            tail += a[i] * b[i];
        }
        ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5]))
            + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]))
            + tail
    }

    /// `acc[t] += sum_o go[o] * src[o + t - off]` over valid positions.
    #[inline(always)]
    pub fn tap_dots(acc: &mut [f64], go: &[f32], src: &[f32], off: usize) {
        let (n_out, n_in) = (go.len(), src.len());
        for (t, a) in acc.iter_mut().enumerate() {
            let lo = off.saturating_sub(t).min(n_out);
            let hi = (n_in + off).saturating_sub(t).min(n_out).max(lo);
            if hi > lo {
                let s = lo + t - off;
                *a += dot(&go[lo..hi], &src[s..s + (hi - lo)]) as f64;
            }
        }
    }
}

#[inline(always)]
fn forward_channel(plane: &mut [f32], co: usize, src: &[f32], kernel: &[f32], bias: f32, g: &ConvGeometry) {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let k = g.k;
    let in_plane = g.in_plane();
    plane.fill(bias);
    for z in 0..od {
        for y in 0..oh {
            let row = &mut plane[(z * oh + y) * ow..(z * oh + y + 1) * ow];
            for ci in 0..g.cin {
                let chan = &src[ci * in_plane..(ci + 1) * in_plane];
                let wbase = (co * g.cin + ci) * g.taps();
                for kd in 0..k {
                    let Some(sz) = (z + kd).checked_sub(g.offset).filter(|&v| v < id) else {
                        continue;
                    };
                    for kh in 0..k {
                        let Some(sy) = (y + kh).checked_sub(g.offset).filter(|&v| v < ih) else {
                            continue;
                        };
                        let src_row = &chan[(sz * ih + sy) * iw..(sz * ih + sy + 1) * iw];
                        let w = &kernel[wbase + (kd * k + kh) * k..wbase + (kd * k + kh + 1) * k];
                        rows::correlate(row, src_row, w, g.offset);
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn input_grad_channel(plane: &mut [f32], ci: usize, go: &[f32], kernel: &[f32], g: &ConvGeometry) {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let k = g.k;
    let out_plane = g.out_plane();
    for z in 0..id {
        for y in 0..ih {
            let row = &mut plane[(z * ih + y) * iw..(z * ih + y + 1) * iw];
            for co in 0..g.cout {
                let chan = &go[co * out_plane..(co + 1) * out_plane];
                let wbase = (co * g.cin + ci) * g.taps();
                for kd in 0..k {
                    let Some(sz) = (z + g.offset).checked_sub(kd).filter(|&v| v < od) else {
                        continue;
                    };
                    for kh in 0..k {
                        let Some(sy) = (y + g.offset).checked_sub(kh).filter(|&v| v < oh) else {
                            continue;
                        };
                        let go_row = &chan[(sz * oh + sy) * ow..(sz * oh + sy + 1) * ow];
                        let w = &kernel[wbase + (kd * k + kh) * k..wbase + (kd * k + kh + 1) * k];
                        rows::convolve(row, go_row, w, g.offset);
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn param_grad_channel(co: usize, go: &[f32], src: &[f32], g: &ConvGeometry) -> (Vec<f64>, f64) {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let (in_plane, out_plane) = (g.in_plane(), g.out_plane());
    let k = g.k;
    let taps = g.taps();
    let chan_out = &go[co * out_plane..(co + 1) * out_plane];
    let mut acc = vec![0.0f64; g.cin * taps];
    for z in 0..od {
        for y in 0..oh {
            let go_row = &chan_out[(z * oh + y) * ow..(z * oh + y + 1) * ow];
            for ci in 0..g.cin {
                let chan = &src[ci * in_plane..(ci + 1) * in_plane];
                for kd in 0..k {
                    let Some(sz) = (z + kd).checked_sub(g.offset).filter(|&v| v < id) else {
                        continue;
                    };
                    for kh in 0..k {
                        let Some(sy) = (y + kh).checked_sub(g.offset).filter(|&v| v < ih) else {
                            continue;
                        };
                        let src_row = &chan[(sz * ih + sy) * iw..(sz * ih + sy + 1) * iw];
                        let base = ci * taps + (kd * k + kh) * k;
                        rows::tap_dots(&mut acc[base..base + k], go_row, src_row, g.offset);
                    }
                }
            }
        }
    }
    let bias: f64 = chan_out.iter().map(|&v| v as f64).sum();
    (acc, bias)
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use super::ConvGeometry;

    #[target_feature(enable = "avx2")]
    pub unsafe fn forward_channel(
        plane: &mut [f32],
        co: usize,
        src: &[f32],
        kernel: &[f32],
        bias: f32,
        g: &ConvGeometry,
    ) {
        super::forward_channel(plane, co, src, kernel, bias, g)
    }

    #[target_feature(enable = "avx2")]
    pub unsafe fn input_grad_channel(
        plane: &mut [f32],
        ci: usize,
        go: &[f32],
        kernel: &[f32],
        g: &ConvGeometry,
    ) {
        super::input_grad_channel(plane, ci, go, kernel, g)
    }

    #[target_feature(enable = "avx2")]
    pub unsafe fn param_grad_channel(
        co: usize,
        go: &[f32],
        src: &[f32],
        g: &ConvGeometry,
    ) -> (Vec<f64>, f64) {
        super::param_grad_channel(co, go, src, g)
    }
}

fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

pub(crate) fn forward(input: &Grid, kernel: &[f32], bias: &[f32], g: &ConvGeometry) -> Grid {
    let mut out = Grid::zeros(g.output_shape());
    let src = input.data();
    let fast = has_avx2();
    exec::for_each_chunk_mut(out.data_mut(), g.out_plane(), |co, plane| {
        #[cfg(target_arch = "x86_64")]
        if fast {
            // SAFETY: avx2 availability checked at runtime above.
            unsafe { avx2::forward_channel(plane, co, src, kernel, bias[co], g) };
            return;
        }
        let _ = fast;
        forward_channel(plane, co, src, kernel, bias[co], g);
    });
    out
}

pub(crate) fn backward_input(grad_out: &Grid, kernel: &[f32], g: &ConvGeometry) -> Grid {
    let [id, ih, iw] = g.input;
    let mut grad_in = Grid::zeros(Shape::new(g.cin, id, ih, iw));
    let go = grad_out.data();
    let fast = has_avx2();
    exec::for_each_chunk_mut(grad_in.data_mut(), g.in_plane(), |ci, plane| {
        #[cfg(target_arch = "x86_64")]
        if fast {
            // SAFETY: avx2 availability checked at runtime above.
            unsafe { avx2::input_grad_channel(plane, ci, go, kernel, g) };
            return;
        }
        let _ = fast;
        input_grad_channel(plane, ci, go, kernel, g);
    });
    grad_in
}

/// Returns `(kernel_grad, bias_grad)`.
pub(crate) fn backward_params(grad_out: &Grid, input: &Grid, g: &ConvGeometry) -> (Vec<f32>, Vec<f32>) {
    let go = grad_out.data();
    let src = input.data();
    let fast = has_avx2();
    let per_channel = exec::map_indexed(g.cout, |co| {
        #[cfg(target_arch = "x86_64")]
        if fast {
            // SAFETY: avx2 availability checked at runtime above.
            return unsafe { avx2::param_grad_channel(co, go, src, g) };
        }
        let _ = fast;
        param_grad_channel(co, go, src, g)
    });
    let taps = g.taps();
    let mut kernel_grad = Vec::with_capacity(g.cout * g.cin * taps);
    let mut bias_grad = Vec::with_capacity(g.cout);
    for (acc, b) in per_channel {
        kernel_grad.extend(acc.into_iter().map(|v| v as f32));
        bias_grad.push(b as f32);
    }
    (kernel_grad, bias_grad)
}
