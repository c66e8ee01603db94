//! Dense compute kernels behind the autodiff primitives.
//!
//! Every kernel partitions its output into disjoint chunks and computes each
//! chunk with a fixed sequential reduction order, so the parallel and
//! sequential paths produce bit-identical results.

/// Execution strategy for a kernel call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        #[cfg(feature = "parallel")]
        {
            Exec::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Exec::Sequential
        }
    }
}

/// Below this many multiply-adds a kernel stays on the calling thread.
#[cfg(feature = "parallel")]
const PAR_MIN_WORK: usize = 1 << 16;

fn for_each_chunk<F>(exec: Exec, out: &mut [f64], chunk: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if chunk == 0 || out.is_empty() {
        return;
    }
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel if work >= PAR_MIN_WORK => {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
        }
        _ => {
            let _ = work;
            out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        }
    }
}

/// Geometry of a 2-D grouped, strided, dilated convolution over NCHW data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let span_h = self.dilation.0 * (self.kernel.0 - 1) + 1;
        let span_w = self.dilation.1 * (self.kernel.1 - 1) + 1;
        let oh = (self.height + 2 * self.padding.0 - span_h) / self.stride.0 + 1;
        let ow = (self.width + 2 * self.padding.1 - span_w) / self.stride.1 + 1;
        (oh, ow)
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * (self.in_channels / self.groups) * self.kernel.0 * self.kernel.1
    }

    fn macs(&self) -> usize {
        let (oh, ow) = self.out_hw();
        self.batch * oh * ow * self.weight_len()
    }
}

/// Range of output indices `o` for which `o*stride + offset - pad` lies in `[0, len)`.
#[inline]
fn valid_range(len: usize, out_len: usize, stride: usize, offset: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > offset {
        (pad - offset).div_ceil(stride)
    } else {
        0
    };
    let hi_num = len as isize - 1 + pad as isize - offset as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = ((hi_num as usize) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

pub fn conv2d_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    conv2d_forward_with(Exec::default(), x, w, g)
}

pub fn conv2d_forward_with(exec: Exec, x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let (kh, kw) = g.kernel;
    let cin_g = g.in_channels / g.groups;
    let cout_g = g.out_channels / g.groups;
    let plane_in = g.height * g.width;
    let mut out = vec![0.0; g.batch * g.out_channels * oh * ow];
    for_each_chunk(exec, &mut out, oh * ow, g.macs(), |idx, dst| {
        let n = idx / g.out_channels;
        let co = idx % g.out_channels;
        let grp = co / cout_g;
        for cl in 0..cin_g {
            let ci = grp * cin_g + cl;
            let xp = &x[(n * g.in_channels + ci) * plane_in..][..plane_in];
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(g.height, oh, g.stride.0, ky * g.dilation.0, g.padding.0);
                for kx in 0..kw {
                    let wv = w[((co * cin_g + cl) * kh + ky) * kw + kx];
                    let (ox0, ox1) = valid_range(g.width, ow, g.stride.1, kx * g.dilation.1, g.padding.1);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride.0 + ky * g.dilation.0 - g.padding.0;
                        let xrow = &xp[iy * g.width..][..g.width];
                        let drow = &mut dst[oy * ow..][..ow];
                        for ox in ox0..ox1 {
                            let ix = ox * g.stride.1 + kx * g.dilation.1 - g.padding.1;
                            drow[ox] += wv * xrow[ix];
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn conv2d_backward_input(gout: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    conv2d_backward_input_with(Exec::default(), gout, w, g)
}

pub fn conv2d_backward_input_with(exec: Exec, gout: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let (kh, kw) = g.kernel;
    let cin_g = g.in_channels / g.groups;
    let cout_g = g.out_channels / g.groups;
    let plane_in = g.height * g.width;
    let mut gin = vec![0.0; g.batch * g.in_channels * plane_in];
    for_each_chunk(exec, &mut gin, plane_in, g.macs(), |idx, dst| {
        let n = idx / g.in_channels;
        let ci = idx % g.in_channels;
        let grp = ci / cin_g;
        let cl = ci % cin_g;
        for co in grp * cout_g..(grp + 1) * cout_g {
            let gp = &gout[(n * g.out_channels + co) * oh * ow..][..oh * ow];
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(g.height, oh, g.stride.0, ky * g.dilation.0, g.padding.0);
                for kx in 0..kw {
                    let wv = w[((co * cin_g + cl) * kh + ky) * kw + kx];
                    let (ox0, ox1) = valid_range(g.width, ow, g.stride.1, kx * g.dilation.1, g.padding.1);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride.0 + ky * g.dilation.0 - g.padding.0;
                        let grow = &gp[oy * ow..][..ow];
                        let drow = &mut dst[iy * g.width..][..g.width];
                        for ox in ox0..ox1 {
                            let ix = ox * g.stride.1 + kx * g.dilation.1 - g.padding.1;
                            drow[ix] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    });
    gin
}

pub fn conv2d_backward_weight(gout: &[f64], x: &[f64], g: &ConvGeom) -> Vec<f64> {
    conv2d_backward_weight_with(Exec::default(), gout, x, g)
}

pub fn conv2d_backward_weight_with(exec: Exec, gout: &[f64], x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let (kh, kw) = g.kernel;
    let cin_g = g.in_channels / g.groups;
    let cout_g = g.out_channels / g.groups;
    let plane_in = g.height * g.width;
    let mut gw = vec![0.0; g.weight_len()];
    for_each_chunk(exec, &mut gw, cin_g * kh * kw, g.macs(), |co, dst| {
        let grp = co / cout_g;
        for n in 0..g.batch {
            let gp = &gout[(n * g.out_channels + co) * oh * ow..][..oh * ow];
            for cl in 0..cin_g {
                let ci = grp * cin_g + cl;
                let xp = &x[(n * g.in_channels + ci) * plane_in..][..plane_in];
                for ky in 0..kh {
                    let (oy0, oy1) = valid_range(g.height, oh, g.stride.0, ky * g.dilation.0, g.padding.0);
                    for kx in 0..kw {
                        let (ox0, ox1) = valid_range(g.width, ow, g.stride.1, kx * g.dilation.1, g.padding.1);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride.0 + ky * g.dilation.0 - g.padding.0;
                            let xrow = &xp[iy * g.width..][..g.width];
                            let grow = &gp[oy * ow..][..ow];
                            for ox in ox0..ox1 {
                                let ix = ox * g.stride.1 + kx * g.dilation.1 - g.padding.1;
                                acc += grow[ox] * xrow[ix];
                            }
                        }
                        dst[(cl * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    });
    gw
}

/// Geometry of a square-window pooling over NCHW data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let oh = (self.height + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (self.width + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }
}

/// Max pooling; returns values and the in-plane argmax of every output.
pub fn max_pool_forward(x: &[f64], g: &PoolGeom) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = g.out_hw();
    let plane_in = g.height * g.width;
    let mut out = vec![0.0; g.planes * oh * ow];
    let mut arg = vec![0usize; g.planes * oh * ow];
    for p in 0..g.planes {
        let xp = &x[p * plane_in..][..plane_in];
        for oy in 0..oh {
            let (y0, y1) = window(oy, g.stride, g.padding, g.kernel, g.height);
            for ox in 0..ow {
                let (x0, x1) = window(ox, g.stride, g.padding, g.kernel, g.width);
                let mut best = f64::NEG_INFINITY;
                let mut best_i = y0 * g.width + x0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let v = xp[iy * g.width + ix];
                        if v > best {
                            best = v;
                            best_i = iy * g.width + ix;
                        }
                    }
                }
                let o = (p * oh + oy) * ow + ox;
                out[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (out, arg)
}

pub fn max_pool_backward(gout: &[f64], arg: &[usize], g: &PoolGeom) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let plane_in = g.height * g.width;
    let mut gin = vec![0.0; g.planes * plane_in];
    for p in 0..g.planes {
        for o in 0..oh * ow {
            let i = p * oh * ow + o;
            gin[p * plane_in + arg[i]] += gout[i];
        }
    }
    gin
}

/// Average pooling; padded cells are excluded from the divisor.
pub fn avg_pool_forward(x: &[f64], g: &PoolGeom) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let plane_in = g.height * g.width;
    let mut out = vec![0.0; g.planes * oh * ow];
    for p in 0..g.planes {
        let xp = &x[p * plane_in..][..plane_in];
        for oy in 0..oh {
            let (y0, y1) = window(oy, g.stride, g.padding, g.kernel, g.height);
            for ox in 0..ow {
                let (x0, x1) = window(ox, g.stride, g.padding, g.kernel, g.width);
                let mut acc = 0.0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        acc += xp[iy * g.width + ix];
                    }
                }
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                out[(p * oh + oy) * ow + ox] = acc / count;
            }
        }
    }
    out
}

pub fn avg_pool_backward(gout: &[f64], g: &PoolGeom) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let plane_in = g.height * g.width;
    let mut gin = vec![0.0; g.planes * plane_in];
    for p in 0..g.planes {
        let gp = &mut gin[p * plane_in..][..plane_in];
        for oy in 0..oh {
            let (y0, y1) = window(oy, g.stride, g.padding, g.kernel, g.height);
            for ox in 0..ow {
                let (x0, x1) = window(ox, g.stride, g.padding, g.kernel, g.width);
                let share = gout[(p * oh + oy) * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        gp[iy * g.width + ix] += share;
                    }
                }
            }
        }
    }
    gin
}

#[inline]
fn window(o: usize, stride: usize, pad: usize, k: usize, len: usize) -> (usize, usize) {
    let start = (o * stride) as isize - pad as isize;
    let lo = start.max(0) as usize;
    let hi = ((start + k as isize).max(0) as usize).min(len);
    (lo, hi)
}

/// `y = x · wᵀ + b` with `x: (rows, k)`, `w: (out, k)`.
pub fn linear_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, rows: usize, k: usize, out: usize) -> Vec<f64> {
    linear_forward_with(Exec::default(), x, w, b, rows, k, out)
}

pub fn linear_forward_with(
    exec: Exec,
    x: &[f64],
    w: &[f64],
    b: Option<&[f64]>,
    rows: usize,
    k: usize,
    out: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; rows * out];
    for_each_chunk(exec, &mut y, out, rows * k * out, |r, dst| {
        let xr = &x[r * k..][..k];
        for (o, d) in dst.iter_mut().enumerate() {
            let wr = &w[o * k..][..k];
            let mut acc = b.map_or(0.0, |b| b[o]);
            for (a, c) in xr.iter().zip(wr) {
                acc += a * c;
            }
            *d = acc;
        }
    });
    y
}

/// Gradient of `x · wᵀ` with respect to `x`.
pub fn linear_backward_input(gout: &[f64], w: &[f64], rows: usize, k: usize, out: usize) -> Vec<f64> {
    let mut gx = vec![0.0; rows * k];
    for_each_chunk(Exec::default(), &mut gx, k, rows * k * out, |r, dst| {
        let gr = &gout[r * out..][..out];
        for (o, &gv) in gr.iter().enumerate() {
            if gv == 0.0 {
                continue;
            }
            let wr = &w[o * k..][..k];
            for (d, c) in dst.iter_mut().zip(wr) {
                *d += gv * c;
            }
        }
    });
    gx
}

/// Gradient of `x · wᵀ` with respect to `w`.
pub fn linear_backward_weight(gout: &[f64], x: &[f64], rows: usize, k: usize, out: usize) -> Vec<f64> {
    let mut gw = vec![0.0; out * k];
    for_each_chunk(Exec::default(), &mut gw, k, rows * k * out, |o, dst| {
        for r in 0..rows {
            let gv = gout[r * out + o];
            if gv == 0.0 {
                continue;
            }
            let xr = &x[r * k..][..k];
            for (d, a) in dst.iter_mut().zip(xr) {
                *d += gv * a;
            }
        }
    });
    gw
}
