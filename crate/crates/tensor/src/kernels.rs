//! Raw CPU kernels over contiguous `(B, C, D, H, W)` buffers.
//!
//! Two-dimensional feature maps use `D = 1` with unit kernel depth, so a
//! single volumetric implementation serves both branches.

use crate::scalar::{gemm, MatRef, Scalar};

/// Upper bound on the number of elements in one im2col buffer.
const COL_BUDGET: usize = 1 << 22;

/// Kernel size, stride and zero padding of a volumetric convolution or pool,
/// ordered `[depth, height, width]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl WindowSpec {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Self {
        WindowSpec {
            kernel,
            stride,
            padding,
        }
    }

    /// Planar window: unit depth, equal height and width.
    pub fn planar(kernel: usize, stride: usize, padding: usize) -> Self {
        WindowSpec::new([1, kernel, kernel], [1, stride, stride], [0, padding, padding])
    }

    /// Cubic window with independent temporal stride.
    pub fn cubic(kernel: usize, temporal_stride: usize, stride: usize, padding: usize) -> Self {
        WindowSpec::new(
            [kernel; 3],
            [temporal_stride, stride, stride],
            [padding; 3],
        )
    }

    /// Output extent for the given input extent, or `None` when the window
    /// does not fit.
    pub fn output_dims(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if self.stride[a] == 0 || padded < self.kernel[a] {
                return None;
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub spec: WindowSpec,
}

/// Consecutive output columns sharing batch item, output depth and output
/// row, so only the innermost output coordinate varies.
#[derive(Clone, Copy)]
struct Run {
    /// First column of the run within the current chunk.
    col: usize,
    len: usize,
    base: usize,
    od: usize,
    oy: usize,
    ox0: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.spec.kernel.iter().product::<usize>()
    }

    fn out_positions(&self) -> usize {
        self.output.iter().product()
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn chunk_cols(&self) -> usize {
        (COL_BUDGET / self.k().max(1)).max(1)
    }

    /// Splits global columns `start..start + n` into runs.
    fn runs(&self, start: usize, n: usize, out: &mut Vec<Run>) {
        out.clear();
        let p = self.out_positions();
        let [_, oh, ow] = self.output;
        let vol = self.cin * self.in_volume();
        let mut g = start;
        while g < start + n {
            let (b, pos) = (g / p, g % p);
            let ox0 = pos % ow;
            let len = (ow - ox0).min(start + n - g);
            out.push(Run {
                col: g - start,
                len,
                base: b * vol,
                od: pos / (oh * ow),
                oy: (pos / ow) % oh,
                ox0,
            });
            g += len;
        }
    }
}

/// In-bounds part of one im2col row segment: columns `lo..hi` of the run
/// read input offsets `src, src + stride, ...`.
struct Span {
    lo: usize,
    hi: usize,
    src: usize,
    stride: usize,
}

/// Visits every im2col row segment (`row * n + run.col`, run length) with
/// the span of it that lies inside the input; padding taps fall outside.
#[inline]
fn for_each_segment(geom: &ConvGeom, runs: &[Run], n: usize, mut f: impl FnMut(usize, usize, Option<Span>)) {
    let [kd, kh, kw] = geom.spec.kernel;
    let [sd, sh, sw] = geom.spec.stride;
    let [pd, ph, pw] = geom.spec.padding;
    let [id, ih, iw] = geom.input;
    let hw = ih * iw;
    let dhw = id * hw;
    let mut row = 0;
    for ci in 0..geom.cin {
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    // ox values whose tap x = ox*sw + c - pw lands in [0, iw)
                    let ox_lo = pw.saturating_sub(c).div_ceil(sw);
                    let ox_hi = if iw + pw > c { (iw + pw - c - 1) / sw + 1 } else { 0 };
                    for r in runs {
                        let dst = row * n + r.col;
                        let z = (r.od * sd + a).wrapping_sub(pd);
                        let y = (r.oy * sh + b).wrapping_sub(ph);
                        if z >= id || y >= ih {
                            f(dst, r.len, None);
                            continue;
                        }
                        let lo = ox_lo.max(r.ox0).min(r.ox0 + r.len);
                        let hi = ox_hi.min(r.ox0 + r.len).max(lo);
                        let span = (lo < hi).then(|| Span {
                            lo: lo - r.ox0,
                            hi: hi - r.ox0,
                            src: r.base + ci * dhw + z * hw + y * iw + lo * sw + c - pw,
                            stride: sw,
                        });
                        f(dst, r.len, span);
                    }
                    row += 1;
                }
            }
        }
    }
}

fn im2col<T: Scalar>(geom: &ConvGeom, x: &[T], runs: &[Run], n: usize, col: &mut [T]) {
    for_each_segment(geom, runs, n, |dst, len, span| {
        let seg = &mut col[dst..dst + len];
        match span {
            None => seg.fill(T::zero()),
            Some(s) => {
                seg[..s.lo].fill(T::zero());
                seg[s.hi..].fill(T::zero());
                let m = s.hi - s.lo;
                if s.stride == 1 {
                    seg[s.lo..s.hi].copy_from_slice(&x[s.src..s.src + m]);
                } else {
                    for (d, v) in seg[s.lo..s.hi].iter_mut().zip(x[s.src..].iter().step_by(s.stride)) {
                        *d = *v;
                    }
                }
            }
        }
    });
}

fn col2im<T: Scalar>(geom: &ConvGeom, col: &[T], runs: &[Run], n: usize, dx: &mut [T]) {
    for_each_segment(geom, runs, n, |dst, _, span| {
        if let Some(s) = span {
            let seg = &col[dst + s.lo..dst + s.hi];
            for (v, d) in seg.iter().zip(dx[s.src..].iter_mut().step_by(s.stride)) {
                *d += *v;
            }
        }
    });
}

pub(crate) fn conv_forward<T: Scalar>(
    geom: &ConvGeom,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let k = geom.k();
    let p = geom.out_positions();
    let total = geom.batch * p;
    let cout = geom.cout;
    let mut out = vec![T::zero(); geom.batch * cout * p];
    let chunk = geom.chunk_cols().min(total.max(1));
    let mut col = vec![T::zero(); k * chunk];
    let mut tmp = vec![T::zero(); cout * chunk];
    let mut runs = Vec::new();
    let wm = MatRef::row_major(w, cout, k);
    let mut start = 0;
    while start < total {
        let n = chunk.min(total - start);
        geom.runs(start, n, &mut runs);
        im2col(geom, x, &runs, n, &mut col[..k * n]);
        gemm(
            wm,
            MatRef::row_major(&col[..k * n], k, n),
            T::zero(),
            &mut tmp[..cout * n],
        );
        for j in 0..n {
            let (b, pos) = ((start + j) / p, (start + j) % p);
            let base = b * cout * p + pos;
            for co in 0..cout {
                let bv = bias.map_or(T::zero(), |bs| bs[co]);
                out[base + co * p] = tmp[co * n + j] + bv;
            }
        }
        start += n;
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv_backward<T: Scalar>(
    geom: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let [need_dx, need_dw, need_db] = need;
    let k = geom.k();
    let p = geom.out_positions();
    let total = geom.batch * p;
    let cout = geom.cout;
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let mut db = need_db.then(|| vec![T::zero(); cout]);
    if !(need_dx || need_dw || need_db) {
        return ConvGrads { dx, dw, db };
    }
    let chunk = geom.chunk_cols().min(total.max(1));
    let mut col = vec![T::zero(); k * chunk];
    let mut dtmp = vec![T::zero(); cout * chunk];
    let mut runs = Vec::new();
    let wm = MatRef::row_major(w, cout, k);
    let mut start = 0;
    while start < total {
        let n = chunk.min(total - start);
        for j in 0..n {
            let (b, pos) = ((start + j) / p, (start + j) % p);
            let base = b * cout * p + pos;
            for co in 0..cout {
                dtmp[co * n + j] = dy[base + co * p];
            }
        }
        let dt = MatRef::row_major(&dtmp[..cout * n], cout, n);
        if let Some(db) = db.as_mut() {
            for co in 0..cout {
                db[co] += dtmp[co * n..(co + 1) * n].iter().copied().sum::<T>();
            }
        }
        if need_dw || need_dx {
            geom.runs(start, n, &mut runs);
        }
        if let Some(dw) = dw.as_mut() {
            im2col(geom, x, &runs, n, &mut col[..k * n]);
            gemm(dt, MatRef::row_major(&col[..k * n], k, n).t(), T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(wm.t(), dt, T::zero(), &mut col[..k * n]);
            col2im(geom, &col[..k * n], &runs, n, dx);
        }
        start += n;
    }
    ConvGrads { dx, dw, db }
}

/// Max pooling over `planes` independent `(D, H, W)` volumes; padding never
/// wins the max. Returns the output and, per output element, the flat input
/// index of its maximum.
pub(crate) fn max_pool<T: Scalar>(
    x: &[T],
    planes: usize,
    input: [usize; 3],
    output: [usize; 3],
    spec: &WindowSpec,
) -> (Vec<T>, Vec<usize>) {
    let [id, ih, iw] = input;
    let [od, oh, ow] = output;
    let in_vol = id * ih * iw;
    let out_vol = od * oh * ow;
    let mut out = vec![T::zero(); planes * out_vol];
    let mut arg = vec![0usize; planes * out_vol];
    for pl in 0..planes {
        let xb = pl * in_vol;
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for a in 0..spec.kernel[0] {
                        let zi = (z * spec.stride[0] + a) as isize - spec.padding[0] as isize;
                        if zi < 0 || zi as usize >= id {
                            continue;
                        }
                        for b in 0..spec.kernel[1] {
                            let yi = (y * spec.stride[1] + b) as isize - spec.padding[1] as isize;
                            if yi < 0 || yi as usize >= ih {
                                continue;
                            }
                            for c in 0..spec.kernel[2] {
                                let xi =
                                    (xo * spec.stride[2] + c) as isize - spec.padding[2] as isize;
                                if xi < 0 || xi as usize >= iw {
                                    continue;
                                }
                                let idx = xb + (zi as usize * ih + yi as usize) * iw + xi as usize;
                                if best_i == usize::MAX || x[idx] > best {
                                    best = x[idx];
                                    best_i = idx;
                                }
                            }
                        }
                    }
                    let o = pl * out_vol + (z * oh + y) * ow + xo;
                    out[o] = best;
                    arg[o] = best_i;
                }
            }
        }
    }
    (out, arg)
}

/// Bin `[start, end)` of output cell `i` when pooling `input` cells into
/// `output` cells adaptively.
#[inline]
pub(crate) fn adaptive_bin(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = (i * input) / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

/// Calls `f(output_index, input_index, 1 / bin_size)` for every input cell
/// of every adaptive-average bin.
fn for_each_adaptive<T: Scalar>(
    planes: usize,
    input: [usize; 3],
    output: [usize; 3],
    mut f: impl FnMut(usize, usize, T),
) {
    let [id, ih, iw] = input;
    let [od, oh, ow] = output;
    let in_vol = id * ih * iw;
    let out_vol = od * oh * ow;
    for pl in 0..planes {
        for z in 0..od {
            let (z0, z1) = adaptive_bin(z, id, od);
            for y in 0..oh {
                let (y0, y1) = adaptive_bin(y, ih, oh);
                for xo in 0..ow {
                    let (x0, x1) = adaptive_bin(xo, iw, ow);
                    let inv = T::one() / T::cast(((z1 - z0) * (y1 - y0) * (x1 - x0)) as f64);
                    let o = pl * out_vol + (z * oh + y) * ow + xo;
                    for zi in z0..z1 {
                        for yi in y0..y1 {
                            let row = pl * in_vol + (zi * ih + yi) * iw;
                            for xi in x0..x1 {
                                f(o, row + xi, inv);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adaptive average pooling; when `input == 2 * output` along an axis this is
/// exactly a stride-2 average over pairs.
pub(crate) fn adaptive_avg_pool<T: Scalar>(
    x: &[T],
    planes: usize,
    input: [usize; 3],
    output: [usize; 3],
) -> Vec<T> {
    let mut out = vec![T::zero(); planes * output.iter().product::<usize>()];
    for_each_adaptive(planes, input, output, |o, i, inv: T| out[o] += x[i] * inv);
    out
}

pub(crate) fn adaptive_avg_pool_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    input: [usize; 3],
    output: [usize; 3],
) -> Vec<T> {
    let mut dx = vec![T::zero(); planes * input.iter().product::<usize>()];
    for_each_adaptive(planes, input, output, |o, i, inv: T| dx[i] += dy[o] * inv);
    dx
}

