//! 1-D, 2-D and 3-D convolution through one im2col + GEMM kernel. Lower
//! ranks are embedded in the 3-D case with unit leading extents.

use crate::error::{Result, TensorError};
use crate::par;
use crate::scalar::Scalar;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

/// Columns per GEMM chunk; batches of small images are packed side by side.
const TARGET_COLS: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvGeom {
    pub dims: usize,
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

/// `floor((in + 2·pad − k) / stride) + 1`, or `None` when the kernel does not fit.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if kernel > padded || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl ConvGeom {
    pub fn new(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: &[usize],
        pad: &[usize],
    ) -> Result<Self> {
        let dims = kernel_shape.len().checked_sub(2).filter(|d| (1..=3).contains(d)).ok_or_else(|| {
            TensorError::shape("conv", format!("kernel must have rank 3..=5, got {kernel_shape:?}"))
        })?;
        if input_shape.len() != dims + 2 {
            return Err(TensorError::shape(
                "conv",
                format!("{dims}-D kernel needs input rank {}, got {input_shape:?}", dims + 2),
            ));
        }
        if stride.len() != dims || pad.len() != dims {
            return Err(TensorError::shape("conv", "stride/padding length must equal spatial rank"));
        }
        let (batch, cin, cout) = (input_shape[0], input_shape[1], kernel_shape[0]);
        if kernel_shape[1] != cin {
            return Err(TensorError::shape(
                "conv",
                format!("channel dim: input has {cin} channels, kernel expects {}", kernel_shape[1]),
            ));
        }
        let lead = 3 - dims;
        let mut g = ConvGeom {
            dims,
            batch,
            cin,
            cout,
            input: [1; 3],
            kernel: [1; 3],
            stride: [1; 3],
            pad: [0; 3],
            output: [1; 3],
        };
        for d in 0..dims {
            let (i, k, s, p) = (input_shape[2 + d], kernel_shape[2 + d], stride[d], pad[d]);
            if s == 0 {
                return Err(TensorError::shape("conv", format!("spatial dim {d}: stride must be ≥ 1")));
            }
            let o = conv_out_len(i, k, s, p).ok_or_else(|| {
                TensorError::shape(
                    "conv",
                    format!("spatial dim {d}: kernel {k} larger than padded input {}", i + 2 * p),
                )
            })?;
            g.input[lead + d] = i;
            g.kernel[lead + d] = k;
            g.stride[lead + d] = s;
            g.pad[lead + d] = p;
            g.output[lead + d] = o;
        }
        Ok(g)
    }

    pub fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_plane(&self) -> usize {
        self.output.iter().product()
    }

    pub fn patch(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut s = vec![self.batch, self.cout];
        s.extend_from_slice(&self.output[3 - self.dims..]);
        s
    }

    fn images_per_chunk(&self) -> usize {
        TARGET_COLS.div_ceil(self.out_plane()).clamp(1, self.batch)
    }
}

/// Output positions `[lo, hi)` along one axis whose input index
/// `o·stride + tap − pad` falls inside `[0, n)`.
#[inline]
fn valid_span(out: usize, n: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    // o·s + tap − pad ≥ 0  ⇔  o ≥ ceil((pad − tap) / s)
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    // o·s + tap − pad ≤ n − 1  ⇔  o ≤ (n − 1 + pad − tap) / s
    let hi = if n + pad > tap { ((n - 1 + pad - tap) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Visits every contiguous run of one im2col row: `f(dst_start, src_start, len)`
/// copies `len` values from input offset `src_start` with the input stride
/// of the innermost axis. Positions not visited are padding.
#[inline(always)]
fn for_each_run(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize)) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.output;
    let in_plane = g.in_plane();
    let out_plane = g.out_plane();
    let mut row = 0;
    for ci in 0..g.cin {
        let cbase = ci * in_plane;
        for a in 0..kd {
            let (z0, z1) = valid_span(od, id, sd, a, pd);
            for b in 0..kh {
                let (y0, y1) = valid_span(oh, ih, sh, b, ph);
                for c in 0..kw {
                    let (x0, x1) = valid_span(ow, iw, sw, c, pw);
                    if x1 > x0 {
                        for z in z0..z1 {
                            let iz = z * sd + a - pd;
                            for y in y0..y1 {
                                let iy = y * sh + b - ph;
                                let src = cbase + (iz * ih + iy) * iw + x0 * sw + c - pw;
                                let dst = row * out_plane + (z * oh + y) * ow + x0;
                                f(dst, src, x1 - x0, sw);
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Writes one image's patches into `cols` (row-major, leading dimension `ld`)
/// starting at column `off`. Every element of the image's columns is written,
/// padding included, so `cols` may hold stale data.
fn im2col<S: Scalar>(g: &ConvGeom, img: &[S], cols: &mut [S], ld: usize, off: usize) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.output;
    let in_plane = g.in_plane();
    let mut row = 0;
    for ci in 0..g.cin {
        let cbase = ci * in_plane;
        for a in 0..kd {
            let (z0, z1) = valid_span(od, id, sd, a, pd);
            for b in 0..kh {
                let (y0, y1) = valid_span(oh, ih, sh, b, ph);
                for c in 0..kw {
                    let (x0, x1) = valid_span(ow, iw, sw, c, pw);
                    let dst = &mut cols[row * ld + off..][..od * oh * ow];
                    for z in 0..od {
                        for y in 0..oh {
                            let line = &mut dst[(z * oh + y) * ow..][..ow];
                            if z < z0 || z >= z1 || y < y0 || y >= y1 || x1 <= x0 {
                                line.fill(S::zero());
                                continue;
                            }
                            let (iz, iy) = (z * sd + a - pd, y * sh + b - ph);
                            let src = cbase + (iz * ih + iy) * iw + x0 * sw + c - pw;
                            line[..x0].fill(S::zero());
                            line[x1..].fill(S::zero());
                            let d = &mut line[x0..x1];
                            if sw == 1 {
                                d.copy_from_slice(&img[src..src + d.len()]);
                            } else {
                                for (j, v) in d.iter_mut().enumerate() {
                                    *v = img[src + j * sw];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<S: Scalar>(g: &ConvGeom, cols: &[S], ld: usize, off: usize, img: &mut [S]) {
    let out_plane = g.out_plane();
    for_each_run(g, |dst, src, len, stride| {
        let (row, col) = (dst / out_plane, dst % out_plane);
        let s = &cols[row * ld + off + col..][..len];
        if stride == 1 {
            for (v, &d) in img[src..src + len].iter_mut().zip(s) {
                *v += d;
            }
        } else {
            for (j, &d) in s.iter().enumerate() {
                img[src + j * stride] += d;
            }
        }
    });
}

/// Scratch buffers are reused across the GEMM chunks of one task. The task
/// count is fixed, so results do not depend on the number of threads.
const TASKS: usize = 16;

/// Images per task, a multiple of the images per GEMM chunk.
fn images_per_task(g: &ConvGeom) -> usize {
    let per = g.images_per_chunk();
    g.batch.div_ceil(per).div_ceil(TASKS) * per
}

pub(crate) fn forward<S: Scalar>(g: &ConvGeom, x: &[S], k: &[S], bias: Option<&[S]>) -> Vec<S> {
    let (in_img, out_p, kk, cout) = (g.cin * g.in_plane(), g.out_plane(), g.patch(), g.cout);
    let per = g.images_per_chunk();
    let per_task = images_per_task(g);
    let mut out = vec![S::zero(); g.batch * cout * out_p];
    par::for_each_chunk_mut(&mut out, per_task * cout * out_p, |ti, task| {
        let mut cols = vec![S::zero(); kk * per * out_p];
        let mut tmp = vec![S::zero(); cout * per * out_p];
        for (ci, chunk) in task.chunks_mut(per * cout * out_p).enumerate() {
            let n_img = chunk.len() / (cout * out_p);
            let first = ti * per_task + ci * per;
            let ld = n_img * out_p;
            for j in 0..n_img {
                let img = &x[(first + j) * in_img..(first + j + 1) * in_img];
                im2col(g, img, &mut cols, ld, j * out_p);
            }
            S::gemm(cout, kk, ld, k, kk as isize, 1, &cols, ld as isize, 1, S::zero(), &mut tmp, ld as isize, 1);
            for j in 0..n_img {
                for co in 0..cout {
                    let b = bias.map_or(S::zero(), |b| b[co]);
                    let dst = &mut chunk[(j * cout + co) * out_p..(j * cout + co + 1) * out_p];
                    let src = &tmp[co * ld + j * out_p..co * ld + (j + 1) * out_p];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s + b;
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn backward<S: Scalar>(
    g: &ConvGeom,
    x: &[S],
    k: &[S],
    dy: &[S],
    want_x: bool,
    want_k: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    if !want_x && !want_k {
        return (None, None);
    }
    let (in_img, out_p, kk, cout) = (g.cin * g.in_plane(), g.out_plane(), g.patch(), g.cout);
    let per = g.images_per_chunk();
    let per_task = images_per_task(g);
    let n_tasks = g.batch.div_ceil(per_task);
    let mut dx_all = vec![S::zero(); if want_x { g.batch * in_img } else { 0 }];
    let mut dk_parts = vec![Vec::new(); n_tasks];
    let task = |ti: usize, dx: &mut [S], dk_out: &mut Vec<S>| {
        let start = ti * per_task;
        let end = (start + per_task).min(g.batch);
        let mut dyc = vec![S::zero(); cout * per * out_p];
        let mut cols = vec![S::zero(); if want_k { kk * per * out_p } else { 0 }];
        let mut dcols = vec![S::zero(); if want_x { kk * per * out_p } else { 0 }];
        let mut dk = vec![S::zero(); if want_k { cout * kk } else { 0 }];
        for first in (start..end).step_by(per) {
            let n_img = per.min(end - first);
            let ld = n_img * out_p;
            for j in 0..n_img {
                for co in 0..cout {
                    let src = &dy[((first + j) * cout + co) * out_p..][..out_p];
                    dyc[co * ld + j * out_p..][..out_p].copy_from_slice(src);
                }
            }
            if want_k {
                for j in 0..n_img {
                    let img = &x[(first + j) * in_img..(first + j + 1) * in_img];
                    im2col(g, img, &mut cols, ld, j * out_p);
                }
                S::gemm(cout, ld, kk, &dyc, ld as isize, 1, &cols, 1, ld as isize, S::one(), &mut dk, kk as isize, 1);
            }
            if want_x {
                S::gemm(kk, cout, ld, k, 1, kk as isize, &dyc, ld as isize, 1, S::zero(), &mut dcols, ld as isize, 1);
                for j in 0..n_img {
                    let o = (first - start + j) * in_img;
                    col2im(g, &dcols, ld, j * out_p, &mut dx[o..o + in_img]);
                }
            }
        }
        *dk_out = dk;
    };
    if want_x {
        let parts = std::sync::Mutex::new(&mut dk_parts);
        par::for_each_chunk_mut(&mut dx_all, per_task * in_img, |ti, dx| {
            let mut dk = Vec::new();
            task(ti, dx, &mut dk);
            parts.lock().expect("no task panicked")[ti] = dk;
        });
    } else {
        let done = par::map_indexed(n_tasks, |ti| {
            let mut dk = Vec::new();
            task(ti, &mut [], &mut dk);
            dk
        });
        dk_parts = done;
    }
    let dk_all = want_k.then(|| {
        let mut all = vec![S::zero(); cout * kk];
        for part in &dk_parts {
            for (a, &d) in all.iter_mut().zip(part) {
                *a += d;
            }
        }
        all
    });
    (want_x.then_some(dx_all), dk_all)
}

pub(crate) fn grad_bias<S: Scalar>(g: &ConvGeom, dy: &[S]) -> Vec<S> {
    let out_p = g.out_plane();
    let mut db = vec![S::zero(); g.cout];
    for (i, plane) in dy.chunks(out_p).enumerate() {
        db[i % g.cout] += plane.iter().copied().sum::<S>();
    }
    db
}

impl<S: Scalar> Tape<S> {
    /// Convolution of `x (batch, cin, spatial...)` with `kernel (cout, cin, k...)`.
    /// The spatial rank (1, 2 or 3) is taken from the kernel.
    pub fn conv(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: &[usize],
        pad: &[usize],
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(kernel), stride, pad)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                return Err(TensorError::shape(
                    "conv",
                    format!("bias shape {:?} != [{}]", self.shape(b), geom.cout),
                ));
            }
        }
        let y = forward(
            &geom,
            self.value(x).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(geom.output_shape(), y)?;
        let rg = self.rg(x) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(t, rg, Op::Conv { x, k: kernel, b: bias, geom }))
    }
}
