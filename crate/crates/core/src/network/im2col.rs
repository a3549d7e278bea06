//! Patch extraction for convolutions. `Im2Col` turns a `(B, C, H, W)` input
//! into a `(C * k * k + 1, B * Ho * Wo)` column matrix whose last row is all
//! ones, so a convolution with bias becomes a single matmul
//! `[W | b] @ cols`. Its gradient is the scatter-add `Col2Im`.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Geometry {
    pub fn out_size(&self) -> (usize, usize) {
        let f = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (f(self.height), f(self.width))
    }

    /// Rows of the column matrix, including the ones row.
    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel + 1
    }

    pub fn cols(&self) -> usize {
        let (ho, wo) = self.out_size();
        self.batch * ho * wo
    }

    /// Output columns `[lo, hi)` whose input column `ox * stride + kx - padding`
    /// lies inside the image.
    fn valid_range(&self, k: usize, out: usize, extent: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        let hi = if extent + p > k { ((extent - 1 + p - k) / s + 1).min(out) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Calls `f(dst_start, src_start, len)` for every run of in-bounds
    /// entries. With stride 1 runs are contiguous on both sides; otherwise
    /// the source advances by `stride` per element.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = self.out_size();
        let k = self.kernel;
        let ncols = self.cols();
        let plane = ho * wo;
        for b in 0..self.batch {
            for c in 0..self.channels {
                for ky in 0..k {
                    let (oy_lo, oy_hi) = self.valid_range(ky, ho, self.height);
                    for kx in 0..k {
                        let (ox_lo, ox_hi) = self.valid_range(kx, wo, self.width);
                        if ox_hi == ox_lo {
                            continue;
                        }
                        let row = (c * k + ky) * k + kx;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * self.stride + ky - self.padding;
                            let ix = ox_lo * self.stride + kx - self.padding;
                            let src = ((b * self.channels + c) * self.height + iy) * self.width + ix;
                            let dst = row * ncols + b * plane + oy * wo + ox_lo;
                            f(dst, src, ox_hi - ox_lo);
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("patch extraction needs a contiguous input"),
    }
}

trait Elem: Copy + Default + std::ops::AddAssign {
    const ONE: Self;
}

impl Elem for f32 {
    const ONE: Self = 1.0;
}

impl Elem for f64 {
    const ONE: Self = 1.0;
}

fn im2col<T: Elem>(x: &[T], g: &Geometry) -> Vec<T> {
    let ncols = g.cols();
    let mut out = vec![T::default(); g.rows() * ncols];
    let s = g.stride;
    g.for_each_run(|dst, src, len| {
        if s == 1 {
            out[dst..dst + len].copy_from_slice(&x[src..src + len]);
        } else {
            for (i, o) in out[dst..dst + len].iter_mut().enumerate() {
                *o = x[src + i * s];
            }
        }
    });
    let last = (g.rows() - 1) * ncols;
    out[last..].fill(T::ONE);
    out
}

fn col2im<T: Elem>(cols: &[T], g: &Geometry) -> Vec<T> {
    let mut out = vec![T::default(); g.batch * g.channels * g.height * g.width];
    let s = g.stride;
    g.for_each_run(|dst, src, len| {
        let from = &cols[dst..dst + len];
        if s == 1 {
            for (o, &v) in out[src..src + len].iter_mut().zip(from) {
                *o += v;
            }
        } else {
            for (i, &v) in from.iter().enumerate() {
                out[src + i * s] += v;
            }
        }
    });
    out
}

pub(crate) struct Im2Col(pub Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        if layout.shape().dims() != [g.batch, g.channels, g.height, g.width] {
            candle_core::bail!("im2col: input {:?} does not match {g:?}", layout.shape());
        }
        let shape = Shape::from((g.rows(), g.cols()));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous(v, layout)?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous(v, layout)?, g)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

struct Col2Im(Geometry);

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from((g.batch, g.channels, g.height, g.width));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous(v, layout)?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous(v, layout)?, g)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, shape))
    }
}
