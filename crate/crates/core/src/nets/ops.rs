//! CPU kernels with hand-written backward passes.
//!
//! Candle's CPU convolution pays a large fixed cost per call and computes the
//! kernel gradient as a very wide convolution; padding and upsampling built
//! from views are slow to differentiate. Generator training runs hundreds of
//! these per step, so they are implemented directly here.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Layout, Shape, Tensor};

use crate::error::{Error, Result};

trait Elem: Copy + Default + std::ops::AddAssign + 'static {
    /// `c = a · b + beta · c` on row-major slices with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );
    fn zero() -> Self {
        Self::default()
    }
    fn one() -> Self;
}

impl Elem for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
    ) {
        // SAFETY: callers pass slices that cover every strided index.
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
                c.as_mut_ptr(), n as isize, 1,
            )
        }
    }
    fn one() -> f32 {
        1.0
    }
}

impl Elem for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
    ) {
        // SAFETY: callers pass slices that cover every strided index.
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
                c.as_mut_ptr(), n as isize, 1,
            )
        }
    }
    fn one() -> f64 {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    reflect: bool,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn new(
        x: (usize, usize, usize, usize),
        wt: (usize, usize, usize, usize),
        stride: usize,
        pad: usize,
        reflect: bool,
    ) -> Result<Self> {
        let (n, c, h, w) = x;
        let (o, ci, kh, kw) = wt;
        if ci != c || kh != kw {
            return Err(Error::Shape(format!(
                "conv kernel {o}x{ci}x{kh}x{kw} does not fit input with {c} channels"
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw || stride == 0 {
            return Err(Error::Shape(format!(
                "conv input {h}x{w} too small for kernel {kh} with padding {pad}"
            )));
        }
        if reflect && (pad >= h || pad >= w) {
            return Err(Error::Shape(format!(
                "reflection padding {pad} needs spatial size > {pad}, got {h}x{w}"
            )));
        }
        Ok(Geom {
            n,
            c,
            h,
            w,
            o,
            k: kh,
            stride,
            pad,
            reflect,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Input coordinate of output position `o` and kernel tap `t`; `None`
    /// for zero padding.
    #[inline]
    fn src(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let p = (o * self.stride + t) as isize - self.pad as isize;
        let l = limit as isize;
        if self.reflect {
            let p = if p < 0 { -p } else if p >= l { 2 * (l - 1) - p } else { p };
            Some(p as usize)
        } else {
            (p >= 0 && p < l).then_some(p as usize)
        }
    }

    /// Source index for every (tap, output position) pair along one axis;
    /// `usize::MAX` marks zero padding.
    fn table(&self, out: usize, limit: usize) -> Vec<usize> {
        (0..self.k)
            .flat_map(|t| (0..out).map(move |o| (t, o)))
            .map(|(t, o)| self.src(o, t, limit).unwrap_or(usize::MAX))
            .collect()
    }

    fn tables(&self) -> (Vec<usize>, Vec<usize>) {
        (self.table(self.oh, self.h), self.table(self.ow, self.w))
    }

    /// Unfolds one sample (`c × h × w`) into `rows × cols`.
    fn im2col<T: Elem>(&self, x: &[T], cols: &mut [T], (ys, xs): &(Vec<usize>, Vec<usize>)) {
        let (k, oh, ow) = (self.k, self.oh, self.ow);
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    let xmap = &xs[kj * ow..(kj + 1) * ow];
                    for (y, &sy) in ys[ki * oh..(ki + 1) * oh].iter().enumerate() {
                        let out = &mut dst[y * ow..(y + 1) * ow];
                        if sy == usize::MAX {
                            out.fill(T::zero());
                            continue;
                        }
                        let line = &plane[sy * self.w..(sy + 1) * self.w];
                        for (o, &sx) in out.iter_mut().zip(xmap) {
                            *o = if sx == usize::MAX { T::zero() } else { line[sx] };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `rows × cols` back into one sample (`c × h × w`).
    fn col2im<T: Elem>(&self, cols: &[T], x: &mut [T], (ys, xs): &(Vec<usize>, Vec<usize>)) {
        let (k, oh, ow) = (self.k, self.oh, self.ow);
        for c in 0..self.c {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    let xmap = &xs[kj * ow..(kj + 1) * ow];
                    for (y, &sy) in ys[ki * oh..(ki + 1) * oh].iter().enumerate() {
                        if sy == usize::MAX {
                            continue;
                        }
                        let line = &mut plane[sy * self.w..(sy + 1) * self.w];
                        for (v, &sx) in src[y * ow..(y + 1) * ow].iter().zip(xmap) {
                            if sx != usize::MAX {
                                line[sx] += *v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward<T: Elem>(&self, x: &[T], w: &[T]) -> Vec<T> {
        let (rows, cols) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); self.n * self.o * cols];
        let mut buf = vec![T::zero(); rows * cols];
        let tables = self.tables();
        let per_in = self.c * self.h * self.w;
        for s in 0..self.n {
            let xs = &x[s * per_in..(s + 1) * per_in];
            let ys = &mut out[s * self.o * cols..(s + 1) * self.o * cols];
            if self.k == 1 && self.stride == 1 && self.pad == 0 {
                T::gemm(self.o, rows, cols, w, rows as isize, 1, xs, cols as isize, 1, T::zero(), ys);
            } else {
                self.im2col(xs, &mut buf, &tables);
                T::gemm(self.o, rows, cols, w, rows as isize, 1, &buf, cols as isize, 1, T::zero(), ys);
            }
        }
        out
    }

    /// Gradient w.r.t. the input, given the output gradient `g`.
    fn grad_input<T: Elem>(&self, g: &[T], w: &[T]) -> Vec<T> {
        let (rows, cols) = (self.rows(), self.cols());
        let per_in = self.c * self.h * self.w;
        let mut dx = vec![T::zero(); self.n * per_in];
        let mut buf = vec![T::zero(); rows * cols];
        let tables = self.tables();
        for s in 0..self.n {
            let gs = &g[s * self.o * cols..(s + 1) * self.o * cols];
            let dxs = &mut dx[s * per_in..(s + 1) * per_in];
            // wᵀ (rows × o) · g (o × cols)
            if self.k == 1 && self.stride == 1 && self.pad == 0 {
                T::gemm(rows, self.o, cols, w, 1, rows as isize, gs, cols as isize, 1, T::zero(), dxs);
            } else {
                T::gemm(rows, self.o, cols, w, 1, rows as isize, gs, cols as isize, 1, T::zero(), &mut buf);
                self.col2im(&buf, dxs, &tables);
            }
        }
        dx
    }

    /// Gradient w.r.t. the kernel, summed over the batch.
    fn grad_weight<T: Elem>(&self, x: &[T], g: &[T]) -> Vec<T> {
        let (rows, cols) = (self.rows(), self.cols());
        let per_in = self.c * self.h * self.w;
        let mut dw = vec![T::zero(); self.o * rows];
        let mut buf = vec![T::zero(); rows * cols];
        let tables = self.tables();
        for s in 0..self.n {
            let xs = &x[s * per_in..(s + 1) * per_in];
            let gs = &g[s * self.o * cols..(s + 1) * self.o * cols];
            let beta = if s == 0 { T::zero() } else { T::one() };
            // g (o × cols) · colsᵀ (cols × rows)
            let unfolded: &[T] = if self.k == 1 && self.stride == 1 && self.pad == 0 {
                xs
            } else {
                self.im2col(xs, &mut buf, &tables);
                &buf
            };
            T::gemm(self.o, cols, rows, gs, cols as isize, 1, unfolded, 1, cols as isize, beta, &mut dw);
        }
        dw
    }
}

fn slice<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => Err(candle_core::Error::Msg("conv operands must be contiguous".into())),
    }
}

fn dims4(l: &Layout) -> Result<(usize, usize, usize, usize)> {
    Ok(l.shape().dims4()?)
}

macro_rules! dispatch {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                let ($a, $b) = (slice(a, $l1)?, slice(b, $l2)?);
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                let ($a, $b) = (slice(a, $l1)?, slice(b, $l2)?);
                CpuStorage::F64($body)
            }
            _ => {
                return Err(candle_core::Error::Msg(
                    "conv supports matching f32 or f64 operands".into(),
                ))
            }
        }
    };
}

fn to_candle(e: Error) -> candle_core::Error {
    candle_core::Error::Msg(e.to_string())
}

/// Forward op on (input, kernel).
struct ConvFwd {
    stride: usize,
    pad: usize,
    reflect: bool,
}

/// Input gradient on (output gradient, kernel).
struct ConvGradInput {
    geom: Geom,
}

/// Kernel gradient on (input, output gradient).
struct ConvGradWeight {
    geom: Geom,
}

impl CustomOp2 for ConvFwd {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geom::new(
            dims4(l1).map_err(to_candle)?,
            dims4(l2).map_err(to_candle)?,
            self.stride,
            self.pad,
            self.reflect,
        )
        .map_err(to_candle)?;
        let out = dispatch!(s1, l1, s2, l2, |x, w| g.forward(x, w));
        Ok((out, Shape::from((g.n, g.o, g.oh, g.ow))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let geom = Geom::new(x.dims4()?, w.dims4()?, self.stride, self.pad, self.reflect)
            .map_err(to_candle)?;
        let grad = grad.contiguous()?;
        let dx = grad.apply_op2_no_bwd(&w.contiguous()?, &ConvGradInput { geom })?;
        let dw = x.contiguous()?.apply_op2_no_bwd(&grad, &ConvGradWeight { geom })?;
        Ok((Some(dx), Some(dw)))
    }
}

impl CustomOp2 for ConvGradInput {
    fn name(&self) -> &'static str {
        "im2col-conv2d-grad-input"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.geom;
        let out = dispatch!(s1, l1, s2, l2, |grad, w| g.grad_input(grad, w));
        Ok((out, Shape::from((g.n, g.c, g.h, g.w))))
    }
}

impl CustomOp2 for ConvGradWeight {
    fn name(&self) -> &'static str {
        "im2col-conv2d-grad-weight"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.geom;
        let out = dispatch!(s1, l1, s2, l2, |x, grad| g.grad_weight(x, grad));
        Ok((out, Shape::from((g.o, g.c, g.k, g.k))))
    }
}

/// Square-kernel convolution without dilation or groups. `reflect` selects
/// mirror padding (edge pixel not repeated) instead of zeros.
pub fn conv2d(x: &Tensor, w: &Tensor, pad: usize, stride: usize, reflect: bool) -> Result<Tensor> {
    if !matches!(x.dtype(), DType::F32 | DType::F64) || x.dtype() != w.dtype() {
        return Err(Error::Shape(format!(
            "conv needs matching f32/f64 operands, got {:?} and {:?}",
            x.dtype(),
            w.dtype()
        )));
    }
    Geom::new(x.dims4()?, w.dims4()?, stride, pad, reflect)?;
    Ok(x.contiguous()?.apply_op2(&w.contiguous()?, ConvFwd { stride, pad, reflect })?)
}

/// Nearest-neighbour 2× upsampling; backward sums each 2×2 block.
struct Upsample2x;

/// Sum over non-overlapping 2×2 blocks.
struct BlockSum2x;

fn upsample_plane<T: Copy>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(planes * 4 * h * w);
    for p in 0..planes {
        for y in 0..h {
            let line = &x[(p * h + y) * w..(p * h + y + 1) * w];
            for _ in 0..2 {
                for &v in line {
                    out.push(v);
                    out.push(v);
                }
            }
        }
    }
    out
}

fn block_sum<T: Elem>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); planes * h * w];
    let ow = 2 * w;
    for p in 0..planes {
        for y in 0..h {
            let dst = &mut out[(p * h + y) * w..(p * h + y + 1) * w];
            for r in 0..2 {
                let row = &g[((p * 2 * h) + 2 * y + r) * ow..((p * 2 * h) + 2 * y + r + 1) * ow];
                for (x, d) in dst.iter_mut().enumerate() {
                    *d += row[2 * x];
                    *d += row[2 * x + 1];
                }
            }
        }
    }
    out
}

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample-nearest-2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = l.shape().dims4()?;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(upsample_plane(slice(v, l)?, n * c, h, w)),
            CpuStorage::F64(v) => CpuStorage::F64(upsample_plane(slice(v, l)?, n * c, h, w)),
            _ => return Err(candle_core::Error::Msg("upsampling supports f32 or f64".into())),
        };
        Ok((out, Shape::from((n, c, 2 * h, 2 * w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&BlockSum2x)?))
    }
}

impl CustomOp1 for BlockSum2x {
    fn name(&self) -> &'static str {
        "block-sum-2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h2, w2) = l.shape().dims4()?;
        let (h, w) = (h2 / 2, w2 / 2);
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(block_sum(slice(v, l)?, n * c, h, w)),
            CpuStorage::F64(v) => CpuStorage::F64(block_sum(slice(v, l)?, n * c, h, w)),
            _ => return Err(candle_core::Error::Msg("block sum supports f32 or f64".into())),
        };
        Ok((out, Shape::from((n, c, h, w))))
    }
}

/// Nearest-neighbour 2× upsampling of an `n × c × h × w` tensor.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    x.dims4()?;
    Ok(x.contiguous()?.apply_op1(Upsample2x)?)
}

/// 2×2 max pooling with stride 2; the gradient goes to the first maximum
/// of each window.
struct MaxPool2x;

/// Routes pooled gradients back to the window maxima of the input.
struct MaxPool2xGrad;

fn argmax_offsets<T: PartialOrd + Copy>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<usize> {
    let (oh, ow) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        for y in 0..oh {
            for xx in 0..ow {
                let base = p * h * w + 2 * y * w + 2 * xx;
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}

impl CustomOp1 for MaxPool2x {
    fn name(&self) -> &'static str {
        "max-pool-2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = l.shape().dims4()?;
        let out = match s {
            CpuStorage::F32(v) => {
                let x = slice(v, l)?;
                CpuStorage::F32(argmax_offsets(x, n * c, h, w).into_iter().map(|i| x[i]).collect())
            }
            CpuStorage::F64(v) => {
                let x = slice(v, l)?;
                CpuStorage::F64(argmax_offsets(x, n * c, h, w).into_iter().map(|i| x[i]).collect())
            }
            _ => return Err(candle_core::Error::Msg("max pooling supports f32 or f64".into())),
        };
        Ok((out, Shape::from((n, c, h / 2, w / 2))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &MaxPool2xGrad)?))
    }
}

fn scatter_max<T: PartialOrd + Copy + Default + std::ops::AddAssign>(
    x: &[T],
    g: &[T],
    planes: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let mut dx = vec![T::default(); x.len()];
    for (i, &gv) in argmax_offsets(x, planes, h, w).into_iter().zip(g) {
        dx[i] += gv;
    }
    dx
}

impl CustomOp2 for MaxPool2xGrad {
    fn name(&self) -> &'static str {
        "max-pool-2x-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = l1.shape().dims4()?;
        let out = dispatch!(s1, l1, s2, l2, |x, g| scatter_max(x, g, n * c, h, w));
        Ok((out, l1.shape().clone()))
    }
}

/// 2×2 max pooling; spatial sizes must be even.
pub fn max_pool2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max pooling needs even sizes, got {h}x{w}")));
    }
    Ok(x.contiguous()?.apply_op1(MaxPool2x)?)
}

/// Source taps `(i0, i1, w0, w1)` of each output index of a 2× linear
/// upsampling with half-pixel centers and edge clamping.
fn linear_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let i = o / 2;
            let other = if o % 2 == 0 { i.saturating_sub(1) } else { (i + 1).min(n - 1) };
            (i, other, 0.75, 0.25)
        })
        .collect()
}

/// Bilinear 2× upsampling (half-pixel centers, edges clamped).
struct Bilinear2x;

/// Adjoint of `Bilinear2x`.
struct Bilinear2xAdjoint;

trait Real: Elem + std::ops::Mul<Output = Self> {
    fn from_f64(v: f64) -> Self;
}

impl Real for f32 {
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> f64 {
        v
    }
}

fn bilinear_fwd<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ty, tx) = (linear_taps(h), linear_taps(w));
    let ow = 2 * w;
    let mut rows = vec![T::zero(); ow];
    let mut out = vec![T::zero(); planes * 4 * h * w];
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for (oy, &(i0, i1, a0, a1)) in ty.iter().enumerate() {
            let (r0, r1) = (&plane[i0 * w..(i0 + 1) * w], &plane[i1 * w..(i1 + 1) * w]);
            let (a0, a1) = (T::from_f64(a0), T::from_f64(a1));
            for (v, &(j0, j1, b0, b1)) in rows.iter_mut().zip(&tx) {
                let (b0, b1) = (T::from_f64(b0), T::from_f64(b1));
                let mut acc = a0 * b0 * r0[j0];
                acc += a0 * b1 * r0[j1];
                acc += a1 * b0 * r1[j0];
                acc += a1 * b1 * r1[j1];
                *v = acc;
            }
            let dst = &mut out[(p * 2 * h + oy) * ow..(p * 2 * h + oy + 1) * ow];
            dst.copy_from_slice(&rows);
        }
    }
    out
}

fn bilinear_adjoint<T: Real>(g: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ty, tx) = (linear_taps(h), linear_taps(w));
    let ow = 2 * w;
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let plane = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(i0, i1, a0, a1)) in ty.iter().enumerate() {
            let row = &g[(p * 2 * h + oy) * ow..(p * 2 * h + oy + 1) * ow];
            let (a0, a1) = (T::from_f64(a0), T::from_f64(a1));
            for (&gv, &(j0, j1, b0, b1)) in row.iter().zip(&tx) {
                let (b0, b1) = (T::from_f64(b0), T::from_f64(b1));
                plane[i0 * w + j0] += a0 * b0 * gv;
                plane[i0 * w + j1] += a0 * b1 * gv;
                plane[i1 * w + j0] += a1 * b0 * gv;
                plane[i1 * w + j1] += a1 * b1 * gv;
            }
        }
    }
    dx
}

impl CustomOp1 for Bilinear2x {
    fn name(&self) -> &'static str {
        "bilinear-2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = l.shape().dims4()?;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(bilinear_fwd(slice(v, l)?, n * c, h, w)),
            CpuStorage::F64(v) => CpuStorage::F64(bilinear_fwd(slice(v, l)?, n * c, h, w)),
            _ => return Err(candle_core::Error::Msg("bilinear upsampling supports f32 or f64".into())),
        };
        Ok((out, Shape::from((n, c, 2 * h, 2 * w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Bilinear2xAdjoint)?))
    }
}

impl CustomOp1 for Bilinear2xAdjoint {
    fn name(&self) -> &'static str {
        "bilinear-2x-adjoint"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h2, w2) = l.shape().dims4()?;
        let (h, w) = (h2 / 2, w2 / 2);
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(bilinear_adjoint(slice(v, l)?, n * c, h, w)),
            CpuStorage::F64(v) => CpuStorage::F64(bilinear_adjoint(slice(v, l)?, n * c, h, w)),
            _ => return Err(candle_core::Error::Msg("bilinear adjoint supports f32 or f64".into())),
        };
        Ok((out, Shape::from((n, c, h, w))))
    }
}

/// Bilinear 2× upsampling with half-pixel centers.
pub fn upsample_bilinear2x(x: &Tensor) -> Result<Tensor> {
    x.dims4()?;
    Ok(x.contiguous()?.apply_op1(Bilinear2x)?)
}
