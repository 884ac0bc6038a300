//! Forward and backward kernels for the layers the encoder and decoder use.
//!
//! Convolutions lower to one GEMM per chunk of samples via im2col. Every
//! reduction runs in a fixed order, so results are bit-reproducible.

use crate::tensor::{Element, Tensor};

/// Upper bound on im2col buffer elements before a batch is split into chunks.
const COL_BUDGET: usize = 1 << 24;

/// 2-D convolution with square kernels, symmetric zero padding and optional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T = f32> {
    /// `[out_channels, in_channels, k, k]`
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
    pub stride: usize,
    pub padding: usize,
}

/// Accumulated parameter gradients of one [`Conv2d`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrad<T = f32> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Element> ConvGrad<T> {
    pub fn zeros_like(conv: &Conv2d<T>) -> Self {
        ConvGrad {
            weight: vec![T::zero(); conv.weight.len()],
            bias: vec![T::zero(); conv.out_channels()],
        }
    }
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    #[inline]
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    #[inline]
    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Valid output-column range `[lo, hi)` for kernel offset `kj`.
    #[inline]
    fn x_range(&self, kj: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
        // ox*s + kj - p <= w - 1
        let hi = if self.w + p > kj {
            ((self.w + p - kj - 1) / s + 1).min(self.wo)
        } else {
            0
        };
        let lo = lo.min(self.wo);
        (lo, hi.max(lo))
    }

    fn im2col<T: Element>(&self, x: &[T], col: &mut [T], ld: usize, offset: usize) {
        self.im2col_rows(x, col, ld, offset, 0, self.ho);
    }

    /// Columns for output rows `oy0..oy1` only.
    fn im2col_rows<T: Element>(&self, x: &[T], col: &mut [T], ld: usize, offset: usize, oy0: usize, oy1: usize) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        let ncols = (oy1 - oy0) * self.wo;
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut col[row * ld + offset..row * ld + offset + ncols];
                    let (lo, hi) = self.x_range(kj);
                    for oy in oy0..oy1 {
                        let out = &mut dst[(oy - oy0) * self.wo..(oy - oy0 + 1) * self.wo];
                        let iy = (oy * s + ki) as isize - p as isize;
                        if iy < 0 || iy >= self.h as isize {
                            out.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        out[..lo].fill(T::zero());
                        out[hi..].fill(T::zero());
                        if s == 1 {
                            let ix0 = lo + kj - p;
                            out[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                        } else {
                            for ox in lo..hi {
                                out[ox] = src[ox * s + kj - p];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Element>(&self, col: &[T], ld: usize, offset: usize, dx: &mut [T]) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        for ci in 0..self.cin {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &col[row * ld + offset..row * ld + offset + self.cols()];
                    let (lo, hi) = self.x_range(kj);
                    for oy in 0..self.ho {
                        let iy = (oy * s + ki) as isize - p as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let g = &src[oy * self.wo..(oy + 1) * self.wo];
                        for ox in lo..hi {
                            dst[ox * s + kj - p] += g[ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Element> Conv2d<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Vec<T>>, stride: usize, padding: usize) -> Self {
        let [cout, _, kh, kw] = weight.shape();
        assert_eq!(kh, kw, "only square kernels are supported");
        if let Some(b) = &bias {
            assert_eq!(b.len(), cout);
        }
        Conv2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    #[inline]
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    #[inline]
    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    #[inline]
    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn geometry(&self, x: &Tensor<T>) -> Geometry {
        assert_eq!(
            x.channels(),
            self.in_channels(),
            "conv expects {} input channels, got {}",
            self.in_channels(),
            x.channels()
        );
        let (ho, wo) = self.output_size(x.height(), x.width());
        Geometry {
            cin: x.channels(),
            h: x.height(),
            w: x.width(),
            k: self.kernel(),
            stride: self.stride,
            pad: self.padding,
            ho,
            wo,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel() == 1 && self.stride == 1 && self.padding == 0
    }

    fn chunk(&self, g: &Geometry, batch: usize) -> usize {
        if self.is_pointwise() {
            1
        } else {
            (COL_BUDGET / (g.rows() * g.cols()).max(1)).clamp(1, batch.max(1))
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let g = self.geometry(x);
        let batch = x.batch();
        let cout = self.out_channels();
        let (kdim, hw) = (g.rows(), g.cols());
        let mut y = Tensor::zeros([batch, cout, g.ho, g.wo]);
        let chunk = self.chunk(&g, batch);
        let w = self.weight.data();
        let mut col = Vec::new();
        let mut tmp = Vec::new();
        let mut n0 = 0;
        while n0 < batch {
            let nb = chunk.min(batch - n0);
            let ncols = nb * hw;
            if nb == 1 && !self.is_pointwise() && kdim * hw > COL_BUDGET {
                // Bands of output rows keep the column buffer bounded.
                let band = (COL_BUDGET / (kdim * g.wo).max(1)).max(1);
                let out = y.sample_mut(n0);
                let mut oy0 = 0;
                while oy0 < g.ho {
                    let oy1 = (oy0 + band).min(g.ho);
                    let bc = (oy1 - oy0) * g.wo;
                    col.resize(kdim * bc, T::zero());
                    g.im2col_rows(x.sample(n0), &mut col, bc, 0, oy0, oy1);
                    unsafe {
                        T::gemm(
                            cout,
                            kdim,
                            bc,
                            T::one(),
                            w.as_ptr(),
                            kdim as isize,
                            1,
                            col.as_ptr(),
                            bc as isize,
                            1,
                            T::zero(),
                            out[oy0 * g.wo..].as_mut_ptr(),
                            hw as isize,
                            1,
                        );
                    }
                    oy0 = oy1;
                }
            } else if nb == 1 {
                let (bptr, rsb) = if self.is_pointwise() {
                    (x.sample(n0).as_ptr(), hw as isize)
                } else {
                    col.resize(kdim * ncols, T::zero());
                    g.im2col(x.sample(n0), &mut col, ncols, 0);
                    (col.as_ptr(), ncols as isize)
                };
                let out = y.sample_mut(n0);
                unsafe {
                    T::gemm(
                        cout,
                        kdim,
                        hw,
                        T::one(),
                        w.as_ptr(),
                        kdim as isize,
                        1,
                        bptr,
                        rsb,
                        1,
                        T::zero(),
                        out.as_mut_ptr(),
                        hw as isize,
                        1,
                    );
                }
            } else {
                col.resize(kdim * ncols, T::zero());
                for j in 0..nb {
                    g.im2col(x.sample(n0 + j), &mut col, ncols, j * hw);
                }
                tmp.resize(cout * ncols, T::zero());
                unsafe {
                    T::gemm(
                        cout,
                        kdim,
                        ncols,
                        T::one(),
                        w.as_ptr(),
                        kdim as isize,
                        1,
                        col.as_ptr(),
                        ncols as isize,
                        1,
                        T::zero(),
                        tmp.as_mut_ptr(),
                        ncols as isize,
                        1,
                    );
                }
                for j in 0..nb {
                    let out = y.sample_mut(n0 + j);
                    for co in 0..cout {
                        out[co * hw..(co + 1) * hw]
                            .copy_from_slice(&tmp[co * ncols + j * hw..co * ncols + (j + 1) * hw]);
                    }
                }
            }
            n0 += nb;
        }
        if let Some(bias) = &self.bias {
            for n in 0..batch {
                for (co, &b) in bias.iter().enumerate() {
                    for v in y.plane_mut(n, co) {
                        *v += b;
                    }
                }
            }
        }
        y
    }

    /// Backpropagates `dy` through the convolution applied to `x`.
    ///
    /// Parameter gradients are accumulated into `grad` when given; the input
    /// gradient is returned when `need_dx` is set.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        mut grad: Option<&mut ConvGrad<T>>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let g = self.geometry(x);
        let batch = x.batch();
        let cout = self.out_channels();
        let (kdim, hw) = (g.rows(), g.cols());
        assert_eq!(dy.shape(), [batch, cout, g.ho, g.wo], "conv backward: dy shape");
        let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
        let chunk = self.chunk(&g, batch);
        let w = self.weight.data();
        let mut col = Vec::new();
        let mut dymat = Vec::new();
        let mut dcol = Vec::new();
        let mut n0 = 0;
        while n0 < batch {
            let nb = chunk.min(batch - n0);
            let ncols = nb * hw;
            let (dptr, rsd) = if nb == 1 {
                (dy.sample(n0).as_ptr(), hw as isize)
            } else {
                dymat.resize(cout * ncols, T::zero());
                for j in 0..nb {
                    let src = dy.sample(n0 + j);
                    for co in 0..cout {
                        dymat[co * ncols + j * hw..co * ncols + (j + 1) * hw]
                            .copy_from_slice(&src[co * hw..(co + 1) * hw]);
                    }
                }
                (dymat.as_ptr(), ncols as isize)
            };
            let pointwise = nb == 1 && self.is_pointwise();
            if let Some(grad) = grad.as_deref_mut() {
                let (cptr, rsc) = if pointwise {
                    (x.sample(n0).as_ptr(), hw as isize)
                } else {
                    col.resize(kdim * ncols, T::zero());
                    for j in 0..nb {
                        g.im2col(x.sample(n0 + j), &mut col, ncols, j * hw);
                    }
                    (col.as_ptr(), ncols as isize)
                };
                // dW[cout×K] += dY[cout×N] · colᵀ[N×K]
                unsafe {
                    T::gemm(
                        cout,
                        ncols,
                        kdim,
                        T::one(),
                        dptr,
                        rsd,
                        1,
                        cptr,
                        1,
                        rsc,
                        T::one(),
                        grad.weight.as_mut_ptr(),
                        kdim as isize,
                        1,
                    );
                }
                if self.bias.is_some() {
                    for (co, gb) in grad.bias.iter_mut().enumerate() {
                        let mut s = T::zero();
                        for j in 0..nb {
                            for &v in &dy.sample(n0 + j)[co * hw..(co + 1) * hw] {
                                s += v;
                            }
                        }
                        *gb += s;
                    }
                }
            }
            if let Some(dx) = dx.as_mut() {
                if pointwise {
                    let out = dx.sample_mut(n0);
                    unsafe {
                        T::gemm(
                            kdim,
                            cout,
                            hw,
                            T::one(),
                            w.as_ptr(),
                            1,
                            kdim as isize,
                            dptr,
                            rsd,
                            1,
                            T::zero(),
                            out.as_mut_ptr(),
                            hw as isize,
                            1,
                        );
                    }
                } else {
                    dcol.resize(kdim * ncols, T::zero());
                    // dcol[K×N] = Wᵀ[K×cout] · dY[cout×N]
                    unsafe {
                        T::gemm(
                            kdim,
                            cout,
                            ncols,
                            T::one(),
                            w.as_ptr(),
                            1,
                            kdim as isize,
                            dptr,
                            rsd,
                            1,
                            T::zero(),
                            dcol.as_mut_ptr(),
                            ncols as isize,
                            1,
                        );
                    }
                    for j in 0..nb {
                        g.col2im(&dcol, ncols, j * hw, dx.sample_mut(n0 + j));
                    }
                }
            }
            n0 += nb;
        }
        dx
    }
}

pub fn relu_inplace<T: Element>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `dy` with the activation pattern of a ReLU output `y`.
pub fn relu_backward<T: Element>(y: &Tensor<T>, dy: &mut Tensor<T>) {
    assert_eq!(y.shape(), dy.shape());
    for (g, &v) in dy.data_mut().iter_mut().zip(y.data()) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Non-overlapping `k×k` average pooling (kernel equals stride).
pub fn avg_pool<T: Element>(x: &Tensor<T>, k: usize) -> Tensor<T> {
    if k == 1 {
        return x.clone();
    }
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (h / k, w / k);
    let scale = T::of(1.0 / (k * k) as f64);
    let mut y = Tensor::zeros([n, c, ho, wo]);
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let dst = y.plane_mut(b, ch);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = T::zero();
                    for dy in 0..k {
                        let row = &src[(oy * k + dy) * w + ox * k..(oy * k + dy) * w + ox * k + k];
                        for &v in row {
                            s += v;
                        }
                    }
                    dst[oy * wo + ox] = s * scale;
                }
            }
        }
    }
    y
}

pub fn avg_pool_backward<T: Element>(dy: &Tensor<T>, k: usize, input_shape: [usize; 4]) -> Tensor<T> {
    if k == 1 {
        return dy.clone();
    }
    let [n, c, h, w] = input_shape;
    let (ho, wo) = (dy.height(), dy.width());
    let scale = T::of(1.0 / (k * k) as f64);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let g = dy.plane(b, ch);
            let dst = dx.plane_mut(b, ch);
            for oy in 0..ho {
                for ox in 0..wo {
                    let v = g[oy * wo + ox] * scale;
                    for ddy in 0..k {
                        for ddx in 0..k {
                            dst[(oy * k + ddy) * w + ox * k + ddx] += v;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Interpolation used by the decoder's 2× upsampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    #[default]
    Bilinear,
    Nearest,
}

/// Source taps for one output coordinate of a half-pixel-centred 2× bilinear resize.
#[inline]
fn bilinear_taps(o: usize, n_in: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(n_in - 1);
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, src - i0 as f64)
}

pub fn upsample2x<T: Element>(x: &Tensor<T>, mode: UpsampleMode) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (2 * h, 2 * w);
    let mut y = Tensor::zeros([n, c, ho, wo]);
    let ytaps: Vec<_> = (0..ho).map(|o| bilinear_taps(o, h)).collect();
    let xtaps: Vec<_> = (0..wo).map(|o| bilinear_taps(o, w)).collect();
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let dst = y.plane_mut(b, ch);
            match mode {
                UpsampleMode::Nearest => {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            dst[oy * wo + ox] = src[(oy / 2) * w + ox / 2];
                        }
                    }
                }
                UpsampleMode::Bilinear => {
                    for (oy, &(y0, y1, ly)) in ytaps.iter().enumerate() {
                        let (ly1, ly0) = (T::of(ly), T::of(1.0 - ly));
                        for (ox, &(x0, x1, lx)) in xtaps.iter().enumerate() {
                            let (lx1, lx0) = (T::of(lx), T::of(1.0 - lx));
                            let top = src[y0 * w + x0] * lx0 + src[y0 * w + x1] * lx1;
                            let bot = src[y1 * w + x0] * lx0 + src[y1 * w + x1] * lx1;
                            dst[oy * wo + ox] = top * ly0 + bot * ly1;
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn upsample2x_backward<T: Element>(dy: &Tensor<T>, mode: UpsampleMode) -> Tensor<T> {
    let [n, c, ho, wo] = dy.shape();
    let (h, w) = (ho / 2, wo / 2);
    let mut dx = Tensor::zeros([n, c, h, w]);
    let ytaps: Vec<_> = (0..ho).map(|o| bilinear_taps(o, h)).collect();
    let xtaps: Vec<_> = (0..wo).map(|o| bilinear_taps(o, w)).collect();
    for b in 0..n {
        for ch in 0..c {
            let g = dy.plane(b, ch);
            let dst = dx.plane_mut(b, ch);
            match mode {
                UpsampleMode::Nearest => {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            dst[(oy / 2) * w + ox / 2] += g[oy * wo + ox];
                        }
                    }
                }
                UpsampleMode::Bilinear => {
                    for (oy, &(y0, y1, ly)) in ytaps.iter().enumerate() {
                        let (ly1, ly0) = (T::of(ly), T::of(1.0 - ly));
                        for (ox, &(x0, x1, lx)) in xtaps.iter().enumerate() {
                            let (lx1, lx0) = (T::of(lx), T::of(1.0 - lx));
                            let v = g[oy * wo + ox];
                            dst[y0 * w + x0] += v * ly0 * lx0;
                            dst[y0 * w + x1] += v * ly0 * lx1;
                            dst[y1 * w + x0] += v * ly1 * lx0;
                            dst[y1 * w + x1] += v * ly1 * lx1;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let [n, _, h, w] = parts[0].shape();
    for p in parts {
        assert_eq!((p.batch(), p.height(), p.width()), (n, h, w), "concat: spatial mismatch");
    }
    let c: usize = parts.iter().map(|p| p.channels()).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for p in parts {
            data.extend_from_slice(p.sample(b));
        }
    }
    Tensor::from_vec([n, c, h, w], data)
}

/// Inverse of [`concat_channels`] for gradients.
pub fn split_channels<T: Element>(x: &Tensor<T>, sizes: &[usize]) -> Vec<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    assert_eq!(sizes.iter().sum::<usize>(), c);
    let hw = h * w;
    let mut out: Vec<Vec<T>> = sizes.iter().map(|&s| Vec::with_capacity(n * s * hw)).collect();
    for b in 0..n {
        let src = x.sample(b);
        let mut off = 0;
        for (dst, &s) in out.iter_mut().zip(sizes) {
            dst.extend_from_slice(&src[off * hw..(off + s) * hw]);
            off += s;
        }
    }
    out.into_iter()
        .zip(sizes)
        .map(|(d, &s)| Tensor::from_vec([n, s, h, w], d))
        .collect()
}

#[inline]
fn reflect(i: usize, n: usize) -> usize {
    // Mirror without repeating the edge sample, repeated with period 2n - 2
    // when the padding exceeds the input.
    if n == 1 {
        return 0;
    }
    let i = i % (2 * (n - 1));
    if i < n {
        i
    } else {
        2 * (n - 1) - i
    }
}

/// Extends the bottom and right edges by mirror reflection.
pub fn reflect_pad<T: Element>(x: &Tensor<T>, pad_h: usize, pad_w: usize) -> Tensor<T> {
    if pad_h == 0 && pad_w == 0 {
        return x.clone();
    }
    let [n, c, h, w] = x.shape();
    let (hp, wp) = (h + pad_h, w + pad_w);
    let mut y = Tensor::zeros([n, c, hp, wp]);
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let dst = y.plane_mut(b, ch);
            for oy in 0..hp {
                let iy = reflect(oy, h);
                for ox in 0..wp {
                    dst[oy * wp + ox] = src[iy * w + reflect(ox, w)];
                }
            }
        }
    }
    y
}

pub fn reflect_pad_backward<T: Element>(dy: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let [n, c, hp, wp] = dy.shape();
    if (hp, wp) == (h, w) {
        return dy.clone();
    }
    let mut dx = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let g = dy.plane(b, ch);
            let dst = dx.plane_mut(b, ch);
            for oy in 0..hp {
                let iy = reflect(oy, h);
                for ox in 0..wp {
                    dst[iy * w + reflect(ox, w)] += g[oy * wp + ox];
                }
            }
        }
    }
    dx
}

/// Keeps the top-left `h×w` window.
pub fn crop<T: Element>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let [n, c, hx, wx] = x.shape();
    if (hx, wx) == (h, w) {
        return x.clone();
    }
    assert!(h <= hx && w <= wx);
    let mut y = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let dst = y.plane_mut(b, ch);
            for yy in 0..h {
                dst[yy * w..(yy + 1) * w].copy_from_slice(&src[yy * wx..yy * wx + w]);
            }
        }
    }
    y
}

/// Gradient of [`crop`]: zero-extends back to `h×w`.
pub fn crop_backward<T: Element>(dy: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let [n, c, hy, wy] = dy.shape();
    if (hy, wy) == (h, w) {
        return dy.clone();
    }
    let mut dx = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let src = dy.plane(b, ch);
            let dst = dx.plane_mut(b, ch);
            for yy in 0..hy {
                dst[yy * w..yy * w + wy].copy_from_slice(&src[yy * wy..(yy + 1) * wy]);
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Direct nested-loop convolution.
    fn naive_conv(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let [n, cin, h, w] = x.shape();
        let (cout, k, s, p) = (conv.out_channels(), conv.kernel(), conv.stride, conv.padding);
        let (ho, wo) = conv.output_size(h, w);
        let mut y = Tensor::zeros([n, cout, ho, wo]);
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |bias| bias[co]);
                        for ci in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * s + ki) as isize - p as isize;
                                    let ix = (ox * s + kj) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += conv.weight.at(co, ci, ki, kj)
                                            * x.at(b, ci, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        y.plane_mut(b, co)[oy * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_loops() {
        for (i, &(k, s, p)) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0), (5, 1, 2)].iter().enumerate() {
            let x = random([3, 4, 9, 7], i as u64);
            let conv = Conv2d::new(
                random([5, 4, k, k], 100 + i as u64),
                Some(random([1, 1, 1, 5], 200 + i as u64).into_vec()),
                s,
                p,
            );
            let got = conv.forward(&x);
            let want = naive_conv(&conv, &x);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s} p={p}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn banded_single_image_conv_matches_naive_loops() {
        // 576 × 39991 columns exceed the buffer budget and go through bands.
        let x = random([1, 64, 203, 197], 7);
        let conv = Conv2d::new(random([2, 64, 3, 3], 8), Some(vec![0.25, -0.5]), 1, 1);
        assert!(64 * 9 * 203 * 197 > COL_BUDGET);
        let got = conv.forward(&x);
        let want = naive_conv(&conv, &x);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-11, "{a} vs {b}");
        }
    }

    /// Adjoint identity <conv(x), dy> = <x, conv*(dy)> plus <dy, ∂conv/∂W>.
    #[test]
    fn conv_backward_is_adjoint() {
        for (i, &(k, s, p)) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0)].iter().enumerate() {
            let x = random([2, 3, 8, 6], 10 + i as u64);
            let conv = Conv2d::new(random([4, 3, k, k], 20 + i as u64), Some(vec![0.0; 4]), s, p);
            let y = conv.forward(&x);
            let dy = random(y.shape(), 30 + i as u64);
            let mut grad = ConvGrad::zeros_like(&conv);
            let dx = conv.backward(&x, &dy, Some(&mut grad), true).unwrap();
            let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "input adjoint {lhs} vs {rhs}");
            let rhs_w: f64 = conv.weight.data().iter().zip(&grad.weight).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs_w).abs() < 1e-10, "weight adjoint {lhs} vs {rhs_w}");
            let dysum: f64 = dy.data().iter().sum();
            let gbsum: f64 = grad.bias.iter().sum();
            assert!((dysum - gbsum).abs() < 1e-10);
        }
    }

    #[test]
    fn linear_ops_are_adjoint() {
        let x = random([2, 3, 6, 8], 1);
        let check = |y: Tensor<f64>, back: &dyn Fn(&Tensor<f64>) -> Tensor<f64>| {
            let dy = random(y.shape(), 7);
            let dx = back(&dy);
            let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        };
        check(avg_pool(&x, 2), &|d| avg_pool_backward(d, 2, x.shape()));
        for mode in [UpsampleMode::Bilinear, UpsampleMode::Nearest] {
            check(upsample2x(&x, mode), &|d| upsample2x_backward(d, mode));
        }
        check(reflect_pad(&x, 3, 5), &|d| reflect_pad_backward(d, 6, 8));
        check(crop(&x, 4, 5), &|d| crop_backward(d, 6, 8));
    }

    #[test]
    fn bilinear_upsample_of_constant_is_constant() {
        let x = Tensor::<f64>::full([1, 2, 3, 5], 0.75);
        let y = upsample2x(&x, UpsampleMode::Bilinear);
        assert_eq!(y.shape(), [1, 2, 6, 10]);
        assert!(y.data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
    }

    #[test]
    fn concat_then_split_restores_parts() {
        let a = random([2, 3, 4, 4], 1);
        let b = random([2, 5, 4, 4], 2);
        let cat = concat_channels(&[&a, &b]);
        assert_eq!(cat.shape(), [2, 8, 4, 4]);
        let parts = split_channels(&cat, &[3, 5]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn reflect_pad_mirrors_without_repeating_edge() {
        let x = Tensor::<f64>::from_vec([1, 1, 1, 4], vec![0.0, 1.0, 2.0, 3.0]);
        let x = concat_channels(&[&x]);
        let x2 = Tensor::from_vec([1, 1, 2, 4], [x.data(), x.data()].concat());
        let y = reflect_pad(&x2, 1, 2);
        assert_eq!(&y.data()[..6], &[0.0, 1.0, 2.0, 3.0, 2.0, 1.0]);
        assert_eq!(y.shape(), [1, 1, 3, 6]);
    }

    #[test]
    fn reflect_pad_wider_than_input_keeps_mirroring() {
        let x = Tensor::<f64>::from_vec([1, 1, 1, 3], vec![0.0, 1.0, 2.0]);
        let y = reflect_pad(&x, 2, 6);
        assert_eq!(&y.data()[..9], &[0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0]);
        // Adjoint of the padding.
        let x = random([1, 2, 3, 5], 40);
        let y = reflect_pad(&x, 20, 11);
        let dy = random(y.shape(), 41);
        let dx = reflect_pad_backward(&dy, 3, 5);
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
