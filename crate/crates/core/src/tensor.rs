//! Minimal single-image CHW tensors and the GEMM-backed convolution kernels
//! used by the network.

use std::fmt::Debug;

use num_traits::Float;

/// Floating-point element type with a strided GEMM.
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    /// `C = alpha * A * B + beta * C` with A `m×k`, B `k×n`, C `m×n`, arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
                    }
                };
                assert!(a.len() as isize >= span(m, k, rsa, csa), "gemm: A too short");
                assert!(b.len() as isize >= span(k, n, rsb, csb), "gemm: B too short");
                assert!(c.len() as isize >= span(m, n, rsc, csc), "gemm: C too short");
                // SAFETY: the slice extents were checked against the strided spans above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense `channels × height × width` tensor for a single image.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![T::zero(); channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * height * width, "tensor data length");
        Self { channels, height, width, data }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    #[inline]
    pub fn at(&self, c: usize, r: usize, col: usize) -> T {
        self.data[(c * self.height + r) * self.width + col]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a = *a + b);
    }

    pub fn relu_inplace(&mut self) {
        self.data.iter_mut().for_each(|v| {
            if *v < T::zero() {
                *v = T::zero()
            }
        });
    }

    /// Stack channels of `self` followed by `other`.
    pub fn concat(&self, other: &Self) -> Self {
        assert_eq!((self.height, self.width), (other.height, other.width), "concat spatial dims");
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Self::from_vec(self.channels + other.channels, self.height, self.width, data)
    }

    /// Split off the first `channels` channels.
    pub fn split(self, channels: usize) -> (Self, Self) {
        let cut = channels * self.plane();
        let mut head = self.data;
        let tail = head.split_off(cut);
        (
            Self::from_vec(channels, self.height, self.width, head),
            Self::from_vec(self.channels - channels, self.height, self.width, tail),
        )
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Zero-padded `k×k` patches, laid out `(cin·k·k) × (out_h·out_w)`.
fn im2col<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Vec<T> {
    let n = oh * ow;
    let mut cols = vec![T::zero(); x.channels * k * k * n];
    for ci in 0..x.channels {
        let src = x.channel(ci);
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let dst = &mut cols[row * n..(row + 1) * n];
                for orow in 0..oh {
                    let ir = (orow * stride + kh) as isize - pad as isize;
                    if ir < 0 || ir >= x.height as isize {
                        continue;
                    }
                    let ir = ir as usize;
                    let drow = &mut dst[orow * ow..(orow + 1) * ow];
                    if stride == 1 {
                        // contiguous span of valid columns
                        let lo = pad.saturating_sub(kw);
                        let hi = (x.width + pad - kw).min(ow);
                        if lo < hi {
                            let s0 = lo + kw - pad;
                            drow[lo..hi].copy_from_slice(&src[ir * x.width + s0..ir * x.width + s0 + (hi - lo)]);
                        }
                    } else {
                        for (ocol, d) in drow.iter_mut().enumerate() {
                            let ic = (ocol * stride + kw) as isize - pad as isize;
                            if ic >= 0 && (ic as usize) < x.width {
                                *d = src[ir * x.width + ic as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of [`im2col`]'s layout back into an image.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    channels: usize,
    height: usize,
    width: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Tensor<T> {
    let n = oh * ow;
    let mut out = Tensor::zeros(channels, height, width);
    let plane = height * width;
    for ci in 0..channels {
        let dst = &mut out.data[ci * plane..(ci + 1) * plane];
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let src = &cols[row * n..(row + 1) * n];
                for orow in 0..oh {
                    let ir = (orow * stride + kh) as isize - pad as isize;
                    if ir < 0 || ir >= height as isize {
                        continue;
                    }
                    let ir = ir as usize;
                    for ocol in 0..ow {
                        let ic = (ocol * stride + kw) as isize - pad as isize;
                        if ic >= 0 && (ic as usize) < width {
                            let d = &mut dst[ir * width + ic as usize];
                            *d = *d + src[orow * ow + ocol];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Geometry of a convolution: kernel size, stride and zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Cross-correlation with weights laid out `[out][in][k][k]`.
pub fn conv_forward<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: &[T], cout: usize, g: ConvGeometry) -> Tensor<T> {
    let (oh, ow) = g.out_dims(x.height, x.width);
    let kdim = x.channels * g.kernel * g.kernel;
    assert_eq!(weight.len(), cout * kdim, "conv weight shape");
    let n = oh * ow;
    let mut out = Tensor::zeros(cout, oh, ow);
    for (co, b) in bias.iter().enumerate() {
        out.data[co * n..(co + 1) * n].fill(*b);
    }
    let owned;
    let cols: &[T] = if g.is_pointwise() {
        &x.data
    } else {
        owned = im2col(x, g.kernel, g.stride, g.pad, oh, ow);
        &owned
    };
    T::gemm(cout, kdim, n, T::one(), weight, kdim as isize, 1, cols, n as isize, 1, T::one(), &mut out.data, n as isize, 1);
    out
}

/// Gradients of [`conv_forward`]: `(d_input, d_weight, d_bias)`.
/// `d_input` is skipped when `need_input_grad` is false.
pub fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    dout: &Tensor<T>,
    g: ConvGeometry,
    need_input_grad: bool,
) -> (Option<Tensor<T>>, Vec<T>, Vec<T>) {
    let cout = dout.channels;
    let (oh, ow) = (dout.height, dout.width);
    let n = oh * ow;
    let kdim = x.channels * g.kernel * g.kernel;
    let owned;
    let cols: &[T] = if g.is_pointwise() {
        &x.data
    } else {
        owned = im2col(x, g.kernel, g.stride, g.pad, oh, ow);
        &owned
    };
    let mut dw = vec![T::zero(); cout * kdim];
    // dW = dOut (cout×n) · colsᵀ (n×kdim)
    T::gemm(cout, n, kdim, T::one(), &dout.data, n as isize, 1, cols, 1, n as isize, T::zero(), &mut dw, kdim as isize, 1);
    let db = (0..cout).map(|c| dout.channel(c).iter().fold(T::zero(), |a, &v| a + v)).collect();
    let dx = need_input_grad.then(|| {
        let mut dcols = vec![T::zero(); kdim * n];
        // dCols = Wᵀ (kdim×cout) · dOut (cout×n)
        T::gemm(kdim, cout, n, T::one(), weight, 1, kdim as isize, &dout.data, n as isize, 1, T::zero(), &mut dcols, n as isize, 1);
        if g.is_pointwise() {
            Tensor::from_vec(x.channels, x.height, x.width, dcols)
        } else {
            col2im(&dcols, x.channels, x.height, x.width, g.kernel, g.stride, g.pad, oh, ow)
        }
    });
    (dx, dw, db)
}

/// 2×2 stride-2 transposed convolution with weights laid out `[in][out][2][2]`.
pub fn deconv_forward<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: &[T], cout: usize) -> Tensor<T> {
    let cin = x.channels;
    let n = x.plane();
    let rows = cout * 4;
    assert_eq!(weight.len(), cin * rows, "deconv weight shape");
    let mut cols = vec![T::zero(); rows * n];
    // cols = Wᵀ (cout·4 × cin) · x (cin × n)
    T::gemm(rows, cin, n, T::one(), weight, 1, rows as isize, &x.data, n as isize, 1, T::zero(), &mut cols, n as isize, 1);
    let mut out = col2im(&cols, cout, x.height * 2, x.width * 2, 2, 2, 0, x.height, x.width);
    let plane = out.plane();
    for (co, &b) in bias.iter().enumerate() {
        out.data[co * plane..(co + 1) * plane].iter_mut().for_each(|v| *v = *v + b);
    }
    out
}

/// Gradients of [`deconv_forward`]: `(d_input, d_weight, d_bias)`.
pub fn deconv_backward<T: Scalar>(x: &Tensor<T>, weight: &[T], dout: &Tensor<T>) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let cin = x.channels;
    let cout = dout.channels;
    let rows = cout * 4;
    let n = x.plane();
    let dcols = im2col(dout, 2, 2, 0, x.height, x.width);
    let mut dx = Tensor::zeros(cin, x.height, x.width);
    // dx = W (cin × cout·4) · dCols (cout·4 × n)
    T::gemm(cin, rows, n, T::one(), weight, rows as isize, 1, &dcols, n as isize, 1, T::zero(), &mut dx.data, n as isize, 1);
    let mut dw = vec![T::zero(); cin * rows];
    // dW = x (cin × n) · dColsᵀ (n × cout·4)
    T::gemm(cin, n, rows, T::one(), &x.data, n as isize, 1, &dcols, 1, n as isize, T::zero(), &mut dw, rows as isize, 1);
    let db = (0..cout).map(|c| dout.channel(c).iter().fold(T::zero(), |a, &v| a + v)).collect();
    (dx, dw, db)
}
