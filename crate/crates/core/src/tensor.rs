//! Dense rank-4 tensors and the numeric kernels the layers are built from.
//!
//! Layout is row-major `(N, C, H, W)`. Kernels are generic over [`Scalar`]
//! so the same code runs in `f32` for training and inference and in `f64`
//! for finite-difference gradient checks.

use std::fmt;

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{Error, Result};

/// Real number type the kernels operate on.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// `C = alpha * A * B + beta * C` with arbitrary strides.
    ///
    /// # Safety
    /// Same contract as [`matrixmultiply::sgemm`]: every pointer/stride
    /// combination must stay inside its buffer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every Scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major matrix operand: `data` holds an `rows × cols` matrix, or its
/// transpose when `transposed` is set.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub transposed: bool,
}

impl<'a, T> MatRef<'a, T> {
    pub fn n(data: &'a [T]) -> Self {
        Self {
            data,
            transposed: false,
        }
    }

    pub fn t(data: &'a [T]) -> Self {
        Self {
            data,
            transposed: true,
        }
    }

    fn strides(&self, rows: usize, cols: usize) -> (isize, isize) {
        if self.transposed {
            (1, rows as isize)
        } else {
            (cols as isize, 1)
        }
    }
}

/// `out (m×n) = a (m×k) · b (k×n)`, added to `out` when `accumulate`.
pub(crate) fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    out: &mut [T],
    accumulate: bool,
) {
    assert!(a.data.len() >= m * k && b.data.len() >= k * n && out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides(m, k);
    let (rsb, csb) = b.strides(k, n);
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every access the strides can produce.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Extents of a rank-4 tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per batch item.
    pub const fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.n && c < self.c && h < self.h && w < self.w);
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    /// Inverse of [`Shape::offset`].
    pub fn coords(&self, mut index: usize) -> (usize, usize, usize, usize) {
        let w = index % self.w;
        index /= self.w;
        let h = index % self.h;
        index /= self.h;
        let c = index % self.c;
        (index / self.c, c, h, w)
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        for (dim, v) in [("batch", self.n), ("channels", self.c), ("height", self.h), ("width", self.w)] {
            if v == 0 {
                return Err(Error::invalid(op, format!("{dim} extent must be at least 1")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}×{}×{}×{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        assert!(shape.validate("Tensor::filled").is_ok(), "invalid shape {shape}");
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        shape.validate("Tensor::from_vec")?;
        if data.len() != shape.len() {
            return Err(Error::shape("Tensor::from_vec", "data length", shape.len(), data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            let (n, c, h, w) = shape.coords(i);
            *v = f(n, c, h, w);
        }
        t
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.offset(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.shape.offset(n, c, h, w);
        self.data[i] = v;
    }

    /// Slice holding batch item `n`.
    pub fn item(&self, n: usize) -> &[T] {
        let len = self.shape.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.shape.item_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Same data, new extents of equal total size.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks equally-shaped single-item tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("Tensor::stack", "no tensors to stack"))?;
        let item_shape = first.shape;
        let mut data = Vec::with_capacity(item_shape.len() * items.len());
        let mut n = 0;
        for t in items {
            if (t.shape.c, t.shape.h, t.shape.w) != (item_shape.c, item_shape.h, item_shape.w) {
                return Err(Error::invalid(
                    "Tensor::stack",
                    format!("item shape {} differs from {}", t.shape, item_shape),
                ));
            }
            data.extend_from_slice(&t.data);
            n += t.shape.n;
        }
        Self::from_vec(Shape { n, ..item_shape }, data)
    }

    /// Batch item `n` as its own tensor.
    pub fn batch_item(&self, n: usize) -> Self {
        Self {
            shape: Shape { n: 1, ..self.shape },
            data: self.item(n).to_vec(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent of ceil-mode pooling along one axis. A trailing window that
/// would start past the input (possible when `stride > kernel`) is dropped.
pub fn pool_out_extent(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || kernel > input {
        return None;
    }
    let out = (input - kernel).div_ceil(stride) + 1;
    Some(if (out - 1) * stride >= input { out - 1 } else { out })
}

struct ConvGeometry {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    k_h: usize,
    k_w: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(input: Shape, weights: Shape, stride: usize, pad: usize) -> Result<Self> {
        const OP: &str = "conv2d";
        if stride == 0 {
            return Err(Error::invalid(OP, "stride must be positive"));
        }
        if weights.c != input.c {
            return Err(Error::shape(OP, "input channels", weights.c, input.c));
        }
        let out_h = conv_out_extent(input.h, weights.h, stride, pad).ok_or_else(|| {
            Error::invalid(
                OP,
                format!("kernel height {} exceeds padded input height {}", weights.h, input.h + 2 * pad),
            )
        })?;
        let out_w = conv_out_extent(input.w, weights.w, stride, pad).ok_or_else(|| {
            Error::invalid(
                OP,
                format!("kernel width {} exceeds padded input width {}", weights.w, input.w + 2 * pad),
            )
        })?;
        Ok(Self {
            in_c: input.c,
            in_h: input.h,
            in_w: input.w,
            k_h: weights.h,
            k_w: weights.w,
            out_h,
            out_w,
            stride,
            pad,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_c * self.k_h * self.k_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Pointwise convolutions read the input directly, no patch matrix.
    fn is_pointwise(&self) -> bool {
        self.k_h == 1 && self.k_w == 1 && self.stride == 1 && self.pad == 0
    }

    /// Lays out every receptive field as a column: `cols[(c, i, j)][(oy, ox)]`.
    fn im2col<T: Scalar>(&self, image: &[T], cols: &mut [T]) {
        let p = self.positions();
        for c in 0..self.in_c {
            let plane = &image[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for i in 0..self.k_h {
                for j in 0..self.k_w {
                    let row = ((c * self.k_h + i) * self.k_w + j) * p;
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        let dst = &mut cols[row + oy * self.out_w..row + (oy + 1) * self.out_w];
                        if y < 0 || y >= self.in_h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[y as usize * self.in_w..(y as usize + 1) * self.in_w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let x = (ox * self.stride + j) as isize - self.pad as isize;
                            *d = if x < 0 || x >= self.in_w as isize {
                                T::zero()
                            } else {
                                src[x as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeometry::im2col`]: scatters columns back, summing overlaps.
    fn col2im<T: Scalar>(&self, cols: &[T], image: &mut [T]) {
        let p = self.positions();
        for c in 0..self.in_c {
            let plane = &mut image[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for i in 0..self.k_h {
                for j in 0..self.k_w {
                    let row = ((c * self.k_h + i) * self.k_w + j) * p;
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        if y < 0 || y >= self.in_h as isize {
                            continue;
                        }
                        let src = &cols[row + oy * self.out_w..row + (oy + 1) * self.out_w];
                        let dst = &mut plane[y as usize * self.in_w..(y as usize + 1) * self.in_w];
                        for (ox, &g) in src.iter().enumerate() {
                            let x = (ox * self.stride + j) as isize - self.pad as isize;
                            if x >= 0 && x < self.in_w as isize {
                                dst[x as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution (cross-correlation) of `input` `(N, inC, H, W)` with
/// `weights` `(outC, inC, kH, kW)` plus a per-filter bias.
///
/// Lowered to a patch matrix and one matrix product per batch item.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let geo = ConvGeometry::new(input.shape, weights.shape, stride, pad)?;
    let out_c = weights.shape.n;
    if bias.len() != out_c {
        return Err(Error::shape("conv2d", "bias length", out_c, bias.len()));
    }
    let batch = input.shape.n;
    let (k, p) = (geo.patch_len(), geo.positions());
    let mut out = Tensor::zeros(Shape::new(batch, out_c, geo.out_h, geo.out_w));
    let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for n in 0..batch {
        let image = input.item(n);
        let patches: &[T] = if geo.is_pointwise() {
            image
        } else {
            geo.im2col(image, &mut cols);
            &cols
        };
        let dst = out.item_mut(n);
        matmul(out_c, k, p, MatRef::n(&weights.data), MatRef::n(patches), dst, false);
        for (o, &b) in bias.iter().enumerate() {
            if b != T::zero() {
                dst[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += b);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`]: returns `(d_input, d_weights, d_bias)`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let geo = ConvGeometry::new(input.shape, weights.shape, stride, pad)?;
    let out_c = weights.shape.n;
    let expected = Shape::new(input.shape.n, out_c, geo.out_h, geo.out_w);
    if grad_out.shape != expected {
        return Err(Error::invalid(
            "conv2d_backward",
            format!("upstream gradient shape {} does not match output {}", grad_out.shape, expected),
        ));
    }
    let (k, p) = (geo.patch_len(), geo.positions());
    let mut d_input = Tensor::zeros(input.shape);
    let mut d_weights = Tensor::zeros(weights.shape);
    let mut d_bias = vec![T::zero(); out_c];
    let mut cols = vec![T::zero(); k * p];
    let mut d_cols = vec![T::zero(); k * p];
    for n in 0..input.shape.n {
        let go = grad_out.item(n);
        for (o, db) in d_bias.iter_mut().enumerate() {
            *db += go[o * p..(o + 1) * p].iter().fold(T::zero(), |s, &v| s + v);
        }
        let patches: &[T] = if geo.is_pointwise() {
            input.item(n)
        } else {
            geo.im2col(input.item(n), &mut cols);
            &cols
        };
        // dW (outC×K) += dY (outC×P) · colsᵀ (P×K)
        matmul(out_c, p, k, MatRef::n(go), MatRef::t(patches), &mut d_weights.data, true);
        if geo.is_pointwise() {
            matmul(k, out_c, p, MatRef::t(&weights.data), MatRef::n(go), d_input.item_mut(n), false);
        } else {
            // dcols (K×P) = Wᵀ (K×outC) · dY (outC×P)
            matmul(k, out_c, p, MatRef::t(&weights.data), MatRef::n(go), &mut d_cols, false);
            geo.col2im(&d_cols, d_input.item_mut(n));
        }
    }
    Ok((d_input, d_weights, d_bias))
}

/// Ceil-mode max pooling with border-clipped windows.
///
/// Returns the pooled tensor and, for every output element, the flat index
/// of the input element that won its window (first maximum in scan order).
pub fn max_pool2d<T: Scalar>(input: &Tensor<T>, k: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    const OP: &str = "max_pool2d";
    if k == 0 || stride == 0 {
        return Err(Error::invalid(OP, "kernel and stride must be at least 1"));
    }
    let s = input.shape;
    let out_h = pool_out_extent(s.h, k, stride)
        .ok_or_else(|| Error::invalid(OP, format!("kernel {k} exceeds input height {}", s.h)))?;
    let out_w = pool_out_extent(s.w, k, stride)
        .ok_or_else(|| Error::invalid(OP, format!("kernel {k} exceeds input width {}", s.w)))?;
    let out_shape = Shape::new(s.n, s.c, out_h, out_w);
    let mut out = Tensor::zeros(out_shape);
    let mut argmax = vec![0usize; out_shape.len()];
    let mut o = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.plane();
            for oy in 0..out_h {
                let (y0, y1) = (oy * stride, (oy * stride + k).min(s.h));
                for ox in 0..out_w {
                    let (x0, x1) = (ox * stride, (ox * stride + k).min(s.w));
                    let mut best = base + y0 * s.w + x0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let idx = base + y * s.w + x;
                            if input.data[idx] > input.data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.data[o] = input.data[best];
                    argmax[o] = best;
                    o += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each upstream gradient to the input position that won its window.
pub fn max_pool2d_backward<T: Scalar>(input_shape: Shape, argmax: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape("max_pool2d_backward", "upstream length", argmax.len(), grad_out.len()));
    }
    let mut d_input = Tensor::zeros(input_shape);
    for (&idx, &g) in argmax.iter().zip(&grad_out.data) {
        d_input.data[idx] += g;
    }
    Ok(d_input)
}

/// `out[n, j] = Σ_i x[n, i] · w[i, j] + b[j]`, with `x` flattened per item
/// to length D and `weights` stored as `(D, M, 1, 1)`.
pub fn fully_connected<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    const OP: &str = "fully_connected";
    let d = weights.shape.n;
    let m = weights.shape.c;
    if input.shape.item_len() != d {
        return Err(Error::shape(OP, "flattened input length", d, input.shape.item_len()));
    }
    if bias.len() != m {
        return Err(Error::shape(OP, "bias length", m, bias.len()));
    }
    let batch = input.shape.n;
    let mut out = Tensor::zeros(Shape::new(batch, m, 1, 1));
    matmul(batch, d, m, MatRef::n(&input.data), MatRef::n(&weights.data), &mut out.data, false);
    for row in out.data.chunks_mut(m) {
        row.iter_mut().zip(bias).for_each(|(v, &b)| *v += b);
    }
    Ok(out)
}

/// Gradients of [`fully_connected`]: `(d_input, d_weights, d_bias)`.
pub fn fully_connected_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let d = weights.shape.n;
    let m = weights.shape.c;
    let batch = input.shape.n;
    if grad_out.len() != batch * m {
        return Err(Error::shape("fully_connected_backward", "upstream length", batch * m, grad_out.len()));
    }
    let mut d_input = Tensor::zeros(input.shape);
    let mut d_weights = Tensor::zeros(weights.shape);
    let mut d_bias = vec![T::zero(); m];
    matmul(d, batch, m, MatRef::t(&input.data), MatRef::n(&grad_out.data), &mut d_weights.data, false);
    matmul(batch, m, d, MatRef::n(&grad_out.data), MatRef::t(&weights.data), &mut d_input.data, false);
    for row in grad_out.data.chunks(m) {
        d_bias.iter_mut().zip(row).for_each(|(b, &g)| *b += g);
    }
    Ok((d_input, d_weights, d_bias))
}

/// Copies the `out_h × out_w` window starting at `(top, left)` of every plane.
pub fn crop<T: Scalar>(input: &Tensor<T>, top: usize, left: usize, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = input.shape;
    if out_h == 0 || out_w == 0 || top + out_h > s.h || left + out_w > s.w {
        return Err(Error::invalid(
            "crop",
            format!("window {out_h}×{out_w} at ({top}, {left}) exceeds input {}×{}", s.h, s.w),
        ));
    }
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, out_h, out_w));
    let mut dst = out.data.chunks_mut(out_w);
    for plane in input.data.chunks(s.plane()) {
        for y in top..top + out_h {
            let row = &plane[y * s.w + left..y * s.w + left + out_w];
            dst.next().expect("row count matches").copy_from_slice(row);
        }
    }
    Ok(out)
}

/// Reverses the width axis.
pub fn mirror<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    out.data.chunks_mut(input.shape.w).for_each(|row| row.reverse());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(shape: Shape, rng: &mut Rng) -> Tensor<f32> {
        Tensor::from_fn(shape, |_, _, _, _| rng.uniform_range(-1.0, 1.0) as f32)
    }

    /// Six nested loops, no lowering.
    fn conv_reference(x: &Tensor<f32>, w: &Tensor<f32>, b: &[f32], stride: usize, pad: usize) -> Tensor<f32> {
        let (xs, ws) = (x.shape(), w.shape());
        let oh = (xs.h + 2 * pad - ws.h) / stride + 1;
        let ow = (xs.w + 2 * pad - ws.w) / stride + 1;
        Tensor::from_fn(Shape::new(xs.n, ws.n, oh, ow), |n, o, oy, ox| {
            let mut acc = b[o] as f64;
            for c in 0..xs.c {
                for i in 0..ws.h {
                    for j in 0..ws.w {
                        let y = (oy * stride + i) as isize - pad as isize;
                        let xx = (ox * stride + j) as isize - pad as isize;
                        if y >= 0 && xx >= 0 && (y as usize) < xs.h && (xx as usize) < xs.w {
                            acc += x.get(n, c, y as usize, xx as usize) as f64 * w.get(o, c, i, j) as f64;
                        }
                    }
                }
            }
            acc as f32
        })
    }

    #[test]
    fn flat_index_round_trip() {
        let s = Shape::new(2, 3, 4, 5);
        for i in 0..s.len() {
            let (n, c, h, w) = s.coords(i);
            assert_eq!(s.offset(n, c, h, w), i);
        }
        assert_eq!(s.offset(1, 2, 3, 4), ((3 + 2) * 4 + 3) * 5 + 4);
    }

    #[test]
    fn from_vec_rejects_bad_length_and_zero_extent() {
        assert!(Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::from_vec(Shape::new(1, 0, 2, 2), vec![]).is_err());
    }

    #[test]
    fn conv_table_shape_first_layer() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 128, 128));
        let w = Tensor::zeros(Shape::new(48, 1, 9, 9));
        let y = conv2d(&x, &w, &[0.0; 48], 1, 0).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 48, 120, 120));
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::<f32>::filled(Shape::new(1, 1, 5, 5), 1.0);
        let w = Tensor::filled(Shape::new(1, 1, 1, 1), 1.0);
        assert_eq!(conv2d(&x, &w, &[0.0], 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_matches_loop_reference() {
        let mut rng = Rng::new(11);
        for &(stride, pad, k) in &[(1, 1, 3), (2, 0, 3), (1, 2, 5), (2, 1, 4), (1, 0, 1)] {
            let x = random(Shape::new(2, 3, 8, 8), &mut rng);
            let w = random(Shape::new(4, 3, k, k), &mut rng);
            let b: Vec<f32> = (0..4).map(|_| rng.uniform_range(-1.0, 1.0) as f32).collect();
            let got = conv2d(&x, &w, &b, stride, pad).unwrap();
            let want = conv_reference(&x, &w, &b, stride, pad);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-5, "stride {stride} pad {pad} k {k}");
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 5, 5));
        let w = Tensor::zeros(Shape::new(1, 3, 3, 3));
        let err = conv2d(&x, &w, &[0.0], 1, 0).unwrap_err().to_string();
        assert!(err.contains("input channels"), "{err}");
        let w = Tensor::zeros(Shape::new(1, 2, 7, 7));
        assert!(conv2d(&x, &w, &[0.0], 1, 0).is_err());
        let w = Tensor::zeros(Shape::new(2, 2, 3, 3));
        assert!(conv2d(&x, &w, &[0.0], 1, 0).unwrap_err().to_string().contains("bias"));
    }

    #[test]
    fn conv_is_linear_without_bias() {
        let mut rng = Rng::new(5);
        let x = random(Shape::new(1, 2, 6, 6), &mut rng);
        let y = random(Shape::new(1, 2, 6, 6), &mut rng);
        let w = random(Shape::new(3, 2, 3, 3), &mut rng);
        let (a, b) = (0.7f32, -1.3f32);
        let mix = Tensor::from_fn(x.shape(), |n, c, h, ww| a * x.get(n, c, h, ww) + b * y.get(n, c, h, ww));
        let lhs = conv2d(&mix, &w, &[0.0; 3], 1, 1).unwrap();
        let cx = conv2d(&x, &w, &[0.0; 3], 1, 1).unwrap();
        let cy = conv2d(&y, &w, &[0.0; 3], 1, 1).unwrap();
        for i in 0..lhs.len() {
            let rhs = a * cx.data()[i] + b * cy.data()[i];
            assert!((lhs.data()[i] - rhs).abs() <= 1e-5 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn pool_ceil_mode_shapes() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 192, 9, 9));
        let (y, _) = max_pool2d(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 192, 5, 5));
        assert_eq!(pool_out_extent(120, 2, 2), Some(60));
        assert!(max_pool2d(&Tensor::<f32>::zeros(Shape::new(1, 1, 1, 3)), 2, 2).is_err());
    }

    #[test]
    fn pool_constant_and_window_scan() {
        let c = Tensor::<f32>::filled(Shape::new(1, 2, 5, 5), 3.5);
        let (y, _) = max_pool2d(&c, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.5));

        let mut rng = Rng::new(9);
        let x = random(Shape::new(1, 1, 7, 7), &mut rng);
        let (y, argmax) = max_pool2d(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 4, 4));
        for oy in 0..4 {
            for ox in 0..4 {
                let mut best = f32::NEG_INFINITY;
                for yy in oy * 2..(oy * 2 + 2).min(7) {
                    for xx in ox * 2..(ox * 2 + 2).min(7) {
                        best = best.max(x.get(0, 0, yy, xx));
                    }
                }
                assert_eq!(y.get(0, 0, oy, ox), best);
            }
        }
        let ones = Tensor::filled(y.shape(), 1.0f32);
        let g = max_pool2d_backward(x.shape(), &argmax, &ones).unwrap();
        assert_eq!(g.data().iter().filter(|&&v| v == 1.0).count(), 16);
        assert_eq!(g.data().iter().filter(|&&v| v != 0.0).count(), 16);
        for (o, &idx) in argmax.iter().enumerate() {
            assert_eq!(x.data()[idx], y.data()[o]);
        }
    }

    #[test]
    fn fc_matches_loops_and_identity() {
        let mut rng = Rng::new(2);
        let x = random(Shape::new(2, 10, 1, 1), &mut rng);
        let w = random(Shape::new(10, 3, 1, 1), &mut rng);
        let b = [0.1f32, -0.2, 0.3];
        let y = fully_connected(&x, &w, &b).unwrap();
        for n in 0..2 {
            for j in 0..3 {
                let mut acc = b[j];
                for i in 0..10 {
                    acc += x.data()[n * 10 + i] * w.data()[i * 3 + j];
                }
                assert!((y.data()[n * 3 + j] - acc).abs() < 1e-5);
            }
        }
        let eye = Tensor::from_fn(Shape::new(4, 4, 1, 1), |i, j, _, _| if i == j { 1.0 } else { 0.0 });
        let v = random(Shape::new(1, 4, 1, 1), &mut rng);
        assert_eq!(fully_connected(&v, &eye, &[0.0; 4]).unwrap().data(), v.data());
        assert!(fully_connected(&random(Shape::new(1, 5, 1, 1), &mut rng), &eye, &[0.0; 4]).is_err());
    }

    #[test]
    fn fc_flattens_pool4_of_network_a() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 192, 5, 5));
        let w = Tensor::zeros(Shape::new(4800, 256, 1, 1));
        assert_eq!(fully_connected(&x, &w, &[0.0; 256]).unwrap().shape(), Shape::new(1, 256, 1, 1));
    }

    #[test]
    fn crop_and_mirror() {
        let ramp = Tensor::<f32>::from_fn(Shape::new(1, 1, 144, 144), |_, _, h, w| (h * 1000 + w) as f32);
        let c = crop(&ramp, 8, 8, 128, 128).unwrap();
        assert_eq!(c.shape(), Shape::new(1, 1, 128, 128));
        assert_eq!(c.get(0, 0, 0, 0), ramp.get(0, 0, 8, 8));
        assert_eq!(c.get(0, 0, 127, 127), ramp.get(0, 0, 135, 135));
        let c = crop(&ramp, 3, 11, 20, 30).unwrap();
        for h in 0..20 {
            for w in 0..30 {
                assert_eq!(c.get(0, 0, h, w), ramp.get(0, 0, h + 3, w + 11));
            }
        }
        assert!(crop(&ramp, 17, 0, 128, 128).is_err());
        let m = mirror(&c);
        assert_eq!(m.get(0, 0, 4, 0), c.get(0, 0, 4, 29));
        assert_eq!(mirror(&m), c);
    }
}
