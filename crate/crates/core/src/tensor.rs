//! Dense row-major arrays and the raw numeric kernels behind the tape.

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64` in row-major order.
///
/// A rank-0 tensor (empty shape) holds exactly one value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::dim("item", format!("shape {:?} is not scalar", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of the leading axis as a flat slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let stride = self.data.len() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }

    /// New tensor made of the selected leading-axis rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        if self.shape.is_empty() || rows.is_empty() {
            return Err(Error::dim("select_rows", "need a non-scalar source and at least one row"));
        }
        let stride = self.data.len() / self.shape[0];
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= self.shape[0] {
                return Err(Error::dim(
                    "select_rows",
                    format!("row {r} out of range for {:?}", self.shape),
                ));
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Tensor { shape, data })
    }

    /// Concatenate along the leading axis.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "no parts"))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.is_empty() || &p.shape[1..] != tail {
                return Err(Error::dim(
                    "concat_rows",
                    format!("{:?} incompatible with {:?}", p.shape, first.shape),
                ));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Tensor { shape, data })
    }
}

/// Split `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c[m×n] = a[m×k] · b[k×n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::dim(
                "conv2d",
                format!("expected rank-4 input and kernel, got {input:?} and {kernel:?}"),
            ));
        }
        if input[1] != kernel[1] {
            return Err(Error::dim(
                "conv2d",
                format!("input {input:?} has {} channels, kernel {kernel:?} expects {}", input[1], kernel[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        if kernel[2] > input[2] + 2 * pad || kernel[3] > input[3] + 2 * pad {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kernel:?} larger than padded input {input:?} (pad {pad})"),
            ));
        }
        Ok(ConvGeometry {
            batch: input[0],
            in_channels: input[1],
            height: input[2],
            width: input[3],
            filters: kernel[0],
            kh: kernel[2],
            kw: kernel[3],
            stride,
            pad,
        })
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.in_channels, self.height, self.width]
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.filters, self.in_channels, self.kh, self.kw]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.filters, self.out_height(), self.out_width()]
    }

    /// Output positions `o` along one axis for which `o*stride + tap - pad` lands in `[0, len)`.
    fn valid_range(&self, tap: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        // smallest o with o*s + tap >= pad
        let lo = if tap >= self.pad { 0 } else { (self.pad - tap).div_ceil(s) };
        // largest o with o*s + tap - pad <= len - 1
        let limit = len + self.pad - 1;
        let hi = if tap > limit { 0 } else { ((limit - tap) / s + 1).min(out_len) };
        (lo.min(hi), hi)
    }

    /// Visit every (input offset, kernel offset, output offset) triple that contributes.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let (h, w) = (self.height, self.width);
        for b in 0..self.batch {
            for fi in 0..self.filters {
                let out_base = (b * self.filters + fi) * oh * ow;
                for c in 0..self.in_channels {
                    let in_base = (b * self.in_channels + c) * h * w;
                    for i in 0..self.kh {
                        let (ylo, yhi) = self.valid_range(i, h, oh);
                        for j in 0..self.kw {
                            let k_idx = ((fi * self.in_channels + c) * self.kh + i) * self.kw + j;
                            let (xlo, xhi) = self.valid_range(j, w, ow);
                            if xlo >= xhi {
                                continue;
                            }
                            for oy in ylo..yhi {
                                let iy = oy * self.stride + i - self.pad;
                                let in_row = in_base + iy * w;
                                let out_row = out_base + oy * ow;
                                let ix0 = xlo * self.stride + j - self.pad;
                                f(in_row + ix0, k_idx, out_row + xlo, xhi - xlo);
                            }
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn forward(&self, x: &[f64], k: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_shape().iter().product()];
        let s = self.stride;
        self.for_each_tap(|xi, ki, oi, n| {
            let kv = k[ki];
            for t in 0..n {
                out[oi + t] += kv * x[xi + t * s];
            }
        });
        out
    }

    pub(crate) fn input_grad(&self, gy: &[f64], k: &[f64]) -> Vec<f64> {
        let mut gx = vec![0.0; self.input_shape().iter().product()];
        let s = self.stride;
        self.for_each_tap(|xi, ki, oi, n| {
            let kv = k[ki];
            for t in 0..n {
                gx[xi + t * s] += kv * gy[oi + t];
            }
        });
        gx
    }

    pub(crate) fn kernel_grad(&self, x: &[f64], gy: &[f64]) -> Vec<f64> {
        let mut gk = vec![0.0; self.kernel_shape().iter().product()];
        let s = self.stride;
        self.for_each_tap(|xi, ki, oi, n| {
            let mut acc = 0.0;
            for t in 0..n {
                acc += gy[oi + t] * x[xi + t * s];
            }
            gk[ki] += acc;
        });
        gk
    }
}

/// Flat source indices of the maximum of each non-overlapping `size×size` window.
/// Ties resolve to the lowest index.
pub(crate) fn max_pool_indices(x: &[f64], shape: &[usize], size: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if shape.len() != 4 || size == 0 || shape[2] < size || shape[3] < size {
        return Err(Error::dim(
            "max_pool",
            format!("cannot pool {shape:?} with window {size}"),
        ));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / size, w / size);
    let mut idx = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let p = base + (oy * size + dy) * w + ox * size + dx;
                        if x[p] > x[best] {
                            best = p;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    Ok((idx, vec![b, c, oh, ow]))
}
