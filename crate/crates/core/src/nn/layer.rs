//! Layer kinds and their forward/backward kernels.
//!
//! Every kernel works on a whole batch whose leading dimension is the batch
//! size. Per-sample shapes are `[features]` for dense layers and
//! `[channels, height, width]` for convolution and pooling.

use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use super::gemm;
use super::tensor::Tensor;

/// Fully connected layer, `y = x·Wᵀ + b` with `W` of shape (out, in).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// 2-D cross-correlation with square kernels and symmetric zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// (out_channels, in_channels, kernel, kernel)
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool2d {
    pub size: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    MaxPool2d(MaxPool2d),
    Relu,
    /// Collapses all per-sample dimensions into one.
    Flatten,
    /// Re-views each sample under the given shape (equal element count).
    Reshape(Vec<usize>),
}

fn glorot<R: Rng + ?Sized>(len: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> Vec<f32> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    let dist = Uniform::new_inclusive(-limit, limit);
    (0..len).map(|_| dist.sample(rng)).collect()
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = glorot(in_dim * out_dim, in_dim, out_dim, rng);
        Self {
            in_dim,
            out_dim,
            weight: Tensor::new(vec![out_dim, in_dim], weight).expect("dense weight shape"),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let batch = x.batch_size();
        let mut y = vec![0.0; batch * self.out_dim];
        gemm::nt(batch, self.in_dim, self.out_dim, x.data(), self.weight.data(), 0.0, &mut y);
        for row in y.chunks_exact_mut(self.out_dim) {
            for (v, b) in row.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        Tensor::new(vec![batch, self.out_dim], y).expect("dense output shape")
    }

    fn backward(&self, x: &Tensor, dy: &Tensor, param_grads: bool, input_grad: bool) -> (Option<Tensor>, Vec<Tensor>) {
        let batch = x.batch_size();
        let dx = input_grad.then(|| {
            let mut dx = vec![0.0; batch * self.in_dim];
            gemm::nn(batch, self.out_dim, self.in_dim, dy.data(), self.weight.data(), 0.0, &mut dx);
            Tensor::new(x.shape().to_vec(), dx).expect("dense input grad shape")
        });
        if !param_grads {
            return (dx, vec![Tensor::zeros(self.weight.shape()), Tensor::zeros(self.bias.shape())]);
        }
        let mut dw = Tensor::zeros(self.weight.shape());
        gemm::tn(self.out_dim, batch, self.in_dim, dy.data(), x.data(), 0.0, dw.data_mut());
        let mut db = Tensor::zeros(self.bias.shape());
        for row in dy.data().chunks_exact(self.out_dim) {
            for (acc, g) in db.data_mut().iter_mut().zip(row) {
                *acc += g;
            }
        }
        (dx, vec![dw, db])
    }
}

/// Samples unfolded per matrix product in the convolution passes.
const CONV_GROUP: usize = 16;

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let area = kernel * kernel;
        let weight = glorot(
            out_channels * in_channels * area,
            in_channels * area,
            out_channels * area,
            rng,
        );
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Tensor::new(vec![out_channels, in_channels, kernel, kernel], weight)
                .expect("conv weight shape"),
            bias: Tensor::zeros(&[out_channels]),
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if self.stride == 0 || hp < self.kernel || wp < self.kernel {
            return None;
        }
        Some(((hp - self.kernel) / self.stride + 1, (wp - self.kernel) / self.stride + 1))
    }

    /// Unfolds one sample `(C,H,W)` into column block `offset..offset+OH·OW`
    /// of a `(C·k·k, stride)` row-major matrix.
    fn im2col(&self, x: &[f32], (h, w): (usize, usize), (oh, ow): (usize, usize), cols: &mut [f32], stride: usize, offset: usize) {
        let k = self.kernel;
        for c in 0..self.in_channels {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * stride + offset..row * stride + offset + oh * ow];
                    let (x_lo, x_hi) = valid_range(kj, self.padding, self.stride, w, ow);
                    for oy in 0..oh {
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        let iy = (oy * self.stride + ki).wrapping_sub(self.padding);
                        if iy >= h || x_lo >= x_hi {
                            line.fill(0.0);
                            continue;
                        }
                        line[..x_lo].fill(0.0);
                        line[x_hi..].fill(0.0);
                        let src = &plane[iy * w..(iy + 1) * w];
                        let ix0 = x_lo * self.stride + kj - self.padding;
                        if self.stride == 1 {
                            line[x_lo..x_hi].copy_from_slice(&src[ix0..ix0 + x_hi - x_lo]);
                        } else {
                            for (j, v) in line[x_lo..x_hi].iter_mut().enumerate() {
                                *v = src[ix0 + j * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatters one column block back onto a sample, accumulating overlaps.
    fn col2im(&self, cols: &[f32], (h, w): (usize, usize), (oh, ow): (usize, usize), stride: usize, offset: usize, dx: &mut [f32]) {
        let k = self.kernel;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * stride + offset..row * stride + offset + oh * ow];
                    let (x_lo, x_hi) = valid_range(kj, self.padding, self.stride, w, ow);
                    if x_lo >= x_hi {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki).wrapping_sub(self.padding);
                        if iy >= h {
                            continue;
                        }
                        let line = &src[oy * ow + x_lo..oy * ow + x_hi];
                        let dst = &mut plane[iy * w..(iy + 1) * w];
                        let ix0 = x_lo * self.stride + kj - self.padding;
                        for (j, g) in line.iter().enumerate() {
                            dst[ix0 + j * self.stride] += g;
                        }
                    }
                }
            }
        }
    }

    /// Samples are unfolded in groups of [`CONV_GROUP`] into one
    /// `(C·k·k, G·OH·OW)` matrix so each group is a single matrix product.
    fn forward(&self, x: &Tensor) -> Tensor {
        let (batch, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let (oh, ow) = self.out_hw(h, w).expect("conv shape validated by network");
        let patch = self.in_channels * self.kernel * self.kernel;
        let spatial = oh * ow;
        let in_len = self.in_channels * h * w;
        let out_len = self.out_channels * spatial;
        let mut cols = vec![0.0; patch * CONV_GROUP * spatial];
        let mut prod = vec![0.0; self.out_channels * CONV_GROUP * spatial];
        let mut y = vec![0.0; batch * out_len];
        for (xs, ys) in x.data().chunks(CONV_GROUP * in_len).zip(y.chunks_mut(CONV_GROUP * out_len)) {
            let wide = xs.len() / in_len * spatial;
            for (b, sample) in xs.chunks_exact(in_len).enumerate() {
                self.im2col(sample, (h, w), (oh, ow), &mut cols, wide, b * spatial);
            }
            gemm::nn(self.out_channels, patch, wide, self.weight.data(), &cols[..patch * wide], 0.0, &mut prod[..self.out_channels * wide]);
            for (b, out) in ys.chunks_exact_mut(out_len).enumerate() {
                for (o, plane) in out.chunks_exact_mut(spatial).enumerate() {
                    let bias = self.bias.data()[o];
                    let src = &prod[o * wide + b * spatial..o * wide + (b + 1) * spatial];
                    for (d, s) in plane.iter_mut().zip(src) {
                        *d = s + bias;
                    }
                }
            }
        }
        Tensor::new(vec![batch, self.out_channels, oh, ow], y).expect("conv output shape")
    }

    fn backward(&self, x: &Tensor, dy: &Tensor, param_grads: bool, input_grad: bool) -> (Option<Tensor>, Vec<Tensor>) {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let (oh, ow) = self.out_hw(h, w).expect("conv shape validated by network");
        let patch = self.in_channels * self.kernel * self.kernel;
        let spatial = oh * ow;
        let in_len = self.in_channels * h * w;
        let out_len = self.out_channels * spatial;

        let mut dw = Tensor::zeros(self.weight.shape());
        let mut db = Tensor::zeros(self.bias.shape());
        let mut dx = input_grad.then(|| Tensor::zeros(x.shape()));
        if !param_grads && !input_grad {
            return (None, vec![dw, db]);
        }
        let mut g = vec![0.0; self.out_channels * CONV_GROUP * spatial];
        let mut cols = vec![0.0; patch * CONV_GROUP * spatial];
        let groups = x.data().chunks(CONV_GROUP * in_len).zip(dy.data().chunks(CONV_GROUP * out_len));
        for (gi, (xs, dys)) in groups.enumerate() {
            let wide = xs.len() / in_len * spatial;
            // dy as (OC, G·OH·OW), matching the unfolded column order
            for (b, sample) in dys.chunks_exact(out_len).enumerate() {
                for (o, plane) in sample.chunks_exact(spatial).enumerate() {
                    g[o * wide + b * spatial..o * wide + (b + 1) * spatial].copy_from_slice(plane);
                }
            }
            let g = &g[..self.out_channels * wide];
            let cols = &mut cols[..patch * wide];
            if param_grads {
                for (b, sample) in xs.chunks_exact(in_len).enumerate() {
                    self.im2col(sample, (h, w), (oh, ow), cols, wide, b * spatial);
                }
                gemm::nt(self.out_channels, wide, patch, g, cols, 1.0, dw.data_mut());
                for (acc, row) in db.data_mut().iter_mut().zip(g.chunks_exact(wide)) {
                    *acc += row.iter().sum::<f32>();
                }
            }
            if let Some(dx) = dx.as_mut() {
                gemm::tn(patch, self.out_channels, wide, self.weight.data(), g, 0.0, cols);
                let dxs = dx.data_mut()[gi * CONV_GROUP * in_len..].chunks_exact_mut(in_len);
                for (b, dsample) in dxs.take(wide / spatial).enumerate() {
                    self.col2im(cols, (h, w), (oh, ow), wide, b * spatial, dsample);
                }
            }
        }
        (dx, vec![dw, db])
    }
}

/// Output positions `lo..hi` along one axis whose input index
/// `o·stride + offset − padding` falls inside `0..len`.
fn valid_range(offset: usize, padding: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(offset).div_ceil(stride);
    let hi = (len + padding).saturating_sub(offset).div_ceil(stride).min(out_len);
    (lo.min(hi), hi)
}

impl MaxPool2d {
    fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if self.stride == 0 || self.size == 0 || h < self.size || w < self.size {
            return None;
        }
        Some(((h - self.size) / self.stride + 1, (w - self.size) / self.stride + 1))
    }

    /// Flat index (within the plane) of the first maximal element of a window.
    fn argmax(&self, plane: &[f32], w: usize, oy: usize, ox: usize) -> usize {
        let (y0, x0) = (oy * self.stride, ox * self.stride);
        let mut best = y0 * w + x0;
        for y in y0..y0 + self.size {
            for x in x0..x0 + self.size {
                if plane[y * w + x] > plane[best] {
                    best = y * w + x;
                }
            }
        }
        best
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let (batch, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oh, ow) = self.out_hw(h, w).expect("pool shape validated by network");
        let mut y = Vec::with_capacity(batch * c * oh * ow);
        for plane in x.data().chunks_exact(h * w) {
            for oy in 0..oh {
                for ox in 0..ow {
                    y.push(plane[self.argmax(plane, w, oy, ox)]);
                }
            }
        }
        Tensor::new(vec![batch, c, oh, ow], y).expect("pool output shape")
    }

    fn backward(&self, x: &Tensor, dy: &Tensor) -> Tensor {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let (oh, ow) = self.out_hw(h, w).expect("pool shape validated by network");
        let mut dx = Tensor::zeros(x.shape());
        let planes = x.data().chunks_exact(h * w).zip(dy.data().chunks_exact(oh * ow));
        for ((plane, g), dplane) in planes.zip(dx.data_mut().chunks_exact_mut(h * w)) {
            for oy in 0..oh {
                for ox in 0..ow {
                    dplane[self.argmax(plane, w, oy, ox)] += g[oy * ow + ox];
                }
            }
        }
        dx
    }
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "Dense",
            Layer::Conv2d(_) => "Conv2D",
            Layer::MaxPool2d(_) => "MaxPool2D",
            Layer::Relu => "ReLU",
            Layer::Flatten => "Flatten",
            Layer::Reshape(_) => "Reshape",
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            Layer::Conv2d(c) => vec![&c.weight, &c.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Per-sample output shape, or `None` when `input` is not accepted.
    pub fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match self {
            Layer::Dense(d) => (input == [d.in_dim]).then(|| vec![d.out_dim]),
            Layer::Conv2d(c) => match *input {
                [ch, h, w] if ch == c.in_channels => {
                    c.out_hw(h, w).map(|(oh, ow)| vec![c.out_channels, oh, ow])
                }
                _ => None,
            },
            Layer::MaxPool2d(p) => match *input {
                [ch, h, w] => p.out_hw(h, w).map(|(oh, ow)| vec![ch, oh, ow]),
                _ => None,
            },
            Layer::Relu => Some(input.to_vec()),
            Layer::Flatten => Some(vec![input.iter().product()]),
            Layer::Reshape(target) => {
                (target.iter().product::<usize>() == input.iter().product::<usize>())
                    .then(|| target.clone())
            }
        }
    }

    /// Applies the layer to a batch whose shape has already been validated.
    pub(crate) fn forward(&self, x: &Tensor) -> Tensor {
        match self {
            Layer::Dense(d) => d.forward(x),
            Layer::Conv2d(c) => c.forward(x),
            Layer::MaxPool2d(p) => p.forward(x),
            Layer::Relu => {
                // NaN passes through so divergence surfaces in the loss
                let data = x.data().iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect();
                Tensor::new(x.shape().to_vec(), data).expect("relu shape")
            }
            Layer::Flatten | Layer::Reshape(_) => {
                let mut shape = vec![x.batch_size()];
                shape.extend(self.output_shape(&x.shape()[1..]).expect("validated"));
                x.clone().reshape(&shape).expect("validated")
            }
        }
    }

    /// Returns the input gradient (when requested) and one gradient per
    /// parameter tensor. Parameter gradients stay zero when `param_grads` is false.
    pub(crate) fn backward(
        &self,
        x: &Tensor,
        dy: &Tensor,
        param_grads: bool,
        input_grad: bool,
    ) -> (Option<Tensor>, Vec<Tensor>) {
        match self {
            Layer::Dense(d) => d.backward(x, dy, param_grads, input_grad),
            Layer::Conv2d(c) => c.backward(x, dy, param_grads, input_grad),
            Layer::MaxPool2d(p) => (Some(p.backward(x, dy)), Vec::new()),
            Layer::Relu => {
                let data = x
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                (Some(Tensor::new(x.shape().to_vec(), data).expect("relu shape")), Vec::new())
            }
            Layer::Flatten | Layer::Reshape(_) => {
                (Some(dy.clone().reshape(x.shape()).expect("validated")), Vec::new())
            }
        }
    }
}
