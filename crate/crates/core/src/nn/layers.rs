//! Feed-forward layers with hand-written backward passes.
//!
//! Image tensors are NHWC. Convolutions lower to GEMM through im2col, so a
//! conv's output rows come out directly in NHWC order.

use rand::Rng;

use super::params::{he_bound, uniform, ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::{matmul, matmul_at, matmul_bt, Tensor};

/// Fully connected layer: `y = x Wᵀ + b`, `W` is `[output, input]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
    weight: ParamId,
    bias: ParamId,
}

impl Dense {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        Self::with_bound(params, name, input, output, he_bound(input), rng)
    }

    /// Dense layer with an explicit uniform init bound.
    pub fn with_bound<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        input: usize,
        output: usize,
        bound: f64,
        rng: &mut R,
    ) -> Self {
        let weight = params.add(format!("{name}.weight"), uniform(&[output, input], bound, rng));
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[output]));
        Self {
            input,
            output,
            weight,
            bias,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape().len() != 2 || x.shape()[1] != self.input {
            return Err(Error::shape("dense", &[x.rows(), self.input], x.shape()));
        }
        let n = x.rows();
        let mut y = Tensor::zeros(&[n, self.output]);
        let b = params.get(self.bias).data();
        for r in 0..n {
            y.row_mut(r).copy_from_slice(b);
        }
        matmul_bt(
            x.data(),
            params.get(self.weight).data(),
            n,
            self.input,
            self.output,
            T::one(),
            y.data_mut(),
        );
        Ok(y)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut ParamSet<T>,
    ) -> Tensor<T> {
        let n = x.rows();
        matmul_at(
            dy.data(),
            x.data(),
            n,
            self.output,
            self.input,
            T::one(),
            grads.get_mut(self.weight).data_mut(),
        );
        let db = grads.get_mut(self.bias).data_mut();
        for r in 0..n {
            for (d, &g) in db.iter_mut().zip(dy.row(r)) {
                *d = *d + g;
            }
        }
        let mut dx = Tensor::zeros(&[n, self.input]);
        matmul(
            dy.data(),
            params.get(self.weight).data(),
            n,
            self.output,
            self.input,
            T::zero(),
            dx.data_mut(),
        );
        dx
    }
}

/// Geometry shared by convolution and transposed convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Output extent of a convolution: `(in + 2p - k) / s + 1`.
    pub fn conv_out(&self, extent: usize) -> Option<usize> {
        let padded = extent + 2 * self.padding;
        if padded < self.kernel || (padded - self.kernel) % self.stride != 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of a transposed convolution: `(in - 1) s - 2p + k`.
    pub fn deconv_out(&self, extent: usize) -> Option<usize> {
        ((extent - 1) * self.stride + self.kernel).checked_sub(2 * self.padding)
    }
}

/// Gathers convolution patches: `image [n, h, w, c]` into `cols [n*ph*pw, k*k*c]`
/// where `(ph, pw)` are the patch-grid extents.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    image: &[T],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    g: ConvGeometry,
    ph: usize,
    pw: usize,
    cols: &mut [T],
) {
    let k = g.kernel;
    let row_len = k * k * c;
    for b in 0..n {
        for oy in 0..ph {
            for ox in 0..pw {
                let row = ((b * ph + oy) * pw + ox) * row_len;
                let ix0 = (ox * g.stride) as isize - g.padding as isize;
                let interior = ix0 >= 0 && ix0 + k as isize <= w as isize;
                for ky in 0..k {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let dst_row = row + ky * k * c;
                    if iy < 0 || iy >= h as isize {
                        cols[dst_row..dst_row + k * c].fill(T::zero());
                        continue;
                    }
                    let line = (b * h + iy as usize) * w;
                    if interior {
                        let src = (line + ix0 as usize) * c;
                        cols[dst_row..dst_row + k * c].copy_from_slice(&image[src..src + k * c]);
                        continue;
                    }
                    for kx in 0..k {
                        let ix = ix0 + kx as isize;
                        let dst = &mut cols[dst_row + kx * c..dst_row + (kx + 1) * c];
                        if ix < 0 || ix >= w as isize {
                            dst.fill(T::zero());
                        } else {
                            let src = (line + ix as usize) * c;
                            dst.copy_from_slice(&image[src..src + c]);
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds patches back into an image; the adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    g: ConvGeometry,
    ph: usize,
    pw: usize,
    image: &mut [T],
) {
    let k = g.kernel;
    let row_len = k * k * c;
    for b in 0..n {
        for oy in 0..ph {
            for ox in 0..pw {
                let row = ((b * ph + oy) * pw + ox) * row_len;
                for ky in 0..k {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = &cols[row + (ky * k + kx) * c..row + (ky * k + kx + 1) * c];
                        let dst = ((b * h + iy as usize) * w + ix as usize) * c;
                        for (d, &s) in image[dst..dst + c].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
}

fn check_image(op: &'static str, x: &Tensor<impl Scalar>, channels: usize) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 || s[3] != channels {
        return Err(Error::shape(op, &[s.first().copied().unwrap_or(0), 0, 0, channels], s));
    }
    Ok((s[0], s[1], s[2]))
}

/// 2D convolution, weight `[out_channels, k*k*in_channels]` in `(ky, kx, ci)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    weight: ParamId,
    bias: ParamId,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        rng: &mut R,
    ) -> Self {
        let fan_in = geometry.kernel * geometry.kernel * in_channels;
        let weight = params.add(
            format!("{name}.weight"),
            uniform(&[out_channels, fan_in], he_bound(fan_in), rng),
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self {
            in_channels,
            out_channels,
            geometry,
            weight,
            bias,
        }
    }

    pub fn output_shape(&self, n: usize, h: usize, w: usize) -> Result<[usize; 4]> {
        match (self.geometry.conv_out(h), self.geometry.conv_out(w)) {
            (Some(oh), Some(ow)) => Ok([n, oh, ow, self.out_channels]),
            _ => Err(Error::InvalidArgument(format!(
                "conv geometry {:?} does not tile a {h}x{w} input",
                self.geometry
            ))),
        }
    }

    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, h, w) = check_image("conv2d", x, self.in_channels)?;
        let out = self.output_shape(n, h, w)?;
        let (oh, ow) = (out[1], out[2]);
        let kkc = self.geometry.kernel * self.geometry.kernel * self.in_channels;
        let rows = n * oh * ow;
        let mut cols = vec![T::zero(); rows * kkc];
        im2col(x.data(), n, h, w, self.in_channels, self.geometry, oh, ow, &mut cols);
        let mut y = Tensor::zeros(&out);
        let b = params.get(self.bias).data();
        for r in y.data_mut().chunks_exact_mut(self.out_channels) {
            r.copy_from_slice(b);
        }
        matmul_bt(
            &cols,
            params.get(self.weight).data(),
            rows,
            kkc,
            self.out_channels,
            T::one(),
            y.data_mut(),
        );
        Ok(y)
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut ParamSet<T>,
    ) -> Tensor<T> {
        let s = x.shape();
        let (n, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (dy.shape()[1], dy.shape()[2]);
        let kkc = self.geometry.kernel * self.geometry.kernel * self.in_channels;
        let rows = n * oh * ow;
        let mut cols = vec![T::zero(); rows * kkc];
        im2col(x.data(), n, h, w, self.in_channels, self.geometry, oh, ow, &mut cols);
        matmul_at(
            dy.data(),
            &cols,
            rows,
            self.out_channels,
            kkc,
            T::one(),
            grads.get_mut(self.weight).data_mut(),
        );
        let db = grads.get_mut(self.bias).data_mut();
        for r in dy.data().chunks_exact(self.out_channels) {
            for (d, &g) in db.iter_mut().zip(r) {
                *d = *d + g;
            }
        }
        matmul(
            dy.data(),
            params.get(self.weight).data(),
            rows,
            self.out_channels,
            kkc,
            T::zero(),
            &mut cols,
        );
        let mut dx = Tensor::zeros(s);
        col2im(&cols, n, h, w, self.in_channels, self.geometry, oh, ow, dx.data_mut());
        dx
    }
}

/// Transposed 2D convolution, weight `[in_channels, k*k*out_channels]`.
///
/// Computed as the adjoint of a [`Conv2d`] whose input is this layer's output.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    weight: ParamId,
    bias: ParamId,
}

impl ConvTranspose2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        rng: &mut R,
    ) -> Self {
        // Each output pixel receives about (k/s)^2 * in_channels contributions.
        let per_axis = geometry.kernel.div_ceil(geometry.stride);
        let fan_in = per_axis * per_axis * in_channels;
        let kkc = geometry.kernel * geometry.kernel * out_channels;
        let weight = params.add(
            format!("{name}.weight"),
            uniform(&[in_channels, kkc], he_bound(fan_in), rng),
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self {
            in_channels,
            out_channels,
            geometry,
            weight,
            bias,
        }
    }

    pub fn output_shape(&self, n: usize, h: usize, w: usize) -> Result<[usize; 4]> {
        match (self.geometry.deconv_out(h), self.geometry.deconv_out(w)) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok([n, oh, ow, self.out_channels]),
            _ => Err(Error::InvalidArgument(format!(
                "deconv geometry {:?} invalid for a {h}x{w} input",
                self.geometry
            ))),
        }
    }

    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, h, w) = check_image("conv_transpose2d", x, self.in_channels)?;
        let out = self.output_shape(n, h, w)?;
        let kkc = self.geometry.kernel * self.geometry.kernel * self.out_channels;
        let rows = n * h * w;
        let mut cols = vec![T::zero(); rows * kkc];
        matmul(
            x.data(),
            params.get(self.weight).data(),
            rows,
            self.in_channels,
            kkc,
            T::zero(),
            &mut cols,
        );
        let mut y = Tensor::zeros(&out);
        col2im(&cols, n, out[1], out[2], self.out_channels, self.geometry, h, w, y.data_mut());
        let b = params.get(self.bias).data();
        for r in y.data_mut().chunks_exact_mut(self.out_channels) {
            for (v, &bb) in r.iter_mut().zip(b) {
                *v = *v + bb;
            }
        }
        Ok(y)
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut ParamSet<T>,
    ) -> Tensor<T> {
        let s = x.shape();
        let (n, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (dy.shape()[1], dy.shape()[2]);
        let kkc = self.geometry.kernel * self.geometry.kernel * self.out_channels;
        let rows = n * h * w;
        let db = grads.get_mut(self.bias).data_mut();
        for r in dy.data().chunks_exact(self.out_channels) {
            for (d, &g) in db.iter_mut().zip(r) {
                *d = *d + g;
            }
        }
        let mut cols = vec![T::zero(); rows * kkc];
        im2col(dy.data(), n, oh, ow, self.out_channels, self.geometry, h, w, &mut cols);
        matmul_at(
            x.data(),
            &cols,
            rows,
            self.in_channels,
            kkc,
            T::one(),
            grads.get_mut(self.weight).data_mut(),
        );
        let mut dx = Tensor::zeros(s);
        matmul_bt(
            &cols,
            params.get(self.weight).data(),
            rows,
            kkc,
            self.in_channels,
            T::zero(),
            dx.data_mut(),
        );
        dx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the cached input `x` and output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    ConvTranspose2d(ConvTranspose2d),
    Activation(Activation),
    /// Reshape each sample to the given trailing shape.
    Reshape(Vec<usize>),
}

/// Per-layer inputs recorded during a forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    inputs: Vec<Tensor<T>>,
    output: Option<Tensor<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            inputs: Vec::new(),
            output: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Sign pattern of every ReLU input. Finite-difference checks skip
    /// coordinates whose perturbation flips this pattern (a kink).
    pub fn kink_pattern(&self, layers: &[Layer]) -> Vec<bool> {
        layers
            .iter()
            .zip(&self.inputs)
            .filter(|(l, _)| matches!(l, Layer::Activation(Activation::Relu)))
            .flat_map(|(_, x)| x.data().iter().map(|&v| v > T::zero()))
            .collect()
    }
}

/// Layers applied in order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: &Tensor<T>,
        mut tape: Option<&mut Tape<T>>,
    ) -> Result<Tensor<T>> {
        if let Some(t) = tape.as_deref_mut() {
            t.inputs.clear();
        }
        let mut cur = x.clone();
        for layer in &self.layers {
            let next = match layer {
                Layer::Dense(d) => d.forward(params, &cur)?,
                Layer::Conv2d(c) => c.forward(params, &cur)?,
                Layer::ConvTranspose2d(c) => c.forward(params, &cur)?,
                Layer::Activation(a) => cur.map(|v| a.apply(v)),
                Layer::Reshape(shape) => {
                    let mut full = vec![cur.rows()];
                    full.extend_from_slice(shape);
                    cur.clone().reshape(&full)?
                }
            };
            if let Some(t) = tape.as_deref_mut() {
                t.inputs.push(std::mem::replace(&mut cur, next));
            } else {
                cur = next;
            }
        }
        if let Some(t) = tape {
            t.output = Some(cur.clone());
        }
        Ok(cur)
    }

    /// Backpropagates `dy` through the recorded pass; returns `dL/dx`.
    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        tape: &Tape<T>,
        dy: &Tensor<T>,
        grads: &mut ParamSet<T>,
    ) -> Result<Tensor<T>> {
        if tape.inputs.len() != self.layers.len() || tape.output.is_none() {
            return Err(Error::ContractViolation(
                "backward called without a recorded forward pass".into(),
            ));
        }
        let mut d = dy.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &tape.inputs[i];
            d = match layer {
                Layer::Dense(l) => l.backward(params, x, &d, grads),
                Layer::Conv2d(l) => l.backward(params, x, &d, grads),
                Layer::ConvTranspose2d(l) => l.backward(params, x, &d, grads),
                Layer::Activation(a) => {
                    let y = match tape.inputs.get(i + 1) {
                        Some(next) => next,
                        None => tape.output.as_ref().expect("checked above"),
                    };
                    let mut out = d;
                    for ((g, &xv), &yv) in out.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                        *g = *g * a.derivative(xv, yv);
                    }
                    out
                }
                Layer::Reshape(_) => d.reshape(x.shape())?,
            };
        }
        Ok(d)
    }
}
