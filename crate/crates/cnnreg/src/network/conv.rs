//! Volumetric convolution layers: strided valid cross-correlation with an
//! optional ReLU, plus the exact adjoint (backward) pass.
//!
//! The forward pass lowers each layer to an im2col buffer and a single
//! matrix product; the backward pass reuses the same buffer for the weight
//! gradient and scatters the input gradient back through the windows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multi-channel 3D array, channel-major, x-fastest within a channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    channels: usize,
    dims: [usize; 3],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self { channels, dims, data: vec![0.0; channels * dims[0] * dims[1] * dims[2]] }
    }

    pub fn new(channels: usize, dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * dims[0] * dims[1] * dims[2] {
            return Err(Error::Shape(format!(
                "tensor data length {} does not match {channels} x {dims:?}",
                data.len()
            )));
        }
        Ok(Self { channels, dims, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxels_per_channel(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        ((c * self.dims[2] + z) * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(c, x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, z: usize, v: f32) {
        let i = self.index(c, x, y, z);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels_per_channel();
        &self.data[c * n..(c + 1) * n]
    }

    /// Copy the cubic window starting at `start` (size `size` per axis) into
    /// a new tensor with the same channel count.
    pub fn extract(&self, start: [usize; 3], size: usize) -> Tensor {
        let mut out = Tensor::zeros(self.channels, [size; 3]);
        for c in 0..self.channels {
            for z in 0..size {
                for y in 0..size {
                    let src = self.index(c, start[0], start[1] + y, start[2] + z);
                    let dst = out.index(c, 0, y, z);
                    out.data[dst..dst + size]
                        .copy_from_slice(&self.data[src..src + size]);
                }
            }
        }
        out
    }
}

/// Row-major GEMM with explicit strides, split over row blocks when large.
/// `c[m x n] = a[m x k] * b[k x n]`; strides are in elements.
#[allow(clippy::too_many_arguments)]
fn sgemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    let run = |rows: usize, a_off: usize, c_chunk: &mut [f32]| unsafe {
        matrixmultiply::sgemm(
            rows,
            k,
            n,
            1.0,
            a.as_ptr().add(a_off),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c_chunk.as_mut_ptr(),
            n as isize,
            1,
        )
    };
    let threads = rayon::current_num_threads();
    if threads > 1 && m >= 2 * threads && m * k * n > 1 << 18 {
        let rows_per = m.div_ceil(threads);
        c[..m * n]
            .par_chunks_mut(rows_per * n)
            .enumerate()
            .for_each(|(i, chunk)| {
                let row0 = i * rows_per;
                let rows = chunk.len() / n;
                run(rows, row0 * rsa as usize, chunk);
            });
    } else {
        run(m, 0, &mut c[..m * n]);
    }
}

/// One volumetric convolution layer: cubic kernel, valid (unpadded) strided
/// cross-correlation plus bias, then ReLU when flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub spec: LayerSpec,
    /// Weights, `c_out * c_in * k^3`, tap order (ic, kz, ky, kx) within a row.
    pub kernel: Vec<f32>,
    /// One bias per output channel.
    pub bias: Vec<f32>,
}

/// Shape of a [`ConvLayer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub c_in: usize,
    pub c_out: usize,
    /// Cubic kernel side length.
    pub k: usize,
    pub stride: usize,
    pub relu: bool,
}

impl LayerSpec {
    pub fn kernel_len(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k * self.k
    }

    /// Rows of the lowered kernel matrix: taps per output channel.
    fn lowered_k(&self) -> usize {
        self.c_in * self.k * self.k * self.k
    }
}

/// Parameter gradients of one layer.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LayerGrads {
    pub fn zeros(spec: &LayerSpec) -> Self {
        Self { kernel: vec![0.0; spec.kernel_len()], bias: vec![0.0; spec.c_out] }
    }

    pub fn add_assign(&mut self, other: &LayerGrads) {
        for (a, b) in self.kernel.iter_mut().zip(&other.kernel) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f32) {
        for v in &mut self.kernel {
            *v *= s;
        }
        for v in &mut self.bias {
            *v *= s;
        }
    }
}

fn out_dim(n: usize, k: usize, stride: usize) -> Result<usize> {
    if n < k {
        return Err(Error::Shape(format!(
            "input extent {n} smaller than kernel {k}"
        )));
    }
    Ok((n - k) / stride + 1)
}

impl ConvLayer {
    pub fn new(spec: LayerSpec, kernel: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if spec.stride == 0 || spec.k == 0 {
            return Err(Error::Config("kernel size and stride must be >= 1".into()));
        }
        if kernel.len() != spec.kernel_len() || bias.len() != spec.c_out {
            return Err(Error::Shape(format!(
                "kernel/bias lengths {}/{} do not match spec {spec:?}",
                kernel.len(),
                bias.len()
            )));
        }
        Ok(Self { spec, kernel, bias })
    }

    pub fn output_dims(&self, input_dims: [usize; 3]) -> Result<[usize; 3]> {
        Ok([
            out_dim(input_dims[0], self.spec.k, self.spec.stride)?,
            out_dim(input_dims[1], self.spec.k, self.spec.stride)?,
            out_dim(input_dims[2], self.spec.k, self.spec.stride)?,
        ])
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.channels != self.spec.c_in {
            return Err(Error::Shape(format!(
                "layer expects {} input channels, got {}",
                self.spec.c_in, input.channels
            )));
        }
        Ok(())
    }

    /// Lower the input into the im2col buffer for this layer's geometry.
    fn fill_col(&self, input: &Tensor, out_dims: [usize; 3], col: &mut Vec<f32>) {
        let k = self.spec.k;
        let stride = self.spec.stride;
        let [nx, ny, _] = input.dims;
        let [ox, oy, oz] = out_dims;
        let n = ox * oy * oz;
        col.clear();
        col.resize(self.spec.lowered_k() * n, 0.0);
        let fill_row = |kk: usize, row: &mut [f32]| {
            let kx = kk % k;
            let ky = (kk / k) % k;
            let kz = (kk / (k * k)) % k;
            let ic = kk / (k * k * k);
            let src = input.channel(ic);
            let mut w = 0usize;
            for z in 0..oz {
                let iz = z * stride + kz;
                for y in 0..oy {
                    let iy = y * stride + ky;
                    let base = (iz * ny + iy) * nx + kx;
                    if stride == 1 {
                        row[w..w + ox].copy_from_slice(&src[base..base + ox]);
                        w += ox;
                    } else {
                        for x in 0..ox {
                            row[w] = src[base + x * stride];
                            w += 1;
                        }
                    }
                }
            }
        };
        // rayon dispatch costs more than the copy itself on patch-sized work
        if col.len() > 1 << 17 && rayon::current_num_threads() > 1 {
            col.par_chunks_mut(n).enumerate().for_each(|(kk, row)| fill_row(kk, row));
        } else {
            for (kk, row) in col.chunks_mut(n).enumerate() {
                fill_row(kk, row);
            }
        }
    }

    fn is_pointwise(&self) -> bool {
        self.spec.k == 1 && self.spec.stride == 1
    }

    /// Valid strided cross-correlation plus bias, then ReLU when flagged.
    /// Output extent per axis is `(n - k)/stride + 1`.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let out_dims = self.output_dims(input.dims)?;
        let n = out_dims[0] * out_dims[1] * out_dims[2];
        let kdim = self.spec.lowered_k();
        let mut out = Tensor::zeros(self.spec.c_out, out_dims);

        if self.is_pointwise() {
            sgemm_strided(
                self.spec.c_out,
                kdim,
                n,
                &self.kernel,
                kdim as isize,
                1,
                input.data(),
                n as isize,
                1,
                out.data_mut(),
            );
        } else {
            let mut col = Vec::new();
            self.fill_col(input, out_dims, &mut col);
            sgemm_strided(
                self.spec.c_out,
                kdim,
                n,
                &self.kernel,
                kdim as isize,
                1,
                &col,
                n as isize,
                1,
                out.data_mut(),
            );
        }

        let relu = self.spec.relu;
        let finish = |chunk: &mut [f32], b: f32| {
            for v in chunk {
                let t = *v + b;
                *v = if relu && t <= 0.0 { 0.0 } else { t };
            }
        };
        if out.data().len() > 1 << 17 && rayon::current_num_threads() > 1 {
            out.data_mut()
                .par_chunks_mut(n)
                .zip(&self.bias)
                .for_each(|(chunk, &b)| finish(chunk, b));
        } else {
            for (chunk, &b) in out.data_mut().chunks_mut(n).zip(&self.bias) {
                finish(chunk, b);
            }
        }
        Ok(out)
    }

    /// Exact adjoint of [`Self::forward`].
    ///
    /// `output` must be the forward result for `input` (its sign provides
    /// the ReLU mask; the subgradient at exactly 0 is 0). Returns the input
    /// gradient (when requested) plus kernel and bias gradients.
    pub fn backward(
        &self,
        input: &Tensor,
        output: &Tensor,
        grad_out: &Tensor,
        need_input_grad: bool,
    ) -> Result<(Option<Tensor>, LayerGrads)> {
        self.check_input(input)?;
        let out_dims = self.output_dims(input.dims)?;
        if grad_out.channels != self.spec.c_out || grad_out.dims != out_dims {
            return Err(Error::Shape(format!(
                "grad_out shape {}x{:?} does not match layer output {}x{:?}",
                grad_out.channels, grad_out.dims, self.spec.c_out, out_dims
            )));
        }
        if output.channels != self.spec.c_out || output.dims != out_dims {
            return Err(Error::Shape("cached output shape mismatch".into()));
        }
        let n = out_dims[0] * out_dims[1] * out_dims[2];
        let kdim = self.spec.lowered_k();

        // ReLU mask from the cached activation: post-activation > 0 iff the
        // pre-activation was > 0.
        let grad_pre: Vec<f32> = if self.spec.relu {
            grad_out
                .data()
                .iter()
                .zip(output.data())
                .map(|(&g, &o)| if o > 0.0 { g } else { 0.0 })
                .collect()
        } else {
            grad_out.data().to_vec()
        };

        let mut grads = LayerGrads::zeros(&self.spec);
        for (oc, gb) in grads.bias.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for &g in &grad_pre[oc * n..(oc + 1) * n] {
                acc += g as f64;
            }
            *gb = acc as f32;
        }

        let mut col_store = Vec::new();
        let col: &[f32] = if self.is_pointwise() {
            input.data()
        } else {
            self.fill_col(input, out_dims, &mut col_store);
            &col_store
        };

        // dL/dW = grad_pre (oc x n) * col^T (n x kdim)
        sgemm_strided(
            self.spec.c_out,
            n,
            kdim,
            &grad_pre,
            n as isize,
            1,
            col,
            1,
            n as isize,
            &mut grads.kernel,
        );

        if !need_input_grad {
            return Ok((None, grads));
        }

        // dL/dcol = W^T (kdim x oc) * grad_pre (oc x n)
        let mut grad_col = vec![0.0f32; kdim * n];
        sgemm_strided(
            kdim,
            self.spec.c_out,
            n,
            &self.kernel,
            1,
            kdim as isize,
            &grad_pre,
            n as isize,
            1,
            &mut grad_col,
        );

        let mut grad_input = Tensor::zeros(self.spec.c_in, input.dims);
        if self.is_pointwise() {
            grad_input.data_mut().copy_from_slice(&grad_col);
        } else {
            // scatter the column gradient back over the strided windows
            let k = self.spec.k;
            let stride = self.spec.stride;
            let [nx, ny, _] = input.dims;
            let [ox, oy, oz] = out_dims;
            for kk in 0..kdim {
                let kx = kk % k;
                let ky = (kk / k) % k;
                let kz = (kk / (k * k)) % k;
                let ic = kk / (k * k * k);
                let row = &grad_col[kk * n..(kk + 1) * n];
                let base_c = ic * input.voxels_per_channel();
                let dst = grad_input.data_mut();
                let mut w = 0usize;
                for z in 0..oz {
                    let iz = z * stride + kz;
                    for y in 0..oy {
                        let iy = y * stride + ky;
                        let base = base_c + (iz * ny + iy) * nx + kx;
                        for x in 0..ox {
                            dst[base + x * stride] += row[w];
                            w += 1;
                        }
                    }
                }
            }
        }
        Ok((Some(grad_input), grads))
    }
}
