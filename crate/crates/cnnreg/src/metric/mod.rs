//! Registration cost functions.
//!
//! The learned metric aggregates patch dissimilarity scores over a dense
//! grid (the sum of the fully convolutional map) and differentiates
//! analytically with respect to the transform: each sample point contributes
//! the product of the map's derivative with respect to the warped intensity,
//! the precomputed moving-image gradient sampled at the mapped point, and
//! the transform Jacobian. The mutual-information baseline runs in the same
//! pipeline with an optional head mask.

mod mi;

pub use mi::{mi_gradient, mi_value};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::{Network, Tensor};
use crate::transform::{StageKind, TransformStack};
use crate::volume::{resample, Geometry, VectorVolume, Volume};

/// Boolean volume marking voxels that participate in a masked metric.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    geom: Geometry,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(geom: Geometry, data: Vec<bool>) -> Result<Self> {
        if data.len() != geom.num_voxels() {
            return Err(Error::Geometry("mask length does not match geometry".into()));
        }
        Ok(Self { geom, data })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }
}

/// Foreground mask: true where intensity exceeds the threshold (default
/// 0.01 on normalized images).
pub fn head_mask(vol: &Volume, threshold: f32) -> Mask {
    Mask {
        geom: vol.geometry().clone(),
        data: vol.data().iter().map(|&v| v > threshold).collect(),
    }
}

/// Shared inputs of one metric evaluation: the fixed and moving volumes, the
/// precomputed moving-image gradient, the fixed-domain sample points (linear
/// voxel indices) for the gradient's outer sum, and an optional mask.
pub struct MetricContext<'a> {
    pub fixed: &'a Volume,
    pub moving: &'a Volume,
    pub moving_gradient: &'a VectorVolume,
    pub sample_points: &'a [usize],
    pub mask: Option<&'a Mask>,
}

impl<'a> MetricContext<'a> {
    pub fn new(
        fixed: &'a Volume,
        moving: &'a Volume,
        moving_gradient: &'a VectorVolume,
        sample_points: &'a [usize],
        mask: Option<&'a Mask>,
    ) -> Result<Self> {
        if moving_gradient.geometry() != moving.geometry() {
            return Err(Error::Geometry(
                "moving gradient geometry does not match the moving image".into(),
            ));
        }
        let n = fixed.geometry().num_voxels();
        if sample_points.iter().any(|&p| p >= n) {
            return Err(Error::Geometry("sample point outside the fixed domain".into()));
        }
        if let Some(m) = mask {
            if m.geometry().dims != fixed.dims() {
                return Err(Error::Geometry("mask dims do not match the fixed volume".into()));
            }
        }
        Ok(Self { fixed, moving, moving_gradient, sample_points, mask })
    }
}

/// A metric value with its gradient for the active transform stage.
#[derive(Debug, Clone)]
pub struct MetricValueAndGradient {
    pub value: f64,
    pub gradient: Vec<f64>,
}

/// Stack the fixed volume and a warped volume as the 2-channel network
/// input (channel 0 fixed, channel 1 warped).
pub fn pair_input(fixed: &Volume, warped: &Volume) -> Result<Tensor> {
    if fixed.dims() != warped.dims() {
        return Err(Error::Geometry("fixed and warped dims differ".into()));
    }
    let mut data = Vec::with_capacity(2 * fixed.data().len());
    data.extend_from_slice(fixed.data());
    data.extend_from_slice(warped.data());
    Tensor::new(2, fixed.dims(), data)
}

/// Learned metric value: resample the moving image, score the pair fully
/// convolutionally and sum the dissimilarity map.
pub fn cnn_metric_value(net: &Network, ctx: &MetricContext, stack: &TransformStack) -> Result<f64> {
    let warped = resample(ctx.moving, stack, ctx.fixed.geometry());
    let input = pair_input(ctx.fixed, &warped)?;
    Ok(net.forward_full(&input)?.sum())
}

/// Learned metric value and its analytic gradient for the active stage.
///
/// One fully convolutional forward pass gives the value; one backward pass
/// seeded with ones gives the derivative of the map sum with respect to
/// every warped-image voxel. Each sample point then contributes
/// `dN/dI'm(x) * grad_Im(T(x)) * J_T(x)`; subsampling applies only to this
/// outer sum, never to the forward/backward passes.
pub fn cnn_metric_gradient(
    net: &Network,
    ctx: &MetricContext,
    stack: &TransformStack,
    active: StageKind,
) -> Result<MetricValueAndGradient> {
    let warped = resample(ctx.moving, stack, ctx.fixed.geometry());
    let input = pair_input(ctx.fixed, &warped)?;
    let cache = net.forward_cached(&input)?;
    let value = net.map_from_cache(&cache).sum();
    let input_grad = net.input_gradient_cached(&cache)?;
    let warped_grad = input_grad.channel(1);

    let geom = ctx.fixed.geometry();
    let [nx, ny, _] = geom.dims;
    let param_count = stack.parameter_count(active)?;

    let accumulate_range = |points: &[usize]| -> Result<Vec<f64>> {
        let mut grad = vec![0.0f64; param_count];
        for &pt in points {
            let g = warped_grad[pt] as f64;
            if g == 0.0 {
                continue;
            }
            let x = pt % nx;
            let y = (pt / nx) % ny;
            let z = pt / (nx * ny);
            let phys = geom.voxel_center([x, y, z]);
            let gm = ctx.moving_gradient.sample(stack.apply(phys));
            if gm == [0.0; 3] {
                continue;
            }
            let jac = stack.jacobian(phys, active)?;
            jac.accumulate(gm, g, &mut grad);
        }
        Ok(grad)
    };

    // fixed chunk layout keeps the f64 reduction order independent of the
    // worker count
    const CHUNKS: usize = 16;
    let points = ctx.sample_points;
    let gradient = if points.len() >= 4096 && rayon::current_num_threads() > 1 {
        let chunk_len = points.len().div_ceil(CHUNKS);
        let partials: Vec<Result<Vec<f64>>> =
            points.par_chunks(chunk_len).map(accumulate_range).collect();
        let mut total = vec![0.0f64; param_count];
        for p in partials {
            let p = p?;
            for (t, v) in total.iter_mut().zip(&p) {
                *t += v;
            }
        }
        total
    } else {
        accumulate_range(points)?
    };

    Ok(MetricValueAndGradient { value, gradient })
}

/// Forward-only patch scores for candidate displacements at one node: the
/// fixed patch is compared against the moving image sampled at
/// `T(x) + u` for each candidate `u`. No gradients are involved.
pub fn unary_potentials(
    net: &Network,
    fixed: &Volume,
    moving: &Volume,
    stack: &TransformStack,
    node_center: [f64; 3],
    displacements: &[[f64; 3]],
) -> Result<Vec<f32>> {
    let p = net.patch_size();
    let geom = fixed.geometry();
    let ci = geom.continuous_index(node_center);
    let half = ((p - 1) / 2) as i64;
    let mut start = [0usize; 3];
    for a in 0..3 {
        let c = ci[a].round() as i64;
        let s = c - half;
        if s < 0 || (s + p as i64) > geom.dims[a] as i64 {
            return Err(Error::Geometry(format!(
                "patch at node {node_center:?} exceeds the fixed domain"
            )));
        }
        start[a] = s as usize;
    }

    let mut fixed_patch = vec![0.0f32; p * p * p];
    let mut idx = 0;
    for z in 0..p {
        for y in 0..p {
            for x in 0..p {
                fixed_patch[idx] = fixed.get(start[0] + x, start[1] + y, start[2] + z);
                idx += 1;
            }
        }
    }

    displacements
        .iter()
        .map(|u| {
            let mut data = Vec::with_capacity(2 * p * p * p);
            data.extend_from_slice(&fixed_patch);
            for z in 0..p {
                for y in 0..p {
                    for x in 0..p {
                        let phys =
                            geom.voxel_center([start[0] + x, start[1] + y, start[2] + z]);
                        let mapped = stack.apply(phys);
                        data.push(
                            moving.sample([mapped[0] + u[0], mapped[1] + u[1], mapped[2] + u[2]])
                                as f32,
                        );
                    }
                }
            }
            let patch = Tensor::new(2, [p; 3], data)?;
            net.forward_patch(&patch)
        })
        .collect()
}
