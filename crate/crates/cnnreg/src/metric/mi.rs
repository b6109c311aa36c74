//! Mutual-information baseline with partial-volume (linear Parzen window)
//! histograms, returned negated so that lower = better.

use crate::error::{Error, Result};
use crate::metric::{MetricContext, MetricValueAndGradient};
use crate::transform::{StageKind, TransformStack};
use crate::volume::Volume;

use super::Mask;

/// Joint and marginal distributions from partial-volume bin assignment.
struct Histogram {
    bins: usize,
    joint: Vec<f64>,
    fixed_marginal: Vec<f64>,
    moving_marginal: Vec<f64>,
}

/// Continuous bin coordinate of an intensity in [0,1]: lower bin index
/// (clamped to `bins - 2`) and the weight of the upper neighbour.
#[inline]
fn bin_coord(v: f64, bins: usize) -> (usize, f64) {
    let z = v.clamp(0.0, 1.0) * (bins - 1) as f64;
    let i = (z.floor() as usize).min(bins - 2);
    (i, z - i as f64)
}

impl Histogram {
    fn build(pairs: &[(f64, f64)], bins: usize) -> Histogram {
        let mut joint = vec![0.0f64; bins * bins];
        let w = 1.0 / pairs.len() as f64;
        for &(a, b) in pairs {
            let (ia, ta) = bin_coord(a, bins);
            let (ib, tb) = bin_coord(b, bins);
            joint[ia * bins + ib] += w * (1.0 - ta) * (1.0 - tb);
            joint[ia * bins + ib + 1] += w * (1.0 - ta) * tb;
            joint[(ia + 1) * bins + ib] += w * ta * (1.0 - tb);
            joint[(ia + 1) * bins + ib + 1] += w * ta * tb;
        }
        let mut fixed_marginal = vec![0.0f64; bins];
        let mut moving_marginal = vec![0.0f64; bins];
        for a in 0..bins {
            for b in 0..bins {
                fixed_marginal[a] += joint[a * bins + b];
                moving_marginal[b] += joint[a * bins + b];
            }
        }
        Histogram { bins, joint, fixed_marginal, moving_marginal }
    }

    /// Mutual information in nats.
    fn mutual_information(&self) -> f64 {
        let mut mi = 0.0;
        for a in 0..self.bins {
            let pa = self.fixed_marginal[a];
            if pa <= 0.0 {
                continue;
            }
            for b in 0..self.bins {
                let pab = self.joint[a * self.bins + b];
                if pab <= 0.0 {
                    continue;
                }
                mi += pab * (pab / (pa * self.moving_marginal[b])).ln();
            }
        }
        mi
    }
}

fn check_bins(bins: usize) -> Result<()> {
    if bins < 2 {
        return Err(Error::Config(format!("mutual information needs >= 2 bins, got {bins}")));
    }
    Ok(())
}

/// Negative mutual information of two overlaid volumes over the masked
/// voxels (all voxels when no mask). Intensities are binned in [0,1] with
/// bilinear partial-volume weights; natural-log entropies.
pub fn mi_value(fixed: &Volume, warped: &Volume, bins: usize, mask: Option<&Mask>) -> Result<f64> {
    check_bins(bins)?;
    if fixed.dims() != warped.dims() {
        return Err(Error::Geometry(format!(
            "fixed dims {:?} do not match warped dims {:?}",
            fixed.dims(),
            warped.dims()
        )));
    }
    if let Some(m) = mask {
        if m.geometry().dims != fixed.dims() {
            return Err(Error::Geometry("mask dims do not match fixed volume".into()));
        }
    }
    let pairs: Vec<(f64, f64)> = fixed
        .data()
        .iter()
        .zip(warped.data())
        .enumerate()
        .filter(|(i, _)| mask.map_or(true, |m| m.data()[*i]))
        .map(|(_, (&a, &b))| (a as f64, b as f64))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Degenerate("empty mask: no voxels for the joint histogram".into()));
    }
    Ok(-Histogram::build(&pairs, bins).mutual_information())
}

/// Negative mutual information over the context's sample points with its
/// analytic gradient with respect to the active stage, chained through the
/// precomputed moving-image gradient and the transform Jacobian.
pub fn mi_gradient(
    ctx: &MetricContext,
    stack: &TransformStack,
    active: StageKind,
    bins: usize,
) -> Result<MetricValueAndGradient> {
    check_bins(bins)?;
    let geom = ctx.fixed.geometry();
    let [nx, ny, _] = geom.dims;

    // Pass 1: sample intensity pairs under the current transform.
    let mut points = Vec::with_capacity(ctx.sample_points.len());
    let mut pairs = Vec::with_capacity(ctx.sample_points.len());
    for &pt in ctx.sample_points {
        if let Some(m) = ctx.mask {
            if !m.data()[pt] {
                continue;
            }
        }
        let x = pt % nx;
        let y = (pt / nx) % ny;
        let z = pt / (nx * ny);
        let phys = geom.voxel_center([x, y, z]);
        let mapped = stack.apply(phys);
        let a = ctx.fixed.data()[pt] as f64;
        let b = ctx.moving.sample(mapped);
        points.push((phys, b));
        pairs.push((a, b));
    }
    if pairs.is_empty() {
        return Err(Error::Degenerate("empty mask: no sample points for the histogram".into()));
    }
    let hist = Histogram::build(&pairs, bins);
    let value = -hist.mutual_information();

    // Pass 2: d(-MI)/dtheta = -(1/n) sum_pt factor(pt) * dI'_m(pt)/dtheta,
    // factor = sum_{a,b bins} w_a * dw_b/dv * ln(p_ab / p_b).
    let n_inv = 1.0 / pairs.len() as f64;
    let scale = (bins - 1) as f64;
    let mut gradient = vec![0.0f64; stack.parameter_count(active)?];
    for ((phys, b_val), &(a_val, _)) in points.iter().zip(&pairs) {
        // clamped intensities sit on a flat of the window: zero derivative
        if *b_val <= 0.0 || *b_val >= 1.0 {
            continue;
        }
        let (ia, ta) = bin_coord(a_val, bins);
        let (ib, _) = bin_coord(*b_val, bins);
        let mut factor = 0.0f64;
        for (da, wa) in [(0usize, 1.0 - ta), (1, ta)] {
            if wa == 0.0 {
                continue;
            }
            for (db, dwb) in [(0usize, -scale), (1, scale)] {
                let pab = hist.joint[(ia + da) * bins + ib + db];
                let pb = hist.moving_marginal[ib + db];
                if pab <= 0.0 || pb <= 0.0 {
                    continue;
                }
                factor += wa * dwb * (pab / pb).ln();
            }
        }
        if factor == 0.0 {
            continue;
        }
        let mapped = stack.apply(*phys);
        let gm = ctx.moving_gradient.sample(mapped);
        if gm == [0.0; 3] {
            continue;
        }
        let jac = stack.jacobian(*phys, active)?;
        jac.accumulate(gm, -n_inv * factor, &mut gradient);
    }
    Ok(MetricValueAndGradient { value, gradient })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::head_mask;
    use crate::transform::SimilarityParams;
    use crate::volume::{Geometry, Volume};
    use rand::Rng;

    #[test]
    fn rejects_bad_bins_and_empty_mask() {
        let vol = Volume::constant(Geometry::isotropic(4, 1.0), 0.5);
        assert!(mi_value(&vol, &vol, 1, None).is_err());
        let empty = Mask::new(vol.geometry().clone(), vec![false; 64]).unwrap();
        assert!(mi_value(&vol, &vol, 8, Some(&empty)).is_err());
    }

    #[test]
    fn constant_fixed_image_has_zero_mi() {
        let mut r = crate::seeded_rng(40, 0);
        let geom = Geometry::isotropic(8, 1.0);
        let fixed = Volume::constant(geom.clone(), 0.37);
        let warped = Volume::new(geom, (0..512).map(|_| r.gen::<f32>()).collect()).unwrap();
        let v = mi_value(&fixed, &warped, 16, None).unwrap();
        assert!(v.abs() < 1e-12, "-MI = {v}");
    }

    #[test]
    fn self_pair_on_bin_centers_reaches_entropy() {
        // intensities exactly on bin centers make the partial-volume window
        // degenerate to hard assignment, so MI(A,A) = H(A)
        let bins = 8usize;
        let geom = Geometry::isotropic(8, 1.0);
        let mut r = crate::seeded_rng(40, 1);
        let data: Vec<f32> =
            (0..512).map(|_| r.gen_range(0..bins) as f32 / (bins - 1) as f32).collect();
        let vol = Volume::new(geom, data.clone()).unwrap();
        let neg_mi = mi_value(&vol, &vol, bins, None).unwrap();
        // entropy oracle from direct counting
        let mut counts = vec![0usize; bins];
        for &v in &data {
            counts[(v * (bins - 1) as f32).round() as usize] += 1;
        }
        let n = data.len() as f64;
        let entropy: f64 = counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum();
        assert!((neg_mi + entropy).abs() < 1e-9, "-MI {neg_mi} vs -H {}", -entropy);

        // and alignment is the minimum over shifts of the same image
        let shifted = Volume::new(
            vol.geometry().clone(),
            (0..512).map(|i| data[(i + 2) % 512]).collect(),
        )
        .unwrap();
        let neg_mi_shift = mi_value(&vol, &shifted, bins, None).unwrap();
        assert!(neg_mi < neg_mi_shift);
    }

    #[test]
    fn independent_noise_has_near_zero_mi() {
        let mut r = crate::seeded_rng(40, 2);
        let geom = Geometry::isotropic(32, 1.0);
        let n = geom.num_voxels();
        let a = Volume::new(geom.clone(), (0..n).map(|_| r.gen::<f32>()).collect()).unwrap();
        let b = Volume::new(geom, (0..n).map(|_| r.gen::<f32>()).collect()).unwrap();
        let v = mi_value(&a, &b, 16, None).unwrap();
        assert!(v.abs() < 0.05, "-MI = {v}");
    }

    #[test]
    fn head_mask_thresholds_intensities() {
        let geom = Geometry::new([2, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let vol = Volume::new(geom.clone(), vec![0.005, 0.02]).unwrap();
        let mask = head_mask(&vol, 0.01);
        assert_eq!(mask.data(), &[false, true]);

        let zeros = Volume::constant(Geometry::isotropic(4, 1.0), 0.0);
        assert!(head_mask(&zeros, 0.01).data().iter().all(|&m| !m));

        // counting oracle on a random volume
        let mut r = crate::seeded_rng(40, 3);
        let geom = Geometry::isotropic(10, 1.0);
        let data: Vec<f32> = (0..geom.num_voxels()).map(|_| r.gen()).collect();
        let vol = Volume::new(geom, data.clone()).unwrap();
        let mask = head_mask(&vol, 0.3);
        let expect = data.iter().filter(|&&v| v > 0.3).count();
        assert_eq!(mask.data().iter().filter(|&&m| m).count(), expect);
    }

    /// Smooth synthetic field with a dark border, aligned pair for gradient
    /// tests.
    fn smooth_volume(n: usize) -> Volume {
        let geom = Geometry::isotropic(n, 1.0);
        let c = (n - 1) as f32 / 2.0;
        Volume::from_fn(geom, |x, y, z| {
            let dx = (x as f32 - c) / c;
            let dy = (y as f32 - c) / c;
            let dz = (z as f32 - c) / c;
            let env = (-2.0 * (dx * dx + dy * dy + dz * dz)).exp();
            let tex = 0.6
                + 0.25 * (0.55 * x as f32).sin() * (0.45 * y as f32).cos()
                + 0.15 * (0.5 * z as f32).sin();
            env * tex
        })
    }

    fn context_all_voxels<'a>(
        fixed: &'a Volume,
        moving: &'a Volume,
        grad: &'a crate::volume::VectorVolume,
        points: &'a [usize],
    ) -> MetricContext<'a> {
        MetricContext::new(fixed, moving, grad, points, None).unwrap()
    }

    #[test]
    fn gradient_magnitude_smaller_at_alignment() {
        let vol = smooth_volume(16);
        let grad = vol.spatial_gradient().unwrap();
        let points: Vec<usize> = (0..vol.geometry().num_voxels()).collect();
        let ctx = context_all_voxels(&vol, &vol, &grad, &points);

        let norm = |offset: f64| -> f64 {
            let mut sim = SimilarityParams::identity(vol.geometry().center());
            sim.translation = [offset, 0.0, 0.0];
            let stack = TransformStack::identity().with_similarity(sim);
            let g = mi_gradient(&ctx, &stack, StageKind::Similarity, 16).unwrap();
            g.gradient.iter().map(|v| v * v).sum::<f64>().sqrt()
        };
        assert!(norm(0.0) < norm(2.0));
    }

    #[test]
    fn constant_moving_image_has_zero_gradient() {
        let fixed = smooth_volume(12);
        let moving = Volume::constant(fixed.geometry().clone(), 0.5);
        let grad = moving.spatial_gradient().unwrap();
        let points: Vec<usize> = (0..fixed.geometry().num_voxels()).collect();
        let ctx = context_all_voxels(&fixed, &moving, &grad, &points);
        let stack = TransformStack::identity()
            .with_similarity(SimilarityParams::identity(fixed.geometry().center()));
        let g = mi_gradient(&ctx, &stack, StageKind::Similarity, 16).unwrap();
        assert!(g.gradient.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let fixed = smooth_volume(20);
        // cross-modal pair: nonlinear intensity remap of the same geometry
        let moving = Volume::new(
            fixed.geometry().clone(),
            fixed.data().iter().map(|&v| 1.0 - (1.5 * v).min(1.0) * 0.9).collect(),
        )
        .unwrap();
        let grad = moving.spatial_gradient().unwrap();
        let points: Vec<usize> = (0..fixed.geometry().num_voxels()).collect();
        let ctx = context_all_voxels(&fixed, &moving, &grad, &points);
        let bins = 12;

        let mut sim = SimilarityParams::identity(fixed.geometry().center());
        sim.translation = [0.8, -0.4, 0.3];
        sim.rotation = [0.02, -0.03, 0.04];
        let stack = TransformStack::identity().with_similarity(sim);

        let res = mi_gradient(&ctx, &stack, StageKind::Similarity, bins).unwrap();
        let theta = stack.parameters(StageKind::Similarity).unwrap();
        let h = 0.05;
        let mut fd = vec![0.0f64; theta.len()];
        for (k, f) in fd.iter_mut().enumerate() {
            let eval = |delta: f64| {
                let mut s = stack.clone();
                let mut t = theta.clone();
                t[k] += delta;
                s.set_parameters(StageKind::Similarity, &t).unwrap();
                mi_gradient(&ctx, &s, StageKind::Similarity, bins).unwrap().value
            };
            *f = (eval(h) - eval(-h)) / (2.0 * h);
        }
        let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for k in 0..theta.len() {
            let err = (res.gradient[k] - fd[k]).abs() / scale;
            assert!(err < 5e-2, "param {k}: analytic {} vs fd {}", res.gradient[k], fd[k]);
        }
    }

    #[test]
    fn value_invariant_under_sample_reordering() {
        let fixed = smooth_volume(12);
        let moving = smooth_volume(12);
        let grad = moving.spatial_gradient().unwrap();
        let points: Vec<usize> = (0..fixed.geometry().num_voxels()).collect();
        let mut reversed = points.clone();
        reversed.reverse();
        let stack = TransformStack::identity()
            .with_similarity(SimilarityParams::identity(fixed.geometry().center()));
        let a = mi_gradient(
            &context_all_voxels(&fixed, &moving, &grad, &points),
            &stack,
            StageKind::Similarity,
            12,
        )
        .unwrap();
        let b = mi_gradient(
            &context_all_voxels(&fixed, &moving, &grad, &reversed),
            &stack,
            StageKind::Similarity,
            12,
        )
        .unwrap();
        assert!((a.value - b.value).abs() < 1e-6);
    }
}
