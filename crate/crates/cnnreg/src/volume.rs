//! 3D scalar volumes with physical geometry.
//!
//! Voxel data is stored x-fastest (`index = x + nx*(y + ny*z)`). Voxel `i`
//! sits at the physical point `origin + i * spacing`; volumes are axis
//! aligned (no orientation matrix). Sampling outside the domain returns 0.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transform::TransformStack;

/// Grid geometry shared by scalar, vector and label volumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    /// Voxel size in mm, strictly positive.
    pub spacing: [f64; 3],
    /// Physical position of voxel (0,0,0) in mm.
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Geometry(format!("zero dimension in {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Geometry(format!("non-positive spacing {spacing:?}")));
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Isotropic geometry at the given voxel count and spacing, origin 0.
    pub fn isotropic(n: usize, spacing: f64) -> Self {
        Self::new([n; 3], [spacing; 3], [0.0; 3]).expect("valid isotropic geometry")
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Physical coordinates of a voxel center.
    #[inline]
    pub fn voxel_center(&self, i: [usize; 3]) -> [f64; 3] {
        [
            self.origin[0] + i[0] as f64 * self.spacing[0],
            self.origin[1] + i[1] as f64 * self.spacing[1],
            self.origin[2] + i[2] as f64 * self.spacing[2],
        ]
    }

    /// Continuous voxel coordinates of a physical point.
    #[inline]
    pub fn continuous_index(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Extent of the voxel-center span per axis, in mm.
    pub fn extent(&self) -> [f64; 3] {
        [
            (self.dims[0] - 1) as f64 * self.spacing[0],
            (self.dims[1] - 1) as f64 * self.spacing[1],
            (self.dims[2] - 1) as f64 * self.spacing[2],
        ]
    }

    /// Physical center of the voxel-center span.
    pub fn center(&self) -> [f64; 3] {
        let e = self.extent();
        [
            self.origin[0] + 0.5 * e[0],
            self.origin[1] + 0.5 * e[1],
            self.origin[2] + 0.5 * e[2],
        ]
    }

    /// Half the physical diagonal, used as the characteristic length that
    /// makes rotation and scale steps commensurate with translations.
    pub fn half_diagonal(&self) -> f64 {
        let e = self.extent();
        0.5 * (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt()
    }

    /// True if the physical point lies inside the voxel-center span.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let c = self.continuous_index(p);
        (0..3).all(|a| c[a] >= 0.0 && c[a] <= (self.dims[a] - 1) as f64)
    }

    fn check_len(&self, len: usize, what: &str) -> Result<()> {
        if len != self.num_voxels() {
            return Err(Error::Geometry(format!(
                "{what} length {len} does not match dims {:?} ({} voxels)",
                self.dims,
                self.num_voxels()
            )));
        }
        Ok(())
    }
}

/// A 3D scalar volume: intensities on a regular grid with physical geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    geom: Geometry,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(geom: Geometry, data: Vec<f32>) -> Result<Self> {
        geom.check_len(data.len(), "volume data")?;
        Ok(Self { geom, data })
    }

    pub fn constant(geom: Geometry, value: f32) -> Self {
        let n = geom.num_voxels();
        Self { geom, data: vec![value; n] }
    }

    pub fn from_fn(geom: Geometry, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(geom.num_voxels());
        for z in 0..geom.dims[2] {
            for y in 0..geom.dims[1] {
                for x in 0..geom.dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { geom, data }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geom.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.geom.origin
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geom.index(x, y, z)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut min = f32::INFINITY;
        let mut max = f32::NEG_INFINITY;
        for &v in &self.data {
            min = min.min(v);
            max = max.max(v);
        }
        (min, max)
    }

    /// Trilinear interpolation at a physical point; zero outside the domain.
    /// Exact voxel centers reproduce the stored value.
    pub fn sample(&self, p: [f64; 3]) -> f64 {
        let c = self.geom.continuous_index(p);
        trilinear(&self.data, self.geom.dims, c)
    }

    /// Per-voxel spatial gradient in intensity/mm: central differences in the
    /// interior, one-sided at the boundary faces.
    pub fn spatial_gradient(&self) -> Result<VectorVolume> {
        let [nx, ny, nz] = self.geom.dims;
        if nx < 2 || ny < 2 || nz < 2 {
            return Err(Error::Geometry(format!(
                "spatial gradient needs at least 2 voxels per axis, got {:?}",
                self.geom.dims
            )));
        }
        let sp = self.geom.spacing;
        let data = &self.data;
        let geom = &self.geom;
        let diff = |lo: f32, hi: f32, h: f64| ((hi - lo) as f64 / h) as f32;
        let mut out = vec![[0.0f32; 3]; self.data.len()];
        out.par_chunks_mut(nx * ny).enumerate().for_each(|(z, slab)| {
            for y in 0..ny {
                for x in 0..nx {
                    let v = |xx: usize, yy: usize, zz: usize| data[geom.index(xx, yy, zz)];
                    let gx = if x == 0 {
                        diff(v(0, y, z), v(1, y, z), sp[0])
                    } else if x == nx - 1 {
                        diff(v(nx - 2, y, z), v(nx - 1, y, z), sp[0])
                    } else {
                        diff(v(x - 1, y, z), v(x + 1, y, z), 2.0 * sp[0])
                    };
                    let gy = if y == 0 {
                        diff(v(x, 0, z), v(x, 1, z), sp[1])
                    } else if y == ny - 1 {
                        diff(v(x, ny - 2, z), v(x, ny - 1, z), sp[1])
                    } else {
                        diff(v(x, y - 1, z), v(x, y + 1, z), 2.0 * sp[1])
                    };
                    let gz = if z == 0 {
                        diff(v(x, y, 0), v(x, y, 1), sp[2])
                    } else if z == nz - 1 {
                        diff(v(x, y, nz - 2), v(x, y, nz - 1), sp[2])
                    } else {
                        diff(v(x, y, z - 1), v(x, y, z + 1), 2.0 * sp[2])
                    };
                    slab[x + nx * y] = [gx, gy, gz];
                }
            }
        });
        Ok(VectorVolume { geom: self.geom.clone(), data: out })
    }

    /// Affine rescale of intensities so min maps to 0 and max to 1.
    pub fn normalized(&self) -> Result<Volume> {
        let (min, max) = self.min_max();
        if !(max > min) {
            return Err(Error::Degenerate(format!(
                "cannot normalize constant volume (min == max == {min})"
            )));
        }
        let scale = 1.0 / (max - min) as f64;
        let data = self
            .data
            .iter()
            .map(|&v| (((v - min) as f64) * scale) as f32)
            .collect();
        Ok(Volume { geom: self.geom.clone(), data })
    }
}

/// Trilinear interpolation on raw x-fastest data at continuous voxel
/// coordinates, zero-padded outside `[0, n-1]` per axis.
pub(crate) fn trilinear(data: &[f32], dims: [usize; 3], c: [f64; 3]) -> f64 {
    let [nx, ny, nz] = dims;
    let fx = c[0].floor();
    let fy = c[1].floor();
    let fz = c[2].floor();
    let tx = c[0] - fx;
    let ty = c[1] - fy;
    let tz = c[2] - fz;
    let x0 = fx as i64;
    let y0 = fy as i64;
    let z0 = fz as i64;
    // Entirely outside the support of the 8-neighbour stencil.
    if x0 < -1 || y0 < -1 || z0 < -1 || x0 >= nx as i64 || y0 >= ny as i64 || z0 >= nz as i64 {
        return 0.0;
    }
    let fetch = |x: i64, y: i64, z: i64| -> f64 {
        if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
            0.0
        } else {
            data[x as usize + nx * (y as usize + ny * z as usize)] as f64
        }
    };
    let c000 = fetch(x0, y0, z0);
    let c100 = fetch(x0 + 1, y0, z0);
    let c010 = fetch(x0, y0 + 1, z0);
    let c110 = fetch(x0 + 1, y0 + 1, z0);
    let c001 = fetch(x0, y0, z0 + 1);
    let c101 = fetch(x0 + 1, y0, z0 + 1);
    let c011 = fetch(x0, y0 + 1, z0 + 1);
    let c111 = fetch(x0 + 1, y0 + 1, z0 + 1);
    let c00 = c000 * (1.0 - tx) + c100 * tx;
    let c10 = c010 * (1.0 - tx) + c110 * tx;
    let c01 = c001 * (1.0 - tx) + c101 * tx;
    let c11 = c011 * (1.0 - tx) + c111 * tx;
    let c0 = c00 * (1.0 - ty) + c10 * ty;
    let c1 = c01 * (1.0 - ty) + c11 * ty;
    c0 * (1.0 - tz) + c1 * tz
}

/// Per-voxel 3-vectors on a regular grid (e.g. a precomputed image gradient).
#[derive(Debug, Clone, PartialEq)]
pub struct VectorVolume {
    geom: Geometry,
    data: Vec<[f32; 3]>,
}

impl VectorVolume {
    pub fn new(geom: Geometry, data: Vec<[f32; 3]>) -> Result<Self> {
        geom.check_len(data.len(), "vector volume data")?;
        Ok(Self { geom, data })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn data(&self) -> &[[f32; 3]] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> [f32; 3] {
        self.data[self.geom.index(x, y, z)]
    }

    /// Componentwise trilinear interpolation, zero outside the domain.
    pub fn sample(&self, p: [f64; 3]) -> [f64; 3] {
        let c = self.geom.continuous_index(p);
        let [nx, ny, nz] = self.geom.dims;
        let x0 = c[0].floor() as i64;
        let y0 = c[1].floor() as i64;
        let z0 = c[2].floor() as i64;
        if x0 < -1 || y0 < -1 || z0 < -1 || x0 >= nx as i64 || y0 >= ny as i64 || z0 >= nz as i64 {
            return [0.0; 3];
        }
        let tx = c[0] - c[0].floor();
        let ty = c[1] - c[1].floor();
        let tz = c[2] - c[2].floor();
        let mut acc = [0.0f64; 3];
        for dz in 0..2i64 {
            for dy in 0..2i64 {
                for dx in 0..2i64 {
                    let (x, y, z) = (x0 + dx, y0 + dy, z0 + dz);
                    if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64
                    {
                        continue;
                    }
                    let w = (if dx == 1 { tx } else { 1.0 - tx })
                        * (if dy == 1 { ty } else { 1.0 - ty })
                        * (if dz == 1 { tz } else { 1.0 - tz });
                    let v = self.data[x as usize + nx * (y as usize + ny * z as usize)];
                    acc[0] += w * v[0] as f64;
                    acc[1] += w * v[1] as f64;
                    acc[2] += w * v[2] as f64;
                }
            }
        }
        acc
    }
}

/// Per-voxel integer labels; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    geom: Geometry,
    data: Vec<u16>,
}

impl LabelVolume {
    pub fn new(geom: Geometry, data: Vec<u16>) -> Result<Self> {
        geom.check_len(data.len(), "label data")?;
        Ok(Self { geom, data })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.data[self.geom.index(x, y, z)]
    }

    /// Sorted set of labels present in the volume.
    pub fn label_set(&self) -> Vec<u16> {
        let mut labels: Vec<u16> = self.data.iter().copied().collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }
}

/// Resample `moving` onto `fixed_geometry`: output voxel at fixed-grid
/// location `x` holds `moving.sample(T(x))`.
pub fn resample(moving: &Volume, transform: &TransformStack, fixed_geometry: &Geometry) -> Volume {
    let [nx, ny, _] = fixed_geometry.dims;
    let n = fixed_geometry.num_voxels();
    let mut data = vec![0.0f32; n];
    data.par_chunks_mut(nx * ny).enumerate().for_each(|(z, slab)| {
        for y in 0..ny {
            for x in 0..nx {
                let p = fixed_geometry.voxel_center([x, y, z]);
                slab[x + nx * y] = moving.sample(transform.apply(p)) as f32;
            }
        }
    });
    Volume { geom: fixed_geometry.clone(), data }
}

/// Discrete Gaussian kernel with radius `ceil(3 sigma)`, normalized.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= sum;
    }
    kernel
}

/// Separable Gaussian smoothing with sigma in voxels. The kernel is clipped
/// and renormalized at the boundary so constants are preserved.
pub fn gaussian_smooth(vol: &Volume, sigma_voxels: f64) -> Volume {
    if sigma_voxels <= 0.0 {
        return vol.clone();
    }
    let kernel = gaussian_kernel(sigma_voxels);
    let radius = (kernel.len() / 2) as i64;
    let [nx, ny, _nz] = vol.geom.dims;
    let mut cur = vol.data.clone();
    for axis in 0..3 {
        let n_axis = vol.geom.dims[axis] as i64;
        let mut next = vec![0.0f32; cur.len()];
        let stride = match axis {
            0 => 1,
            1 => nx,
            _ => nx * ny,
        } as i64;
        next.par_iter_mut().enumerate().for_each(|(idx, out)| {
            let i = idx as i64;
            let pos = match axis {
                0 => i % nx as i64,
                1 => (i / nx as i64) % ny as i64,
                _ => i / (nx as i64 * ny as i64),
            };
            let mut acc = 0.0f64;
            let mut wsum = 0.0f64;
            for (j, &w) in kernel.iter().enumerate() {
                let off = j as i64 - radius;
                let q = pos + off;
                if q < 0 || q >= n_axis {
                    continue;
                }
                acc += w * cur[(i + off * stride) as usize] as f64;
                wsum += w;
            }
            *out = (acc / wsum) as f32;
        });
        cur = next;
    }
    Volume { geom: vol.geom.clone(), data: cur }
}

/// Gaussian smoothing (`sigma = factor / 2` voxels) followed by subsampling
/// every `factor`-th voxel. Spacing is multiplied by `factor`, the origin is
/// unchanged (voxel 0 is retained).
pub fn downsample(vol: &Volume, factor: usize) -> Result<Volume> {
    if factor == 0 {
        return Err(Error::Config("downsample factor must be >= 1".into()));
    }
    if vol.geom.dims.iter().any(|&d| factor > d) {
        return Err(Error::Config(format!(
            "downsample factor {factor} exceeds dims {:?}",
            vol.geom.dims
        )));
    }
    let smoothed = gaussian_smooth(vol, factor as f64 / 2.0);
    if factor == 1 {
        return Ok(smoothed);
    }
    let [nx, ny, nz] = vol.geom.dims;
    let out_dims = [nx.div_ceil(factor), ny.div_ceil(factor), nz.div_ceil(factor)];
    let geom = Geometry::new(
        out_dims,
        [
            vol.geom.spacing[0] * factor as f64,
            vol.geom.spacing[1] * factor as f64,
            vol.geom.spacing[2] * factor as f64,
        ],
        vol.geom.origin,
    )?;
    let mut data = Vec::with_capacity(geom.num_voxels());
    for z in 0..out_dims[2] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                data.push(smoothed.get(x * factor, y * factor, z * factor));
            }
        }
    }
    Ok(Volume { geom, data })
}

/// Multiresolution pyramid, coarse to fine. The finest level is the input
/// volume itself; level `i` of `scales` is downsampled by `2^(scales-1-i)`.
pub fn pyramid(vol: &Volume, scales: usize) -> Result<Vec<Volume>> {
    if scales == 0 {
        return Err(Error::Config("pyramid needs at least one scale".into()));
    }
    let mut levels = Vec::with_capacity(scales);
    for i in 0..scales {
        let factor = 1usize << (scales - 1 - i);
        if factor == 1 {
            levels.push(vol.clone());
        } else {
            levels.push(downsample(vol, factor)?);
        }
    }
    Ok(levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::{SimilarityParams, TransformStack};
    use rand::Rng;

    fn rng() -> rand_chacha::ChaCha8Rng {
        crate::seeded_rng(42, 0)
    }

    fn random_volume(n: usize, rng: &mut impl Rng) -> Volume {
        let geom = Geometry::isotropic(n, 1.0);
        let data = (0..geom.num_voxels()).map(|_| rng.gen::<f32>()).collect();
        Volume::new(geom, data).unwrap()
    }

    #[test]
    fn trilinear_reproduces_voxel_centers() {
        let mut r = rng();
        let vol = random_volume(5, &mut r);
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..5 {
                    let p = vol.geometry().voxel_center([x, y, z]);
                    assert_eq!(vol.sample(p) as f32, vol.get(x, y, z));
                }
            }
        }
    }

    #[test]
    fn trilinear_midpoint_averages_neighbours() {
        let geom = Geometry::new([2, 1, 1], [1.0, 1.0, 1.0], [0.0; 3]).unwrap();
        let vol = Volume::new(geom, vec![0.2, 0.6]).unwrap();
        let v = vol.sample([0.5, 0.0, 0.0]);
        assert!((v - 0.4).abs() < 1e-7, "midpoint {v}");
    }

    #[test]
    fn trilinear_outside_domain_is_zero() {
        let mut r = rng();
        let vol = random_volume(4, &mut r);
        assert_eq!(vol.sample([-10.0, 1.0, 1.0]), 0.0);
        assert_eq!(vol.sample([1.0, 13.0, 1.0]), 0.0);
        assert_eq!(vol.sample([1.0, 1.0, -10.0]), 0.0);
    }

    #[test]
    fn trilinear_is_linear_in_intensities() {
        // sample(a*I1 + b*I2) == a*sample(I1) + b*sample(I2) at random points
        let mut r = rng();
        let v1 = random_volume(6, &mut r);
        let v2 = random_volume(6, &mut r);
        let (a, b) = (0.7f32, -1.3f32);
        let mixed = Volume::new(
            v1.geometry().clone(),
            v1.data()
                .iter()
                .zip(v2.data())
                .map(|(&p, &q)| a * p + b * q)
                .collect(),
        )
        .unwrap();
        for _ in 0..100 {
            let p = [
                r.gen_range(-1.0..6.0),
                r.gen_range(-1.0..6.0),
                r.gen_range(-1.0..6.0),
            ];
            let lhs = mixed.sample(p);
            let rhs = a as f64 * v1.sample(p) + b as f64 * v2.sample(p);
            assert!((lhs - rhs).abs() < 1e-6, "at {p:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let vol = Volume::constant(Geometry::isotropic(4, 2.0), 3.5);
        let g = vol.spatial_gradient().unwrap();
        assert!(g.data().iter().all(|v| *v == [0.0, 0.0, 0.0]));
    }

    #[test]
    fn gradient_of_linear_ramp_is_unit() {
        // I(x,y,z) = x in mm, spacing 0.5 -> gradient (1,0,0) everywhere
        let geom = Geometry::new([6, 5, 4], [0.5, 1.0, 2.0], [0.0; 3]).unwrap();
        let vol = Volume::from_fn(geom, |x, _, _| 0.5 * x as f32);
        let g = vol.spatial_gradient().unwrap();
        for v in g.data() {
            assert!((v[0] - 1.0).abs() < 1e-6);
            assert_eq!(v[1], 0.0);
            assert_eq!(v[2], 0.0);
        }
    }

    #[test]
    fn gradient_matches_bruteforce_oracle() {
        // independent nested-loop finite-difference oracle on a random 5^3
        let mut r = rng();
        let geom = Geometry::new([5, 5, 5], [0.5, 1.0, 1.5], [0.0; 3]).unwrap();
        let data: Vec<f32> = (0..geom.num_voxels()).map(|_| r.gen()).collect();
        let vol = Volume::new(geom.clone(), data.clone()).unwrap();
        let g = vol.spatial_gradient().unwrap();
        let v = |x: usize, y: usize, z: usize| data[geom.index(x, y, z)] as f64;
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..5 {
                    // oracle written out directly per axis
                    let gx = if x == 0 {
                        (v(1, y, z) - v(0, y, z)) / 0.5
                    } else if x == 4 {
                        (v(4, y, z) - v(3, y, z)) / 0.5
                    } else {
                        (v(x + 1, y, z) - v(x - 1, y, z)) / 1.0
                    };
                    let gy = if y == 0 {
                        v(x, 1, z) - v(x, 0, z)
                    } else if y == 4 {
                        v(x, 4, z) - v(x, 3, z)
                    } else {
                        (v(x, y + 1, z) - v(x, y - 1, z)) / 2.0
                    };
                    let gz = if z == 0 {
                        (v(x, y, 1) - v(x, y, 0)) / 1.5
                    } else if z == 4 {
                        (v(x, y, 4) - v(x, y, 3)) / 1.5
                    } else {
                        (v(x, y, z + 1) - v(x, y, z - 1)) / 3.0
                    };
                    let got = g.get(x, y, z);
                    assert!((got[0] as f64 - gx).abs() < 1e-5);
                    assert!((got[1] as f64 - gy).abs() < 1e-5);
                    assert!((got[2] as f64 - gz).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn gradient_rejects_thin_volumes() {
        let vol = Volume::constant(Geometry::new([1, 4, 4], [1.0; 3], [0.0; 3]).unwrap(), 0.0);
        assert!(vol.spatial_gradient().is_err());
    }

    #[test]
    fn gradient_of_affine_field_constant_in_interior() {
        let geom = Geometry::new([6, 6, 6], [1.0, 0.5, 2.0], [0.0; 3]).unwrap();
        let vol = Volume::from_fn(geom, |x, y, z| {
            1.0 + 2.0 * x as f32 - 0.5 * (0.5 * y as f32) + 0.25 * (2.0 * z as f32)
        });
        let g = vol.spatial_gradient().unwrap();
        for z in 1..5 {
            for y in 1..5 {
                for x in 1..5 {
                    let v = g.get(x, y, z);
                    assert!((v[0] - 2.0).abs() < 1e-5);
                    assert!((v[1] + 0.5).abs() < 1e-5);
                    assert!((v[2] - 0.25).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn resample_identity_is_bitwise_copy() {
        let mut r = rng();
        let vol = random_volume(8, &mut r);
        let out = resample(&vol, &TransformStack::identity(), vol.geometry());
        assert_eq!(out.data(), vol.data());
    }

    #[test]
    fn resample_one_voxel_translation_shifts() {
        let mut r = rng();
        let vol = random_volume(6, &mut r);
        // T(x) = x + spacing along +x: output(x,y,z) = input(x+1,y,z)
        let mut p = SimilarityParams::identity(vol.geometry().center());
        p.translation = [1.0, 0.0, 0.0];
        let stack = TransformStack::identity().with_similarity(p);
        let out = resample(&vol, &stack, vol.geometry());
        for z in 0..6 {
            for y in 0..6 {
                for x in 0..6 {
                    let expect = if x + 1 < 6 { vol.get(x + 1, y, z) } else { 0.0 };
                    let got = out.get(x, y, z);
                    assert!(
                        (got - expect).abs() < 1e-6,
                        "at ({x},{y},{z}): {got} vs {expect}"
                    );
                }
            }
        }
    }

    #[test]
    fn resample_matches_pointwise_oracle() {
        let mut r = rng();
        let vol = random_volume(16, &mut r);
        let p = SimilarityParams {
            translation: [0.7, -1.2, 0.4],
            rotation: [0.1, -0.05, 0.2],
            log_scale: 0.05,
            center: vol.geometry().center(),
        };
        let stack = TransformStack::identity().with_similarity(p.clone());
        let out = resample(&vol, &stack, vol.geometry());
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..16 {
                    let phys = vol.geometry().voxel_center([x, y, z]);
                    let expect = vol.sample(p.apply(phys)) as f32;
                    assert_eq!(out.get(x, y, z), expect);
                }
            }
        }
    }

    #[test]
    fn downsample_factor_one_only_smooths() {
        let mut r = rng();
        let vol = random_volume(6, &mut r);
        let out = downsample(&vol, 1).unwrap();
        assert_eq!(out.dims(), vol.dims());
        assert_eq!(out.spacing(), vol.spacing());
        let reference = gaussian_smooth(&vol, 0.5);
        assert_eq!(out.data(), reference.data());
    }

    #[test]
    fn downsample_constant_preserves_value_and_halves_dims() {
        let vol = Volume::constant(Geometry::new([9, 8, 7], [1.0; 3], [0.0; 3]).unwrap(), 0.42);
        let out = downsample(&vol, 2).unwrap();
        assert_eq!(out.dims(), [5, 4, 4]);
        assert_eq!(out.spacing(), [2.0, 2.0, 2.0]);
        for &v in out.data() {
            assert!((v - 0.42).abs() < 1e-6);
        }
    }

    #[test]
    fn downsample_impulse_matches_direct_convolution_oracle() {
        // direct convolution oracle: Gaussian weights evaluated on the fine
        // grid, subsampled onto the coarse grid. The impulse sits far enough
        // from the boundary that no kernel clipping is involved.
        let n = 13;
        let geom = Geometry::isotropic(n, 1.0);
        let mut data = vec![0.0f32; geom.num_voxels()];
        let c = 6usize; // even index, retained by factor-2 subsampling
        data[geom.index(c, c, c)] = 1.0;
        let vol = Volume::new(geom.clone(), data).unwrap();

        let smoothed = gaussian_smooth(&vol, 1.0);
        let total: f64 = smoothed.data().iter().map(|&v| v as f64).sum();
        assert!((total - 1.0).abs() < 1e-3, "smoothing must preserve mass, got {total}");

        let out = downsample(&vol, 2).unwrap();
        let kernel = gaussian_kernel(1.0);
        let radius = kernel.len() as i64 / 2;
        let g = |d: i64| -> f64 {
            if d.abs() > radius {
                0.0
            } else {
                kernel[(d + radius) as usize]
            }
        };
        for z in 0..out.dims()[2] {
            for y in 0..out.dims()[1] {
                for x in 0..out.dims()[0] {
                    let expect = g(2 * x as i64 - c as i64)
                        * g(2 * y as i64 - c as i64)
                        * g(2 * z as i64 - c as i64);
                    let got = out.get(x, y, z) as f64;
                    assert!(
                        (got - expect).abs() < 1e-6,
                        "coarse ({x},{y},{z}): {got} vs {expect}"
                    );
                }
            }
        }
    }

    #[test]
    fn downsample_rejects_oversized_factor() {
        let vol = Volume::constant(Geometry::isotropic(4, 1.0), 0.0);
        assert!(downsample(&vol, 5).is_err());
    }

    #[test]
    fn normalize_rescales_to_unit_range() {
        let geom = Geometry::new([3, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let vol = Volume::new(geom, vec![2.0, 4.0, 6.0]).unwrap();
        let out = vol.normalized().unwrap();
        assert_eq!(out.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn normalize_is_idempotent_on_unit_range() {
        let mut r = rng();
        let mut vol = random_volume(5, &mut r);
        vol.data_mut()[0] = 0.0;
        vol.data_mut()[1] = 1.0;
        let out = vol.normalized().unwrap();
        for (a, b) in out.data().iter().zip(vol.data()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn normalize_preserves_order_and_hits_bounds() {
        let mut r = rng();
        let vol = random_volume(6, &mut r);
        let out = vol.normalized().unwrap();
        let (min, max) = out.min_max();
        assert_eq!(min, 0.0);
        assert_eq!(max, 1.0);
        // sort-order oracle
        let mut idx: Vec<usize> = (0..vol.data().len()).collect();
        idx.sort_by(|&a, &b| vol.data()[a].partial_cmp(&vol.data()[b]).unwrap());
        for w in idx.windows(2) {
            assert!(out.data()[w[0]] <= out.data()[w[1]]);
        }
    }

    #[test]
    fn normalize_rejects_constant_volume() {
        let vol = Volume::constant(Geometry::isotropic(3, 1.0), 1.0);
        assert!(vol.normalized().is_err());
    }

    #[test]
    fn pyramid_coarse_to_fine() {
        let mut r = rng();
        let vol = random_volume(16, &mut r);
        let levels = pyramid(&vol, 2).unwrap();
        assert_eq!(levels.len(), 2);
        assert_eq!(levels[0].dims(), [8, 8, 8]);
        assert_eq!(levels[1].data(), vol.data());
    }

    #[test]
    fn vector_volume_sample_interpolates() {
        let geom = Geometry::new([2, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let vv = VectorVolume::new(geom, vec![[1.0, 0.0, 2.0], [3.0, 4.0, 0.0]]).unwrap();
        let s = vv.sample([0.25, 0.0, 0.0]);
        assert!((s[0] - 1.5).abs() < 1e-7);
        assert!((s[1] - 1.0).abs() < 1e-7);
        assert!((s[2] - 1.5).abs() < 1e-7);
        assert_eq!(vv.sample([50.0, 0.0, 0.0]), [0.0; 3]);
    }
}
