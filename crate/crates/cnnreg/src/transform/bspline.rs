//! Cubic B-spline free-form deformation on a regular control-point grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Geometry;

/// Uniform cubic B-spline basis values at fractional offset `t` in [0,1],
/// for the four control points at integer offsets {-1, 0, 1, 2}.
pub fn cubic_basis(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        (1.0 - t).powi(3) / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

/// Derivatives of [`cubic_basis`] with respect to `t`.
pub fn cubic_basis_deriv(t: f64) -> [f64; 4] {
    let t2 = t * t;
    [
        -0.5 * (1.0 - t) * (1.0 - t),
        (3.0 * t2 - 4.0 * t) / 2.0,
        (-3.0 * t2 + 2.0 * t + 1.0) / 2.0,
        0.5 * t2,
    ]
}

// Tolerance for points that land on the support boundary up to rounding.
const EDGE_EPS: f64 = 1e-7;

/// Free-form deformation: a displacement field interpolated from control
/// point displacements with cubic tensor-product weights. Points outside the
/// supported region get zero displacement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineGrid {
    /// Control points per axis, each >= 4.
    pub control_dims: [usize; 3],
    /// Control point spacing in mm.
    pub control_spacing: [f64; 3],
    /// Physical position of control point (0,0,0).
    pub control_origin: [f64; 3],
    /// Per-control-point displacement in mm, x-fastest order.
    pub displacements: Vec<[f64; 3]>,
}

/// The 4x4x4 tensor-product support of a point: base control index plus
/// per-axis weights (and optionally their derivatives).
pub struct Support {
    pub base: [usize; 3],
    pub weights: [[f64; 4]; 3],
}

impl BSplineGrid {
    /// All-zero displacement grid.
    pub fn zeros(
        control_dims: [usize; 3],
        control_spacing: [f64; 3],
        control_origin: [f64; 3],
    ) -> Result<Self> {
        if control_dims.iter().any(|&d| d < 4) {
            return Err(Error::Config(format!(
                "cubic B-spline grid needs >= 4 control points per axis, got {control_dims:?}"
            )));
        }
        if control_spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config(format!(
                "non-positive control spacing {control_spacing:?}"
            )));
        }
        let n = control_dims[0] * control_dims[1] * control_dims[2];
        Ok(Self { control_dims, control_spacing, control_origin, displacements: vec![[0.0; 3]; n] })
    }

    /// Zero grid whose supported region covers the voxel-center span of
    /// `geom` exactly, with one control point of margin on each side.
    pub fn covering(geom: &Geometry, control_dims: [usize; 3]) -> Result<Self> {
        let ext = geom.extent();
        let mut spacing = [0.0; 3];
        for a in 0..3 {
            if control_dims[a] < 4 {
                return Err(Error::Config(format!(
                    "cubic B-spline grid needs >= 4 control points per axis, got {control_dims:?}"
                )));
            }
            spacing[a] = ext[a] / (control_dims[a] - 3) as f64;
        }
        let origin = [
            geom.origin[0] - spacing[0],
            geom.origin[1] - spacing[1],
            geom.origin[2] - spacing[2],
        ];
        Self::zeros(control_dims, spacing, origin)
    }

    pub fn num_control_points(&self) -> usize {
        self.control_dims[0] * self.control_dims[1] * self.control_dims[2]
    }

    /// Optimizable parameter count: 3 displacement components per control
    /// point.
    pub fn parameter_count(&self) -> usize {
        3 * self.num_control_points()
    }

    #[inline]
    pub fn control_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.control_dims[0] * (j + self.control_dims[1] * k)
    }

    /// Flat parameter vector: `[dx,dy,dz]` per control point, x-fastest.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.parameter_count());
        for d in &self.displacements {
            v.extend_from_slice(d);
        }
        v
    }

    pub fn set_vector(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.parameter_count());
        for (i, d) in self.displacements.iter_mut().enumerate() {
            *d = [v[3 * i], v[3 * i + 1], v[3 * i + 2]];
        }
    }

    /// Tensor-product support of `x`, or `None` outside the supported region.
    pub fn support(&self, x: [f64; 3]) -> Option<Support> {
        let (base, t) = self.local_coords(x)?;
        Some(Support {
            base,
            weights: [cubic_basis(t[0]), cubic_basis(t[1]), cubic_basis(t[2])],
        })
    }

    /// Base control index and fractional offsets, or `None` outside support.
    fn local_coords(&self, x: [f64; 3]) -> Option<([usize; 3], [f64; 3])> {
        let mut base = [0usize; 3];
        let mut t = [0.0f64; 3];
        for a in 0..3 {
            let n = self.control_dims[a];
            let u = (x[a] - self.control_origin[a]) / self.control_spacing[a];
            if u < 1.0 - EDGE_EPS || u > (n - 2) as f64 + EDGE_EPS {
                return None;
            }
            // clamp so the right domain edge (u == n-2) keeps its window in range
            let fl = u.floor().clamp(1.0, (n - 3) as f64);
            base[a] = fl as usize - 1;
            t[a] = (u - fl).clamp(0.0, 1.0);
        }
        Some((base, t))
    }

    /// Interpolated displacement at `x`; zero outside the supported region.
    pub fn displacement(&self, x: [f64; 3]) -> [f64; 3] {
        let Some(s) = self.support(x) else { return [0.0; 3] };
        let mut acc = [0.0f64; 3];
        for dk in 0..4 {
            for dj in 0..4 {
                let wjk = s.weights[1][dj] * s.weights[2][dk];
                let row = self.control_index(s.base[0], s.base[1] + dj, s.base[2] + dk);
                for di in 0..4 {
                    let w = s.weights[0][di] * wjk;
                    let d = self.displacements[row + di];
                    acc[0] += w * d[0];
                    acc[1] += w * d[1];
                    acc[2] += w * d[2];
                }
            }
        }
        acc
    }

    /// `x` plus the interpolated displacement.
    pub fn apply(&self, x: [f64; 3]) -> [f64; 3] {
        let d = self.displacement(x);
        [x[0] + d[0], x[1] + d[1], x[2] + d[2]]
    }

    /// Spatial Jacobian of the displacement field, `J[i][j] = dD_i/dx_j`;
    /// zero outside the supported region.
    pub fn spatial_jacobian(&self, x: [f64; 3]) -> [[f64; 3]; 3] {
        let mut jac = [[0.0f64; 3]; 3];
        let Some((base, t)) = self.local_coords(x) else { return jac };
        let w = [cubic_basis(t[0]), cubic_basis(t[1]), cubic_basis(t[2])];
        let dw = [
            cubic_basis_deriv(t[0]),
            cubic_basis_deriv(t[1]),
            cubic_basis_deriv(t[2]),
        ];
        for dk in 0..4 {
            for dj in 0..4 {
                let row = self.control_index(base[0], base[1] + dj, base[2] + dk);
                for di in 0..4 {
                    let d = self.displacements[row + di];
                    // derivative of the tensor weight along each axis, chain
                    // ruled through u = (x - origin) / spacing
                    let gx = dw[0][di] * w[1][dj] * w[2][dk] / self.control_spacing[0];
                    let gy = w[0][di] * dw[1][dj] * w[2][dk] / self.control_spacing[1];
                    let gz = w[0][di] * w[1][dj] * dw[2][dk] / self.control_spacing[2];
                    for i in 0..3 {
                        jac[i][0] += gx * d[i];
                        jac[i][1] += gy * d[i];
                        jac[i][2] += gz * d[i];
                    }
                }
            }
        }
        jac
    }

    /// Nonzero parameter-Jacobian entries at `x`: (control linear index,
    /// tensor weight) pairs, at most 64, identical for the three spatial rows
    /// of each control point's parameters. Empty outside the support.
    pub fn jacobian_entries(&self, x: [f64; 3]) -> Vec<(usize, f64)> {
        let Some(s) = self.support(x) else { return Vec::new() };
        let mut entries = Vec::with_capacity(64);
        for dk in 0..4 {
            for dj in 0..4 {
                let wjk = s.weights[1][dj] * s.weights[2][dk];
                let row = self.control_index(s.base[0], s.base[1] + dj, s.base[2] + dk);
                for di in 0..4 {
                    entries.push((row + di, s.weights[0][di] * wjk));
                }
            }
        }
        entries
    }

    /// Subdivide to half the control spacing. The refined grid reproduces
    /// the displacement field exactly over the supported domain and serves
    /// as the warm start for the next registration scale.
    ///
    /// Output dims per axis are `2n - 3`; out-of-range coarse coefficients
    /// are treated as zero.
    pub fn refine(&self) -> BSplineGrid {
        let mut dims = self.control_dims;
        let mut data = self.displacements.clone();
        for axis in 0..3 {
            let n = dims[axis];
            let m = 2 * n - 3;
            let mut new_dims = dims;
            new_dims[axis] = m;
            let mut out = vec![[0.0f64; 3]; new_dims[0] * new_dims[1] * new_dims[2]];
            let idx = |d: &[usize; 3], i: usize, j: usize, k: usize| i + d[0] * (j + d[1] * k);
            let get = |data: &[[f64; 3]], d: &[usize; 3], pos: [i64; 3]| -> [f64; 3] {
                for a in 0..3 {
                    if pos[a] < 0 || pos[a] >= d[a] as i64 {
                        return [0.0; 3];
                    }
                }
                data[idx(d, pos[0] as usize, pos[1] as usize, pos[2] as usize)]
            };
            for k in 0..new_dims[2] {
                for j in 0..new_dims[1] {
                    for i in 0..new_dims[0] {
                        let mut pos = [i as i64, j as i64, k as i64];
                        // refined coefficient j corresponds to subdivided index j+1
                        let s = pos[axis] + 1;
                        let half = s / 2;
                        let val = if s % 2 == 0 {
                            // (d[i-1] + 6 d[i] + d[i+1]) / 8
                            let mut acc = [0.0f64; 3];
                            for (off, w) in [(-1i64, 1.0), (0, 6.0), (1, 1.0)] {
                                pos[axis] = half + off;
                                let d = get(&data, &dims, pos);
                                for c in 0..3 {
                                    acc[c] += w * d[c] / 8.0;
                                }
                            }
                            acc
                        } else {
                            // (d[i] + d[i+1]) / 2
                            let mut acc = [0.0f64; 3];
                            for off in [0i64, 1] {
                                pos[axis] = half + off;
                                let d = get(&data, &dims, pos);
                                for c in 0..3 {
                                    acc[c] += d[c] / 2.0;
                                }
                            }
                            acc
                        };
                        out[idx(&new_dims, i, j, k)] = val;
                    }
                }
            }
            dims = new_dims;
            data = out;
        }
        BSplineGrid {
            control_dims: dims,
            control_spacing: [
                self.control_spacing[0] / 2.0,
                self.control_spacing[1] / 2.0,
                self.control_spacing[2] / 2.0,
            ],
            control_origin: [
                self.control_origin[0] + self.control_spacing[0] / 2.0,
                self.control_origin[1] + self.control_spacing[1] / 2.0,
                self.control_origin[2] + self.control_spacing[2] / 2.0,
            ],
            displacements: data,
        }
    }
}
