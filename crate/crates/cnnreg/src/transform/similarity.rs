//! Similarity transform: rigid motion plus isotropic scale, 7 parameters.

use serde::{Deserialize, Serialize};

pub(crate) type Mat3 = [[f64; 3]; 3];

pub(crate) fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub(crate) fn mat_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(b: f64) -> Mat3 {
    let (s, c) = b.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(g: f64) -> Mat3 {
    let (s, c) = g.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn drot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]]
}

fn drot_y(b: f64) -> Mat3 {
    let (s, c) = b.sin_cos();
    [[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]]
}

fn drot_z(g: f64) -> Mat3 {
    let (s, c) = g.sin_cos();
    [[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]]
}

/// 7-parameter similarity transform
/// `T(x) = center + exp(log_scale) * R(rotation) * (x - center) + translation`.
///
/// Euler angles are applied X, then Y, then Z (`R = Rz * Ry * Rx`). The scale
/// is parameterized by its logarithm so it stays positive without
/// constraints. The rotation center is fixed and not optimized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityParams {
    /// Translation in mm.
    pub translation: [f64; 3],
    /// Euler angles in radians, applied X then Y then Z.
    pub rotation: [f64; 3],
    /// Isotropic scale is `exp(log_scale)`.
    pub log_scale: f64,
    /// Rotation/scale center in mm; not an optimizable parameter.
    pub center: [f64; 3],
}

/// Number of optimizable parameters: 3 translation + 3 rotation + log scale.
pub const SIMILARITY_PARAM_COUNT: usize = 7;

impl SimilarityParams {
    pub fn identity(center: [f64; 3]) -> Self {
        Self { translation: [0.0; 3], rotation: [0.0; 3], log_scale: 0.0, center }
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        let [a, b, g] = self.rotation;
        mat_mul(&rot_z(g), &mat_mul(&rot_y(b), &rot_x(a)))
    }

    /// Parameters as a flat vector ordered (tx,ty,tz, rx,ry,rz, log_scale).
    pub fn to_vector(&self) -> [f64; SIMILARITY_PARAM_COUNT] {
        [
            self.translation[0],
            self.translation[1],
            self.translation[2],
            self.rotation[0],
            self.rotation[1],
            self.rotation[2],
            self.log_scale,
        ]
    }

    /// Rebuild from a flat parameter vector, keeping this center.
    pub fn with_vector(&self, v: &[f64]) -> Self {
        assert_eq!(v.len(), SIMILARITY_PARAM_COUNT);
        Self {
            translation: [v[0], v[1], v[2]],
            rotation: [v[3], v[4], v[5]],
            log_scale: v[6],
            center: self.center,
        }
    }

    pub fn apply(&self, x: [f64; 3]) -> [f64; 3] {
        let s = self.scale();
        let r = self.rotation_matrix();
        let d = [x[0] - self.center[0], x[1] - self.center[1], x[2] - self.center[2]];
        let rd = mat_vec(&r, d);
        [
            self.center[0] + s * rd[0] + self.translation[0],
            self.center[1] + s * rd[1] + self.translation[1],
            self.center[2] + s * rd[2] + self.translation[2],
        ]
    }

    /// 3x7 Jacobian dT/dtheta at `x`, columns ordered as [`Self::to_vector`].
    pub fn jacobian(&self, x: [f64; 3]) -> [[f64; SIMILARITY_PARAM_COUNT]; 3] {
        let s = self.scale();
        let [a, b, g] = self.rotation;
        let (rx, ry, rz) = (rot_x(a), rot_y(b), rot_z(g));
        let d = [x[0] - self.center[0], x[1] - self.center[1], x[2] - self.center[2]];

        let r = mat_mul(&rz, &mat_mul(&ry, &rx));
        let da = mat_mul(&rz, &mat_mul(&ry, &drot_x(a)));
        let db = mat_mul(&rz, &mat_mul(&drot_y(b), &rx));
        let dg = mat_mul(&drot_z(g), &mat_mul(&ry, &rx));

        let col_a = mat_vec(&da, d);
        let col_b = mat_vec(&db, d);
        let col_g = mat_vec(&dg, d);
        // d/d(log_scale) of exp(ls)*R*d is exp(ls)*R*d itself
        let col_s = mat_vec(&r, d);

        let mut j = [[0.0; SIMILARITY_PARAM_COUNT]; 3];
        for row in 0..3 {
            j[row][row] = 1.0;
            j[row][3] = s * col_a[row];
            j[row][4] = s * col_b[row];
            j[row][5] = s * col_g[row];
            j[row][6] = s * col_s[row];
        }
        j
    }
}
