//! Parametric spatial transforms and their composition.
//!
//! A [`TransformStack`] holds at most one similarity stage and one B-spline
//! stage. The similarity maps first; the B-spline displacement is evaluated
//! at the similarity-mapped point and added, so the deformable stage refines
//! the global alignment. Stages are optimized sequentially, never jointly.

mod bspline;
mod similarity;

pub use bspline::{cubic_basis, cubic_basis_deriv, BSplineGrid, Support};
pub use similarity::{SimilarityParams, SIMILARITY_PARAM_COUNT};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which stage of a [`TransformStack`] is being optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageKind {
    Similarity,
    BSpline,
}

impl std::fmt::Display for StageKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StageKind::Similarity => write!(f, "similarity"),
            StageKind::BSpline => write!(f, "bspline"),
        }
    }
}

/// Jacobian of the stack output with respect to the active stage parameters.
pub enum StackJacobian {
    /// Dense 3x7 matrix, columns ordered (tx,ty,tz, rx,ry,rz, log_scale).
    Similarity([[f64; SIMILARITY_PARAM_COUNT]; 3]),
    /// Sparse tensor-product weights: (control linear index, weight) pairs.
    /// The weight is identical for the three displacement components of the
    /// control point; empty outside the grid support.
    BSpline(Vec<(usize, f64)>),
}

impl StackJacobian {
    /// Accumulate `row^T * J` into `out`, scaled: the chain-rule update
    /// `out[k] += scale * sum_i row[i] * J[i][k]`.
    pub fn accumulate(&self, row: [f64; 3], scale: f64, out: &mut [f64]) {
        match self {
            StackJacobian::Similarity(j) => {
                for k in 0..SIMILARITY_PARAM_COUNT {
                    out[k] += scale * (row[0] * j[0][k] + row[1] * j[1][k] + row[2] * j[2][k]);
                }
            }
            StackJacobian::BSpline(entries) => {
                for &(ctrl, w) in entries {
                    let sw = scale * w;
                    out[3 * ctrl] += sw * row[0];
                    out[3 * ctrl + 1] += sw * row[1];
                    out[3 * ctrl + 2] += sw * row[2];
                }
            }
        }
    }
}

/// Composition of an optional similarity stage and an optional B-spline
/// stage, applied in that order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TransformStack {
    pub similarity: Option<SimilarityParams>,
    pub bspline: Option<BSplineGrid>,
}

impl TransformStack {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn with_similarity(mut self, p: SimilarityParams) -> Self {
        self.similarity = Some(p);
        self
    }

    pub fn with_bspline(mut self, g: BSplineGrid) -> Self {
        self.bspline = Some(g);
        self
    }

    /// `T(x)`: similarity first, then B-spline displacement at the mapped
    /// point.
    pub fn apply(&self, x: [f64; 3]) -> [f64; 3] {
        let y = match &self.similarity {
            Some(p) => p.apply(x),
            None => x,
        };
        match &self.bspline {
            Some(g) => g.apply(y),
            None => y,
        }
    }

    pub fn has_stage(&self, kind: StageKind) -> bool {
        match kind {
            StageKind::Similarity => self.similarity.is_some(),
            StageKind::BSpline => self.bspline.is_some(),
        }
    }

    fn missing_stage(kind: StageKind) -> Error {
        Error::Config(format!("transform stack has no {kind} stage"))
    }

    /// Number of optimizable parameters of the given stage.
    pub fn parameter_count(&self, kind: StageKind) -> Result<usize> {
        match kind {
            StageKind::Similarity => self
                .similarity
                .as_ref()
                .map(|_| SIMILARITY_PARAM_COUNT)
                .ok_or_else(|| Self::missing_stage(kind)),
            StageKind::BSpline => self
                .bspline
                .as_ref()
                .map(|g| g.parameter_count())
                .ok_or_else(|| Self::missing_stage(kind)),
        }
    }

    /// Flat parameter vector of the given stage.
    pub fn parameters(&self, kind: StageKind) -> Result<Vec<f64>> {
        match kind {
            StageKind::Similarity => self
                .similarity
                .as_ref()
                .map(|p| p.to_vector().to_vec())
                .ok_or_else(|| Self::missing_stage(kind)),
            StageKind::BSpline => self
                .bspline
                .as_ref()
                .map(|g| g.to_vector())
                .ok_or_else(|| Self::missing_stage(kind)),
        }
    }

    /// Overwrite the given stage's parameters from a flat vector.
    pub fn set_parameters(&mut self, kind: StageKind, v: &[f64]) -> Result<()> {
        match kind {
            StageKind::Similarity => {
                let p = self.similarity.as_mut().ok_or_else(|| Self::missing_stage(kind))?;
                *p = p.with_vector(v);
            }
            StageKind::BSpline => {
                let g = self.bspline.as_mut().ok_or_else(|| Self::missing_stage(kind))?;
                g.set_vector(v);
            }
        }
        Ok(())
    }

    /// Jacobian of `T(x)` with respect to the active stage's parameters,
    /// treating the other stage as a fixed map.
    ///
    /// With the B-spline present and the similarity active, the displacement
    /// field moves with the similarity output, so the chain rule contributes
    /// `(I + dD/dy) * J_sim`.
    pub fn jacobian(&self, x: [f64; 3], active: StageKind) -> Result<StackJacobian> {
        match active {
            StageKind::Similarity => {
                let p = self.similarity.as_ref().ok_or_else(|| Self::missing_stage(active))?;
                let js = p.jacobian(x);
                match &self.bspline {
                    None => Ok(StackJacobian::Similarity(js)),
                    Some(g) => {
                        let y = p.apply(x);
                        let dd = g.spatial_jacobian(y);
                        let mut out = [[0.0; SIMILARITY_PARAM_COUNT]; 3];
                        for i in 0..3 {
                            for k in 0..SIMILARITY_PARAM_COUNT {
                                let mut acc = js[i][k];
                                for m in 0..3 {
                                    acc += dd[i][m] * js[m][k];
                                }
                                out[i][k] = acc;
                            }
                        }
                        Ok(StackJacobian::Similarity(out))
                    }
                }
            }
            StageKind::BSpline => {
                let g = self.bspline.as_ref().ok_or_else(|| Self::missing_stage(active))?;
                let y = match &self.similarity {
                    Some(p) => p.apply(x),
                    None => x,
                };
                Ok(StackJacobian::BSpline(g.jacobian_entries(y)))
            }
        }
    }
}
