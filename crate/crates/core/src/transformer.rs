//! Single-layer linear attention: the full `2d × 2d` form used for validation
//! and the reduced `(P, Q)` form that is trained.

use serde::{Deserialize, Serialize};

use crate::error::{IclError, Result};
use crate::numerics::{from_row_major, spectral_norm, to_row_major, Mat, Vector};
use crate::tasks::{EmbeddingMatrix, Prompt};

/// Reduced parameters with operator-norm budget `M`.
#[derive(Clone, Debug, PartialEq)]
pub struct Theta {
    pub p: Mat,
    pub q: Mat,
    pub budget: f64,
}

#[derive(Serialize, Deserialize)]
struct ThetaJson {
    d: usize,
    #[serde(rename = "M")]
    budget: f64,
    #[serde(rename = "P")]
    p: Vec<f64>,
    #[serde(rename = "Q")]
    q: Vec<f64>,
}

impl Theta {
    pub fn new(p: Mat, q: Mat, budget: f64) -> Result<Self> {
        let d = p.nrows();
        if p.ncols() != d || q.nrows() != d || q.ncols() != d || d == 0 {
            return Err(IclError::DimensionMismatch("P and Q must be square and equal".into()));
        }
        if !(budget > 0.0) {
            return Err(IclError::InvalidArgument("budget must be positive".into()));
        }
        Ok(Self { p, q, budget })
    }

    pub fn zeros(d: usize, budget: f64) -> Self {
        Self::new(Mat::zeros(d, d), Mat::zeros(d, d), budget).expect("valid shapes")
    }

    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    /// `max(‖P‖_op, ‖Q‖_op)`.
    pub fn norm(&self) -> f64 {
        spectral_norm(&self.p).max(spectral_norm(&self.q))
    }

    /// `(cP, Q/c)`, which leaves every prediction unchanged.
    pub fn rescaled(&self, c: f64) -> Theta {
        Theta {
            p: &self.p * c,
            q: &self.q / c,
            budget: self.budget,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ThetaJson {
            d: self.dim(),
            budget: self.budget,
            p: to_row_major(&self.p),
            q: to_row_major(&self.q),
        })
        .expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: ThetaJson = serde_json::from_str(text).map_err(|e| IclError::InvalidArgument(e.to_string()))?;
        let p = from_row_major(raw.d, raw.d, &raw.p)?;
        let q = from_row_major(raw.d, raw.d, &raw.q)?;
        Theta::new(p, q, raw.budget)
    }

    /// Embed as the full parameters `Pfull = [[0,0],[0,P]]`, `Qfull = [[Q,0],[0,0]]`.
    pub fn to_full(&self) -> FullTheta {
        let d = self.dim();
        let mut p = Mat::zeros(2 * d, 2 * d);
        let mut q = Mat::zeros(2 * d, 2 * d);
        p.view_mut((d, d), (d, d)).copy_from(&self.p);
        q.view_mut((0, 0), (d, d)).copy_from(&self.q);
        FullTheta { p, q }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FullTheta {
    pub p: Mat,
    pub q: Mat,
}

/// `Z + P Z (Zᵀ Q Z) / (T − 1)`.
pub fn forward_full(theta: &FullTheta, z: &EmbeddingMatrix) -> Result<Mat> {
    let z = z.z();
    let t = z.ncols();
    if t < 2 {
        return Err(IclError::NormalizationUndefined);
    }
    if theta.p.nrows() != z.nrows() || theta.q.nrows() != z.nrows() {
        return Err(IclError::DimensionMismatch("parameter and embedding sizes".into()));
    }
    let attn = z.transpose() * &theta.q * z;
    Ok(z + &theta.p * z * attn / (t - 1) as f64)
}

/// `P C Q x` for a precomputed label covariance `C`.
pub fn predict_from_covariance(theta: &Theta, c: &Mat, query: &Vector) -> Vector {
    &theta.p * (c * (&theta.q * query))
}

/// `P · (1/n) Σ yᵢxᵢᵀ · Q · x_{n+1}`.
pub fn predict(theta: &Theta, prompt: &Prompt) -> Vector {
    predict_from_covariance(theta, &prompt.label_covariance(), prompt.query())
}

/// Rescale `P` and `Q` independently onto the ball `‖·‖_op ≤ M`.
pub fn project_to_budget(theta: &Theta) -> Theta {
    let shrink = |m: &Mat| {
        let norm = spectral_norm(m);
        if norm > theta.budget {
            m * (theta.budget / norm)
        } else {
            m.clone()
        }
    };
    Theta {
        p: shrink(&theta.p),
        q: shrink(&theta.q),
        budget: theta.budget,
    }
}
