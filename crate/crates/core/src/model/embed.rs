//! Embedding hook: maps raw inputs to the vectors the clustering network consumes.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Embedding declared in a model configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingSpec {
    /// 2D points are fed as-is.
    #[default]
    #[serde(rename = "identity-2d")]
    Identity2d,
    /// Supplied at runtime through an [`Embedder`].
    Custom { input_dim: usize, output_dim: usize },
}

impl EmbeddingSpec {
    pub fn input_dim(self) -> usize {
        match self {
            EmbeddingSpec::Identity2d => 2,
            EmbeddingSpec::Custom { input_dim, .. } => input_dim,
        }
    }

    pub fn output_dim(self) -> usize {
        match self {
            EmbeddingSpec::Identity2d => 2,
            EmbeddingSpec::Custom { output_dim, .. } => output_dim,
        }
    }
}

pub trait Embedder<T: Real> {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn embed_one(&self, x: ArrayView1<T>) -> Array1<T>;
}

#[derive(Debug, Clone, Copy)]
pub struct IdentityEmbedding {
    pub dim: usize,
}

impl<T: Real> Embedder<T> for IdentityEmbedding {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn embed_one(&self, x: ArrayView1<T>) -> Array1<T> {
        x.to_owned()
    }
}

/// Fixed `tanh(x W)` feature map, e.g. a frozen pretrained projection.
#[derive(Debug, Clone)]
pub struct LinearEmbedding<T> {
    pub weights: Array2<T>,
}

impl<T: Real> Embedder<T> for LinearEmbedding<T> {
    fn input_dim(&self) -> usize {
        self.weights.nrows()
    }

    fn output_dim(&self) -> usize {
        self.weights.ncols()
    }

    fn embed_one(&self, x: ArrayView1<T>) -> Array1<T> {
        x.dot(&self.weights).mapv(T::tanh)
    }
}

/// Embeds every row of `raw`.
pub fn embed<T: Real>(embedder: &dyn Embedder<T>, raw: ArrayView2<T>) -> Result<Array2<T>> {
    if raw.nrows() == 0 {
        return Err(Error::Empty("input set"));
    }
    if raw.ncols() != embedder.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: embedder.input_dim(),
            actual: raw.ncols(),
        });
    }
    let mut out = Array2::zeros((raw.nrows(), embedder.output_dim()));
    for (i, row) in raw.rows().into_iter().enumerate() {
        let z = embedder.embed_one(row);
        if z.len() != embedder.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: embedder.output_dim(),
                actual: z.len(),
            });
        }
        out.row_mut(i).assign(&z);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn identity_is_identity() {
        let pts = arr2(&[[0.1, 0.2]]);
        let z = embed(&IdentityEmbedding { dim: 2 }, pts.view()).unwrap();
        assert_eq!(z, pts);
        let many = Array2::<f32>::ones((72, 2));
        assert_eq!(embed(&IdentityEmbedding { dim: 2 }, many.view()).unwrap().dim(), (72, 2));
    }

    #[test]
    fn custom_output_dimension() {
        let e = LinearEmbedding {
            weights: Array2::<f64>::from_elem((5, 8), 0.1),
        };
        let raw = Array2::<f64>::ones((20, 5));
        assert_eq!(embed(&e, raw.view()).unwrap().dim(), (20, 8));
        assert!(matches!(
            embed(&e, Array2::<f64>::ones((20, 4)).view()),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            embed(&e, Array2::<f64>::ones((0, 5)).view()),
            Err(Error::Empty(_))
        ));
    }
}
