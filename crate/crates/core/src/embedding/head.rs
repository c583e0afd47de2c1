use ndarray::{Array1, Array2, ArrayView1, Zip};
use rand::Rng;

use super::{normalize, EmbeddingError};

/// Two-layer rectifier MLP followed by L2 normalization.
///
/// `x -> W1 x + b1 -> relu -> W2 h + b2 -> y / |y|`
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingHead {
    pub(crate) w1: Array2<f64>,
    pub(crate) b1: Array1<f64>,
    pub(crate) w2: Array2<f64>,
    pub(crate) b2: Array1<f64>,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array1<f64>,
    pre_activation: Array1<f64>,
    hidden: Array1<f64>,
    norm: f64,
    pub embedding: Array1<f64>,
}

/// Parameter gradients, same shapes as the head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl HeadGrads {
    pub fn zeros_like(head: &EmbeddingHead) -> Self {
        HeadGrads {
            w1: Array2::zeros(head.w1.raw_dim()),
            b1: Array1::zeros(head.b1.raw_dim()),
            w2: Array2::zeros(head.w2.raw_dim()),
            b2: Array1::zeros(head.b2.raw_dim()),
        }
    }

    pub fn fill_zero(&mut self) {
        self.w1.fill(0.0);
        self.b1.fill(0.0);
        self.w2.fill(0.0);
        self.b2.fill(0.0);
    }

    /// Flattened in the same order as [`EmbeddingHead::params`].
    pub fn flatten(&self) -> Vec<f64> {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .copied()
            .collect()
    }
}

impl EmbeddingHead {
    /// Uniform initialization in `±1/sqrt(fan_in)`, biases included.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let mut layer = |rows: usize, cols: usize| {
            let bound = 1.0 / (cols as f64).sqrt();
            let w = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound));
            let b = Array1::from_shape_fn(rows, |_| rng.random_range(-bound..bound));
            (w, b)
        };
        let (w1, b1) = layer(hidden, input);
        let (w2, b2) = layer(output, hidden);
        EmbeddingHead { w1, b1, w2, b2 }
    }

    /// Identity weights and zero biases; maps non-negative unit inputs to
    /// themselves.
    pub fn identity(dim: usize) -> Self {
        EmbeddingHead {
            w1: Array2::eye(dim),
            b1: Array1::zeros(dim),
            w2: Array2::eye(dim),
            b2: Array1::zeros(dim),
        }
    }

    pub fn from_parts(
        w1: Array2<f64>,
        b1: Array1<f64>,
        w2: Array2<f64>,
        b2: Array1<f64>,
    ) -> Result<Self, EmbeddingError> {
        let (h, _) = w1.dim();
        let (o, h2) = w2.dim();
        if b1.len() != h || h2 != h || b2.len() != o {
            return Err(EmbeddingError::Shape(format!(
                "w1 {:?}, b1 {}, w2 {:?}, b2 {}",
                w1.dim(),
                b1.len(),
                w2.dim(),
                b2.len()
            )));
        }
        let head = EmbeddingHead { w1, b1, w2, b2 };
        if head.params().iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        Ok(head)
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// All parameters as `w1 (row-major), b1, w2 (row-major), b2`.
    pub fn params(&self) -> Vec<f64> {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .copied()
            .collect()
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<(), EmbeddingError> {
        if values.len() != self.param_count() {
            return Err(EmbeddingError::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                values.len()
            )));
        }
        let mut it = values.iter().copied();
        for slot in self
            .w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
        {
            *slot = it.next().expect("length checked");
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardCache, EmbeddingError> {
        if x.len() != self.input_dim() {
            return Err(EmbeddingError::DimMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        let input = ArrayView1::from(x).to_owned();
        let pre_activation = self.w1.dot(&input) + &self.b1;
        let hidden = pre_activation.mapv(|a| a.max(0.0));
        let raw = self.w2.dot(&hidden) + &self.b2;
        let (embedding, norm) = normalize(raw)?;
        Ok(ForwardCache {
            input,
            pre_activation,
            hidden,
            norm,
            embedding,
        })
    }

    /// Unit-norm embedding of `x`.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>, EmbeddingError> {
        Ok(self.forward(x)?.embedding.to_vec())
    }

    /// Accumulates into `grads` the parameter gradient of a scalar whose
    /// gradient with respect to the embedding is `grad_embedding`.
    pub fn backward(&self, cache: &ForwardCache, grad_embedding: &[f64], grads: &mut HeadGrads) {
        let g = ArrayView1::from(grad_embedding);
        let z = &cache.embedding;
        // d(y/|y|)/dy = (I - z z^T) / |y|
        let radial = z.dot(&g);
        let grad_raw = (&g - &(z * radial)) / cache.norm;

        Zip::from(grads.w2.rows_mut())
            .and(&grad_raw)
            .for_each(|mut row, &gy| row.scaled_add(gy, &cache.hidden));
        grads.b2 += &grad_raw;

        let mut grad_pre = self.w2.t().dot(&grad_raw);
        Zip::from(&mut grad_pre)
            .and(&cache.pre_activation)
            .for_each(|g, &a| {
                if a <= 0.0 {
                    *g = 0.0;
                }
            });

        Zip::from(grads.w1.rows_mut())
            .and(&grad_pre)
            .for_each(|mut row, &ga| row.scaled_add(ga, &cache.input));
        grads.b1 += &grad_pre;
    }

    /// Smallest absolute hidden pre-activation for `x`; gradient checks use it
    /// to stay away from the rectifier kink.
    pub fn min_abs_pre_activation(&self, x: &[f64]) -> Result<f64, EmbeddingError> {
        let cache = self.forward(x)?;
        Ok(cache
            .pre_activation
            .iter()
            .fold(f64::INFINITY, |m, a| m.min(a.abs())))
    }
}
