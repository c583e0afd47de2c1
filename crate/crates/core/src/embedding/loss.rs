//! Dual-triplet and NT-Xent losses with their exact gradients.

use super::{normalize, EmbeddingError};

/// Euclidean distance; for unit vectors this is `sqrt(2 - 2 cos)`.
pub fn pair_distance(u: &[f64], v: &[f64]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Embeddings of one answered test: the picked negative and the two
/// unpicked positives.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddedTriplet<'a> {
    pub negative: &'a [f64],
    pub positive1: &'a [f64],
    pub positive2: &'a [f64],
}

/// Gradient of the loss with respect to each embedding of a triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletGrad {
    pub negative: Vec<f64>,
    pub positive1: Vec<f64>,
    pub positive2: Vec<f64>,
}

/// Adds `scale * d|u - v|/du` to `out`; zero at coincident points.
fn add_distance_grad(out: &mut [f64], u: &[f64], v: &[f64], dist: f64, scale: f64) {
    if dist > 0.0 {
        let s = scale / dist;
        for ((o, a), b) in out.iter_mut().zip(u).zip(v) {
            *o += s * (a - b);
        }
    }
}

/// Loss of a single triplet and its gradient.
///
/// `[d(p1,p2) - d(n,p1) + m]_+ + [d(p1,p2) - d(n,p2) + m]_+`
pub fn triplet_loss(t: EmbeddedTriplet<'_>, margin: f64) -> (f64, TripletGrad) {
    let dim = t.negative.len();
    let d12 = pair_distance(t.positive1, t.positive2);
    let dn1 = pair_distance(t.negative, t.positive1);
    let dn2 = pair_distance(t.negative, t.positive2);
    let mut grad = TripletGrad {
        negative: vec![0.0; dim],
        positive1: vec![0.0; dim],
        positive2: vec![0.0; dim],
    };
    let mut loss = 0.0;

    let h1 = d12 - dn1 + margin;
    if h1 > 0.0 {
        loss += h1;
        add_distance_grad(&mut grad.positive1, t.positive1, t.positive2, d12, 1.0);
        add_distance_grad(&mut grad.positive2, t.positive2, t.positive1, d12, 1.0);
        add_distance_grad(&mut grad.negative, t.negative, t.positive1, dn1, -1.0);
        add_distance_grad(&mut grad.positive1, t.positive1, t.negative, dn1, -1.0);
    }
    let h2 = d12 - dn2 + margin;
    if h2 > 0.0 {
        loss += h2;
        add_distance_grad(&mut grad.positive1, t.positive1, t.positive2, d12, 1.0);
        add_distance_grad(&mut grad.positive2, t.positive2, t.positive1, d12, 1.0);
        add_distance_grad(&mut grad.negative, t.negative, t.positive2, dn2, -1.0);
        add_distance_grad(&mut grad.positive2, t.positive2, t.negative, dn2, -1.0);
    }
    (loss, grad)
}

/// Summed dual-triplet loss over a batch, with per-embedding gradients.
pub fn dual_triplet_loss(
    batch: &[EmbeddedTriplet<'_>],
    margin: f64,
) -> Result<(f64, Vec<TripletGrad>), EmbeddingError> {
    if !(margin.is_finite() && margin > 0.0) {
        return Err(EmbeddingError::InvalidConfig("margin must be positive".into()));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(batch.len());
    for t in batch {
        let dim = t.negative.len();
        if t.positive1.len() != dim || t.positive2.len() != dim {
            return Err(EmbeddingError::DimMismatch {
                expected: dim,
                found: t.positive1.len().max(t.positive2.len()),
            });
        }
        if [t.negative, t.positive1, t.positive2]
            .iter()
            .any(|v| v.iter().any(|x| !x.is_finite()))
        {
            return Err(EmbeddingError::NonFinite);
        }
        let (loss, grad) = triplet_loss(*t, margin);
        total += loss;
        grads.push(grad);
    }
    Ok((total, grads))
}

/// `2N` vectors in which `partner[i]` is the positive view of `i`.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub vectors: Vec<Vec<f64>>,
    pub partner: Vec<usize>,
    pub temperature: f64,
}

impl ContrastiveBatch {
    /// Pairs consecutive vectors: `(0,1), (2,3), ...`.
    pub fn consecutive_pairs(vectors: Vec<Vec<f64>>, temperature: f64) -> Self {
        let partner = (0..vectors.len()).map(|i| i ^ 1).collect();
        ContrastiveBatch {
            vectors,
            partner,
            temperature,
        }
    }

    fn validate(&self) -> Result<(), EmbeddingError> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(EmbeddingError::InvalidConfig(
                "temperature must be positive".into(),
            ));
        }
        let n = self.vectors.len();
        if n < 2 || !n.is_multiple_of(2) || self.partner.len() != n {
            return Err(EmbeddingError::InvalidBatch(format!(
                "need an even number (>= 2) of vectors with one partner each, got {n}"
            )));
        }
        for (i, &j) in self.partner.iter().enumerate() {
            if j >= n || j == i || self.partner[j] != i {
                return Err(EmbeddingError::InvalidBatch(format!(
                    "partner map is not a fixed-point-free involution at {i}"
                )));
            }
        }
        let dim = self.vectors[0].len();
        if let Some(v) = self.vectors.iter().find(|v| v.len() != dim) {
            return Err(EmbeddingError::DimMismatch {
                expected: dim,
                found: v.len(),
            });
        }
        if self.vectors.iter().flatten().any(|x| !x.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        Ok(())
    }
}

/// NT-Xent loss summed over all `2N` anchors, with the gradient with
/// respect to each input vector (before its L2 normalization).
pub fn ntxent_loss(batch: &ContrastiveBatch) -> Result<(f64, Vec<Vec<f64>>), EmbeddingError> {
    batch.validate()?;
    let tau = batch.temperature;
    let n = batch.vectors.len();
    let dim = batch.vectors[0].len();

    let mut units = Vec::with_capacity(n);
    let mut norms = Vec::with_capacity(n);
    for v in &batch.vectors {
        let (u, norm) = normalize(ndarray::Array1::from(v.clone()))?;
        units.push(u.to_vec());
        norms.push(norm);
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let logits: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|a| dot(&units[i], &units[a]) / tau).collect())
        .collect();

    let mut loss = 0.0;
    let mut grad_units = vec![vec![0.0; dim]; n];
    for i in 0..n {
        let j = batch.partner[i];
        let max = (0..n)
            .filter(|&a| a != i)
            .map(|a| logits[i][a])
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n)
            .filter(|&a| a != i)
            .map(|a| (logits[i][a] - max).exp())
            .sum();
        loss += max + denom.ln() - logits[i][j];

        // dL_i/ds_ia = p_ia - [a == j], and ds_ia/du_i = u_a / tau.
        for a in (0..n).filter(|&a| a != i) {
            let p = (logits[i][a] - max).exp() / denom;
            let coef = (p - if a == j { 1.0 } else { 0.0 }) / tau;
            for k in 0..dim {
                grad_units[i][k] += coef * units[a][k];
                grad_units[a][k] += coef * units[i][k];
            }
        }
    }

    let grads = (0..n)
        .map(|i| {
            let u = &units[i];
            let g = &grad_units[i];
            let radial = dot(u, g);
            (0..dim).map(|k| (g[k] - u[k] * radial) / norms[i]).collect()
        })
        .collect();
    Ok((loss, grads))
}
