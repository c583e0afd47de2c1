//! Stand-in thumbnails: each sample drawn as a dot at its position on the
//! first two principal components of the feature store.

use sfsl_core::data::FeatureStore;

/// Projection onto the top two principal axes of a store's features.
#[derive(Debug, Clone)]
pub struct Projection {
    mean: Vec<f64>,
    axes: [Vec<f64>; 2],
    /// Largest absolute coordinate over the store, per axis.
    extent: [f64; 2],
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> bool {
    let n = dot(v, v).sqrt();
    if n == 0.0 || !n.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

/// Leading eigenvector of the centred covariance, orthogonal to `avoid`,
/// by power iteration from a fixed start.
fn power_axis(rows: &[Vec<f64>], avoid: Option<&[f64]>, dim: usize) -> Vec<f64> {
    let deflate = |v: &mut Vec<f64>| {
        if let Some(a) = avoid {
            let d = dot(v, a);
            v.iter_mut().zip(a).for_each(|(x, y)| *x -= d * y);
        }
    };
    let mut v: Vec<f64> = (0..dim).map(|i| 1.0 + (i as f64 * 0.618).fract()).collect();
    deflate(&mut v);
    if !normalize(&mut v) {
        v = vec![0.0; dim];
        return v;
    }
    for _ in 0..300 {
        let mut next = vec![0.0; dim];
        for r in rows {
            let p = dot(r, &v);
            next.iter_mut().zip(r).for_each(|(n, x)| *n += p * x);
        }
        deflate(&mut next);
        if !normalize(&mut next) {
            break;
        }
        v = next;
    }
    // Fix the sign so the largest component is positive.
    let big = v
        .iter()
        .copied()
        .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
    if big < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

impl Projection {
    pub fn fit(store: &FeatureStore) -> Self {
        let dim = store.dim();
        let n = store.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for s in store.samples() {
            mean.iter_mut().zip(&s.features).for_each(|(m, x)| *m += x / n);
        }
        let rows: Vec<Vec<f64>> = store
            .samples()
            .iter()
            .map(|s| s.features.iter().zip(&mean).map(|(x, m)| x - m).collect())
            .collect();
        let first = power_axis(&rows, None, dim);
        let second = power_axis(&rows, Some(&first), dim);
        let mut p = Projection {
            mean,
            axes: [first, second],
            extent: [0.0; 2],
        };
        for s in store.samples() {
            let c = p.coords(&s.features);
            for (e, v) in p.extent.iter_mut().zip(c) {
                *e = e.max(v.abs());
            }
        }
        p
    }

    pub fn coords(&self, features: &[f64]) -> [f64; 2] {
        let centred: Vec<f64> = features.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        [dot(&centred, &self.axes[0]), dot(&centred, &self.axes[1])]
    }

    /// A 96x96 SVG with the sample's dot on the principal plane.
    pub fn glyph(&self, features: &[f64]) -> String {
        let c = self.coords(features);
        let scale = |k: usize| if self.extent[k] > 0.0 { c[k] / self.extent[k] } else { 0.0 };
        let (x, y) = (48.0 + 40.0 * scale(0), 48.0 - 40.0 * scale(1));
        let hue = (c[1].atan2(c[0]).to_degrees() + 360.0) % 360.0;
        format!(
            concat!(
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"96\" height=\"96\" viewBox=\"0 0 96 96\">",
                "<rect width=\"96\" height=\"96\" fill=\"#fafafa\" stroke=\"#ccc\"/>",
                "<line x1=\"8\" y1=\"48\" x2=\"88\" y2=\"48\" stroke=\"#ddd\"/>",
                "<line x1=\"48\" y1=\"8\" x2=\"48\" y2=\"88\" stroke=\"#ddd\"/>",
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"7\" fill=\"hsl({:.0},70%,45%)\"/>",
                "</svg>"
            ),
            x, y, hue
        )
    }
}
