//! Independent oracles shared by the integration and acceptance tests.
//! Nothing here calls into the library's own metric or gradient code.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use num_rational::Ratio;
use rand::Rng;
use sfsl_core::embedding::{
    dual_triplet_loss, ntxent_loss, ContrastiveBatch, EmbeddedTriplet, EmbeddingHead, HeadGrads,
};
use sfsl_core::hierarchy::{ConceptTree, LoadOptions};

/// Edge list of a random rooted tree with `n` nodes; node 0 is the root and
/// every parent precedes its children.
pub fn random_edges<R: Rng>(rng: &mut R, n: usize) -> Vec<(String, Option<String>)> {
    (0..n)
        .map(|i| {
            let parent = (i > 0).then(|| format!("v{}", rng.random_range(0..i)));
            (format!("v{i}"), parent)
        })
        .collect()
}

pub fn build_tree(edges: &[(String, Option<String>)]) -> ConceptTree {
    ConceptTree::from_edges(
        edges.iter().map(|(id, p)| (id.clone(), p.clone(), id.clone())),
        LoadOptions {
            strict_layers: false,
        },
    )
    .expect("random tree is valid")
}

/// Plain parent/children maps walked by recursion.
pub struct BruteTree {
    parent: HashMap<String, String>,
    children: HashMap<String, Vec<String>>,
    pub root: String,
}

impl BruteTree {
    pub fn new(edges: &[(String, Option<String>)]) -> Self {
        let mut parent = HashMap::new();
        let mut children: HashMap<String, Vec<String>> = HashMap::new();
        let mut root = String::new();
        for (id, p) in edges {
            match p {
                Some(p) => {
                    parent.insert(id.clone(), p.clone());
                    children.entry(p.clone()).or_default().push(id.clone());
                }
                None => root = id.clone(),
            }
        }
        BruteTree {
            parent,
            children,
            root,
        }
    }

    pub fn leaves(&self) -> Vec<String> {
        let mut all: Vec<String> = self.parent.keys().cloned().collect();
        all.push(self.root.clone());
        let mut out: Vec<String> = all
            .into_iter()
            .filter(|n| !self.children.contains_key(n))
            .collect();
        out.sort();
        out
    }

    /// Longest downward path, by depth-first search.
    pub fn height(&self, n: &str) -> usize {
        self.children
            .get(n)
            .map(|cs| cs.iter().map(|c| 1 + self.height(c)).max().unwrap_or(0))
            .unwrap_or(0)
    }

    pub fn depth(&self, n: &str) -> usize {
        self.ancestors(n).len() - 1
    }

    /// `n` and everything above it.
    pub fn ancestors(&self, n: &str) -> Vec<String> {
        let mut out = vec![n.to_owned()];
        let mut cur = n;
        while let Some(p) = self.parent.get(cur) {
            out.push(p.clone());
            cur = p;
        }
        out
    }

    /// Deepest member of the intersection of both ancestor sets.
    pub fn lcs(&self, a: &str, b: &str) -> String {
        let sa: BTreeSet<String> = self.ancestors(a).into_iter().collect();
        let sb: BTreeSet<String> = self.ancestors(b).into_iter().collect();
        sa.intersection(&sb)
            .max_by_key(|n| self.depth(n))
            .expect("root is shared")
            .clone()
    }

    pub fn distance(&self, a: &str, b: &str) -> Ratio<u32> {
        Ratio::new(self.height(&self.lcs(a, b)) as u32, self.height(&self.root) as u32)
    }

    pub fn similarity(&self, a: &str, b: &str) -> Ratio<u32> {
        Ratio::from_integer(1) - self.distance(a, b)
    }

    /// Odd-one-out by exhaustive comparison: `Some(i)` when removing item
    /// `i` leaves a strictly more similar pair than removing either other.
    pub fn odd_one_out(&self, leaves: [&str; 3]) -> Option<usize> {
        let keep = |i: usize| {
            let rest: Vec<&str> = (0..3).filter(|&j| j != i).map(|j| leaves[j]).collect();
            self.similarity(rest[0], rest[1])
        };
        let s = [keep(0), keep(1), keep(2)];
        (0..3).find(|&i| (0..3).all(|j| j == i || s[i] > s[j]))
    }
}

pub fn edges_from_tree(tree: &ConceptTree) -> Vec<(String, Option<String>)> {
    let mut edges: Vec<(String, Option<String>)> = tree
        .nodes()
        .map(|n| {
            let p = tree.parent(n.as_str()).unwrap().map(|p| p.to_string());
            (n.to_string(), p)
        })
        .collect();
    edges.sort_by_key(|(n, _)| tree.depth(n).unwrap());
    edges
}

pub fn unit_vector<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

/// Random orthogonal matrix from Gram-Schmidt on random rows.
pub fn random_rotation<R: Rng>(rng: &mut R, dim: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        for r in &rows {
            let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            rows.push(v.iter().map(|x| x / n).collect());
        }
    }
    rows
}

pub fn rotate(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// `|a - n| / max(|a|, |n|)`, or the absolute difference when both are
/// below `floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < floor {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Worst relative error over `probes` distinct parameters of `head`, for a
/// loss given as `(loss, d loss / d embedding)` over a list of inputs.
type LossFn<'a> = dyn Fn(&[Vec<f64>]) -> (f64, Vec<Vec<f64>>) + 'a;

fn check_through_head<R: Rng>(
    rng: &mut R,
    head: &EmbeddingHead,
    inputs: &[Vec<f64>],
    loss: &LossFn,
    probes: usize,
) -> f64 {
    let embed_all = |h: &EmbeddingHead| -> Vec<Vec<f64>> {
        inputs.iter().map(|x| h.embed(x).unwrap()).collect()
    };
    let mut grads = HeadGrads::zeros_like(head);
    let (_, dz) = loss(&embed_all(head));
    for (x, g) in inputs.iter().zip(&dz) {
        let cache = head.forward(x).unwrap();
        head.backward(&cache, g, &mut grads);
    }
    let analytic = grads.flatten();

    let base = head.params();
    let picks = rand::seq::index::sample(rng, base.len(), probes.min(base.len()));
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in picks {
        let mut shifted = head.clone();
        let mut p = base.clone();
        p[i] = base[i] + h;
        shifted.set_params(&p).unwrap();
        let up = loss(&embed_all(&shifted)).0;
        p[i] = base[i] - h;
        shifted.set_params(&p).unwrap();
        let down = loss(&embed_all(&shifted)).0;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric, 1e-6));
    }
    worst
}

/// Random inputs far enough from every rectifier kink that a step of
/// `1e-6` in any parameter cannot cross one.
fn safe_inputs<R: Rng>(rng: &mut R, head: &EmbeddingHead, count: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| loop {
            let x: Vec<f64> = (0..head.input_dim())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            if head.min_abs_pre_activation(&x).unwrap() > 1e-3 {
                break x;
            }
        })
        .collect()
}

/// Gradient check of the dual-triplet loss through `head` for one seed.
pub fn triplet_gradient_error<R: Rng>(rng: &mut R, probes: usize) -> f64 {
    let margin = 0.4;
    loop {
        let head = EmbeddingHead::init(6, 7, 5, rng);
        let inputs = safe_inputs(rng, &head, 9);
        let z: Vec<Vec<f64>> = inputs.iter().map(|x| head.embed(x).unwrap()).collect();
        // Keep every hinge away from its boundary.
        let d = |a: usize, b: usize| sfsl_core::embedding::pair_distance(&z[a], &z[b]);
        let clear = (0..3).all(|t| {
            let (n, p1, p2) = (3 * t, 3 * t + 1, 3 * t + 2);
            [d(p1, p2) - d(n, p1) + margin, d(p1, p2) - d(n, p2) + margin]
                .iter()
                .all(|v| v.abs() > 1e-3)
        });
        if !clear {
            continue;
        }
        let loss = move |z: &[Vec<f64>]| -> (f64, Vec<Vec<f64>>) {
            let triplets: Vec<EmbeddedTriplet> = z
                .chunks(3)
                .map(|c| EmbeddedTriplet {
                    negative: &c[0],
                    positive1: &c[1],
                    positive2: &c[2],
                })
                .collect();
            let (l, g) = dual_triplet_loss(&triplets, margin).unwrap();
            let flat = g
                .into_iter()
                .flat_map(|t| [t.negative, t.positive1, t.positive2])
                .collect();
            (l, flat)
        };
        return check_through_head(rng, &head, &inputs, &loss, probes);
    }
}

/// Gradient check of NT-Xent through `head` for one seed.
pub fn ntxent_gradient_error<R: Rng>(rng: &mut R, probes: usize) -> f64 {
    let head = EmbeddingHead::init(6, 7, 5, rng);
    let inputs = safe_inputs(rng, &head, 6);
    let loss = |z: &[Vec<f64>]| -> (f64, Vec<Vec<f64>>) {
        ntxent_loss(&ContrastiveBatch::consecutive_pairs(z.to_vec(), 0.5)).unwrap()
    };
    check_through_head(rng, &head, &inputs, &loss, probes)
}

/// Mean of `vectors`, then the index of the mean nearest to `q` by a full
/// scan; strict comparison keeps the first of equal distances.
pub fn brute_prototype(classes: &[Vec<Vec<f64>>], q: &[f64]) -> usize {
    let mut best = (0usize, f64::INFINITY);
    for (i, members) in classes.iter().enumerate() {
        let dim = q.len();
        let mut mean = vec![0.0; dim];
        for m in members {
            for k in 0..dim {
                mean[k] += m[k];
            }
        }
        for v in &mut mean {
            *v /= members.len() as f64;
        }
        let d = mean
            .iter()
            .zip(q)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}
