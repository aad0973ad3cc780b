//! Skeleton graph with hop-distance partitions and the graph convolution
//! that aggregates joint features over it.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor, Var};

/// OpenPose / COCO-18 limb list.
pub const COCO18_EDGES: [(usize, usize); 17] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 4),
    (1, 5),
    (5, 6),
    (6, 7),
    (1, 8),
    (8, 9),
    (9, 10),
    (1, 11),
    (11, 12),
    (12, 13),
    (0, 14),
    (14, 15),
    (0, 16),
    (16, 17),
];

/// Serialized graph definition: `{"joints": V, "edges": [[i, j], ...]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub joints: usize,
    pub edges: Vec<[usize; 2]>,
}

impl Default for GraphSpec {
    fn default() -> Self {
        Self {
            joints: 18,
            edges: COCO18_EDGES.iter().map(|&(a, b)| [a, b]).collect(),
        }
    }
}

/// Joint layout plus the two distance partitions: hop 0 (self loops) and
/// hop 1 (neighbours), each symmetrically degree-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonGraph {
    joints: usize,
    edges: Vec<(usize, usize)>,
    partitions: Vec<Tensor>,
}

impl SkeletonGraph {
    pub fn new(joints: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if joints == 0 {
            return Err(Error::Graph("a skeleton needs at least one joint".into()));
        }
        let mut seen = BTreeSet::new();
        for &(a, b) in edges {
            if a >= joints || b >= joints {
                return Err(Error::Graph(format!(
                    "edge ({a}, {b}) references a joint outside 0..{joints}"
                )));
            }
            if a == b {
                return Err(Error::Graph(format!("self-loop on joint {a}")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::Graph(format!("duplicate edge ({a}, {b})")));
            }
        }
        if !is_connected(joints, edges) {
            return Err(Error::Graph("skeleton graph is disconnected".into()));
        }

        let mut adjacency = Tensor::zeros(&[joints, joints]);
        for &(a, b) in edges {
            adjacency.set(&[a, b], 1.0);
            adjacency.set(&[b, a], 1.0);
        }
        let partitions = vec![normalize(&Tensor::eye(joints)), normalize(&adjacency)];
        Ok(Self {
            joints,
            edges: edges.to_vec(),
            partitions,
        })
    }

    pub fn coco18() -> Self {
        Self::new(18, &COCO18_EDGES).expect("the COCO-18 layout is valid")
    }

    pub fn from_spec(spec: &GraphSpec) -> Result<Self> {
        let edges: Vec<(usize, usize)> = spec.edges.iter().map(|&[a, b]| (a, b)).collect();
        Self::new(spec.joints, &edges)
    }

    pub fn spec(&self) -> GraphSpec {
        GraphSpec {
            joints: self.joints,
            edges: self.edges.iter().map(|&(a, b)| [a, b]).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_spec(&serde_json::from_str(&text)?)
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn partition_count(&self) -> usize {
        self.partitions.len()
    }

    /// Normalized adjacency `N_k` of partition `k`.
    pub fn partition(&self, k: usize) -> &Tensor {
        &self.partitions[k]
    }

    /// Same skeleton with joint `i` relabeled as `perm[i]`.
    pub fn relabeled(&self, perm: &[usize]) -> Result<Self> {
        let edges: Vec<_> = self
            .edges
            .iter()
            .map(|&(a, b)| (perm[a], perm[b]))
            .collect();
        Self::new(self.joints, &edges)
    }
}

fn is_connected(joints: usize, edges: &[(usize, usize)]) -> bool {
    let mut adj = vec![Vec::new(); joints];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; joints];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(v) = stack.pop() {
        for &n in &adj[v] {
            if !std::mem::replace(&mut seen[n], true) {
                stack.push(n);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// `D^{-1/2} A D^{-1/2}` with zero-degree rows and columns left at zero.
fn normalize(a: &Tensor) -> Tensor {
    let n = a.shape()[0];
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let deg: f64 = (0..n).map(|j| a.get(&[i, j])).sum();
            if deg > 0.0 {
                1.0 / deg.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            out.set(&[i, j], inv_sqrt[i] * a.get(&[i, j]) * inv_sqrt[j]);
        }
    }
    out
}

/// Mixes the channel axis (axis 1) of `[B, Cin, T, V]` with `weight: [Cout, Cin]`.
pub fn channel_mix(weight: &Var, x: &Var) -> Result<Var> {
    let shape = x.shape();
    let [b, cin, t, v] = shape[..] else {
        return Err(Error::Shape(format!(
            "expected [B, C, T, V], got {shape:?}"
        )));
    };
    let cout = weight.shape()[0];
    let flat = x.permute(&[1, 0, 2, 3])?.reshape(&[cin, b * t * v])?;
    weight
        .matmul(&flat)?
        .reshape(&[cout, b, t, v])?
        .permute(&[1, 0, 2, 3])
}

/// Promotes `[C, T, V]` to `[1, C, T, V]`; returns whether it did.
pub(crate) fn as_batched(x: &Var) -> Result<(Var, bool)> {
    match x.shape().len() {
        3 => {
            let s = x.shape();
            Ok((x.reshape(&[1, s[0], s[1], s[2]])?, true))
        }
        4 => Ok((x.clone(), false)),
        _ => Err(Error::Shape(format!(
            "expected [C, T, V] or [B, C, T, V], got {:?}",
            x.shape()
        ))),
    }
}

pub(crate) fn unbatch(y: Var, was_unbatched: bool) -> Result<Var> {
    if was_unbatched {
        let s = y.shape();
        y.reshape(&s[1..])
    } else {
        Ok(y)
    }
}

/// Graph convolution with one weight matrix per partition:
/// `Y_t = Σ_k W_kᵀ · X_t · N_k + bias`, applied to every frame.
#[derive(Clone, Debug)]
pub struct GcnLayer {
    weights: Vec<Var>,
    bias: Option<Var>,
    in_channels: usize,
    out_channels: usize,
}

impl GcnLayer {
    /// Weights drawn uniformly from `±1/sqrt(Cin)`, bias zero.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        partitions: usize,
        with_bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / (in_channels as f64).sqrt();
        let weights = (0..partitions)
            .map(|_| {
                let data = (0..in_channels * out_channels)
                    .map(|_| rng.uniform(-bound, bound))
                    .collect();
                Var::parameter(Tensor::new(&[in_channels, out_channels], data).unwrap())
            })
            .collect();
        Self {
            weights,
            bias: with_bias.then(|| Var::parameter(Tensor::zeros(&[out_channels]))),
            in_channels,
            out_channels,
        }
    }

    pub fn from_parts(weights: Vec<Tensor>, bias: Option<Tensor>) -> Result<Self> {
        let first = weights
            .first()
            .ok_or_else(|| Error::Invalid("gcn layer needs at least one partition".into()))?;
        let [cin, cout] = first.shape()[..] else {
            return Err(Error::Shape(format!(
                "gcn weight must be 2-D, got {:?}",
                first.shape()
            )));
        };
        if weights.iter().any(|w| w.shape() != [cin, cout]) {
            return Err(Error::Shape("gcn partition weights differ in shape".into()));
        }
        if let Some(b) = &bias {
            if b.shape() != [cout] {
                return Err(Error::Shape(format!("gcn bias must be [{cout}]")));
            }
        }
        Ok(Self {
            weights: weights.into_iter().map(Var::parameter).collect(),
            bias: bias.map(Var::parameter),
            in_channels: cin,
            out_channels: cout,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn weights(&self) -> &[Var] {
        &self.weights
    }

    pub fn bias(&self) -> Option<&Var> {
        self.bias.as_ref()
    }

    /// Declared parameter order: `W_0 .. W_{P-1}`, then bias.
    pub fn parameters(&self) -> Vec<Var> {
        self.weights
            .iter()
            .cloned()
            .chain(self.bias.clone())
            .collect()
    }

    /// `x` is `[C, T, V]` or `[B, C, T, V]`.
    pub fn forward(&self, graph: &SkeletonGraph, x: &Var) -> Result<Var> {
        let (x4, squeeze) = as_batched(x)?;
        let [b, c, t, v] = x4.shape()[..] else {
            unreachable!()
        };
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "gcn expects {} channels, input has {c}",
                self.in_channels
            )));
        }
        if v != graph.joints() {
            return Err(Error::Shape(format!(
                "input has {v} joints, graph has {}",
                graph.joints()
            )));
        }
        if self.weights.len() != graph.partition_count() {
            return Err(Error::Shape(format!(
                "layer has {} partition weights, graph has {} partitions",
                self.weights.len(),
                graph.partition_count()
            )));
        }
        let rows = x4.reshape(&[b * c * t, v])?;
        let mut y: Option<Var> = None;
        for (k, w) in self.weights.iter().enumerate() {
            let n_k = Var::constant(graph.partition(k).clone());
            let agg = rows.matmul(&n_k)?.reshape(&[b, c, t, v])?;
            let wt = w.permute(&[1, 0])?;
            let term = channel_mix(&wt, &agg)?;
            y = Some(match y {
                Some(acc) => acc.add(&term)?,
                None => term,
            });
        }
        let mut y = y.expect("at least one partition");
        if let Some(bias) = &self.bias {
            y = y.add(&bias.reshape(&[1, self.out_channels, 1, 1])?)?;
        }
        unbatch(y, squeeze)
    }
}
