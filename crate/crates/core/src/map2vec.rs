//! Location embeddings learned by message passing over the floor-plan graph,
//! starting from each location's coordinates.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GlnError, Result};
use crate::floorplan::{FloorPlan, LocationId};
use crate::numerics::{Adam, AdamConfig, Matrix, Tape};

/// One row per location; row `i` is the embedding of location `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    vectors: Matrix,
}

impl EmbeddingTable {
    pub fn new(vectors: Matrix) -> Result<Self> {
        if !vectors.is_finite() {
            return Err(GlnError::Numeric("embedding table has non-finite entries".into()));
        }
        Ok(EmbeddingTable { vectors })
    }

    pub fn location_count(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.vectors
    }

    pub fn embedding_of(&self, y: LocationId) -> Result<&[f64]> {
        if y >= self.vectors.rows() {
            return Err(GlnError::Index {
                what: "location embedding",
                index: y,
                len: self.vectors.rows(),
            });
        }
        Ok(self.vectors.row(y))
    }

    /// Rows for the given locations, in order.
    pub fn select(&self, ids: &[LocationId]) -> Result<Matrix> {
        let mut out = Matrix::zeros(ids.len(), self.dim());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.embedding_of(id)?);
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("MAP2VEC v1 {} {}\n", self.location_count(), self.dim());
        for r in 0..self.vectors.rows() {
            let row: Vec<String> = self.vectors.row(r).iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let perr = |line: usize, msg: String| GlnError::Parse {
            path: source.to_string(),
            line,
            msg,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        let (_, header) = lines.next().ok_or_else(|| perr(1, "empty embedding file".into()))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 4 || h[0] != "MAP2VEC" || h[1] != "v1" {
            return Err(perr(1, "expected `MAP2VEC v1 <k> <dim>`".into()));
        }
        let k: usize = h[2].parse().map_err(|_| perr(1, format!("bad k `{}`", h[2])))?;
        let dim: usize = h[3].parse().map_err(|_| perr(1, format!("bad dim `{}`", h[3])))?;
        let mut data = Vec::with_capacity(k * dim);
        let mut rows = 0;
        for (idx, line) in lines {
            let vals = line
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|_| perr(idx + 1, format!("bad value `{v}`"))))
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != dim {
                return Err(perr(idx + 1, format!("{} values, expected {dim}", vals.len())));
            }
            data.extend(vals);
            rows += 1;
        }
        if rows != k {
            return Err(perr(0, format!("header declares {k} rows, found {rows}")));
        }
        EmbeddingTable::new(Matrix::from_vec(k, dim, data)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| GlnError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GlnError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Map2VecObjective {
    /// Softmax over all locations, label = own id.
    NodeIdentity,
    /// Return the propagation of the initial weights without training.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Map2VecConfig {
    /// Message-passing layers; the last one outputs the embedding.
    pub layers: usize,
    /// Width of every layer except the last.
    pub hidden_dim: usize,
    /// Embedding width; `None` means the location count.
    pub embedding_dim: Option<usize>,
    pub epochs: usize,
    pub lr: f64,
    /// Off by default: with self-loops, the two nodes of a single edge share
    /// one normalized row and their embeddings cannot separate.
    pub self_loops: bool,
    pub objective: Map2VecObjective,
    pub seed: u64,
}

impl Default for Map2VecConfig {
    fn default() -> Self {
        Map2VecConfig {
            layers: 2,
            hidden_dim: 64,
            embedding_dim: None,
            epochs: 300,
            lr: 0.01,
            self_loops: false,
            objective: Map2VecObjective::NodeIdentity,
            seed: 0,
        }
    }
}

/// Trains embeddings for every location of `plan` from its coordinates and
/// adjacency alone. The table is rescaled to unit root-mean-square entry so
/// downstream logits start in a sane range; directions are untouched.
pub fn train_map2vec(plan: &FloorPlan, config: &Map2VecConfig) -> Result<EmbeddingTable> {
    let k = plan.location_count();
    if k < 2 {
        return Err(GlnError::Config(format!("map2vec needs at least 2 locations, plan has {k}")));
    }
    if config.layers == 0 || config.hidden_dim == 0 || config.embedding_dim == Some(0) {
        return Err(GlnError::Config("map2vec layers and widths must be positive".into()));
    }
    let dim = config.embedding_dim.unwrap_or(k);
    let adjacency = plan.topology(config.self_loops).normalized_adjacency();
    let inputs = plan.normalized_coords();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut weights: Vec<Matrix> = (0..config.layers)
        .map(|l| {
            let fin = if l == 0 { 2 } else { config.hidden_dim };
            let fout = if l + 1 == config.layers { dim } else { config.hidden_dim };
            Matrix::glorot(fin, fout, &mut rng)
        })
        .collect();

    let labels: Vec<usize> = (0..k).collect();
    let forward = |tape: &mut Tape, weights: &[Matrix]| -> Result<(crate::numerics::Var, Vec<crate::numerics::Var>)> {
        let mut h = tape.constant(inputs.clone());
        let mut vars = Vec::with_capacity(weights.len());
        for (l, w) in weights.iter().enumerate() {
            let wv = tape.param(w.clone());
            vars.push(wv);
            let z = tape.matmul(h, wv)?;
            h = tape.propagate(z, &adjacency)?;
            if l + 1 < weights.len() {
                h = tape.relu(h);
            }
        }
        Ok((h, vars))
    };

    if config.objective == Map2VecObjective::NodeIdentity {
        let mut adam = Adam::new(AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        });
        for epoch in 0..config.epochs {
            let mut tape = Tape::new();
            let (out, vars) = forward(&mut tape, &weights)?;
            let loss = tape.softmax_cross_entropy(out, &labels)?;
            if !tape.value(loss)[(0, 0)].is_finite() {
                return Err(GlnError::Numeric(format!("map2vec loss diverged at epoch {epoch}")));
            }
            tape.backward(loss)?;
            let grads: Vec<Matrix> = vars.iter().map(|&v| tape.grad(v)).collect();
            let mut refs: Vec<&mut Matrix> = weights.iter_mut().collect();
            adam.step(&mut refs, &grads)?;
        }
    }
    let mut tape = Tape::new();
    let (out, _) = forward(&mut tape, &weights)?;
    let out = tape.value(out);
    let rms = (out.as_slice().iter().map(|v| v * v).sum::<f64>() / out.len() as f64).sqrt();
    if rms > 0.0 {
        EmbeddingTable::new(out.map(|v| v / rms))
    } else {
        EmbeddingTable::new(out.clone())
    }
}
