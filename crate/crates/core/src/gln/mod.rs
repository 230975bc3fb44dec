//! Graph Location Network: message passing over the four-view graph,
//! concatenation fusion, and a single fully connected head.

mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GlnError, Result};
use crate::floorplan::{LocationId, Topology, ViewGraph, VIEW_COUNT};
use crate::numerics::{attention_scores, BatchStats, Matrix, Mode, RunningStats, Tape, Var};

pub use train::{train_standard, EpochLog, TrainConfig, TrainingLog};
pub(crate) use train::{fit, Objective};

/// Slope of the LeakyReLU inside the attention logits.
pub const ATTENTION_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    LeakyRelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlnConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    /// Number of message-passing steps.
    pub layers: usize,
    pub attention: bool,
    pub dropout: f64,
    pub self_loops: bool,
    /// `None` picks LeakyReLU with attention and ReLU without.
    pub activation: Option<Activation>,
    pub leaky_slope: f64,
    /// Width of the head: class count, or embedding dim in the zero-shot setting.
    pub output_dim: usize,
}

impl Default for GlnConfig {
    fn default() -> Self {
        GlnConfig {
            feature_dim: 2048,
            hidden_dim: 256,
            layers: 1,
            attention: false,
            dropout: 0.5,
            self_loops: true,
            activation: None,
            leaky_slope: 0.2,
            output_dim: 1,
        }
    }
}

impl GlnConfig {
    pub fn new(feature_dim: usize, output_dim: usize) -> Self {
        GlnConfig {
            feature_dim,
            output_dim,
            ..Default::default()
        }
    }

    pub fn with_attention(mut self, attention: bool) -> Self {
        self.attention = attention;
        self
    }

    pub fn activation(&self) -> Activation {
        self.activation.unwrap_or(if self.attention {
            Activation::LeakyRelu
        } else {
            Activation::Relu
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(GlnError::Config("layers must be at least 1".into()));
        }
        if self.feature_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(GlnError::Config(
                "feature, hidden and output dimensions must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(GlnError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn topology(&self) -> Topology {
        ViewGraph::new(self.self_loops).topology()
    }
}

/// One multi-view query: four `d`-dim view features in front, behind,
/// right, left order.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewSample {
    pub location: LocationId,
    pub group: u32,
    pub views: Matrix,
}

impl MultiViewSample {
    pub fn new(location: LocationId, group: u32, views: Matrix) -> Result<Self> {
        if views.rows() != VIEW_COUNT {
            return Err(GlnError::Data(format!(
                "group {group}: expected {VIEW_COUNT} views, got {}",
                views.rows()
            )));
        }
        Ok(MultiViewSample {
            location,
            group,
            views,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// Shared node-wise transform, `F_in × F_out`.
    pub weight: Matrix,
    /// Attention vector `[a_src; a_dst]`, `2·F_out × 1`.
    pub attention: Option<Matrix>,
    pub bn_gamma: Matrix,
    pub bn_beta: Matrix,
    pub bn_running: RunningStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlnParams {
    pub layers: Vec<LayerParams>,
    /// `4·F′ × output_dim`.
    pub head_weight: Matrix,
    pub head_bias: Matrix,
}

impl GlnParams {
    /// Glorot-initialized message passing, zero-initialized head.
    pub fn init(config: &GlnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = config.hidden_dim;
        let layers = (0..config.layers)
            .map(|l| {
                let fin = if l == 0 { config.feature_dim } else { f };
                let weight = Matrix::glorot(fin, f, &mut rng);
                let attention = config.attention.then(|| Matrix::glorot(2 * f, 1, &mut rng));
                LayerParams {
                    weight,
                    attention,
                    bn_gamma: Matrix::filled(1, f, 1.0),
                    bn_beta: Matrix::zeros(1, f),
                    bn_running: RunningStats::new(f),
                }
            })
            .collect();
        Ok(GlnParams {
            layers,
            head_weight: Matrix::zeros(VIEW_COUNT * f, config.output_dim),
            head_bias: Matrix::zeros(1, config.output_dim),
        })
    }

    /// Learnable matrices in declaration order.
    pub fn trainable(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            if let Some(a) = &l.attention {
                out.push(a);
            }
            out.push(&l.bn_gamma);
            out.push(&l.bn_beta);
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            if let Some(a) = &mut l.attention {
                out.push(a);
            }
            out.push(&mut l.bn_gamma);
            out.push(&mut l.bn_beta);
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    /// Every stored matrix (trainable and running statistics) in checkpoint order.
    pub fn all_matrices(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(&l.weight);
            if let Some(a) = &l.attention {
                out.push(a);
            }
            out.push(&l.bn_gamma);
            out.push(&l.bn_beta);
            out.push(&l.bn_running.mean);
            out.push(&l.bn_running.var);
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    pub fn all_matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            if let Some(a) = &mut l.attention {
                out.push(a);
            }
            out.push(&mut l.bn_gamma);
            out.push(&mut l.bn_beta);
            out.push(&mut l.bn_running.mean);
            out.push(&mut l.bn_running.var);
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }
}

/// Tape handles produced by [`Gln::build`].
pub struct GlnGraph {
    /// Final node states, `(B·4) × F′`.
    pub hidden: Var,
    /// Concatenated states, `B × 4F′`.
    pub fused: Var,
    /// Head output, `B × output_dim`.
    pub output: Var,
    /// Tape leaves for [`GlnParams::trainable`], same order.
    pub params: Vec<Var>,
    /// Batch-norm statistics per layer (training mode only).
    pub batch_stats: Vec<BatchStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gln {
    pub config: GlnConfig,
    pub params: GlnParams,
}

/// Per-node attention weights over `N(i)`, aligned with `neighbors`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeWeights {
    pub neighbors: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
}

impl Gln {
    pub fn new(config: GlnConfig, seed: u64) -> Result<Self> {
        let params = GlnParams::init(&config, seed)?;
        Ok(Gln { config, params })
    }

    /// Stacks the views of `samples` into a `(B·4) × d` matrix.
    pub fn stack_views(&self, samples: &[&MultiViewSample]) -> Result<Matrix> {
        let d = self.config.feature_dim;
        let mut out = Matrix::zeros(samples.len() * VIEW_COUNT, d);
        for (b, s) in samples.iter().enumerate() {
            if s.views.shape() != (VIEW_COUNT, d) {
                return Err(GlnError::Dimension {
                    op: "stack_views",
                    left: s.views.shape(),
                    right: (VIEW_COUNT, d),
                });
            }
            for v in 0..VIEW_COUNT {
                out.row_mut(b * VIEW_COUNT + v).copy_from_slice(s.views.row(v));
            }
        }
        Ok(out)
    }

    /// Records the full forward pass for a stacked batch of views.
    pub fn build<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        views: &Matrix,
        mode: Mode,
        rng: &mut R,
    ) -> Result<GlnGraph> {
        let cfg = &self.config;
        if views.cols() != cfg.feature_dim || !views.rows().is_multiple_of(VIEW_COUNT) || views.rows() == 0 {
            return Err(GlnError::Dimension {
                op: "gln_forward",
                left: views.shape(),
                right: (VIEW_COUNT, cfg.feature_dim),
            });
        }
        let batch = views.rows() / VIEW_COUNT;
        let topo = cfg.topology();
        let adjacency = topo.normalized_adjacency();

        let mut params = Vec::new();
        let mut batch_stats = Vec::new();
        let mut h = tape.constant(views.clone());
        for layer in &self.params.layers {
            let w = tape.param(layer.weight.clone());
            params.push(w);
            let attn = layer.attention.as_ref().map(|a| tape.param(a.clone()));
            if let Some(a) = attn {
                params.push(a);
            }
            let gamma = tape.param(layer.bn_gamma.clone());
            let beta = tape.param(layer.bn_beta.clone());
            params.push(gamma);
            params.push(beta);

            let z = tape.matmul(h, w)?;
            let agg = match attn {
                Some(a) => tape.graph_attention(z, a, topo.neighbors(), ATTENTION_SLOPE)?,
                None => tape.propagate(z, &adjacency)?,
            };
            let act = match cfg.activation() {
                Activation::Relu => tape.relu(agg),
                Activation::LeakyRelu => tape.leaky_relu(agg, cfg.leaky_slope),
            };
            let (bn, stats) = tape.batch_norm(act, gamma, beta, &layer.bn_running, mode)?;
            batch_stats.extend(stats);
            h = tape.dropout(bn, cfg.dropout, mode, rng)?;
        }
        let fused = tape.reshape(h, batch, VIEW_COUNT * cfg.hidden_dim)?;
        let hw = tape.param(self.params.head_weight.clone());
        let hb = tape.param(self.params.head_bias.clone());
        params.push(hw);
        params.push(hb);
        let lin = tape.matmul(fused, hw)?;
        let output = tape.add_row_bias(lin, hb)?;
        Ok(GlnGraph {
            hidden: h,
            fused,
            output,
            params,
            batch_stats,
        })
    }

    /// Inference-mode head outputs for a batch, `B × output_dim`.
    pub fn outputs(&self, samples: &[&MultiViewSample]) -> Result<Matrix> {
        if samples.is_empty() {
            return Ok(Matrix::zeros(0, self.config.output_dim));
        }
        let views = self.stack_views(samples)?;
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = self.build(&mut tape, &views, Mode::Eval, &mut rng)?;
        Ok(tape.value(g.output).clone())
    }

    /// Final hidden states (`4 × F′`) for one sample's views, inference mode.
    pub fn message_pass(&self, views: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = self.build(&mut tape, views, Mode::Eval, &mut rng)?;
        Ok(tape.value(g.hidden).clone())
    }

    /// Attention weights of `layer` for node states `hidden` (`4 × F_in`).
    pub fn attention_weights(&self, hidden: &Matrix, layer: usize) -> Result<EdgeWeights> {
        let lp = self.params.layers.get(layer).ok_or(GlnError::Index {
            what: "layer",
            index: layer,
            len: self.params.layers.len(),
        })?;
        let a = lp
            .attention
            .as_ref()
            .ok_or_else(|| GlnError::Config("model has no attention parameters".into()))?;
        let z = hidden.matmul(&lp.weight)?;
        let topo = self.config.topology();
        let scores = attention_scores(&z, a, topo.neighbors(), ATTENTION_SLOPE)?;
        let mut weights = Vec::with_capacity(VIEW_COUNT);
        let mut it = scores.weights.into_iter();
        for nbrs in topo.neighbors() {
            weights.push(it.by_ref().take(nbrs.len()).collect());
        }
        Ok(EdgeWeights {
            neighbors: topo.neighbors().to_vec(),
            weights,
        })
    }

    /// Class probabilities for one sample. `seed` drives dropout in training mode.
    pub fn forward(&self, sample: &MultiViewSample, mode: Mode, seed: u64) -> Result<Vec<f64>> {
        let views = self.stack_views(&[sample])?;
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = self.build(&mut tape, &views, mode, &mut rng)?;
        let p = tape.softmax_rows(g.output);
        Ok(tape.value(p).as_slice().to_vec())
    }

    /// Top `k_best` classes by probability.
    pub fn predict_topk(&self, sample: &MultiViewSample, k_best: usize) -> Result<Vec<(LocationId, f64)>> {
        let probs = self.forward(sample, Mode::Eval, 0)?;
        rank_scores(&probs, k_best)
    }
}

/// Concatenates final node states into one row `[h₁, h₂, h₃, h₄]`.
pub fn fuse(hidden: &Matrix) -> Result<Vec<f64>> {
    if hidden.rows() != VIEW_COUNT {
        return Err(GlnError::Dimension {
            op: "fuse",
            left: hidden.shape(),
            right: (VIEW_COUNT, hidden.cols()),
        });
    }
    Ok(hidden.as_slice().to_vec())
}

/// Sorts scores descending (ties by ascending id) and keeps the first `k_best`.
pub fn rank_scores(scores: &[f64], k_best: usize) -> Result<Vec<(LocationId, f64)>> {
    if k_best == 0 || k_best > scores.len() {
        return Err(GlnError::Parameter(format!(
            "k-best {k_best} outside 1..={}",
            scores.len()
        )));
    }
    let mut ranked: Vec<(LocationId, f64)> = scores.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k_best);
    Ok(ranked)
}
