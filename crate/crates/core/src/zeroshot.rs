//! Bilinear compatibility between multi-view samples and location
//! embeddings, trained on seen locations and ranked over all locations.

use crate::error::{GlnError, Result};
use crate::floorplan::{FloorPlan, LocationId, Split};
use crate::gln::{fit, rank_scores, Gln, GlnConfig, MultiViewSample, Objective, TrainConfig, TrainingLog};
use crate::map2vec::EmbeddingTable;
use crate::numerics::{Matrix, Tape, Var};

/// A GLN whose head outputs embedding-space vectors, scored against `embeddings`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompatibilityModel {
    pub gln: Gln,
    pub embeddings: EmbeddingTable,
    pub split: Split,
}

impl CompatibilityModel {
    pub fn new(gln: Gln, embeddings: EmbeddingTable, split: Split) -> Result<Self> {
        if gln.config.output_dim != embeddings.dim() {
            return Err(GlnError::Config(format!(
                "GLN output dim {} != embedding dim {}",
                gln.config.output_dim,
                embeddings.dim()
            )));
        }
        if split.location_count() != embeddings.location_count() {
            return Err(GlnError::Config(format!(
                "split covers {} locations, embeddings {}",
                split.location_count(),
                embeddings.location_count()
            )));
        }
        Ok(CompatibilityModel {
            gln,
            embeddings,
            split,
        })
    }

    pub fn location_count(&self) -> usize {
        self.embeddings.location_count()
    }

    /// `B × k` matrix of `⟨GLN(x), ψ(y)⟩` for every sample and every location.
    pub fn scores(&self, samples: &[&MultiViewSample]) -> Result<Matrix> {
        self.gln.outputs(samples)?.matmul_t(self.embeddings.matrix())
    }

    pub fn compatibility_score(&self, sample: &MultiViewSample, y: LocationId) -> Result<f64> {
        let psi = self.embeddings.embedding_of(y)?;
        let out = self.gln.outputs(&[sample])?;
        Ok(out.row(0).iter().zip(psi).map(|(a, b)| a * b).sum())
    }

    /// Ranks all `k` locations, seen and unseen, by compatibility.
    pub fn zero_shot_predict(&self, sample: &MultiViewSample, k_best: usize) -> Result<Vec<(LocationId, f64)>> {
        let scores = self.scores(&[sample])?;
        rank_scores(scores.row(0), k_best)
    }
}

struct SeenCompatibility {
    seen_embeddings: Matrix,
    seen_index: Vec<Option<usize>>,
}

impl SeenCompatibility {
    fn new(embeddings: &EmbeddingTable, split: &Split) -> Result<Self> {
        let seen = split.seen();
        if seen.is_empty() {
            return Err(GlnError::Config("split has no seen locations".into()));
        }
        let mut seen_index = vec![None; split.location_count()];
        for (i, &id) in seen.iter().enumerate() {
            seen_index[id] = Some(i);
        }
        Ok(SeenCompatibility {
            seen_embeddings: embeddings.select(&seen)?,
            seen_index,
        })
    }
}

impl Objective for SeenCompatibility {
    fn class_logits(&self, tape: &mut Tape, output: Var) -> Result<Var> {
        let psi_t = tape.constant(self.seen_embeddings.transpose());
        tape.matmul(output, psi_t)
    }

    fn target(&self, location: LocationId) -> Result<usize> {
        match self.seen_index.get(location) {
            Some(Some(i)) => Ok(*i),
            Some(None) => Err(GlnError::Data(format!(
                "location {location} is unseen and may not appear in compatibility training data"
            ))),
            None => Err(GlnError::Data(format!(
                "location {location} outside 0..{}",
                self.seen_index.len()
            ))),
        }
    }
}

/// Learns the GLN of the compatibility function from seen-class samples only.
/// The softmax runs over seen locations; embeddings stay fixed.
pub fn train_compatibility(
    train: &[MultiViewSample],
    val: &[MultiViewSample],
    embeddings: &EmbeddingTable,
    split: &Split,
    gln_config: &GlnConfig,
    train_config: &TrainConfig,
    seed: u64,
) -> Result<(CompatibilityModel, TrainingLog)> {
    let config = GlnConfig {
        output_dim: embeddings.dim(),
        ..gln_config.clone()
    };
    let mut gln = Gln::new(config, seed)?;
    let objective = SeenCompatibility::new(embeddings, split)?;
    let log = fit(&mut gln, train, val, train_config, seed, &objective)?;
    Ok((CompatibilityModel::new(gln, embeddings.clone(), split.clone())?, log))
}

/// Standardized coordinates used as two-dimensional location embeddings.
pub fn coordinate_embeddings(plan: &FloorPlan) -> Result<EmbeddingTable> {
    EmbeddingTable::new(plan.normalized_coords())
}

/// The same pipeline as [`train_compatibility`] with coordinates in place of
/// learned embeddings.
pub fn baseline_coord_model(
    plan: &FloorPlan,
    split: &Split,
    gln_config: &GlnConfig,
    train_config: &TrainConfig,
    seed: u64,
    train: &[MultiViewSample],
    val: &[MultiViewSample],
) -> Result<(CompatibilityModel, TrainingLog)> {
    let coords = coordinate_embeddings(plan)?;
    train_compatibility(train, val, &coords, split, gln_config, train_config, seed)
}
