//! Specialization losses, the task loss, and the overall objective.
//!
//! The specialization terms compare each expert's class-mean field across
//! the intact and masked passes and push experts toward their roles: a
//! private expert should be insensitive to losing the opposite modality but
//! sensitive to losing its own; the shared expert should be stable under
//! both maskings; the interaction expert must move by at least a margin
//! under either masking. Private-expert terms are differences and may go
//! negative; that repulsion is intentional and never clamped.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SefError};
use crate::experts::ExpertKind;
use crate::masking::PassOutputs;
use crate::numerics::{NodeId, Real, Tape};

/// Per-cell dissimilarity between two class-logit rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DissimilarityKind {
    /// Mean squared difference of raw logits.
    #[default]
    SquaredL2OnLogits,
    /// KL(p||q) + KL(q||p) of the row softmaxes.
    SymmetricKl,
}

fn default_gamma() -> Real {
    0.5
}
fn default_margin() -> Real {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecConfig {
    /// Weight of the repulsion term in the private-expert losses.
    pub gamma: Real,
    /// Hinge margin for the interaction expert.
    pub margin: Real,
    pub dissimilarity: DissimilarityKind,
}

impl Default for SpecConfig {
    fn default() -> Self {
        SpecConfig {
            gamma: default_gamma(),
            margin: default_margin(),
            dissimilarity: DissimilarityKind::default(),
        }
    }
}

impl SpecConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(SefError::Config(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if !(self.margin > 0.0) {
            return Err(SefError::Config(format!("margin must be positive, got {}", self.margin)));
        }
        Ok(())
    }
}

/// Row-wise dissimilarity [n, 1] between two logit fields [n, D].
pub fn dissimilarity(
    tape: &mut Tape,
    a: NodeId,
    b: NodeId,
    kind: DissimilarityKind,
) -> Result<NodeId> {
    let (na, da) = tape.value(a).shape();
    let (nb, db) = tape.value(b).shape();
    if (na, da) != (nb, db) {
        return Err(SefError::shape(
            "dissimilarity",
            format!("{na}x{da}"),
            format!("{nb}x{db}"),
        ));
    }
    match kind {
        DissimilarityKind::SquaredL2OnLogits => {
            let d = tape.sub(a, b)?;
            let sq = tape.mul(d, d)?;
            tape.row_mean(sq)
        }
        DissimilarityKind::SymmetricKl => {
            // KL(p||q) + KL(q||p) = sum_d (p_d - q_d)(a_d - b_d): the
            // log-partition terms cancel in the symmetrized sum
            let p = tape.softmax_rows(a)?;
            let q = tape.softmax_rows(b)?;
            let dp = tape.sub(p, q)?;
            let dl = tape.sub(a, b)?;
            let prod = tape.mul(dp, dl)?;
            tape.row_sum(prod)
        }
    }
}

/// Per-cell specialization loss [n, 1] for one expert, from its class-mean
/// fields on the three passes.
pub fn spec_loss_per_expert(
    tape: &mut Tape,
    kind: ExpertKind,
    intact_mu: NodeId,
    image_masked_mu: NodeId,
    lidar_masked_mu: NodeId,
    cfg: &SpecConfig,
) -> Result<NodeId> {
    let d_img = dissimilarity(tape, intact_mu, image_masked_mu, cfg.dissimilarity)?;
    let d_lid = dissimilarity(tape, intact_mu, lidar_masked_mu, cfg.dissimilarity)?;
    match kind {
        // stay stable without the image, move when lidar is gone
        ExpertKind::LidarPrivate => {
            let rep = tape.scale(d_lid, cfg.gamma)?;
            tape.sub(d_img, rep)
        }
        ExpertKind::ImagePrivate => {
            let rep = tape.scale(d_img, cfg.gamma)?;
            tape.sub(d_lid, rep)
        }
        // consistent under both maskings
        ExpertKind::Shared => tape.add(d_img, d_lid),
        // must react to either masking by at least the margin
        ExpertKind::Interaction => {
            let hinge = |tape: &mut Tape, d: NodeId| -> Result<NodeId> {
                let neg = tape.neg(d)?;
                let shifted = tape.add_const(neg, cfg.margin)?;
                tape.relu(shifted)
            };
            let h1 = hinge(tape, d_img)?;
            let h2 = hinge(tape, d_lid)?;
            tape.add(h1, h2)
        }
    }
}

/// Full specialization loss: mean over cells of the sum over active
/// experts. Requires all three passes.
pub fn spec_loss(
    tape: &mut Tape,
    passes: &PassOutputs,
    kinds: &[ExpertKind],
    cfg: &SpecConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let (img, lid) = passes.masked().ok_or_else(|| {
        SefError::domain("spec_loss", "both masked passes are required; still in warm-up?")
    })?;
    if kinds.len() != passes.intact.evals.len() {
        return Err(SefError::shape(
            "spec_loss",
            format!("{} expert fields", kinds.len()),
            format!("{}", passes.intact.evals.len()),
        ));
    }
    let mut acc: Option<NodeId> = None;
    for (i, &k) in kinds.iter().enumerate() {
        let term = spec_loss_per_expert(
            tape,
            k,
            passes.intact.evals[i].mu,
            img.evals[i].mu,
            lid.evals[i].mu,
            cfg,
        )?;
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    let summed = acc.ok_or_else(|| SefError::Config("spec_loss needs at least one expert".into()))?;
    tape.mean_all(summed)
}

/// Mean cross-entropy of the class logits against per-cell targets,
/// optionally with per-class weights.
pub fn task_loss(
    tape: &mut Tape,
    logits: NodeId,
    targets: &[usize],
    class_weights: Option<&[Real]>,
) -> Result<NodeId> {
    let ce = tape.softmax_ce_rows(logits, targets, class_weights)?;
    tape.mean_all(ce)
}

/// Scalar weights of the four objective components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_task: Real,
    pub lambda_space: Real,
    pub lambda_spec: Real,
    pub lambda_bal: Real,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_task: 1.0, lambda_space: 0.1, lambda_spec: 0.5, lambda_bal: 0.05 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_task", self.lambda_task),
            ("lambda_space", self.lambda_space),
            ("lambda_spec", self.lambda_spec),
            ("lambda_bal", self.lambda_bal),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SefError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// The components entering the overall objective. Space and specialization
/// terms are optional because ablations (and warm-up) remove them.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub task: NodeId,
    pub space: Option<NodeId>,
    pub spec: Option<NodeId>,
    pub balance: NodeId,
}

/// Weighted sum of the objective components. Absent components contribute
/// exactly nothing (no zero-weight placeholder nodes).
pub fn total_loss(tape: &mut Tape, terms: LossTerms, weights: &LossWeights) -> Result<NodeId> {
    weights.validate()?;
    for (name, node) in [
        ("task", Some(terms.task)),
        ("space", terms.space),
        ("spec", terms.spec),
        ("balance", Some(terms.balance)),
    ] {
        if let Some(id) = node {
            let v = tape.value(id).item()?;
            if !v.is_finite() {
                return Err(SefError::domain("total_loss", format!("{name} component is {v}")));
            }
        }
    }
    let mut total = tape.scale(terms.task, weights.lambda_task)?;
    if let Some(spec) = terms.spec {
        let t = tape.scale(spec, weights.lambda_spec)?;
        total = tape.add(total, t)?;
    }
    if let Some(space) = terms.space {
        let t = tape.scale(space, weights.lambda_space)?;
        total = tape.add(total, t)?;
    }
    let b = tape.scale(terms.balance, weights.lambda_bal)?;
    tape.add(total, b)
}
