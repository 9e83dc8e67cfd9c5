//! The full model: parameter registry and the per-pass forward.
//!
//! One `SefModel` owns everything the forward needs: either the subspace
//! decomposition or its plain-fusion replacement, the active expert heads,
//! and the gate. The same `forward` serves the intact pass, the two masked
//! passes, and inference; what differs between them is only the input grids
//! handed in. Training-only machinery (masking, losses, optimizer) lives in
//! the neighboring modules.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bev::{decompose, FusionNet, SubspaceParams, SubspaceWiring};
use crate::error::{Result, SefError};
use crate::experts::{
    gate, mixture, run_heads, ExpertBank, ExpertEval, ExpertKind, GateEval, GateParams,
};
use crate::numerics::{NodeId, ParamStore, Real, Tape};

/// Which experts participate in the mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExpertGroup {
    #[default]
    Full,
    /// Only the two modality-private experts.
    PrivateOnly,
    /// Only the shared and interaction experts.
    CrossModalOnly,
}

impl ExpertGroup {
    pub fn kinds(self) -> Vec<ExpertKind> {
        match self {
            ExpertGroup::Full => ExpertKind::ALL.to_vec(),
            ExpertGroup::PrivateOnly => {
                vec![ExpertKind::LidarPrivate, ExpertKind::ImagePrivate]
            }
            ExpertGroup::CrossModalOnly => {
                vec![ExpertKind::Shared, ExpertKind::Interaction]
            }
        }
    }
}

fn default_beta() -> Real {
    1.0
}

/// Architecture choices. Shapes plus the three structural switches; this is
/// the part of the training config the forward pass depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Feature channels per modality (must be a positive multiple of 4).
    pub channels: usize,
    /// Rank of the interaction bilinear maps.
    pub rank: usize,
    /// Output classes.
    pub classes: usize,
    pub wiring: SubspaceWiring,
    /// Subspace decomposition on/off; off routes both grids through one
    /// plain fusion layer shared by every expert.
    pub enable_sd: bool,
    /// Uncertainty-aware gating on/off; off replaces the gate with a plain
    /// MLP scorer without the variance penalty.
    pub enable_uag: bool,
    /// Variance penalty strength of the gate (used when `enable_uag`).
    pub beta: Real,
    pub expert_group: ExpertGroup,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 16,
            rank: 4,
            classes: 4,
            wiring: SubspaceWiring::default(),
            enable_sd: true,
            enable_uag: true,
            beta: default_beta(),
            expert_group: ExpertGroup::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 4 != 0 {
            return Err(SefError::Config(format!(
                "channels must be a positive multiple of 4, got {}",
                self.channels
            )));
        }
        if self.enable_sd && (self.rank == 0 || self.rank > self.channels / 2) {
            return Err(SefError::Config(format!(
                "rank must lie in [1, channels/2], got {} for {} channels",
                self.rank, self.channels
            )));
        }
        if self.classes < 2 {
            return Err(SefError::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.enable_uag && !(self.beta > 0.0) {
            return Err(SefError::Config(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Registered model parameters plus the structure they were built for.
#[derive(Debug, Clone)]
pub struct SefModel {
    pub config: ModelConfig,
    /// Present iff subspace decomposition is enabled.
    pub subspace: Option<SubspaceParams>,
    /// Present iff subspace decomposition is disabled.
    pub plain_fusion: Option<FusionNet>,
    pub bank: ExpertBank,
    pub gate: GateParams,
    pub kinds: Vec<ExpertKind>,
}

impl SefModel {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        config: &ModelConfig,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let (subspace, plain_fusion) = if config.enable_sd {
            (Some(SubspaceParams::register(store, rng, c, config.rank)?), None)
        } else {
            (None, Some(FusionNet::register(store, rng, "plain_fusion", 2 * c, c)))
        };
        let kinds = config.expert_group.kinds();
        let bank = ExpertBank::register(store, rng, c, config.classes, &kinds)?;
        let gate = if config.enable_uag {
            GateParams::register_uncertainty(store, rng, c, kinds.len(), config.beta)?
        } else {
            GateParams::register_mlp(store, rng, c, kinds.len())
        };
        Ok(SefModel { config: config.clone(), subspace, plain_fusion, bank, gate, kinds })
    }
}

/// Everything one forward pass produces, kept as tape nodes so losses can
/// build on any of it.
#[derive(Debug, Clone)]
pub struct PassTrace {
    /// Raw stacked lidar features [n, C] as a tape node.
    pub lidar: NodeId,
    /// Raw stacked image features [n, C].
    pub image: NodeId,
    /// Subspace projections and features when decomposition is on.
    pub bundle: Option<crate::bev::SubspaceBundle>,
    /// Feature field consumed by each active expert, aligned with `kinds`.
    pub feats: Vec<NodeId>,
    pub evals: Vec<ExpertEval>,
    pub gate: GateEval,
    /// Mixture class logits [n, D].
    pub prediction: NodeId,
}

/// Run one forward pass over stacked cell rows. `lidar`/`image` must
/// already be tape nodes of shape [n, C].
pub fn forward(
    tape: &mut Tape,
    store: &ParamStore,
    model: &SefModel,
    lidar: NodeId,
    image: NodeId,
) -> Result<PassTrace> {
    let (n, cl) = tape.value(lidar).shape();
    let (ni, ci) = tape.value(image).shape();
    if (n, cl) != (ni, ci) || cl != model.config.channels {
        return Err(SefError::shape(
            "forward",
            format!("two {n}x{} feature stacks", model.config.channels),
            format!("{n}x{cl} and {ni}x{ci}"),
        ));
    }
    let (bundle, feats) = match (&model.subspace, &model.plain_fusion) {
        (Some(sp), None) => {
            let b = decompose(tape, store, sp, lidar, image, model.config.wiring)?;
            let feats: Vec<NodeId> = model
                .kinds
                .iter()
                .map(|k| match k {
                    ExpertKind::LidarPrivate => b.feat_lidar,
                    ExpertKind::ImagePrivate => b.feat_image,
                    ExpertKind::Shared => b.feat_shared,
                    ExpertKind::Interaction => b.feat_inter,
                })
                .collect();
            (Some(b), feats)
        }
        (None, Some(pf)) => {
            let joint = tape.concat_cols(&[lidar, image])?;
            let z = pf.apply(tape, store, joint)?;
            (None, vec![z; model.kinds.len()])
        }
        _ => unreachable!("registration sets exactly one of subspace/plain_fusion"),
    };
    let evals = run_heads(tape, store, &model.bank, &feats)?;
    let g = gate(tape, store, &model.gate, &feats, &evals)?;
    let prediction = mixture(tape, &evals, &g)?;
    Ok(PassTrace { lidar, image, bundle, feats, evals, gate: g, prediction })
}
