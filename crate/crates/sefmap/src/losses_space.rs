//! Subspace structure losses.
//!
//! Three estimators shape the decomposition during training:
//!
//! - an independence penalty between each private projection and the raw
//!   features of the opposite modality (biased HSIC estimator)
//! - an alignment reward between the two shared projections (negative mean
//!   per-channel Pearson correlation)
//! - a contrastive loss tying the interaction code of a cell to its own
//!   feature pair against same-grid impostor cells
//!
//! All three run on one seeded cell subsample per grid so their estimates
//! cover the same cells within a step.

use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::bev::{interaction_code, SubspaceBundle, SubspaceParams};
use crate::error::{Result, SefError};
use crate::numerics::{NodeId, ParamStore, Real, Tape};

const PEARSON_EPS: Real = 1e-12;

/// Kernel for the HSIC estimator. The linear kernel is the default and is
/// evaluated in feature space (no Gram matrix); both forms normalize the
/// linear inner product by feature dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HsicKernel {
    #[default]
    Linear,
    Rbf {
        bandwidth: BandwidthMode,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthMode {
    /// Median pairwise distance, recomputed per call, treated as a constant.
    Median,
    /// Fixed bandwidth sigma (not sigma squared).
    Fixed(Real),
}

fn default_sample_cells() -> usize {
    256
}
fn default_negatives() -> usize {
    8
}
fn default_temperature() -> Real {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpaceLossConfig {
    /// Cells sampled per grid for all three estimators (capped at the grid
    /// size, without replacement).
    pub sample_cells: usize,
    /// Impostor cells per anchor for the contrastive term.
    pub negatives: usize,
    /// Contrastive temperature.
    pub temperature: Real,
    pub kernel: HsicKernel,
}

impl Default for SpaceLossConfig {
    fn default() -> Self {
        SpaceLossConfig {
            sample_cells: default_sample_cells(),
            negatives: default_negatives(),
            temperature: default_temperature(),
            kernel: HsicKernel::default(),
        }
    }
}

impl SpaceLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_cells < 2 {
            return Err(SefError::Config(format!(
                "sample_cells must be at least 2, got {}",
                self.sample_cells
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(SefError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if let HsicKernel::Rbf { bandwidth: BandwidthMode::Fixed(s) } = self.kernel {
            if !(s > 0.0) {
                return Err(SefError::Config(format!("rbf bandwidth must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

/// Biased HSIC estimate between row-paired samples x [n, dx] and y [n, dy]:
/// (1/n^2) tr(K H L H). For the linear kernel this is computed as
/// |centered(x)^T centered(y)|_F^2 / (dx dy n^2), which is the same quantity
/// without forming the n x n Grams.
pub fn hsic(tape: &mut Tape, x: NodeId, y: NodeId, kernel: HsicKernel) -> Result<NodeId> {
    let (n, dx) = tape.value(x).shape();
    let (ny, dy) = tape.value(y).shape();
    if n != ny {
        return Err(SefError::shape("hsic", format!("{n} paired rows"), format!("{ny} rows")));
    }
    if n < 2 {
        return Err(SefError::Config(format!("hsic needs at least 2 samples, got {n}")));
    }
    match kernel {
        HsicKernel::Linear => {
            let cx = tape.center_cols(x)?;
            let cy = tape.center_cols(y)?;
            let m = tape.matmul_opts(cx, cy, true, false)?;
            let sq = tape.mul(m, m)?;
            let s = tape.sum_all(sq)?;
            tape.scale(s, 1.0 / ((dx * dy) as Real * (n * n) as Real))
        }
        HsicKernel::Rbf { bandwidth } => {
            let kx = rbf_gram(tape, x, bandwidth)?;
            let ky = rbf_gram(tape, y, bandwidth)?;
            let ckx = tape.double_center(kx)?;
            let cky = tape.double_center(ky)?;
            let prod = tape.mul(ckx, cky)?;
            let s = tape.sum_all(prod)?;
            tape.scale(s, 1.0 / (n * n) as Real)
        }
    }
}

/// Gaussian kernel Gram matrix of the rows of x. The bandwidth is resolved
/// to a constant before entering the tape.
fn rbf_gram(tape: &mut Tape, x: NodeId, bandwidth: BandwidthMode) -> Result<NodeId> {
    let (n, _) = tape.value(x).shape();
    let gram = tape.matmul_opts(x, x, false, true)?;
    let sq = tape.mul(x, x)?;
    let norms = tape.row_sum(sq)?; // [n, 1]
    let norms_t = tape.transpose(norms)?; // [1, n]
    let ones_row = tape.input(crate::numerics::Tensor::filled(1, n, 1.0))?;
    let ones_col = tape.input(crate::numerics::Tensor::filled(n, 1, 1.0))?;
    let col_part = tape.matmul(norms, ones_row)?; // |x_i|^2 broadcast over columns
    let row_part = tape.matmul(ones_col, norms_t)?; // |x_j|^2 broadcast over rows
    let minus2 = tape.scale(gram, -2.0)?;
    let d1 = tape.add(minus2, col_part)?;
    let dist_sq = tape.add(d1, row_part)?;
    let sigma_sq = match bandwidth {
        BandwidthMode::Fixed(s) => s * s,
        BandwidthMode::Median => {
            let d = tape.value(dist_sq);
            let mut offdiag: Vec<Real> = Vec::with_capacity(n * n - n);
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        offdiag.push(d.get(i, j).max(0.0));
                    }
                }
            }
            offdiag.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median_sq = offdiag[offdiag.len() / 2];
            if median_sq > 0.0 {
                median_sq
            } else {
                1.0 // degenerate point cloud; any bandwidth gives K = all-ones
            }
        }
    };
    let scaled = tape.scale(dist_sq, -0.5 / sigma_sq)?;
    tape.exp(scaled)
}

/// Negative mean per-channel Pearson correlation between the two shared
/// projections. A zero-variance channel contributes 0.
pub fn shared_alignment(tape: &mut Tape, r_lidar: NodeId, r_image: NodeId) -> Result<NodeId> {
    let (n, c) = tape.value(r_lidar).shape();
    let (n2, c2) = tape.value(r_image).shape();
    if (n, c) != (n2, c2) {
        return Err(SefError::shape(
            "shared_alignment",
            format!("{n}x{c}"),
            format!("{n2}x{c2}"),
        ));
    }
    if n < 2 {
        return Err(SefError::Config(format!(
            "shared_alignment needs at least 2 samples, got {n}"
        )));
    }
    let cx = tape.center_cols(r_lidar)?;
    let cy = tape.center_cols(r_image)?;
    let xy = tape.mul(cx, cy)?;
    let num = tape.col_sum(xy)?;
    let xx = tape.mul(cx, cx)?;
    let vx = tape.col_sum(xx)?;
    let yy = tape.mul(cy, cy)?;
    let vy = tape.col_sum(yy)?;
    let vprod = tape.mul(vx, vy)?;
    let guarded = tape.add_const(vprod, PEARSON_EPS)?;
    let den = tape.sqrt(guarded)?;
    let corr = tape.div(num, den)?;
    let mean = tape.mean_all(corr)?;
    tape.neg(mean)
}

/// Contrastive interaction loss for one grid. `anchors` index rows of the
/// per-grid tensors; `negatives` holds `anchors.len() * k` impostor row
/// indices, anchor-major. Candidate codes are recomputed from the raw
/// feature pair through the current interaction maps; gradient is blocked
/// through the impostor branch.
///
/// `frozen_negatives` optionally supplies the impostor codes as a plain
/// `[m * k, R]` tensor (anchor-major) instead of recomputing them on the
/// tape. The loss value and gradient are identical either way; the
/// injected form gives finite-difference checks an objective whose
/// impostor branch really is constant.
#[allow(clippy::too_many_arguments)]
pub fn interaction_infonce(
    tape: &mut Tape,
    store: &ParamStore,
    params: &SubspaceParams,
    lidar: NodeId,
    image: NodeId,
    inter: NodeId,
    anchors: &[usize],
    negatives: &[usize],
    temperature: Real,
    frozen_negatives: Option<&Tensor>,
) -> Result<NodeId> {
    if anchors.is_empty() {
        return Err(SefError::Config("interaction_infonce needs at least one anchor".into()));
    }
    let m = anchors.len();
    if negatives.len() % m != 0 {
        return Err(SefError::Config(format!(
            "negative count {} is not a multiple of anchor count {m}",
            negatives.len()
        )));
    }
    if !(temperature > 0.0) {
        return Err(SefError::Config(format!("temperature must be positive, got {temperature}")));
    }
    let k = negatives.len() / m;
    let inv_tau = 1.0 / temperature;

    let anchor_codes = tape.gather_rows(inter, anchors)?;

    let codes_for = |tape: &mut Tape, idx: &[usize]| -> Result<NodeId> {
        let l = tape.gather_rows(lidar, idx)?;
        let v = tape.gather_rows(image, idx)?;
        interaction_code(tape, store, params, l, v)
    };

    let pos_codes = codes_for(tape, anchors)?;
    let pos_cos = tape.row_cosine(anchor_codes, pos_codes)?;
    let phi_pos = tape.scale(pos_cos, inv_tau)?;

    let frozen_node = match frozen_negatives {
        Some(codes) => {
            if codes.shape().0 != m * k {
                return Err(SefError::shape(
                    "interaction_infonce frozen negatives",
                    format!("{} rows", m * k),
                    format!("{}", codes.shape().0),
                ));
            }
            Some(tape.input(codes.clone())?)
        }
        None => None,
    };

    let mut logits = vec![phi_pos];
    for slot in 0..k {
        let frozen = match frozen_node {
            Some(node) => {
                let idx: Vec<usize> = (0..m).map(|i| i * k + slot).collect();
                tape.gather_rows(node, &idx)?
            }
            None => {
                let idx: Vec<usize> = (0..m).map(|i| negatives[i * k + slot]).collect();
                let neg_codes = codes_for(tape, &idx)?;
                tape.detach(neg_codes)?
            }
        };
        let neg_cos = tape.row_cosine(anchor_codes, frozen)?;
        logits.push(tape.scale(neg_cos, inv_tau)?);
    }
    let table = tape.concat_cols(&logits)?;
    let lse = tape.logsumexp_rows(table)?;
    let per_anchor = tape.sub(lse, phi_pos)?;
    tape.mean_all(per_anchor)
}

/// Interaction codes of the given raw feature rows as a plain tensor,
/// evaluated at the current parameter values.
pub fn interaction_codes_now(
    store: &ParamStore,
    params: &SubspaceParams,
    lidar_rows: &Tensor,
    image_rows: &Tensor,
) -> Result<Tensor> {
    let mut scratch = Tape::new();
    let l = scratch.input(lidar_rows.clone())?;
    let v = scratch.input(image_rows.clone())?;
    let code = interaction_code(&mut scratch, store, params, l, v)?;
    Ok(scratch.value(code).clone())
}

/// Per-grid geometry of a stacked batch plus the tape nodes the estimators
/// consume. `lidar`/`image` are the raw stacked grids, the bundle holds the
/// projections for the same rows.
#[derive(Debug, Clone, Copy)]
pub struct SpaceLossInputs<'a> {
    pub lidar: NodeId,
    pub image: NodeId,
    pub bundle: &'a SubspaceBundle,
    pub grids: usize,
    pub cells_per_grid: usize,
}

/// Component values of one space-loss evaluation (batch means).
#[derive(Debug, Clone, Copy)]
pub struct SpaceLossParts {
    pub total: NodeId,
    pub independence: NodeId,
    pub alignment: NodeId,
    pub interaction: NodeId,
}

/// One step's sampled cell subsets: per grid, the anchor rows and the
/// anchor-major impostor rows, as global row indices into the stacked
/// batch. Separating the sampling from the evaluation lets a caller pin
/// the subsets while varying parameters.
#[derive(Debug, Clone)]
pub struct SpacePlan {
    pub anchors: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

/// Draws the cell subsets for one space-loss evaluation: `take` anchors per
/// grid without replacement, and per anchor `cfg.negatives` impostors from
/// the same grid, never the anchor itself, with replacement.
pub fn plan_space_loss(
    rng: &mut ChaCha12Rng,
    cfg: &SpaceLossConfig,
    grids: usize,
    cells_per_grid: usize,
) -> Result<SpacePlan> {
    cfg.validate()?;
    if grids == 0 {
        return Err(SefError::Config("space_loss needs at least one grid".into()));
    }
    let take = cfg.sample_cells.min(cells_per_grid);
    if take < 2 {
        return Err(SefError::Config(format!(
            "need at least 2 sampled cells per grid, got {take}"
        )));
    }
    let mut anchors = Vec::with_capacity(grids);
    let mut negatives = Vec::with_capacity(grids);
    for g in 0..grids {
        let base = g * cells_per_grid;
        let mut local: Vec<usize> = index_sample(rng, cells_per_grid, take).into_iter().collect();
        local.sort_unstable();
        let mut negs = Vec::with_capacity(take * cfg.negatives);
        for &anchor_local in &local {
            for _ in 0..cfg.negatives {
                let mut cand = rng.random_range(0..cells_per_grid - 1);
                if cand >= anchor_local {
                    cand += 1;
                }
                negs.push(base + cand);
            }
        }
        anchors.push(local.iter().map(|&i| base + i).collect());
        negatives.push(negs);
    }
    Ok(SpacePlan { anchors, negatives })
}

/// The impostor codes a plan would use, evaluated at the current parameter
/// values, one `[take * negatives, R]` tensor per grid.
pub fn plan_negative_codes(
    store: &ParamStore,
    params: &SubspaceParams,
    lidar_rows: &Tensor,
    image_rows: &Tensor,
    plan: &SpacePlan,
) -> Result<Vec<Tensor>> {
    let c = lidar_rows.cols();
    plan.negatives
        .iter()
        .map(|idx| {
            let mut l = Vec::with_capacity(idx.len() * c);
            let mut v = Vec::with_capacity(idx.len() * c);
            for &row in idx {
                l.extend_from_slice(&lidar_rows.data()[row * c..(row + 1) * c]);
                v.extend_from_slice(&image_rows.data()[row * c..(row + 1) * c]);
            }
            interaction_codes_now(
                store,
                params,
                &Tensor::from_vec(idx.len(), c, l)?,
                &Tensor::from_vec(idx.len(), c, v)?,
            )
        })
        .collect()
}

/// Evaluates the structure loss over a stacked batch on fixed cell
/// subsets. `frozen_negatives` (one tensor per grid, from
/// [`plan_negative_codes`]) substitutes constant impostor codes; when
/// absent they are recomputed on the tape and detached, which yields the
/// same value and gradient.
pub fn space_loss_with_plan(
    tape: &mut Tape,
    store: &ParamStore,
    params: &SubspaceParams,
    inputs: SpaceLossInputs<'_>,
    cfg: &SpaceLossConfig,
    plan: &SpacePlan,
    frozen_negatives: Option<&[Tensor]>,
) -> Result<SpaceLossParts> {
    cfg.validate()?;
    let SpaceLossInputs { lidar, image, bundle, grids, cells_per_grid } = inputs;
    let (rows, _) = tape.value(lidar).shape();
    if rows != grids * cells_per_grid {
        return Err(SefError::shape(
            "space_loss",
            format!("{} stacked rows", grids * cells_per_grid),
            format!("{rows}"),
        ));
    }
    if plan.anchors.len() != grids {
        return Err(SefError::shape(
            "space_loss plan",
            format!("{grids} grids"),
            format!("{}", plan.anchors.len()),
        ));
    }
    if let Some(f) = frozen_negatives {
        if f.len() != grids {
            return Err(SefError::shape(
                "space_loss frozen negatives",
                format!("{grids} grids"),
                format!("{}", f.len()),
            ));
        }
    }

    let mut uni_terms = Vec::with_capacity(grids);
    let mut shr_terms = Vec::with_capacity(grids);
    let mut int_terms = Vec::with_capacity(grids);
    for g in 0..grids {
        let rows_idx = &plan.anchors[g];
        let negatives = &plan.negatives[g];

        let u_l = tape.gather_rows(bundle.u_lidar, rows_idx)?;
        let u_i = tape.gather_rows(bundle.u_image, rows_idx)?;
        let r_l = tape.gather_rows(bundle.r_lidar, rows_idx)?;
        let r_i = tape.gather_rows(bundle.r_image, rows_idx)?;
        let raw_l = tape.gather_rows(lidar, rows_idx)?;
        let raw_v = tape.gather_rows(image, rows_idx)?;

        let h1 = hsic(tape, u_l, raw_v, cfg.kernel)?;
        let h2 = hsic(tape, u_i, raw_l, cfg.kernel)?;
        uni_terms.push(tape.add(h1, h2)?);

        shr_terms.push(shared_alignment(tape, r_l, r_i)?);

        int_terms.push(interaction_infonce(
            tape,
            store,
            params,
            lidar,
            image,
            bundle.feat_inter,
            rows_idx,
            negatives,
            cfg.temperature,
            frozen_negatives.map(|f| &f[g]),
        )?);
    }

    let mean_of = |tape: &mut Tape, terms: &[NodeId]| -> Result<NodeId> {
        let stacked = tape.concat_cols(terms)?;
        tape.mean_all(stacked)
    };
    let independence = mean_of(tape, &uni_terms)?;
    let alignment = mean_of(tape, &shr_terms)?;
    let interaction = mean_of(tape, &int_terms)?;
    let s1 = tape.add(independence, alignment)?;
    let total = tape.add(s1, interaction)?;
    Ok(SpaceLossParts { total, independence, alignment, interaction })
}

/// Assemble the full structure loss over a stacked batch: for each grid,
/// sample one cell subset and evaluate all three estimators on it, then
/// average the per-grid sums.
pub fn space_loss(
    tape: &mut Tape,
    store: &ParamStore,
    params: &SubspaceParams,
    inputs: SpaceLossInputs<'_>,
    cfg: &SpaceLossConfig,
    rng: &mut ChaCha12Rng,
) -> Result<SpaceLossParts> {
    let plan = plan_space_loss(rng, cfg, inputs.grids, inputs.cells_per_grid)?;
    space_loss_with_plan(tape, store, params, inputs, cfg, &plan, None)
}
