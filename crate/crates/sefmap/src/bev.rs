//! Bird's-eye-view feature grids and the subspace decomposition.
//!
//! A grid is H x W cells by C channels, stored cell-major as an [H*W, C]
//! tensor. Two grids (one per modality) are decomposed per cell into four
//! expert input features:
//!
//! - private features of each modality, from learned projections of that
//!   modality's cell vector
//! - a shared feature, from the two shared-projection outputs
//! - an interaction feature, a low-rank bilinear code of both cell vectors
//!
//! Each expert feature passes through its own two-layer fusion net. The
//! private fusion inputs cross-condition on the other modality's shared
//! projection by default; `SubspaceWiring::SameModality` keeps them
//! within-modality instead.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SefError};
use crate::numerics::{randn, NodeId, ParamId, ParamStore, Real, Tape, Tensor};

/// Channel count must divide evenly into this many blocks; the default
/// interaction rank is `channels / RANK_DIVISOR`.
pub const RANK_DIVISOR: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Lidar,
    Image,
}

/// Dense per-cell feature grid for one modality.
#[derive(Debug, Clone)]
pub struct BevGrid {
    h: usize,
    w: usize,
    c: usize,
    pub modality: Modality,
    data: Tensor,
}

impl BevGrid {
    pub fn zeros(h: usize, w: usize, c: usize, modality: Modality) -> Result<Self> {
        check_grid_dims(h, w, c)?;
        Ok(BevGrid {
            h,
            w,
            c,
            modality,
            data: Tensor::zeros(h * w, c),
        })
    }

    /// Wrap an [H*W, C] tensor. Rejects shape mismatch and non-finite data.
    pub fn from_tensor(h: usize, w: usize, modality: Modality, data: Tensor) -> Result<Self> {
        check_grid_dims(h, w, data.cols())?;
        if data.rows() != h * w {
            return Err(SefError::shape(
                "BevGrid::from_tensor",
                format!("{} rows", h * w),
                format!("{} rows", data.rows()),
            ));
        }
        if !data.all_finite() {
            return Err(SefError::NonFinite { op: "BevGrid::from_tensor" });
        }
        let c = data.cols();
        Ok(BevGrid { h, w, c, modality, data })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Tensor {
        &mut self.data
    }

    /// Feature vector of cell (y, x) as a slice of length C.
    pub fn cell(&self, y: usize, x: usize) -> &[Real] {
        let p = y * self.w + x;
        &self.data.data()[p * self.c..(p + 1) * self.c]
    }

    pub fn cell_mut(&mut self, y: usize, x: usize) -> &mut [Real] {
        let p = y * self.w + x;
        let c = self.c;
        &mut self.data.data_mut()[p * c..(p + 1) * c]
    }
}

fn check_grid_dims(h: usize, w: usize, c: usize) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(SefError::Config(format!("grid dims must be positive, got {h}x{w}")));
    }
    if c < RANK_DIVISOR || c % RANK_DIVISOR != 0 {
        return Err(SefError::Config(format!(
            "channel count must be a positive multiple of {RANK_DIVISOR}, got {c}"
        )));
    }
    Ok(())
}

/// Stack equal-shaped grids into one [B*H*W, C] tensor, batch-major.
pub fn stack_grids(grids: &[&BevGrid]) -> Result<Tensor> {
    let first = grids
        .first()
        .ok_or_else(|| SefError::Config("stack_grids needs at least one grid".into()))?;
    let (h, w, c) = (first.h, first.w, first.c);
    let mut data = Vec::with_capacity(grids.len() * h * w * c);
    for g in grids {
        if (g.h, g.w, g.c) != (h, w, c) {
            return Err(SefError::shape(
                "stack_grids",
                format!("{h}x{w}x{c}"),
                format!("{}x{}x{}", g.h, g.w, g.c),
            ));
        }
        data.extend_from_slice(g.data.data());
    }
    Tensor::from_vec(grids.len() * h * w, c, data)
}

/// Which modality's shared projection feeds each private fusion net.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SubspaceWiring {
    /// Private fusion cross-conditions on the other modality's shared
    /// projection (the default).
    #[default]
    AsWritten,
    /// Private fusion stays within its own modality.
    SameModality,
}

/// Parameter handles for the decomposition: four C x C projections, the
/// rank-R bilinear interaction maps, and three two-layer fusion nets.
#[derive(Debug, Clone)]
pub struct SubspaceParams {
    pub channels: usize,
    pub rank: usize,
    pub proj_lidar_private: (ParamId, ParamId),
    pub proj_image_private: (ParamId, ParamId),
    pub proj_lidar_shared: (ParamId, ParamId),
    pub proj_image_shared: (ParamId, ParamId),
    pub inter_a: ParamId,
    pub inter_b: ParamId,
    pub inter_map: ParamId,
    pub fusion_lidar: FusionNet,
    pub fusion_image: FusionNet,
    pub fusion_shared: FusionNet,
}

/// linear(2C -> C) + activation + linear(C -> C)
#[derive(Debug, Clone, Copy)]
pub struct FusionNet {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FusionNet {
    pub(crate) fn register<R: rand::Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        c_in: usize,
        c_out: usize,
    ) -> FusionNet {
        let s1 = 1.0 / (c_in as Real).sqrt();
        let s2 = 1.0 / (c_out as Real).sqrt();
        FusionNet {
            w1: store.add(format!("{prefix}.w1"), randn(rng, c_out, c_in, s1)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(1, c_out)),
            w2: store.add(format!("{prefix}.w2"), randn(rng, c_out, c_out, s2)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(1, c_out)),
        }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w1 = tape.param(store, self.w1)?;
        let b1 = tape.param(store, self.b1)?;
        let w2 = tape.param(store, self.w2)?;
        let b2 = tape.param(store, self.b2)?;
        let h = tape.linear_map(x, w1, b1)?;
        let a = tape.gelu(h)?;
        tape.linear_map(a, w2, b2)
    }
}

impl SubspaceParams {
    /// Register with the default init: projections near identity
    /// (I + 0.01 noise), interaction maps at scale 1/sqrt(C), biases zero.
    pub fn register<R: rand::Rng>(store: &mut ParamStore, rng: &mut R, channels: usize, rank: usize) -> Result<Self> {
        Self::register_with_noise(store, rng, channels, rank, 0.01)
    }

    /// `noise` scales the Gaussian perturbation on the identity projections;
    /// zero gives exact identities (used by tests).
    pub fn register_with_noise<R: rand::Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        channels: usize,
        rank: usize,
        noise: Real,
    ) -> Result<Self> {
        if rank == 0 || rank > channels / 2 {
            return Err(SefError::Config(format!(
                "interaction rank must satisfy 1 <= rank <= channels/2, got rank {rank} for {channels} channels"
            )));
        }
        let c = channels;
        let near_identity = |store: &mut ParamStore, rng: &mut dyn rand::RngCore, name: &str| {
            let mut w = randn(rng, c, c, noise);
            for i in 0..c {
                let v = w.get(i, i);
                w.set(i, i, v + 1.0);
            }
            let wid = store.add(format!("{name}.w"), w);
            let bid = store.add(format!("{name}.b"), Tensor::zeros(1, c));
            (wid, bid)
        };
        let scale = 1.0 / (c as Real).sqrt();
        Ok(SubspaceParams {
            channels: c,
            rank,
            proj_lidar_private: near_identity(store, rng, "subspace.proj_lidar_private"),
            proj_image_private: near_identity(store, rng, "subspace.proj_image_private"),
            proj_lidar_shared: near_identity(store, rng, "subspace.proj_lidar_shared"),
            proj_image_shared: near_identity(store, rng, "subspace.proj_image_shared"),
            inter_a: store.add("subspace.inter_a", randn(rng, rank, c, scale)),
            inter_b: store.add("subspace.inter_b", randn(rng, rank, c, scale)),
            inter_map: store.add("subspace.inter_map", randn(rng, c, rank, scale)),
            fusion_lidar: FusionNet::register(store, rng, "subspace.fusion_lidar", 2 * c, c),
            fusion_image: FusionNet::register(store, rng, "subspace.fusion_image", 2 * c, c),
            fusion_shared: FusionNet::register(store, rng, "subspace.fusion_shared", 2 * c, c),
        })
    }
}

/// Tape nodes for one decomposition: the four projection outputs and the
/// four fused expert input features. Rows are cells (batch-major), C columns.
#[derive(Debug, Clone, Copy)]
pub struct SubspaceBundle {
    pub u_lidar: NodeId,
    pub u_image: NodeId,
    pub r_lidar: NodeId,
    pub r_image: NodeId,
    pub feat_lidar: NodeId,
    pub feat_image: NodeId,
    pub feat_shared: NodeId,
    pub feat_inter: NodeId,
}

/// Apply one projection: x [n, C] through a (weights, bias) pair.
pub fn project(
    tape: &mut Tape,
    store: &ParamStore,
    proj: (ParamId, ParamId),
    x: NodeId,
) -> Result<NodeId> {
    let w = tape.param(store, proj.0)?;
    let b = tape.param(store, proj.1)?;
    tape.linear_map(x, w, b)
}

/// Low-rank bilinear interaction code: map both cell vectors to rank-R
/// space, take the elementwise product, and map back to C channels.
pub fn interaction_code(
    tape: &mut Tape,
    store: &ParamStore,
    params: &SubspaceParams,
    lidar: NodeId,
    image: NodeId,
) -> Result<NodeId> {
    let a = tape.param(store, params.inter_a)?;
    let b = tape.param(store, params.inter_b)?;
    let cmap = tape.param(store, params.inter_map)?;
    let al = tape.matmul_opts(lidar, a, false, true)?;
    let bv = tape.matmul_opts(image, b, false, true)?;
    let prod = tape.mul(al, bv)?;
    tape.matmul_opts(prod, cmap, false, true)
}

/// Full decomposition of a stacked grid pair into the four expert features.
pub fn decompose(
    tape: &mut Tape,
    store: &ParamStore,
    params: &SubspaceParams,
    lidar: NodeId,
    image: NodeId,
    wiring: SubspaceWiring,
) -> Result<SubspaceBundle> {
    let u_lidar = project(tape, store, params.proj_lidar_private, lidar)?;
    let u_image = project(tape, store, params.proj_image_private, image)?;
    let r_lidar = project(tape, store, params.proj_lidar_shared, lidar)?;
    let r_image = project(tape, store, params.proj_image_shared, image)?;

    let (lidar_in, image_in) = match wiring {
        SubspaceWiring::AsWritten => (
            tape.concat_cols(&[u_lidar, r_image])?,
            tape.concat_cols(&[r_lidar, u_image])?,
        ),
        SubspaceWiring::SameModality => (
            tape.concat_cols(&[u_lidar, r_lidar])?,
            tape.concat_cols(&[u_image, r_image])?,
        ),
    };
    let shared_in = tape.concat_cols(&[r_lidar, r_image])?;

    Ok(SubspaceBundle {
        u_lidar,
        u_image,
        r_lidar,
        r_image,
        feat_lidar: params.fusion_lidar.apply(tape, store, lidar_in)?,
        feat_image: params.fusion_image.apply(tape, store, image_in)?,
        feat_shared: params.fusion_shared.apply(tape, store, shared_in)?,
        feat_inter: interaction_code(tape, store, params, lidar, image)?,
    })
}
