//! Expert heads, uncertainty-aware gating, and the mixture output.
//!
//! Each subspace feature feeds its own head producing per-cell class-mean
//! logits and a log-variance. The gate scores the concatenated features of
//! the active experts and subtracts each expert's average predicted
//! variance from its logit, so unreliable experts lose weight before the
//! softmax. The final prediction is the per-cell convex combination of
//! expert means. The active set is usually all four experts but can be a
//! subset (the expert-group ablations), which shrinks the gate and the
//! uniform prior of the balance penalty accordingly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SefError};
use crate::numerics::{randn, NodeId, ParamId, ParamStore, Real, Tape, Tensor};

pub const NUM_EXPERTS: usize = 4;

/// Raw log-variance outputs saturate smoothly at this magnitude before exp,
/// keeping the gate penalty bounded without killing gradients.
pub const LOGVAR_LIMIT: Real = 6.0;

/// The four experts in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    LidarPrivate,
    ImagePrivate,
    Shared,
    Interaction,
}

impl ExpertKind {
    pub const ALL: [ExpertKind; NUM_EXPERTS] = [
        ExpertKind::LidarPrivate,
        ExpertKind::ImagePrivate,
        ExpertKind::Shared,
        ExpertKind::Interaction,
    ];

    pub fn index(self) -> usize {
        match self {
            ExpertKind::LidarPrivate => 0,
            ExpertKind::ImagePrivate => 1,
            ExpertKind::Shared => 2,
            ExpertKind::Interaction => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ExpertKind::LidarPrivate => "lidar",
            ExpertKind::ImagePrivate => "image",
            ExpertKind::Shared => "shared",
            ExpertKind::Interaction => "interaction",
        }
    }
}

/// One expert's parameters: a linear mean head and a linear log-variance
/// head, both per-cell maps from feature channels to class count.
#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub mean_w: ParamId,
    pub mean_b: ParamId,
    pub logvar_w: ParamId,
    pub logvar_b: ParamId,
}

/// Heads for the active experts, in `kinds` order.
#[derive(Debug, Clone)]
pub struct ExpertBank {
    pub kinds: Vec<ExpertKind>,
    pub heads: Vec<HeadParams>,
    pub channels: usize,
    pub classes: usize,
}

impl ExpertBank {
    /// Mean heads start at small random weights; log-variance heads start at
    /// exactly zero so every expert begins with unit variance and the gate
    /// penalty cancels across experts.
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        channels: usize,
        classes: usize,
        kinds: &[ExpertKind],
    ) -> Result<Self> {
        if channels == 0 || classes < 2 {
            return Err(SefError::Config(format!(
                "expert bank needs channels > 0 and at least 2 classes, got C={channels} D={classes}"
            )));
        }
        if kinds.is_empty() {
            return Err(SefError::Config("expert bank needs at least one expert".into()));
        }
        let scale = 1.0 / (channels as Real).sqrt();
        let heads = kinds
            .iter()
            .map(|k| {
                let prefix = format!("expert.{}", k.label());
                HeadParams {
                    mean_w: store
                        .add(format!("{prefix}.mean.w"), randn(rng, classes, channels, scale)),
                    mean_b: store.add(format!("{prefix}.mean.b"), Tensor::zeros(1, classes)),
                    logvar_w: store
                        .add(format!("{prefix}.logvar.w"), Tensor::zeros(classes, channels)),
                    logvar_b: store.add(format!("{prefix}.logvar.b"), Tensor::zeros(1, classes)),
                }
            })
            .collect();
        Ok(ExpertBank { kinds: kinds.to_vec(), heads, channels, classes })
    }

    pub fn num_active(&self) -> usize {
        self.kinds.len()
    }
}

/// Gate parameters. The default scores experts with a single linear layer
/// and applies the variance penalty; the plain variant scores them with a
/// small MLP and ignores predicted variance entirely (the ablation form).
#[derive(Debug, Clone)]
pub enum GateParams {
    Uncertainty { w: ParamId, b: ParamId, beta: Real },
    Mlp { w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId },
}

impl GateParams {
    pub fn register_uncertainty<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        channels: usize,
        num_experts: usize,
        beta: Real,
    ) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(SefError::Config(format!("gate beta must be positive, got {beta}")));
        }
        let fan_in = num_experts * channels;
        let scale = 1.0 / (fan_in as Real).sqrt();
        Ok(GateParams::Uncertainty {
            w: store.add("gate.w".to_string(), randn(rng, num_experts, fan_in, scale)),
            b: store.add("gate.b".to_string(), Tensor::zeros(1, num_experts)),
            beta,
        })
    }

    pub fn register_mlp<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        channels: usize,
        num_experts: usize,
    ) -> Self {
        let fan_in = num_experts * channels;
        GateParams::Mlp {
            w1: store.add(
                "gate.w1".to_string(),
                randn(rng, channels, fan_in, 1.0 / (fan_in as Real).sqrt()),
            ),
            b1: store.add("gate.b1".to_string(), Tensor::zeros(1, channels)),
            w2: store.add(
                "gate.w2".to_string(),
                randn(rng, num_experts, channels, 1.0 / (channels as Real).sqrt()),
            ),
            b2: store.add("gate.b2".to_string(), Tensor::zeros(1, num_experts)),
        }
    }
}

/// One expert's evaluated head outputs on a batch of cells.
#[derive(Debug, Clone, Copy)]
pub struct ExpertEval {
    /// Class-mean logits [n, D].
    pub mu: NodeId,
    /// Saturated log-variance [n, D].
    pub logvar: NodeId,
    /// Per-cell channel-average variance [n, 1].
    pub mean_var: NodeId,
}

/// Evaluated gate on a batch of cells.
#[derive(Debug, Clone, Copy)]
pub struct GateEval {
    /// Softmax weights [n, K], rows sum to one.
    pub weights: NodeId,
    /// Mean weight per expert over all cells [1, K].
    pub usage: NodeId,
}

/// Run the active heads on their features (`feats` aligned with
/// `bank.kinds`).
pub fn run_heads(
    tape: &mut Tape,
    store: &ParamStore,
    bank: &ExpertBank,
    feats: &[NodeId],
) -> Result<Vec<ExpertEval>> {
    if feats.len() != bank.heads.len() {
        return Err(SefError::shape(
            "run_heads",
            format!("{} feature fields", bank.heads.len()),
            format!("{}", feats.len()),
        ));
    }
    let mut out = Vec::with_capacity(feats.len());
    for (head, &z) in bank.heads.iter().zip(feats.iter()) {
        let (_, c) = tape.value(z).shape();
        if c != bank.channels {
            return Err(SefError::shape(
                "run_heads",
                format!("{} feature channels", bank.channels),
                format!("{c}"),
            ));
        }
        let mw = tape.param(store, head.mean_w)?;
        let mb = tape.param(store, head.mean_b)?;
        let mu = tape.linear_map(z, mw, mb)?;
        let vw = tape.param(store, head.logvar_w)?;
        let vb = tape.param(store, head.logvar_b)?;
        let raw = tape.linear_map(z, vw, vb)?;
        let logvar = tape.soft_clamp(raw, LOGVAR_LIMIT)?;
        let var = tape.exp(logvar)?;
        let mean_var = tape.row_mean(var)?;
        out.push(ExpertEval { mu, logvar, mean_var });
    }
    Ok(out)
}

/// Compute gate weights over the concatenated expert features. The
/// uncertainty form subtracts `beta` times each expert's average predicted
/// variance from its logit before the softmax; the MLP form scores features
/// alone.
pub fn gate(
    tape: &mut Tape,
    store: &ParamStore,
    params: &GateParams,
    feats: &[NodeId],
    evals: &[ExpertEval],
) -> Result<GateEval> {
    if feats.len() != evals.len() || evals.is_empty() {
        return Err(SefError::shape(
            "gate",
            format!("{} matching feature/eval fields", evals.len()),
            format!("{}", feats.len()),
        ));
    }
    let joint = tape.concat_cols(feats)?;
    let adjusted = match params {
        GateParams::Uncertainty { w, b, beta } => {
            let gw = tape.param(store, *w)?;
            let gb = tape.param(store, *b)?;
            let alpha = tape.linear_map(joint, gw, gb)?;
            let vars: Vec<NodeId> = evals.iter().map(|e| e.mean_var).collect();
            let var_table = tape.concat_cols(&vars)?;
            let penalty = tape.scale(var_table, *beta)?;
            tape.sub(alpha, penalty)?
        }
        GateParams::Mlp { w1, b1, w2, b2 } => {
            let gw1 = tape.param(store, *w1)?;
            let gb1 = tape.param(store, *b1)?;
            let h = tape.linear_map(joint, gw1, gb1)?;
            let h = tape.gelu(h)?;
            let gw2 = tape.param(store, *w2)?;
            let gb2 = tape.param(store, *b2)?;
            tape.linear_map(h, gw2, gb2)?
        }
    };
    let weights = tape.softmax_rows(adjusted)?;
    let usage = tape.col_mean(weights)?;
    Ok(GateEval { weights, usage })
}

/// Per-cell convex combination of expert mean logits under the gate
/// weights: [n, D].
pub fn mixture(tape: &mut Tape, evals: &[ExpertEval], gate_eval: &GateEval) -> Result<NodeId> {
    if evals.is_empty() {
        return Err(SefError::Config("mixture needs at least one expert".into()));
    }
    let mut acc: Option<NodeId> = None;
    for (k, eval) in evals.iter().enumerate() {
        let wk = tape.slice_cols(gate_eval.weights, k, 1)?;
        let term = tape.broadcast_mul_col(eval.mu, wk)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    Ok(acc.expect("at least one expert"))
}

/// Usage-balance penalty: squared distance of the average expert weights
/// from the uniform prior 1/K over the active experts.
pub fn balance_regularizer(tape: &mut Tape, usage: NodeId) -> Result<NodeId> {
    let (r, k) = tape.value(usage).shape();
    if r != 1 || k == 0 {
        return Err(SefError::shape(
            "balance_regularizer",
            "1xK usage row".to_string(),
            format!("{r}x{k}"),
        ));
    }
    let centered = tape.add_const(usage, -1.0 / k as Real)?;
    let sq = tape.mul(centered, centered)?;
    tape.sum_all(sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn make_feats(tape: &mut Tape, rng: &mut ChaCha12Rng, n: usize, c: usize) -> [NodeId; 4] {
        [0; 4].map(|_| tape.input(randn(rng, n, c, 1.0)).unwrap())
    }

    #[test]
    fn zeroed_heads_give_unit_variance() {
        let mut r = rng(0);
        let mut store = ParamStore::new();
        let bank = ExpertBank::register(&mut store, &mut r, 4, 3, &ExpertKind::ALL).unwrap();
        for head in &bank.heads {
            store.get_mut(head.mean_w).value.fill(0.0);
        }
        let mut tape = Tape::new();
        let feats = make_feats(&mut tape, &mut r, 5, 4);
        let evals = run_heads(&mut tape, &store, &bank, &feats).unwrap();
        for e in &evals {
            for &v in tape.value(e.mu).data() {
                assert_eq!(v, 0.0);
            }
            for &v in tape.value(e.mean_var).data() {
                assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn identical_cells_get_identical_outputs() {
        let mut r = rng(1);
        let mut store = ParamStore::new();
        let bank = ExpertBank::register(&mut store, &mut r, 6, 4, &ExpertKind::ALL).unwrap();
        let mut tape = Tape::new();
        let row = randn(&mut r, 1, 6, 1.0);
        let mut grid = Tensor::zeros(3, 6);
        for i in 0..3 {
            for j in 0..6 {
                grid.set(i, j, row.get(0, j));
            }
        }
        let z = tape.input(grid).unwrap();
        let feats = [z; 4];
        let evals = run_heads(&mut tape, &store, &bank, &feats).unwrap();
        let mu = tape.value(evals[0].mu);
        for i in 1..3 {
            for d in 0..4 {
                assert_eq!(mu.get(i, d), mu.get(0, d));
            }
        }
    }

    #[test]
    fn single_cell_head_matches_hand_arithmetic() {
        let mut r = rng(2);
        let mut store = ParamStore::new();
        let bank = ExpertBank::register(&mut store, &mut r, 2, 2, &ExpertKind::ALL).unwrap();
        let h = &bank.heads[0];
        store.get_mut(h.mean_w).value =
            Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        store.get_mut(h.mean_b).value = Tensor::from_vec(1, 2, vec![0.5, -0.5]).unwrap();
        store.get_mut(h.logvar_w).value =
            Tensor::from_vec(2, 2, vec![0.1, 0.0, 0.0, 0.2]).unwrap();

        let mut tape = Tape::new();
        let z = tape.input(Tensor::from_vec(1, 2, vec![1.0, -1.0]).unwrap()).unwrap();
        let feats = [z; 4];
        let evals = run_heads(&mut tape, &store, &bank, &feats).unwrap();
        let mu = tape.value(evals[0].mu);
        assert_abs_diff_eq!(mu.get(0, 0), 1.0 - 2.0 + 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(mu.get(0, 1), 3.0 - 4.0 - 0.5, epsilon = 1e-12);
        // log-variance passes through the saturating bound before exp
        let raw = [0.1, -0.2];
        let expect: Real = raw
            .iter()
            .map(|&x: &Real| (LOGVAR_LIMIT * (x / LOGVAR_LIMIT).tanh()).exp())
            .sum::<Real>()
            / 2.0;
        assert_abs_diff_eq!(tape.value(evals[0].mean_var).get(0, 0), expect, epsilon = 1e-12);
    }

    /// Build a gate evaluation with hand-chosen logit biases and per-expert
    /// variances (gate weights zeroed so the bias is the whole logit).
    fn gate_with(alpha: [Real; 4], mean_vars: [Real; 4], beta: Real) -> (Tensor, Tensor) {
        let n = 3;
        let c = 2;
        let mut r = rng(7);
        let mut store = ParamStore::new();
        let params = GateParams::register_uncertainty(&mut store, &mut r, c, 4, beta).unwrap();
        if let GateParams::Uncertainty { w, b, .. } = &params {
            store.get_mut(*w).value.fill(0.0);
            store.get_mut(*b).value = Tensor::from_vec(1, 4, alpha.to_vec()).unwrap();
        }
        let mut tape = Tape::new();
        let feats = make_feats(&mut tape, &mut r, n, c);
        let evals = ExpertKind::ALL.map(|k| {
            let mu = tape.input(Tensor::zeros(n, 2)).unwrap();
            let mv = tape.input(Tensor::filled(n, 1, mean_vars[k.index()])).unwrap();
            ExpertEval { mu, logvar: mu, mean_var: mv }
        });
        let g = gate(&mut tape, &store, &params, &feats, &evals).unwrap();
        (tape.value(g.weights).clone(), tape.value(g.usage).clone())
    }

    #[test]
    fn uniform_inputs_give_uniform_weights() {
        let (w, usage) = gate_with([0.3; 4], [0.9; 4], 1.5);
        for &v in w.data() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-12);
        }
        for &v in usage.data() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn variance_penalty_cancels_matching_logit() {
        let (w, _) = gate_with([1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], 1.0);
        for &v in w.data() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn variance_penalty_downweights_uncertain_expert() {
        let (w, _) = gate_with([0.0; 4], [1.0, 0.0, 0.0, 0.0], 2.0);
        let denom = (-2.0 as Real).exp() + 3.0;
        assert_abs_diff_eq!(w.get(0, 0), (-2.0 as Real).exp() / denom, epsilon = 1e-4);
        assert_abs_diff_eq!(w.get(0, 1), 1.0 / denom, epsilon = 1e-4);
        assert_abs_diff_eq!(w.get(0, 0), 0.0432, epsilon = 1e-4);
        assert_abs_diff_eq!(w.get(0, 1), 0.3189, epsilon = 1e-4);
    }

    #[test]
    fn weights_are_normalized_and_monotone_in_variance() {
        for seed in 0..20 {
            let mut r = rng(seed);
            let alpha: [Real; 4] = [0; 4].map(|_| r.random_range(-2.0..2.0));
            let mut vars: [Real; 4] = [0; 4].map(|_| r.random_range(0.0..3.0));
            let (w, _) = gate_with(alpha, vars, 1.0);
            let row_sum: Real = (0..4).map(|k| w.get(0, k)).sum();
            assert_abs_diff_eq!(row_sum, 1.0, epsilon = 1e-9);
            let before = w.get(0, 2);
            vars[2] += 0.7;
            let (w2, _) = gate_with(alpha, vars, 1.0);
            assert!(w2.get(0, 2) < before, "weight should fall with variance");
        }
    }

    #[test]
    fn gate_is_shift_invariant_and_argmax_follows_logits() {
        let alpha = [0.4, -1.0, 2.0, 0.0];
        let (w, _) = gate_with(alpha, [0.6; 4], 1.0);
        let shifted: [Real; 4] = alpha.map(|a| a + 11.0);
        let (w2, _) = gate_with(shifted, [0.6; 4], 1.0);
        for k in 0..4 {
            assert_abs_diff_eq!(w.get(0, k), w2.get(0, k), epsilon = 1e-9);
        }
        let argmax = (0..4).max_by(|&a, &b| w.get(0, a).partial_cmp(&w.get(0, b)).unwrap());
        assert_eq!(argmax, Some(2));
    }

    #[test]
    fn reduced_expert_group_shrinks_gate_and_prior() {
        let mut r = rng(8);
        let mut store = ParamStore::new();
        let kinds = [ExpertKind::LidarPrivate, ExpertKind::ImagePrivate];
        let bank = ExpertBank::register(&mut store, &mut r, 4, 3, &kinds).unwrap();
        let gp = GateParams::register_uncertainty(&mut store, &mut r, 4, 2, 1.0).unwrap();
        let mut tape = Tape::new();
        let feats: Vec<NodeId> =
            (0..2).map(|_| tape.input(randn(&mut r, 5, 4, 1.0)).unwrap()).collect();
        let evals = run_heads(&mut tape, &store, &bank, &feats).unwrap();
        let g = gate(&mut tape, &store, &gp, &feats, &evals).unwrap();
        let w = tape.value(g.weights);
        assert_eq!(w.shape(), (5, 2));
        for i in 0..5 {
            assert_abs_diff_eq!(w.get(i, 0) + w.get(i, 1), 1.0, epsilon = 1e-9);
        }
        // uniform two-expert usage sits at the new prior, so the penalty is 0
        let mut t2 = Tape::new();
        let u = t2.input(Tensor::from_vec(1, 2, vec![0.5, 0.5]).unwrap()).unwrap();
        let b = balance_regularizer(&mut t2, u).unwrap();
        assert_abs_diff_eq!(t2.value(b).item().unwrap(), 0.0, epsilon = 1e-12);
    }

    fn mixture_value(weights: Vec<Real>, mus: [Real; 4]) -> Real {
        let n = 2;
        let mut tape = Tape::new();
        let w = {
            let mut t = Tensor::zeros(n, 4);
            for i in 0..n {
                for k in 0..4 {
                    t.set(i, k, weights[k]);
                }
            }
            tape.input(t).unwrap()
        };
        let evals = ExpertKind::ALL.map(|k| {
            let mu = tape.input(Tensor::filled(n, 1, mus[k.index()])).unwrap();
            ExpertEval { mu, logvar: mu, mean_var: mu }
        });
        let usage = tape.col_mean(w).unwrap();
        let g = GateEval { weights: w, usage };
        let m = mixture(&mut tape, &evals, &g).unwrap();
        tape.value(m).get(1, 0)
    }

    #[test]
    fn mixture_matches_hand_cases() {
        // one-hot recovers the selected expert
        assert_abs_diff_eq!(
            mixture_value(vec![0.0, 0.0, 1.0, 0.0], [1.0, 2.0, 3.0, 4.0]),
            3.0,
            epsilon = 1e-12
        );
        // agreement between experts makes the weights irrelevant
        assert_abs_diff_eq!(
            mixture_value(vec![0.1, 0.4, 0.3, 0.2], [5.0; 4]),
            5.0,
            epsilon = 1e-12
        );
        // weighted dot product
        assert_abs_diff_eq!(
            mixture_value(vec![0.1, 0.2, 0.3, 0.4], [1.0, 2.0, 3.0, 4.0]),
            3.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn mixture_stays_inside_expert_envelope() {
        let mut r = rng(4);
        let n = 6;
        let d = 3;
        let mut tape = Tape::new();
        let evals = ExpertKind::ALL.map(|_| {
            let mu = tape.input(randn(&mut r, n, d, 2.0)).unwrap();
            ExpertEval { mu, logvar: mu, mean_var: mu }
        });
        let logits = tape.input(randn(&mut r, n, 4, 1.0)).unwrap();
        let w = tape.softmax_rows(logits).unwrap();
        let usage = tape.col_mean(w).unwrap();
        let m = mixture(&mut tape, &evals, &GateEval { weights: w, usage }).unwrap();
        let mv = tape.value(m).clone();
        for i in 0..n {
            for dd in 0..d {
                let vals: Vec<Real> =
                    evals.iter().map(|e| tape.value(e.mu).get(i, dd)).collect();
                let lo = vals.iter().cloned().fold(Real::INFINITY, Real::min);
                let hi = vals.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
                let v = mv.get(i, dd);
                assert!(v >= lo - 1e-9 && v <= hi + 1e-9, "cell {i},{dd} escaped envelope");
            }
        }
    }

    fn balance_value(usage: [Real; 4]) -> Real {
        let mut tape = Tape::new();
        let u = tape.input(Tensor::from_vec(1, 4, usage.to_vec()).unwrap()).unwrap();
        let b = balance_regularizer(&mut tape, u).unwrap();
        tape.value(b).item().unwrap()
    }

    #[test]
    fn balance_matches_hand_cases_and_range() {
        assert_abs_diff_eq!(balance_value([0.25; 4]), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(balance_value([1.0, 0.0, 0.0, 0.0]), 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(balance_value([0.5, 0.5, 0.0, 0.0]), 0.25, epsilon = 1e-12);
        for seed in 0..30 {
            let mut r = rng(seed);
            let raw: [Real; 4] = [0; 4].map(|_| r.random_range(0.01..1.0));
            let total: Real = raw.iter().sum();
            let v = balance_value(raw.map(|x| x / total));
            assert!((0.0..=0.75 + 1e-12).contains(&v), "out of range: {v}");
        }
    }

    #[test]
    fn beta_must_be_positive() {
        let mut r = rng(5);
        let mut store = ParamStore::new();
        assert!(GateParams::register_uncertainty(&mut store, &mut r, 4, 4, 0.0).is_err());
        assert!(GateParams::register_uncertainty(&mut store, &mut r, 4, 4, -1.0).is_err());
    }

    /// Full path through heads, gate, mixture, cross-entropy, and balance
    /// survives a finite-difference sweep over every parameter group.
    #[test]
    fn expert_pipeline_passes_gradient_check() {
        use crate::numerics::finite_diff_check;
        let mut r = rng(6);
        let n = 6;
        let c = 4;
        let d = 3;
        let mut store = ParamStore::new();
        let bank = ExpertBank::register(&mut store, &mut r, c, d, &ExpertKind::ALL).unwrap();
        let gp = GateParams::register_uncertainty(&mut store, &mut r, c, 4, 0.8).unwrap();
        // nonzero log-variance weights so that branch carries real gradient
        for head in &bank.heads {
            store.get_mut(head.logvar_w).value = randn(&mut r, d, c, 0.3);
        }
        let feats_t: Vec<Tensor> = (0..4).map(|_| randn(&mut r, n, c, 1.0)).collect();
        let targets: Vec<usize> = (0..n).map(|_| r.random_range(0..d)).collect();

        let build = |store: &ParamStore, tape: &mut Tape| -> Result<NodeId> {
            let feats: Vec<NodeId> =
                feats_t.iter().map(|t| tape.input(t.clone()).unwrap()).collect();
            let evals = run_heads(tape, store, &bank, &feats)?;
            let g = gate(tape, store, &gp, &feats, &evals)?;
            let mix = mixture(tape, &evals, &g)?;
            let ce = tape.softmax_ce_rows(mix, &targets, None)?;
            let ce_mean = tape.mean_all(ce)?;
            let bal = balance_regularizer(tape, g.usage)?;
            let scaled = tape.scale(bal, 0.7)?;
            tape.add(ce_mean, scaled)
        };

        store.zero_grads();
        let mut tape = Tape::new();
        let loss = build(&store, &mut tape).unwrap();
        tape.backward(loss, &mut store).unwrap();
        let ids: Vec<ParamId> = store.ids().collect();
        for pid in ids {
            let analytic = store.get(pid).grad.clone();
            let name = store.get(pid).name.clone();
            let rel = finite_diff_check(&mut store, pid, 1e-5, &analytic, |ps| {
                let mut t = Tape::new();
                let l = build(ps, &mut t)?;
                t.value(l).item()
            })
            .unwrap();
            assert!(rel < 1e-3, "param `{name}`: rel err {rel:.3e}");
        }

        // the MLP gate variant must be differentiable too
        let mut store2 = ParamStore::new();
        let bank2 = ExpertBank::register(&mut store2, &mut r, c, d, &ExpertKind::ALL).unwrap();
        let gp2 = GateParams::register_mlp(&mut store2, &mut r, c, 4);
        let build2 = |store: &ParamStore, tape: &mut Tape| -> Result<NodeId> {
            let feats: Vec<NodeId> =
                feats_t.iter().map(|t| tape.input(t.clone()).unwrap()).collect();
            let evals = run_heads(tape, store, &bank2, &feats)?;
            let g = gate(tape, store, &gp2, &feats, &evals)?;
            let mix = mixture(tape, &evals, &g)?;
            let ce = tape.softmax_ce_rows(mix, &targets, None)?;
            tape.mean_all(ce)
        };
        store2.zero_grads();
        let mut tape2 = Tape::new();
        let loss2 = build2(&store2, &mut tape2).unwrap();
        tape2.backward(loss2, &mut store2).unwrap();
        let ids2: Vec<ParamId> = store2.ids().collect();
        for pid in ids2 {
            let analytic = store2.get(pid).grad.clone();
            let name = store2.get(pid).name.clone();
            let rel = finite_diff_check(&mut store2, pid, 1e-5, &analytic, |ps| {
                let mut t = Tape::new();
                let l = build2(ps, &mut t)?;
                t.value(l).item()
            })
            .unwrap();
            assert!(rel < 1e-3, "param `{name}` (mlp gate): rel err {rel:.3e}");
        }
    }
}
