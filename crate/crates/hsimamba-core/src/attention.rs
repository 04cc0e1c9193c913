//! Attention-driven token selection.
//!
//! Each cluster's tokens are scored by a gated blend of two signals: a
//! scaled dot-product attention summary (how salient a token is to its
//! peers) and a cluster-membership prior (how central it is to its own
//! prototype):
//!
//! `S = σ(α) · (Softmax(QKᵀ/√d) · v) + (1 − σ(α)) · P_cluster`
//!
//! Tokens are then reordered by descending score before entering the
//! cluster's scan block, and optionally truncated to the top `⌈ρ·N⌉`.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::math;
use crate::rng::{self, DetRng};
use crate::tensor::{Tape, Tensor, TensorError, TensorId};

#[derive(Clone, Debug, PartialEq)]
pub enum AttnError {
    /// Keep ratio must lie in (0, 1].
    InvalidKeepRatio(f64),
    /// Restore called with mismatched sequence bookkeeping.
    PermutationMismatch { expected: usize, got: usize },
    Cluster(crate::cluster::ClusterError),
    Tensor(TensorError),
}

impl fmt::Display for AttnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttnError::InvalidKeepRatio(r) => {
                write!(f, "keep ratio must be in (0, 1], got {r}")
            }
            AttnError::PermutationMismatch { expected, got } => {
                write!(f, "restore expects {expected} processed tokens, got {got}")
            }
            AttnError::Cluster(e) => write!(f, "{e}"),
            AttnError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for AttnError {}

impl From<TensorError> for AttnError {
    fn from(e: TensorError) -> Self {
        AttnError::Tensor(e)
    }
}

impl From<crate::cluster::ClusterError> for AttnError {
    fn from(e: crate::cluster::ClusterError) -> Self {
        AttnError::Cluster(e)
    }
}

/// Learnable scoring parameters for one cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnParams {
    /// Attention projection width d.
    pub dim: usize,
    pub w_q: Tensor,  // D × d
    pub w_k: Tensor,  // D × d
    pub w_v: Tensor,  // D × 1, per-token context scalar
    pub alpha: Tensor, // [1] gate
}

impl AttnParams {
    pub fn init(feature_dim: usize, attn_dim: usize, rng: &mut DetRng) -> Self {
        Self {
            dim: attn_dim,
            w_q: Tensor::new(
                vec![feature_dim, attn_dim],
                rng::fan_in_uniform(rng, feature_dim, feature_dim * attn_dim),
            )
            .unwrap(),
            w_k: Tensor::new(
                vec![feature_dim, attn_dim],
                rng::fan_in_uniform(rng, feature_dim, feature_dim * attn_dim),
            )
            .unwrap(),
            w_v: Tensor::new(
                vec![feature_dim, 1],
                rng::fan_in_uniform(rng, feature_dim, feature_dim),
            )
            .unwrap(),
            alpha: Tensor::new(vec![1], vec![0.0]).unwrap(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.alpha]
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w_q, &self.w_k, &self.w_v, &self.alpha]
    }

    /// Weight-decay participation per tensor, in `tensors_mut` order.
    pub fn decay_flags() -> [bool; 4] {
        [true, true, true, false]
    }

    pub fn leaves(&self, tape: &mut Tape, reg: &mut Vec<TensorId>) -> AttnLeaves {
        let ids = AttnLeaves {
            dim: self.dim,
            w_q: tape.leaf(self.w_q.clone()),
            w_k: tape.leaf(self.w_k.clone()),
            w_v: tape.leaf(self.w_v.clone()),
            alpha: tape.leaf(self.alpha.clone()),
        };
        reg.extend([ids.w_q, ids.w_k, ids.w_v, ids.alpha]);
        ids
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttnLeaves {
    pub dim: usize,
    pub w_q: TensorId,
    pub w_k: TensorId,
    pub w_v: TensorId,
    pub alpha: TensorId,
}

/// Cluster-membership prior: each token's soft-assignment probability for
/// its own cluster, i.e. column `own_col` of `softmax_k(−‖x−c_k‖²/τ)`.
pub fn cluster_prior(
    tape: &mut Tape,
    x: TensorId,
    centers: TensorId,
    own_col: usize,
    tau: f64,
) -> Result<TensorId, AttnError> {
    let n = tape.value(x).shape()[0];
    let k = tape.value(centers).shape()[0];
    let probs = crate::cluster::soft_assign(tape, x, centers, tau)?;
    let mut pick = Tensor::zeros(vec![k, 1]);
    pick.data_mut()[own_col] = 1.0;
    let pick = tape.leaf(pick);
    let col = tape.matmul(probs, pick)?;
    Ok(tape.reshape(col, vec![n])?)
}

/// Hybrid importance score over one cluster's `[N, D]` tokens; `prior`
/// is the `[N]` cluster-membership term.
pub fn hybrid_score(
    tape: &mut Tape,
    x: TensorId,
    prior: TensorId,
    p: &AttnLeaves,
) -> Result<TensorId, AttnError> {
    let n = tape.value(x).shape()[0];
    let q = tape.matmul(x, p.w_q)?;
    let k = tape.matmul(x, p.w_k)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, 1.0 / math::sqrt(p.dim as f64));
    let attn = tape.softmax(scaled, 1)?;
    let v = tape.matmul(x, p.w_v)?;
    let mixed = tape.matmul(attn, v)?;
    let attn_term = tape.reshape(mixed, vec![n])?;

    let gate = tape.sigmoid(p.alpha);
    let neg_gate = tape.scale(gate, -1.0);
    let gate_complement = tape.add_scalar(neg_gate, 1.0);
    let dynamic = tape.mul(gate, attn_term)?;
    let static_prior = tape.mul(gate_complement, prior)?;
    Ok(tape.add(dynamic, static_prior)?)
}

/// Reordering plan produced by [`select_and_sort`].
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSequence {
    /// Kept tokens: reordered position → original position in the cluster.
    pub permutation: Vec<usize>,
    /// Original positions of dropped tokens (empty at ρ = 1).
    pub dropped: Vec<usize>,
    /// Scores of the kept tokens, non-increasing.
    pub scores: Vec<f64>,
    /// Cluster length N before filtering.
    pub total: usize,
}

/// Orders tokens by descending score (ties toward the lower original
/// index) and keeps the top `max(1, ⌈ρ·N⌉)`. Returns the reordered
/// tokens plus the bookkeeping needed to invert the step.
pub fn select_and_sort(
    tape: &mut Tape,
    x: TensorId,
    scores: &[f64],
    keep_ratio: f64,
) -> Result<(TensorId, ScoredSequence), AttnError> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(AttnError::InvalidKeepRatio(keep_ratio));
    }
    let n = tape.value(x).shape()[0];
    if scores.len() != n {
        return Err(AttnError::PermutationMismatch {
            expected: n,
            got: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let keep = ceil_ratio(keep_ratio, n).max(1).min(n);
    let dropped = order.split_off(keep);
    let seq = ScoredSequence {
        scores: order.iter().map(|&i| scores[i]).collect(),
        permutation: order,
        dropped,
        total: n,
    };
    let reordered = tape.gather_rows(x, &seq.permutation)?;
    Ok((reordered, seq))
}

fn ceil_ratio(ratio: f64, n: usize) -> usize {
    math::floor(ratio * n as f64) as usize
        + if (ratio * n as f64) > math::floor(ratio * n as f64) {
            1
        } else {
            0
        }
}

/// Returns processed tokens to their pre-sort positions; dropped
/// positions pass the original input through unchanged.
pub fn restore_order(
    tape: &mut Tape,
    processed: TensorId,
    seq: &ScoredSequence,
    original: TensorId,
) -> Result<TensorId, AttnError> {
    let got = tape.value(processed).shape()[0];
    if got != seq.permutation.len() || tape.value(original).shape()[0] != seq.total {
        return Err(AttnError::PermutationMismatch {
            expected: seq.permutation.len(),
            got,
        });
    }
    let scattered = tape.scatter_rows(processed, &seq.permutation, seq.total)?;
    if seq.dropped.is_empty() {
        return Ok(scattered);
    }
    let mut mask = Tensor::zeros(vec![seq.total, 1]);
    for &i in &seq.dropped {
        mask.data_mut()[i] = 1.0;
    }
    let mask = tape.leaf(mask);
    let bypass = tape.mul(original, mask)?;
    Ok(tape.add(scattered, bypass)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn leaf_matrix(tape: &mut Tape, rows: usize, cols: usize, data: &[f64]) -> TensorId {
        tape.leaf(Tensor::new(vec![rows, cols], data.to_vec()).unwrap())
    }

    fn score_with_alpha(alpha: f64) -> (f64, f64, f64) {
        // returns (score0, attn_term0, prior0) for a fixed 2-token setup
        let mut rng = seeded(21);
        let mut p = AttnParams::init(3, 2, &mut rng);
        p.alpha.data_mut()[0] = alpha;
        let mut tape = Tape::new();
        let x = leaf_matrix(&mut tape, 2, 3, &[0.4, -0.2, 0.9, -0.6, 0.8, 0.1]);
        let prior = tape.leaf(Tensor::new(vec![2], vec![0.3, 0.7]).unwrap());
        let leaves = p.leaves(&mut tape, &mut Vec::new());
        let s = hybrid_score(&mut tape, x, prior, &leaves).unwrap();
        let score0 = tape.value(s).data()[0];

        // attention term alone via a fully open gate
        p.alpha.data_mut()[0] = 1000.0;
        let mut tape2 = Tape::new();
        let x = leaf_matrix(&mut tape2, 2, 3, &[0.4, -0.2, 0.9, -0.6, 0.8, 0.1]);
        let prior2 = tape2.leaf(Tensor::new(vec![2], vec![0.3, 0.7]).unwrap());
        let leaves2 = p.leaves(&mut tape2, &mut Vec::new());
        let s2 = hybrid_score(&mut tape2, x, prior2, &leaves2).unwrap();
        (score0, tape2.value(s2).data()[0], 0.3)
    }

    #[test]
    fn closed_gate_returns_prior_exactly() {
        // σ(−1000) is exactly 0.0 in f64, so the attention term vanishes
        let (score, _, prior) = score_with_alpha(-1000.0);
        assert_eq!(score, prior);
    }

    #[test]
    fn neutral_gate_is_even_mix() {
        let (score, attn, prior) = score_with_alpha(0.0);
        assert!((score - 0.5 * (attn + prior)).abs() < 1e-12);
    }

    #[test]
    fn two_token_score_matches_hand_evaluation() {
        // hand-set parameters with d = 1
        let p = AttnParams {
            dim: 1,
            w_q: Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap(),
            w_k: Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap(),
            w_v: Tensor::new(vec![2, 1], vec![0.5, -0.25]).unwrap(),
            alpha: Tensor::new(vec![1], vec![0.3]).unwrap(),
        };
        let x_data = [1.0, 2.0, -1.0, 0.5];
        let prior_data = [0.8, 0.2];

        let mut tape = Tape::new();
        let x = leaf_matrix(&mut tape, 2, 2, &x_data);
        let prior = tape.leaf(Tensor::new(vec![2], prior_data.to_vec()).unwrap());
        let leaves = p.leaves(&mut tape, &mut Vec::new());
        let s = hybrid_score(&mut tape, x, prior, &leaves).unwrap();
        let got = tape.value(s).data().to_vec();

        // termwise by hand: q = x·w_q, k = x·w_k, v = x·w_v
        let q = [1.0f64, -1.0];
        let k = [2.0f64, 0.5];
        let v = [1.0 * 0.5 + 2.0 * -0.25, -1.0 * 0.5 + 0.5 * -0.25];
        let gate = math::sigmoid(0.3);
        for i in 0..2 {
            let l0 = q[i] * k[0];
            let l1 = q[i] * k[1];
            let m = l0.max(l1);
            let (e0, e1) = (math::exp(l0 - m), math::exp(l1 - m));
            let z = e0 + e1;
            let attn_term = (e0 / z) * v[0] + (e1 / z) * v[1];
            let expected = gate * attn_term + (1.0 - gate) * prior_data[i];
            assert!((got[i] - expected).abs() < 1e-10, "{} vs {expected}", got[i]);
        }
    }

    #[test]
    fn sort_orders_by_score_then_index() {
        let mut tape = Tape::new();
        let x = leaf_matrix(&mut tape, 3, 1, &[10.0, 11.0, 12.0]);
        let (_, seq) = select_and_sort(&mut tape, x, &[0.1, 0.9, 0.5], 1.0).unwrap();
        assert_eq!(seq.permutation, vec![1, 2, 0]);
        assert!(seq.dropped.is_empty());

        // all-equal scores keep the raster order
        let (_, seq) = select_and_sort(&mut tape, x, &[0.4, 0.4, 0.4], 1.0).unwrap();
        assert_eq!(seq.permutation, vec![0, 1, 2]);
    }

    #[test]
    fn ordering_ignores_constant_shifts() {
        let mut rng = seeded(22);
        let scores: Vec<f64> = (0..9).map(|_| rng::uniform(&mut rng, -2.0, 2.0)).collect();
        let shifted: Vec<f64> = scores.iter().map(|s| s + 13.75).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![9, 2]));
        let (_, a) = select_and_sort(&mut tape, x, &scores, 1.0).unwrap();
        let (_, b) = select_and_sort(&mut tape, x, &shifted, 1.0).unwrap();
        assert_eq!(a.permutation, b.permutation);
    }

    #[test]
    fn half_ratio_keeps_top_two_of_four() {
        let mut tape = Tape::new();
        let x = leaf_matrix(&mut tape, 4, 1, &[0.0, 1.0, 2.0, 3.0]);
        let scores = [0.3, 0.9, 0.1, 0.7];
        let (kept, seq) = select_and_sort(&mut tape, x, &scores, 0.5).unwrap();
        // exhaustive check: the two largest scores are 0.9 (idx 1), 0.7 (idx 3)
        assert_eq!(seq.permutation, vec![1, 3]);
        assert_eq!(seq.dropped, vec![0, 2]);
        assert_eq!(tape.value(kept).data(), &[1.0, 3.0]);
        assert!(seq.scores.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn keep_ratio_validation() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 1]));
        assert!(matches!(
            select_and_sort(&mut tape, x, &[0.0, 0.0], 0.0),
            Err(AttnError::InvalidKeepRatio(_))
        ));
        assert!(matches!(
            select_and_sort(&mut tape, x, &[0.0, 0.0], 1.5),
            Err(AttnError::InvalidKeepRatio(_))
        ));
    }

    #[test]
    fn restore_round_trips_full_permutation() {
        let mut tape = Tape::new();
        let data = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let x = leaf_matrix(&mut tape, 3, 2, &data);
        let (kept, seq) = select_and_sort(&mut tape, x, &[0.2, 0.8, 0.5], 1.0).unwrap();
        let back = restore_order(&mut tape, kept, &seq, x).unwrap();
        assert_eq!(tape.value(back).data(), &data);
    }

    #[test]
    fn dropped_positions_bypass_bit_exactly() {
        let mut tape = Tape::new();
        let data = [1.5, -2.0, 3.25, 0.5, -4.0, 7.0, 0.125, 9.0];
        let x = leaf_matrix(&mut tape, 4, 2, &data);
        let scores = [0.3, 0.9, 0.1, 0.7];
        let (kept, seq) = select_and_sort(&mut tape, x, &scores, 0.5).unwrap();
        // pretend processing doubled the kept rows
        let processed = tape.scale(kept, 2.0);
        let back = restore_order(&mut tape, processed, &seq, x).unwrap();
        let out = tape.value(back).data();
        // dropped rows 0 and 2 bit-equal to the input
        assert_eq!(&out[0..2], &data[0..2]);
        assert_eq!(&out[4..6], &data[4..6]);
        // kept rows 1 and 3 transformed
        assert_eq!(&out[2..4], &[data[2] * 2.0, data[3] * 2.0]);
        assert_eq!(&out[6..8], &[data[6] * 2.0, data[7] * 2.0]);
    }

    #[test]
    fn restore_validates_bookkeeping() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![3, 2]));
        let (kept, seq) = select_and_sort(&mut tape, x, &[0.1, 0.2, 0.3], 1.0).unwrap();
        let wrong = tape.leaf(Tensor::zeros(vec![2, 2]));
        assert!(matches!(
            restore_order(&mut tape, wrong, &seq, x),
            Err(AttnError::PermutationMismatch { .. })
        ));
        let _ = kept;
    }
}
