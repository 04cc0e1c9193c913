//! Cluster-guided spatial branch.
//!
//! Tokens are split by the cluster map into ragged per-cluster sequences,
//! each reordered by the attention scorer and scanned by its own block,
//! then scattered back to raster positions. The reconstruction is added to
//! the residual input and passed through a shared global scan so cluster
//! boundaries stay coherent.

use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{self, AttnLeaves};
use crate::error::Error;
use crate::ssm::{self, SsmLeaves};
use crate::tensor::{Tape, Tensor, TensorId};

/// Ragged decomposition of the L tokens into per-cluster index lists.
///
/// Index lists are raster-ascending, mutually disjoint, and jointly cover
/// `0..num_tokens`; the per-cluster tensors are gathered lazily on the
/// tape during [`local_pass`].
#[derive(Clone, Debug, PartialEq)]
pub struct TokenPartition {
    pub indices: Vec<Vec<usize>>,
    pub num_tokens: usize,
}

impl TokenPartition {
    pub fn num_clusters(&self) -> usize {
        self.indices.len()
    }

    pub fn cluster_len(&self, c: usize) -> usize {
        self.indices[c].len()
    }
}

/// Splits the token range by the cluster map `m` (one entry per token).
pub fn partition(m: &[usize], num_clusters: usize) -> Result<TokenPartition, Error> {
    let mut indices = vec![Vec::new(); num_clusters];
    for (i, &c) in m.iter().enumerate() {
        if c >= num_clusters {
            return Err(Error::InvalidClusterIndex {
                index: c,
                clusters: num_clusters,
            });
        }
        indices[c].push(i);
    }
    Ok(TokenPartition {
        indices,
        num_tokens: m.len(),
    })
}

/// Where the attention prior comes from for this pass.
pub enum PriorSpec {
    /// Soft-assignment probability against the initialized centers;
    /// `column_of[c]` maps global cluster `c` to its column.
    Centers {
        centers: Tensor,
        column_of: Vec<Option<usize>>,
        tau: f64,
    },
    /// Constant prior used to bootstrap the very first pass, before any
    /// center exists.
    Uniform(f64),
}

/// Per-cluster scan with attention-driven reordering:
/// `Z_c = scan_c(reorder(X_c))` for every nonempty cluster. Empty clusters
/// yield `None` and contribute nothing downstream.
///
/// With `attn = None` (ablation arm) tokens keep their raster order and
/// the scorer is bypassed entirely.
pub fn local_pass(
    tape: &mut Tape,
    x: TensorId,
    part: &TokenPartition,
    blocks: &[SsmLeaves],
    attn: Option<(&[AttnLeaves], &PriorSpec)>,
    keep_ratio: f64,
) -> Result<Vec<Option<TensorId>>, Error> {
    let width = tape.value(x).shape()[1];
    let centers_leaf = match attn {
        Some((_, PriorSpec::Centers { centers, .. })) => Some(tape.leaf(centers.clone())),
        _ => None,
    };
    let mut out = Vec::with_capacity(part.num_clusters());
    for (c, idx) in part.indices.iter().enumerate() {
        if idx.is_empty() {
            out.push(None);
            continue;
        }
        let xc = tape.gather_rows(x, idx)?;
        let z = match attn {
            None => scan_tokens(tape, xc, &blocks[c], width)?,
            Some((attn_params, prior_spec)) => {
                let prior = match prior_spec {
                    PriorSpec::Uniform(v) => tape.leaf(Tensor::full(vec![idx.len()], *v)),
                    PriorSpec::Centers { column_of, tau, .. } => {
                        let col = column_of.get(c).copied().flatten().ok_or(
                            Error::InvalidClusterIndex {
                                index: c,
                                clusters: column_of.len(),
                            },
                        )?;
                        attention::cluster_prior(
                            tape,
                            xc,
                            centers_leaf.expect("centers leaf present"),
                            col,
                            *tau,
                        )?
                    }
                };
                let scores = attention::hybrid_score(tape, xc, prior, &attn_params[c])?;
                let score_values = tape.value(scores).data().to_vec();
                let (sorted, seq) =
                    attention::select_and_sort(tape, xc, &score_values, keep_ratio)?;
                let scanned = scan_tokens(tape, sorted, &blocks[c], width)?;
                attention::restore_order(tape, scanned, &seq, xc)?
            }
        };
        out.push(Some(z));
    }
    Ok(out)
}

/// Runs one block over a `[N, D]` token matrix via a singleton batch.
fn scan_tokens(
    tape: &mut Tape,
    tokens: TensorId,
    block: &SsmLeaves,
    width: usize,
) -> Result<TensorId, Error> {
    let n = tape.value(tokens).shape()[0];
    let batched = tape.reshape(tokens, vec![1, n, width])?;
    let y = ssm::ssm_forward(tape, batched, block)?;
    Ok(tape.reshape(y, vec![n, width])?)
}

/// Scatters the per-cluster outputs back to raster order, adds the
/// residual input, and runs the shared global scan:
/// `Y = norm(scan_global(norm(X + Z_recon)))`.
pub fn reconstruct_and_global(
    tape: &mut Tape,
    x: TensorId,
    locals: &[Option<TensorId>],
    part: &TokenPartition,
    global: &SsmLeaves,
    pre_norm: (TensorId, TensorId),
    post_norm: (TensorId, TensorId),
    eps: f64,
) -> Result<TensorId, Error> {
    let l = part.num_tokens;
    let width = tape.value(x).shape()[1];
    let mut recon: Option<TensorId> = None;
    for (c, z) in locals.iter().enumerate() {
        let Some(z) = z else { continue };
        let idx = &part.indices[c];
        let got = tape.value(*z).shape()[0];
        if got != idx.len() {
            return Err(Error::PartitionMisaligned {
                cluster: c,
                expected: idx.len(),
                got,
            });
        }
        let placed = tape.scatter_rows(*z, idx, l)?;
        recon = Some(match recon {
            None => placed,
            Some(acc) => tape.add(acc, placed)?,
        });
    }
    let recon = match recon {
        Some(r) => r,
        None => tape.leaf(Tensor::zeros(vec![l, width])),
    };
    let mixed = tape.add(x, recon)?;
    let normed = tape.layernorm(mixed, pre_norm.0, pre_norm.1, eps)?;
    let y = scan_tokens(tape, normed, global, width)?;
    Ok(tape.layernorm(y, post_norm.0, post_norm.1, eps)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, seeded};
    use crate::ssm::{SsmDims, SsmParams};

    #[test]
    fn partition_single_cluster_keeps_raster_order() {
        let part = partition(&[0, 0, 0, 0], 1).unwrap();
        assert_eq!(part.indices, vec![vec![0, 1, 2, 3]]);
    }

    #[test]
    fn partition_alternating_map() {
        let part = partition(&[0, 1, 0, 1], 2).unwrap();
        assert_eq!(part.indices[0], vec![0, 2]);
        assert_eq!(part.indices[1], vec![1, 3]);
    }

    #[test]
    fn partition_indices_are_exhaustive_and_disjoint() {
        let mut rng = seeded(31);
        let m: Vec<usize> = (0..100)
            .map(|_| rng::uniform(&mut rng, 0.0, 5.0) as usize)
            .collect();
        let part = partition(&m, 5).unwrap();
        let mut all: Vec<usize> = part.indices.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        for idx in &part.indices {
            assert!(idx.windows(2).all(|w| w[0] < w[1]), "raster-ascending");
        }
    }

    #[test]
    fn partition_rejects_out_of_range_cluster() {
        assert!(matches!(
            partition(&[0, 3], 2),
            Err(Error::InvalidClusterIndex { index: 3, clusters: 2 })
        ));
    }

    #[test]
    fn degenerate_single_cluster_equals_plain_scan() {
        // K = 1 with uniform prior: all-equal scores keep raster order, so
        // the local pass is exactly one scan over the whole sequence.
        let mut rng = seeded(32);
        let d = 3;
        let block = SsmParams::init(SsmDims::new(d, 2, 2), &mut rng);
        let attn = crate::attention::AttnParams::init(d, 2, &mut rng);
        let x = Tensor::new(
            vec![5, d],
            (0..5 * d).map(|_| rng::uniform(&mut rng, -1.0, 1.0)).collect(),
        )
        .unwrap();

        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let block_leaves = block.leaves(&mut tape, &mut Vec::new());
        let attn_leaves = attn.leaves(&mut tape, &mut Vec::new());
        let part = partition(&[0; 5], 1).unwrap();
        // zero the scoring projections so every token scores the same
        let mut flat_attn = attn.clone();
        for t in flat_attn.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape2 = Tape::new();
        let xid2 = tape2.leaf(x.clone());
        let block_leaves2 = block.leaves(&mut tape2, &mut Vec::new());
        let attn_leaves2 = flat_attn.leaves(&mut tape2, &mut Vec::new());
        let prior = PriorSpec::Uniform(0.5);
        let zs = local_pass(
            &mut tape2,
            xid2,
            &part,
            &[block_leaves2],
            Some((&[attn_leaves2], &prior)),
            1.0,
        )
        .unwrap();
        let z = zs[0].unwrap();

        let plain = scan_tokens(&mut tape, xid, &block_leaves, d).unwrap();
        for (a, b) in tape2.value(z).data().iter().zip(tape.value(plain).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let _ = attn_leaves;
    }

    #[test]
    fn empty_cluster_contributes_nothing() {
        let mut rng = seeded(33);
        let d = 3;
        let blocks: Vec<SsmParams> = (0..2)
            .map(|_| SsmParams::init(SsmDims::new(d, 2, 2), &mut rng))
            .collect();
        let x = Tensor::new(
            vec![4, d],
            (0..4 * d).map(|_| rng::uniform(&mut rng, -1.0, 1.0)).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let xid = tape.leaf(x);
        let leaves: Vec<SsmLeaves> = blocks
            .iter()
            .map(|b| b.leaves(&mut tape, &mut Vec::new()))
            .collect();
        // everything lands in cluster 0; cluster 1 is empty
        let part = partition(&[0, 0, 0, 0], 2).unwrap();
        let zs = local_pass(&mut tape, xid, &part, &leaves, None, 1.0).unwrap();
        assert!(zs[0].is_some());
        assert!(zs[1].is_none());
    }

    #[test]
    fn perturbing_one_cluster_leaves_others_bit_identical() {
        let mut rng = seeded(34);
        let d = 3;
        let blocks: Vec<SsmParams> = (0..2)
            .map(|_| SsmParams::init(SsmDims::new(d, 2, 2), &mut rng))
            .collect();
        let m = [0usize, 1, 0, 1, 0, 1];
        let part = partition(&m, 2).unwrap();
        let base: Vec<f64> = (0..6 * d).map(|_| rng::uniform(&mut rng, -1.0, 1.0)).collect();
        let mut poked = base.clone();
        // perturb only tokens of cluster 0 (raster rows 0, 2, 4)
        for &row in &part.indices[0] {
            for f in 0..d {
                poked[row * d + f] += 0.37;
            }
        }
        let run = |data: &[f64]| {
            let mut tape = Tape::new();
            let xid = tape.leaf(Tensor::new(vec![6, d], data.to_vec()).unwrap());
            let leaves: Vec<SsmLeaves> = blocks
                .iter()
                .map(|b| b.leaves(&mut tape, &mut Vec::new()))
                .collect();
            let zs = local_pass(&mut tape, xid, &part, &leaves, None, 1.0).unwrap();
            tape.value(zs[1].unwrap()).data().to_vec()
        };
        assert_eq!(run(&base), run(&poked));
    }

    #[test]
    fn zero_locals_reduce_to_global_path_of_input() {
        let mut rng = seeded(35);
        let d = 3;
        let global = SsmParams::init(SsmDims::new(d, 2, 2), &mut rng);
        let x = Tensor::new(
            vec![4, d],
            (0..4 * d).map(|_| rng::uniform(&mut rng, -1.0, 1.0)).collect(),
        )
        .unwrap();
        let gain = Tensor::full(vec![d], 1.0);
        let bias = Tensor::zeros(vec![d]);

        let run = |with_zero_locals: bool| {
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone());
            let gl = global.leaves(&mut tape, &mut Vec::new());
            let pre = (tape.leaf(gain.clone()), tape.leaf(bias.clone()));
            let post = (tape.leaf(gain.clone()), tape.leaf(bias.clone()));
            let part = partition(&[0, 0, 0, 0], 1).unwrap();
            let locals = if with_zero_locals {
                let zero = tape.leaf(Tensor::zeros(vec![4, d]));
                vec![Some(zero)]
            } else {
                vec![None]
            };
            let y = reconstruct_and_global(&mut tape, xid, &locals, &part, &gl, pre, post, 1e-5)
                .unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn scatter_of_partitioned_input_reproduces_input() {
        let mut rng = seeded(36);
        let m: Vec<usize> = (0..30).map(|_| rng::uniform(&mut rng, 0.0, 3.0) as usize).collect();
        let part = partition(&m, 3).unwrap();
        let x = Tensor::new(
            vec![30, 2],
            (0..60).map(|_| rng::uniform(&mut rng, -1.0, 1.0)).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let mut acc: Option<TensorId> = None;
        for idx in &part.indices {
            if idx.is_empty() {
                continue;
            }
            let piece = tape.gather_rows(xid, idx).unwrap();
            let placed = tape.scatter_rows(piece, idx, 30).unwrap();
            acc = Some(match acc {
                None => placed,
                Some(a) => tape.add(a, placed).unwrap(),
            });
        }
        assert_eq!(tape.value(acc.unwrap()).data(), x.data());
    }

    #[test]
    fn misaligned_reconstruction_is_a_contract_error() {
        let mut rng = seeded(37);
        let d = 2;
        let global = SsmParams::init(SsmDims::new(d, 2, 2), &mut rng);
        let mut tape = Tape::new();
        let xid = tape.leaf(Tensor::zeros(vec![4, d]));
        let gl = global.leaves(&mut tape, &mut Vec::new());
        let gain = tape.leaf(Tensor::full(vec![d], 1.0));
        let bias = tape.leaf(Tensor::zeros(vec![d]));
        let part = partition(&[0, 0, 1, 1], 2).unwrap();
        let wrong = tape.leaf(Tensor::zeros(vec![3, d])); // cluster 0 has 2 tokens
        let result = reconstruct_and_global(
            &mut tape,
            xid,
            &[Some(wrong), None],
            &part,
            &gl,
            (gain, bias),
            (gain, bias),
            1e-5,
        );
        assert!(matches!(
            result,
            Err(Error::PartitionMisaligned { cluster: 0, expected: 2, got: 3 })
        ));
    }
}
