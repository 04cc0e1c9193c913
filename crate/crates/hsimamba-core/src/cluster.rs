//! Learnable clustering: ground-truth-guided prototype centers evolved by
//! exponential moving average, nearest-prototype routing for every pixel,
//! and the contrastive cluster loss.
//!
//! Center updates are feature statistics, never gradient steps; only the
//! cluster loss participates in backpropagation.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::data::LabelGrid;
use crate::math;
use crate::rng;
use crate::tensor::{Tape, Tensor, TensorError, TensorId};

#[derive(Clone, Debug, PartialEq)]
pub enum ClusterError {
    /// Assignment requested before any center has been initialized.
    NoInitializedCenters,
    /// Soft assignment temperature must be positive.
    InvalidTemperature(f64),
    /// Momentum must lie strictly inside (0, 1).
    InvalidMomentum(f64),
    Tensor(TensorError),
}

impl fmt::Display for ClusterError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClusterError::NoInitializedCenters => {
                write!(f, "no initialized cluster centers available for assignment")
            }
            ClusterError::InvalidTemperature(t) => {
                write!(f, "soft assignment temperature must be > 0, got {t}")
            }
            ClusterError::InvalidMomentum(g) => {
                write!(f, "EMA momentum must be in (0, 1), got {g}")
            }
            ClusterError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ClusterError {}

impl From<TensorError> for ClusterError {
    fn from(e: TensorError) -> Self {
        ClusterError::Tensor(e)
    }
}

/// Prototype centers plus the latest hard assignment map.
///
/// `K = num_classes × clusters_per_class`; class `c` (1-based) owns the
/// contiguous center block `[(c-1)·cpc, c·cpc)`. A center takes part in
/// assignment only after its class has appeared in a training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterState {
    pub centers: Tensor, // K × D
    pub initialized: Vec<bool>,
    pub momentum: f64,
    pub clusters_per_class: usize,
    /// Hard assignment map M from the previous update, flat raster order.
    pub assignments: Vec<usize>,
}

impl ClusterState {
    pub fn new(
        num_classes: u16,
        clusters_per_class: usize,
        feature_dim: usize,
        momentum: f64,
        num_pixels: usize,
    ) -> Result<Self, ClusterError> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(ClusterError::InvalidMomentum(momentum));
        }
        let k = num_classes as usize * clusters_per_class;
        Ok(Self {
            centers: Tensor::zeros(vec![k, feature_dim]),
            initialized: vec![false; k],
            momentum,
            clusters_per_class,
            // bootstrap map: a single cluster holding every token
            assignments: vec![0; num_pixels],
        })
    }

    pub fn num_centers(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.centers.shape()[1]
    }

    pub fn any_initialized(&self) -> bool {
        self.initialized.iter().any(|&b| b)
    }

    /// Initialized centers as a compact matrix plus their global indices.
    pub fn initialized_subset(&self) -> (Tensor, Vec<usize>) {
        let d = self.feature_dim();
        let idx: Vec<usize> = (0..self.num_centers())
            .filter(|&k| self.initialized[k])
            .collect();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &k in &idx {
            data.extend_from_slice(self.centers.row(k));
        }
        (Tensor::new(vec![idx.len(), d], data).unwrap(), idx)
    }

    /// Nearest-prototype assignment of every feature row to a global
    /// center index, using initialized centers only.
    pub fn assign_all(&self, features: &Tensor) -> Result<Vec<usize>, ClusterError> {
        let (subset, global) = self.initialized_subset();
        let local = assign_nearest(features, &subset)?;
        Ok(local.into_iter().map(|k| global[k]).collect())
    }

    /// Ground-truth-guided statistics update for one training step: group
    /// labeled rows by class, split each class across its sub-centers by
    /// nearest initialized sub-center, then EMA each nonempty sub-group's
    /// mean.
    /// First contact with a class initializes all of its sub-centers from
    /// the class mean plus a small deterministic jitter.
    pub fn update_from_batch(&mut self, features: &Tensor, labels: &LabelGrid, seed: u64) {
        let cpc = self.clusters_per_class;
        let d = self.feature_dim();
        let groups = group_by_label(labels);
        let mut means: BTreeMap<usize, Vec<f64>> = BTreeMap::new();

        for (&class, rows) in &groups {
            let class0 = class as usize - 1;
            let base = class0 * cpc;
            if base + cpc > self.num_centers() {
                continue; // label outside the configured class count
            }
            if !self.initialized[base] {
                let mean = class_mean(features, rows);
                for sub in 0..cpc {
                    let mut jitter_rng =
                        rng::substream(seed ^ 0x4a49_5454, ((class as u64) << 16) | sub as u64);
                    let row = self.centers.data_mut();
                    for f in 0..d {
                        row[(base + sub) * d + f] =
                            mean[f] + 1e-2 * rng::normal(&mut jitter_rng);
                    }
                    self.initialized[base + sub] = true;
                }
                continue;
            }
            // split the class rows among its sub-centers by nearest
            let mut sub_rows: Vec<Vec<usize>> = vec![Vec::new(); cpc];
            for &r in rows {
                let feat = features.row(r);
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for sub in 0..cpc {
                    let c = self.centers.row(base + sub);
                    let mut acc = 0.0;
                    for (x, y) in feat.iter().zip(c) {
                        let df = x - y;
                        acc += df * df;
                    }
                    if acc < best_d {
                        best_d = acc;
                        best = sub;
                    }
                }
                sub_rows[best].push(r);
            }
            for (sub, rows) in sub_rows.iter().enumerate() {
                if !rows.is_empty() {
                    means.insert(base + sub, class_mean(features, rows));
                }
            }
        }
        ema_update(self, &means);
    }
}

/// Indices of labeled pixels grouped by class; label 0 is excluded.
/// The returned rows index into the raster-ordered feature matrix.
pub fn group_by_label(labels: &LabelGrid) -> BTreeMap<u16, Vec<usize>> {
    let mut groups: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.flat().iter().enumerate() {
        if l != 0 {
            groups.entry(l).or_default().push(i);
        }
    }
    groups
}

/// Arithmetic mean of the selected feature rows.
pub fn class_mean(features: &Tensor, rows: &[usize]) -> Vec<f64> {
    let d = features.shape()[1];
    let mut mean = vec![0.0; d];
    for &r in rows {
        for (m, &v) in mean.iter_mut().zip(features.row(r)) {
            *m += v;
        }
    }
    let n = rows.len().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// EMA step `c_k ← γ·c_k + (1−γ)·μ_k` for each center with a batch mean.
/// Off-tape by design: centers never receive gradient updates.
pub fn ema_update(state: &mut ClusterState, means: &BTreeMap<usize, Vec<f64>>) {
    let d = state.feature_dim();
    let gamma = state.momentum;
    for (&k, mean) in means {
        let row = &mut state.centers.data_mut()[k * d..(k + 1) * d];
        for (c, &m) in row.iter_mut().zip(mean) {
            *c = gamma * *c + (1.0 - gamma) * m;
        }
    }
}

/// Hard nearest-center assignment `k_i = argmin_k ‖x_i − c_k‖²`, ties
/// broken toward the lowest center index.
pub fn assign_nearest(features: &Tensor, centers: &Tensor) -> Result<Vec<usize>, ClusterError> {
    let k = centers.shape()[0];
    if k == 0 {
        return Err(ClusterError::NoInitializedCenters);
    }
    let d = centers.shape()[1];
    let rows = features.shape()[0];
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let feat = &features.data()[r * d..(r + 1) * d];
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let center = &centers.data()[c * d..(c + 1) * d];
            let mut acc = 0.0;
            for (x, y) in feat.iter().zip(center) {
                let df = x - y;
                acc += df * df;
            }
            if acc < best_d {
                best_d = acc;
                best = c;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Soft assignment `A = softmax_k(−‖x − c_k‖² / τ)` on the tape; rows sum
/// to one and the argmax agrees with [`assign_nearest`].
pub fn soft_assign(
    tape: &mut Tape,
    features: TensorId,
    centers: TensorId,
    tau: f64,
) -> Result<TensorId, ClusterError> {
    if tau <= 0.0 {
        return Err(ClusterError::InvalidTemperature(tau));
    }
    let dists = tape.pairwise_sqdist(features, centers)?;
    let scaled = tape.scale(dists, -1.0 / tau);
    Ok(tape.softmax(scaled, 1)?)
}

/// Value-level soft assignment through a scratch tape.
pub fn soft_assign_values(
    features: &Tensor,
    centers: &Tensor,
    tau: f64,
) -> Result<Tensor, ClusterError> {
    let mut tape = Tape::new();
    let f = tape.leaf(features.clone());
    let c = tape.leaf(centers.clone());
    let a = soft_assign(&mut tape, f, c, tau)?;
    Ok(tape.value(a).clone())
}

/// Contrastive cluster loss over one batch item:
///
/// `L = 1/L · Σ_{l,k} A_lk ‖f̂_l − c_k‖²  +  1/(K(K−1)) · Σ_{i≠j} cos(c_i, c_j)`
///
/// where `f̂` are the L2-normalized features (norm + 1e-8 in the
/// denominator) and `c_k` is the A-weighted average of `f̂` within the
/// loss. Fully differentiable through `features` and `assign`. For K = 1
/// the inter-cluster term is defined as zero.
pub fn cluster_loss(
    tape: &mut Tape,
    features: TensorId,
    assign: TensorId,
) -> Result<TensorId, ClusterError> {
    let fsh = tape.value(features).shape().to_vec();
    let ash = tape.value(assign).shape().to_vec();
    if fsh.len() != 2 || ash.len() != 2 || fsh[0] != ash[0] {
        return Err(ClusterError::Tensor(TensorError::ShapeMismatch {
            op: "cluster_loss",
            lhs: fsh,
            rhs: ash,
        }));
    }
    let (l, k) = (ash[0], ash[1]);

    // f̂ = f / (‖f‖ + 1e-8), rowwise
    let fhat = l2_normalize_rows(tape, features, 1e-8)?;

    // c_k = Σ_l A_lk f̂_l / Σ_l A_lk
    let at = tape.transpose(assign)?;
    let sums = tape.matmul(at, fhat)?;
    let counts = tape.sum_axis(assign, 0)?;
    let counts_col = tape.reshape(counts, vec![k, 1])?;
    let centers = tape.div(sums, counts_col)?;

    // intra: A-weighted squared distances to the own-cluster center
    let dists = tape.pairwise_sqdist(fhat, centers)?;
    let weighted = tape.mul(assign, dists)?;
    let intra_sum = tape.sum(weighted);
    let intra = tape.scale(intra_sum, 1.0 / l as f64);

    if k < 2 {
        return Ok(intra);
    }

    // inter: mean pairwise cosine between distinct centers
    let chat = l2_normalize_rows(tape, centers, 0.0)?;
    let chat_t = tape.transpose(chat)?;
    let gram = tape.matmul(chat, chat_t)?;
    let eye = tape.leaf(Tensor::eye(k));
    let diag = tape.mul(gram, eye)?;
    let trace = tape.sum(diag);
    let total = tape.sum(gram);
    let offdiag = tape.sub(total, trace)?;
    let inter = tape.scale(offdiag, 1.0 / (k * (k - 1)) as f64);

    Ok(tape.add(intra, inter)?)
}

fn l2_normalize_rows(tape: &mut Tape, x: TensorId, eps: f64) -> Result<TensorId, TensorError> {
    let rows = tape.value(x).shape()[0];
    let sq = tape.mul(x, x)?;
    let ssum = tape.sum_axis(sq, 1)?;
    let norm = tape.sqrt(ssum);
    let norm = tape.add_scalar(norm, eps);
    let norm_col = tape.reshape(norm, vec![rows, 1])?;
    tape.div(x, norm_col)
}

/// Termwise scalar-loop oracle for the cluster loss, independent of the
/// tape path; used to vouch for `cluster_loss`.
pub fn cluster_loss_reference(features: &Tensor, assign: &Tensor) -> f64 {
    let (l, d) = (features.shape()[0], features.shape()[1]);
    let k = assign.shape()[1];
    let fd = features.data();
    let ad = assign.data();

    let mut fhat = vec![0.0; l * d];
    for r in 0..l {
        let row = &fd[r * d..(r + 1) * d];
        let norm = math::sqrt(row.iter().map(|v| v * v).sum::<f64>()) + 1e-8;
        for f in 0..d {
            fhat[r * d + f] = row[f] / norm;
        }
    }

    let mut centers = vec![0.0; k * d];
    for c in 0..k {
        let mut weight = 0.0;
        for r in 0..l {
            weight += ad[r * k + c];
        }
        for f in 0..d {
            let mut acc = 0.0;
            for r in 0..l {
                acc += ad[r * k + c] * fhat[r * d + f];
            }
            centers[c * d + f] = acc / weight;
        }
    }

    let mut intra = 0.0;
    for r in 0..l {
        for c in 0..k {
            let mut dist = 0.0;
            for f in 0..d {
                let df = fhat[r * d + f] - centers[c * d + f];
                dist += df * df;
            }
            intra += ad[r * k + c] * dist;
        }
    }
    intra /= l as f64;

    if k < 2 {
        return intra;
    }
    let mut inter = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let (ci, cj) = (&centers[i * d..(i + 1) * d], &centers[j * d..(j + 1) * d]);
            let dot: f64 = ci.iter().zip(cj).map(|(a, b)| a * b).sum();
            let ni = math::sqrt(ci.iter().map(|v| v * v).sum::<f64>());
            let nj = math::sqrt(cj.iter().map(|v| v * v).sum::<f64>());
            inter += dot / (ni * nj);
        }
    }
    intra + inter / (k * (k - 1)) as f64
}
