//! Training loop, split protocol, optimizer, and evaluation.
//!
//! One step works on the whole image: a statistics pass with the previous
//! cluster map produces the features that drive the EMA center update and
//! the fresh nearest-center assignment, then the learning pass runs with
//! the new map and backpropagates `CE + λ·L_cluster`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::cluster::{self, ClusterState};
use crate::data::{HsiCube, LabelGrid};
use crate::error::Error;
use crate::metrics::{compute_metrics, ConfusionMatrix, Metrics};
use crate::model::{self, ForwardInputs, ModelConfig, ModelParams};
use crate::rng;
use crate::spectral::{spectral_tokenize, SpectralTokens};
use crate::tensor::Tensor;

/// Split-rule constants from the evaluation protocol: 30 train / 10 val
/// per class, with small classes (< 40 labeled pixels) split 50/50 into
/// (train ∪ val) / test at a 3:1 train:val ratio.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRule {
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub small_class_threshold: usize,
}

impl Default for SplitRule {
    fn default() -> Self {
        Self {
            train_per_class: 30,
            val_per_class: 10,
            small_class_threshold: 40,
        }
    }
}

/// Per-class train/val/test indices (flat raster positions).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deterministic dataset split.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub seed: u64,
    pub per_class: BTreeMap<u16, ClassSplit>,
}

impl SplitSpec {
    pub fn train_indices(&self) -> Vec<usize> {
        self.collect(|s| &s.train)
    }

    pub fn val_indices(&self) -> Vec<usize> {
        self.collect(|s| &s.val)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.collect(|s| &s.test)
    }

    fn collect(&self, pick: impl Fn(&ClassSplit) -> &Vec<usize>) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .per_class
            .values()
            .flat_map(|s| pick(s).iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

fn round_half_up(x: f64) -> usize {
    crate::math::floor(x + 0.5) as usize
}

/// Builds the per-class splits. Every labeled class needs at least two
/// pixels; classes at or above the small-class threshold give 30 train +
/// 10 val + rest test, smaller classes split half into test and divide
/// the other half 3:1 into train and val (round-half-up on the 3:1 rule).
pub fn make_splits(labels: &LabelGrid, rule: SplitRule, seed: u64) -> Result<SplitSpec, Error> {
    let mut per_class = BTreeMap::new();
    for (&class, indices) in cluster::group_by_label(labels).iter() {
        let n = indices.len();
        if n < 2 {
            return Err(Error::Dataset(format!(
                "class {class} has only {n} labeled pixel(s); need at least 2"
            )));
        }
        let mut shuffled = indices.clone();
        let mut class_rng = rng::substream(seed, 0x5350_4c49 ^ u64::from(class));
        rng::shuffle(&mut class_rng, &mut shuffled);

        let (n_train, n_val) = if n >= rule.small_class_threshold {
            (rule.train_per_class, rule.val_per_class)
        } else {
            let half = n.div_ceil(2);
            let train = round_half_up(0.75 * half as f64).min(half);
            (train, half - train)
        };
        let train = shuffled[..n_train].to_vec();
        let val = shuffled[n_train..n_train + n_val].to_vec();
        let test = shuffled[n_train + n_val..].to_vec();
        per_class.insert(class, ClassSplit { train, val, test });
    }
    if per_class.is_empty() {
        return Err(Error::Dataset("label grid has no labeled pixels".into()));
    }
    Ok(SplitSpec { seed, per_class })
}

/// Adam with bias correction; β = (0.9, 0.999), ε = 1e-8. An optional
/// decoupled weight decay multiplies parameters by `1 − lr·wd` each step.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Per-parameter decay participation; empty means decay everything.
    pub decay_mask: Vec<bool>,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decay_mask: Vec::new(),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_weight_decay(lr: f64, weight_decay: f64, decay_mask: Vec<bool>) -> Self {
        Self {
            weight_decay,
            decay_mask,
            ..Self::new(lr)
        }
    }

    /// One update over every parameter; grads are ordered like the
    /// parameter list. Aborts on any non-finite gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>]) -> Result<(), Error> {
        debug_assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for (i, g) in grads.iter().enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { param_index: i });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - crate::math::exp(self.t as f64 * crate::math::ln(self.beta1));
        let bc2 = 1.0 - crate::math::exp(self.t as f64 * crate::math::ln(self.beta2));
        let decay = 1.0 - self.lr * self.weight_decay;
        for (i, ((param, grad), (m, v))) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .enumerate()
        {
            let decays = self.weight_decay != 0.0 && self.decay_mask.get(i).copied().unwrap_or(true);
            let data = param.data_mut();
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                if decays {
                    data[j] *= decay;
                }
                data[j] -= self.lr * m_hat / (crate::math::sqrt(v_hat) + self.eps);
            }
        }
        Ok(())
    }
}

/// Everything the training loop needs, including the paper-given defaults
/// (lr 0.001, 200 epochs, hidden 128, 3 clusters per class) and the
/// ablation switches.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub hidden: usize,
    pub state_dim: usize,
    pub expansion: usize,
    pub attn_dim: usize,
    pub spectral_group: usize,
    pub clusters_per_class: usize,
    /// EMA momentum γ.
    pub gamma: f64,
    /// Soft assignment temperature τ.
    pub tau: f64,
    /// Attention keep ratio ρ.
    pub rho: f64,
    /// Cluster loss weight λ.
    pub lambda: f64,
    /// Decoupled weight decay (0 disables it).
    pub weight_decay: f64,
    pub seed: u64,
    pub use_cluster_loss: bool,
    pub use_attention: bool,
    pub split_rule: SplitRule,
    pub layernorm_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            epochs: 200,
            hidden: 128,
            state_dim: 16,
            expansion: 2,
            attn_dim: 16,
            spectral_group: 16,
            clusters_per_class: 3,
            gamma: 0.9,
            tau: 1.0,
            rho: 1.0,
            lambda: 0.1,
            weight_decay: 0.0,
            seed: 0,
            use_cluster_loss: true,
            use_attention: true,
            split_rule: SplitRule::default(),
            layernorm_eps: 1e-5,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self, bands: usize, num_classes: u16) -> ModelConfig {
        ModelConfig {
            bands,
            num_classes,
            hidden: self.hidden,
            state_dim: self.state_dim,
            expansion: self.expansion,
            attn_dim: self.attn_dim,
            spectral_group: self.spectral_group,
            clusters_per_class: self.clusters_per_class,
            tau: self.tau,
            rho: self.rho,
            use_attention: self.use_attention,
            layernorm_eps: self.layernorm_eps,
        }
    }
}

/// Per-epoch scalar log record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    pub cluster_loss: f64,
    pub total: f64,
    pub val_oa: f64,
}

/// Whole-image trainer; owns the model, cluster state, and optimizer.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: ModelParams,
    pub cluster: ClusterState,
    pub adam: Adam,
    pub split: SplitSpec,
    pub epoch: usize,
    num_classes: u16,
    spectra: Tensor,
    tokens: SpectralTokens,
    labels: LabelGrid,
    train_labels: LabelGrid,
    targets: Vec<i64>,
    val_indices: Vec<usize>,
}

impl Trainer {
    /// Sets up training on an already-normalized cube.
    pub fn new(
        cube: &HsiCube,
        labels: &LabelGrid,
        num_classes: u16,
        cfg: TrainConfig,
    ) -> Result<Self, Error> {
        let split = make_splits(labels, cfg.split_rule, cfg.seed)?;
        let train_idx = split.train_indices();
        let train_labels = labels.masked_to(&train_idx);
        let targets = model::masked_targets(labels, &train_idx);
        let spectra = cube.spectra();
        let tokens = spectral_tokenize(cube, cfg.spectral_group)?;
        let mut model_rng = rng::substream(cfg.seed, 0x4d4f_4445); // "MODE"
        let params = ModelParams::init(cfg.model_config(cube.bands, num_classes), &mut model_rng)?;
        let cluster = ClusterState::new(
            num_classes,
            cfg.clusters_per_class,
            cfg.hidden,
            cfg.gamma,
            cube.num_pixels(),
        )?;
        let adam = Adam::with_weight_decay(cfg.lr, cfg.weight_decay, Vec::new());
        let val_indices = split.val_indices();
        Ok(Self {
            cfg,
            params,
            cluster,
            adam,
            split,
            epoch: 0,
            num_classes,
            spectra,
            tokens,
            labels: labels.clone(),
            train_labels,
            targets,
            val_indices,
        })
    }

    /// One full training step; returns the epoch's loss terms and the
    /// validation accuracy read off the learning pass.
    pub fn step(&mut self) -> Result<EpochRecord, Error> {
        // (1) statistics pass with the previous cluster map
        let prior = model::prior_from_state(&self.cluster, self.cfg.tau);
        let stats_pass = model::forward(
            &self.params,
            &ForwardInputs {
                spectra: &self.spectra,
                tokens: &self.tokens,
                cluster_map: &self.cluster.assignments,
                prior: &prior,
            },
        )?;
        let features = stats_pass
            .tape
            .value(stats_pass.spatial_features)
            .clone();
        drop(stats_pass);

        // (2) GT-guided grouping + EMA update, off-tape
        self.cluster
            .update_from_batch(&features, &self.train_labels, self.cfg.seed);

        // (3) fresh nearest-center assignment for every pixel
        self.cluster.assignments = self.cluster.assign_all(&features)?;

        // (4) learning pass with the new map
        let prior = model::prior_from_state(&self.cluster, self.cfg.tau);
        let mut pass = model::forward(
            &self.params,
            &ForwardInputs {
                spectra: &self.spectra,
                tokens: &self.tokens,
                cluster_map: &self.cluster.assignments,
                prior: &prior,
            },
        )?;

        // (5) total loss
        let ce = pass.tape.cross_entropy_mean(pass.logits, &self.targets)?;
        let ce_val = pass.tape.value(ce).item();
        let (total, cluster_val) = if self.cfg.use_cluster_loss {
            let (subset, _) = self.cluster.initialized_subset();
            let centers = pass.tape.leaf(subset);
            let assign =
                cluster::soft_assign(&mut pass.tape, pass.spatial_features, centers, self.cfg.tau)?;
            let lclu = cluster::cluster_loss(&mut pass.tape, pass.spatial_features, assign)?;
            let lclu_val = pass.tape.value(lclu).item();
            let scaled = pass.tape.scale(lclu, self.cfg.lambda);
            (pass.tape.add(ce, scaled)?, lclu_val)
        } else {
            (ce, 0.0)
        };
        let total_val = pass.tape.value(total).item();
        if !total_val.is_finite() {
            return Err(Error::NonFiniteLoss {
                ce: ce_val,
                cluster_term: cluster_val,
            });
        }

        // validation accuracy from this pass's logits
        let preds = model::argmax_rows(pass.tape.value(pass.logits));
        let val_oa = subset_accuracy(&preds, &self.labels, &self.val_indices);

        // (6) backward + optimizer update
        pass.tape.backward(total)?;
        let grads: Vec<Vec<f64>> = pass
            .param_leaves
            .iter()
            .map(|&id| match pass.tape.grad(id) {
                Some(g) => g.to_vec(),
                None => vec![0.0; pass.tape.value(id).numel()],
            })
            .collect();
        drop(pass);
        let mut tensors = self.params.tensors_mut();
        self.adam.step(&mut tensors, &grads)?;

        self.epoch += 1;
        Ok(EpochRecord {
            epoch: self.epoch,
            ce: ce_val,
            cluster_loss: cluster_val,
            total: total_val,
            val_oa,
        })
    }

    /// Runs the configured number of epochs, invoking `on_epoch` after
    /// each step.
    pub fn run(
        &mut self,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<Vec<EpochRecord>, Error> {
        let mut records = Vec::with_capacity(self.cfg.epochs);
        for _ in 0..self.cfg.epochs {
            let rec = self.step()?;
            on_epoch(&rec);
            records.push(rec);
        }
        Ok(records)
    }

    /// Test-split metrics for the current model.
    pub fn evaluate(&self) -> Result<Metrics, Error> {
        evaluate(
            &self.params,
            &self.cluster,
            &self.spectra,
            &self.tokens,
            &self.labels,
            &self.split,
            self.num_classes,
        )
    }

    /// Whole-image prediction map (0-based classes).
    pub fn predict(&self) -> Result<Vec<usize>, Error> {
        model::predict(&self.params, &self.cluster, &self.spectra, &self.tokens)
    }
}

fn subset_accuracy(preds: &[usize], labels: &LabelGrid, indices: &[usize]) -> f64 {
    if indices.is_empty() {
        return 0.0;
    }
    let correct = indices
        .iter()
        .filter(|&&i| labels.flat()[i] as usize == preds[i] + 1)
        .count();
    correct as f64 / indices.len() as f64
}

/// Whole-image evaluation over the test split.
pub fn evaluate(
    params: &ModelParams,
    state: &ClusterState,
    spectra: &Tensor,
    tokens: &SpectralTokens,
    labels: &LabelGrid,
    split: &SplitSpec,
    num_classes: u16,
) -> Result<Metrics, Error> {
    let preds = model::predict(params, state, spectra, tokens)?;
    let mut confusion = ConfusionMatrix::new(num_classes as usize);
    for &i in &split.test_indices() {
        let truth = labels.flat()[i] as usize - 1;
        confusion.record(truth, preds[i]);
    }
    Ok(compute_metrics(confusion))
}

/// Nearest-class-mean baseline: class means over the train split, test
/// pixels classified by nearest mean. Returns test overall accuracy.
pub fn nearest_mean_baseline(spectra: &Tensor, split: &SplitSpec) -> f64 {
    let bands = spectra.shape()[1];
    let mut means: BTreeMap<u16, Vec<f64>> = BTreeMap::new();
    for (&class, cs) in &split.per_class {
        let mut mean = vec![0.0; bands];
        for &i in &cs.train {
            for (m, &v) in mean.iter_mut().zip(spectra.row(i)) {
                *m += v;
            }
        }
        let n = cs.train.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        means.insert(class, mean);
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for (&class, cs) in &split.per_class {
        for &i in &cs.test {
            let row = spectra.row(i);
            let mut best_class = 0u16;
            let mut best_d = f64::INFINITY;
            for (&c, mean) in &means {
                let mut acc = 0.0;
                for (x, m) in row.iter().zip(mean) {
                    let d = x - m;
                    acc += d * d;
                }
                if acc < best_d {
                    best_d = acc;
                    best_class = c;
                }
            }
            if best_class == class {
                correct += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}
