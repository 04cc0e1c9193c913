//! Full network assembly: input embedding, cluster-guided spatial branch,
//! spectral branch, fusion, and classifier head.
//!
//! The model is stateless between passes; each call to [`forward`] builds
//! a fresh tape from the owned parameter tensors. Cluster routing (the map
//! `M` and the attention prior) is provided by the caller, which keeps the
//! clustering machinery's statistics updates outside the graph.

use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{AttnLeaves, AttnParams};
use crate::cluster::ClusterState;
use crate::data::LabelGrid;
use crate::error::Error;
use crate::rng::{self, DetRng};
use crate::spatial::{self, PriorSpec};
use crate::spectral::{self, SpectralTokens};
use crate::ssm::{SsmDims, SsmLeaves, SsmParams};
use crate::tensor::{Tape, Tensor, TensorId};

/// Architecture hyperparameters (shapes and switches, no training state).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Input band count C.
    pub bands: usize,
    pub num_classes: u16,
    /// Shared feature width D.
    pub hidden: usize,
    /// SSM state dimension S per channel.
    pub state_dim: usize,
    /// SSM expansion factor E.
    pub expansion: usize,
    /// Attention projection width d.
    pub attn_dim: usize,
    /// Spectral band-group width G.
    pub spectral_group: usize,
    pub clusters_per_class: usize,
    /// Soft assignment temperature τ.
    pub tau: f64,
    /// Token keep ratio ρ for the attention filter.
    pub rho: f64,
    pub use_attention: bool,
    pub layernorm_eps: f64,
}

impl ModelConfig {
    pub fn num_clusters(&self) -> usize {
        self.num_classes as usize * self.clusters_per_class
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.hidden == 0 || self.state_dim == 0 || self.expansion == 0 || self.attn_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("at least one class is required".into()));
        }
        if self.clusters_per_class == 0 {
            return Err(Error::Config("clusters per class must be >= 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(alloc::format!(
                "soft assignment temperature must be > 0, got {}",
                self.tau
            )));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(alloc::format!(
                "keep ratio must be in (0, 1], got {}",
                self.rho
            )));
        }
        Ok(())
    }
}

/// Affine normalization parameters over one feature width.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    pub fn init(dim: usize) -> Self {
        Self {
            gain: Tensor::full(vec![dim], 1.0),
            bias: Tensor::zeros(vec![dim]),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gain, &mut self.bias]
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.gain, &self.bias]
    }

    fn leaves(&self, tape: &mut Tape, reg: &mut Vec<TensorId>) -> (TensorId, TensorId) {
        let g = tape.leaf(self.gain.clone());
        let b = tape.leaf(self.bias.clone());
        reg.extend([g, b]);
        (g, b)
    }
}

/// All learnable parameters of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub embed_norm: LayerNormParams, // over C
    pub embed_w: Tensor,             // C × D
    pub embed_b: Tensor,             // D
    pub local_ssm: Vec<SsmParams>,   // K blocks
    pub local_attn: Vec<AttnParams>, // K scorers
    pub global_ssm: SsmParams,
    pub pre_global_norm: LayerNormParams,
    pub post_global_norm: LayerNormParams,
    pub spectral_embed: Tensor, // G × D
    pub spectral_ssm: SsmParams,
    pub spectral_out: Tensor, // D × D
    pub fuse_norm: LayerNormParams,
    pub fuse_w: Tensor, // D × D
    pub head_w: Tensor, // D × num_classes
    pub head_b: Tensor, // num_classes
}

impl ModelParams {
    pub fn init(cfg: ModelConfig, rng: &mut DetRng) -> Result<Self, Error> {
        cfg.validate()?;
        let (c, d) = (cfg.bands, cfg.hidden);
        let k = cfg.num_clusters();
        let dims = SsmDims::new(d, cfg.expansion, cfg.state_dim);
        let local_ssm = (0..k).map(|_| SsmParams::init(dims, rng)).collect();
        let local_attn = (0..k)
            .map(|_| AttnParams::init(d, cfg.attn_dim, rng))
            .collect();
        let classes = cfg.num_classes as usize;
        Ok(Self {
            embed_norm: LayerNormParams::init(c),
            embed_w: Tensor::new(vec![c, d], rng::fan_in_uniform(rng, c, c * d)).unwrap(),
            embed_b: Tensor::zeros(vec![d]),
            local_ssm,
            local_attn,
            global_ssm: SsmParams::init(dims, rng),
            pre_global_norm: LayerNormParams::init(d),
            post_global_norm: LayerNormParams::init(d),
            spectral_embed: Tensor::new(
                vec![cfg.spectral_group, d],
                rng::fan_in_uniform(rng, cfg.spectral_group, cfg.spectral_group * d),
            )
            .unwrap(),
            spectral_ssm: SsmParams::init(dims, rng),
            spectral_out: Tensor::new(vec![d, d], rng::fan_in_uniform(rng, d, d * d)).unwrap(),
            fuse_norm: LayerNormParams::init(d),
            fuse_w: Tensor::new(vec![d, d], rng::fan_in_uniform(rng, d, d * d)).unwrap(),
            head_w: Tensor::new(vec![d, classes], rng::fan_in_uniform(rng, d, d * classes))
                .unwrap(),
            head_b: Tensor::zeros(vec![classes]),
            cfg,
        })
    }

    /// Every parameter tensor in the fixed global order used by the
    /// optimizer, the checkpoint format, and per-pass leaf registration.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        out.extend(self.embed_norm.tensors_mut());
        out.push(&mut self.embed_w);
        out.push(&mut self.embed_b);
        for block in &mut self.local_ssm {
            out.extend(block.tensors_mut());
        }
        for attn in &mut self.local_attn {
            out.extend(attn.tensors_mut());
        }
        out.extend(self.global_ssm.tensors_mut());
        out.extend(self.pre_global_norm.tensors_mut());
        out.extend(self.post_global_norm.tensors_mut());
        out.push(&mut self.spectral_embed);
        out.extend(self.spectral_ssm.tensors_mut());
        out.push(&mut self.spectral_out);
        out.extend(self.fuse_norm.tensors_mut());
        out.push(&mut self.fuse_w);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        out.extend(self.embed_norm.tensors());
        out.push(&self.embed_w);
        out.push(&self.embed_b);
        for block in &self.local_ssm {
            out.extend(block.tensors());
        }
        for attn in &self.local_attn {
            out.extend(attn.tensors());
        }
        out.extend(self.global_ssm.tensors());
        out.extend(self.pre_global_norm.tensors());
        out.extend(self.post_global_norm.tensors());
        out.push(&self.spectral_embed);
        out.extend(self.spectral_ssm.tensors());
        out.push(&self.spectral_out);
        out.extend(self.fuse_norm.tensors());
        out.push(&self.fuse_w);
        out.push(&self.head_w);
        out.push(&self.head_b);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Overwrites every parameter from a flat tensor list in
    /// `tensors_mut` order (checkpoint restore).
    pub fn assign_tensors(&mut self, values: &[Tensor]) -> Result<(), Error> {
        let mut slots = self.tensors_mut();
        if slots.len() != values.len() {
            return Err(Error::Config(alloc::format!(
                "checkpoint holds {} tensors, model has {}",
                values.len(),
                slots.len()
            )));
        }
        for (slot, value) in slots.iter_mut().zip(values) {
            if slot.shape() != value.shape() {
                return Err(Error::ShapeMismatch {
                    what: "checkpoint tensor",
                    lhs: value.shape().to_vec(),
                    rhs: slot.shape().to_vec(),
                });
            }
            **slot = value.clone();
        }
        Ok(())
    }

    /// Weight-decay mask aligned with `tensors_mut`: projection matrices
    /// decay, while normalization affines, biases, gates, and the SSM
    /// dynamics parameters do not.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut out = Vec::new();
        out.extend([false, false]); // embed norm
        out.push(true); // embed_w
        out.push(false); // embed_b
        for _ in &self.local_ssm {
            out.extend(SsmParams::decay_flags());
        }
        for _ in &self.local_attn {
            out.extend(AttnParams::decay_flags());
        }
        out.extend(SsmParams::decay_flags()); // global
        out.extend([false, false, false, false]); // pre/post global norms
        out.push(true); // spectral_embed
        out.extend(SsmParams::decay_flags());
        out.push(true); // spectral_out
        out.extend([false, false]); // fuse norm
        out.push(true); // fuse_w
        out.push(true); // head_w
        out.push(false); // head_b
        out
    }

    fn leaves(&self, tape: &mut Tape, reg: &mut Vec<TensorId>) -> ModelLeaves {
        let embed_norm = self.embed_norm.leaves(tape, reg);
        let embed_w = tape.leaf(self.embed_w.clone());
        let embed_b = tape.leaf(self.embed_b.clone());
        reg.extend([embed_w, embed_b]);
        let local_ssm: Vec<SsmLeaves> =
            self.local_ssm.iter().map(|p| p.leaves(tape, reg)).collect();
        let local_attn: Vec<AttnLeaves> =
            self.local_attn.iter().map(|p| p.leaves(tape, reg)).collect();
        let global_ssm = self.global_ssm.leaves(tape, reg);
        let pre_global_norm = self.pre_global_norm.leaves(tape, reg);
        let post_global_norm = self.post_global_norm.leaves(tape, reg);
        let spectral_embed = tape.leaf(self.spectral_embed.clone());
        reg.push(spectral_embed);
        let spectral_ssm = self.spectral_ssm.leaves(tape, reg);
        let spectral_out = tape.leaf(self.spectral_out.clone());
        reg.push(spectral_out);
        let fuse_norm = self.fuse_norm.leaves(tape, reg);
        let fuse_w = tape.leaf(self.fuse_w.clone());
        let head_w = tape.leaf(self.head_w.clone());
        let head_b = tape.leaf(self.head_b.clone());
        reg.extend([fuse_w, head_w, head_b]);
        ModelLeaves {
            embed_norm,
            embed_w,
            embed_b,
            local_ssm,
            local_attn,
            global_ssm,
            pre_global_norm,
            post_global_norm,
            spectral_embed,
            spectral_ssm,
            spectral_out,
            fuse_norm,
            fuse_w,
            head_w,
            head_b,
        }
    }
}

struct ModelLeaves {
    embed_norm: (TensorId, TensorId),
    embed_w: TensorId,
    embed_b: TensorId,
    local_ssm: Vec<SsmLeaves>,
    local_attn: Vec<AttnLeaves>,
    global_ssm: SsmLeaves,
    pre_global_norm: (TensorId, TensorId),
    post_global_norm: (TensorId, TensorId),
    spectral_embed: TensorId,
    spectral_ssm: SsmLeaves,
    spectral_out: TensorId,
    fuse_norm: (TensorId, TensorId),
    fuse_w: TensorId,
    head_w: TensorId,
    head_b: TensorId,
}

/// Inputs for one whole-image pass.
pub struct ForwardInputs<'a> {
    /// Normalized reflectance `[L, C]`, raster order.
    pub spectra: &'a Tensor,
    /// Spectral tokens of the same cube.
    pub tokens: &'a SpectralTokens,
    /// Cluster map `M`, one entry per token.
    pub cluster_map: &'a [usize],
    /// Attention prior source for this pass.
    pub prior: &'a PriorSpec,
}

/// A completed forward pass: the tape plus handles into it.
pub struct ForwardPass {
    pub tape: Tape,
    /// `[L, num_classes]` classifier logits.
    pub logits: TensorId,
    /// Spatial-branch output `Y_spa` (pre-fusion); these are the features
    /// the clustering module reads and the cluster loss differentiates.
    pub spatial_features: TensorId,
    /// Parameter leaf ids in `tensors_mut` order, for gradient collection.
    pub param_leaves: Vec<TensorId>,
}

pub fn forward(params: &ModelParams, inputs: &ForwardInputs) -> Result<ForwardPass, Error> {
    let cfg = &params.cfg;
    let l = inputs.spectra.shape()[0];
    if inputs.cluster_map.len() != l {
        return Err(Error::ShapeMismatch {
            what: "cluster map",
            lhs: vec![inputs.cluster_map.len()],
            rhs: vec![l],
        });
    }
    let mut tape = Tape::new();
    let mut reg = Vec::new();
    let leaves = params.leaves(&mut tape, &mut reg);

    // embedding: per-token band normalization then projection to D
    let x_raw = tape.leaf(inputs.spectra.clone());
    let x_norm = tape.layernorm(x_raw, leaves.embed_norm.0, leaves.embed_norm.1, cfg.layernorm_eps)?;
    let x_proj = tape.matmul(x_norm, leaves.embed_w)?;
    let x = tape.add(x_proj, leaves.embed_b)?;

    // cluster-guided spatial branch
    let part = spatial::partition(inputs.cluster_map, cfg.num_clusters())?;
    let attn = if cfg.use_attention {
        Some((leaves.local_attn.as_slice(), inputs.prior))
    } else {
        None
    };
    let locals = spatial::local_pass(&mut tape, x, &part, &leaves.local_ssm, attn, cfg.rho)?;
    let y_spa = spatial::reconstruct_and_global(
        &mut tape,
        x,
        &locals,
        &part,
        &leaves.global_ssm,
        leaves.pre_global_norm,
        leaves.post_global_norm,
        cfg.layernorm_eps,
    )?;

    // spectral branch
    let tokens = tape.leaf(inputs.tokens.tokens.clone());
    let y_spe = spectral::spectral_pass(
        &mut tape,
        tokens,
        leaves.spectral_embed,
        &leaves.spectral_ssm,
        leaves.spectral_out,
    )?;

    // fusion and head
    let fused = spectral::fuse(
        &mut tape,
        y_spa,
        y_spe,
        leaves.fuse_norm,
        leaves.fuse_w,
        cfg.layernorm_eps,
    )?;
    let scores = tape.matmul(fused, leaves.head_w)?;
    let logits = tape.add(scores, leaves.head_b)?;

    Ok(ForwardPass {
        tape,
        logits,
        spatial_features: y_spa,
        param_leaves: reg,
    })
}

/// Builds the attention prior for the current cluster state: the
/// soft-assignment prior once any center exists, a constant before that.
pub fn prior_from_state(state: &ClusterState, tau: f64) -> PriorSpec {
    if !state.any_initialized() {
        return PriorSpec::Uniform(0.5);
    }
    let (centers, global_idx) = state.initialized_subset();
    let mut column_of = vec![None; state.num_centers()];
    for (col, &k) in global_idx.iter().enumerate() {
        column_of[k] = Some(col);
    }
    PriorSpec::Centers {
        centers,
        column_of,
        tau,
    }
}

/// Whole-image class prediction (0-based classes).
///
/// Self-contained two-pass protocol: a first pass with the stored
/// assignment map produces routing features, the map is refreshed by
/// nearest-center assignment, and a second pass yields the logits.
pub fn predict(
    params: &ModelParams,
    state: &ClusterState,
    spectra: &Tensor,
    tokens: &SpectralTokens,
) -> Result<Vec<usize>, Error> {
    let tau = params.cfg.tau;
    let prior = prior_from_state(state, tau);
    let pass1 = forward(
        params,
        &ForwardInputs {
            spectra,
            tokens,
            cluster_map: &state.assignments,
            prior: &prior,
        },
    )?;
    let features = pass1.tape.value(pass1.spatial_features).clone();
    drop(pass1);

    let cluster_map = if state.any_initialized() {
        state.assign_all(&features)?
    } else {
        state.assignments.clone()
    };
    let pass2 = forward(
        params,
        &ForwardInputs {
            spectra,
            tokens,
            cluster_map: &cluster_map,
            prior: &prior,
        },
    )?;
    let logits = pass2.tape.value(pass2.logits);
    Ok(argmax_rows(logits))
}

/// Row-wise argmax; ties go to the lower class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (c, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Cross-entropy targets for training: 0-based class for pixels in the
/// supervision set, -1 everywhere else.
pub fn masked_targets(labels: &LabelGrid, keep: &[usize]) -> Vec<i64> {
    let mut targets = vec![-1i64; labels.flat().len()];
    for &i in keep {
        let l = labels.flat()[i];
        if l > 0 {
            targets[i] = l as i64 - 1;
        }
    }
    targets
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthSpec};
    use crate::rng::seeded;
    use crate::spectral::spectral_tokenize;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            bands: 4,
            num_classes: 2,
            hidden: 6,
            state_dim: 2,
            expansion: 2,
            attn_dim: 3,
            spectral_group: 2,
            clusters_per_class: 2,
            tau: 1.0,
            rho: 1.0,
            use_attention: true,
            layernorm_eps: 1e-5,
        }
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let spec = SynthSpec {
            height: 4,
            width: 4,
            bands: 4,
            classes: 2,
            noise_sigma: 0.2,
            gain_jitter: 0.1,
            seed: 9,
        };
        let (mut cube, _labels, _) = generate_synthetic(&spec);
        cube.normalize_bands();
        let spectra = cube.spectra();
        let tokens = spectral_tokenize(&cube, 2).unwrap();
        let mut rng = seeded(7);
        let params = ModelParams::init(tiny_config(), &mut rng).unwrap();
        let m = vec![0usize; 16];
        let prior = PriorSpec::Uniform(0.5);
        let inputs = ForwardInputs {
            spectra: &spectra,
            tokens: &tokens,
            cluster_map: &m,
            prior: &prior,
        };
        let run = || {
            let fp = forward(&params, &inputs).unwrap();
            (
                fp.tape.value(fp.logits).shape().to_vec(),
                fp.tape.value(fp.logits).data().to_vec(),
                fp.tape.value(fp.spatial_features).shape().to_vec(),
            )
        };
        let (lsh, ldata, fsh) = run();
        assert_eq!(lsh, vec![16, 2]);
        assert_eq!(fsh, vec![16, 6]);
        let (_, ldata2, _) = run();
        assert_eq!(ldata, ldata2);
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut cfg = tiny_config();
        cfg.rho = 0.0;
        let mut rng = seeded(1);
        assert!(matches!(
            ModelParams::init(cfg, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn masked_targets_are_minus_one_off_split() {
        let labels = LabelGrid::new(1, 4, vec![1, 2, 0, 2]);
        let t = masked_targets(&labels, &[0, 3]);
        assert_eq!(t, vec![0, -1, -1, 1]);
    }

    #[test]
    fn decay_mask_aligns_with_parameter_list() {
        let mut rng = seeded(8);
        let params = ModelParams::init(tiny_config(), &mut rng).unwrap();
        assert_eq!(params.decay_mask().len(), params.tensors().len());
    }
}
