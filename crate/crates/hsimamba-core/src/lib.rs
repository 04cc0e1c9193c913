//! Cluster-guided spatial-spectral state-space model for hyperspectral
//! image classification.
//!
//! The crate is a self-contained learning stack: a dense tensor engine with
//! reverse-mode automatic differentiation ([`tensor`]), a selective-scan
//! sequence block ([`ssm`]), prototype clustering with EMA center updates
//! ([`cluster`]), attention-driven token ordering ([`attention`]), the
//! spatial and spectral branches that compose them ([`spatial`],
//! [`spectral`]), and the training/evaluation harness ([`train`],
//! [`metrics`]).
//!
//! Everything here is pure computation over `alloc` collections; file
//! formats and the command line live in the companion `hsimamba` crate.
//!
//! Gradients come from a define-by-run tape:
//!
//! ```
//! use hsimamba_core::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
//! let squared = tape.mul(x, x).unwrap();
//! let loss = tape.sum(squared);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
//! ```
//!
//! Training runs whole-image: see [`train::Trainer`].
//!
//! ```
//! use hsimamba_core::data::{generate_synthetic, SynthSpec};
//! use hsimamba_core::train::{TrainConfig, Trainer};
//!
//! let (mut cube, labels, _) = generate_synthetic(&SynthSpec {
//!     height: 8, width: 8, bands: 4, classes: 2,
//!     noise_sigma: 0.1, gain_jitter: 0.1, seed: 1,
//! });
//! cube.normalize_bands();
//! let cfg = TrainConfig {
//!     hidden: 8, state_dim: 2, attn_dim: 4, spectral_group: 2,
//!     clusters_per_class: 1, epochs: 2, ..TrainConfig::default()
//! };
//! let mut trainer = Trainer::new(&cube, &labels, 2, cfg).unwrap();
//! let record = trainer.step().unwrap();
//! assert!(record.total.is_finite());
//! ```

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attention;
pub mod cluster;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod math;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod spatial;
pub mod spectral;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use tensor::{Tape, Tensor, TensorError, TensorId};
