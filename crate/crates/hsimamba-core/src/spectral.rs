//! Spectral branch: every pixel's reflectance curve becomes a short
//! sequence of band-group tokens scanned by a shared block, and the final
//! scan state summarizes the spectrum.

use alloc::vec;

use crate::data::HsiCube;
use crate::error::Error;
use crate::ssm::{self, SsmLeaves};
use crate::tensor::{Tape, Tensor, TensorId};

/// Pixel-wise spectral tokens: `[H·W, N, G]` with `N = ⌈C/G⌉`; when `G`
/// does not divide `C` the last group is zero-padded on the right.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralTokens {
    pub tokens: Tensor,
    pub bands: usize,
    pub group: usize,
}

impl SpectralTokens {
    pub fn num_pixels(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// Number of zero-padded tail slots in the final group.
    pub fn padding(&self) -> usize {
        self.num_tokens() * self.group - self.bands
    }
}

/// Splits each pixel's spectrum into contiguous groups of `group` bands,
/// band-ascending. Errors when the group width exceeds the band count.
pub fn spectral_tokenize(cube: &HsiCube, group: usize) -> Result<SpectralTokens, Error> {
    if group < 1 {
        return Err(Error::Config("spectral group width must be >= 1".into()));
    }
    if group > cube.bands {
        return Err(Error::Config(alloc::format!(
            "spectral group width {group} exceeds band count {}",
            cube.bands
        )));
    }
    let pixels = cube.num_pixels();
    let n = cube.bands.div_ceil(group);
    let mut data = vec![0.0; pixels * n * group];
    for row in 0..cube.height {
        for col in 0..cube.width {
            let p = row * cube.width + col;
            for b in 0..cube.bands {
                data[(p * n + b / group) * group + b % group] = cube.get(b, row, col);
            }
        }
    }
    Ok(SpectralTokens {
        tokens: Tensor::new(vec![pixels, n, group], data).expect("token shape"),
        bands: cube.bands,
        group,
    })
}

/// Inverse of [`spectral_tokenize`]: recovers the `[H·W, C]` spectra with
/// the padding stripped, bit-exact.
pub fn spectral_detokenize(tokens: &SpectralTokens) -> Tensor {
    let pixels = tokens.num_pixels();
    let n = tokens.num_tokens();
    let g = tokens.group;
    let c = tokens.bands;
    let mut out = vec![0.0; pixels * c];
    let data = tokens.tokens.data();
    for p in 0..pixels {
        for b in 0..c {
            out[p * c + b] = data[(p * n + b / g) * g + b % g];
        }
    }
    Tensor::new(vec![pixels, c], out).expect("detokenize shape")
}

/// Scans each pixel's token sequence and projects the final state to the
/// shared feature width: `[H·W, N, G] → [H·W, D]`.
pub fn spectral_pass(
    tape: &mut Tape,
    tokens: TensorId,
    embed: TensorId,
    block: &SsmLeaves,
    out_proj: TensorId,
) -> Result<TensorId, Error> {
    let embedded = tape.matmul(tokens, embed)?;
    let scanned = ssm::ssm_forward(tape, embedded, block)?;
    let last = tape.last_token(scanned)?;
    Ok(tape.matmul(last, out_proj)?)
}

/// Additive fusion of the two branch views followed by normalization and
/// a learned projection.
pub fn fuse(
    tape: &mut Tape,
    y_spatial: TensorId,
    y_spectral: TensorId,
    norm: (TensorId, TensorId),
    proj: TensorId,
    eps: f64,
) -> Result<TensorId, Error> {
    let (a, b) = (
        tape.value(y_spatial).shape().to_vec(),
        tape.value(y_spectral).shape().to_vec(),
    );
    if a != b {
        return Err(Error::ShapeMismatch {
            what: "fuse",
            lhs: a,
            rhs: b,
        });
    }
    let summed = tape.add(y_spatial, y_spectral)?;
    let normed = tape.layernorm(summed, norm.0, norm.1, eps)?;
    Ok(tape.matmul(normed, proj)?)
}
