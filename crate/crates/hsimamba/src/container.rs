//! HSIB v1 — the on-disk hyperspectral container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      "HSIB"            4 bytes
//! version    u16               (= 1)
//! height     u32
//! width      u32
//! bands      u32
//! classes    u16
//! reserved   16 zero bytes
//! cube       bands·height·width f32, band-major
//! labels     height·width u16  (0 = unlabeled)
//! names      classes × (u16 length + UTF-8 bytes)
//! ```
//!
//! The file length is fully determined by the header; any mismatch is
//! reported with the offending byte offset.

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use hsimamba_core::data::{HsiCube, LabelGrid};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"HSIB";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 36;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic at byte 0: expected \"HSIB\"")]
    BadMagic,
    #[error("unsupported container version {found} (supported: {VERSION})")]
    UnsupportedVersion { found: u16 },
    #[error("file truncated: need at least {expected} bytes, found {actual} (at byte offset {offset})")]
    Truncated {
        expected: usize,
        actual: usize,
        offset: usize,
    },
    #[error("trailing garbage: expected exactly {expected} bytes, found {actual}")]
    TrailingBytes { expected: usize, actual: usize },
    #[error("label {label} exceeds class count {classes} (at byte offset {offset})")]
    LabelOverflow {
        label: u16,
        classes: u16,
        offset: usize,
    },
    #[error("class name {index} is not valid UTF-8 (at byte offset {offset})")]
    BadName { index: usize, offset: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Raw container contents, exactly as stored (no preprocessing).
#[derive(Clone, Debug, PartialEq)]
pub struct HsiContainer {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub num_classes: u16,
    /// Band-major reflectance, `bands·height·width` entries.
    pub cube: Vec<f32>,
    /// Raster labels, 0 = unlabeled.
    pub labels: Vec<u16>,
    pub class_names: Vec<String>,
}

impl HsiContainer {
    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    /// Converts into the training representation: per-band min-max
    /// normalization to [0, 1] (the documented preprocessing step).
    pub fn into_dataset(self) -> (HsiCube, LabelGrid, Vec<String>) {
        let mut cube = HsiCube::from_band_major(
            self.height,
            self.width,
            self.bands,
            self.cube.iter().map(|&v| v as f64).collect(),
        );
        cube.normalize_bands();
        let labels = LabelGrid::new(self.height, self.width, self.labels);
        (cube, labels, self.class_names)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            HEADER_LEN + self.cube.len() * 4 + self.labels.len() * 2,
        );
        out.extend_from_slice(MAGIC);
        push_u16(&mut out, VERSION);
        push_u32(&mut out, self.height as u32);
        push_u32(&mut out, self.width as u32);
        push_u32(&mut out, self.bands as u32);
        push_u16(&mut out, self.num_classes);
        out.extend_from_slice(&[0u8; 16]);
        for &v in &self.cube {
            let mut buf = [0u8; 4];
            LittleEndian::write_f32(&mut buf, v);
            out.extend_from_slice(&buf);
        }
        for &l in &self.labels {
            push_u16(&mut out, l);
        }
        for name in &self.class_names {
            push_u16(&mut out, name.len() as u16);
            out.extend_from_slice(name.as_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ContainerError> {
        if bytes.len() < HEADER_LEN {
            return Err(ContainerError::Truncated {
                expected: HEADER_LEN,
                actual: bytes.len(),
                offset: bytes.len(),
            });
        }
        if &bytes[0..4] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let version = LittleEndian::read_u16(&bytes[4..6]);
        if version != VERSION {
            return Err(ContainerError::UnsupportedVersion { found: version });
        }
        let height = LittleEndian::read_u32(&bytes[6..10]) as usize;
        let width = LittleEndian::read_u32(&bytes[10..14]) as usize;
        let bands = LittleEndian::read_u32(&bytes[14..18]) as usize;
        let num_classes = LittleEndian::read_u16(&bytes[18..20]);

        let cube_len = bands * height * width;
        let pixels = height * width;
        let fixed_end = HEADER_LEN + cube_len * 4 + pixels * 2;
        if bytes.len() < fixed_end {
            return Err(ContainerError::Truncated {
                expected: fixed_end,
                actual: bytes.len(),
                offset: bytes.len(),
            });
        }

        let mut cube = Vec::with_capacity(cube_len);
        let mut at = HEADER_LEN;
        for _ in 0..cube_len {
            cube.push(LittleEndian::read_f32(&bytes[at..at + 4]));
            at += 4;
        }
        let mut labels = Vec::with_capacity(pixels);
        for _ in 0..pixels {
            let l = LittleEndian::read_u16(&bytes[at..at + 2]);
            if l > num_classes {
                return Err(ContainerError::LabelOverflow {
                    label: l,
                    classes: num_classes,
                    offset: at,
                });
            }
            labels.push(l);
            at += 2;
        }
        let mut class_names = Vec::with_capacity(num_classes as usize);
        for index in 0..num_classes as usize {
            if bytes.len() < at + 2 {
                return Err(ContainerError::Truncated {
                    expected: at + 2,
                    actual: bytes.len(),
                    offset: at,
                });
            }
            let len = LittleEndian::read_u16(&bytes[at..at + 2]) as usize;
            at += 2;
            if bytes.len() < at + len {
                return Err(ContainerError::Truncated {
                    expected: at + len,
                    actual: bytes.len(),
                    offset: at,
                });
            }
            let name = std::str::from_utf8(&bytes[at..at + len])
                .map_err(|_| ContainerError::BadName { index, offset: at })?
                .to_string();
            class_names.push(name);
            at += len;
        }
        if at != bytes.len() {
            return Err(ContainerError::TrailingBytes {
                expected: at,
                actual: bytes.len(),
            });
        }
        Ok(Self {
            height,
            width,
            bands,
            num_classes,
            cube,
            labels,
            class_names,
        })
    }
}

pub fn save_container(path: &Path, container: &HsiContainer) -> Result<(), ContainerError> {
    write_atomic(path, &container.encode())?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<HsiContainer, ContainerError> {
    let bytes = fs::read(path)?;
    HsiContainer::decode(&bytes)
}

/// Loads a container and applies the per-band normalization.
pub fn load_dataset(path: &Path) -> Result<(HsiCube, LabelGrid, Vec<String>), ContainerError> {
    Ok(read_container(path)?.into_dataset())
}

/// Builds a container from in-memory training data (f64 → f32 cast).
pub fn container_from_parts(
    cube: &HsiCube,
    labels: &LabelGrid,
    class_names: &[String],
) -> HsiContainer {
    HsiContainer {
        height: cube.height,
        width: cube.width,
        bands: cube.bands,
        num_classes: class_names.len() as u16,
        cube: cube.band_major_data().iter().map(|&v| v as f32).collect(),
        labels: labels.flat().to_vec(),
        class_names: class_names.to_vec(),
    }
}

/// Writes via a temp file + rename so failures never leave a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp.partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

fn push_u16(out: &mut Vec<u8>, v: u16) {
    let mut buf = [0u8; 2];
    LittleEndian::write_u16(&mut buf, v);
    out.extend_from_slice(&buf);
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    let mut buf = [0u8; 4];
    LittleEndian::write_u32(&mut buf, v);
    out.extend_from_slice(&buf);
}
