//! Binary PPM (P6) and PGM (P5) emission for classification maps, plus a
//! small PGM reader for round-trip checks.

use std::path::Path;

use thiserror::Error;

use crate::container::write_atomic;

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("class {class} has no palette entry ({palette} available)")]
    MissingPaletteEntry { class: usize, palette: usize },
    #[error("PGM stores one byte per pixel; class {class} exceeds 255")]
    ClassOutOfByteRange { class: usize },
    #[error("not a binary PGM: {0}")]
    BadPgm(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Default 16-entry class palette (index 0 = class 1). Unlabeled pixels
/// are always black.
pub const DEFAULT_PALETTE: [[u8; 3]; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
];

/// Encodes a class map (0 = unlabeled → black, c ≥ 1 → `palette[c-1]`)
/// as binary PPM with the exact header `P6\n{W} {H}\n255\n`.
pub fn encode_ppm(
    map: &[u16],
    width: usize,
    height: usize,
    palette: &[[u8; 3]],
) -> Result<Vec<u8>, PnmError> {
    assert_eq!(map.len(), width * height);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for &c in map {
        let rgb = if c == 0 {
            [0, 0, 0]
        } else {
            *palette
                .get(c as usize - 1)
                .ok_or(PnmError::MissingPaletteEntry {
                    class: c as usize,
                    palette: palette.len(),
                })?
        };
        out.extend_from_slice(&rgb);
    }
    Ok(out)
}

/// Encodes raw class indices as binary PGM (`P5\n{W} {H}\n255\n`).
pub fn encode_pgm(map: &[u16], width: usize, height: usize) -> Result<Vec<u8>, PnmError> {
    assert_eq!(map.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    for &c in map {
        if c > 255 {
            return Err(PnmError::ClassOutOfByteRange { class: c as usize });
        }
        out.push(c as u8);
    }
    Ok(out)
}

pub fn write_map(
    path: &Path,
    map: &[u16],
    width: usize,
    height: usize,
    palette: &[[u8; 3]],
) -> Result<(), PnmError> {
    let bytes = encode_ppm(map, width, height, palette)?;
    write_atomic(path, &bytes)?;
    Ok(())
}

pub fn write_labels(path: &Path, map: &[u16], width: usize, height: usize) -> Result<(), PnmError> {
    let bytes = encode_pgm(map, width, height)?;
    write_atomic(path, &bytes)?;
    Ok(())
}

/// Parses a binary PGM produced by [`encode_pgm`].
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u16>), PnmError> {
    let header_err = |m: &str| PnmError::BadPgm(m.to_string());
    let mut fields = Vec::new();
    let mut at = 0usize;
    // magic + three whitespace-separated header fields
    while fields.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(header_err("unexpected end of header"));
        }
        fields.push(
            std::str::from_utf8(&bytes[start..at])
                .map_err(|_| header_err("non-ASCII header"))?
                .to_string(),
        );
    }
    if fields[0] != "P5" {
        return Err(header_err("missing P5 magic"));
    }
    let width: usize = fields[1].parse().map_err(|_| header_err("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| header_err("bad height"))?;
    if fields[3] != "255" {
        return Err(header_err("maxval must be 255"));
    }
    at += 1; // single whitespace after maxval
    let data = &bytes[at..];
    if data.len() != width * height {
        return Err(header_err("pixel payload length mismatch"));
    }
    Ok((width, height, data.iter().map(|&b| b as u16).collect()))
}
