//! Portable FloatMap reading and writing.
//!
//! Layout: a text header `PF` (color) or `Pf` (grayscale), width and height,
//! then a scale whose sign encodes endianness (negative means little-endian),
//! followed by rows of raw `f32` samples stored bottom-to-top. Writing always
//! uses little-endian with scale `-1.0`; a write/read round trip preserves
//! float bits exactly.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::sphere::DirectionGrid;

use super::EnvironmentMap;

/// A decoded PFM payload with rows in top-down order.
#[derive(Debug, Clone)]
pub struct PfmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major, channel-interleaved samples, top row first.
    pub data: Vec<f32>,
}

fn is_pfm_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r')
}

/// Pulls the next whitespace-delimited token starting at `*pos`.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize, path: &Path) -> Result<&'a [u8]> {
    while *pos < bytes.len() && is_pfm_space(bytes[*pos]) {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !is_pfm_space(bytes[*pos]) {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format(path, "unexpected end of header"));
    }
    Ok(&bytes[start..*pos])
}

/// Reads any color or grayscale PFM file.
pub fn read_pfm_raw(path: impl AsRef<Path>) -> Result<PfmImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;

    let magic = next_token(&bytes, &mut pos, path)?;
    let channels = match magic {
        b"PF" => 3usize,
        b"Pf" => 1usize,
        other => {
            return Err(Error::format(
                path,
                format!("bad magic {:?}, expected PF or Pf", String::from_utf8_lossy(other)),
            ))
        }
    };
    let parse_dim = |tok: &[u8]| -> Option<usize> {
        std::str::from_utf8(tok).ok()?.parse::<usize>().ok()
    };
    let width = parse_dim(next_token(&bytes, &mut pos, path)?)
        .ok_or_else(|| Error::format(path, "unreadable width"))?;
    let height = parse_dim(next_token(&bytes, &mut pos, path)?)
        .ok_or_else(|| Error::format(path, "unreadable height"))?;
    if width == 0 || height == 0 {
        return Err(Error::format(path, "zero image dimension"));
    }
    let scale_tok = next_token(&bytes, &mut pos, path)?;
    let scale: f64 = std::str::from_utf8(scale_tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(path, "unreadable scale"))?;
    if scale == 0.0 {
        return Err(Error::format(path, "scale must be non-zero"));
    }
    let little_endian = scale < 0.0;
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !is_pfm_space(bytes[pos]) {
        return Err(Error::format(path, "missing separator before payload"));
    }
    pos += 1;

    let samples = width * height * channels;
    let need = samples * 4;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(Error::format(
            path,
            format!("payload holds {} bytes, expected {}", payload.len(), need),
        ));
    }

    // PFM rows run bottom-to-top; flip to top-down while decoding.
    let row_samples = width * channels;
    let mut data = vec![0f32; samples];
    for file_row in 0..height {
        let out_row = height - 1 - file_row;
        for s in 0..row_samples {
            let o = (file_row * row_samples + s) * 4;
            let raw: [u8; 4] = payload[o..o + 4].try_into().unwrap();
            let v = if little_endian {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
            data[out_row * row_samples + s] = v;
        }
    }
    Ok(PfmImage {
        width,
        height,
        channels,
        data,
    })
}

/// Reads a color PFM as an equirectangular environment map.
///
/// The image must be `PF` with width exactly twice the height, and every
/// sample must be finite and non-negative.
pub fn read_pfm(path: impl AsRef<Path>) -> Result<EnvironmentMap> {
    let path = path.as_ref();
    let img = read_pfm_raw(path)?;
    if img.channels != 3 {
        return Err(Error::format(path, "grayscale PFM is not an environment map"));
    }
    if img.width != 2 * img.height {
        return Err(Error::format(
            path,
            format!("not equirectangular: {}x{} (width must be 2x height)", img.width, img.height),
        ));
    }
    let grid = DirectionGrid::equirect(img.height)?;
    let mut rgb = DMatrix::zeros(3, grid.len());
    for idx in 0..grid.len() {
        for c in 0..3 {
            rgb[(c, idx)] = img.data[idx * 3 + c] as f64;
        }
    }
    EnvironmentMap::new(grid, rgb).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes an environment map as a little-endian color PFM.
pub fn write_pfm(map: &EnvironmentMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let h = map.height();
    let w = map.width();
    let mut out = Vec::with_capacity(32 + h * w * 12);
    out.extend_from_slice(format!("PF\n{} {}\n-1.0\n", w, h).as_bytes());
    for i in (0..h).rev() {
        for j in 0..w {
            let idx = map.grid().index(i, j);
            for c in 0..3 {
                let v = map.rgb()[(c, idx)] as f32;
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Independent minimal PFM decoder used as a cross-check oracle.
    ///
    /// Deliberately shares no code with `read_pfm_raw`: it slurps the file,
    /// splits the header with a regex-free scan and decodes rows in file
    /// (bottom-up) order.
    fn oracle_read(path: &Path) -> (usize, usize, Vec<f32>) {
        let bytes = std::fs::read(path).unwrap();
        let text = String::from_utf8_lossy(&bytes[..64.min(bytes.len())]).to_string();
        let mut parts = text.split_ascii_whitespace();
        assert_eq!(parts.next().unwrap(), "PF");
        let w: usize = parts.next().unwrap().parse().unwrap();
        let h: usize = parts.next().unwrap().parse().unwrap();
        let scale: f64 = parts.next().unwrap().parse().unwrap();
        assert!(scale < 0.0);
        // Header length: three newline-terminated lines.
        let mut newlines = 0;
        let mut offset = 0;
        for (i, b) in bytes.iter().enumerate() {
            if *b == b'\n' {
                newlines += 1;
                if newlines == 3 {
                    offset = i + 1;
                    break;
                }
            }
        }
        let mut vals = Vec::with_capacity(w * h * 3);
        for k in 0..w * h * 3 {
            let o = offset + k * 4;
            vals.push(f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()));
        }
        (w, h, vals)
    }

    fn temp_path(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("envfield-pfm-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn all_ones_round_trip_is_bit_exact() {
        let grid = DirectionGrid::equirect(2).unwrap();
        let map = EnvironmentMap::new(grid, DMatrix::from_element(3, 8, 1.0)).unwrap();
        let p = temp_path("ones.pfm");
        write_pfm(&map, &p).unwrap();
        let back = read_pfm(&p).unwrap();
        assert_eq!(back.rgb(), map.rgb());
    }

    #[test]
    fn random_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for h in [1usize, 2, 4, 7] {
            let grid = DirectionGrid::equirect(h).unwrap();
            let p = grid.len();
            // Start from f32 values so the f64 path is exactly representable.
            let rgb = DMatrix::from_fn(3, p, |_, _| rng.gen_range(0.0f32..100.0) as f64);
            let map = EnvironmentMap::new(grid, rgb).unwrap();
            let path = temp_path(&format!("rand{h}.pfm"));
            write_pfm(&map, &path).unwrap();
            let back = read_pfm(&path).unwrap();
            for (a, b) in map.rgb().iter().zip(back.rgb().iter()) {
                assert_eq!((*a as f32).to_bits(), (*b as f32).to_bits());
            }
        }
    }

    #[test]
    fn little_endian_payload_matches_independent_reader() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let grid = DirectionGrid::equirect(3).unwrap();
        let p = grid.len();
        let rgb = DMatrix::from_fn(3, p, |_, _| rng.gen_range(0.0f32..10.0) as f64);
        let map = EnvironmentMap::new(grid.clone(), rgb).unwrap();
        let path = temp_path("oracle.pfm");
        write_pfm(&map, &path).unwrap();

        let (w, h, vals) = oracle_read(&path);
        assert_eq!((w, h), (map.width(), map.height()));
        let ours = read_pfm(&path).unwrap();
        // Oracle keeps file (bottom-up) row order; compare accordingly.
        for file_row in 0..h {
            let img_row = h - 1 - file_row;
            for j in 0..w {
                for c in 0..3 {
                    let oracle_v = vals[(file_row * w + j) * 3 + c];
                    let ours_v = ours.rgb()[(c, grid.index(img_row, j))] as f32;
                    assert_eq!(oracle_v.to_bits(), ours_v.to_bits());
                }
            }
        }
    }

    #[test]
    fn big_endian_files_are_readable() {
        // Hand-built 1x1 grayscale file with positive scale (big-endian).
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&2.5f32.to_be_bytes());
        let path = temp_path("big.pfm");
        std::fs::write(&path, bytes).unwrap();
        let img = read_pfm_raw(&path).unwrap();
        assert_eq!(img.channels, 1);
        assert_eq!(img.data, vec![2.5]);
    }

    #[test]
    fn non_equirectangular_rejected() {
        let mut bytes = b"PF\n5 4\n-1.0\n".to_vec();
        for _ in 0..5 * 4 * 3 {
            bytes.extend_from_slice(&1.0f32.to_le_bytes());
        }
        let path = temp_path("wide.pfm");
        std::fs::write(&path, bytes).unwrap();
        let err = read_pfm(&path).unwrap_err();
        assert!(err.to_string().contains("not equirectangular"), "{err}");
    }

    #[test]
    fn truncated_payload_rejected() {
        let bytes = b"PF\n2 1\n-1.0\n\x00\x00".to_vec();
        let path = temp_path("short.pfm");
        std::fs::write(&path, bytes).unwrap();
        assert!(read_pfm(&path).is_err());
    }

    #[test]
    fn non_finite_pixels_rejected() {
        let mut bytes = b"PF\n2 1\n-1.0\n".to_vec();
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        for _ in 0..5 {
            bytes.extend_from_slice(&1.0f32.to_le_bytes());
        }
        let path = temp_path("nan.pfm");
        std::fs::write(&path, bytes).unwrap();
        assert!(read_pfm(&path).is_err());
    }
}
