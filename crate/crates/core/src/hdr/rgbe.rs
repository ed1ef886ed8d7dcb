//! Radiance RGBE (.hdr) reading.
//!
//! Shared-exponent format: each pixel is four bytes `(r, g, b, e)` decoding
//! to `channel = (mantissa + 0.5) / 256 * 2^(e - 128)`, with an all-zero
//! exponent meaning black. Both flat scanlines and the adaptive run-length
//! encoding (per-channel runs introduced by a `2 2 hi lo` scanline header)
//! are supported, plus the legacy `1 1 1 n` repeat markers.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::sphere::DirectionGrid;

use super::EnvironmentMap;

fn decode_rgbe(q: [u8; 4]) -> [f64; 3] {
    let e = q[3];
    if e == 0 {
        return [0.0; 3];
    }
    let scale = 2f64.powi(e as i32 - 128);
    [
        (q[0] as f64 + 0.5) / 256.0 * scale,
        (q[1] as f64 + 0.5) / 256.0 * scale,
        (q[2] as f64 + 0.5) / 256.0 * scale,
    ]
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated scanline data"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn byte(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn line(&mut self) -> Result<&'a str> {
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
            self.pos += 1;
        }
        if self.pos >= self.bytes.len() {
            return Err(Error::format(self.path, "unexpected end of header"));
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::format(self.path, "header is not valid ascii"))?;
        self.pos += 1;
        Ok(s.trim_end_matches('\r'))
    }
}

/// Reads one scanline of `width` RGBE quadruples.
fn read_scanline(cur: &mut Cursor, width: usize, out: &mut Vec<[u8; 4]>) -> Result<()> {
    let start = [cur.byte()?, cur.byte()?, cur.byte()?, cur.byte()?];
    let marker_len = ((start[2] as usize) << 8) | start[3] as usize;
    if start[0] == 2 && start[1] == 2 && start[2] & 0x80 == 0 {
        if marker_len != width {
            return Err(Error::format(
                cur.path,
                format!("rle scanline length {marker_len} does not match width {width}"),
            ));
        }
        // Adaptive RLE: four channel planes, each a run/dump sequence.
        let mut planes = vec![0u8; 4 * width];
        for c in 0..4 {
            let mut filled = 0usize;
            while filled < width {
                let count = cur.byte()? as usize;
                if count > 128 {
                    let run = count - 128;
                    if filled + run > width {
                        return Err(Error::format(cur.path, "rle run overflows scanline"));
                    }
                    let v = cur.byte()?;
                    planes[c * width + filled..c * width + filled + run].fill(v);
                    filled += run;
                } else {
                    if count == 0 || filled + count > width {
                        return Err(Error::format(cur.path, "bad rle dump length"));
                    }
                    let src = cur.take(count)?;
                    planes[c * width + filled..c * width + filled + count].copy_from_slice(src);
                    filled += count;
                }
            }
        }
        for j in 0..width {
            out.push([planes[j], planes[width + j], planes[2 * width + j], planes[3 * width + j]]);
        }
        return Ok(());
    }

    // Flat scanline, possibly with legacy repeat markers.
    let mut pending = start;
    let mut consecutive_markers = 0u32;
    loop {
        if pending[0] == 1 && pending[1] == 1 && pending[2] == 1 {
            let last = *out
                .last()
                .ok_or_else(|| Error::format(cur.path, "repeat marker with no previous pixel"))?;
            let reps = (pending[3] as usize) << (8 * consecutive_markers);
            if out.len() % width + reps > width {
                return Err(Error::format(cur.path, "repeat marker overflows scanline"));
            }
            for _ in 0..reps {
                out.push(last);
            }
            consecutive_markers += 1;
        } else {
            out.push(pending);
            consecutive_markers = 0;
        }
        if out.len() % width == 0 {
            return Ok(());
        }
        pending = [cur.byte()?, cur.byte()?, cur.byte()?, cur.byte()?];
    }
}

/// Reads a Radiance picture as an equirectangular environment map.
pub fn read_rgbe(path: impl AsRef<Path>) -> Result<EnvironmentMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };

    let first = cur.line()?;
    if !first.starts_with("#?") {
        return Err(Error::format(path, "missing #? signature line"));
    }
    let mut format_seen = None;
    loop {
        let line = cur.line()?;
        if line.is_empty() {
            break;
        }
        if let Some(fmt) = line.strip_prefix("FORMAT=") {
            format_seen = Some(fmt.trim().to_string());
        }
    }
    match format_seen.as_deref() {
        Some("32-bit_rle_rgbe") => {}
        Some(other) => {
            return Err(Error::format(path, format!("unsupported format {other:?}")));
        }
        None => return Err(Error::format(path, "header has no FORMAT line")),
    }

    let res = cur.line()?;
    let parts: Vec<&str> = res.split_ascii_whitespace().collect();
    if parts.len() != 4 || parts[0] != "-Y" || parts[2] != "+X" {
        return Err(Error::format(
            path,
            format!("unsupported resolution line {res:?}, expected \"-Y H +X W\""),
        ));
    }
    let height: usize = parts[1]
        .parse()
        .map_err(|_| Error::format(path, "unreadable height"))?;
    let width: usize = parts[3]
        .parse()
        .map_err(|_| Error::format(path, "unreadable width"))?;
    if width != 2 * height {
        return Err(Error::format(
            path,
            format!("not equirectangular: {width}x{height} (width must be 2x height)"),
        ));
    }

    let mut quads: Vec<[u8; 4]> = Vec::with_capacity(width * height);
    for _ in 0..height {
        read_scanline(&mut cur, width, &mut quads)?;
    }

    let grid = DirectionGrid::equirect(height)?;
    let mut rgb = DMatrix::zeros(3, grid.len());
    for (idx, q) in quads.iter().enumerate() {
        let v = decode_rgbe(*q);
        for c in 0..3 {
            rgb[(c, idx)] = v[c];
        }
    }
    EnvironmentMap::new(grid, rgb).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp_path(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("envfield-rgbe-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn header(h: usize, w: usize) -> Vec<u8> {
        format!("#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y {h} +X {w}\n").into_bytes()
    }

    #[test]
    fn decode_formula_matches_hand_computation() {
        // (m + 0.5)/256 * 2^(e - 128)
        assert_eq!(decode_rgbe([128, 128, 128, 129]), [1.00390625; 3]);
        assert_eq!(decode_rgbe([0, 0, 0, 128]), [0.001953125; 3]);
        assert_eq!(decode_rgbe([255, 0, 0, 128])[0], 255.5 / 256.0);
        assert_eq!(decode_rgbe([10, 20, 30, 0]), [0.0; 3]);
    }

    #[test]
    fn flat_file_reads() {
        let (h, w) = (2usize, 4usize);
        let mut bytes = header(h, w);
        for _ in 0..h * w {
            bytes.extend_from_slice(&[128, 64, 32, 129]);
        }
        let p = temp_path("flat.hdr");
        std::fs::write(&p, bytes).unwrap();
        let map = read_rgbe(&p).unwrap();
        assert_eq!(map.height(), 2);
        let want = decode_rgbe([128, 64, 32, 129]);
        for idx in 0..map.len() {
            assert_eq!(map.pixel(idx), want);
        }
    }

    #[test]
    fn rle_file_reads() {
        let (h, w) = (4usize, 8usize);
        let mut bytes = header(h, w);
        for _ in 0..h {
            // Scanline header then one full run per channel plane.
            bytes.extend_from_slice(&[2, 2, 0, w as u8]);
            for v in [200u8, 100, 50, 130] {
                bytes.extend_from_slice(&[(128 + w) as u8, v]);
            }
        }
        let p = temp_path("rle.hdr");
        std::fs::write(&p, bytes).unwrap();
        let map = read_rgbe(&p).unwrap();
        let want = decode_rgbe([200, 100, 50, 130]);
        for idx in 0..map.len() {
            assert_eq!(map.pixel(idx), want);
        }
    }

    #[test]
    fn rle_dump_segments_read() {
        let (h, w) = (4usize, 8usize);
        let mut bytes = header(h, w);
        for _ in 0..h {
            bytes.extend_from_slice(&[2, 2, 0, w as u8]);
            for base in [0u8, 50, 100, 129] {
                // Two literal dumps of 4 bytes each.
                bytes.push(4);
                bytes.extend((0..4).map(|i| base.wrapping_add(i)));
                bytes.push(4);
                bytes.extend((4..8).map(|i| base.wrapping_add(i)));
            }
        }
        let p = temp_path("dump.hdr");
        std::fs::write(&p, bytes).unwrap();
        let map = read_rgbe(&p).unwrap();
        let first = decode_rgbe([0, 50, 100, 129]);
        assert_eq!(map.pixel(0), first);
        let last = decode_rgbe([7, 57, 107, 136]);
        assert_eq!(map.pixel(7), last);
    }

    #[test]
    fn old_style_repeat_marker_reads() {
        let (h, w) = (2usize, 4usize);
        let mut bytes = header(h, w);
        for _ in 0..h {
            bytes.extend_from_slice(&[90, 80, 70, 128]);
            bytes.extend_from_slice(&[1, 1, 1, 3]); // repeat previous 3 times
        }
        let p = temp_path("old.hdr");
        std::fs::write(&p, bytes).unwrap();
        let map = read_rgbe(&p).unwrap();
        let want = decode_rgbe([90, 80, 70, 128]);
        for idx in 0..map.len() {
            assert_eq!(map.pixel(idx), want);
        }
    }

    #[test]
    fn unknown_format_rejected() {
        let mut bytes = b"#?RADIANCE\nFORMAT=32-bit_rle_xyze\n\n-Y 2 +X 4\n".to_vec();
        bytes.extend_from_slice(&[0u8; 32]);
        let p = temp_path("fmt.hdr");
        std::fs::write(&p, bytes).unwrap();
        let err = read_rgbe(&p).unwrap_err();
        assert!(err.to_string().contains("unsupported format"), "{err}");
    }

    #[test]
    fn truncated_file_rejected() {
        let mut bytes = header(2, 4);
        bytes.extend_from_slice(&[128, 128, 128, 129]); // one pixel of eight
        let p = temp_path("trunc.hdr");
        std::fs::write(&p, bytes).unwrap();
        let err = read_rgbe(&p).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }
}
