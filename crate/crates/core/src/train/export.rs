//! Depth-map export: a metric WTNS1 tensor and a 16-bit PGM preview whose
//! header records the linear mapping back to meters.

use std::fs;
use std::path::Path;

use crate::decoder::DepthRange;
use crate::error::{Error, Result};
use crate::substrate::{wtns, Tensor};

pub const PGM_MAX: u16 = u16::MAX;

/// Meters per gray level for `range`.
pub fn pgm_scale(range: DepthRange) -> f64 {
    (range.max - range.min) / PGM_MAX as f64
}

pub fn encode_pgm(depth: &Tensor<f32>, range: DepthRange) -> Result<Vec<u8>> {
    let s = depth.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::shape("encode_pgm", format!("expected 1×H×W depth, got {s:?}")));
    }
    let scale = pgm_scale(range);
    let mut out = format!(
        "P5\n# scale meters_per_unit={scale:e}\n# offset meters={:e}\n{} {}\n{}\n",
        range.min, s[2], s[1], PGM_MAX
    )
    .into_bytes();
    for &d in depth.data() {
        let g = ((d as f64 - range.min) / scale).round().clamp(0.0, PGM_MAX as f64) as u16;
        out.extend_from_slice(&g.to_be_bytes());
    }
    Ok(out)
}

/// Reads a PGM written by [`encode_pgm`] back into meters.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let bad = |detail: &str| Error::Format {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let mut scale = None;
    let mut offset = None;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| bad("header is not text"))?;
        pos += end + 1;
        if let Some(c) = line.strip_prefix('#') {
            let c = c.trim();
            if let Some(v) = c.strip_prefix("scale meters_per_unit=") {
                scale = v.parse::<f64>().ok();
            } else if let Some(v) = c.strip_prefix("offset meters=") {
                offset = v.parse::<f64>().ok();
            }
            continue;
        }
        fields.extend(line.split_whitespace().map(str::to_string));
    }
    if fields[0] != "P5" || fields[3] != PGM_MAX.to_string() {
        return Err(bad("expected a 16-bit binary PGM"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let scale = scale.ok_or_else(|| bad("missing scale comment"))?;
    let offset = offset.unwrap_or(0.0);
    let body = &bytes[pos..];
    if body.len() != 2 * w * h {
        return Err(bad("payload length does not match the header"));
    }
    let data = body
        .chunks_exact(2)
        .map(|c| (offset + u16::from_be_bytes([c[0], c[1]]) as f64 * scale) as f32)
        .collect();
    Tensor::new(&[1, h, w], data)
}

/// Writes `depth.wtns` and `depth.pgm` into `dir`.
pub fn write_depth(dir: &Path, depth: &Tensor<f32>, range: DepthRange) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    wtns::write(&dir.join("depth.wtns"), depth)?;
    let path = dir.join("depth.pgm");
    fs::write(&path, encode_pgm(depth, range)?).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extremes_map_to_gray_limits() {
        let r = DepthRange { min: 0.5, max: 8.0 };
        let d = Tensor::from_f64(&[1, 1, 3], &[0.5, 8.0, 3.0]).unwrap();
        let bytes = encode_pgm(&d, r).unwrap();
        let n = bytes.len();
        assert_eq!(&bytes[n - 6..n - 2], &[0, 0, 255, 255]);
        let back = decode_pgm(&bytes, Path::new("x.pgm")).unwrap();
        for (a, b) in back.data().iter().zip(d.data()) {
            assert!(((a - b).abs() as f64) <= pgm_scale(r));
        }
    }
}
