//! Depth-prior files, a synthetic tunnel-shaped depth generator and depth
//! evaluation metrics.

use std::io::Write;
use std::path::Path;

use gpmseg_tensor::ops::bilinear_plane;
use gpmseg_tensor::Tensor;
use image::{ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, GpmError, Result};

/// Magic bytes of the raw float depth format.
pub const RAW_MAGIC: &[u8; 4] = b"GPMD";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthSource {
    File,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthRecord {
    pub image_id: String,
    /// (1, 1, H, W), values in [0, 1].
    pub depth: Tensor,
    pub source: DepthSource,
    /// Raw (min, max) before normalization, in millimetres.
    pub original_range_mm: Option<(f64, f64)>,
}

impl DepthRecord {
    pub fn size(&self) -> (usize, usize) {
        let s = self.depth.shape();
        (s[2], s[3])
    }
}

/// Min-max normalization; constant input maps to zeros.
pub fn normalize(values: &[f64]) -> (Vec<f64>, f64, f64) {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let out = if span > 0.0 {
        values.iter().map(|v| (v - min) / span).collect()
    } else {
        vec![0.0; values.len()]
    };
    (out, min, max)
}

/// Bilinear resize of one plane, clamped to [0, 1].
pub fn resize_unit_plane(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return src.to_vec();
    }
    bilinear_plane(src, h, w, oh, ow)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect()
}

fn data_err(path: &Path, reason: impl Into<String>) -> GpmError {
    GpmError::Data {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_raw(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    if bytes.len() < 8 {
        return Err(data_err(path, "truncated header"));
    }
    let h = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let w = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let body = &bytes[8..];
    if body.len() != h * w * 4 {
        return Err(data_err(
            path,
            format!("expected {} payload bytes for {h}x{w}, found {}", h * w * 4, body.len()),
        ));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((h, w, values))
}

/// Loads a 8/16-bit grayscale PNG (pixel values in millimetres) or a raw
/// float file, normalizes it to [0, 1] and resizes to `target_size`.
pub fn load_depth(path: &Path, target_size: Option<(usize, usize)>) -> Result<DepthRecord> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let (h, w, raw) = if bytes.starts_with(RAW_MAGIC) {
        read_raw(path, &bytes)?
    } else {
        let img = image::load_from_memory(&bytes).map_err(|e| data_err(path, e.to_string()))?;
        let gray = img.into_luma16();
        let (w, h) = gray.dimensions();
        let scale = if bytes_per_channel_is_8(&bytes) { 1.0 / 257.0 } else { 1.0 };
        let values = gray.into_raw().into_iter().map(|v| v as f64 * scale).collect();
        (h as usize, w as usize, values)
    };
    if h == 0 || w == 0 {
        return Err(data_err(path, "empty depth map"));
    }
    if let Some(bad) = raw.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(data_err(path, format!("invalid depth value {bad}")));
    }
    let (norm, min, max) = normalize(&raw);
    let (oh, ow) = target_size.unwrap_or((h, w));
    let plane = resize_unit_plane(&norm, h, w, oh, ow);
    Ok(DepthRecord {
        image_id: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        depth: Tensor::new(&[1, 1, oh, ow], plane)?,
        source: DepthSource::File,
        original_range_mm: Some((min, max)),
    })
}

/// PNG bit depth from the IHDR chunk (byte 24); non-PNG inputs count as 8-bit.
fn bytes_per_channel_is_8(bytes: &[u8]) -> bool {
    !(bytes.starts_with(b"\x89PNG") && bytes.get(24) == Some(&16))
}

/// Writes `depth` as a 16-bit PNG (`.png`, value `round(d * 65535)`) or in
/// the raw float format (any other extension). Writes are atomic.
pub fn save_depth(path: &Path, depth: &Tensor) -> Result<()> {
    let (_, _, h, w) = depth.dims4()?;
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(invalid(format!("depth map {h}x{w} too large to store")));
    }
    let tmp = path.with_extension("tmp");
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        let pixels: Vec<u16> = depth.data()[..h * w]
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(w as u32, h as u32, pixels).expect("buffer size matches");
        img.save_with_format(&tmp, image::ImageFormat::Png)
            .map_err(|e| data_err(path, e.to_string()))?;
    } else {
        let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
        let mut buf = Vec::with_capacity(8 + h * w * 4);
        buf.extend_from_slice(RAW_MAGIC);
        buf.extend_from_slice(&(h as u16).to_le_bytes());
        buf.extend_from_slice(&(w as u16).to_le_bytes());
        for v in &depth.data()[..h * w] {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        f.write_all(&buf).map_err(io_err(&tmp))?;
    }
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

/// Parameters of a generated tunnel: the vanishing point and noise terms.
#[derive(Clone, Debug)]
pub struct TunnelParams {
    pub center: (f64, f64),
    /// (amplitude, frequency y, frequency x, phase) per noise wave.
    pub waves: Vec<(f64, f64, f64, f64)>,
}

impl TunnelParams {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let center = (rng.random_range(0.4..0.6), rng.random_range(0.4..0.6));
        let waves = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.01..0.03),
                    rng.random_range(0.5..2.0),
                    rng.random_range(0.5..2.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        Self { center, waves }
    }

    /// Unnormalized depth at fractional coordinates `(v, u)` in [0, 1]²:
    /// decreasing with distance from the vanishing point plus smooth waves.
    pub fn raw(&self, v: f64, u: f64) -> f64 {
        let r = ((v - self.center.0).powi(2) + (u - self.center.1).powi(2)).sqrt();
        let noise: f64 = self
            .waves
            .iter()
            .map(|&(a, fy, fx, p)| a * (std::f64::consts::TAU * (fy * v + fx * u) + p).sin())
            .sum();
        (-2.5 * r).exp() + noise
    }
}

/// Pixel-centre fractional coordinate.
fn frac(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64
}

/// Deterministic tunnel-like depth (far centre is deepest), normalized to [0, 1].
pub fn synth_depth(height: usize, width: usize, seed: u64) -> Result<DepthRecord> {
    if height == 0 || width == 0 {
        return Err(invalid("synthetic depth needs positive dimensions"));
    }
    let p = TunnelParams::from_seed(seed);
    let raw: Vec<f64> = (0..height * width)
        .map(|i| p.raw(frac(i / width, height), frac(i % width, width)))
        .collect();
    let (norm, _, _) = normalize(&raw);
    Ok(DepthRecord {
        image_id: format!("synthetic-{seed}"),
        depth: Tensor::new(&[1, 1, height, width], norm)?,
        source: DepthSource::Synthetic,
        original_range_mm: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthUnits {
    Millimetres,
    Normalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub abs_rel: f64,
    pub rmse: f64,
    pub log10: f64,
    /// Units of `rmse` and `log10`.
    pub units: DepthUnits,
    pub valid_pixels: usize,
}

/// Predictions at or below zero are clamped to this before ratios and logs.
pub const PRED_FLOOR: f64 = 1e-6;

/// Depth metrics over pixels where `valid` (if given) is nonzero and `gt > 0`.
///
/// The threshold accuracies and AbsRel use the given values directly. RMSE and
/// log10 are computed after mapping both maps through `range_mm` when present.
pub fn depth_metrics(
    pred: &Tensor,
    gt: &Tensor,
    valid: Option<&Tensor>,
    range_mm: Option<(f64, f64)>,
) -> Result<DepthMetrics> {
    if pred.shape() != gt.shape() {
        return Err(invalid(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.shape(),
            gt.shape()
        )));
    }
    if let Some(m) = valid {
        if m.numel() != gt.numel() {
            return Err(invalid("valid mask size differs from depth maps"));
        }
    }
    let to_mm = |v: f64| match range_mm {
        Some((lo, hi)) => lo + v * (hi - lo),
        None => v,
    };
    let (mut n, mut d1, mut d2, mut d3) = (0usize, 0usize, 0usize, 0usize);
    let (mut rel, mut sq, mut lg) = (0.0, 0.0, 0.0);
    for i in 0..gt.numel() {
        let g = gt.data()[i];
        if valid.is_some_and(|m| m.data()[i] == 0.0) || g <= 0.0 || !g.is_finite() {
            continue;
        }
        let p = pred.data()[i].max(PRED_FLOOR);
        n += 1;
        let ratio = (p / g).max(g / p);
        d1 += (ratio < 1.25) as usize;
        d2 += (ratio < 1.25f64.powi(2)) as usize;
        d3 += (ratio < 1.25f64.powi(3)) as usize;
        rel += (p - g).abs() / g;
        let (pm, gm) = (to_mm(p).max(PRED_FLOOR), to_mm(g).max(PRED_FLOOR));
        sq += (pm - gm).powi(2);
        lg += (pm.log10() - gm.log10()).abs();
    }
    if n == 0 {
        return Err(GpmError::UndefinedMetric("no valid depth pixels".into()));
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        delta1: d1 as f64 / nf,
        delta2: d2 as f64 / nf,
        delta3: d3 as f64 / nf,
        abs_rel: rel / nf,
        rmse: (sq / nf).sqrt(),
        log10: lg / nf,
        units: if range_mm.is_some() {
            DepthUnits::Millimetres
        } else {
            DepthUnits::Normalized
        },
        valid_pixels: n,
    })
}

/// One line of a pairing manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairEntry {
    pub image: std::path::PathBuf,
    pub depth: std::path::PathBuf,
    pub mask: std::path::PathBuf,
}

/// Parses "image<TAB>depth<TAB>mask" lines; relative paths resolve against `root`.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_pair_manifest(text: &str, root: &Path, source: &Path) -> Result<Vec<PairEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(data_err(
                source,
                format!("line {}: expected 3 tab-separated paths, found {}", lineno + 1, cols.len()),
            ));
        }
        let p = |s: &str| root.join(s.trim());
        out.push(PairEntry {
            image: p(cols[0]),
            depth: p(cols[1]),
            mask: p(cols[2]),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_constant_is_zero() {
        let (n, lo, hi) = normalize(&[3.0; 5]);
        assert_eq!(n, vec![0.0; 5]);
        assert_eq!((lo, hi), (3.0, 3.0));
    }

    #[test]
    fn raw_round_trip_is_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let t = Tensor::from_fn(&[1, 1, 3, 4], |i| i as f64 / 11.0);
        save_depth(&path, &t).unwrap();
        let rec = load_depth(&path, None).unwrap();
        assert!(rec.depth.max_abs_diff(&t).unwrap() < 1e-6);
        assert_eq!(rec.original_range_mm.map(|r| r.0), Some(0.0));
    }

    #[test]
    fn sixteen_bit_png_uses_raw_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let vals: Vec<u16> = (0u32..16).map(|i| (100 + i * 5000 / 15) as u16).collect();
        let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(4, 4, vals).unwrap();
        img.save(&path).unwrap();
        let rec = load_depth(&path, None).unwrap();
        assert_eq!(rec.original_range_mm, Some((100.0, 5100.0)));
        assert_eq!(rec.depth.data()[0], 0.0);
        assert_eq!(rec.depth.data()[15], 1.0);
    }

    #[test]
    fn negative_raw_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("neg.bin");
        save_depth(&path, &Tensor::full(&[1, 1, 2, 2], -1.0)).unwrap();
        assert!(matches!(load_depth(&path, None), Err(GpmError::Data { .. })));
        assert!(matches!(
            load_depth(&dir.path().join("missing.bin"), None),
            Err(GpmError::Io { .. })
        ));
    }

    #[test]
    fn resize_target_is_honoured() {
        let rec = synth_depth(8, 8, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        save_depth(&path, &rec.depth).unwrap();
        let loaded = load_depth(&path, Some((16, 12))).unwrap();
        assert_eq!(loaded.size(), (16, 12));
        assert!(loaded.depth.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn identity_prediction_is_perfect() {
        let gt = Tensor::from_fn(&[1, 1, 4, 4], |i| 0.1 + i as f64 / 20.0);
        let m = depth_metrics(&gt, &gt, None, Some((10.0, 50.0))).unwrap();
        assert_eq!((m.delta1, m.delta2, m.delta3), (1.0, 1.0, 1.0));
        assert_eq!((m.abs_rel, m.rmse, m.log10), (0.0, 0.0, 0.0));
        assert_eq!(m.units, DepthUnits::Millimetres);
    }

    #[test]
    fn empty_mask_is_undefined() {
        let gt = Tensor::ones(&[1, 1, 2, 2]);
        let mask = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(matches!(
            depth_metrics(&gt, &gt, Some(&mask), None),
            Err(GpmError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn manifest_lines_resolve_against_root() {
        let text = "# header\na.png\tb.bin\tc.png\n\n";
        let entries = parse_pair_manifest(text, Path::new("/data"), Path::new("m.tsv")).unwrap();
        assert_eq!(entries[0].depth, Path::new("/data/b.bin"));
        assert!(parse_pair_manifest("a\tb\n", Path::new("."), Path::new("m")).is_err());
    }
}
