//! Image/mask/depth triplets: loading from a pairing manifest, batching,
//! splitting and a synthetic scene generator.
//!
//! Synthetic scenes contain a lesion and one or more look-alike distractors
//! drawn with a different palette. Only the lesion protrudes from the tunnel
//! wall in the depth map, so appearance alone does not tell them apart.

use std::path::{Path, PathBuf};

use gpmseg_tensor::ops::bilinear_plane;
use gpmseg_tensor::Tensor;
use image::{ImageBuffer, Luma, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::depth_io::{self, normalize, parse_pair_manifest, TunnelParams};
use crate::error::{invalid, io_err, GpmError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// (1, 3, H, W) in [0, 1].
    pub image: Tensor,
    /// (1, 1, H, W), binary.
    pub mask: Tensor,
    /// (1, 1, H, W) in [0, 1].
    pub depth: Tensor,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[2], s[3])
    }
}

/// Stacked batch tensors.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub image: Tensor,
    pub mask: Tensor,
    pub depth: Tensor,
}

pub fn make_batch(samples: &[&Sample]) -> Result<Batch> {
    if samples.is_empty() {
        return Err(invalid("empty batch"));
    }
    let cat = |f: fn(&Sample) -> &Tensor| Tensor::cat_batch(&samples.iter().map(|s| f(s)).collect::<Vec<_>>());
    Ok(Batch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        image: cat(|s| &s.image)?,
        mask: cat(|s| &s.mask)?,
        depth: cat(|s| &s.depth)?,
    })
}

/// 64-bit FNV-1a with a splitmix finalizer; stable across platforms and releases.
pub fn stable_hash(s: &str) -> u64 {
    let mut h = s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    });
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Splits by id hash: an id goes to validation when its hash falls in the
/// lowest `val_fraction` of the range. Returns (train, val) index lists.
pub fn split_by_hash(ids: &[&str], val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let cut = (val_fraction.clamp(0.0, 1.0) * u64::MAX as f64) as u64;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, id) in ids.iter().enumerate() {
        if val_fraction > 0.0 && stable_hash(id) <= cut {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val)
}

fn data_err(path: &Path, reason: impl Into<String>) -> GpmError {
    GpmError::Data {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(data_err(path, "file not found"));
    }
    image::open(path).map_err(|e| data_err(path, e.to_string()))
}

fn resize_planes(data: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return data.to_vec();
    }
    (0..c)
        .flat_map(|ci| bilinear_plane(&data[ci * h * w..(ci + 1) * h * w], h, w, oh, ow))
        .collect()
}

/// Loads one triplet, resized to `size` (image and depth bilinear, mask
/// bilinear then thresholded at 0.5).
pub fn load_sample(entry: &depth_io::PairEntry, size: Option<(usize, usize)>) -> Result<Sample> {
    let rgb = open_image(&entry.image)?.into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let (oh, ow) = size.unwrap_or((h, w));
    let mut planar = vec![0.0; 3 * h * w];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            planar[c * h * w + i] = px[c] as f64 / 255.0;
        }
    }
    let image = Tensor::new(&[1, 3, oh, ow], resize_planes(&planar, 3, h, w, oh, ow))?;

    let m = open_image(&entry.mask)?.into_luma8();
    let (mw, mh) = (m.width() as usize, m.height() as usize);
    let mplane: Vec<f64> = m.pixels().map(|p| (p[0] > 127) as u8 as f64).collect();
    let mask: Vec<f64> = resize_planes(&mplane, 1, mh, mw, oh, ow)
        .into_iter()
        .map(|v| (v >= 0.5) as u8 as f64)
        .collect();
    let mask = Tensor::new(&[1, 1, oh, ow], mask)?;

    if !entry.depth.exists() {
        return Err(data_err(&entry.depth, "file not found"));
    }
    let depth = depth_io::load_depth(&entry.depth, Some((oh, ow)))?.depth;
    let id = entry
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Sample { id, image, mask, depth })
}

/// Reads a pairing manifest and every triplet it lists.
pub fn load_manifest(path: &Path, root: &Path, size: Option<(usize, usize)>) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let entries = parse_pair_manifest(&text, root, path)?;
    if entries.is_empty() {
        return Err(data_err(path, "manifest lists no samples"));
    }
    entries.iter().map(|e| load_sample(e, size)).collect()
}

/// Writes samples as PNG images/masks, raw depth files and a manifest.
pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = String::new();
    for s in samples {
        let (h, w) = s.size();
        let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            Rgb(std::array::from_fn(|c| {
                (s.image.data()[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8
            }))
        });
        let mask = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            Luma([(s.mask.data()[y as usize * w + x as usize] * 255.0) as u8])
        });
        let (ip, mp, dp) = (
            format!("{}_image.png", s.id),
            format!("{}_mask.png", s.id),
            format!("{}_depth.bin", s.id),
        );
        img.save(dir.join(&ip)).map_err(|e| data_err(&dir.join(&ip), e.to_string()))?;
        mask.save(dir.join(&mp)).map_err(|e| data_err(&dir.join(&mp), e.to_string()))?;
        depth_io::save_depth(&dir.join(&dp), &s.depth)?;
        manifest.push_str(&format!("{ip}\t{dp}\t{mp}\n"));
    }
    let path = dir.join("manifest.tsv");
    std::fs::write(&path, manifest).map_err(io_err(&path))?;
    Ok(path)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub size: usize,
    pub distractors: usize,
    /// Blend weight of blob colour over the mucosa.
    pub contrast: f64,
    /// Height of the lesion bump relative to the tunnel depth span.
    pub bump: f64,
    /// Std of per-pixel image noise.
    pub noise: f64,
}

impl SceneConfig {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            distractors: 1,
            contrast: 0.45,
            bump: 0.3,
            noise: 0.03,
        }
    }
}

const MUCOSA: [f64; 3] = [0.78, 0.47, 0.42];
const PALETTES: [[f64; 3]; 3] = [[0.92, 0.30, 0.28], [0.88, 0.66, 0.36], [0.62, 0.38, 0.62]];

#[derive(Clone, Copy, Debug)]
struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Blob {
    fn random(rng: &mut impl Rng, lo: f64, hi: f64) -> Self {
        let a: f64 = rng.random_range(0.0..std::f64::consts::PI);
        Self {
            cy: rng.random_range(0.25..0.75),
            cx: rng.random_range(0.25..0.75),
            ry: rng.random_range(lo..hi),
            rx: rng.random_range(lo..hi),
            cos: a.cos(),
            sin: a.sin(),
        }
    }

    /// Squared elliptical radius; below 1 inside.
    fn rho2(&self, v: f64, u: f64) -> f64 {
        let (dy, dx) = (v - self.cy, u - self.cx);
        let a = dx * self.cos + dy * self.sin;
        let b = -dx * self.sin + dy * self.cos;
        (a / self.rx).powi(2) + (b / self.ry).powi(2)
    }

    fn overlaps(&self, other: &Blob) -> bool {
        let d = ((self.cy - other.cy).powi(2) + (self.cx - other.cx).powi(2)).sqrt();
        d < self.rx.max(self.ry) + other.rx.max(other.ry) + 0.04
    }
}

/// Soft inside weight with a one-pixel ramp at the boundary.
fn soft_inside(rho2: f64, px: f64) -> f64 {
    ((1.0 - rho2.sqrt()) / px + 0.5).clamp(0.0, 1.0)
}

/// Generates one scene; deterministic per `seed`.
pub fn synth_scene(id: &str, cfg: &SceneConfig, seed: u64) -> Result<Sample> {
    let n = cfg.size;
    if n == 0 {
        return Err(invalid("scene size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tunnel = TunnelParams::from_seed(rng.random());
    let lesion = Blob::random(&mut rng, 0.12, 0.22);
    let mut distractors: Vec<Blob> = Vec::new();
    for _ in 0..cfg.distractors {
        let mut b = Blob::random(&mut rng, 0.10, 0.20);
        for _ in 0..50 {
            if !b.overlaps(&lesion) && distractors.iter().all(|d| !b.overlaps(d)) {
                break;
            }
            b = Blob::random(&mut rng, 0.10, 0.20);
        }
        distractors.push(b);
    }
    let lesion_palette = rng.random_range(0..PALETTES.len());
    let other_palette = |rng: &mut ChaCha8Rng| {
        (lesion_palette + 1 + rng.random_range(0..PALETTES.len() - 1)) % PALETTES.len()
    };
    let distractor_palettes: Vec<usize> = (0..distractors.len()).map(|_| other_palette(&mut rng)).collect();
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("finite std");

    let px = 1.0 / n as f64;
    let coords = |i: usize| ((i / n) as f64 + 0.5) * px;
    let coords_u = |i: usize| ((i % n) as f64 + 0.5) * px;

    let bg: Vec<f64> = (0..n * n).map(|i| tunnel.raw(coords(i), coords_u(i))).collect();
    let (bg_norm, lo, hi) = normalize(&bg);
    let span = (hi - lo).max(1e-9);

    let mut mask = vec![0.0; n * n];
    let mut depth = vec![0.0; n * n];
    let mut image = vec![0.0; 3 * n * n];
    for i in 0..n * n {
        let (v, u) = (coords(i), coords_u(i));
        let r2 = lesion.rho2(v, u);
        if r2 <= 1.0 {
            mask[i] = 1.0;
        }
        // the lesion protrudes towards the camera: smaller depth
        let h = cfg.bump * span * (1.0 - r2).max(0.0).sqrt();
        depth[i] = bg[i] - h;

        let shade = 0.45 + 0.55 * (1.0 - bg_norm[i]);
        let mut colour = MUCOSA;
        let mut blend = |palette: usize, w: f64| {
            for c in 0..3 {
                colour[c] = (1.0 - w) * colour[c] + w * PALETTES[palette][c];
            }
        };
        blend(lesion_palette, cfg.contrast * soft_inside(r2, px / lesion.rx.min(lesion.ry)));
        for (d, &p) in distractors.iter().zip(&distractor_palettes) {
            blend(p, cfg.contrast * soft_inside(d.rho2(v, u), px / d.rx.min(d.ry)));
        }
        for c in 0..3 {
            image[c * n * n + i] = (shade * colour[c] + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    let (depth, _, _) = normalize(&depth);
    Ok(Sample {
        id: id.to_string(),
        image: Tensor::new(&[1, 3, n, n], image)?,
        mask: Tensor::new(&[1, 1, n, n], mask)?,
        depth: Tensor::new(&[1, 1, n, n], depth)?,
    })
}

/// `count` scenes with ids `scene-0000`, ... and per-scene seeds derived from `seed`.
pub fn synth_dataset(count: usize, cfg: &SceneConfig, seed: u64) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| {
            let s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64);
            synth_scene(&format!("scene-{i:04}"), cfg, s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_bounded() {
        let cfg = SceneConfig::new(32);
        let a = synth_scene("a", &cfg, 3).unwrap();
        let b = synth_scene("a", &cfg, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.depth.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(a.mask.sum() > 0.0);
    }

    #[test]
    fn lesion_is_closer_than_its_rim() {
        let n = 48;
        let cfg = SceneConfig::new(n);
        for seed in 0..5 {
            let s = synth_scene("x", &cfg, seed).unwrap();
            let m = s.mask.data();
            let near = |i: usize| {
                let (y, x) = ((i / n) as i64, (i % n) as i64);
                (-3i64..=3).any(|dy| {
                    (-3i64..=3).any(|dx| {
                        let (yy, xx) = (y + dy, x + dx);
                        (0..n as i64).contains(&yy)
                            && (0..n as i64).contains(&xx)
                            && m[(yy * n as i64 + xx) as usize] == 1.0
                    })
                })
            };
            let (mut inside, mut ni, mut rim, mut nr) = (0.0, 0.0, 0.0, 0.0);
            for (i, d) in s.depth.data().iter().enumerate() {
                if m[i] == 1.0 {
                    inside += d;
                    ni += 1.0;
                } else if near(i) {
                    rim += d;
                    nr += 1.0;
                }
            }
            assert!(inside / ni < rim / nr, "seed {seed}");
        }
    }

    #[test]
    fn hash_split_is_stable() {
        let ids: Vec<String> = (0..200).map(|i| format!("img{i}")).collect();
        let refs: Vec<&str> = ids.iter().map(|s| s.as_str()).collect();
        let (t, v) = split_by_hash(&refs, 0.1);
        assert_eq!(t.len() + v.len(), 200);
        assert!(v.len() > 5 && v.len() < 40, "{}", v.len());
        assert_eq!(split_by_hash(&refs, 0.1), (t, v));
    }

    #[test]
    fn saved_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synth_dataset(2, &SceneConfig::new(16), 1).unwrap();
        let manifest = save_dataset(dir.path(), &samples).unwrap();
        let loaded = load_manifest(&manifest, dir.path(), None).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].mask, samples[0].mask);
        assert!(loaded[0].image.max_abs_diff(&samples[0].image).unwrap() <= 0.5 / 255.0 + 1e-12);
        assert!(loaded[0].depth.max_abs_diff(&samples[0].depth).unwrap() < 1e-6);
    }

    #[test]
    fn missing_mask_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synth_dataset(1, &SceneConfig::new(16), 1).unwrap();
        let manifest = save_dataset(dir.path(), &samples).unwrap();
        std::fs::remove_file(dir.path().join("scene-0000_mask.png")).unwrap();
        match load_manifest(&manifest, dir.path(), None) {
            Err(GpmError::Data { path, .. }) => assert!(path.ends_with("scene-0000_mask.png")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
