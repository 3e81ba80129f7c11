//! Procedural RGB-D scenes: a ground plane, a back wall and a few boxes and
//! spheres seen through a pinhole camera, plus the on-disk sample and
//! dataset layout.
//!
//! Shading mixes Lambertian light, per-object albedo, a ground checker and
//! distance fog, so the image carries real depth cues.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::DepthRange;
use crate::encoder::{check_divisible, MAX_STRIDE};
use crate::error::{Error, Result};
use crate::substrate::{rng, wtns, Tensor};

pub const CAMERA_HEIGHT: f64 = 1.5;
const FOG_DISTANCE: f64 = 14.0;
const FOG: [f64; 3] = [0.75, 0.8, 0.85];
const MAX_INVALID: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub depth: DepthRange,
    pub n_objects: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 224,
            width: 224,
            depth: DepthRange::default(),
            n_objects: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthSample {
    /// `3×H×W` in `[0, 1]`.
    pub rgb: Tensor<f32>,
    /// `1×H×W` meters; zero where invalid.
    pub depth: Tensor<f32>,
    pub valid: Vec<bool>,
    pub seed: u64,
}

impl DepthSample {
    pub fn valid_fraction(&self) -> f64 {
        self.valid.iter().filter(|&&v| v).count() as f64 / self.valid.len() as f64
    }

    /// First eight bytes of SHA-256 over the three buffers, as hex.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(wtns::encode(&self.rgb));
        h.update(wtns::encode(&self.depth));
        h.update(self.valid.iter().map(|&v| v as u8).collect::<Vec<_>>());
        let d = h.finalize();
        d[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Sphere { c: [f64; 3], r: f64 },
    Box { lo: [f64; 3], hi: [f64; 3] },
}

#[derive(Clone, Copy, Debug)]
struct Object {
    shape: Shape,
    albedo: [f64; 3],
}

struct Hit {
    t: f64,
    normal: [f64; 3],
    albedo: [f64; 3],
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Ray `t·d` from the origin; with `d.z = 1`, `t` is the z-depth.
fn intersect(shape: &Shape, d: [f64; 3]) -> Option<(f64, [f64; 3])> {
    match *shape {
        Shape::Sphere { c, r } => {
            let a = dot(d, d);
            let b = dot(d, c);
            let disc = b * b - a * (dot(c, c) - r * r);
            if disc < 0.0 {
                return None;
            }
            let t = (b - disc.sqrt()) / a;
            if t <= 0.0 {
                return None;
            }
            let p = [t * d[0], t * d[1], t * d[2]];
            Some((t, [(p[0] - c[0]) / r, (p[1] - c[1]) / r, (p[2] - c[2]) / r]))
        }
        Shape::Box { lo, hi } => {
            let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
            let mut axis = 2;
            let mut sign = -1.0;
            for k in 0..3 {
                if d[k].abs() < 1e-12 {
                    if 0.0 < lo[k] || 0.0 > hi[k] {
                        return None;
                    }
                    continue;
                }
                let (mut a, mut b) = (lo[k] / d[k], hi[k] / d[k]);
                let mut s = -1.0;
                if a > b {
                    std::mem::swap(&mut a, &mut b);
                    s = 1.0;
                }
                if a > t0 {
                    t0 = a;
                    axis = k;
                    sign = s;
                }
                t1 = t1.min(b);
            }
            if t0 >= t1 || t0 <= 0.0 {
                return None;
            }
            let mut n = [0.0; 3];
            n[axis] = sign;
            Some((t0, n))
        }
    }
}

fn random_objects(rng: &mut impl Rng, n: usize) -> Vec<Object> {
    (0..n)
        .map(|_| {
            let size = rng.random_range(0.3..0.8);
            let x = rng.random_range(-2.0..2.0);
            let z = rng.random_range(3.0..7.0);
            let albedo = [
                rng.random_range(0.3..1.0),
                rng.random_range(0.3..1.0),
                rng.random_range(0.3..1.0),
            ];
            let shape = if rng.random_bool(0.5) {
                Shape::Sphere {
                    c: [x, -CAMERA_HEIGHT + size, z],
                    r: size,
                }
            } else {
                let tall = size * rng.random_range(1.0..2.5);
                Shape::Box {
                    lo: [x - size, -CAMERA_HEIGHT, z - size],
                    hi: [x + size, -CAMERA_HEIGHT + tall, z + size],
                }
            };
            Object { shape, albedo }
        })
        .collect()
}

pub fn generate(seed: u64, cfg: &SceneConfig) -> Result<DepthSample> {
    check_divisible(cfg.height, cfg.width, MAX_STRIDE)?;
    cfg.depth.validate()?;
    let mut rng = rng::stream(seed, rng::label("scene"));
    let wall = rng.random_range(7.0..9.5f64).min(cfg.depth.max);
    let wall_albedo = [
        rng.random_range(0.4..0.9),
        rng.random_range(0.4..0.9),
        rng.random_range(0.4..0.9),
    ];
    let light = {
        let l = [rng.random_range(-0.6..0.6), 0.8, -rng.random_range(0.3..0.7)];
        let n = dot(l, l).sqrt();
        [l[0] / n, l[1] / n, l[2] / n]
    };
    let objects = random_objects(&mut rng, cfg.n_objects);
    let holes = rng.random_range(0.0..MAX_INVALID);

    let (h, w) = (cfg.height, cfg.width);
    let f = w as f64;
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut rgb = vec![0.0f32; 3 * h * w];
    let mut depth = vec![0.0f32; h * w];
    let mut valid = vec![true; h * w];
    for v in 0..h {
        for u in 0..w {
            let d = [(u as f64 + 0.5 - cx) / f, -(v as f64 + 0.5 - cy) / f, 1.0];
            let mut hit = Hit {
                t: wall,
                normal: [0.0, 0.0, -1.0],
                albedo: {
                    let x = wall * d[0];
                    let stripe = if (x * 1.5).floor().rem_euclid(2.0) == 0.0 { 1.0 } else { 0.85 };
                    wall_albedo.map(|a| a * stripe)
                },
            };
            if d[1] < 0.0 {
                let t = CAMERA_HEIGHT / -d[1];
                if t < hit.t {
                    let (x, z) = (t * d[0], t);
                    let check = ((x * 2.0).floor() + (z * 2.0).floor()).rem_euclid(2.0);
                    let a = if check == 0.0 { 0.9 } else { 0.55 };
                    hit = Hit {
                        t,
                        normal: [0.0, 1.0, 0.0],
                        albedo: [a, a * 0.95, a * 0.85],
                    };
                }
            }
            for o in &objects {
                if let Some((t, n)) = intersect(&o.shape, d) {
                    if t < hit.t {
                        hit = Hit {
                            t,
                            normal: n,
                            albedo: o.albedo,
                        };
                    }
                }
            }
            let shade = 0.25 + 0.75 * dot(hit.normal, light).max(0.0);
            let fog = (-hit.t / FOG_DISTANCE).exp();
            let i = v * w + u;
            for c in 0..3 {
                let lit = hit.albedo[c] * shade;
                rgb[c * h * w + i] = (lit * fog + FOG[c] * (1.0 - fog)).clamp(0.0, 1.0) as f32;
            }
            depth[i] = hit.t.clamp(cfg.depth.min, cfg.depth.max) as f32;
            if rng.random_bool(holes) {
                valid[i] = false;
                depth[i] = 0.0;
            }
        }
    }
    Ok(DepthSample {
        rgb: Tensor::new(&[3, h, w], rgb)?,
        depth: Tensor::new(&[1, h, w], depth)?,
        valid,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub config: SceneConfig,
    pub checksum: String,
}

pub fn write_sample(sample: &DepthSample, cfg: &SceneConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    wtns::write(&dir.join("rgb.wtns"), &sample.rgb)?;
    wtns::write(&dir.join("depth.wtns"), &sample.depth)?;
    let mask: Vec<f32> = sample.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    wtns::write(&dir.join("valid.wtns"), &Tensor::new(sample.depth.shape(), mask)?)?;
    let meta = SampleMeta {
        seed: sample.seed,
        config: cfg.clone(),
        checksum: sample.checksum(),
    };
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_meta(dir: &Path) -> Result<SampleMeta> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

pub fn read_sample(dir: &Path) -> Result<DepthSample> {
    let meta = read_meta(dir)?;
    let rgb = wtns::read_as::<f32>(&dir.join("rgb.wtns"))?;
    let depth = wtns::read_as::<f32>(&dir.join("depth.wtns"))?;
    let vpath = dir.join("valid.wtns");
    let mask = wtns::read_as::<f32>(&vpath)?;
    let (h, w) = (meta.config.height, meta.config.width);
    for (t, name, c) in [(&rgb, "rgb.wtns", 3), (&depth, "depth.wtns", 1), (&mask, "valid.wtns", 1)] {
        if t.shape() != [c, h, w] {
            return Err(Error::Format {
                path: dir.join(name),
                detail: format!("expected shape [{c}, {h}, {w}], got {:?}", t.shape()),
            });
        }
    }
    let valid = mask.data().iter().map(|&v| v != 0.0).collect();
    Ok(DepthSample {
        rgb,
        depth,
        valid,
        seed: meta.seed,
    })
}

/// Regenerates the sample from its recorded seed and configuration and
/// compares checksums with both the stored buffers and the meta record.
pub fn verify_sample(dir: &Path) -> Result<bool> {
    let meta = read_meta(dir)?;
    let stored = read_sample(dir)?;
    let fresh = generate(meta.seed, &meta.config)?;
    let c = fresh.checksum();
    Ok(c == meta.checksum && c == stored.checksum())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub dir: String,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub config: SceneConfig,
    pub samples: Vec<IndexEntry>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub index: DatasetIndex,
}

impl Dataset {
    /// Writes `n_train + n_test` samples with seeds `seed, seed+1, ...`.
    pub fn generate(root: &Path, cfg: &SceneConfig, seed: u64, n_train: usize, n_test: usize) -> Result<Self> {
        let mut samples = Vec::with_capacity(n_train + n_test);
        for i in 0..n_train + n_test {
            let s = seed.wrapping_add(i as u64);
            let dir = format!("{i:05}");
            write_sample(&generate(s, cfg)?, cfg, &root.join(&dir))?;
            samples.push(IndexEntry {
                dir,
                split: if i < n_train { Split::Train } else { Split::Test },
                seed: s,
            });
        }
        let index = DatasetIndex {
            config: cfg.clone(),
            samples,
        };
        let path = root.join("index.json");
        let text = serde_json::to_string_pretty(&index).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            index,
        })
    }

    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("index.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            index,
        })
    }

    pub fn entries(&self, split: Split) -> Vec<&IndexEntry> {
        self.index.samples.iter().filter(|e| e.split == split).collect()
    }

    pub fn load(&self, split: Split) -> Result<Vec<DepthSample>> {
        self.entries(split)
            .into_iter()
            .map(|e| read_sample(&self.root.join(&e.dir)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n_objects: usize) -> SceneConfig {
        SceneConfig {
            height: 64,
            width: 64,
            n_objects,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn empty_scene_is_monotone_down_each_column() {
        let s = generate(3, &small(0)).unwrap();
        let w = 64;
        for u in 0..w {
            let mut prev = f32::INFINITY;
            for v in 0..64 {
                let i = v * w + u;
                if s.valid[i] {
                    assert!(s.depth.data()[i] <= prev, "column {u} row {v}");
                    prev = s.depth.data()[i];
                }
            }
        }
    }

    #[test]
    fn deterministic_and_in_range() {
        let cfg = small(5);
        let a = generate(11, &cfg).unwrap();
        let b = generate(11, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.valid_fraction() >= 0.5);
        for (d, &ok) in a.depth.data().iter().zip(&a.valid) {
            if ok {
                assert!((0.1..=10.0).contains(&(*d as f64)));
            } else {
                assert_eq!(*d, 0.0);
            }
        }
        assert!(a.rgb.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(generate(12, &cfg).unwrap().depth, a.depth);
    }

    #[test]
    fn rejects_bad_resolution() {
        let cfg = SceneConfig {
            height: 50,
            ..small(1)
        };
        assert!(matches!(generate(0, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn roundtrip_and_verify() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(3);
        let s = generate(5, &cfg).unwrap();
        write_sample(&s, &cfg, dir.path()).unwrap();
        assert_eq!(read_sample(dir.path()).unwrap(), s);
        assert!(verify_sample(dir.path()).unwrap());

        let mut meta = read_meta(dir.path()).unwrap();
        meta.seed += 1;
        fs::write(dir.path().join("meta.json"), serde_json::to_string(&meta).unwrap()).unwrap();
        assert!(!verify_sample(dir.path()).unwrap());
    }
}
