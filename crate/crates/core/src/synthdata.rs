//! Synthetic scenes: box layouts rendered into three-level feature pyramids,
//! and the on-disk dataset format.
//!
//! Each object paints an anisotropic Gaussian bump (sigma = box size / 4,
//! at least half a cell) on channel 0 of the level its size class routes
//! to: small -> P3, medium -> P4, large -> P5. Adjacent levels get the
//! bump at half amplitude, two levels away at a quarter. Channels 1 and 2
//! carry `bump * (1 + ln(w) / ln(100))` and the same for `h`. Every value
//! then receives Gaussian noise.
//!
//! Dataset directory layout:
//!
//! ```text
//! manifest.json   format, version, generator config, scenes with boxes,
//!                 seeds and per-map {level, shape [C,H,W], offset},
//!                 blob_bytes, crc32
//! features.bin    every map as little-endian f32, in manifest order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::SynthConfig;
use crate::error::{Error, Result};
use crate::featpyr::{FeatureMap, FeaturePyramid};
use crate::geometry::{iou, BBox};
use crate::rng::SplitMix64;
use crate::tensorfile::{decode_f32, encode_f32};

pub const DATASET_VERSION: u32 = 1;
const DATASET_FORMAT: &str = "asag-dataset";
const MANIFEST: &str = "manifest.json";
const FEATURES: &str = "features.bin";
/// Rejections allowed per object before placement gives up.
pub const MAX_REJECTIONS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl SizeClass {
    pub fn of(b: &BBox) -> Self {
        let m = b.max_side();
        if m < 0.1 {
            SizeClass::Small
        } else if m < 0.3 {
            SizeClass::Medium
        } else {
            SizeClass::Large
        }
    }

    pub fn level(self) -> u8 {
        match self {
            SizeClass::Small => 3,
            SizeClass::Medium => 4,
            SizeClass::Large => 5,
        }
    }

    fn side_range(self) -> (f32, f32) {
        match self {
            SizeClass::Small => (0.03, 0.1),
            SizeClass::Medium => (0.1, 0.3),
            SizeClass::Large => (0.3, 0.6),
        }
    }

    pub const ALL: [SizeClass; 3] = [SizeClass::Small, SizeClass::Medium, SizeClass::Large];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub id: usize,
    pub seed: u64,
    pub boxes: Vec<BBox>,
    pub classes: Vec<SizeClass>,
    pub noise: f32,
    /// Set when an object could not be placed under the IoU cap.
    pub placement_failed: bool,
}

impl SceneSpec {
    pub fn difficulty(&self) -> usize {
        self.boxes.len()
    }
}

fn sample_class(rng: &mut SplitMix64, mix: &[f32; 3]) -> SizeClass {
    let total: f32 = mix.iter().sum();
    let u = rng.next_f32() * total;
    if u < mix[0] {
        SizeClass::Small
    } else if u < mix[0] + mix[1] {
        SizeClass::Medium
    } else {
        SizeClass::Large
    }
}

/// Scene with a Poisson-distributed object count.
pub fn gen_scene(id: usize, seed: u64, cfg: &SynthConfig) -> SceneSpec {
    let mut rng = SplitMix64::new(seed);
    let n = rng.poisson(cfg.mean_objects).min(cfg.max_objects);
    place(id, seed, n, &mut rng, cfg)
}

/// Scene with exactly `count` requested objects.
pub fn gen_scene_with_count(id: usize, seed: u64, count: usize, cfg: &SynthConfig) -> SceneSpec {
    let mut rng = SplitMix64::new(seed);
    place(id, seed, count, &mut rng, cfg)
}

fn place(id: usize, seed: u64, n: usize, rng: &mut SplitMix64, cfg: &SynthConfig) -> SceneSpec {
    let mut boxes: Vec<BBox> = Vec::with_capacity(n);
    let mut classes = Vec::with_capacity(n);
    let mut failed = false;
    'objects: for _ in 0..n {
        let class = sample_class(rng, &cfg.size_mix);
        let (lo, hi) = class.side_range();
        let long = rng.uniform(lo, hi);
        let short = long * rng.uniform(0.6, 1.0);
        let (w, h) = if rng.next_f32() < 0.5 { (long, short) } else { (short, long) };
        for _ in 0..MAX_REJECTIONS {
            let cand = BBox::new(
                rng.uniform(w / 2.0, 1.0 - w / 2.0),
                rng.uniform(h / 2.0, 1.0 - h / 2.0),
                w,
                h,
            );
            if boxes.iter().all(|b| iou(b, &cand) <= cfg.max_pair_iou) {
                boxes.push(cand);
                classes.push(class);
                continue 'objects;
            }
        }
        failed = true;
        break;
    }
    SceneSpec {
        id,
        seed,
        boxes,
        classes,
        noise: cfg.noise,
        placement_failed: failed,
    }
}

/// Amplitude of an object on `level` given its routed level: full on the
/// routed level, half on adjacent levels, absent elsewhere.
pub fn echo_amplitude(routed: u8, level: u8) -> f32 {
    match routed.abs_diff(level) {
        0 => 1.0,
        1 => 0.5,
        _ => 0.0,
    }
}

/// Bump standard deviation as a fraction of the box side.
pub const BUMP_SIGMA: f32 = 0.25;

/// Log-size code, 0 at one hundredth of the image and 1 at full size.
pub fn size_code(v: f32) -> f32 {
    1.0 + v.max(1e-6).ln() / 100f32.ln()
}

fn paint(map: &mut FeatureMap, b: &BBox, amp: f32) {
    let (hgt, wid) = (map.height, map.width);
    let sx = (b.w * BUMP_SIGMA).max(0.5 / wid as f32);
    let sy = (b.h * BUMP_SIGMA).max(0.5 / hgt as f32);
    let (cw, ch) = (size_code(b.w), size_code(b.h));
    let reach = 4.0;
    let c0 = (((b.cx - reach * sx) * wid as f32).floor().max(0.0)) as usize;
    let c1 = (((b.cx + reach * sx) * wid as f32).ceil() as usize).min(wid);
    let r0 = (((b.cy - reach * sy) * hgt as f32).floor().max(0.0)) as usize;
    let r1 = (((b.cy + reach * sy) * hgt as f32).ceil() as usize).min(hgt);
    let plane = hgt * wid;
    for r in r0..r1 {
        let y = (r as f32 + 0.5) / hgt as f32;
        let gy = (-(y - b.cy).powi(2) / (2.0 * sy * sy)).exp();
        for c in c0..c1 {
            let x = (c as f32 + 0.5) / wid as f32;
            let g = amp * gy * (-(x - b.cx).powi(2) / (2.0 * sx * sx)).exp();
            let k = r * wid + c;
            map.values[k] += g;
            map.values[plane + k] += g * cw;
            map.values[2 * plane + k] += g * ch;
        }
    }
}

/// Levels 3, 4, 5 with sides `p3`, `p3 / 2`, `p3 / 4`.
pub fn render_pyramid(spec: &SceneSpec, cfg: &SynthConfig) -> FeaturePyramid {
    assert!(cfg.raw_channels >= 3, "need three signal channels");
    let mut noise = SplitMix64::new(spec.seed).split();
    let mut maps = Vec::with_capacity(3);
    for (k, level) in [3u8, 4, 5].into_iter().enumerate() {
        let dim = cfg.p3_size >> k;
        let mut map = FeatureMap::zeros(level, cfg.raw_channels, dim, dim);
        for (b, class) in spec.boxes.iter().zip(&spec.classes) {
            let amp = echo_amplitude(class.level(), level);
            if amp > 0.0 {
                paint(&mut map, b, amp);
            }
        }
        if spec.noise > 0.0 {
            for v in &mut map.values {
                *v += spec.noise * noise.normal() as f32;
            }
        }
        maps.push(map);
    }
    FeaturePyramid::new(maps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub pyramid: FeaturePyramid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub scenes: Vec<Scene>,
}

/// Per-scene seeds drawn from the configured master seed.
pub fn scene_seeds(cfg: &SynthConfig) -> Vec<u64> {
    let mut rng = SplitMix64::new(cfg.seed);
    (0..cfg.scenes).map(|_| rng.next_u64()).collect()
}

pub fn synthesize(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    if cfg.scenes == 0 {
        return Err(Error::Config("scenes must be at least 1".into()));
    }
    let scenes = scene_seeds(cfg)
        .into_iter()
        .enumerate()
        .map(|(id, seed)| {
            let spec = gen_scene(id, seed, cfg);
            let pyramid = render_pyramid(&spec, cfg);
            Scene { spec, pyramid }
        })
        .collect();
    Ok(Dataset {
        config: cfg.clone(),
        scenes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapEntry {
    pub level: u8,
    /// `[C, H, W]`.
    pub shape: [usize; 3],
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    #[serde(flatten)]
    pub spec: SceneSpec,
    pub maps: Vec<MapEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub config: SynthConfig,
    pub scenes: Vec<SceneEntry>,
    pub blob_bytes: usize,
    pub crc32: u32,
}

pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    if ds.scenes.is_empty() {
        return Err(Error::Config("refusing to write an empty dataset".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut scenes = Vec::with_capacity(ds.scenes.len());
    for s in &ds.scenes {
        let mut maps = Vec::new();
        for m in &s.pyramid.maps {
            maps.push(MapEntry {
                level: m.level,
                shape: [m.channels, m.height, m.width],
                offset: blob.len(),
            });
            encode_f32(&m.values, &mut blob);
        }
        scenes.push(SceneEntry {
            spec: s.spec.clone(),
            maps,
        });
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        config: ds.config.clone(),
        scenes,
        blob_bytes: blob.len(),
        crc32: crc32fast::hash(&blob),
    };
    let mpath = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    let fpath = dir.join(FEATURES);
    fs::write(&fpath, &blob).map_err(|e| Error::io(&fpath, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let head: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if head["format"] != DATASET_FORMAT {
        return Err(Error::format(&mpath, "not a dataset manifest"));
    }
    let version = head["version"].as_u64().unwrap_or(0) as u32;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    serde_json::from_value(head).map_err(|e| Error::format(&mpath, e.to_string()))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    // Shapes must tile the blob contiguously.
    let mut expect = 0usize;
    for s in &manifest.scenes {
        for m in &s.maps {
            if m.offset != expect {
                return Err(Error::Shape(format!(
                    "scene {} P{}: offset {} but previous maps end at {expect}",
                    s.spec.id, m.level, m.offset
                )));
            }
            expect += 4 * m.shape.iter().product::<usize>();
        }
    }
    if expect != manifest.blob_bytes {
        return Err(Error::Shape(format!(
            "map shapes account for {expect} bytes, manifest declares {}",
            manifest.blob_bytes
        )));
    }
    let fpath = dir.join(FEATURES);
    let blob = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
    if blob.len() != manifest.blob_bytes {
        return Err(Error::Checksum(format!(
            "{}: {} bytes, manifest declares {}",
            fpath.display(),
            blob.len(),
            manifest.blob_bytes
        )));
    }
    let crc = crc32fast::hash(&blob);
    if crc != manifest.crc32 {
        return Err(Error::Checksum(format!(
            "{}: crc32 {crc:#010x}, manifest declares {:#010x}",
            fpath.display(),
            manifest.crc32
        )));
    }
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for s in manifest.scenes {
        let mut maps = Vec::with_capacity(s.maps.len());
        for m in &s.maps {
            let [c, h, w] = m.shape;
            let end = m.offset + 4 * c * h * w;
            maps.push(FeatureMap::from_values(m.level, c, h, w, decode_f32(&blob[m.offset..end]))?);
        }
        scenes.push(Scene {
            spec: s.spec,
            pyramid: FeaturePyramid::new(maps),
        });
    }
    Ok(Dataset {
        config: manifest.config,
        scenes,
    })
}
