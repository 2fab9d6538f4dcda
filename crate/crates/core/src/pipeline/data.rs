//! Synthetic shape scenes: PPM images, scene files and a hashed manifest.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::BoxXYXY;
use crate::scene::{GtObject, GtScene};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Rectangle, ShapeKind::Ellipse, ShapeKind::Triangle];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    #[serde(default = "default_side")]
    pub image_w: usize,
    #[serde(default = "default_side")]
    pub image_h: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_min_objects")]
    pub min_objects: usize,
    #[serde(default = "default_max_objects")]
    pub max_objects: usize,
    /// Object side lengths are drawn from `[min_size, max_size]` pixels.
    #[serde(default = "default_min_size")]
    pub min_size: f64,
    #[serde(default = "default_max_size")]
    pub max_size: f64,
    /// Shape drawn for class `k` is `shapes[k % shapes.len()]`.
    #[serde(default = "default_shapes")]
    pub shapes: Vec<ShapeKind>,
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default = "default_val_size")]
    pub val_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_side() -> usize {
    64
}
fn default_classes() -> usize {
    3
}
fn default_min_objects() -> usize {
    1
}
fn default_max_objects() -> usize {
    3
}
fn default_min_size() -> f64 {
    12.0
}
fn default_max_size() -> f64 {
    32.0
}
fn default_shapes() -> Vec<ShapeKind> {
    ShapeKind::ALL.to_vec()
}
fn default_train_size() -> usize {
    1000
}
fn default_val_size() -> usize {
    200
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            image_w: default_side(),
            image_h: default_side(),
            num_classes: default_classes(),
            min_objects: default_min_objects(),
            max_objects: default_max_objects(),
            min_size: default_min_size(),
            max_size: default_max_size(),
            shapes: default_shapes(),
            train_size: default_train_size(),
            val_size: default_val_size(),
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: format!("data.{field}"),
                message: message.into(),
            })
        };
        if self.image_w < 8 || self.image_h < 8 {
            return bad("image_w", "images must be at least 8x8");
        }
        if self.num_classes == 0 {
            return bad("num_classes", "must be positive");
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects", "exceeds max_objects");
        }
        if !(self.min_size >= 1.0 && self.min_size <= self.max_size) {
            return bad("min_size", "need 1 <= min_size <= max_size");
        }
        if self.max_size >= self.image_w.min(self.image_h) as f64 - 1.0 {
            return bad("max_size", "objects must fit inside the image");
        }
        if self.shapes.is_empty() {
            return bad("shapes", "at least one shape kind is required");
        }
        Ok(())
    }

    pub fn shape_for(&self, class_id: usize) -> ShapeKind {
        self.shapes[class_id % self.shapes.len()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// 8-bit RGB image, row-major, interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn from_ppm(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |m: &str| Error::invalid(format!("{origin}: {m}"));
        let mut pos = 0;
        let mut fields = Vec::new();
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated PPM header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII PPM header"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("not a binary PPM (P6)"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PPM dimension"));
        let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if max != 255 {
            return Err(bad("only 8-bit PPM is supported"));
        }
        let data = &bytes[pos + 1..];
        if data.len() != w * h * 3 {
            return Err(bad("PPM pixel data has the wrong length"));
        }
        Ok(Self {
            width: w,
            height: h,
            rgb: data.to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_ppm(&bytes, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Normalized planar `[3, H, W]` values, roughly zero-mean unit-range.
    pub fn to_tensor(&self) -> Tensor {
        let hw = self.width * self.height;
        let mut data = vec![0.0; 3 * hw];
        for (i, px) in self.rgb.chunks(3).enumerate() {
            for c in 0..3 {
                data[c * hw + i] = (px[c] as f64 / 255.0 - 0.5) * 4.0;
            }
        }
        Tensor::from_vec(&[3, self.height, self.width], data).expect("planar image shape")
    }
}

/// One generated or loaded example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub scene: GtScene,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

fn inside(kind: ShapeKind, b: &BoxXYXY, apex: f64, x: f64, y: f64) -> bool {
    if !(x >= b.x1 && x <= b.x2 && y >= b.y1 && y <= b.y2) {
        return false;
    }
    match kind {
        ShapeKind::Rectangle => true,
        ShapeKind::Ellipse => {
            let c = b.center();
            let (rx, ry) = (b.width() / 2.0, b.height() / 2.0);
            ((x - c.x) / rx).powi(2) + ((y - c.y) / ry).powi(2) <= 1.0
        }
        ShapeKind::Triangle => {
            // apex on the top edge, base along the bottom edge
            let t = (y - b.y1) / b.height();
            let ax = b.x1 + apex * b.width();
            let left = ax + (b.x1 - ax) * t;
            let right = ax + (b.x2 - ax) * t;
            x >= left && x <= right
        }
    }
}

fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 0x7472_6169_6e00_0000u64,
        Split::Val => 0x7661_6c00_0000_0000u64,
    };
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ tag ^ (index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

const PLACEMENT_RETRIES: usize = 50;
const MIN_GAP: f64 = 2.0;
const SUPERSAMPLE: usize = 2;

/// Generates example `index` of a split; a pure function of its arguments.
pub fn generate_sample(spec: &SyntheticDatasetSpec, split: Split, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, split, index));
    let (w, h) = (spec.image_w, spec.image_h);
    let target = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut objects: Vec<(GtObject, f64, [f64; 3])> = Vec::new();
    for k in 0..target {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let bw = rng.gen_range(spec.min_size..=spec.max_size);
            let bh = rng.gen_range(spec.min_size..=spec.max_size);
            // keep x2 < W strictly
            let x = rng.gen_range(0.0..w as f64 - bw - 0.5);
            let y = rng.gen_range(0.0..h as f64 - bh - 0.5);
            let b = BoxXYXY::new(x, y, x + bw, y + bh);
            let clear = objects.iter().all(|(o, _, _)| {
                let g = &o.bbox;
                b.x1 > g.x2 + MIN_GAP || g.x1 > b.x2 + MIN_GAP || b.y1 > g.y2 + MIN_GAP || g.y1 > b.y2 + MIN_GAP
            });
            if !clear {
                continue;
            }
            let class_id = rng.gen_range(0..spec.num_classes);
            let hue = 360.0 * class_id as f64 / spec.num_classes as f64 + rng.gen_range(-20.0..20.0);
            let color = hsv_to_rgb(hue, rng.gen_range(0.5..0.9), rng.gen_range(0.6..1.0));
            objects.push((GtObject { bbox: b, class_id }, rng.gen_range(0.2..0.8), color));
            placed = true;
            break;
        }
        if !placed {
            log::debug!("{split} sample {index}: object {k} skipped after {PLACEMENT_RETRIES} placement attempts");
        }
    }

    let bg = rng.gen_range(30.0..90.0);
    let mut image = Image::new(w, h);
    let ss = SUPERSAMPLE as f64;
    for py in 0..h {
        for px in 0..w {
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let (x, y) = (px as f64 + (sx as f64 + 0.5) / ss, py as f64 + (sy as f64 + 0.5) / ss);
                    let c = objects
                        .iter()
                        .find(|(o, apex, _)| inside(spec.shape_for(o.class_id), &o.bbox, *apex, x, y))
                        .map_or([bg; 3], |(_, _, c)| *c);
                    for ch in 0..3 {
                        acc[ch] += c[ch];
                    }
                }
            }
            let mut px_rgb = [0u8; 3];
            for ch in 0..3 {
                let noise = rng.gen_range(-8.0..8.0);
                px_rgb[ch] = (acc[ch] / (ss * ss) + noise).round().clamp(0.0, 255.0) as u8;
            }
            image.set_pixel(px, py, px_rgb);
        }
    }
    let scene = GtScene::new(w, h, spec.num_classes, objects.into_iter().map(|(o, _, _)| o).collect())
        .expect("generator keeps boxes inside the image");
    Sample {
        id: format!("{:06}", index),
        image,
        scene,
    }
}

/// Generates a whole split; parallel over examples, ordered by index.
pub fn generate_split(spec: &SyntheticDatasetSpec, split: Split) -> Result<Vec<Sample>> {
    spec.validate()?;
    let n = match split {
        Split::Train => spec.train_size,
        Split::Val => spec.val_size,
    };
    Ok((0..n).into_par_iter().map(|i| generate_sample(spec, split, i)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image_sha256: String,
    pub scene_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: SyntheticDatasetSpec,
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// SHA-256 of the serialized manifest.
    pub fn digest(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn entries(&self, split: Split) -> &[ManifestEntry] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

fn entry(s: &Sample) -> ManifestEntry {
    ManifestEntry {
        id: s.id.clone(),
        image_sha256: sha256_hex(&s.image.to_ppm()),
        scene_sha256: sha256_hex(s.scene.to_text().as_bytes()),
    }
}

/// Builds the manifest of a spec without touching the filesystem.
pub fn build_manifest(spec: &SyntheticDatasetSpec) -> Result<Manifest> {
    Ok(Manifest {
        format_version: 1,
        spec: spec.clone(),
        train: generate_split(spec, Split::Train)?.iter().map(entry).collect(),
        val: generate_split(spec, Split::Val)?.iter().map(entry).collect(),
    })
}

/// Writes `train/` and `val/` (`<id>.ppm` + `<id>.txt`) and the manifest under `dir`.
pub fn write_dataset(spec: &SyntheticDatasetSpec, dir: &Path) -> Result<Manifest> {
    let mut manifest = Manifest {
        format_version: 1,
        spec: spec.clone(),
        train: Vec::new(),
        val: Vec::new(),
    };
    for split in [Split::Train, Split::Val] {
        let sub = dir.join(split.name());
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(format!("creating {}", sub.display()), e))?;
        let samples = generate_split(spec, split)?;
        for s in &samples {
            s.image.write(&sub.join(format!("{}.ppm", s.id)))?;
            s.scene.write(&sub.join(format!("{}.txt", s.id)))?;
        }
        let entries = samples.iter().map(entry).collect();
        match split {
            Split::Train => manifest.train = entries,
            Split::Val => manifest.val = entries,
        }
    }
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_json()).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(manifest)
}

/// Loads one split of a dataset directory, verifying file hashes.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<Sample>> {
    let manifest = Manifest::read(dir)?;
    let sub = dir.join(split.name());
    manifest
        .entries(split)
        .iter()
        .map(|e| {
            let img_path = sub.join(format!("{}.ppm", e.id));
            let bytes = std::fs::read(&img_path).map_err(|err| Error::io(format!("reading {}", img_path.display()), err))?;
            if sha256_hex(&bytes) != e.image_sha256 {
                return Err(Error::invalid(format!("{} does not match its manifest hash", img_path.display())));
            }
            let image = Image::from_ppm(&bytes, &img_path.display().to_string())?;
            let scene = GtScene::read(&sub.join(format!("{}.txt", e.id)))?;
            Ok(Sample {
                id: e.id.clone(),
                image,
                scene,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            train_size: 6,
            val_size: 3,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = build_manifest(&small()).unwrap();
        let b = build_manifest(&small()).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let c = build_manifest(&SyntheticDatasetSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn single_object_range() {
        let spec = SyntheticDatasetSpec {
            min_objects: 1,
            max_objects: 1,
            ..small()
        };
        for s in generate_split(&spec, Split::Train).unwrap() {
            assert_eq!(s.scene.objects.len(), 1);
        }
    }

    #[test]
    fn boxes_inside_and_disjoint() {
        let spec = SyntheticDatasetSpec {
            train_size: 50,
            max_objects: 4,
            ..small()
        };
        for s in generate_split(&spec, Split::Train).unwrap() {
            for (i, o) in s.scene.objects.iter().enumerate() {
                let b = o.bbox;
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 < 64.0 && b.y2 < 64.0);
                for p in &s.scene.objects[i + 1..] {
                    assert_eq!(crate::geometry::iou(&b, &p.bbox), 0.0);
                }
            }
        }
    }

    #[test]
    fn ppm_round_trip() {
        let s = generate_sample(&small(), Split::Val, 2);
        let back = Image::from_ppm(&s.image.to_ppm(), "t").unwrap();
        assert_eq!(back, s.image);
        assert!(Image::from_ppm(b"P3\n1 1\n255\n", "t").is_err());
        assert!(Image::from_ppm(b"P6\n2 2\n255\nabc", "t").is_err());
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(&small(), dir.path()).unwrap();
        assert_eq!(m, build_manifest(&small()).unwrap());
        let val = load_split(dir.path(), Split::Val).unwrap();
        assert_eq!(val, generate_split(&small(), Split::Val).unwrap());
    }

    #[test]
    fn zero_classes_is_config_error() {
        let spec = SyntheticDatasetSpec {
            num_classes: 0,
            ..small()
        };
        match spec.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "data.num_classes"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shape_pixels_differ_from_background() {
        let s = generate_sample(&small(), Split::Train, 0);
        let c = s.scene.objects[0].bbox.center();
        let inner = s.image.pixel(c.x as usize, c.y as usize);
        let outside = (0..64 * 64)
            .map(|i| (i % 64, i / 64))
            .find(|&(x, y)| {
                let p = crate::geometry::Point2::new(x as f64 + 0.5, y as f64 + 0.5);
                s.scene.objects.iter().all(|o| {
                    let b = o.bbox;
                    !BoxXYXY::new(b.x1 - 1.5, b.y1 - 1.5, b.x2 + 1.5, b.y2 + 1.5).contains(p)
                })
            })
            .map(|(x, y)| s.image.pixel(x, y))
            .unwrap();
        // background is grey, shapes are saturated
        let spread = |p: [u8; 3]| *p.iter().max().unwrap() as i32 - *p.iter().min().unwrap() as i32;
        assert!(spread(outside) <= 16 && spread(inner) > 40, "{inner:?} vs {outside:?}");
    }
}
