//! Synthetic part-structured datasets and the on-disk dataset layout.
//!
//! ```text
//! images/<id>.png   8-bit RGB
//! masks/<id>.png    8-bit gray, pixel value = part id, 0 = background
//! keypoints.csv     id,part_id,x,y,visible
//! labels.csv        id,class_id
//! split.csv         id,split   (train | val | test)
//! ```
//!
//! `masks/` and `keypoints.csv` are optional when loading; a dataset without
//! them can still be used for classification.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::ImageSample;
use crate::error::{Error, Result};
use crate::metrics::{Keypoint, Keypoints};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub parts_per_object: usize,
    pub images_per_class: usize,
    pub image_side: usize,
    pub seed: u64,
    pub multi_instance: bool,
    pub irregular_parts: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            parts_per_object: 4,
            images_per_class: 250,
            image_side: 64,
            seed: 42,
            multi_instance: false,
            irregular_parts: false,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.parts_per_object < 1 || self.parts_per_object > 255 {
            return Err(Error::Config(format!(
                "parts per object must be in 1..=255, got {}",
                self.parts_per_object
            )));
        }
        if self.images_per_class < 1 {
            return Err(Error::Config("images per class must be positive".into()));
        }
        if patch_size == 0 || self.image_side == 0 || self.image_side % patch_size != 0 {
            return Err(Error::Config(format!(
                "image side {} is not a multiple of patch size {patch_size}",
                self.image_side
            )));
        }
        if self.image_side < 32 {
            return Err(Error::Config(format!(
                "image side {} is below the minimum of 32",
                self.image_side
            )));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.classes * self.images_per_class
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSample {
    pub id: String,
    pub image: ImageSample,
    pub class_id: usize,
    pub split: Split,
    /// 0 background, `1..=P` parts.
    pub part_mask: Option<Array2<u32>>,
    pub keypoints: Option<Keypoints>,
    pub fg_mask: Option<Array2<bool>>,
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-sample hash of `(seed, index)`; `salt` separates independent uses.
pub fn sample_hash(seed: u64, index: u64, salt: u64) -> u64 {
    mix(mix(mix(seed) ^ index) ^ salt)
}

/// 70/10/20 assignment from the sample hash.
pub fn split_for(seed: u64, index: u64) -> Split {
    let u = (sample_hash(seed, index, 1) >> 11) as f64 / (1u64 << 53) as f64;
    if u < 0.7 {
        Split::Train
    } else if u < 0.8 {
        Split::Val
    } else {
        Split::Test
    }
}

pub fn sample_id(index: usize) -> String {
    format!("{index:06}")
}

/// Sample `i` belongs to class `i mod classes`, so growing
/// `images_per_class` keeps every earlier sample unchanged.
pub fn class_of(index: usize, classes: usize) -> usize {
    index % classes
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Class-independent part color.
fn part_base(p: usize) -> [f64; 3] {
    hsv(0.13 + p as f64 * 0.618_033_988_75, 0.75, 0.9)
}

/// Class tint, stripe frequency and stripe orientation.
fn class_style(c: usize, classes: usize) -> ([f64; 3], f64, f64) {
    let tint = hsv(c as f64 / classes as f64, 0.95, 1.0);
    let freq = 0.5 + 0.35 * (c % 4) as f64;
    let angle = PI * (c as f64 * 0.381_966) % PI;
    (tint, freq, angle)
}

/// A part region in object coordinates.
#[derive(Debug, Clone)]
enum Shape {
    Ellipse {
        cx: f64,
        cy: f64,
        a: f64,
        b: f64,
        angle: f64,
    },
    Stroke {
        points: Vec<(f64, f64)>,
        radius: f64,
    },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Ellipse {
                cx,
                cy,
                a,
                b,
                angle,
            } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Shape::Stroke { points, radius } => points
                .iter()
                .any(|(px, py)| (x - px).powi(2) + (y - py).powi(2) <= radius * radius),
        }
    }
}

struct Instance {
    /// `shapes[p]` is part `p + 1`; earlier parts win overlaps.
    shapes: Vec<Shape>,
}

fn make_instance(rng: &mut ChaCha8Rng, spec: &SynthSpec, cx: f64, cy: f64, size: f64) -> Instance {
    let theta = rng.gen_range(0.0..2.0 * PI);
    let body_a = 11.0 * size;
    let body_b = 10.0 * size;
    let mut shapes = vec![Shape::Ellipse {
        cx,
        cy,
        a: body_a,
        b: body_b,
        angle: theta,
    }];
    let sats = spec.parts_per_object - 1;
    for k in 0..sats {
        let phi = theta + 2.0 * PI * k as f64 / sats.max(1) as f64;
        let (s, c) = phi.sin_cos();
        // distance from the body center to its boundary along phi
        let rel = phi - theta;
        let edge =
            body_a * body_b / ((body_b * rel.cos()).powi(2) + (body_a * rel.sin()).powi(2)).sqrt();
        if spec.irregular_parts {
            let len = 14.0 * size;
            let bend =
                rng.gen_range(0.5..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 } * 5.0 * size;
            let points = (0..=16)
                .map(|i| {
                    let t = i as f64 / 16.0;
                    let along = edge - 1.0 * size + len * t;
                    let across = bend * (PI * t).sin();
                    (cx + c * along - s * across, cy + s * along + c * across)
                })
                .collect();
            shapes.push(Shape::Stroke {
                points,
                radius: 3.2 * size,
            });
        } else {
            let r = 10.0 * size;
            let d = edge + r - 1.0 * size;
            shapes.push(Shape::Ellipse {
                cx: cx + c * d,
                cy: cy + s * d,
                a: r,
                b: r * 0.85,
                angle: phi,
            });
        }
    }
    Instance { shapes }
}

/// Rendered sample before quantization.
pub struct Rendered {
    pub rgb: Array3<u8>,
    pub mask: Array2<u8>,
    pub keypoints: Keypoints,
}

/// Renders sample `index` of `spec`.
pub fn render(spec: &SynthSpec, index: usize) -> Rendered {
    let side = spec.image_side;
    let sf = side as f64;
    let class = class_of(index, spec.classes);
    let mut rng = ChaCha8Rng::seed_from_u64(sample_hash(spec.seed, index as u64, 0));

    let extent = 30.0;
    let instances: Vec<Instance> = if spec.multi_instance {
        let count = rng.gen_range(2..=3);
        let mut slots = [0usize, 1, 2, 3];
        for i in (1..4).rev() {
            slots.swap(i, rng.gen_range(0..=i));
        }
        let size = (sf / 2.0 - 2.0) / (2.0 * extent) * rng.gen_range(0.9..1.0);
        slots[..count]
            .iter()
            .map(|&q| {
                let jitter = (sf / 4.0 - extent * size - 1.0).max(0.0);
                let cx = sf * (0.25 + 0.5 * (q % 2) as f64) + rng.gen_range(-jitter..=jitter) - 0.5;
                let cy = sf * (0.25 + 0.5 * (q / 2) as f64) + rng.gen_range(-jitter..=jitter) - 0.5;
                make_instance(&mut rng, spec, cx, cy, size)
            })
            .collect()
    } else {
        let size = sf / 64.0 * rng.gen_range(0.9..1.05);
        let jitter = (sf / 2.0 - extent * size - 1.0).max(0.0);
        let cx = sf / 2.0 - 0.5 + rng.gen_range(-jitter..=jitter);
        let cy = sf / 2.0 - 0.5 + rng.gen_range(-jitter..=jitter);
        vec![make_instance(&mut rng, spec, cx, cy, size)]
    };

    let mut mask = Array2::<u8>::zeros((side, side));
    let mut owner = Array2::<u8>::from_elem((side, side), u8::MAX);
    for (ii, inst) in instances.iter().enumerate() {
        for i in 0..side {
            for j in 0..side {
                if mask[[i, j]] != 0 {
                    continue;
                }
                let (x, y) = (j as f64, i as f64);
                if let Some(p) = inst.shapes.iter().position(|s| s.contains(x, y)) {
                    mask[[i, j]] = (p + 1) as u8;
                    owner[[i, j]] = ii as u8;
                }
            }
        }
    }

    let (tint, freq, angle) = class_style(class, spec.classes);
    let (sa, ca) = angle.sin_cos();
    let phase = rng.gen_range(0.0..2.0 * PI);
    let bg_shift: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.03..0.03));
    let mut rgb = Array3::<u8>::zeros((3, side, side));
    for i in 0..side {
        for j in 0..side {
            let p = mask[[i, j]] as usize;
            let color: [f64; 3] = if p == 0 {
                let wave = 0.03 * ((i as f64 * 0.21 + j as f64 * 0.13).sin());
                std::array::from_fn(|ch| 0.1 + bg_shift[ch] + wave + rng.gen_range(-0.03..0.03))
            } else {
                let base = part_base(p - 1);
                let stripe = 1.0 + 0.25 * (freq * (ca * j as f64 + sa * i as f64) + phase).sin();
                std::array::from_fn(|ch| {
                    (0.85 * base[ch] + 0.15 * tint[ch]) * stripe + rng.gen_range(-0.04..0.04)
                })
            };
            for ch in 0..3 {
                rgb[[ch, i, j]] = (color[ch].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }

    let keypoints = (1..=spec.parts_per_object)
        .map(|p| {
            // first instance owning this part defines the keypoint
            let pixels: Vec<(usize, usize)> = mask
                .indexed_iter()
                .filter(|(_, &v)| v as usize == p)
                .map(|(ij, _)| ij)
                .collect();
            let Some(first_owner) = pixels.iter().map(|&ij| owner[ij]).min() else {
                return Keypoint {
                    part_id: p as u32,
                    x: 0.0,
                    y: 0.0,
                    visible: false,
                };
            };
            let mine: Vec<_> = pixels
                .into_iter()
                .filter(|&ij| owner[ij] == first_owner)
                .collect();
            let n = mine.len() as f64;
            let my = mine.iter().map(|&(i, _)| i as f64).sum::<f64>() / n;
            let mx = mine.iter().map(|&(_, j)| j as f64).sum::<f64>() / n;
            let &(i, j) = mine
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 as f64 - my).powi(2) + (a.1 as f64 - mx).powi(2);
                    let db = (b.0 as f64 - my).powi(2) + (b.1 as f64 - mx).powi(2);
                    da.total_cmp(&db)
                })
                .expect("nonempty");
            Keypoint {
                part_id: p as u32,
                x: (j as f64 + 0.5) / sf,
                y: (i as f64 + 0.5) / sf,
                visible: true,
            }
        })
        .collect();

    Rendered {
        rgb,
        mask,
        keypoints,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

fn encode_png(buf: &[u8], w: usize, h: usize, color: image::ExtendedColorType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    image::ImageEncoder::write_image(
        image::codecs::png::PngEncoder::new(&mut out),
        buf,
        w as u32,
        h as u32,
        color,
    )
    .map_err(|e| Error::Input(format!("PNG encoding failed: {e}")))?;
    Ok(out)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `rgb` (`3×H×W`) as an 8-bit RGB PNG.
pub fn rgb_png(rgb: &Array3<u8>) -> Result<Vec<u8>> {
    let (_, h, w) = rgb.dim();
    let interleaved: Vec<u8> = rgb
        .view()
        .permuted_axes([1, 2, 0])
        .iter()
        .copied()
        .collect();
    encode_png(&interleaved, w, h, image::ExtendedColorType::Rgb8)
}

pub fn gray_png(g: &Array2<u8>) -> Result<Vec<u8>> {
    let (h, w) = g.dim();
    let flat: Vec<u8> = g.iter().copied().collect();
    encode_png(&flat, w, h, image::ExtendedColorType::L8)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            detail: format!("{other:?}"),
        },
    }
}

/// Renders every sample of `spec` into `out`. Rendering runs in parallel;
/// the output does not depend on the thread count.
pub fn generate(spec: &SynthSpec, out: &Path) -> Result<SplitCounts> {
    spec.validate(crate::backbone::BackboneConfig::default().patch_size)?;
    for sub in ["images", "masks"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let rendered: Vec<(String, Rendered)> = (0..spec.total())
        .into_par_iter()
        .map(|i| (sample_id(i), render(spec, i)))
        .collect();
    rendered.par_iter().try_for_each(|(id, r)| -> Result<()> {
        write(
            &out.join("images").join(format!("{id}.png")),
            &rgb_png(&r.rgb)?,
        )?;
        write(
            &out.join("masks").join(format!("{id}.png")),
            &gray_png(&r.mask)?,
        )
    })?;

    let kp_path = out.join("keypoints.csv");
    let mut kp = csv_writer(&kp_path)?;
    let lb_path = out.join("labels.csv");
    let mut lb = csv_writer(&lb_path)?;
    let sp_path = out.join("split.csv");
    let mut sp = csv_writer(&sp_path)?;
    kp.write_record(["id", "part_id", "x", "y", "visible"])
        .map_err(|e| csv_err(&kp_path, e))?;
    lb.write_record(["id", "class_id"])
        .map_err(|e| csv_err(&lb_path, e))?;
    sp.write_record(["id", "split"])
        .map_err(|e| csv_err(&sp_path, e))?;
    let mut counts = SplitCounts::default();
    for (i, (id, r)) in rendered.iter().enumerate() {
        for k in &r.keypoints {
            kp.write_record([
                id.as_str(),
                &k.part_id.to_string(),
                &format!("{:.6}", k.x),
                &format!("{:.6}", k.y),
                if k.visible { "1" } else { "0" },
            ])
            .map_err(|e| csv_err(&kp_path, e))?;
        }
        lb.write_record([id.as_str(), &class_of(i, spec.classes).to_string()])
            .map_err(|e| csv_err(&lb_path, e))?;
        let split = split_for(spec.seed, i as u64);
        match split {
            Split::Train => counts.train += 1,
            Split::Val => counts.val += 1,
            Split::Test => counts.test += 1,
        }
        sp.write_record([id.as_str(), split.name()])
            .map_err(|e| csv_err(&sp_path, e))?;
    }
    kp.flush().map_err(|e| Error::io(&kp_path, e))?;
    lb.flush().map_err(|e| Error::io(&lb_path, e))?;
    sp.flush().map_err(|e| Error::io(&sp_path, e))?;
    Ok(counts)
}

fn read_csv(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let found = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if found.iter().collect::<Vec<_>>() != header {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            detail: format!(
                "expected header '{}', found '{}'",
                header.join(","),
                found.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    rdr.records()
        .map(|r| {
            r.map_err(|e| {
                let offset = e.position().map_or(0, |p| p.byte());
                Error::Format {
                    path: path.to_path_buf(),
                    offset,
                    detail: e.to_string(),
                }
            })
        })
        .collect()
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, path: &Path) -> Result<T> {
    let raw = rec.get(i).unwrap_or("");
    raw.trim().parse().map_err(|_| Error::Format {
        path: path.to_path_buf(),
        offset: rec.position().map_or(0, |p| p.byte()),
        detail: format!("cannot parse field {i} value '{raw}'"),
    })
}

fn decode_png(path: &Path) -> Result<image::DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| {
        Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            detail: format!("invalid PNG: {e}"),
        }
    })
}

/// Reads an RGB PNG into `[0, 1]` pixels.
pub fn read_image(path: &Path) -> Result<ImageSample> {
    let img = decode_png(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let px = Array3::from_shape_fn((3, h, w), |(c, i, j)| {
        img.get_pixel(j as u32, i as u32)[c] as f64 / 255.0
    });
    ImageSample::new(px)
}

fn read_mask(path: &Path) -> Result<Array2<u32>> {
    let img = decode_png(path)?;
    let img = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        _ => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                detail: "part mask must be an 8-bit single-channel PNG".into(),
            })
        }
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Array2::from_shape_fn((h, w), |(i, j)| {
        img.get_pixel(j as u32, i as u32)[0] as u32
    }))
}

/// A loaded dataset, sorted by sample id.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub samples: Vec<AnnotatedSample>,
    pub has_masks: bool,
    pub has_keypoints: bool,
}

impl Dataset {
    pub fn split(&self, s: Split) -> Vec<&AnnotatedSample> {
        self.samples.iter().filter(|x| x.split == s).collect()
    }

    pub fn classes(&self) -> usize {
        self.samples
            .iter()
            .map(|s| s.class_id + 1)
            .max()
            .unwrap_or(0)
    }
}

fn validation(id: &str, detail: impl Into<String>) -> Error {
    Error::Validation {
        sample: id.to_string(),
        detail: detail.into(),
    }
}

/// Loads and validates a dataset directory.
pub fn load(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::NotFound(dir.to_path_buf()));
    }
    let labels_path = dir.join("labels.csv");
    let mut labels = BTreeMap::new();
    for rec in read_csv(&labels_path, &["id", "class_id"])? {
        let id: String = field(&rec, 0, &labels_path)?;
        let c: usize = field(&rec, 1, &labels_path)?;
        if labels.insert(id.clone(), c).is_some() {
            return Err(validation(&id, "duplicate entry in labels.csv"));
        }
    }
    let split_path = dir.join("split.csv");
    let mut splits = HashMap::new();
    for rec in read_csv(&split_path, &["id", "split"])? {
        let id: String = field(&rec, 0, &split_path)?;
        let raw: String = field(&rec, 1, &split_path)?;
        let s =
            Split::parse(&raw).ok_or_else(|| validation(&id, format!("unknown split '{raw}'")))?;
        splits.insert(id, s);
    }

    let kp_path = dir.join("keypoints.csv");
    let has_keypoints = kp_path.exists();
    let mut keypoints: HashMap<String, Keypoints> = HashMap::new();
    if has_keypoints {
        for rec in read_csv(&kp_path, &["id", "part_id", "x", "y", "visible"])? {
            let id: String = field(&rec, 0, &kp_path)?;
            let visible: u8 = field(&rec, 4, &kp_path)?;
            let k = Keypoint {
                part_id: field(&rec, 1, &kp_path)?,
                x: field(&rec, 2, &kp_path)?,
                y: field(&rec, 3, &kp_path)?,
                visible: match visible {
                    0 => false,
                    1 => true,
                    v => {
                        return Err(validation(
                            &id,
                            format!("visible flag must be 0 or 1, got {v}"),
                        ))
                    }
                },
            };
            if k.visible && !((0.0..=1.0).contains(&k.x) && (0.0..=1.0).contains(&k.y)) {
                return Err(validation(
                    &id,
                    format!(
                        "keypoint of part {} at ({}, {}) is outside the image",
                        k.part_id, k.x, k.y
                    ),
                ));
            }
            if !labels.contains_key(&id) {
                return Err(validation(
                    &id,
                    "keypoints.csv references an unknown sample",
                ));
            }
            keypoints.entry(id).or_default().push(k);
        }
    }
    let has_masks = dir.join("masks").is_dir();

    let ids: Vec<(String, usize)> = labels.into_iter().collect();
    let samples = ids
        .par_iter()
        .map(|(id, class_id)| -> Result<AnnotatedSample> {
            let split = *splits
                .get(id)
                .ok_or_else(|| validation(id, "missing from split.csv"))?;
            let image = read_image(&dir.join("images").join(format!("{id}.png")))?;
            let (h, w) = (image.height(), image.width());
            let part_mask = if has_masks {
                let path = dir.join("masks").join(format!("{id}.png"));
                if !path.exists() {
                    return Err(validation(
                        id,
                        format!("mask file {} is missing", path.display()),
                    ));
                }
                let m = read_mask(&path)?;
                if m.dim() != (h, w) {
                    return Err(validation(
                        id,
                        format!("mask is {:?} but image is {h}x{w}", m.dim()),
                    ));
                }
                Some(m)
            } else {
                None
            };
            let kps = if has_keypoints {
                let kps = keypoints.get(id).cloned().unwrap_or_default();
                if let Some(m) = &part_mask {
                    for k in kps.iter().filter(|k| k.visible) {
                        let i = ((k.y * h as f64).floor() as usize).min(h - 1);
                        let j = ((k.x * w as f64).floor() as usize).min(w - 1);
                        if m[[i, j]] != k.part_id {
                            return Err(validation(
                                id,
                                format!(
                                    "keypoint of part {} lies on mask value {} at pixel ({i}, {j})",
                                    k.part_id,
                                    m[[i, j]]
                                ),
                            ));
                        }
                    }
                }
                Some(kps)
            } else {
                None
            };
            let fg_mask = part_mask.as_ref().map(|m| m.mapv(|v| v > 0));
            Ok(AnnotatedSample {
                id: id.clone(),
                image,
                class_id: *class_id,
                split,
                part_mask,
                keypoints: kps,
                fg_mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        root: dir.to_path_buf(),
        samples,
        has_masks,
        has_keypoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            classes: 3,
            images_per_class: 4,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn split_fractions() {
        let mut counts = [0usize; 3];
        for i in 0..20000 {
            counts[split_for(7, i) as usize] += 1;
        }
        assert!((counts[0] as f64 / 20000.0 - 0.7).abs() < 0.02);
        assert!((counts[1] as f64 / 20000.0 - 0.1).abs() < 0.02);
        assert!((counts[2] as f64 / 20000.0 - 0.2).abs() < 0.02);
    }

    #[test]
    fn rendering_is_deterministic() {
        let s = small();
        let a = render(&s, 5);
        let b = render(&s, 5);
        assert_eq!(a.rgb, b.rgb);
        assert_eq!(a.mask, b.mask);
        assert_ne!(render(&s, 6).rgb, a.rgb);
    }

    #[test]
    fn every_part_is_drawn_and_keypoints_hit_their_part() {
        for flags in [(false, false), (true, false), (false, true), (true, true)] {
            let s = SynthSpec {
                multi_instance: flags.0,
                irregular_parts: flags.1,
                ..small()
            };
            for i in 0..12 {
                let r = render(&s, i);
                for k in &r.keypoints {
                    assert!(
                        k.visible,
                        "part {} missing in sample {i} {flags:?}",
                        k.part_id
                    );
                    let row = (k.y * 64.0).floor() as usize;
                    let col = (k.x * 64.0).floor() as usize;
                    assert_eq!(r.mask[[row, col]] as u32, k.part_id);
                }
                // object stays inside the canvas
                assert!(r.mask.row(0).iter().all(|&v| v == 0));
                assert!(r.mask.column(63).iter().all(|&v| v == 0));
            }
        }
    }

    #[test]
    fn validation_rules() {
        assert!(SynthSpec {
            classes: 1,
            ..small()
        }
        .validate(8)
        .is_err());
        assert!(SynthSpec {
            parts_per_object: 0,
            ..small()
        }
        .validate(8)
        .is_err());
        assert!(SynthSpec {
            image_side: 60,
            ..small()
        }
        .validate(8)
        .is_err());
        assert!(small().validate(8).is_ok());
    }
}
