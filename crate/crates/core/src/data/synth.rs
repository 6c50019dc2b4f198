//! Procedural two-domain shape corpora.
//!
//! Both domains draw the same shape classes, palette and background
//! texture family. They differ in how the object is posed:
//!
//! * `canonical`: large, upright, near the image centre, no clutter — the
//!   eye-level "object photo" regime;
//! * `overhead`: same size, but uniformly rotated and placed anywhere the
//!   object fits — the top-down regime where an object can face any way and
//!   sit in any part of the frame. Distractor blobs are available through
//!   `clutter` but off by default.
//!
//! Class `c` is `shapes[c]`; item `i` has class `i % K`, so class counts are
//! exactly balanced. Each item draws from its own RNG sub-stream, which makes
//! the corpus a pure function of `(spec, count, seed)`.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corpus::{CorpusHeader, CorpusManifest, ManifestRecord, Split};
use super::pnm::{write_pgm, write_ppm, GrayImage};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::tensor::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainKind {
    Canonical,
    Overhead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disc,
    Square,
    Bar,
    Triangle,
    Cross,
    Ring,
}

impl ShapeKind {
    pub const VOCABULARY: [ShapeKind; 6] = [
        ShapeKind::Disc,
        ShapeKind::Square,
        ShapeKind::Bar,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
    ];

    /// Membership test in object coordinates (unit radius, y pointing down).
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Disc => u * u + v * v <= 1.0,
            ShapeKind::Square => u.abs().max(v.abs()) <= 0.8,
            ShapeKind::Bar => u.abs() <= 1.0 && v.abs() <= 0.3,
            ShapeKind::Triangle => {
                // Apex up: vertices (0,-1), (±0.866, 0.5).
                let s = 3f64.sqrt();
                v <= 0.5 && s * u - v <= 1.0 && -s * u - v <= 1.0
            }
            ShapeKind::Cross => {
                (u.abs() <= 1.0 && v.abs() <= 0.3) || (v.abs() <= 1.0 && u.abs() <= 0.3)
            }
            ShapeKind::Ring => {
                let r2 = u * u + v * v;
                (0.3..=1.0).contains(&r2)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationPolicy {
    Upright,
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Placement {
    /// Centre offset uniform in `±jitter·side`.
    Centered { jitter: f64 },
    /// Anywhere the object's bounding circle fits.
    Anywhere,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub kind: DomainKind,
    pub classes: usize,
    pub image_size: usize,
    pub shapes: Vec<ShapeKind>,
    /// Mean number of distractor blobs per image.
    pub clutter: f64,
    pub rotation: RotationPolicy,
    pub placement: Placement,
    /// Object radius as a fraction of half the image side.
    pub scale: (f64, f64),
    pub background_seed: u64,
    /// When set, a per-patch label grid (patch side in pixels) is written per
    /// image: 0 = background, `class + 1` = object.
    #[serde(default)]
    pub label_grid: Option<usize>,
}

impl DomainSpec {
    pub fn canonical(classes: usize, image_size: usize) -> Self {
        Self {
            kind: DomainKind::Canonical,
            classes,
            image_size,
            shapes: ShapeKind::VOCABULARY[..classes.min(6)].to_vec(),
            clutter: 0.0,
            rotation: RotationPolicy::Upright,
            placement: Placement::Centered { jitter: 0.06 },
            scale: (0.6, 0.8),
            background_seed: 0,
            label_grid: None,
        }
    }

    pub fn overhead(classes: usize, image_size: usize) -> Self {
        Self {
            kind: DomainKind::Overhead,
            rotation: RotationPolicy::Uniform,
            placement: Placement::Anywhere,
            ..Self::canonical(classes, image_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| {
            Err(Error::Config {
                key: format!("domain.{key}"),
                reason,
            })
        };
        if self.classes < 2 {
            return bad("classes", format!("need at least 2 classes, got {}", self.classes));
        }
        if self.shapes.len() != self.classes {
            return bad(
                "shapes",
                format!("{} shapes for {} classes", self.shapes.len(), self.classes),
            );
        }
        if self.image_size < 4 {
            return bad("image_size", format!("{} is too small", self.image_size));
        }
        let (lo, hi) = self.scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("scale", format!("({lo}, {hi}) not within (0, 1]"));
        }
        if !(self.clutter >= 0.0 && self.clutter.is_finite()) {
            return bad("clutter", format!("{} must be non-negative", self.clutter));
        }
        if let Some(p) = self.label_grid {
            if p == 0 || self.image_size % p != 0 {
                return bad("label_grid", format!("patch {p} does not divide {}", self.image_size));
            }
        }
        Ok(())
    }
}

/// Muted earth/foliage/asphalt palette for objects; backgrounds are drawn
/// from the same family at lower saturation.
const PALETTE: [[f64; 3]; 8] = [
    [0.85, 0.20, 0.15],
    [0.15, 0.45, 0.85],
    [0.95, 0.80, 0.20],
    [0.20, 0.70, 0.30],
    [0.90, 0.90, 0.90],
    [0.55, 0.25, 0.65],
    [0.95, 0.55, 0.10],
    [0.10, 0.10, 0.12],
];

const SUPERSAMPLE: usize = 4;

/// Smooth value noise on a coarse lattice, bilinearly interpolated.
fn value_noise(size: usize, cells: usize, rng: &mut Rng) -> Vec<f64> {
    let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.uniform()).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let fy = (y as f64 + 0.5) / size as f64 * cells as f64;
            let fx = (x as f64 + 0.5) / size as f64 * cells as f64;
            let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
            let (ty, tx) = (fy - iy as f64, fx - ix as f64);
            let at = |r: usize, c: usize| lattice[r * (cells + 1) + c];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out[y * size + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

struct Object {
    shape: ShapeKind,
    cx: f64,
    cy: f64,
    radius: f64,
    angle: f64,
    color: [f64; 3],
}

impl Object {
    /// Fraction of the pixel's supersamples inside the object.
    fn coverage(&self, y: usize, x: usize) -> f64 {
        let (sin, cos) = self.angle.sin_cos();
        let mut hits = 0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64 - self.cy;
                let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64 - self.cx;
                // Rotate into object frame.
                let u = (cos * px + sin * py) / self.radius;
                let v = (-sin * px + cos * py) / self.radius;
                if self.shape.contains(u, v) {
                    hits += 1;
                }
            }
        }
        hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
    }
}

fn paint(pixels: &mut [[f64; 3]], size: usize, obj: &Object) -> Vec<f64> {
    let mut cover = vec![0.0; size * size];
    let r = obj.radius.ceil() as isize + 1;
    let (y0, y1) = ((obj.cy as isize - r).max(0), (obj.cy as isize + r).min(size as isize - 1));
    let (x0, x1) = ((obj.cx as isize - r).max(0), (obj.cx as isize + r).min(size as isize - 1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (y, x) = (y as usize, x as usize);
            let a = obj.coverage(y, x);
            if a > 0.0 {
                let px = &mut pixels[y * size + x];
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - a) + obj.color[c] * a;
                }
                cover[y * size + x] = a;
            }
        }
    }
    cover
}

/// One rendered sample.
pub struct SyntheticSample {
    pub image: ImageTensor,
    pub class: usize,
    /// Object coverage per pixel, `[0, 1]`, row-major.
    pub coverage: Vec<f64>,
}

/// Renders item `index` of the domain. Pure in `(spec, seed, index)`.
pub fn render_sample(spec: &DomainSpec, seed: u64, index: usize) -> Result<SyntheticSample> {
    spec.validate()?;
    let size = spec.image_size;
    let s = size as f64;
    let class = index % spec.classes;
    let mut rng = Rng::new(seed).substream(&format!("item-{index}"));
    let mut bg_rng = Rng::new(spec.background_seed ^ seed).substream(&format!("background-{index}"));

    // Background: two palette colours, desaturated, blended by value noise.
    let base_a = PALETTE[bg_rng.below(PALETTE.len())];
    let base_b = PALETTE[bg_rng.below(PALETTE.len())];
    let noise = value_noise(size, 4, &mut bg_rng);
    let grain = value_noise(size, (size / 4).max(1), &mut bg_rng);
    let mut pixels: Vec<[f64; 3]> = (0..size * size)
        .map(|i| {
            let t = noise[i];
            let g = 0.9 + 0.2 * grain[i];
            let mut px = [0.0; 3];
            for c in 0..3 {
                let mix = base_a[c] * (1.0 - t) + base_b[c] * t;
                px[c] = ((0.35 + 0.3 * mix) * g).clamp(0.0, 1.0);
            }
            px
        })
        .collect();

    // Distractors are drawn before the object so it is never occluded.
    let blobs = if spec.clutter > 0.0 {
        let whole = spec.clutter.floor() as usize;
        whole + usize::from(rng.bernoulli(spec.clutter - whole as f64))
    } else {
        0
    };
    for _ in 0..blobs {
        let radius = rng.uniform_range(0.06, 0.12) * s / 2.0;
        let blob = Object {
            shape: ShapeKind::Disc,
            cx: rng.uniform_range(0.0, s),
            cy: rng.uniform_range(0.0, s),
            radius,
            angle: 0.0,
            color: PALETTE[rng.below(PALETTE.len())],
        };
        paint(&mut pixels, size, &blob);
    }

    let radius = rng.uniform_range(spec.scale.0, spec.scale.1) * s / 2.0;
    let angle = match spec.rotation {
        RotationPolicy::Upright => 0.0,
        RotationPolicy::Uniform => rng.uniform_range(0.0, 2.0 * PI),
    };
    let (cx, cy) = match spec.placement {
        Placement::Centered { jitter } => (
            s / 2.0 + rng.uniform_range(-jitter, jitter) * s,
            s / 2.0 + rng.uniform_range(-jitter, jitter) * s,
        ),
        Placement::Anywhere => {
            let lo = radius.min(s / 2.0);
            (rng.uniform_range(lo, s - lo), rng.uniform_range(lo, s - lo))
        }
    };
    let object = Object {
        shape: spec.shapes[class],
        cx,
        cy,
        radius,
        angle,
        color: PALETTE[rng.below(PALETTE.len())],
    };
    let coverage = paint(&mut pixels, size, &object);

    let data = pixels
        .iter()
        .flat_map(|px| px.iter().map(|&v| v.clamp(0.0, 1.0) as f32))
        .collect();
    Ok(SyntheticSample {
        image: ImageTensor::new(size, size, data)?,
        class,
        coverage,
    })
}

/// Per-patch label grid: a cell is the object's class + 1 when at least half
/// of its area is covered, else 0.
pub fn label_grid(sample: &SyntheticSample, size: usize, patch: usize) -> GrayImage {
    let g = size / patch;
    let mut data = vec![0u8; g * g];
    for gy in 0..g {
        for gx in 0..g {
            let mut area = 0.0;
            for y in gy * patch..(gy + 1) * patch {
                for x in gx * patch..(gx + 1) * patch {
                    area += sample.coverage[y * size + x];
                }
            }
            if area >= 0.5 * (patch * patch) as f64 {
                data[gy * g + gx] = (sample.class + 1) as u8;
            }
        }
    }
    GrayImage {
        height: g,
        width: g,
        data,
    }
}

/// Writes `count` images plus manifest into `out_dir`.
pub fn gen_synthetic_domain(
    spec: &DomainSpec,
    count: usize,
    seed: u64,
    split: Split,
    id: &str,
    out_dir: &Path,
) -> Result<CorpusManifest> {
    spec.validate()?;
    if count % spec.classes != 0 {
        return Err(Error::invalid(format!(
            "count {count} is not divisible by {} classes",
            spec.classes
        )));
    }
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    if spec.label_grid.is_some() && split != Split::Unlabeled {
        let masks_dir = out_dir.join("masks");
        std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
    }
    let labelled = split != Split::Unlabeled;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let sample = render_sample(spec, seed, i)?;
        let path = format!("images/{i:06}.ppm");
        write_ppm(&out_dir.join(&path), &sample.image)?;
        let mask = match spec.label_grid {
            Some(p) if labelled => {
                let m = format!("masks/{i:06}.pgm");
                write_pgm(&out_dir.join(&m), &label_grid(&sample, spec.image_size, p))?;
                Some(m)
            }
            _ => None,
        };
        records.push(ManifestRecord {
            path,
            label: labelled.then_some(sample.class),
            mask,
        });
    }
    let classes = match (labelled, spec.label_grid) {
        (false, _) => None,
        (true, Some(_)) => Some(spec.classes + 1),
        (true, None) => Some(spec.classes),
    };
    let manifest = CorpusManifest {
        root: out_dir.to_path_buf(),
        header: CorpusHeader {
            id: id.to_string(),
            split,
            image_size: spec.image_size,
            classes,
            note: format!(
                "procedurally generated {:?} shapes corpus, seed {seed}; free of third-party content",
                spec.kind
            )
            .to_lowercase(),
        },
        records,
    };
    manifest.write()?;
    Ok(manifest)
}
