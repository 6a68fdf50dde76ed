//! Seeded generator of lesion-like images.
//!
//! Backgrounds are multi-octave value noise with no class information. Each
//! image carries one small lesion whose shape or texture family is the class.
//! Pixel values are quantized to 8 bits so a saved directory reloads exactly.

use std::f64::consts::PI;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::error::{Error, Result};

pub const MAX_CLASSES: usize = 8;
pub const MIN_LESION_FRACTION: f64 = 0.01;
pub const MAX_LESION_FRACTION: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionFamily {
    Ellipse,
    Ring,
    Crescent,
    Speckled,
    Cross,
    Square,
    Triangle,
    Twin,
}

impl LesionFamily {
    pub const ALL: [LesionFamily; MAX_CLASSES] = [
        LesionFamily::Ellipse,
        LesionFamily::Ring,
        LesionFamily::Crescent,
        LesionFamily::Speckled,
        LesionFamily::Cross,
        LesionFamily::Square,
        LesionFamily::Triangle,
        LesionFamily::Twin,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LesionFamily::Ellipse => "ellipse",
            LesionFamily::Ring => "ring",
            LesionFamily::Crescent => "crescent",
            LesionFamily::Speckled => "speckled",
            LesionFamily::Cross => "cross",
            LesionFamily::Square => "square",
            LesionFamily::Triangle => "triangle",
            LesionFamily::Twin => "twin",
        }
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Sum of octaves of bilinearly-smoothed lattice noise, rescaled to `[0, 1]`.
fn value_noise<R: Rng + ?Sized>(size: usize, octaves: usize, rng: &mut R) -> Array2<f64> {
    let mut acc = Array2::<f64>::zeros((size, size));
    let mut amp = 1.0;
    for o in 0..octaves {
        let cells = 2usize << o;
        let lattice = Array2::from_shape_fn((cells + 1, cells + 1), |_| rng.random::<f64>());
        let step = size as f64 / cells as f64;
        for ((y, x), v) in acc.indexed_iter_mut() {
            let fy = y as f64 / step;
            let fx = x as f64 / step;
            let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
            let (ty, tx) = (fy - iy as f64, fx - ix as f64);
            let (sy, sx) = (ty * ty * (3.0 - 2.0 * ty), tx * tx * (3.0 - 2.0 * tx));
            let a = lattice[[iy, ix]] * (1.0 - sx) + lattice[[iy, ix + 1]] * sx;
            let b = lattice[[iy + 1, ix]] * (1.0 - sx) + lattice[[iy + 1, ix + 1]] * sx;
            *v += amp * (a * (1.0 - sy) + b * sy);
        }
        amp *= 0.5;
    }
    let lo = acc.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    acc.mapv(|v| (v - lo) / (hi - lo).max(1e-12))
}

struct Shape {
    family: LesionFamily,
    cx: f64,
    cy: f64,
    scale: f64,
    angle: f64,
    a: f64,
    b: f64,
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        // Rotate into the shape frame.
        let u = (c * dx + s * dy) / self.scale;
        let v = (-s * dx + c * dy) / self.scale;
        let r = (u * u + v * v).sqrt();
        match self.family {
            LesionFamily::Ellipse => (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0,
            LesionFamily::Ring => r <= self.a && r >= 0.55 * self.a,
            LesionFamily::Crescent => {
                let off = 0.55 * self.a;
                r <= self.a && ((u - off).powi(2) + v * v).sqrt() > 0.8 * self.a
            }
            LesionFamily::Speckled => r <= self.a,
            LesionFamily::Cross => {
                (u.abs() <= self.a && v.abs() <= 1.6) || (v.abs() <= self.a && u.abs() <= 1.6)
            }
            LesionFamily::Square => u.abs() <= self.b && v.abs() <= self.b,
            LesionFamily::Triangle => {
                // Equilateral triangle with circumradius a.
                let k = 3f64.sqrt();
                v >= -self.a / 2.0 && k * u + v <= self.a && -k * u + v <= self.a
            }
            LesionFamily::Twin => {
                let d = 0.9 * self.a;
                let r2 = 0.45 * self.a;
                ((u - d / 2.0).powi(2) + v * v).sqrt() <= r2 || ((u + d / 2.0).powi(2) + v * v).sqrt() <= r2
            }
        }
    }
}

fn render_one<R: Rng + ?Sized>(index: usize, label: usize, size: usize, rng: &mut R) -> Sample {
    let family = LesionFamily::ALL[label];
    let scale = size as f64 / 64.0;
    let area = (size * size) as f64;
    loop {
        let bg_tint = [
            0.80 + rng.random_range(-0.05..0.05),
            0.62 + rng.random_range(-0.05..0.05),
            0.52 + rng.random_range(-0.05..0.05),
        ];
        let lesion_tint = [
            0.42 + rng.random_range(-0.06..0.06),
            0.20 + rng.random_range(-0.05..0.05),
            0.16 + rng.random_range(-0.05..0.05),
        ];
        let noise = value_noise(size, 4, rng);
        let grain = value_noise(size, 2, rng);
        let a = rng.random_range(6.5..9.0);
        let b = rng.random_range(4.0..6.0);
        let margin = (a + 2.0) * scale;
        let shape = Shape {
            family,
            cx: rng.random_range(margin..size as f64 - margin),
            cy: rng.random_range(margin..size as f64 - margin),
            scale,
            angle: rng.random_range(0.0..2.0 * PI),
            a,
            b,
        };
        let speckle_phase = rng.random_range(0.0..2.0 * PI);
        let mask = Array2::from_shape_fn((size, size), |(y, x)| shape.contains(x as f64 + 0.5, y as f64 + 0.5));
        let covered = mask.iter().filter(|&&m| m).count() as f64 / area;
        if !(MIN_LESION_FRACTION..=MAX_LESION_FRACTION).contains(&covered) {
            continue;
        }
        let image = Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
            let n = noise[[y, x]];
            let bg = bg_tint[c] * (0.72 + 0.36 * n);
            if !mask[[y, x]] {
                return quantize(bg);
            }
            let g = grain[[y, x]];
            let lesion = lesion_tint[c] * (0.9 + 0.2 * g);
            let v = if family == LesionFamily::Speckled {
                let (fx, fy) = (x as f64 / scale, y as f64 / scale);
                let spot = ((fx * 1.9 + speckle_phase).sin() * (fy * 1.9 - speckle_phase).sin()) > 0.35;
                if spot {
                    0.5 * (lesion + bg)
                } else {
                    lesion
                }
            } else {
                lesion
            };
            quantize(v)
        });
        return Sample {
            image_id: format!("synth/{index:05}"),
            image,
            label,
            lesion_mask: Some(mask),
        };
    }
}

/// `n_samples` images of `image_size × image_size`. Each label is drawn
/// uniformly from the first `n_classes` lesion families.
pub fn generate_synthetic_lesion_dataset(n_samples: usize, n_classes: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    if n_classes == 0 || n_classes > MAX_CLASSES {
        return Err(Error::Config {
            field: "n_classes".into(),
            reason: format!("must be in 1..={MAX_CLASSES}, got {n_classes}"),
        });
    }
    if image_size < 32 {
        return Err(Error::Config {
            field: "image_size".into(),
            reason: format!("must be at least 32, got {image_size}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n_samples)
        .map(|i| {
            let label = rng.random_range(0..n_classes);
            render_one(i, label, image_size, &mut rng)
        })
        .collect();
    Ok(Dataset {
        samples,
        num_classes: n_classes,
        class_names: LesionFamily::ALL[..n_classes].iter().map(|f| f.name().to_string()).collect(),
    })
}

/// `(x, y, width, height)` of the set pixels, if any.
pub fn mask_bbox(mask: &Array2<bool>) -> Option<[usize; 4]> {
    let mut bbox: Option<[usize; 4]> = None;
    for ((y, x), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        let b = bbox.get_or_insert([x, y, x, y]);
        b[0] = b[0].min(x);
        b[1] = b[1].min(y);
        b[2] = b[2].max(x);
        b[3] = b[3].max(y);
    }
    bbox.map(|[x0, y0, x1, y1]| [x0, y0, x1 - x0 + 1, y1 - y0 + 1])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub label: usize,
    pub lesion_bbox: Option<[usize; 4]>,
    pub image: String,
    pub mask: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub samples: Vec<ManifestEntry>,
}

/// Writes `images/*.png`, `masks/*.png` and `manifest.json` under `dir`.
pub fn save_dataset_dir(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut entries = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        let (h, w, _) = s.image.dim();
        let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| (s.image[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([px(0), px(1), px(2)])
        });
        let image_rel = format!("images/{i:05}.png");
        img.save(dir.join(&image_rel))?;
        let mask_rel = match &s.lesion_mask {
            Some(m) => {
                let rel = format!("masks/{i:05}.png");
                let g = GrayImage::from_fn(w as u32, h as u32, |x, y| {
                    Luma([if m[[y as usize, x as usize]] { 255 } else { 0 }])
                });
                g.save(dir.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            image_id: s.image_id.clone(),
            label: s.label,
            lesion_bbox: s.lesion_mask.as_ref().and_then(mask_bbox),
            image: image_rel,
            mask: mask_rel,
        });
    }
    let manifest = Manifest {
        num_classes: dataset.num_classes,
        class_names: dataset.class_names.clone(),
        samples: entries,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in manifest.samples {
        if e.label >= manifest.num_classes {
            return Err(Error::InvalidLabel {
                label: e.label,
                num_classes: manifest.num_classes,
            });
        }
        let img = image::open(dir.join(&e.image))?.into_rgb8();
        let (w, h) = img.dimensions();
        let image = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
        });
        let lesion_mask = match e.mask {
            Some(rel) => {
                let m = image::open(dir.join(rel))?.into_luma8();
                Some(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                    m.get_pixel(x as u32, y as u32).0[0] >= 128
                }))
            }
            None => None,
        };
        samples.push(Sample {
            image_id: e.image_id,
            image,
            label: e.label,
            lesion_mask,
        });
    }
    Ok(Dataset {
        samples,
        num_classes: manifest.num_classes,
        class_names: manifest.class_names,
    })
}
