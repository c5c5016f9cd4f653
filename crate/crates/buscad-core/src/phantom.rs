//! Synthetic ultrasound-like dataset with known tight lesion boxes and
//! simulated coarse annotations.
//!
//! Each patient gets a fixed class and a lesion prototype; each image
//! places an elliptical lesion on speckle. Benign lesions have a smooth
//! boundary and a quiet interior; malignant lesions have an irregular
//! radius-perturbed boundary, a noisy interior, and a darker posterior
//! shadow strip below the lesion. The class signal therefore lives in and
//! just below the lesion, so a well-placed box scores higher than a
//! misplaced one.
//!
//! The manifest carries a jittered coarse box as the manual ROI; the
//! sidecar `ground_truth.json` maps every image to its tight box for
//! evaluation only.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::data::{BoundingBox, DataError};
use crate::rng::derived_rng;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("need at least 5 patients, got {0}")]
    TooFewPatients(usize),
    #[error("images_per_patient must be >= 1")]
    NoImages,
    #[error("coarse_jitter must be in [0, 0.5], got {0}")]
    BadJitter(f64),
    #[error("image_size must be >= 64, got {0}")]
    ImageTooSmall(usize),
    #[error("lesion placement failed after {0} attempts")]
    PlacementFailed(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("png encode: {0}")]
    Png(#[from] image::ImageError),
}

#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub n_patients: usize,
    pub images_per_patient: usize,
    pub image_size: usize,
    /// relative inflation/shrink/translation of the emitted coarse box
    pub coarse_jitter: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            n_patients: 60,
            images_per_patient: 10,
            image_size: 256,
            coarse_jitter: 0.25,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.n_patients < 5 {
            return Err(PhantomError::TooFewPatients(self.n_patients));
        }
        if self.images_per_patient < 1 {
            return Err(PhantomError::NoImages);
        }
        if !(0.0..=0.5).contains(&self.coarse_jitter) {
            return Err(PhantomError::BadJitter(self.coarse_jitter));
        }
        if self.image_size < 64 {
            return Err(PhantomError::ImageTooSmall(self.image_size));
        }
        Ok(())
    }
}

/// Per-patient lesion prototype.
pub(crate) struct Prototype {
    pub malignant: bool,
    semi_a: f32,
    semi_b: f32,
}

pub(crate) fn prototype(spec: &PhantomSpec, patient: usize) -> Prototype {
    let mut rng = derived_rng(spec.seed, "phantom-patient", patient as u64);
    let s = spec.image_size as f32;
    // full axes 12%..30% of the side
    let semi_a = rng.random_range(0.06..0.15) * s;
    let semi_b = rng.random_range(0.06..0.15) * s;
    Prototype {
        malignant: patient % 2 == 1,
        semi_a,
        semi_b,
    }
}

pub(crate) struct SynthImage {
    pub pixels: Array2<f32>,
    /// lesion-pixel mask, retained so tests can check tight-box minimality
    #[allow(dead_code)]
    pub mask: Array2<bool>,
    pub tight: BoundingBox,
    pub coarse: BoundingBox,
}

fn smoothstep(lo: f32, hi: f32, v: f32) -> f32 {
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Jitter a tight box into a coarse annotation: per-axis scale in
/// [1-j, 1+j], center shift up to j of the respective extent, clipped to
/// the image. With j <= 0.25 the worst-case IoU with the tight box stays
/// above 0.3.
pub(crate) fn jitter_box(
    tight: &BoundingBox,
    jitter: f64,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> BoundingBox {
    if jitter == 0.0 {
        return *tight;
    }
    let j = jitter as f32;
    let sw: f32 = rng.random_range(1.0 - j..1.0 + j);
    let sh: f32 = rng.random_range(1.0 - j..1.0 + j);
    let dx: f32 = rng.random_range(-j..j) * tight.w;
    let dy: f32 = rng.random_range(-j..j) * tight.h;
    let (cx, cy) = tight.center();
    let w = tight.w * sw;
    let h = tight.h * sh;
    let raw = BoundingBox {
        x: cx + dx - 0.5 * w,
        y: cy + dy - 0.5 * h,
        w,
        h,
    };
    raw.clip(size, size).expect("jittered box overlaps image")
}

pub(crate) fn synth_image(
    spec: &PhantomSpec,
    proto: &Prototype,
    patient: usize,
    image: usize,
) -> Result<SynthImage, PhantomError> {
    let s = spec.image_size;
    let sf = s as f32;
    let mut rng = derived_rng(
        spec.seed,
        "phantom-image",
        (patient as u64) << 20 | image as u64,
    );

    // per-image lesion geometry
    let a = proto.semi_a * rng.random_range(0.9..1.1);
    let b = proto.semi_b * rng.random_range(0.9..1.1);
    // irregular boundary harmonics for malignant lesions
    let mut harmonics: Vec<(f32, f32, f32)> = Vec::new();
    if proto.malignant {
        for m in 3..=5 {
            harmonics.push((
                m as f32,
                rng.random_range(0.04..0.09),
                rng.random_range(0.0..std::f32::consts::TAU),
            ));
        }
    }
    let rho_max: f32 = 1.0 + harmonics.iter().map(|h| h.1).sum::<f32>();

    // placement with bounded retries; the perturbed ellipse must fit
    let margin = 2.0;
    let mut center = None;
    const ATTEMPTS: usize = 16;
    for _ in 0..ATTEMPTS {
        let lo_x = a * rho_max + margin;
        let hi_x = sf - a * rho_max - margin;
        let lo_y = b * rho_max + margin;
        let hi_y = sf - b * rho_max - margin;
        if lo_x >= hi_x || lo_y >= hi_y {
            continue;
        }
        // keep some room below for the shadow to be visible
        let cy_hi = hi_y.min(sf * 0.85);
        let cx = rng.random_range(lo_x..hi_x);
        let cy = rng.random_range(lo_y..cy_hi.max(lo_y + 1.0));
        center = Some((cx, cy));
        break;
    }
    let (cx, cy) = center.ok_or(PhantomError::PlacementFailed(ATTEMPTS))?;

    let rho = |theta: f32| -> f32 {
        1.0 + harmonics
            .iter()
            .map(|(m, c, phi)| c * (m * theta + phi).cos())
            .sum::<f32>()
    };

    // rasterize the lesion mask and the soft blend weight
    let mut mask = Array2::from_elem((s, s), false);
    let mut blend = Array2::<f32>::zeros((s, s));
    for y in 0..s {
        for x in 0..s {
            let dx = (x as f32 - cx) / a;
            let dy = (y as f32 - cy) / b;
            let r = (dx * dx + dy * dy).sqrt();
            if r > rho_max + 0.15 {
                continue;
            }
            let theta = dy.atan2(dx);
            let f = r / rho(theta);
            if f <= 1.0 {
                mask[(y, x)] = true;
            }
            // soft edge: 1 inside, fading to 0 slightly outside
            blend[(y, x)] = 1.0 - smoothstep(0.92, 1.08, f);
        }
    }

    // tight box = minimal rectangle containing all lesion pixels
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for y in 0..s {
        for x in 0..s {
            if mask[(y, x)] {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if x0 == usize::MAX {
        return Err(PhantomError::PlacementFailed(ATTEMPTS));
    }
    let tight = BoundingBox::new(
        x0 as f32,
        y0 as f32,
        (x1 - x0 + 1) as f32,
        (y1 - y0 + 1) as f32,
    )?;

    // compose: depth-graded speckle background, lesion interior texture,
    // posterior shadow for malignant lesions
    let (interior_base, interior_sigma) = if proto.malignant {
        (0.30f32, 0.28f32)
    } else {
        (0.22f32, 0.05f32)
    };
    let mut pixels = Array2::<f32>::zeros((s, s));
    let shadow_x0 = cx - 0.8 * a;
    let shadow_x1 = cx + 0.8 * a;
    let lesion_bottom = y1 as f32;
    for y in 0..s {
        for x in 0..s {
            let n: f32 = StandardNormal.sample(&mut rng);
            let mut bg = (0.45 + 0.10 * (y as f32 / sf)) * (1.0 + 0.15 * n);
            if proto.malignant && (y as f32) > lesion_bottom {
                let fx = x as f32;
                if fx >= shadow_x0 && fx <= shadow_x1 {
                    let depth = (y as f32 - lesion_bottom) / (0.5 * sf);
                    let fade = smoothstep(0.0, 1.0, depth);
                    let lateral = smoothstep(0.0, 0.1 * a.max(4.0), (fx - shadow_x0).min(shadow_x1 - fx));
                    let strength = (1.0 - fade) * lateral;
                    bg *= 1.0 - 0.45 * strength;
                }
            }
            let m: f32 = StandardNormal.sample(&mut rng);
            let lesion = interior_base * (1.0 + interior_sigma * m);
            let w = blend[(y, x)];
            pixels[(y, x)] = (w * lesion + (1.0 - w) * bg).clamp(0.0, 1.0);
        }
    }

    let mut jrng = derived_rng(
        spec.seed,
        "phantom-jitter",
        (patient as u64) << 20 | image as u64,
    );
    let coarse = jitter_box(&tight, spec.coarse_jitter, s, &mut jrng);

    Ok(SynthImage {
        pixels,
        mask,
        tight,
        coarse,
    })
}

fn to_png_bytes(pixels: &Array2<f32>) -> Result<Vec<u8>, PhantomError> {
    let (h, w) = (pixels.nrows(), pixels.ncols());
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(pixels[(y as usize, x as usize)] * 255.0).round() as u8])
    });
    let mut out = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)?;
    Ok(out)
}

/// Generate the dataset under `out_dir` and return the manifest path.
///
/// Layout: `manifest.csv`, `images/*.png`, and `ground_truth.json`
/// (image id to tight box, for evaluation only). Byte-identical across
/// runs for a fixed spec.
pub fn generate(spec: &PhantomSpec, out_dir: &Path) -> Result<PathBuf, PhantomError> {
    spec.validate()?;
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir)?;

    let mut manifest = String::from("image_id,patient_id,label,x,y,w,h,image_path\n");
    let mut ground_truth: BTreeMap<String, BoundingBox> = BTreeMap::new();

    for p in 0..spec.n_patients {
        let proto = prototype(spec, p);
        let patient_id = format!("p{p:03}");
        for i in 0..spec.images_per_patient {
            let image_id = format!("{patient_id}_i{i:02}");
            let synth = synth_image(spec, &proto, p, i)?;
            let rel = format!("images/{image_id}.png");
            fs::write(out_dir.join(&rel), to_png_bytes(&synth.pixels)?)?;
            let cb = synth.coarse;
            manifest.push_str(&format!(
                "{image_id},{patient_id},{},{},{},{},{},{rel}\n",
                u8::from(proto.malignant),
                cb.x,
                cb.y,
                cb.w,
                cb.h,
            ));
            ground_truth.insert(image_id, synth.tight);
        }
    }

    let manifest_path = out_dir.join("manifest.csv");
    fs::write(&manifest_path, manifest)?;
    let gt_path = out_dir.join("ground_truth.json");
    fs::write(&gt_path, serde_json::to_string_pretty(&ground_truth)?)?;
    Ok(manifest_path)
}

/// Load the tight-box sidecar written by [`generate`].
pub fn load_ground_truth(path: &Path) -> Result<BTreeMap<String, BoundingBox>, PhantomError> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
