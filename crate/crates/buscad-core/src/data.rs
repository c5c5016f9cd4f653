//! Dataset model: image records, CSV manifests, patient-disjoint fold
//! planning, annotated-fraction selection, and ROI cropping.
//!
//! The manifest is a UTF-8 CSV with header
//! `image_id,patient_id,label,x,y,w,h,image_path`; empty box fields mean
//! the image carries only a class label. Images are 8- or 16-bit
//! grayscale PNGs, normalized to `[0, 1]` on load.

use std::collections::BTreeSet;
use std::fs::File;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::derived_rng;

/// Side length of classifier input crops.
pub const ROI_SIZE: usize = 224;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("manifest not found: {0}")]
    MissingManifest(PathBuf),
    #[error("manifest row {row}: {msg}")]
    MalformedRow { row: usize, msg: String },
    #[error("manifest row {row}: box outside image bounds")]
    BoxOutOfBounds { row: usize },
    #[error("invalid box: w={w}, h={h} (both must be positive)")]
    InvalidBox { w: f32, h: f32 },
    #[error("box has zero area after clipping to {width}x{height}")]
    EmptyClip { width: usize, height: usize },
    #[error("need at least {needed} patients, got {got}")]
    TooFewPatients { needed: usize, got: usize },
    #[error("annotation fraction must be in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("record {0} has no manual ROI; fraction selection expects fully annotated input")]
    MissingRoi(String),
    #[error("crop region is empty")]
    ZeroAreaCrop,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Axis-aligned rectangle in pixel coordinates, `(x, y)` top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
}

impl BoundingBox {
    pub fn new(x: f32, y: f32, w: f32, h: f32) -> Result<Self, DataError> {
        if !(w > 0.0 && h > 0.0 && x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite())
        {
            return Err(DataError::InvalidBox { w, h });
        }
        Ok(Self { x, y, w, h })
    }

    pub fn x2(&self) -> f32 {
        self.x + self.w
    }

    pub fn y2(&self) -> f32 {
        self.y + self.h
    }

    pub fn area(&self) -> f32 {
        self.w * self.h
    }

    pub fn center(&self) -> (f32, f32) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    /// Clip to an image of the given size; zero area after clipping is an error.
    pub fn clip(&self, width: usize, height: usize) -> Result<Self, DataError> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = self.x2().min(width as f32);
        let y1 = self.y2().min(height as f32);
        if x1 - x0 <= 0.0 || y1 - y0 <= 0.0 {
            return Err(DataError::EmptyClip { width, height });
        }
        Ok(Self {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }

    pub fn contains(&self, width: usize, height: usize) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x2() <= width as f32 && self.y2() <= height as f32
    }
}

/// Binary diagnosis label; malignant is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClassLabel {
    Benign,
    Malignant,
}

impl ClassLabel {
    pub fn index(self) -> usize {
        match self {
            ClassLabel::Benign => 0,
            ClassLabel::Malignant => 1,
        }
    }

    pub fn from_index(v: u8) -> Option<Self> {
        match v {
            0 => Some(ClassLabel::Benign),
            1 => Some(ClassLabel::Malignant),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnnotationKind {
    /// Both a class label and a manual ROI box.
    Fully,
    /// Class label only.
    Partial,
}

/// One grayscale image with its labels.
///
/// `withheld_roi` holds a manual box that was removed by
/// [`apply_annotation_fraction`]; it exists purely so refinement quality
/// can be measured afterwards and must never feed a training path.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub image_id: String,
    pub patient_id: String,
    pub pixels: Array2<f32>,
    pub label: ClassLabel,
    pub manual_roi: Option<BoundingBox>,
    pub annotation_kind: AnnotationKind,
    pub withheld_roi: Option<BoundingBox>,
    pub image_path: String,
}

impl ImageRecord {
    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<FoldSplit>,
}

impl FoldPlan {
    pub fn write_json(&self, path: &Path) -> Result<(), DataError> {
        let f = File::create(path)?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }
}

fn parse_box_fields(
    row: usize,
    fields: [&str; 4],
) -> Result<Option<(f32, f32, f32, f32)>, DataError> {
    let empties = fields.iter().filter(|f| f.trim().is_empty()).count();
    if empties == 4 {
        return Ok(None);
    }
    if empties != 0 {
        return Err(DataError::MalformedRow {
            row,
            msg: "box fields must be all present or all empty".into(),
        });
    }
    let mut vals = [0.0f32; 4];
    for (i, f) in fields.iter().enumerate() {
        vals[i] = f.trim().parse::<f32>().map_err(|e| DataError::MalformedRow {
            row,
            msg: format!("bad box field {:?}: {e}", f),
        })?;
    }
    Ok(Some((vals[0], vals[1], vals[2], vals[3])))
}

fn load_grayscale(path: &Path) -> Result<Array2<f32>, DataError> {
    let img = image::open(path).map_err(|source| DataError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let arr = match img {
        image::DynamicImage::ImageLuma16(buf) => Array2::from_shape_fn((h, w), |(y, x)| {
            f32::from(buf.get_pixel(x as u32, y as u32).0[0]) / 65535.0
        }),
        other => {
            let buf = other.to_luma8();
            Array2::from_shape_fn((h, w), |(y, x)| {
                f32::from(buf.get_pixel(x as u32, y as u32).0[0]) / 255.0
            })
        }
    };
    Ok(arr)
}

/// Load a manifest CSV and all images it references.
///
/// Rows with a box get `AnnotationKind::Fully`; rows with all four box
/// fields empty get `Partial`. Boxes are clipped to image bounds at load;
/// a row whose box lies fully outside its image (or has non-positive
/// size) is rejected with its row number.
pub fn load_manifest(path: &Path) -> Result<Vec<ImageRecord>, DataError> {
    if !path.is_file() {
        return Err(DataError::MissingManifest(path.to_path_buf()));
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_path(path)?;
    let mut records = Vec::new();
    for (i, result) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = result?;
        if rec.len() != 8 {
            return Err(DataError::MalformedRow {
                row,
                msg: format!("expected 8 fields, got {}", rec.len()),
            });
        }
        let image_id = rec[0].trim().to_string();
        let patient_id = rec[1].trim().to_string();
        if image_id.is_empty() || patient_id.is_empty() {
            return Err(DataError::MalformedRow {
                row,
                msg: "image_id and patient_id must be non-empty".into(),
            });
        }
        let label_raw: u8 = rec[2].trim().parse().map_err(|e| DataError::MalformedRow {
            row,
            msg: format!("bad label: {e}"),
        })?;
        let label = ClassLabel::from_index(label_raw).ok_or(DataError::MalformedRow {
            row,
            msg: format!("label must be 0 or 1, got {label_raw}"),
        })?;
        let box_fields = parse_box_fields(row, [&rec[3], &rec[4], &rec[5], &rec[6]])?;
        let image_path = rec[7].trim().to_string();
        let pixels = load_grayscale(&base.join(&image_path))?;
        let (h, w) = (pixels.nrows(), pixels.ncols());

        let manual_roi = match box_fields {
            None => None,
            Some((x, y, bw, bh)) => {
                let b = BoundingBox::new(x, y, bw, bh).map_err(|e| DataError::MalformedRow {
                    row,
                    msg: e.to_string(),
                })?;
                let clipped = b.clip(w, h).map_err(|_| DataError::BoxOutOfBounds { row })?;
                Some(clipped)
            }
        };
        let annotation_kind = if manual_roi.is_some() {
            AnnotationKind::Fully
        } else {
            AnnotationKind::Partial
        };
        records.push(ImageRecord {
            image_id,
            patient_id,
            pixels,
            label,
            manual_roi,
            annotation_kind,
            withheld_roi: None,
            image_path,
        });
    }
    Ok(records)
}

/// Write records back into the manifest CSV format (images are not rewritten).
pub fn write_manifest(records: &[ImageRecord], path: &Path) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["image_id", "patient_id", "label", "x", "y", "w", "h", "image_path"])?;
    for r in records {
        let (x, y, w, h) = match r.manual_roi {
            Some(b) => (
                b.x.to_string(),
                b.y.to_string(),
                b.w.to_string(),
                b.h.to_string(),
            ),
            None => (String::new(), String::new(), String::new(), String::new()),
        };
        wtr.write_record([
            r.image_id.as_str(),
            r.patient_id.as_str(),
            &r.label.index().to_string(),
            &x,
            &y,
            &w,
            &h,
            r.image_path.as_str(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Distinct patient ids in sorted order.
pub fn patient_ids(records: &[ImageRecord]) -> Vec<String> {
    let set: BTreeSet<&str> = records.iter().map(|r| r.patient_id.as_str()).collect();
    set.into_iter().map(String::from).collect()
}

/// Largest-remainder apportionment of `total` seats over `weights`;
/// remainder ties go to the lower index.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let wsum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / wsum).collect();
    let mut seats: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = seats.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        seats[i] += 1;
    }
    seats
}

/// Plan patient-disjoint cross-validation folds.
///
/// Patients are shuffled once by seed; each fold tests a contiguous block
/// of that order so every patient is tested exactly once. Within the
/// remainder, validation takes the next block cyclically. Split sizes
/// follow largest-remainder apportionment of 70/10/20 by patient count.
pub fn make_fold_plan(
    records: &[ImageRecord],
    n_folds: usize,
    seed: u64,
) -> Result<FoldPlan, DataError> {
    let mut patients = patient_ids(records);
    let n = patients.len();
    if n < n_folds {
        return Err(DataError::TooFewPatients {
            needed: n_folds,
            got: n,
        });
    }
    let mut rng = derived_rng(seed, "fold-shuffle", 0);
    patients.shuffle(&mut rng);

    let test_sizes = apportion(n, &vec![1.0; n_folds]);
    let mut folds = Vec::with_capacity(n_folds);
    let mut start = 0usize;
    for t in test_sizes {
        let test: Vec<String> = (0..t).map(|i| patients[start + i].clone()).collect();
        let rest: Vec<&String> = (0..n - t)
            .map(|i| &patients[(start + t + i) % n])
            .collect();
        // apportion the remainder between train and val at 7:1
        let split = apportion(n - t, &[7.0, 1.0]);
        let v = split[1];
        let val: Vec<String> = rest.iter().take(v).map(|s| (*s).clone()).collect();
        let train: Vec<String> = rest.iter().skip(v).map(|s| (*s).clone()).collect();
        folds.push(FoldSplit { train, val, test });
        start += t;
    }
    Ok(FoldPlan { folds })
}

/// Keep manual ROIs for a ceiling fraction `p` of patients; withhold the
/// rest. Selection is a prefix of one seeded shuffle, so the kept set at
/// a smaller `p` is a subset of the kept set at a larger `p`.
pub fn apply_annotation_fraction(
    mut records: Vec<ImageRecord>,
    p: f64,
    seed: u64,
) -> Result<Vec<ImageRecord>, DataError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(DataError::InvalidFraction(p));
    }
    for r in &records {
        if r.manual_roi.is_none() {
            return Err(DataError::MissingRoi(r.image_id.clone()));
        }
    }
    let mut patients = patient_ids(&records);
    let mut rng = derived_rng(seed, "annotation-fraction", 0);
    patients.shuffle(&mut rng);
    let keep_n = (p * patients.len() as f64).ceil() as usize;
    let kept: BTreeSet<&String> = patients.iter().take(keep_n).collect();
    for r in &mut records {
        if !kept.contains(&r.patient_id) {
            r.withheld_roi = r.manual_roi.take();
            r.annotation_kind = AnnotationKind::Partial;
        }
    }
    Ok(records)
}

/// Bilinear resample with half-pixel centers and edge clamping.
pub fn bilinear_resize(src: ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = (src.nrows(), src.ncols());
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let fy = (oy as f32 + 0.5) * sy - 0.5;
        let fx = (ox as f32 + 0.5) * sx - 0.5;
        let y0 = fy.floor();
        let x0 = fx.floor();
        let ty = fy - y0;
        let tx = fx - x0;
        let yi0 = (y0 as isize).clamp(0, h as isize - 1) as usize;
        let yi1 = (y0 as isize + 1).clamp(0, h as isize - 1) as usize;
        let xi0 = (x0 as isize).clamp(0, w as isize - 1) as usize;
        let xi1 = (x0 as isize + 1).clamp(0, w as isize - 1) as usize;
        let a = src[(yi0, xi0)];
        let b = src[(yi0, xi1)];
        let c = src[(yi1, xi0)];
        let d = src[(yi1, xi1)];
        (1.0 - ty) * ((1.0 - tx) * a + tx * b) + ty * ((1.0 - tx) * c + tx * d)
    })
}

/// Extract the pixel region under `bbox` and resample it to
/// [`ROI_SIZE`]x[`ROI_SIZE`]. The box is snapped outward to whole pixels
/// first, then clipped to the image.
pub fn crop_roi(pixels: &Array2<f32>, bbox: &BoundingBox) -> Result<Array2<f32>, DataError> {
    let (h, w) = (pixels.nrows(), pixels.ncols());
    let x0 = (bbox.x.floor() as isize).clamp(0, w as isize) as usize;
    let y0 = (bbox.y.floor() as isize).clamp(0, h as isize) as usize;
    let x1 = (bbox.x2().ceil() as isize).clamp(0, w as isize) as usize;
    let y1 = (bbox.y2().ceil() as isize).clamp(0, h as isize) as usize;
    if x1 <= x0 || y1 <= y0 {
        return Err(DataError::ZeroAreaCrop);
    }
    let sub = pixels.slice(s![y0..y1, x0..x1]);
    Ok(bilinear_resize(sub, ROI_SIZE, ROI_SIZE))
}

/// Resize to a `size`x`size` square, preserving aspect ratio and
/// zero-padding on the bottom/right.
pub fn resize_letterbox(pixels: &Array2<f32>, size: usize) -> Array2<f32> {
    let (h, w) = (pixels.nrows(), pixels.ncols());
    if h == size && w == size {
        return pixels.clone();
    }
    let scale = size as f32 / h.max(w) as f32;
    let nh = ((h as f32 * scale).round() as usize).clamp(1, size);
    let nw = ((w as f32 * scale).round() as usize).clamp(1, size);
    let resized = bilinear_resize(pixels.view(), nh, nw);
    let mut out = Array2::zeros((size, size));
    out.slice_mut(s![0..nh, 0..nw]).assign(&resized);
    out
}
