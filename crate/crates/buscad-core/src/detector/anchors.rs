//! Multi-level anchor grid and ground-truth matching.

use crate::data::BoundingBox;

use super::{iou, DetectorError};

/// IoU at or above which an anchor is positive.
pub const POSITIVE_IOU: f32 = 0.5;
/// IoU below which an anchor is negative; the band between is ignored.
pub const NEGATIVE_IOU: f32 = 0.4;

const STRIDES: [usize; 5] = [8, 16, 32, 64, 128];
const BASE_SIZES: [f32; 5] = [32.0, 64.0, 128.0, 256.0, 512.0];
const RATIOS: [f32; 3] = [0.5, 1.0, 2.0];

/// Anchor templates per grid cell: 3 octave scales x 3 aspect ratios.
pub const TEMPLATES_PER_CELL: usize = 9;

#[derive(Debug, Clone)]
pub struct AnchorLevel {
    pub stride: usize,
    pub base_size: f32,
    pub grid_h: usize,
    pub grid_w: usize,
    /// (w, h) per template; ratio is h/w
    pub templates: Vec<(f32, f32)>,
}

impl AnchorLevel {
    pub fn num_anchors(&self) -> usize {
        self.grid_h * self.grid_w * self.templates.len()
    }

    /// Anchor box at (cell y, cell x, template t); centers sit on the
    /// half-stride lattice.
    pub fn anchor_box(&self, y: usize, x: usize, t: usize) -> BoundingBox {
        let cx = (x as f32 + 0.5) * self.stride as f32;
        let cy = (y as f32 + 0.5) * self.stride as f32;
        let (w, h) = self.templates[t];
        BoundingBox {
            x: cx - 0.5 * w,
            y: cy - 0.5 * h,
            w,
            h,
        }
    }
}

/// All anchors over the pyramid in one flat order: level-major, then row,
/// column, template. Head maps laid out as (templates*4, H, W) flatten to
/// the same order.
#[derive(Debug, Clone)]
pub struct AnchorGrid {
    pub image_size: usize,
    pub levels: Vec<AnchorLevel>,
}

impl AnchorGrid {
    pub fn total_anchors(&self) -> usize {
        self.levels.iter().map(AnchorLevel::num_anchors).sum()
    }

    pub fn iter_boxes(&self) -> impl Iterator<Item = BoundingBox> + '_ {
        self.levels.iter().flat_map(|lvl| {
            (0..lvl.grid_h).flat_map(move |y| {
                (0..lvl.grid_w).flat_map(move |x| {
                    (0..lvl.templates.len()).map(move |t| lvl.anchor_box(y, x, t))
                })
            })
        })
    }

    /// Anchor box by flat index.
    pub fn anchor_box(&self, mut idx: usize) -> BoundingBox {
        for lvl in &self.levels {
            let n = lvl.num_anchors();
            if idx < n {
                let t = idx % lvl.templates.len();
                let cell = idx / lvl.templates.len();
                let x = cell % lvl.grid_w;
                let y = cell / lvl.grid_w;
                return lvl.anchor_box(y, x, t);
            }
            idx -= n;
        }
        panic!("anchor index out of range");
    }
}

/// Build the anchor grid for a square input of `image_size` pixels.
/// Levels stride 8..128 with ceiling-division grid shapes.
pub fn build_anchor_grid(image_size: usize) -> Result<AnchorGrid, DetectorError> {
    let max_stride = *STRIDES.last().unwrap();
    if image_size < max_stride {
        return Err(DetectorError::ImageTooSmall(image_size, max_stride));
    }
    let mut levels = Vec::with_capacity(STRIDES.len());
    for (i, &stride) in STRIDES.iter().enumerate() {
        let base = BASE_SIZES[i];
        let cells = image_size.div_ceil(stride);
        let mut templates = Vec::with_capacity(TEMPLATES_PER_CELL);
        for oct in 0..3 {
            let scale = 2f32.powf(oct as f32 / 3.0);
            for &ratio in &RATIOS {
                let w = base * scale / ratio.sqrt();
                let h = base * scale * ratio.sqrt();
                templates.push((w, h));
            }
        }
        levels.push(AnchorLevel {
            stride,
            base_size: base,
            grid_h: cells,
            grid_w: cells,
            templates,
        });
    }
    Ok(AnchorGrid { image_size, levels })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorState {
    Positive,
    Negative,
    Ignored,
}

/// Per-anchor matching outcome against a single ground-truth box.
#[derive(Debug, Clone)]
pub struct AnchorAssignment {
    pub states: Vec<AnchorState>,
    pub ious: Vec<f32>,
    /// the argmax-IoU anchor, always positive
    pub forced_index: usize,
}

impl AnchorAssignment {
    pub fn num_positive(&self) -> usize {
        self.states
            .iter()
            .filter(|s| **s == AnchorState::Positive)
            .count()
    }
}

/// Threshold matching with a forced best match: anchors with IoU >= 0.5
/// are positive, < 0.4 negative, between ignored; the single highest-IoU
/// anchor is positive regardless (ties break to the lowest index), so at
/// least one positive always exists.
pub fn match_anchors(grid: &AnchorGrid, gt: &BoundingBox) -> AnchorAssignment {
    let n = grid.total_anchors();
    let mut states = Vec::with_capacity(n);
    let mut ious = Vec::with_capacity(n);
    let mut best = (0usize, -1.0f32);
    for (i, anchor) in grid.iter_boxes().enumerate() {
        let v = iou(&anchor, gt);
        ious.push(v);
        states.push(if v >= POSITIVE_IOU {
            AnchorState::Positive
        } else if v < NEGATIVE_IOU {
            AnchorState::Negative
        } else {
            AnchorState::Ignored
        });
        if v > best.1 {
            best = (i, v);
        }
    }
    states[best.0] = AnchorState::Positive;
    AnchorAssignment {
        states,
        ious,
        forced_index: best.0,
    }
}
