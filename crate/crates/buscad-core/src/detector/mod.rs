//! Localization-only anchor detector: multi-level anchor grid, IoU
//! matching, center/log-size box encoding, smooth-L1 localization loss,
//! and top-k candidate prediction.
//!
//! The detector regresses boxes only; disease classification lives in the
//! classifier. Ranking of candidates comes from a one-channel anchor
//! confidence sub-head trained with focal loss against the
//! positive/negative anchor assignment. That sub-head expresses
//! "lesion-ness" for ordering and suppression, not diagnosis.

mod anchors;
mod net;

pub use anchors::{build_anchor_grid, match_anchors, AnchorAssignment, AnchorGrid, AnchorLevel, AnchorState};
pub use net::{DetTrainItem, Detector, DetectorConfig, DetectorOutputs};

use thiserror::Error;

use crate::data::BoundingBox;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("image size {0} is smaller than the largest anchor stride {1}")]
    ImageTooSmall(usize, usize),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("non-finite box delta")]
    NonFiniteDelta,
    #[error("training diverged: {0}")]
    Diverged(String),
}

/// Intersection-over-union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f32 {
    let ix = (a.x2().min(b.x2()) - a.x.max(b.x)).max(0.0);
    let iy = (a.y2().min(b.y2()) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Center offsets and log-scale factors of a box relative to an anchor.
/// Kept in f64 so the encode/decode round trip is exact to float noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub fn as_f32_array(&self) -> [f32; 4] {
        [self.tx as f32, self.ty as f32, self.tw as f32, self.th as f32]
    }

    pub fn is_finite(&self) -> bool {
        self.tx.is_finite() && self.ty.is_finite() && self.tw.is_finite() && self.th.is_finite()
    }
}

/// Encode `b` relative to `anchor`: center offsets normalized by anchor
/// size, log size ratios. A box twice the anchor's width with the same
/// center and height encodes as `tw = ln 2`.
pub fn encode_box(b: &BoundingBox, anchor: &BoundingBox) -> BoxDelta {
    let (bcx, bcy) = (
        f64::from(b.x) + 0.5 * f64::from(b.w),
        f64::from(b.y) + 0.5 * f64::from(b.h),
    );
    let (acx, acy) = (
        f64::from(anchor.x) + 0.5 * f64::from(anchor.w),
        f64::from(anchor.y) + 0.5 * f64::from(anchor.h),
    );
    let (aw, ah) = (f64::from(anchor.w), f64::from(anchor.h));
    BoxDelta {
        tx: (bcx - acx) / aw,
        ty: (bcy - acy) / ah,
        tw: (f64::from(b.w) / aw).ln(),
        th: (f64::from(b.h) / ah).ln(),
    }
}

/// Inverse of [`encode_box`]. Log factors are clamped at |6| to keep the
/// exponential finite on wild network outputs.
pub fn decode_box(d: &BoxDelta, anchor: &BoundingBox) -> Result<BoundingBox, DetectorError> {
    if !d.is_finite() {
        return Err(DetectorError::NonFiniteDelta);
    }
    let (acx, acy) = (
        f64::from(anchor.x) + 0.5 * f64::from(anchor.w),
        f64::from(anchor.y) + 0.5 * f64::from(anchor.h),
    );
    let (aw, ah) = (f64::from(anchor.w), f64::from(anchor.h));
    let cx = acx + d.tx * aw;
    let cy = acy + d.ty * ah;
    let w = aw * d.tw.clamp(-6.0, 6.0).exp();
    let h = ah * d.th.clamp(-6.0, 6.0).exp();
    Ok(BoundingBox {
        x: (cx - 0.5 * w) as f32,
        y: (cy - 0.5 * h) as f32,
        w: w as f32,
        h: h as f32,
    })
}

/// Standard smooth L1: `0.5 x^2` for |x| < 1, `|x| - 0.5` otherwise.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Localization loss: per positive anchor, the four coordinate residuals
/// through [`smooth_l1`], summed; averaged over positive anchors.
pub fn loc_loss(
    pred_deltas: &[[f64; 4]],
    target_deltas: &[[f64; 4]],
    assignment: &AnchorAssignment,
) -> f64 {
    assert_eq!(pred_deltas.len(), target_deltas.len());
    assert_eq!(pred_deltas.len(), assignment.states.len());
    let mut total = 0.0;
    let mut n_pos = 0usize;
    for (i, state) in assignment.states.iter().enumerate() {
        if *state != AnchorState::Positive {
            continue;
        }
        n_pos += 1;
        for c in 0..4 {
            total += smooth_l1(pred_deltas[i][c] - target_deltas[i][c]);
        }
    }
    if n_pos == 0 {
        0.0
    } else {
        total / n_pos as f64
    }
}

/// Detector loss: fully annotated term plus `alpha` times the partially
/// annotated term.
pub fn dnet_loss(loss_fa: f64, loss_pa: f64, alpha: f64) -> f64 {
    loss_fa + alpha * loss_pa
}

/// A candidate box with its ranking confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: BoundingBox,
    pub confidence: f32,
}

/// Ranked, suppression-filtered detector proposals.
#[derive(Debug, Clone, Default)]
pub struct CandidateSet {
    pub boxes: Vec<ScoredBox>,
}

impl CandidateSet {
    pub fn top(&self) -> Option<&ScoredBox> {
        self.boxes.first()
    }
}

/// Greedy non-maximum suppression over boxes sorted descending by
/// confidence; keeps a box when its IoU with every kept box is below the
/// threshold.
pub fn nms(sorted: &[ScoredBox], iou_threshold: f32) -> Vec<ScoredBox> {
    let mut kept: Vec<ScoredBox> = Vec::new();
    for cand in sorted {
        if kept.iter().all(|k| iou(&k.bbox, &cand.bbox) < iou_threshold) {
            kept.push(*cand);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derived_rng;
    use rand::Rng;

    fn bb(x: f32, y: f32, w: f32, h: f32) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = bb(3.0, 4.0, 10.0, 12.0);
        assert_eq!(iou(&a, &a), 1.0);
        let b = bb(50.0, 50.0, 5.0, 5.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_matches_pixel_rasterization() {
        // unit-pixel rasterization oracle on integer boxes
        let raster = |a: &BoundingBox, b: &BoundingBox| -> f32 {
            let mut inter = 0usize;
            let mut union = 0usize;
            for y in 0..64 {
                for x in 0..64 {
                    let fx = x as f32;
                    let fy = y as f32;
                    let in_a = fx >= a.x && fx < a.x2() && fy >= a.y && fy < a.y2();
                    let in_b = fx >= b.x && fx < b.x2() && fy >= b.y && fy < b.y2();
                    if in_a && in_b {
                        inter += 1;
                    }
                    if in_a || in_b {
                        union += 1;
                    }
                }
            }
            inter as f32 / union as f32
        };
        let a = bb(0.0, 0.0, 2.0, 2.0);
        let b = bb(1.0, 1.0, 2.0, 2.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-6);
        assert_eq!(iou(&a, &b), raster(&a, &b));
        let c = bb(3.0, 5.0, 11.0, 7.0);
        let d = bb(9.0, 2.0, 8.0, 13.0);
        assert!((iou(&c, &d) - raster(&c, &d)).abs() < 1e-6);
    }

    #[test]
    fn encode_identity_and_log_ratio() {
        let anchor = bb(10.0, 10.0, 20.0, 30.0);
        let d = encode_box(&anchor, &anchor);
        assert_eq!(d.as_f32_array(), [0.0, 0.0, 0.0, 0.0]);

        let wide = bb(0.0, 10.0, 40.0, 30.0); // twice the width, same center/height
        let d = encode_box(&wide, &anchor);
        assert!((d.tw - std::f64::consts::LN_2).abs() < 1e-9);
        assert_eq!(d.tx, 0.0);
        assert_eq!(d.ty, 0.0);
        assert_eq!(d.th, 0.0);
    }

    #[test]
    fn decode_rejects_non_finite() {
        let anchor = bb(0.0, 0.0, 10.0, 10.0);
        let d = BoxDelta {
            tx: f64::NAN,
            ty: 0.0,
            tw: 0.0,
            th: 0.0,
        };
        assert!(matches!(
            decode_box(&d, &anchor),
            Err(DetectorError::NonFiniteDelta)
        ));
    }

    #[test]
    fn encode_decode_round_trip_1000() {
        let mut rng = derived_rng(0, "roundtrip", 0);
        let mut max_rel = 0.0f32;
        for _ in 0..1000 {
            let b = bb(
                rng.random_range(0.0..200.0),
                rng.random_range(0.0..200.0),
                rng.random_range(4.0..300.0),
                rng.random_range(4.0..300.0),
            );
            let a = bb(
                rng.random_range(0.0..200.0),
                rng.random_range(0.0..200.0),
                rng.random_range(4.0..300.0),
                rng.random_range(4.0..300.0),
            );
            let r = decode_box(&encode_box(&b, &a), &a).unwrap();
            for (got, want) in [(r.x, b.x), (r.y, b.y), (r.w, b.w), (r.h, b.h)] {
                let rel = (got - want).abs() / want.abs().max(1.0);
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel < 1e-5, "max relative error {max_rel}");
    }

    #[test]
    fn smooth_l1_cases() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert!((smooth_l1(0.5) - 0.125).abs() < 1e-12);
        assert!((smooth_l1(2.0) - 1.5).abs() < 1e-12);
        assert!((smooth_l1(-2.0) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn smooth_l1_continuous_and_c1_at_kink() {
        let h = 1e-6;
        // value agreement from both branches
        assert!((smooth_l1(1.0) - 0.5).abs() < 1e-9);
        assert!((smooth_l1(1.0 - h) - smooth_l1(1.0 + h)).abs() < 1e-5);
        // slope approaches 1 from both sides
        let left = (smooth_l1(1.0) - smooth_l1(1.0 - h)) / h;
        let right = (smooth_l1(1.0 + h) - smooth_l1(1.0)) / h;
        assert!((left - 1.0).abs() < 1e-6 + 1e-9, "left slope {left}");
        assert!((right - 1.0).abs() < 1e-9, "right slope {right}");
        // mirrored kink
        let left = (smooth_l1(-1.0 + h) - smooth_l1(-1.0)) / h;
        assert!((left + 1.0).abs() < 1e-6);
    }

    #[test]
    fn loc_loss_examples() {
        use AnchorState::*;
        let mk = |states: Vec<AnchorState>| AnchorAssignment {
            states,
            ious: vec![],
            forced_index: 0,
        };
        // zero residual on all positives
        let a = mk(vec![Positive, Negative]);
        let p = vec![[0.1, 0.2, 0.3, 0.4], [9.0, 9.0, 9.0, 9.0]];
        assert_eq!(loc_loss(&p, &p, &a), 0.0);

        // one positive with residual (0.5, 0, 0, 0)
        let a = mk(vec![Positive]);
        let pred = vec![[0.5, 0.0, 0.0, 0.0]];
        let tgt = vec![[0.0; 4]];
        assert!((loc_loss(&pred, &tgt, &a) - 0.125).abs() < 1e-12);

        // two positives, residuals (1,1,1,1) and zero -> (4 * 0.5) / 2
        let a = mk(vec![Positive, Positive]);
        let pred = vec![[1.0; 4], [0.0; 4]];
        let tgt = vec![[0.0; 4], [0.0; 4]];
        assert!((loc_loss(&pred, &tgt, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dnet_loss_weighted_sum() {
        assert!((dnet_loss(1.0, 0.5, 0.8) - 1.4).abs() < 1e-12);
        assert_eq!(dnet_loss(0.7, 0.0, 3.0), 0.7);
        assert_eq!(dnet_loss(0.0, 0.0, 0.9), 0.0);
    }

    #[test]
    fn dnet_loss_monotone_linear() {
        let mut rng = derived_rng(1, "dnet-mono", 0);
        for _ in 0..100 {
            let fa: f64 = rng.random_range(0.0..5.0);
            let pa: f64 = rng.random_range(0.0..5.0);
            let alpha: f64 = rng.random_range(0.0..2.0);
            let base = dnet_loss(fa, pa, alpha);
            assert!(dnet_loss(fa + 0.1, pa, alpha) >= base);
            assert!(dnet_loss(fa, pa + 0.1, alpha) >= base);
            // linear in the pa term with slope alpha
            let d = dnet_loss(fa, pa + 1.0, alpha) - base;
            assert!((d - alpha).abs() < 1e-12);
        }
    }

    #[test]
    fn nms_suppresses_overlaps() {
        let mk = |x, s| ScoredBox {
            bbox: bb(x, 0.0, 10.0, 10.0),
            confidence: s,
        };
        let sorted = vec![mk(0.0, 0.9), mk(2.0, 0.8), mk(30.0, 0.7)];
        let kept = nms(&sorted, 0.5);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].confidence, 0.9);
        assert_eq!(kept[1].confidence, 0.7);
        for i in 0..kept.len() {
            for j in 0..i {
                assert!(iou(&kept[i].bbox, &kept[j].bbox) < 0.5);
            }
        }
    }
}
