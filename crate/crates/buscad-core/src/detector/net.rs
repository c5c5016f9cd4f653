//! The detector network: residual backbone, feature pyramid, shared box
//! regression and anchor-confidence heads, training step, and candidate
//! prediction.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array4, Ix2, Ix4};
use rand::Rng;

use crate::data::{BoundingBox, ImageRecord};
use crate::nn::layers::{Conv2d, ConvBnRelu, ResidualBlock};
use crate::nn::ops::{self, AnchorTarget, RegTarget};
use crate::nn::{load_checkpoint, save_checkpoint, Adam, CheckpointError, ParamStore, Tape, Var};
use crate::rng::derived_rng;

use super::anchors::{build_anchor_grid, match_anchors, AnchorGrid, AnchorState, TEMPLATES_PER_CELL};
use super::{decode_box, encode_box, nms, BoxDelta, CandidateSet, DetectorError, ScoredBox};

#[derive(Debug, Clone)]
pub struct DetectorConfig {
    pub input_size: usize,
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub fpn_channels: usize,
    pub head_convs: usize,
    /// wide 7x7 stem with max pooling instead of two 3x3 strided convs
    pub stem7: bool,
    /// delta scaling applied between raw encodings and head outputs
    pub variances: [f32; 4],
    pub nms_iou: f32,
    pub pre_nms_top: usize,
    pub focal_alpha: f32,
    pub focal_gamma: f32,
}

impl DetectorConfig {
    /// Reduced-width configuration that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        DetectorConfig {
            input_size: 256,
            stem_channels: 8,
            stage_channels: [8, 16, 24, 32],
            blocks_per_stage: [1, 1, 1, 1],
            fpn_channels: 16,
            head_convs: 1,
            stem7: false,
            variances: [0.1, 0.1, 0.2, 0.2],
            nms_iou: 0.5,
            pre_nms_top: 300,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }

    /// Full-width 34-layer-class backbone with a 256-channel pyramid.
    pub fn paper() -> Self {
        DetectorConfig {
            input_size: 256,
            stem_channels: 64,
            stage_channels: [64, 128, 256, 512],
            blocks_per_stage: [3, 4, 6, 3],
            fpn_channels: 256,
            head_convs: 4,
            stem7: true,
            variances: [0.1, 0.1, 0.2, 0.2],
            nms_iou: 0.5,
            pre_nms_top: 1000,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }

    pub fn arch_name(&self) -> String {
        format!(
            "detector-v1:s{}:c{},{},{},{}:b{},{},{},{}:f{}:h{}:in{}",
            self.stem_channels,
            self.stage_channels[0],
            self.stage_channels[1],
            self.stage_channels[2],
            self.stage_channels[3],
            self.blocks_per_stage[0],
            self.blocks_per_stage[1],
            self.blocks_per_stage[2],
            self.blocks_per_stage[3],
            self.fpn_channels,
            self.head_convs,
            self.input_size,
        )
    }
}

struct Stage {
    transition: Option<ConvBnRelu>,
    blocks: Vec<ResidualBlock>,
}

struct Structure {
    stem1: ConvBnRelu,
    stem2: Option<ConvBnRelu>,
    stages: Vec<Stage>,
    lateral: Vec<Conv2d>,
    smooth: Vec<Conv2d>,
    p6: Conv2d,
    p7: Conv2d,
    tower: Vec<Conv2d>,
    reg_out: Conv2d,
    conf_out: Conv2d,
}

/// Per-level head outputs plus the top pyramid feature map.
pub struct DetectorOutputs {
    /// (N, 9*4, h, w) per level
    pub regs: Vec<Var>,
    /// (N, 9, h, w) per level
    pub confs: Vec<Var>,
    /// top pyramid map (N, F, h7, w7)
    pub top_feature: Var,
}

pub struct Detector {
    pub cfg: DetectorConfig,
    pub grid: AnchorGrid,
    pub params: ParamStore,
    structure: Structure,
}

/// One training example: the image plus its current ROI-label box.
pub struct DetTrainItem<'a> {
    pub record: &'a ImageRecord,
    pub target: BoundingBox,
    pub fully_annotated: bool,
}

impl Detector {
    pub fn new(cfg: DetectorConfig, seed: u64) -> Result<Self, DetectorError> {
        let grid = build_anchor_grid(cfg.input_size)?;
        let mut ps = ParamStore::new();
        let mut rng = derived_rng(seed, "detector-init", 0);
        let structure = Self::build(&cfg, &mut ps, &mut rng);
        Ok(Detector {
            cfg,
            grid,
            params: ps,
            structure,
        })
    }

    fn build(cfg: &DetectorConfig, ps: &mut ParamStore, rng: &mut impl Rng) -> Structure {
        let ch = cfg.stage_channels;
        let (stem1, stem2) = if cfg.stem7 {
            (
                ConvBnRelu::new(ps, rng, "stem", 1, cfg.stem_channels, 7, 2, true),
                None,
            )
        } else {
            (
                ConvBnRelu::new(ps, rng, "stem1", 1, cfg.stem_channels, 3, 2, true),
                Some(ConvBnRelu::new(
                    ps,
                    rng,
                    "stem2",
                    cfg.stem_channels,
                    ch[0],
                    3,
                    2,
                    true,
                )),
            )
        };
        let mut stages = Vec::new();
        for (si, &width) in ch.iter().enumerate() {
            let transition = if si == 0 {
                if cfg.stem7 && cfg.stem_channels != width {
                    Some(ConvBnRelu::new(
                        ps,
                        rng,
                        "stage0.trans",
                        cfg.stem_channels,
                        width,
                        1,
                        1,
                        true,
                    ))
                } else {
                    None
                }
            } else {
                Some(ConvBnRelu::new(
                    ps,
                    rng,
                    &format!("stage{si}.trans"),
                    ch[si - 1],
                    width,
                    3,
                    2,
                    true,
                ))
            };
            let blocks = (0..cfg.blocks_per_stage[si])
                .map(|bi| ResidualBlock::new(ps, rng, &format!("stage{si}.block{bi}"), width))
                .collect();
            stages.push(Stage { transition, blocks });
        }
        let f = cfg.fpn_channels;
        let lateral = (0..3)
            .map(|i| Conv2d::new(ps, rng, &format!("fpn.lateral{}", i + 3), ch[i + 1], f, 1, 1))
            .collect();
        let smooth = (0..3)
            .map(|i| Conv2d::new(ps, rng, &format!("fpn.smooth{}", i + 3), f, f, 3, 1))
            .collect();
        let p6 = Conv2d::new(ps, rng, "fpn.p6", ch[3], f, 3, 2);
        let p7 = Conv2d::new(ps, rng, "fpn.p7", f, f, 3, 2);
        let tower = (0..cfg.head_convs)
            .map(|i| Conv2d::new(ps, rng, &format!("head.tower{i}"), f, f, 3, 1))
            .collect();
        let reg_out = Conv2d::new(ps, rng, "head.reg", f, TEMPLATES_PER_CELL * 4, 3, 1);
        let mut conf_out = Conv2d::new(ps, rng, "head.conf", f, TEMPLATES_PER_CELL, 3, 1);
        // rare-positive prior keeps early focal loss stable
        let prior = -(99.0f32).ln();
        ps.get_mut(conf_out.b).fill(prior);
        conf_out.pad = 1;
        Structure {
            stem1,
            stem2,
            stages,
            lateral,
            smooth,
            p6,
            p7,
            tower,
            reg_out,
            conf_out,
        }
    }

    /// Letterbox scale factor from image coords to network coords.
    pub fn net_scale(&self, record: &ImageRecord) -> f32 {
        self.cfg.input_size as f32 / record.width().max(record.height()) as f32
    }

    /// Stack records into the network input tensor, zero-centered.
    pub fn input_tensor(&self, records: &[&ImageRecord]) -> Array4<f32> {
        let s = self.cfg.input_size;
        let mut x = Array4::<f32>::zeros((records.len(), 1, s, s));
        for (i, r) in records.iter().enumerate() {
            let boxed = crate::data::resize_letterbox(&r.pixels, s);
            for y in 0..s {
                for xx in 0..s {
                    x[(i, 0, y, xx)] = boxed[(y, xx)] - 0.5;
                }
            }
        }
        x
    }

    pub fn forward(&mut self, t: &mut Tape, x: Var, train: bool) -> DetectorOutputs {
        let ps = &mut self.params;
        let st = &self.structure;
        let mut h = st.stem1.forward(t, ps, x, train);
        if st.stem7() {
            h = ops::maxpool2d(t, h, 3, 2, 1);
        }
        if let Some(s2) = &st.stem2 {
            h = s2.forward(t, ps, h, train);
        }
        let mut c_maps = Vec::with_capacity(4);
        for stage in &st.stages {
            if let Some(tr) = &stage.transition {
                h = tr.forward(t, ps, h, train);
            }
            for b in &stage.blocks {
                h = b.forward(t, ps, h, train);
            }
            c_maps.push(h);
        }
        let (c3, c4, c5) = (c_maps[1], c_maps[2], c_maps[3]);

        let l5 = st.lateral[2].forward(t, ps, c5);
        let l4 = st.lateral[1].forward(t, ps, c4);
        let l3 = st.lateral[0].forward(t, ps, c3);
        let (h4, w4) = {
            let s = t.value(l4).shape().to_vec();
            (s[2], s[3])
        };
        let (h3, w3) = {
            let s = t.value(l3).shape().to_vec();
            (s[2], s[3])
        };
        let up5 = ops::upsample2_to(t, l5, h4, w4);
        let m4 = ops::add(t, l4, up5);
        let up4 = ops::upsample2_to(t, m4, h3, w3);
        let m3 = ops::add(t, l3, up4);
        let p3 = st.smooth[0].forward(t, ps, m3);
        let p4 = st.smooth[1].forward(t, ps, m4);
        let p5 = st.smooth[2].forward(t, ps, l5);
        let p6 = st.p6.forward(t, ps, c5);
        let p6r = ops::relu(t, p6);
        let p7 = st.p7.forward(t, ps, p6r);

        let levels = [p3, p4, p5, p6, p7];
        let mut regs = Vec::with_capacity(5);
        let mut confs = Vec::with_capacity(5);
        for &lvl in &levels {
            let mut f = lvl;
            for conv in &st.tower {
                f = conv.forward(t, ps, f);
                f = ops::relu(t, f);
            }
            regs.push(st.reg_out.forward(t, ps, f));
            confs.push(st.conf_out.forward(t, ps, f));
        }
        DetectorOutputs {
            regs,
            confs,
            top_feature: p7,
        }
    }

    /// Assemble the localization and confidence loss terms for a batch
    /// against per-image target boxes.
    ///
    /// The localization term is the per-image positive-anchor average of
    /// the four smooth-L1 coordinate residuals, and the confidence term is
    /// focal loss over all non-ignored anchors normalized per image by its
    /// positive count; both are taken as the mean over fully annotated
    /// images plus `alpha` times the mean over partially annotated images.
    pub fn loss_terms(
        &self,
        t: &mut Tape,
        out: &DetectorOutputs,
        items: &[DetTrainItem<'_>],
        alpha: f32,
    ) -> Vec<(Var, f32)> {
        assert!(!items.is_empty());
        let n_fa = items.iter().filter(|i| i.fully_annotated).count();
        let n_pa = items.len() - n_fa;

        // per-image anchor assignment in network coordinates
        let mut per_image = Vec::with_capacity(items.len());
        for item in items {
            let s = self.net_scale(item.record);
            let target_net = BoundingBox {
                x: item.target.x * s,
                y: item.target.y * s,
                w: item.target.w * s,
                h: item.target.h * s,
            };
            let assignment = match_anchors(&self.grid, &target_net);
            let set_norm = if item.fully_annotated {
                if n_fa > 0 {
                    1.0 / n_fa as f32
                } else {
                    0.0
                }
            } else if n_pa > 0 {
                alpha / n_pa as f32
            } else {
                0.0
            };
            per_image.push((target_net, assignment, set_norm));
        }

        let mut terms: Vec<(Var, f32)> = Vec::new();
        let mut level_base = 0usize;
        for (li, lvl) in self.grid.levels.iter().enumerate() {
            let (gh, gw) = (lvl.grid_h, lvl.grid_w);
            let mut reg_targets: Vec<RegTarget> = Vec::new();
            let mut conf_targets: Vec<AnchorTarget> =
                Vec::with_capacity(items.len() * TEMPLATES_PER_CELL * gh * gw);
            let mut conf_weights: Vec<f32> = Vec::with_capacity(conf_targets.capacity());

            for (ni, (target_net, assignment, set_norm)) in per_image.iter().enumerate() {
                let n_pos = assignment.num_positive().max(1) as f32;
                let w_img = set_norm / n_pos;
                // conf targets in map order: template-major, then row, col
                for tmpl in 0..TEMPLATES_PER_CELL {
                    for y in 0..gh {
                        for xx in 0..gw {
                            let flat = level_base + (y * gw + xx) * TEMPLATES_PER_CELL + tmpl;
                            let st = match assignment.states[flat] {
                                AnchorState::Positive => AnchorTarget::Positive,
                                AnchorState::Negative => AnchorTarget::Negative,
                                AnchorState::Ignored => AnchorTarget::Ignore,
                            };
                            conf_targets.push(st);
                            conf_weights.push(w_img);
                        }
                    }
                }
                // regression targets on positives only
                for y in 0..gh {
                    for xx in 0..gw {
                        for tmpl in 0..TEMPLATES_PER_CELL {
                            let flat = level_base + (y * gw + xx) * TEMPLATES_PER_CELL + tmpl;
                            if assignment.states[flat] != AnchorState::Positive {
                                continue;
                            }
                            let anchor = lvl.anchor_box(y, xx, tmpl);
                            let raw = encode_box(target_net, &anchor);
                            let v = self.cfg.variances;
                            reg_targets.push(RegTarget {
                                n: ni,
                                template: tmpl,
                                y,
                                x: xx,
                                delta: [
                                    (raw.tx / f64::from(v[0])) as f32,
                                    (raw.ty / f64::from(v[1])) as f32,
                                    (raw.tw / f64::from(v[2])) as f32,
                                    (raw.th / f64::from(v[3])) as f32,
                                ],
                                weight: w_img,
                            });
                        }
                    }
                }
            }
            level_base += lvl.num_anchors();

            if !reg_targets.is_empty() {
                let loc = ops::smooth_l1_reg(t, out.regs[li], &reg_targets);
                terms.push((loc, 1.0));
            }
            let n_map = items.len() * TEMPLATES_PER_CELL * gh * gw;
            let conf_flat = ops::reshape(t, out.confs[li], &[n_map]);
            let focal = ops::sigmoid_focal(
                t,
                conf_flat,
                &conf_targets,
                &conf_weights,
                self.cfg.focal_alpha,
                self.cfg.focal_gamma,
            );
            terms.push((focal, 1.0));
        }
        terms
    }

    /// One optimizer step on a minibatch; returns the scalar loss.
    pub fn train_step(
        &mut self,
        items: &[DetTrainItem<'_>],
        alpha: f32,
        opt: &mut Adam,
    ) -> Result<f32, DetectorError> {
        let records: Vec<&ImageRecord> = items.iter().map(|i| i.record).collect();
        let x = self.input_tensor(&records);
        let mut t = Tape::new();
        let xv = t.constant(x.into_dyn());
        let out = self.forward(&mut t, xv, true);
        let terms = self.loss_terms(&mut t, &out, items, alpha);
        let total = ops::weighted_sum(&mut t, &terms);
        let loss = t.scalar(total);
        if !loss.is_finite() {
            return Err(DetectorError::Diverged(format!(
                "detector loss is {loss}"
            )));
        }
        let grads = t.backward(total);
        opt.step(&mut self.params, &grads);
        Ok(loss)
    }

    fn collect_scored(&mut self, record: &ImageRecord) -> Vec<(usize, f32, BoxDelta)> {
        let x = self.input_tensor(&[record]);
        let mut t = Tape::no_grad();
        let xv = t.constant(x.into_dyn());
        let out = self.forward(&mut t, xv, false);
        let mut scored = Vec::with_capacity(self.grid.total_anchors());
        let mut base = 0usize;
        for (li, lvl) in self.grid.levels.iter().enumerate() {
            let conf = t
                .value(out.confs[li])
                .view()
                .into_dimensionality::<Ix4>()
                .unwrap()
                .to_owned();
            let reg = t
                .value(out.regs[li])
                .view()
                .into_dimensionality::<Ix4>()
                .unwrap()
                .to_owned();
            for y in 0..lvl.grid_h {
                for xx in 0..lvl.grid_w {
                    for tmpl in 0..TEMPLATES_PER_CELL {
                        let flat = base + (y * lvl.grid_w + xx) * TEMPLATES_PER_CELL + tmpl;
                        let logit = conf[(0, tmpl, y, xx)];
                        let v = self.cfg.variances;
                        let delta = BoxDelta {
                            tx: f64::from(reg[(0, tmpl * 4, y, xx)] * v[0]),
                            ty: f64::from(reg[(0, tmpl * 4 + 1, y, xx)] * v[1]),
                            tw: f64::from(reg[(0, tmpl * 4 + 2, y, xx)] * v[2]),
                            th: f64::from(reg[(0, tmpl * 4 + 3, y, xx)] * v[3]),
                        };
                        scored.push((flat, logit, delta));
                    }
                }
            }
            base += lvl.num_anchors();
        }
        scored
    }

    /// Decode, rank by the confidence sub-head, suppress at the NMS
    /// threshold, and return the top-k boxes clipped to image bounds.
    /// Always yields at least one box.
    pub fn predict_candidates(
        &mut self,
        record: &ImageRecord,
        k: usize,
    ) -> Result<CandidateSet, DetectorError> {
        if k < 1 {
            return Err(DetectorError::InvalidK);
        }
        let mut scored = self.collect_scored(record);
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let scale = self.net_scale(record);
        let (iw, ih) = (record.width(), record.height());

        let mut decoded: Vec<ScoredBox> = Vec::new();
        for &(flat, logit, delta) in scored.iter().take(self.cfg.pre_nms_top) {
            let anchor = self.grid.anchor_box(flat);
            let Ok(net_box) = decode_box(&delta, &anchor) else {
                continue;
            };
            let img_box = BoundingBox {
                x: net_box.x / scale,
                y: net_box.y / scale,
                w: net_box.w / scale,
                h: net_box.h / scale,
            };
            if img_box.w < 1.0 || img_box.h < 1.0 {
                continue;
            }
            let Ok(clipped) = img_box.clip(iw, ih) else {
                continue;
            };
            if clipped.w < 1.0 || clipped.h < 1.0 {
                continue;
            }
            decoded.push(ScoredBox {
                bbox: clipped,
                confidence: sigmoid(logit),
            });
        }
        let mut kept = nms(&decoded, self.cfg.nms_iou);
        kept.truncate(k);
        if kept.is_empty() {
            // fall back to the highest-confidence anchor itself
            let &(flat, logit, _) = &scored[0];
            let anchor = self.grid.anchor_box(flat);
            let img_box = BoundingBox {
                x: anchor.x / scale,
                y: anchor.y / scale,
                w: anchor.w / scale,
                h: anchor.h / scale,
            };
            let clipped = img_box
                .clip(iw, ih)
                .expect("anchor overlaps image by construction");
            kept.push(ScoredBox {
                bbox: clipped,
                confidence: sigmoid(logit),
            });
        }
        Ok(CandidateSet { boxes: kept })
    }

    /// Pooled top-pyramid feature vector (length = fpn_channels).
    pub fn extract_location_features(&mut self, record: &ImageRecord) -> Vec<f32> {
        let x = self.input_tensor(&[record]);
        let mut t = Tape::no_grad();
        let xv = t.constant(x.into_dyn());
        let out = self.forward(&mut t, xv, false);
        let pooled = ops::global_avg_pool(&mut t, out.top_feature);
        t.value(pooled)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .row(0)
            .to_vec()
    }

    pub fn save(&self, path: &Path, meta: BTreeMap<String, serde_json::Value>) -> Result<(), CheckpointError> {
        let mut meta = meta;
        meta.insert(
            "anchor_strides".into(),
            serde_json::json!(self.grid.levels.iter().map(|l| l.stride).collect::<Vec<_>>()),
        );
        meta.insert("variances".into(), serde_json::json!(self.cfg.variances));
        save_checkpoint(
            path,
            &self.params,
            &self.cfg.arch_name(),
            self.cfg.input_size,
            meta,
        )
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<(), CheckpointError> {
        let arch = self.cfg.arch_name();
        load_checkpoint(path, &mut self.params, &arch)?;
        Ok(())
    }
}

impl Structure {
    fn stem7(&self) -> bool {
        self.stem2.is_none()
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AnnotationKind, ClassLabel};
    use ndarray::Array2;

    fn tiny_cfg() -> DetectorConfig {
        DetectorConfig {
            input_size: 128,
            stem_channels: 4,
            stage_channels: [4, 6, 8, 8],
            blocks_per_stage: [1, 1, 1, 1],
            fpn_channels: 8,
            head_convs: 1,
            stem7: false,
            variances: [0.1, 0.1, 0.2, 0.2],
            nms_iou: 0.5,
            pre_nms_top: 200,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }

    fn record_with_box(v: f32) -> ImageRecord {
        let mut pixels = Array2::from_elem((128, 128), v);
        for y in 40..70 {
            for x in 50..90 {
                pixels[(y, x)] = 0.9;
            }
        }
        ImageRecord {
            image_id: "t0".into(),
            patient_id: "p0".into(),
            pixels,
            label: ClassLabel::Benign,
            manual_roi: Some(BoundingBox::new(50.0, 40.0, 40.0, 30.0).unwrap()),
            annotation_kind: AnnotationKind::Fully,
            withheld_roi: None,
            image_path: String::new(),
        }
    }

    #[test]
    fn forward_shapes_match_anchor_grid() {
        let mut det = Detector::new(tiny_cfg(), 0).unwrap();
        let rec = record_with_box(0.3);
        let x = det.input_tensor(&[&rec]);
        let mut t = Tape::no_grad();
        let xv = t.constant(x.into_dyn());
        let out = det.forward(&mut t, xv, false);
        assert_eq!(out.regs.len(), 5);
        for (li, lvl) in det.grid.levels.iter().enumerate() {
            let rs = t.value(out.regs[li]).shape().to_vec();
            assert_eq!(rs, vec![1, 36, lvl.grid_h, lvl.grid_w], "level {li}");
            let cs = t.value(out.confs[li]).shape().to_vec();
            assert_eq!(cs, vec![1, 9, lvl.grid_h, lvl.grid_w]);
        }
    }

    #[test]
    fn predict_is_deterministic_and_valid() {
        let mut det = Detector::new(tiny_cfg(), 7).unwrap();
        let rec = record_with_box(0.3);
        let a = det.predict_candidates(&rec, 5).unwrap();
        let b = det.predict_candidates(&rec, 5).unwrap();
        assert_eq!(a.boxes.len(), b.boxes.len());
        for (x, y) in a.boxes.iter().zip(&b.boxes) {
            assert_eq!(x.bbox, y.bbox);
            assert_eq!(x.confidence, y.confidence);
        }
        assert!(!a.boxes.is_empty());
        for sb in &a.boxes {
            assert!(sb.bbox.w > 0.0 && sb.bbox.h > 0.0);
            assert!(sb.bbox.contains(rec.width(), rec.height()));
            assert!((0.0..=1.0).contains(&sb.confidence));
        }
        // sorted descending, pairwise IoU below the threshold
        for w in a.boxes.windows(2) {
            assert!(w[0].confidence >= w[1].confidence);
        }
        for i in 0..a.boxes.len() {
            for j in 0..i {
                assert!(super::super::iou(&a.boxes[i].bbox, &a.boxes[j].bbox) < 0.5);
            }
        }
    }

    #[test]
    fn predict_top1_is_highest_confidence() {
        let mut det = Detector::new(tiny_cfg(), 3).unwrap();
        let rec = record_with_box(0.4);
        let all = det.predict_candidates(&rec, 10).unwrap();
        let one = det.predict_candidates(&rec, 1).unwrap();
        assert_eq!(one.boxes.len(), 1);
        assert_eq!(one.boxes[0].bbox, all.boxes[0].bbox);
        assert!(det.predict_candidates(&rec, 0).is_err());
    }

    #[test]
    fn location_features_finite_and_deterministic() {
        let mut det = Detector::new(tiny_cfg(), 1).unwrap();
        let zero = ImageRecord {
            pixels: Array2::zeros((128, 128)),
            ..record_with_box(0.0)
        };
        let f = det.extract_location_features(&zero);
        assert_eq!(f.len(), det.cfg.fpn_channels);
        assert!(f.iter().all(|v| v.is_finite()));
        let rec = record_with_box(0.3);
        assert_eq!(
            det.extract_location_features(&rec),
            det.extract_location_features(&rec)
        );
    }

    #[test]
    fn train_step_reduces_loss_on_fixed_batch() {
        let mut det = Detector::new(tiny_cfg(), 5).unwrap();
        let rec = record_with_box(0.3);
        let items = vec![DetTrainItem {
            record: &rec,
            target: rec.manual_roi.unwrap(),
            fully_annotated: true,
        }];
        let mut opt = Adam::new(1e-3);
        let first = det.train_step(&items, 0.8, &mut opt).unwrap();
        let mut last = first;
        for _ in 0..30 {
            last = det.train_step(&items, 0.8, &mut opt).unwrap();
        }
        assert!(last.is_finite());
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn checkpoint_round_trip_and_arch_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.ckpt");
        let det = Detector::new(tiny_cfg(), 9).unwrap();
        det.save(&path, BTreeMap::new()).unwrap();

        let mut det2 = Detector::new(tiny_cfg(), 1234).unwrap();
        det2.load_weights(&path).unwrap();
        for id in det.params.ids() {
            assert_eq!(det.params.get(id), det2.params.get(id));
        }

        let mut other = Detector::new(DetectorConfig::desk(), 0).unwrap();
        assert!(other.load_weights(&path).is_err());
    }
}
