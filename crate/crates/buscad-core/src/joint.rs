//! Stage-2 joint training: the detector, classifier, and a fusion head
//! train as one cascade. The detector's top box drives cropping (the crop
//! coordinates carry no gradient); the fusion head consumes pooled
//! detector and classifier features; two auxiliary classifiers attach to
//! those same feature taps during training and are absent from the
//! inference path, so removing them cannot change predictions.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array4, Ix2};

use crate::classifier::{ClassProbabilities, ClassifierConfig, RoiClassifier, ScoreRule};
use crate::data::{crop_roi, AnnotationKind, BoundingBox, ImageRecord};
use crate::detector::{Detector, DetectorConfig, DetTrainItem};
use crate::nn::ops;
use crate::nn::{
    load_checkpoint, save_checkpoint, Adam, CheckpointError, ParamId, ParamStore, Tape, Var,
};
use crate::refine::{epoch_batches, LabelStore, TrainError};
use crate::rng::derived_rng;

/// Total stage-2 loss: plain sum of the detector, fusion, and two
/// auxiliary classification terms.
pub fn joint_loss(l_dnet: f64, l_fnet: f64, l_cls1: f64, l_cls2: f64) -> f64 {
    l_dnet + l_fnet + l_cls1 + l_cls2
}

/// Fusion head and the two auxiliary classifiers. The fusion head is two
/// affine layers with a relu between, then softmax; each auxiliary head
/// is a single affine layer on its host's pooled features.
pub struct JointHeads {
    pub params: ParamStore,
    pub loc_dim: usize,
    pub disc_dim: usize,
    pub hidden: usize,
    fuse_w1: ParamId,
    fuse_b1: ParamId,
    fuse_w2: ParamId,
    fuse_b2: ParamId,
    aux_det_w: ParamId,
    aux_det_b: ParamId,
    aux_cls_w: ParamId,
    aux_cls_b: ParamId,
}

impl JointHeads {
    pub fn new(loc_dim: usize, disc_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut ps = ParamStore::new();
        let mut rng = derived_rng(seed, "joint-heads-init", 0);
        let fuse_w1 = ps.add(
            "fuse.w1",
            crate::nn::init::kaiming_linear(&mut rng, hidden, loc_dim + disc_dim),
        );
        let fuse_b1 = ps.add("fuse.b1", crate::nn::tape::Arr::zeros(vec![hidden]));
        let fuse_w2 = ps.add(
            "fuse.w2",
            crate::nn::init::kaiming_linear(&mut rng, 2, hidden),
        );
        let fuse_b2 = ps.add("fuse.b2", crate::nn::tape::Arr::zeros(vec![2]));
        let aux_det_w = ps.add(
            "aux_det.w",
            crate::nn::init::kaiming_linear(&mut rng, 2, loc_dim),
        );
        let aux_det_b = ps.add("aux_det.b", crate::nn::tape::Arr::zeros(vec![2]));
        let aux_cls_w = ps.add(
            "aux_cls.w",
            crate::nn::init::kaiming_linear(&mut rng, 2, disc_dim),
        );
        let aux_cls_b = ps.add("aux_cls.b", crate::nn::tape::Arr::zeros(vec![2]));
        JointHeads {
            params: ps,
            loc_dim,
            disc_dim,
            hidden,
            fuse_w1,
            fuse_b1,
            fuse_w2,
            fuse_b2,
            aux_det_w,
            aux_det_b,
            aux_cls_w,
            aux_cls_b,
        }
    }

    /// Fused logits from concatenated (location, discriminative) features.
    pub fn fusion_logits(&self, t: &mut Tape, loc: Var, disc: Var) -> Var {
        let cat = ops::concat_features(t, loc, disc);
        let w1 = t.param(&self.params, self.fuse_w1);
        let b1 = t.param(&self.params, self.fuse_b1);
        let h = ops::linear(t, cat, w1, b1);
        let h = ops::relu(t, h);
        let w2 = t.param(&self.params, self.fuse_w2);
        let b2 = t.param(&self.params, self.fuse_b2);
        ops::linear(t, h, w2, b2)
    }

    pub fn aux_det_logits(&self, t: &mut Tape, loc: Var) -> Var {
        let w = t.param(&self.params, self.aux_det_w);
        let b = t.param(&self.params, self.aux_det_b);
        ops::linear(t, loc, w, b)
    }

    pub fn aux_cls_logits(&self, t: &mut Tape, disc: Var) -> Var {
        let w = t.param(&self.params, self.aux_cls_w);
        let b = t.param(&self.params, self.aux_cls_b);
        ops::linear(t, disc, w, b)
    }

    /// Zero the auxiliary parameters, leaving fusion untouched. Inference
    /// never reads them, so this must not change any inference output.
    pub fn detach_aux(&mut self) {
        for id in [self.aux_det_w, self.aux_det_b, self.aux_cls_w, self.aux_cls_b] {
            self.params.get_mut(id).fill(0.0);
        }
    }

    pub fn arch_name(&self) -> String {
        format!(
            "joint-heads-v1:l{}:d{}:h{}",
            self.loc_dim, self.disc_dim, self.hidden
        )
    }

    pub fn save(
        &self,
        path: &Path,
        meta: BTreeMap<String, serde_json::Value>,
    ) -> Result<(), CheckpointError> {
        save_checkpoint(path, &self.params, &self.arch_name(), self.hidden, meta)
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<(), CheckpointError> {
        let arch = self.arch_name();
        load_checkpoint(path, &mut self.params, &arch)?;
        Ok(())
    }
}

/// The trained cascade.
pub struct ModelBundle {
    pub detector: Detector,
    pub classifier: RoiClassifier,
    pub heads: JointHeads,
    pub score_rule: ScoreRule,
}

/// Outputs of one cascaded evaluation pass.
#[derive(Debug, Clone, Copy)]
pub struct CascadeOutput {
    pub pred_box: BoundingBox,
    pub fused: ClassProbabilities,
    pub aux_det: ClassProbabilities,
    pub aux_cls: ClassProbabilities,
    /// predicted box was unusable and the stored label box was used
    pub fallback_used: bool,
}

fn probs_from_logits(t: &mut Tape, logits: Var) -> ClassProbabilities {
    let p = ops::softmax(t, logits);
    let pv = t.value(p).view().into_dimensionality::<Ix2>().unwrap().to_owned();
    ClassProbabilities {
        benign: pv[(0, 0)],
        malignant: pv[(0, 1)],
    }
}

/// Pick the crop box: the detector's top prediction unless it is
/// degenerate, in which case fall back to the provided stored box.
fn select_crop_box(
    predicted: Option<BoundingBox>,
    stored: Option<&BoundingBox>,
) -> (BoundingBox, bool) {
    match predicted {
        Some(b) if b.w >= 2.0 && b.h >= 2.0 => (b, false),
        _ => {
            let fb = stored.copied().unwrap_or(BoundingBox {
                x: 0.0,
                y: 0.0,
                w: 2.0,
                h: 2.0,
            });
            (fb, true)
        }
    }
}

/// Evaluate the full cascade on one image: detector top-1 box, crop,
/// classifier features, fused probabilities, both auxiliary heads.
pub fn cascaded_forward(
    detector: &mut Detector,
    classifier: &mut RoiClassifier,
    heads: &JointHeads,
    record: &ImageRecord,
    stored_box: Option<&BoundingBox>,
) -> Result<CascadeOutput, TrainError> {
    // detector pass: top-1 box and pooled top-pyramid features
    let x = detector.input_tensor(&[record]);
    let mut t = Tape::no_grad();
    let xv = t.constant(x.into_dyn());
    let det_out = detector.forward(&mut t, xv, false);
    let loc_feat = ops::global_avg_pool(&mut t, det_out.top_feature);

    let top = detector
        .predict_candidates(record, 1)?
        .boxes
        .first()
        .map(|s| s.bbox);
    let (crop_box, fallback_used) = select_crop_box(top, stored_box);
    let crop = crop_roi(&record.pixels, &crop_box)?;

    let cx = classifier.input_tensor(&[&crop])?;
    let cxv = t.constant(cx.into_dyn());
    let disc_feat = classifier.forward_features(&mut t, cxv, false);

    let fused_logits = heads.fusion_logits(&mut t, loc_feat, disc_feat);
    let fused = probs_from_logits(&mut t, fused_logits);
    let aux_d = heads.aux_det_logits(&mut t, loc_feat);
    let aux_det = probs_from_logits(&mut t, aux_d);
    let aux_c = heads.aux_cls_logits(&mut t, disc_feat);
    let aux_cls = probs_from_logits(&mut t, aux_c);

    Ok(CascadeOutput {
        pred_box: crop_box,
        fused,
        aux_det,
        aux_cls,
        fallback_used,
    })
}

/// Test-time inference: detector top-1 box plus fusion-head
/// probabilities. The auxiliary heads are not evaluated; the path is
/// otherwise identical to [`cascaded_forward`].
pub fn infer(
    detector: &mut Detector,
    classifier: &mut RoiClassifier,
    heads: &JointHeads,
    record: &ImageRecord,
    stored_box: Option<&BoundingBox>,
) -> Result<(BoundingBox, ClassProbabilities), TrainError> {
    let x = detector.input_tensor(&[record]);
    let mut t = Tape::no_grad();
    let xv = t.constant(x.into_dyn());
    let det_out = detector.forward(&mut t, xv, false);
    let loc_feat = ops::global_avg_pool(&mut t, det_out.top_feature);

    let top = detector
        .predict_candidates(record, 1)?
        .boxes
        .first()
        .map(|s| s.bbox);
    let (crop_box, _) = select_crop_box(top, stored_box);
    let crop = crop_roi(&record.pixels, &crop_box)?;

    let cx = classifier.input_tensor(&[&crop])?;
    let cxv = t.constant(cx.into_dyn());
    let disc_feat = classifier.forward_features(&mut t, cxv, false);
    let fused_logits = heads.fusion_logits(&mut t, loc_feat, disc_feat);
    let fused = probs_from_logits(&mut t, fused_logits);
    Ok((crop_box, fused))
}

/// Stage-2 hyperparameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Stage2Config {
    pub epochs: usize,
    pub alpha: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// train the two auxiliary classifiers (self-distillation); off for
    /// the B and CS ablation variants
    pub self_distillation: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            epochs: 2,
            alpha: 1.0,
            learning_rate: 1e-5,
            batch_size: 16,
            seed: 0,
            self_distillation: true,
        }
    }
}

/// One joint optimization pass over the training records.
///
/// The detector keeps its localization objective against the stored
/// (refined) labels; classification losses flow from the fusion head and,
/// when enabled, the auxiliary heads, back into both networks. Crop
/// boxes come from the detector's current top-1 prediction each epoch and
/// carry no gradient.
pub fn run_stage2(
    records: &[ImageRecord],
    store: &LabelStore,
    detector: &mut Detector,
    classifier: &mut RoiClassifier,
    heads: &mut JointHeads,
    cfg: &Stage2Config,
    log: &mut dyn FnMut(serde_json::Value),
) -> Result<(), TrainError> {
    let mut det_opt = Adam::new(cfg.learning_rate as f32);
    let mut cls_opt = Adam::new(cfg.learning_rate as f32);
    let mut heads_opt = Adam::new(cfg.learning_rate as f32);

    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(
            records.len(),
            cfg.batch_size,
            cfg.seed,
            0x5A5A_0000 + epoch as u64,
        );
        for (step, batch) in batches.iter().enumerate() {
            let recs: Vec<&ImageRecord> = batch.iter().map(|&i| &records[i]).collect();

            // crop boxes from the current detector, fallback to stored
            let mut crops: Vec<Array2<f32>> = Vec::with_capacity(recs.len());
            for r in &recs {
                let stored = store.get(&r.image_id).map(|e| e.current_roi);
                let top = detector
                    .predict_candidates(r, 1)?
                    .boxes
                    .first()
                    .map(|s| s.bbox);
                let (crop_box, fallback) = select_crop_box(top, stored.as_ref());
                if fallback {
                    log(serde_json::json!({
                        "event": "crop_fallback", "image_id": r.image_id,
                    }));
                }
                crops.push(crop_roi(&r.pixels, &crop_box)?);
            }

            let mut t = Tape::new();
            // detector terms against stored labels
            let det_items: Vec<DetTrainItem> = recs
                .iter()
                .map(|r| DetTrainItem {
                    record: r,
                    target: store
                        .get(&r.image_id)
                        .map(|e| e.current_roi)
                        .or(r.manual_roi)
                        .expect("every training record has a stored or manual box"),
                    fully_annotated: r.annotation_kind == AnnotationKind::Fully,
                })
                .collect();
            let x = detector.input_tensor(&recs);
            let xv = t.constant(x.into_dyn());
            let det_out = detector.forward(&mut t, xv, true);
            let mut terms = detector.loss_terms(&mut t, &det_out, &det_items, cfg.alpha as f32);

            // cascade classification terms
            let loc_feat = ops::global_avg_pool(&mut t, det_out.top_feature);
            let crop_refs: Vec<&Array2<f32>> = crops.iter().collect();
            let cx = classifier.input_tensor(&crop_refs)?;
            let cxv = t.constant(cx.into_dyn());
            let disc_feat = classifier.forward_features(&mut t, cxv, true);

            let labels: Vec<u8> = recs.iter().map(|r| r.label.index() as u8).collect();
            let weights = vec![1.0 / recs.len() as f32; recs.len()];
            let fused_logits = heads.fusion_logits(&mut t, loc_feat, disc_feat);
            let l_fnet = ops::softmax_bce(&mut t, fused_logits, &labels, &weights);
            terms.push((l_fnet, 1.0));
            if cfg.self_distillation {
                let aux_d = heads.aux_det_logits(&mut t, loc_feat);
                let l_cls1 = ops::softmax_bce(&mut t, aux_d, &labels, &weights);
                let aux_c = heads.aux_cls_logits(&mut t, disc_feat);
                let l_cls2 = ops::softmax_bce(&mut t, aux_c, &labels, &weights);
                terms.push((l_cls1, 1.0));
                terms.push((l_cls2, 1.0));
            }

            let total = ops::weighted_sum(&mut t, &terms);
            let loss = t.scalar(total);
            if !loss.is_finite() {
                return Err(TrainError::Detector(
                    crate::detector::DetectorError::Diverged(format!(
                        "joint loss is {loss} at epoch {epoch} step {step}"
                    )),
                ));
            }
            let grads = t.backward(total);
            det_opt.step(&mut detector.params, &grads);
            cls_opt.step(&mut classifier.params, &grads);
            heads_opt.step(&mut heads.params, &grads);
            log(serde_json::json!({
                "event": "train_step", "net": "joint", "phase": "stage2",
                "epoch": epoch, "step": step, "loss": loss,
            }));
        }
    }
    Ok(())
}

impl ModelBundle {
    /// Persist per-component checkpoints plus a manifest recording the
    /// config hash, stage lineage, and label-store snapshot.
    pub fn save(
        &self,
        dir: &Path,
        config_hash: &str,
        store: &LabelStore,
    ) -> Result<(), TrainError> {
        fs::create_dir_all(dir).map_err(TrainError::Io)?;
        let mut meta = BTreeMap::new();
        meta.insert(
            "config_hash".to_string(),
            serde_json::Value::String(config_hash.to_string()),
        );
        meta.insert(
            "lineage".to_string(),
            serde_json::Value::String("stage1+stage2".to_string()),
        );
        self.detector
            .save(&dir.join("detector.ckpt"), meta.clone())
            .map_err(|e| TrainError::Io(std::io::Error::other(e.to_string())))?;
        self.classifier
            .save(&dir.join("classifier.ckpt"), meta.clone())
            .map_err(|e| TrainError::Io(std::io::Error::other(e.to_string())))?;
        self.heads
            .save(&dir.join("heads.ckpt"), meta.clone())
            .map_err(|e| TrainError::Io(std::io::Error::other(e.to_string())))?;
        let manifest = serde_json::json!({
            "config_hash": config_hash,
            "lineage": "stage1+stage2",
            "score_rule": self.score_rule,
            "components": ["detector.ckpt", "classifier.ckpt", "heads.ckpt"],
            "label_store": "labelstore.json",
        });
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)
                .map_err(|e| TrainError::Io(std::io::Error::other(e.to_string())))?,
        )
        .map_err(TrainError::Io)?;
        fs::write(
            dir.join("labelstore.json"),
            serde_json::to_string_pretty(store)
                .map_err(|e| TrainError::Io(std::io::Error::other(e.to_string())))?,
        )
        .map_err(TrainError::Io)?;
        Ok(())
    }

    /// Rebuild a bundle from a saved directory; configs must match the
    /// architectures recorded in the checkpoints.
    pub fn load(
        dir: &Path,
        det_cfg: DetectorConfig,
        cls_cfg: ClassifierConfig,
        hidden: usize,
        score_rule: ScoreRule,
    ) -> Result<Self, TrainError> {
        let wrap = |e: CheckpointError| TrainError::Io(std::io::Error::other(e.to_string()));
        let mut detector = Detector::new(det_cfg, 0)?;
        detector.load_weights(&dir.join("detector.ckpt")).map_err(wrap)?;
        let mut classifier = RoiClassifier::new(cls_cfg, 0);
        classifier
            .load_weights(&dir.join("classifier.ckpt"))
            .map_err(wrap)?;
        let loc_dim = detector.cfg.fpn_channels;
        let disc_dim = classifier.cfg.feature_dim();
        let mut heads = JointHeads::new(loc_dim, disc_dim, hidden, 0);
        heads.load_weights(&dir.join("heads.ckpt")).map_err(wrap)?;
        Ok(ModelBundle {
            detector,
            classifier,
            heads,
            score_rule,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ClassLabel;

    #[test]
    fn joint_loss_sums() {
        assert!((joint_loss(0.2, 0.3, 0.1, 0.4) - 1.0).abs() < 1e-12);
        assert_eq!(joint_loss(0.0, 0.0, 0.0, 0.0), 0.0);
        let full = joint_loss(0.2, 0.3, 0.1, 0.4);
        assert!((full - joint_loss(0.0, 0.3, 0.1, 0.4) - 0.2).abs() < 1e-12);
        assert!((full - joint_loss(0.2, 0.3, 0.1, 0.0) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn select_crop_box_fallback() {
        let stored = BoundingBox::new(5.0, 5.0, 20.0, 20.0).unwrap();
        let good = BoundingBox::new(1.0, 1.0, 30.0, 30.0).unwrap();
        let (b, fb) = select_crop_box(Some(good), Some(&stored));
        assert_eq!(b, good);
        assert!(!fb);
        let degenerate = BoundingBox {
            x: 0.0,
            y: 0.0,
            w: 1.0,
            h: 1.5,
        };
        let (b, fb) = select_crop_box(Some(degenerate), Some(&stored));
        assert_eq!(b, stored);
        assert!(fb);
        let (b, fb) = select_crop_box(None, Some(&stored));
        assert_eq!(b, stored);
        assert!(fb);
    }

    fn tiny_nets() -> (Detector, RoiClassifier, JointHeads) {
        let det_cfg = DetectorConfig {
            input_size: 128,
            stem_channels: 4,
            stage_channels: [4, 6, 8, 8],
            blocks_per_stage: [1, 1, 1, 1],
            fpn_channels: 8,
            head_convs: 1,
            stem7: false,
            variances: [0.1, 0.1, 0.2, 0.2],
            nms_iou: 0.5,
            pre_nms_top: 100,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        };
        let cls_cfg = ClassifierConfig {
            crop_size: 64,
            stem_channels: 4,
            stage_channels: [4, 6, 8, 8],
            blocks_per_stage: [1, 1, 1, 1],
            stem7: false,
        };
        let det = Detector::new(det_cfg, 1).unwrap();
        let cls = RoiClassifier::new(cls_cfg, 2);
        let heads = JointHeads::new(8, 8, 16, 3);
        (det, cls, heads)
    }

    fn toy_records(n: usize) -> Vec<ImageRecord> {
        (0..n)
            .map(|i| {
                let mut pixels = Array2::from_elem((128, 128), 0.4f32);
                let bright = i % 2 == 1;
                for y in 40..70 {
                    for x in 50..90 {
                        pixels[(y, x)] = if bright { 0.9 } else { 0.1 };
                    }
                }
                ImageRecord {
                    image_id: format!("img{i}"),
                    patient_id: format!("p{}", i / 2),
                    pixels,
                    label: ClassLabel::from_index(u8::from(bright)).unwrap(),
                    manual_roi: Some(BoundingBox::new(50.0, 40.0, 40.0, 30.0).unwrap()),
                    annotation_kind: AnnotationKind::Fully,
                    withheld_roi: None,
                    image_path: String::new(),
                }
            })
            .collect()
    }

    #[test]
    fn cascade_softmax_contracts_and_determinism() {
        let (mut det, mut cls, heads) = tiny_nets();
        let recs = toy_records(1);
        let out1 = cascaded_forward(&mut det, &mut cls, &heads, &recs[0], None).unwrap();
        let out2 = cascaded_forward(&mut det, &mut cls, &heads, &recs[0], None).unwrap();
        for p in [out1.fused, out1.aux_det, out1.aux_cls] {
            assert!((p.benign + p.malignant - 1.0).abs() < 1e-6);
        }
        assert_eq!(out1.pred_box, out2.pred_box);
        assert_eq!(out1.fused, out2.fused);
        assert_eq!(out1.aux_det, out2.aux_det);
    }

    #[test]
    fn infer_matches_cascade_and_ignores_aux_params() {
        let (mut det, mut cls, mut heads) = tiny_nets();
        let recs = toy_records(2);
        for r in &recs {
            let cascade = cascaded_forward(&mut det, &mut cls, &heads, r, None).unwrap();
            let (bx, probs) = infer(&mut det, &mut cls, &heads, r, None).unwrap();
            assert_eq!(bx, cascade.pred_box);
            assert_eq!(probs, cascade.fused);
            assert!(bx.w > 0.0 && bx.h > 0.0);
            assert!(bx.contains(r.width(), r.height()));
        }
        // zeroing aux parameters changes nothing, bit for bit
        let before: Vec<_> = recs
            .iter()
            .map(|r| infer(&mut det, &mut cls, &heads, r, None).unwrap())
            .collect();
        heads.detach_aux();
        for (r, (b0, p0)) in recs.iter().zip(before) {
            let (b1, p1) = infer(&mut det, &mut cls, &heads, r, None).unwrap();
            assert_eq!(b0, b1);
            assert!(p0.benign.to_bits() == p1.benign.to_bits());
            assert!(p0.malignant.to_bits() == p1.malignant.to_bits());
        }
    }

    #[test]
    fn fusion_invariant_to_consistent_feature_permutation() {
        // swapping the concat order while permuting the first-layer
        // weights identically leaves the fused output unchanged
        let (mut det, mut cls, heads) = tiny_nets();
        let recs = toy_records(1);
        let r = &recs[0];
        let loc = det.extract_location_features(r);
        let crop = crop_roi(&r.pixels, &r.manual_roi.unwrap()).unwrap();
        let crop64 = crate::data::bilinear_resize(crop.view(), 64, 64);
        let disc = cls.extract_disc_features(&crop64).unwrap();

        let fused = |heads: &JointHeads, a: &[f32], b: &[f32]| -> (f32, f32) {
            let mut t = Tape::no_grad();
            let av = t.constant(
                Array2::from_shape_vec((1, a.len()), a.to_vec())
                    .unwrap()
                    .into_dyn(),
            );
            let bv = t.constant(
                Array2::from_shape_vec((1, b.len()), b.to_vec())
                    .unwrap()
                    .into_dyn(),
            );
            let logits = heads.fusion_logits(&mut t, av, bv);
            let p = probs_from_logits(&mut t, logits);
            (p.benign, p.malignant)
        };
        let orig = fused(&heads, &loc, &disc);

        // build swapped heads: w1 columns permuted to (disc, loc) order
        let mut swapped = JointHeads::new(heads.disc_dim, heads.loc_dim, heads.hidden, 99);
        let w1 = heads.params.get(heads.fuse_w1).clone();
        let (hdim, total) = (heads.hidden, heads.loc_dim + heads.disc_dim);
        let mut w1p = crate::nn::tape::Arr::zeros(vec![hdim, total]);
        for h in 0..hdim {
            for j in 0..heads.disc_dim {
                w1p[[h, j]] = w1[[h, heads.loc_dim + j]];
            }
            for j in 0..heads.loc_dim {
                w1p[[h, heads.disc_dim + j]] = w1[[h, j]];
            }
        }
        *swapped.params.get_mut(swapped.fuse_w1) = w1p;
        *swapped.params.get_mut(swapped.fuse_b1) = heads.params.get(heads.fuse_b1).clone();
        *swapped.params.get_mut(swapped.fuse_w2) = heads.params.get(heads.fuse_w2).clone();
        *swapped.params.get_mut(swapped.fuse_b2) = heads.params.get(heads.fuse_b2).clone();
        let perm = fused(&swapped, &disc, &loc);
        assert!((orig.0 - perm.0).abs() < 1e-6);
        assert!((orig.1 - perm.1).abs() < 1e-6);
    }

    #[test]
    fn stage2_step_moves_all_three_networks() {
        let (mut det, mut cls, mut heads) = tiny_nets();
        let records = toy_records(4);
        let mut store = LabelStore::new();
        for r in &records {
            store.seed_manual(&r.image_id, r.manual_roi.unwrap(), 0.5);
        }
        let before_det = det.params.get(crate::nn::ParamId(0)).clone();
        let before_cls = cls.params.get(crate::nn::ParamId(0)).clone();
        let before_heads = heads.params.get(heads.fuse_w1).clone();
        let cfg = Stage2Config {
            epochs: 1,
            alpha: 1.0,
            learning_rate: 1e-3,
            batch_size: 4,
            seed: 0,
            self_distillation: true,
        };
        run_stage2(
            &records,
            &store,
            &mut det,
            &mut cls,
            &mut heads,
            &cfg,
            &mut |_| {},
        )
        .unwrap();
        assert_ne!(&before_det, det.params.get(crate::nn::ParamId(0)));
        assert_ne!(&before_cls, cls.params.get(crate::nn::ParamId(0)));
        assert_ne!(&before_heads, heads.params.get(heads.fuse_w1));
    }

    #[test]
    fn zero_epochs_leaves_networks_untouched() {
        let (mut det, mut cls, mut heads) = tiny_nets();
        let records = toy_records(2);
        let mut store = LabelStore::new();
        for r in &records {
            store.seed_manual(&r.image_id, r.manual_roi.unwrap(), 0.5);
        }
        let before = infer(&mut det, &mut cls, &heads, &records[0], None).unwrap();
        let cfg = Stage2Config {
            epochs: 0,
            ..Stage2Config::default()
        };
        run_stage2(
            &records,
            &store,
            &mut det,
            &mut cls,
            &mut heads,
            &cfg,
            &mut |_| {},
        )
        .unwrap();
        let after = infer(&mut det, &mut cls, &heads, &records[0], None).unwrap();
        assert_eq!(before.0, after.0);
        assert_eq!(before.1, after.1);
    }
}
