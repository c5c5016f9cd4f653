//! ROI classifier: residual backbone on 224x224 crops, softmax
//! probabilities, binary cross-entropy, weighted fully/partially
//! annotated loss, candidate scoring, and feature extraction.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array4, Ix2};
use rand::Rng;
use thiserror::Error;

use crate::data::{ClassLabel, ROI_SIZE};
use crate::nn::layers::{ConvBnRelu, ResidualBlock};
use crate::nn::ops;
use crate::nn::{load_checkpoint, save_checkpoint, Adam, CheckpointError, ParamStore, Tape, Var};
use crate::rng::derived_rng;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("crop must be {expected}x{expected}, got {got_h}x{got_w}")]
    WrongShape {
        expected: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("cross-entropy needs at least one sample")]
    EmptyBatch,
    #[error("training diverged: {0}")]
    Diverged(String),
}

/// Probability clamp used inside logs.
pub const PROB_EPS: f64 = 1e-7;

/// Softmax output pair; benign + malignant = 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassProbabilities {
    pub benign: f32,
    pub malignant: f32,
}

impl ClassProbabilities {
    pub fn of(&self, label: ClassLabel) -> f64 {
        match label {
            ClassLabel::Benign => f64::from(self.benign),
            ClassLabel::Malignant => f64::from(self.malignant),
        }
    }

    pub fn max_prob(&self) -> f64 {
        f64::from(self.benign.max(self.malignant))
    }

    pub fn predicted(&self) -> ClassLabel {
        if self.malignant >= self.benign {
            ClassLabel::Malignant
        } else {
            ClassLabel::Benign
        }
    }
}

/// Which probability scores a candidate box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ScoreRule {
    /// probability of the image's known class label (the weak-supervision
    /// signal; default)
    TrueClass,
    /// highest probability over both classes
    MaxClass,
}

/// Mean binary cross-entropy of malignant-class probabilities `q` against
/// labels `y`, probabilities clamped at 1e-7.
pub fn ce_loss(q: &[f64], y: &[u8]) -> Result<f64, ClassifierError> {
    if q.is_empty() || q.len() != y.len() {
        return Err(ClassifierError::EmptyBatch);
    }
    let mut total = 0.0;
    for (&qi, &yi) in q.iter().zip(y) {
        let qc = qi.clamp(PROB_EPS, 1.0 - PROB_EPS);
        total -= if yi == 1 { qc.ln() } else { (1.0 - qc).ln() };
    }
    Ok(total / q.len() as f64)
}

/// Classifier loss: fully annotated term plus `beta` times the partially
/// annotated term.
pub fn cnet_loss(loss_fa: f64, loss_pa: f64, beta: f64) -> f64 {
    loss_fa + beta * loss_pa
}

#[derive(Debug, Clone)]
pub struct ClassifierConfig {
    pub crop_size: usize,
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub stem7: bool,
}

impl ClassifierConfig {
    pub fn desk() -> Self {
        ClassifierConfig {
            crop_size: ROI_SIZE,
            stem_channels: 8,
            stage_channels: [8, 16, 24, 32],
            blocks_per_stage: [1, 1, 1, 1],
            stem7: false,
        }
    }

    /// 18-layer-class backbone widths.
    pub fn paper() -> Self {
        ClassifierConfig {
            crop_size: ROI_SIZE,
            stem_channels: 64,
            stage_channels: [64, 128, 256, 512],
            blocks_per_stage: [2, 2, 2, 2],
            stem7: true,
        }
    }

    /// Length of the pooled feature vector.
    pub fn feature_dim(&self) -> usize {
        self.stage_channels[3]
    }

    pub fn arch_name(&self) -> String {
        format!(
            "classifier-v1:s{}:c{},{},{},{}:b{},{},{},{}:in{}",
            self.stem_channels,
            self.stage_channels[0],
            self.stage_channels[1],
            self.stage_channels[2],
            self.stage_channels[3],
            self.blocks_per_stage[0],
            self.blocks_per_stage[1],
            self.blocks_per_stage[2],
            self.blocks_per_stage[3],
            self.crop_size,
        )
    }
}

struct Stage {
    transition: Option<ConvBnRelu>,
    blocks: Vec<ResidualBlock>,
}

struct Structure {
    stem: ConvBnRelu,
    stem_expand: Option<ConvBnRelu>,
    stages: Vec<Stage>,
    fc_w: crate::nn::ParamId,
    fc_b: crate::nn::ParamId,
}

pub struct RoiClassifier {
    pub cfg: ClassifierConfig,
    pub params: ParamStore,
    structure: Structure,
}

/// One training example: crop, class label, annotation flag.
pub struct ClsTrainItem {
    pub crop: Array2<f32>,
    pub label: ClassLabel,
    pub fully_annotated: bool,
}

impl RoiClassifier {
    pub fn new(cfg: ClassifierConfig, seed: u64) -> Self {
        let mut ps = ParamStore::new();
        let mut rng = derived_rng(seed, "classifier-init", 0);
        let structure = Self::build(&cfg, &mut ps, &mut rng);
        RoiClassifier {
            cfg,
            params: ps,
            structure,
        }
    }

    fn build(cfg: &ClassifierConfig, ps: &mut ParamStore, rng: &mut impl Rng) -> Structure {
        let ch = cfg.stage_channels;
        let stem_k = if cfg.stem7 { 7 } else { 3 };
        let stem = ConvBnRelu::new(ps, rng, "stem", 1, cfg.stem_channels, stem_k, 2, true);
        let stem_expand = (cfg.stem_channels != ch[0]).then(|| {
            ConvBnRelu::new(ps, rng, "stem_expand", cfg.stem_channels, ch[0], 1, 1, true)
        });
        let mut stages = Vec::new();
        for (si, &width) in ch.iter().enumerate() {
            let transition = (si > 0).then(|| {
                ConvBnRelu::new(
                    ps,
                    rng,
                    &format!("stage{si}.trans"),
                    ch[si - 1],
                    width,
                    3,
                    2,
                    true,
                )
            });
            let blocks = (0..cfg.blocks_per_stage[si])
                .map(|bi| ResidualBlock::new(ps, rng, &format!("stage{si}.block{bi}"), width))
                .collect();
            stages.push(Stage { transition, blocks });
        }
        let fc_w = ps.add("fc.w", crate::nn::init::kaiming_linear(rng, 2, ch[3]));
        let fc_b = ps.add("fc.b", crate::nn::tape::Arr::zeros(vec![2]));
        Structure {
            stem,
            stem_expand,
            stages,
            fc_w,
            fc_b,
        }
    }

    pub fn input_tensor(&self, crops: &[&Array2<f32>]) -> Result<Array4<f32>, ClassifierError> {
        let s = self.cfg.crop_size;
        let mut x = Array4::<f32>::zeros((crops.len(), 1, s, s));
        for (i, c) in crops.iter().enumerate() {
            if c.nrows() != s || c.ncols() != s {
                return Err(ClassifierError::WrongShape {
                    expected: s,
                    got_h: c.nrows(),
                    got_w: c.ncols(),
                });
            }
            for y in 0..s {
                for xx in 0..s {
                    x[(i, 0, y, xx)] = c[(y, xx)] - 0.5;
                }
            }
        }
        Ok(x)
    }

    /// Pooled backbone features, (N, feature_dim).
    pub fn forward_features(&mut self, t: &mut Tape, x: Var, train: bool) -> Var {
        let ps = &mut self.params;
        let st = &self.structure;
        let mut h = st.stem.forward(t, ps, x, train);
        h = ops::maxpool2d(t, h, 3, 2, 1);
        if let Some(e) = &st.stem_expand {
            h = e.forward(t, ps, h, train);
        }
        for stage in &st.stages {
            if let Some(tr) = &stage.transition {
                h = tr.forward(t, ps, h, train);
            }
            for b in &stage.blocks {
                h = b.forward(t, ps, h, train);
            }
        }
        ops::global_avg_pool(t, h)
    }

    /// Features and the binary logits of the stage-1 head.
    pub fn forward_logits(&mut self, t: &mut Tape, x: Var, train: bool) -> (Var, Var) {
        let feats = self.forward_features(t, x, train);
        let w = t.param(&self.params, self.structure.fc_w);
        let b = t.param(&self.params, self.structure.fc_b);
        let logits = ops::linear(t, feats, w, b);
        (logits, feats)
    }

    pub fn classify_batch(
        &mut self,
        crops: &[&Array2<f32>],
    ) -> Result<Vec<ClassProbabilities>, ClassifierError> {
        let x = self.input_tensor(crops)?;
        let mut t = Tape::no_grad();
        let xv = t.constant(x.into_dyn());
        let (logits, _) = self.forward_logits(&mut t, xv, false);
        let probs = ops::softmax(&mut t, logits);
        let pv = t.value(probs).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        Ok(pv
            .rows()
            .into_iter()
            .map(|r| ClassProbabilities {
                benign: r[0],
                malignant: r[1],
            })
            .collect())
    }

    pub fn classify(&mut self, crop: &Array2<f32>) -> Result<ClassProbabilities, ClassifierError> {
        Ok(self.classify_batch(&[crop])?[0])
    }

    /// The weak-supervision score of one candidate crop.
    pub fn score_candidate(
        &mut self,
        crop: &Array2<f32>,
        label: ClassLabel,
        rule: ScoreRule,
    ) -> Result<f64, ClassifierError> {
        let p = self.classify(crop)?;
        Ok(match rule {
            ScoreRule::TrueClass => p.of(label),
            ScoreRule::MaxClass => p.max_prob(),
        })
    }

    pub fn extract_disc_features(&mut self, crop: &Array2<f32>) -> Result<Vec<f32>, ClassifierError> {
        let x = self.input_tensor(&[crop])?;
        let mut t = Tape::no_grad();
        let xv = t.constant(x.into_dyn());
        let f = self.forward_features(&mut t, xv, false);
        Ok(t.value(f)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .row(0)
            .to_vec())
    }

    /// One optimizer step; the loss is the fully annotated batch mean plus
    /// `beta` times the partially annotated batch mean.
    pub fn train_step(
        &mut self,
        items: &[ClsTrainItem],
        beta: f32,
        opt: &mut Adam,
    ) -> Result<f32, ClassifierError> {
        assert!(!items.is_empty());
        let n_fa = items.iter().filter(|i| i.fully_annotated).count();
        let n_pa = items.len() - n_fa;
        let crops: Vec<&Array2<f32>> = items.iter().map(|i| &i.crop).collect();
        let x = self.input_tensor(&crops)?;
        let labels: Vec<u8> = items.iter().map(|i| i.label.index() as u8).collect();
        let weights: Vec<f32> = items
            .iter()
            .map(|i| {
                if i.fully_annotated {
                    1.0 / n_fa as f32
                } else {
                    beta / n_pa as f32
                }
            })
            .collect();
        let mut t = Tape::new();
        let xv = t.constant(x.into_dyn());
        let (logits, _) = self.forward_logits(&mut t, xv, true);
        let loss_var = ops::softmax_bce(&mut t, logits, &labels, &weights);
        let loss = t.scalar(loss_var);
        if !loss.is_finite() {
            return Err(ClassifierError::Diverged(format!(
                "classifier loss is {loss}"
            )));
        }
        let grads = t.backward(loss_var);
        opt.step(&mut self.params, &grads);
        Ok(loss)
    }

    pub fn save(
        &self,
        path: &Path,
        meta: BTreeMap<String, serde_json::Value>,
    ) -> Result<(), CheckpointError> {
        save_checkpoint(
            path,
            &self.params,
            &self.cfg.arch_name(),
            self.cfg.crop_size,
            meta,
        )
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<(), CheckpointError> {
        let arch = self.cfg.arch_name();
        load_checkpoint(path, &mut self.params, &arch)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derived_rng;
    use rand::Rng;

    fn tiny_cfg() -> ClassifierConfig {
        ClassifierConfig {
            crop_size: 64,
            stem_channels: 4,
            stage_channels: [4, 6, 8, 8],
            blocks_per_stage: [1, 1, 1, 1],
            stem7: false,
        }
    }

    fn random_crop(seed: u64, size: usize) -> Array2<f32> {
        let mut rng = derived_rng(seed, "crop", 0);
        Array2::from_shape_fn((size, size), |_| rng.random::<f32>())
    }

    #[test]
    fn ce_loss_examples() {
        // confident correct
        let v = ce_loss(&[1.0 - 1e-7], &[1]).unwrap();
        assert!(v.abs() < 1e-6);
        // maximal entropy
        let v = ce_loss(&[0.5], &[1]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-9);
        // worked two-sample case: -(ln 0.9 + ln 0.8) / 2
        let v = ce_loss(&[0.9, 0.2], &[1, 0]).unwrap();
        assert!((v - 0.164_252_033_486_018).abs() < 1e-9, "{v}");
        assert!(ce_loss(&[], &[]).is_err());
    }

    #[test]
    fn ce_loss_nonnegative_and_clamped() {
        let mut rng = derived_rng(1, "ce-prop", 0);
        for _ in 0..200 {
            let q: f64 = rng.random();
            let y = u8::from(rng.random::<bool>());
            let v = ce_loss(&[q], &[y]).unwrap();
            assert!(v >= 0.0);
        }
        // clamping keeps the worst case finite
        let v = ce_loss(&[0.0], &[1]).unwrap();
        assert!(v.is_finite());
        assert!((v - (-(PROB_EPS).ln())).abs() < 1e-6);
    }

    #[test]
    fn cnet_loss_weighted_sum() {
        assert!((cnet_loss(1.0, 0.5, 0.8) - 1.4).abs() < 1e-12);
        assert_eq!(cnet_loss(0.33, 0.0, 2.0), 0.33);
        assert!((cnet_loss(0.2, 0.3, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn classify_sums_to_one_and_deterministic() {
        let mut cls = RoiClassifier::new(tiny_cfg(), 3);
        let crop = random_crop(0, 64);
        let p = cls.classify(&crop).unwrap();
        assert!((p.benign + p.malignant - 1.0).abs() < 1e-6);
        let p2 = cls.classify(&crop).unwrap();
        assert_eq!(p, p2);
    }

    #[test]
    fn wrong_shape_rejected() {
        let mut cls = RoiClassifier::new(tiny_cfg(), 0);
        let crop = random_crop(0, 32);
        assert!(matches!(
            cls.classify(&crop),
            Err(ClassifierError::WrongShape { .. })
        ));
    }

    #[test]
    fn score_candidate_selects_label_component() {
        let mut cls = RoiClassifier::new(tiny_cfg(), 5);
        let crop = random_crop(2, 64);
        let p = cls.classify(&crop).unwrap();
        let sb = cls
            .score_candidate(&crop, ClassLabel::Benign, ScoreRule::TrueClass)
            .unwrap();
        let sm = cls
            .score_candidate(&crop, ClassLabel::Malignant, ScoreRule::TrueClass)
            .unwrap();
        assert!((sb - f64::from(p.benign)).abs() < 1e-9);
        assert!((sm - f64::from(p.malignant)).abs() < 1e-9);
        assert!((sb + sm - 1.0).abs() < 1e-6);
        let mx = cls
            .score_candidate(&crop, ClassLabel::Benign, ScoreRule::MaxClass)
            .unwrap();
        assert!((mx - sb.max(sm)).abs() < 1e-9);
    }

    #[test]
    fn features_have_configured_dim_and_no_nan() {
        let mut cls = RoiClassifier::new(tiny_cfg(), 1);
        for seed in 0..20 {
            let f = cls.extract_disc_features(&random_crop(seed, 64)).unwrap();
            assert_eq!(f.len(), cls.cfg.feature_dim());
            assert!(f.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn train_step_learns_constant_mapping() {
        let mut cls = RoiClassifier::new(tiny_cfg(), 7);
        // bright crops malignant, dark crops benign
        let items: Vec<ClsTrainItem> = (0..8)
            .map(|i| {
                let bright = i % 2 == 1;
                let base = if bright { 0.85 } else { 0.15 };
                let mut crop = random_crop(i as u64, 64);
                crop.mapv_inplace(|v| base + 0.1 * (v - 0.5));
                ClsTrainItem {
                    crop,
                    label: ClassLabel::from_index(u8::from(bright)).unwrap(),
                    fully_annotated: i % 3 != 0,
                }
            })
            .collect();
        let mut opt = Adam::new(1e-2);
        let first = cls.train_step(&items, 0.8, &mut opt).unwrap();
        let mut last = first;
        for _ in 0..40 {
            last = cls.train_step(&items, 0.8, &mut opt).unwrap();
        }
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn autodiff_bce_matches_scalar_ce_loss() {
        // the fused training loss against the reference formula with
        // uniform 1/N weights
        let mut cls = RoiClassifier::new(tiny_cfg(), 11);
        let crops: Vec<Array2<f32>> = (0..4).map(|i| random_crop(100 + i, 64)).collect();
        let labels = [0u8, 1, 1, 0];
        let crop_refs: Vec<&Array2<f32>> = crops.iter().collect();
        let probs = cls.classify_batch(&crop_refs).unwrap();
        let q: Vec<f64> = probs.iter().map(|p| f64::from(p.malignant)).collect();
        let reference = ce_loss(&q, &labels).unwrap();

        let x = cls.input_tensor(&crop_refs).unwrap();
        let mut t = Tape::no_grad();
        let xv = t.constant(x.into_dyn());
        let (logits, _) = cls.forward_logits(&mut t, xv, false);
        let w = vec![0.25f32; 4];
        let fused = ops::softmax_bce(&mut t, logits, &labels, &w);
        let got = f64::from(t.scalar(fused));
        assert!((got - reference).abs() < 1e-5, "{got} vs {reference}");
    }
}
