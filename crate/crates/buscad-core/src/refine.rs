//! Candidate selection and stage-1 orchestration: pseudo-label
//! generation for partially annotated images, score-guarded ROI label
//! replacement for all images, and the iterated train/refine loop.
//!
//! A label is replaced only when the best candidate's score strictly
//! exceeds the freshly computed score of the incumbent box, so manual
//! ground truth survives refinement unless something scores better, and
//! repeated passes under a frozen scorer reach a fixed point after one
//! call.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{ClassifierError, ClsTrainItem, RoiClassifier, ScoreRule};
use crate::data::{crop_roi, AnnotationKind, BoundingBox, DataError, ImageRecord};
use crate::detector::{Detector, DetectorError, DetTrainItem, ScoredBox};
use crate::nn::Adam;
use crate::rng::derived_rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no fully annotated images in the training set")]
    NoFullyAnnotated,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl TrainError {
    /// True when the failure is a numeric divergence rather than bad input.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            TrainError::Detector(DetectorError::Diverged(_))
                | TrainError::Classifier(ClassifierError::Diverged(_))
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelOrigin {
    Manual,
    Pseudo,
    Refined,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub roi: BoundingBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub current_roi: BoundingBox,
    pub current_score: f64,
    pub origin: LabelOrigin,
    pub history: Vec<HistoryEntry>,
}

/// Registry of each image's current ROI-level label with its replacement
/// history. Entry 0 of the history always preserves the initial box
/// (manual or pseudo), so original ground truth is never lost.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelStore {
    entries: BTreeMap<String, LabelEntry>,
}

impl LabelStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&LabelEntry> {
        self.entries.get(image_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &LabelEntry)> {
        self.entries.iter()
    }

    pub fn current_boxes(&self) -> BTreeMap<String, BoundingBox> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), v.current_roi))
            .collect()
    }

    /// Boxes as they were first recorded (history entry 0).
    pub fn initial_boxes(&self) -> BTreeMap<String, BoundingBox> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), v.history[0].roi))
            .collect()
    }

    fn insert(&mut self, image_id: &str, roi: BoundingBox, score: f64, origin: LabelOrigin) {
        self.entries.insert(
            image_id.to_string(),
            LabelEntry {
                current_roi: roi,
                current_score: score,
                origin,
                history: vec![HistoryEntry {
                    iteration: 0,
                    roi,
                    score,
                }],
            },
        );
    }

    /// Seed a fully annotated image's entry from its manual box.
    pub fn seed_manual(&mut self, image_id: &str, roi: BoundingBox, score: f64) {
        self.insert(image_id, roi, score, LabelOrigin::Manual);
    }

    /// Record a detector-generated label for a partially annotated image.
    pub fn insert_pseudo(&mut self, image_id: &str, roi: BoundingBox, score: f64) {
        self.insert(image_id, roi, score, LabelOrigin::Pseudo);
    }

    /// Append one line per image to the JSON-lines audit trail.
    pub fn append_audit(&self, path: &Path, iteration: usize) -> std::io::Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        for (id, e) in &self.entries {
            let line = serde_json::json!({
                "image_id": id,
                "iteration": iteration,
                "box": e.current_roi,
                "score": e.current_score,
                "origin": e.origin,
            });
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

/// Source of ranked candidate boxes for an image.
pub trait CandidateProposer {
    fn propose(&mut self, record: &ImageRecord, k: usize) -> Result<Vec<ScoredBox>, TrainError>;
}

/// Scores a box on an image; higher is better.
pub trait RoiScorer {
    fn score(&mut self, record: &ImageRecord, bbox: &BoundingBox) -> Result<f64, TrainError>;

    /// Score several boxes on one image; implementations may batch.
    fn score_many(
        &mut self,
        record: &ImageRecord,
        boxes: &[BoundingBox],
    ) -> Result<Vec<f64>, TrainError> {
        boxes.iter().map(|b| self.score(record, b)).collect()
    }
}

impl CandidateProposer for Detector {
    fn propose(&mut self, record: &ImageRecord, k: usize) -> Result<Vec<ScoredBox>, TrainError> {
        Ok(self.predict_candidates(record, k)?.boxes)
    }
}

/// Classifier-backed scorer applying the configured score rule.
pub struct ClassifierScorer<'a> {
    pub classifier: &'a mut RoiClassifier,
    pub rule: ScoreRule,
}

impl RoiScorer for ClassifierScorer<'_> {
    fn score(&mut self, record: &ImageRecord, bbox: &BoundingBox) -> Result<f64, TrainError> {
        let crop = crop_roi(&record.pixels, bbox)?;
        Ok(self.classifier.score_candidate(&crop, record.label, self.rule)?)
    }

    fn score_many(
        &mut self,
        record: &ImageRecord,
        boxes: &[BoundingBox],
    ) -> Result<Vec<f64>, TrainError> {
        let crops: Vec<ndarray::Array2<f32>> = boxes
            .iter()
            .map(|b| crop_roi(&record.pixels, b))
            .collect::<Result<_, _>>()?;
        let refs: Vec<&ndarray::Array2<f32>> = crops.iter().collect();
        let probs = self.classifier.classify_batch(&refs)?;
        Ok(probs
            .iter()
            .map(|p| match self.rule {
                ScoreRule::TrueClass => p.of(record.label),
                ScoreRule::MaxClass => p.max_prob(),
            })
            .collect())
    }
}

/// Highest-scoring candidate; ties break to the lowest index.
fn argmax_candidate(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Generate pseudo labels for partially annotated images: take k
/// candidates, score each, store the argmax with origin `Pseudo`.
pub fn generate_pseudo_labels(
    pa_records: &[&ImageRecord],
    proposer: &mut dyn CandidateProposer,
    scorer: &mut dyn RoiScorer,
    k: usize,
    store: &mut LabelStore,
) -> Result<(), TrainError> {
    for rec in pa_records {
        let candidates = proposer.propose(rec, k)?;
        debug_assert!(!candidates.is_empty());
        let boxes: Vec<BoundingBox> = candidates.iter().map(|c| c.bbox).collect();
        let scores = scorer.score_many(rec, &boxes)?;
        let best = argmax_candidate(&scores);
        store.insert_pseudo(&rec.image_id, boxes[best], scores[best]);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct RefineStats {
    pub images: usize,
    pub replaced: usize,
    pub mean_score: f64,
}

/// One candidate-selection pass: for every image, score the incumbent
/// label and k fresh candidates; adopt the best candidate only on strict
/// improvement, appending to the history.
pub fn refine_labels(
    records: &[ImageRecord],
    store: &mut LabelStore,
    proposer: &mut dyn CandidateProposer,
    scorer: &mut dyn RoiScorer,
    k: usize,
    iteration: usize,
) -> Result<RefineStats, TrainError> {
    let mut stats = RefineStats::default();
    let mut score_sum = 0.0;
    for rec in records {
        let entry = store
            .entries
            .get(&rec.image_id)
            .unwrap_or_else(|| panic!("no label entry for {}", rec.image_id));
        let incumbent_box = entry.current_roi;
        let incumbent_score = scorer.score(rec, &incumbent_box)?;

        let candidates = proposer.propose(rec, k)?;
        let boxes: Vec<BoundingBox> = candidates.iter().map(|c| c.bbox).collect();
        let scores = scorer.score_many(rec, &boxes)?;
        let best = argmax_candidate(&scores);

        stats.images += 1;
        let entry = store.entries.get_mut(&rec.image_id).unwrap();
        if scores[best] > incumbent_score {
            entry.current_roi = boxes[best];
            entry.current_score = scores[best];
            entry.origin = LabelOrigin::Refined;
            entry.history.push(HistoryEntry {
                iteration,
                roi: boxes[best],
                score: scores[best],
            });
            stats.replaced += 1;
            score_sum += scores[best];
        } else {
            score_sum += incumbent_score;
        }
    }
    stats.mean_score = if stats.images > 0 {
        score_sum / stats.images as f64
    } else {
        0.0
    };
    Ok(stats)
}

/// Hyperparameters of a training stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinementConfig {
    pub k_candidates: usize,
    pub n_outer_iterations: usize,
    pub epochs_per_iteration: usize,
    pub alpha: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig {
            k_candidates: 10,
            n_outer_iterations: 10,
            epochs_per_iteration: 2,
            alpha: 0.8,
            beta: 0.8,
            learning_rate: 1e-4,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// Deterministic minibatch index order for one epoch.
pub fn epoch_batches(
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch_counter: u64,
) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = derived_rng(seed, "epoch-shuffle", epoch_counter);
    idx.shuffle(&mut rng);
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

fn train_detector_pass(
    detector: &mut Detector,
    records: &[&ImageRecord],
    boxes: &[BoundingBox],
    cfg: &RefinementConfig,
    opt: &mut Adam,
    epoch_counter: &mut u64,
    mut log: impl FnMut(serde_json::Value),
    tag: &str,
) -> Result<(), TrainError> {
    for _ in 0..cfg.epochs_per_iteration {
        let batches = epoch_batches(records.len(), cfg.batch_size, cfg.seed, *epoch_counter);
        for (step, batch) in batches.iter().enumerate() {
            let items: Vec<DetTrainItem> = batch
                .iter()
                .map(|&i| DetTrainItem {
                    record: records[i],
                    target: boxes[i],
                    fully_annotated: records[i].annotation_kind == AnnotationKind::Fully,
                })
                .collect();
            let loss = detector.train_step(&items, cfg.alpha as f32, opt)?;
            log(serde_json::json!({
                "event": "train_step", "net": "detector", "phase": tag,
                "epoch": *epoch_counter, "step": step, "loss": loss,
            }));
        }
        *epoch_counter += 1;
    }
    Ok(())
}

fn train_classifier_pass(
    classifier: &mut RoiClassifier,
    records: &[&ImageRecord],
    boxes: &[BoundingBox],
    cfg: &RefinementConfig,
    opt: &mut Adam,
    epoch_counter: &mut u64,
    mut log: impl FnMut(serde_json::Value),
    tag: &str,
) -> Result<(), TrainError> {
    for _ in 0..cfg.epochs_per_iteration {
        let batches = epoch_batches(records.len(), cfg.batch_size, cfg.seed, *epoch_counter);
        for (step, batch) in batches.iter().enumerate() {
            let items: Vec<ClsTrainItem> = batch
                .iter()
                .map(|&i| {
                    Ok(ClsTrainItem {
                        crop: crop_roi(&records[i].pixels, &boxes[i])?,
                        label: records[i].label,
                        fully_annotated: records[i].annotation_kind == AnnotationKind::Fully,
                    })
                })
                .collect::<Result<_, DataError>>()?;
            let loss = classifier.train_step(&items, cfg.beta as f32, opt)?;
            log(serde_json::json!({
                "event": "train_step", "net": "classifier", "phase": tag,
                "epoch": *epoch_counter, "step": step, "loss": loss,
            }));
        }
        *epoch_counter += 1;
    }
    Ok(())
}

/// Options around the stage-1 loop.
pub struct Stage1Options {
    /// run the candidate-selection pass each outer iteration
    pub candidate_selection: bool,
    pub score_rule: ScoreRule,
    /// JSON-lines audit trail of the label store, appended after every
    /// outer iteration
    pub audit_path: Option<PathBuf>,
}

/// First training stage.
///
/// Warm-up trains the detector and classifier on fully annotated images
/// only; the warmed detector then proposes pseudo labels for the rest.
/// Each outer iteration trains both networks on all current labels and,
/// when candidate selection is on, lets the classifier's class-label
/// probability replace any label that a candidate beats.
pub fn run_stage1(
    records: &[ImageRecord],
    detector: &mut Detector,
    classifier: &mut RoiClassifier,
    cfg: &RefinementConfig,
    opts: &Stage1Options,
    log: &mut dyn FnMut(serde_json::Value),
) -> Result<LabelStore, TrainError> {
    let fa: Vec<&ImageRecord> = records
        .iter()
        .filter(|r| r.annotation_kind == AnnotationKind::Fully)
        .collect();
    let pa: Vec<&ImageRecord> = records
        .iter()
        .filter(|r| r.annotation_kind == AnnotationKind::Partial)
        .collect();
    if fa.is_empty() {
        return Err(TrainError::NoFullyAnnotated);
    }

    let mut det_opt = Adam::new(cfg.learning_rate as f32);
    let mut cls_opt = Adam::new(cfg.learning_rate as f32);
    let mut epoch_counter: u64 = 0;

    // warm-up on the fully annotated set with manual boxes
    let fa_boxes: Vec<BoundingBox> = fa.iter().map(|r| r.manual_roi.unwrap()).collect();
    train_detector_pass(
        detector,
        &fa,
        &fa_boxes,
        cfg,
        &mut det_opt,
        &mut epoch_counter,
        &mut *log,
        "warmup",
    )?;
    train_classifier_pass(
        classifier,
        &fa,
        &fa_boxes,
        cfg,
        &mut cls_opt,
        &mut epoch_counter,
        &mut *log,
        "warmup",
    )?;

    // seed the store: manual labels scored under the warmed classifier,
    // then detector-proposed pseudo labels for the partial set
    let mut store = LabelStore::new();
    {
        let mut scorer = ClassifierScorer {
            classifier,
            rule: opts.score_rule,
        };
        for (rec, bbox) in fa.iter().zip(&fa_boxes) {
            let score = scorer.score(rec, bbox)?;
            store.seed_manual(&rec.image_id, *bbox, score);
        }
    }
    {
        let (det, cls) = (&mut *detector, &mut *classifier);
        let mut scorer = ClassifierScorer {
            classifier: cls,
            rule: opts.score_rule,
        };
        generate_pseudo_labels(&pa, det, &mut scorer, cfg.k_candidates, &mut store)?;
    }
    log(serde_json::json!({
        "event": "pseudo_labels", "count": pa.len(),
    }));
    if let Some(path) = &opts.audit_path {
        store.append_audit(path, 0)?;
    }

    let all: Vec<&ImageRecord> = records.iter().collect();
    for it in 1..=cfg.n_outer_iterations {
        let boxes: Vec<BoundingBox> = all
            .iter()
            .map(|r| store.get(&r.image_id).unwrap().current_roi)
            .collect();
        train_detector_pass(
            detector,
            &all,
            &boxes,
            cfg,
            &mut det_opt,
            &mut epoch_counter,
            &mut *log,
            "stage1",
        )?;
        train_classifier_pass(
            classifier,
            &all,
            &boxes,
            cfg,
            &mut cls_opt,
            &mut epoch_counter,
            &mut *log,
            "stage1",
        )?;
        if opts.candidate_selection {
            let (det, cls) = (&mut *detector, &mut *classifier);
            let mut scorer = ClassifierScorer {
                classifier: cls,
                rule: opts.score_rule,
            };
            let stats = refine_labels(records, &mut store, det, &mut scorer, cfg.k_candidates, it)?;
            log(serde_json::json!({
                "event": "refine", "iteration": it,
                "replaced": stats.replaced, "images": stats.images,
                "mean_score": stats.mean_score,
            }));
        }
        if let Some(path) = &opts.audit_path {
            store.append_audit(path, it)?;
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ClassLabel;
    use ndarray::Array2;

    fn record(id: &str) -> ImageRecord {
        ImageRecord {
            image_id: id.to_string(),
            patient_id: "p0".into(),
            pixels: Array2::from_elem((64, 64), 0.5),
            label: ClassLabel::Malignant,
            manual_roi: Some(BoundingBox::new(10.0, 10.0, 20.0, 20.0).unwrap()),
            annotation_kind: AnnotationKind::Fully,
            withheld_roi: None,
            image_path: String::new(),
        }
    }

    /// Proposer returning fixed boxes regardless of the image.
    struct FixedProposer(Vec<ScoredBox>);
    impl CandidateProposer for FixedProposer {
        fn propose(&mut self, _: &ImageRecord, k: usize) -> Result<Vec<ScoredBox>, TrainError> {
            Ok(self.0.iter().take(k).copied().collect())
        }
    }

    /// Scorer keyed by box x coordinate.
    struct TableScorer(BTreeMap<i64, f64>);
    impl RoiScorer for TableScorer {
        fn score(&mut self, _: &ImageRecord, b: &BoundingBox) -> Result<f64, TrainError> {
            Ok(*self.0.get(&(b.x as i64)).unwrap_or(&0.0))
        }
    }

    fn sb(x: f32) -> ScoredBox {
        ScoredBox {
            bbox: BoundingBox::new(x, 5.0, 10.0, 10.0).unwrap(),
            confidence: 0.5,
        }
    }

    #[test]
    fn pseudo_labels_take_argmax_with_low_index_ties() {
        let rec = record("a");
        let mut proposer = FixedProposer(vec![sb(1.0), sb(2.0), sb(3.0)]);
        let mut scorer = TableScorer(BTreeMap::from([(1, 0.3), (2, 0.9), (3, 0.6)]));
        let mut store = LabelStore::new();
        generate_pseudo_labels(&[&rec], &mut proposer, &mut scorer, 3, &mut store).unwrap();
        let e = store.get("a").unwrap();
        assert_eq!(e.current_roi.x, 2.0);
        assert_eq!(e.current_score, 0.9);
        assert_eq!(e.origin, LabelOrigin::Pseudo);

        // tie 0.7 vs 0.7 keeps the lower candidate index
        let mut proposer = FixedProposer(vec![sb(1.0), sb(2.0)]);
        let mut scorer = TableScorer(BTreeMap::from([(1, 0.7), (2, 0.7)]));
        let mut store = LabelStore::new();
        generate_pseudo_labels(&[&rec], &mut proposer, &mut scorer, 2, &mut store).unwrap();
        assert_eq!(store.get("a").unwrap().current_roi.x, 1.0);

        // k = 1 stores the top candidate regardless of score
        let mut proposer = FixedProposer(vec![sb(1.0), sb(2.0)]);
        let mut scorer = TableScorer(BTreeMap::from([(1, 0.01), (2, 0.99)]));
        let mut store = LabelStore::new();
        generate_pseudo_labels(&[&rec], &mut proposer, &mut scorer, 1, &mut store).unwrap();
        assert_eq!(store.get("a").unwrap().current_roi.x, 1.0);
    }

    #[test]
    fn refine_replaces_on_strict_improvement_only() {
        let rec = record("a");
        let mut store = LabelStore::new();
        store.seed_manual("a", sb(9.0).bbox, 0.7);

        // best candidate 0.9 beats incumbent 0.7
        let mut proposer = FixedProposer(vec![sb(1.0), sb(2.0), sb(3.0)]);
        let mut scorer =
            TableScorer(BTreeMap::from([(1, 0.3), (2, 0.9), (3, 0.6), (9, 0.7)]));
        let stats = refine_labels(
            std::slice::from_ref(&rec),
            &mut store,
            &mut proposer,
            &mut scorer,
            3,
            1,
        )
        .unwrap();
        assert_eq!(stats.replaced, 1);
        let e = store.get("a").unwrap();
        assert_eq!(e.current_roi.x, 2.0);
        assert_eq!(e.origin, LabelOrigin::Refined);
        assert_eq!(e.history.len(), 2);
        assert_eq!(e.history[0].roi.x, 9.0);

        // incumbent at 0.95 survives candidates at or below
        let mut store = LabelStore::new();
        store.seed_manual("a", sb(9.0).bbox, 0.95);
        let mut proposer = FixedProposer(vec![sb(1.0), sb(2.0)]);
        let mut scorer = TableScorer(BTreeMap::from([(1, 0.95), (2, 0.6), (9, 0.95)]));
        let stats = refine_labels(
            std::slice::from_ref(&rec),
            &mut store,
            &mut proposer,
            &mut scorer,
            2,
            1,
        )
        .unwrap();
        assert_eq!(stats.replaced, 0);
        let e = store.get("a").unwrap();
        assert_eq!(e.current_roi.x, 9.0);
        assert_eq!(e.origin, LabelOrigin::Manual);
        assert_eq!(e.history.len(), 1);
    }

    #[test]
    fn refine_identity_when_incumbent_scores_one() {
        struct OneScorer;
        impl RoiScorer for OneScorer {
            fn score(&mut self, _: &ImageRecord, _: &BoundingBox) -> Result<f64, TrainError> {
                Ok(1.0)
            }
        }
        let rec = record("a");
        let mut store = LabelStore::new();
        store.seed_manual("a", sb(9.0).bbox, 1.0);
        let before = store.clone();
        let mut proposer = FixedProposer(vec![sb(1.0)]);
        refine_labels(
            std::slice::from_ref(&rec),
            &mut store,
            &mut proposer,
            &mut OneScorer,
            1,
            1,
        )
        .unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn frozen_scorer_monotone_fixed_point() {
        // randomized stores and candidate scores: repeated passes never
        // lower a score and stop changing after the first pass
        use rand::Rng;
        let mut rng = crate::rng::derived_rng(0, "refine-prop", 0);
        for case in 0..50 {
            let rec = record(&format!("img{case}"));
            let mut store = LabelStore::new();
            let init_score: f64 = rng.random();
            store.seed_manual(&rec.image_id, sb(50.0).bbox, init_score);

            let k = rng.random_range(1..=5usize);
            let mut table = BTreeMap::from([(50, init_score)]);
            let boxes: Vec<ScoredBox> = (0..k)
                .map(|i| {
                    let x = i as f32;
                    table.insert(i as i64, rng.random());
                    sb(x)
                })
                .collect();
            let mut proposer = FixedProposer(boxes);
            let mut scorer = TableScorer(table);

            let mut last_score = store.get(&rec.image_id).unwrap().current_score;
            let mut after_first: Option<LabelEntry> = None;
            for pass in 1..=4 {
                refine_labels(
                    std::slice::from_ref(&rec),
                    &mut store,
                    &mut proposer,
                    &mut scorer,
                    k,
                    pass,
                )
                .unwrap();
                let e = store.get(&rec.image_id).unwrap();
                assert!(e.current_score >= last_score, "score decreased");
                last_score = e.current_score;
                match &after_first {
                    None => after_first = Some(e.clone()),
                    Some(prev) => assert_eq!(prev, e, "store changed after fixed point"),
                }
            }
            // history scores strictly increase and end at the current state
            let e = store.get(&rec.image_id).unwrap();
            for w in e.history.windows(2) {
                assert!(w[1].score > w[0].score);
                assert!(w[1].iteration > w[0].iteration);
            }
            let last = e.history.last().unwrap();
            assert_eq!(last.roi, e.current_roi);
            assert_eq!(last.score, e.current_score);
        }
    }

    #[test]
    fn epoch_batches_deterministic_and_covering() {
        let a = epoch_batches(23, 8, 7, 3);
        let b = epoch_batches(23, 8, 7, 3);
        assert_eq!(a, b);
        let c = epoch_batches(23, 8, 7, 4);
        assert_ne!(a, c);
        let mut seen: Vec<usize> = a.into_iter().flatten().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..23).collect::<Vec<_>>());
    }
}
