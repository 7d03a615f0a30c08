//! Metrics (per-class IoU/Acc, mIoU), whole-dataset evaluation, the
//! four-row ablation harness, and pre/post-memory feature export.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::manifest::DatasetManifest;
use crate::data::raster::{self, LabelRaster};
use crate::data::{load_sequence, ModalitySequence};
use crate::error::{Error, Result};
use crate::memory::{run_sequence, ModelConfig};
use crate::numerics::NdArray;
use crate::params::{ParamStore, Session};
use crate::train::{fit, FitOutcome, RunConfig};

/// Rows are ground truth, columns are prediction; ignored pixels excluded.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn at(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn record(&mut self, gt: &LabelRaster, pred: &LabelRaster) -> Result<()> {
        if gt.h != pred.h || gt.w != pred.w {
            return Err(Error::ShapeMismatch(format!(
                "gt {}x{} vs pred {}x{}",
                gt.h, gt.w, pred.h, pred.w
            )));
        }
        pred.validate(self.num_classes)?;
        for (&g, &p) in gt.data.iter().zip(&pred.data) {
            if g == 255 {
                continue;
            }
            if g as usize >= self.num_classes || p == 255 {
                return Err(Error::InvalidArgument(format!(
                    "label pair ({g}, {p}) out of range for {} classes",
                    self.num_classes
                )));
            }
            self.counts[g as usize * self.num_classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Confusion matrices over disjoint pixel sets just add.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::ShapeMismatch(format!(
                "merging {}-class into {}-class matrix",
                other.num_classes, self.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// How classes absent from both ground truth and prediction enter the mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassAveraging {
    /// Every class counts; absent classes contribute 0 (matches reference
    /// tables where a never-predicted class scores 0.00).
    IncludeAll,
    /// Classes with zero union are left out of the mean.
    ExcludeAbsent,
}

#[derive(Clone, Debug)]
pub struct Metrics {
    /// Percentages; 0 for classes with empty union.
    pub per_class_iou: Vec<f64>,
    /// Per-class recall as a percentage; 0 for classes absent from GT.
    pub per_class_acc: Vec<f64>,
    pub miou: f64,
}

pub fn iou_metrics(cm: &ConfusionMatrix, avg: ClassAveraging) -> Metrics {
    let c = cm.num_classes;
    let mut per_class_iou = vec![0.0; c];
    let mut per_class_acc = vec![0.0; c];
    let mut sum = 0.0;
    let mut denom = 0usize;
    for t in 0..c {
        let tp = cm.at(t, t);
        let fp: u64 = (0..c).filter(|&g| g != t).map(|g| cm.at(g, t)).sum();
        let fn_: u64 = (0..c).filter(|&p| p != t).map(|p| cm.at(t, p)).sum();
        let union = tp + fp + fn_;
        if union > 0 {
            per_class_iou[t] = 100.0 * tp as f64 / union as f64;
        }
        if tp + fn_ > 0 {
            per_class_acc[t] = 100.0 * tp as f64 / (tp + fn_) as f64;
        }
        match avg {
            ClassAveraging::IncludeAll => {
                sum += per_class_iou[t];
                denom += 1;
            }
            ClassAveraging::ExcludeAbsent => {
                if union > 0 {
                    sum += per_class_iou[t];
                    denom += 1;
                }
            }
        }
    }
    let miou = if denom > 0 { sum / denom as f64 } else { 0.0 };
    Metrics {
        per_class_iou,
        per_class_acc,
        miou,
    }
}

/// Per-pixel argmax of `[c, h, w]` logits.
pub fn predict_labels(logits: &NdArray) -> Result<LabelRaster> {
    let shape = logits.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch("logits must be [c, h, w]".into()));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let n = h * w;
    let data = logits.data();
    let mut out = Vec::with_capacity(n);
    for p in 0..n {
        let mut best = 0u32;
        let mut best_v = f64::NEG_INFINITY;
        for t in 0..c {
            let v = data[t * n + p];
            if v > best_v {
                best_v = v;
                best = t as u32;
            }
        }
        out.push(best);
    }
    LabelRaster::new(h, w, out)
}

/// Score one already-loaded scene against its labels.
pub fn score_sequence(
    store: &ParamStore,
    cfg: &ModelConfig,
    seq: &ModalitySequence,
    cm: &mut ConfusionMatrix,
) -> Result<()> {
    let mut sess = Session::new(store);
    let out = run_sequence(&mut sess, cfg, &seq.frames)?;
    let pred = predict_labels(sess.g.value(out.fused_logits))?;
    cm.record(&seq.labels, &pred)
}

/// Evaluate the model over an entire manifest.
pub fn evaluate(
    store: &ParamStore,
    cfg: &ModelConfig,
    manifest: &DatasetManifest,
    avg: ClassAveraging,
) -> Result<(Metrics, ConfusionMatrix)> {
    let mut cm = ConfusionMatrix::new(cfg.num_classes);
    for scene in &manifest.samples {
        let seq = load_sequence(manifest, scene)?;
        score_sequence(store, cfg, &seq, &mut cm)?;
    }
    Ok((iou_metrics(&cm, avg), cm))
}

/// One row of the ablation table.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub memory: bool,
    pub residual: bool,
    pub spmm: bool,
    pub miou: f64,
    /// Published full-scale result for the same toggle pattern, for
    /// context only.
    pub reference_miou: f64,
}

/// Train and evaluate the four toggle patterns of the reference ablation
/// under identical seeds and data order.
pub fn ablation_run(
    train_manifest: &DatasetManifest,
    val_manifest: &DatasetManifest,
    base_cfg: &RunConfig,
) -> Result<Vec<AblationRow>> {
    let patterns = [
        (false, true, false, 58.79),
        (true, false, false, 61.70),
        (true, true, false, 62.41),
        (true, true, true, 63.48),
    ];
    let mut rows = Vec::with_capacity(4);
    for (memory, residual, spmm, reference) in patterns {
        let mut cfg = base_cfg.clone();
        cfg.memory_mechanism = memory;
        cfg.residual_connection = residual;
        cfg.spmm = spmm;
        let FitOutcome { store, .. } = fit(train_manifest, Some(val_manifest), &cfg)?;
        let model = cfg.model_config(train_manifest.num_classes);
        let (m, _) = evaluate(&store, &model, val_manifest, ClassAveraging::IncludeAll)?;
        rows.push(AblationRow {
            memory,
            residual,
            spmm,
            miou: m.miou,
            reference_miou: reference,
        });
    }
    Ok(rows)
}

/// Render the ablation table as line-oriented text (one row per line:
/// toggles, toy mIoU, published reference mIoU, shared seed).
pub fn format_ablation_table(rows: &[AblationRow], seed: u64) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# memory residual spmm miou reference_miou seed");
    for r in rows {
        let _ = writeln!(
            s,
            "{} {} {} {:.2} {:.2} {seed}",
            r.memory as u8, r.residual as u8, r.spmm as u8, r.miou, r.reference_miou
        );
    }
    s
}

/// Cap on exported vectors per dump file.
pub const EXPORT_CAP: usize = 5000;

fn dump_tokens(path: &Path, img: &NdArray) -> Result<usize> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let n = h * w;
    let rows = n.min(EXPORT_CAP);
    // Evenly spaced deterministic subsample when over the cap.
    let mut out = NdArray::zeros(&[rows, c]);
    for r in 0..rows {
        let p = r * n / rows;
        for ch in 0..c {
            out.data_mut()[r * c + ch] = img.data()[ch * n + p];
        }
    }
    raster::save_array(path, &out)?;
    Ok(rows)
}

/// Export pre- and post-memory feature vectors for one scene: one file per
/// frame's pre-memory features, one per post-memory frame, plus an index
/// mapping files to (scene, modality, stage).
pub fn export_features(
    store: &ParamStore,
    cfg: &ModelConfig,
    manifest: &DatasetManifest,
    scene: usize,
    out_dir: &Path,
) -> Result<Vec<String>> {
    let seq = load_sequence(manifest, &manifest.samples[scene])?;
    let mut sess = Session::new(store);
    let out = run_sequence(&mut sess, cfg, &seq.frames)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut index = String::new();
    let mut files = Vec::new();
    for (i, &v) in out.pre_memory.iter().enumerate() {
        let name = format!("scene{scene}_m{i}_pre.ras");
        let rows = dump_tokens(&out_dir.join(&name), sess.g.value(v))?;
        let _ = writeln!(index, "{name} scene={scene} modality={} stage=pre rows={rows}", manifest.modalities[i]);
        files.push(name);
    }
    let skipped = seq.frames.len() - out.post_memory.len();
    for (j, &v) in out.post_memory.iter().enumerate() {
        let i = j + skipped;
        let name = format!("scene{scene}_m{i}_post.ras");
        let rows = dump_tokens(&out_dir.join(&name), sess.g.value(v))?;
        let _ = writeln!(index, "{name} scene={scene} modality={} stage=post rows={rows}", manifest.modalities[i]);
        files.push(name);
    }
    let index_path = out_dir.join(format!("scene{scene}_features.txt"));
    raster::atomic_write(&index_path, index.as_bytes())?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm_from(pred: &[u32], gt: &[u32], c: usize) -> ConfusionMatrix {
        let n = pred.len();
        let mut cm = ConfusionMatrix::new(c);
        cm.record(
            &LabelRaster::new(1, n, gt.to_vec()).unwrap(),
            &LabelRaster::new(1, n, pred.to_vec()).unwrap(),
        )
        .unwrap();
        cm
    }

    #[test]
    fn perfect_prediction_scores_100() {
        let cm = cm_from(&[0, 1, 2, 1], &[0, 1, 2, 1], 3);
        let m = iou_metrics(&cm, ClassAveraging::IncludeAll);
        assert_eq!(m.miou, 100.0);
        assert!(m.per_class_iou.iter().all(|&v| v == 100.0));
    }

    #[test]
    fn disjoint_prediction_scores_zero() {
        let cm = cm_from(&[1, 1], &[0, 0], 2);
        let m = iou_metrics(&cm, ClassAveraging::IncludeAll);
        assert_eq!(m.per_class_iou, vec![0.0, 0.0]);
    }

    #[test]
    fn hand_oracle_two_class() {
        // pred=[0,0,1,1], gt=[0,1,1,1]: IoU_0 = 50, IoU_1 = 66.67.
        let cm = cm_from(&[0, 0, 1, 1], &[0, 1, 1, 1], 2);
        let m = iou_metrics(&cm, ClassAveraging::IncludeAll);
        assert!((m.per_class_iou[0] - 50.0).abs() < 1e-9);
        assert!((m.per_class_iou[1] - 200.0 / 3.0).abs() < 1e-9);
        assert!((m.miou - 175.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn averaging_modes_differ_only_on_absent_classes() {
        let cm = cm_from(&[0, 0, 1, 1], &[0, 1, 1, 1], 4);
        let inc = iou_metrics(&cm, ClassAveraging::IncludeAll);
        let exc = iou_metrics(&cm, ClassAveraging::ExcludeAbsent);
        assert!((exc.miou - 175.0 / 3.0).abs() < 1e-9);
        assert!((inc.miou - 175.0 / 6.0).abs() < 1e-9); // two phantom zeros
    }

    #[test]
    fn ignored_pixels_change_nothing() {
        let base = cm_from(&[0, 0, 1, 1], &[0, 1, 1, 1], 2);
        let mut with_ignored = ConfusionMatrix::new(2);
        with_ignored
            .record(
                &LabelRaster::new(1, 6, vec![0, 1, 1, 1, 255, 255]).unwrap(),
                &LabelRaster::new(1, 6, vec![0, 0, 1, 1, 0, 1]).unwrap(),
            )
            .unwrap();
        assert_eq!(base, with_ignored);
        assert_eq!(with_ignored.total(), 4);
    }

    #[test]
    fn relabeling_invariance() {
        let a = iou_metrics(&cm_from(&[0, 0, 1, 1], &[0, 1, 1, 1], 2), ClassAveraging::IncludeAll);
        // Swap class ids 0 <-> 1 in both rasters.
        let b = iou_metrics(&cm_from(&[1, 1, 0, 0], &[1, 0, 0, 0], 2), ClassAveraging::IncludeAll);
        assert!((a.miou - b.miou).abs() < 1e-12);
    }

    #[test]
    fn merge_equals_joint_recording() {
        let mut a = cm_from(&[0, 1], &[0, 0], 2);
        let b = cm_from(&[1, 1], &[1, 0], 2);
        a.merge(&b).unwrap();
        let joint = cm_from(&[0, 1, 1, 1], &[0, 0, 1, 0], 2);
        assert_eq!(a, joint);
    }

    #[test]
    fn brute_force_oracle_on_random_rasters() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let c = 5;
        let n = 32 * 32;
        let gt: Vec<u32> = (0..n).map(|_| rng.gen_range(0..c as u32)).collect();
        let pred: Vec<u32> = (0..n).map(|_| rng.gen_range(0..c as u32)).collect();
        let m = iou_metrics(&cm_from(&pred, &gt, c), ClassAveraging::IncludeAll);
        for t in 0..c {
            let inter = (0..n)
                .filter(|&p| gt[p] == t as u32 && pred[p] == t as u32)
                .count();
            let union = (0..n)
                .filter(|&p| gt[p] == t as u32 || pred[p] == t as u32)
                .count();
            let want = 100.0 * inter as f64 / union as f64;
            assert!((m.per_class_iou[t] - want).abs() < 0.01);
        }
    }

    #[test]
    fn predict_labels_argmax() {
        let mut l = NdArray::zeros(&[3, 1, 2]);
        l.data_mut()[2] = 1.0; // class 1 wins pixel 0
        l.data_mut()[5] = 2.0; // class 2 wins pixel 1
        let p = predict_labels(&l).unwrap();
        assert_eq!(p.data, vec![1, 2]);
    }
}
