//! Training objective: hard-example-mined cross-entropy over the fused
//! logits plus the weighted prototype alignment term.

use crate::data::raster::LabelRaster;
use crate::error::{Error, Result};
use crate::numerics::graph::Var;
use crate::params::Session;

#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    /// Weight on the prototype alignment term.
    pub alpha: f64,
    /// Keep pixels whose true-class probability is below this.
    pub ohem_threshold: f64,
    /// Keep at least this fraction of the valid pixels.
    pub ohem_min_kept: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            ohem_threshold: 0.7,
            ohem_min_kept: 1.0 / 16.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha {} < 0", self.alpha)));
        }
        if !(self.ohem_threshold > 0.0 && self.ohem_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "ohem_threshold {} outside (0, 1]",
                self.ohem_threshold
            )));
        }
        if !(self.ohem_min_kept > 0.0 && self.ohem_min_kept <= 1.0) {
            return Err(Error::Config(format!(
                "ohem_min_kept {} outside (0, 1]",
                self.ohem_min_kept
            )));
        }
        Ok(())
    }
}

/// The combined objective with both addends recorded for logging.
pub struct LossTerms {
    pub total: Var,
    pub proto_value: f64,
    pub ohem_value: f64,
}

/// Mean cross-entropy over the hardest non-ignored pixels (label 255 is
/// ignored; zero when no valid pixels exist).
pub fn ohem_ce(sess: &mut Session, logits: Var, gt: &LabelRaster, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let shape = sess.g.value(logits).shape();
    if shape.len() != 3 || shape[1] != gt.h || shape[2] != gt.w {
        return Err(Error::ShapeMismatch(format!(
            "logits {shape:?} vs labels {}x{}",
            gt.h, gt.w
        )));
    }
    sess.g
        .ohem_ce(logits, &gt.data, cfg.ohem_threshold, cfg.ohem_min_kept)
}

/// `total = alpha * proto + ohem_ce(gt, fused_logits)`.
pub fn total_loss(
    sess: &mut Session,
    gt: &LabelRaster,
    fused_logits: Var,
    proto: Var,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let ohem = ohem_ce(sess, fused_logits, gt, cfg)?;
    let proto_value = sess.g.value(proto).data()[0];
    let ohem_value = sess.g.value(ohem).data()[0];
    if proto_value < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "prototype loss {proto_value} < 0"
        )));
    }
    let weighted = sess.g.scale(proto, cfg.alpha);
    let total = sess.g.add(weighted, ohem)?;
    Ok(LossTerms {
        total,
        proto_value,
        ohem_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::NdArray;
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let store = ParamStore::new();
        let mut sess = Session::new(&store);
        let logits = sess.g.constant(NdArray::zeros(&[4, 4, 4]));
        let gt = LabelRaster::filled(4, 4, 1);
        let l = ohem_ce(&mut sess, logits, &gt, &cfg()).unwrap();
        assert!((sess.g.value(l).data()[0] - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_small_loss() {
        let store = ParamStore::new();
        let mut sess = Session::new(&store);
        let mut a = NdArray::zeros(&[2, 4, 4]);
        for p in 0..16 {
            a.data_mut()[16 + p] = 20.0; // class 1 nearly one-hot
        }
        let logits = sess.g.constant(a);
        let gt = LabelRaster::filled(4, 4, 1);
        let l = ohem_ce(&mut sess, logits, &gt, &cfg()).unwrap();
        assert!(sess.g.value(l).data()[0] < 1e-3);
    }

    #[test]
    fn all_ignored_gives_zero() {
        let store = ParamStore::new();
        let mut sess = Session::new(&store);
        let logits = sess.g.constant(NdArray::zeros(&[3, 2, 2]));
        let gt = LabelRaster::filled(2, 2, 255);
        let l = ohem_ce(&mut sess, logits, &gt, &cfg()).unwrap();
        assert_eq!(sess.g.value(l).data()[0], 0.0);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let store = ParamStore::new();
        let mut sess = Session::new(&store);
        let logits = sess.g.constant(NdArray::zeros(&[3, 2, 2]));
        let gt = LabelRaster::filled(2, 2, 3);
        assert!(ohem_ce(&mut sess, logits, &gt, &cfg()).is_err());
    }

    fn plain_mean_ce(logits: &NdArray, gt: &LabelRaster) -> f64 {
        let (c, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
        let n = h * w;
        let mut total = 0.0;
        let mut count = 0usize;
        for p in 0..n {
            let lbl = gt.data[p];
            if lbl == 255 {
                continue;
            }
            let mx = (0..c)
                .map(|k| logits.data()[k * n + p])
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|k| (logits.data()[k * n + p] - mx).exp()).sum();
            total -= logits.data()[lbl as usize * n + p] - mx - z.ln();
            count += 1;
        }
        total / count as f64
    }

    #[test]
    fn threshold_one_min_kept_one_equals_plain_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = ParamStore::new();
        for _ in 0..5 {
            let logits_arr = NdArray::from_vec(
                &[3, 8, 8],
                (0..3 * 64).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let gt = LabelRaster::new(
                8,
                8,
                (0..64)
                    .map(|_| if rng.gen_bool(0.1) { 255 } else { rng.gen_range(0..3) })
                    .collect(),
            )
            .unwrap();
            let mut sess = Session::new(&store);
            let logits = sess.g.constant(logits_arr.clone());
            let all = LossConfig {
                ohem_threshold: 1.0,
                ohem_min_kept: 1.0,
                ..cfg()
            };
            let l = ohem_ce(&mut sess, logits, &gt, &all).unwrap();
            assert!((sess.g.value(l).data()[0] - plain_mean_ce(&logits_arr, &gt)).abs() < 1e-7);
        }
    }

    #[test]
    fn pixel_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let store = ParamStore::new();
        let (c, h, w) = (3, 4, 4);
        let n = h * w;
        let vals: Vec<f64> = (0..c * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels: Vec<u32> = (0..n).map(|_| rng.gen_range(0..c as u32)).collect();
        // Reverse-order permutation of pixels.
        let mut pvals = vec![0.0; c * n];
        for k in 0..c {
            for p in 0..n {
                pvals[k * n + (n - 1 - p)] = vals[k * n + p];
            }
        }
        let plabels: Vec<u32> = labels.iter().rev().copied().collect();
        let mut s1 = Session::new(&store);
        let l1v = s1.g.constant(NdArray::from_vec(&[c, h, w], vals).unwrap());
        let g1 = LabelRaster::new(h, w, labels).unwrap();
        let l1 = ohem_ce(&mut s1, l1v, &g1, &cfg()).unwrap();
        let mut s2 = Session::new(&store);
        let l2v = s2.g.constant(NdArray::from_vec(&[c, h, w], pvals).unwrap());
        let g2 = LabelRaster::new(h, w, plabels).unwrap();
        let l2 = ohem_ce(&mut s2, l2v, &g2, &cfg()).unwrap();
        assert!((s1.g.value(l1).data()[0] - s2.g.value(l2).data()[0]).abs() < 1e-12);
    }

    #[test]
    fn total_loss_linear_combination() {
        let store = ParamStore::new();
        let mut sess = Session::new(&store);
        // Confidently wrong logits: CE = ln(1 + e^20) - 0 ≈ 20; use uniform
        // instead for an exact value.
        let logits = sess.g.constant(NdArray::zeros(&[4, 4, 4]));
        let gt = LabelRaster::filled(4, 4, 0);
        let proto = sess.g.constant(NdArray::scalar(256.0));
        let terms = total_loss(&mut sess, &gt, logits, proto, &cfg()).unwrap();
        let want = 256.0 + 4.0f64.ln();
        assert!((sess.g.value(terms.total).data()[0] - want).abs() < 1e-9);
        assert_eq!(terms.proto_value, 256.0);
        assert!((terms.ohem_value - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn alpha_zero_equals_ohem() {
        let store = ParamStore::new();
        let mut sess = Session::new(&store);
        let logits = sess.g.constant(NdArray::zeros(&[4, 4, 4]));
        let gt = LabelRaster::filled(4, 4, 2);
        let proto = sess.g.constant(NdArray::scalar(17.0));
        let zero_alpha = LossConfig { alpha: 0.0, ..cfg() };
        let terms = total_loss(&mut sess, &gt, logits, proto, &zero_alpha).unwrap();
        assert_eq!(sess.g.value(terms.total).data()[0], terms.ohem_value);
    }

    #[test]
    fn config_bounds_rejected() {
        assert!(LossConfig { alpha: -1.0, ..cfg() }.validate().is_err());
        assert!(LossConfig { ohem_threshold: 0.0, ..cfg() }.validate().is_err());
        assert!(LossConfig { ohem_threshold: 1.1, ..cfg() }.validate().is_err());
        assert!(LossConfig { ohem_min_kept: 0.0, ..cfg() }.validate().is_err());
    }
}
