//! Training-only prototype memory: per-class mean feature vectors pooled
//! from the high-resolution taps under the predicted mask, a momentum-
//! updated global bank, and an MSE alignment loss between the two. Nothing
//! here touches the forward prediction path.

use rand_chacha::ChaCha8Rng;

use crate::data::raster::LabelRaster;
use crate::error::{Error, Result};
use crate::memory::ModelConfig;
use crate::numerics::graph::Var;
use crate::numerics::NdArray;
use crate::params::{trunc_normal, ParamStore, Session};

/// Prototype channel width; class labels are bounded by this across the
/// pipeline so any dataset's classes fit one bank row each.
pub const PROTO_DIM: usize = 32;

#[derive(Clone, Copy, Debug)]
pub struct SpmmConfig {
    /// Momentum coefficient: weight on the current prototype.
    pub mu: f64,
    /// Reuse the decoder's first lateral 1x1 conv as the prototype
    /// projection instead of a dedicated one (adds zero parameters).
    pub reuse_decoder_projection: bool,
}

impl Default for SpmmConfig {
    fn default() -> Self {
        SpmmConfig {
            mu: 0.2,
            reuse_decoder_projection: false,
        }
    }
}

/// Per-class global prototypes with "ever observed" flags.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub global: NdArray, // [c, PROTO_DIM]
    pub seen: Vec<bool>,
    pub mu: f64,
}

impl PrototypeBank {
    pub fn new(num_classes: usize, mu: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(Error::InvalidArgument(format!("mu {mu} outside [0, 1]")));
        }
        if num_classes == 0 || num_classes > PROTO_DIM {
            return Err(Error::InvalidArgument(format!(
                "class count {num_classes} outside 1..={PROTO_DIM}"
            )));
        }
        Ok(PrototypeBank {
            global: NdArray::zeros(&[num_classes, PROTO_DIM]),
            seen: vec![false; num_classes],
            mu,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.seen.len()
    }
}

/// Prototypes pooled from the current scene, still attached to the graph.
pub struct CurrentPrototypes {
    pub values: Var, // [c, PROTO_DIM]
    pub present: Vec<bool>,
    pub counts: Vec<usize>,
}

pub fn init_prototype_params(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    store.insert(
        "proto.proj.w",
        trunc_normal(rng, &[PROTO_DIM, cfg.encoder.c_high, 1, 1], 0.02),
    );
    store.insert("proto.proj.b", NdArray::zeros(&[PROTO_DIM]));
}

/// Per-pixel argmax of class logits, then nearest-neighbor downsample by 4.
pub fn downsample_labels(fused_logits: &NdArray) -> Result<LabelRaster> {
    let shape = fused_logits.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch("logits must be [c, h, w]".into()));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "spatial dims {h}x{w} not divisible by 4"
        )));
    }
    let data = fused_logits.data();
    let mut out = Vec::with_capacity((h / 4) * (w / 4));
    for y in (0..h).step_by(4) {
        for x in (0..w).step_by(4) {
            let mut best = 0u32;
            let mut best_v = f64::NEG_INFINITY;
            for t in 0..c {
                let v = data[t * h * w + y * w + x];
                if v > best_v {
                    best_v = v;
                    best = t as u32;
                }
            }
            out.push(best);
        }
    }
    LabelRaster::new(h / 4, w / 4, out)
}

/// Pool per-class mean prototypes from the per-modality high-resolution
/// taps: each tap is projected by a shared 1x1 conv to `PROTO_DIM`
/// channels, the projections are averaged over modalities, and each
/// class's prototype is the mean over its pixels in `mask_down`.
pub fn compute_current_prototypes(
    sess: &mut Session,
    cfg: &SpmmConfig,
    f_high1_all: &[Var],
    mask_down: &LabelRaster,
    num_classes: usize,
) -> Result<CurrentPrototypes> {
    if f_high1_all.is_empty() {
        return Err(Error::InvalidArgument("no modality features".into()));
    }
    let prefix = if cfg.reuse_decoder_projection {
        "dec.lat1"
    } else {
        "proto.proj"
    };
    let w = sess.param(&format!("{prefix}.w"))?;
    let b = sess.param(&format!("{prefix}.b"))?;
    let mut acc: Option<Var> = None;
    for &f in f_high1_all {
        let p = sess.g.conv2d(f, w, b, 1, 0)?;
        acc = Some(match acc {
            None => p,
            Some(a) => sess.g.add(a, p)?,
        });
    }
    let mean = sess.g.scale(acc.unwrap(), 1.0 / f_high1_all.len() as f64);
    let (values, counts) = sess.g.masked_class_mean(mean, &mask_down.data, num_classes)?;
    let present = counts.iter().map(|&n| n > 0).collect();
    Ok(CurrentPrototypes {
        values,
        present,
        counts,
    })
}

/// Momentum update of the global bank from detached current prototypes.
/// First observation of a class copies it in; later observations blend
/// `mu * current + (1 - mu) * global`. Absent classes are untouched.
pub fn momentum_update(bank: &mut PrototypeBank, current: &NdArray, present: &[bool]) -> Result<()> {
    let c = bank.num_classes();
    if current.shape() != [c, PROTO_DIM] || present.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "current prototypes {:?} vs bank of {c} classes",
            current.shape()
        )));
    }
    for t in 0..c {
        if !present[t] {
            continue;
        }
        let row = &current.data()[t * PROTO_DIM..(t + 1) * PROTO_DIM];
        let dst = &mut bank.global.data_mut()[t * PROTO_DIM..(t + 1) * PROTO_DIM];
        if bank.seen[t] {
            for (g, &cur) in dst.iter_mut().zip(row) {
                *g = bank.mu * cur + (1.0 - bank.mu) * *g;
            }
        } else {
            dst.copy_from_slice(row);
            bank.seen[t] = true;
        }
    }
    Ok(())
}

/// Alignment loss: MSE between the global bank rows (held constant) and
/// the current prototypes, over classes both present now and already seen
/// by the bank, scaled by (H/4)*(W/4). Gradient reaches the current
/// prototypes only.
pub fn proto_loss(
    sess: &mut Session,
    bank: &PrototypeBank,
    cur: &CurrentPrototypes,
    h: usize,
    w: usize,
) -> Result<Var> {
    let idx: Vec<usize> = (0..bank.num_classes())
        .filter(|&t| cur.present[t] && bank.seen[t])
        .collect();
    if idx.is_empty() {
        return Ok(sess.g.constant(NdArray::scalar(0.0)));
    }
    let mut gsel = NdArray::zeros(&[idx.len(), PROTO_DIM]);
    for (r, &t) in idx.iter().enumerate() {
        gsel.data_mut()[r * PROTO_DIM..(r + 1) * PROTO_DIM]
            .copy_from_slice(&bank.global.data()[t * PROTO_DIM..(t + 1) * PROTO_DIM]);
    }
    let gvar = sess.g.constant(gsel);
    let csel = sess.g.select_rows(cur.values, idx)?;
    let diff = sess.g.sub(csel, gvar)?;
    let sq = sess.g.mul(diff, diff)?;
    let mse = sess.g.mean_all(sq);
    Ok(sess.g.scale(mse, ((h / 4) * (w / 4)) as f64))
}
