//! Shared-geometry augmentation: horizontal flip, random crop + resize,
//! Gaussian-ish blur. The same geometric transform is applied to every
//! frame and to the label raster; blur never touches labels; label
//! resampling is nearest-neighbor.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::raster::LabelRaster;
use crate::data::ModalitySequence;
use crate::error::{Error, Result};
use crate::numerics::NdArray;

#[derive(Clone, Copy, Debug)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub blur_prob: f64,
    /// Crop side as a fraction of the input side, then resize back.
    pub crop_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            blur_prob: 0.25,
            crop_frac: 0.875,
        }
    }
}

pub fn flip_horizontal(a: &NdArray) -> NdArray {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = a.at3(ch, y, w - 1 - x);
            }
        }
    }
    NdArray::from_vec(&[c, h, w], out).expect("flip shape")
}

pub fn flip_labels_horizontal(l: &LabelRaster) -> LabelRaster {
    let mut out = LabelRaster::filled(l.h, l.w, 0);
    for y in 0..l.h {
        for x in 0..l.w {
            out.set(y, x, l.at(y, l.w - 1 - x));
        }
    }
    out
}

pub fn crop_array(a: &NdArray, oy: usize, ox: usize, ch: usize, cw: usize) -> Result<NdArray> {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if oy + ch > h || ox + cw > w {
        return Err(Error::InvalidArgument("crop exceeds raster".into()));
    }
    let mut out = vec![0.0; c * ch * cw];
    for chn in 0..c {
        for y in 0..ch {
            for x in 0..cw {
                out[(chn * ch + y) * cw + x] = a.at3(chn, oy + y, ox + x);
            }
        }
    }
    NdArray::from_vec(&[c, ch, cw], out)
}

pub fn crop_labels(
    l: &LabelRaster,
    oy: usize,
    ox: usize,
    ch: usize,
    cw: usize,
) -> Result<LabelRaster> {
    if oy + ch > l.h || ox + cw > l.w {
        return Err(Error::InvalidArgument("crop exceeds raster".into()));
    }
    let mut out = LabelRaster::filled(ch, cw, 0);
    for y in 0..ch {
        for x in 0..cw {
            out.set(y, x, l.at(oy + y, ox + x));
        }
    }
    Ok(out)
}

pub fn resize_bilinear(a: &NdArray, oh: usize, ow: usize) -> NdArray {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if h == oh && w == ow {
        return a.clone();
    }
    let mut out = vec![0.0; c * oh * ow];
    for oy in 0..oh {
        let sy = ((oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = sy - y0 as f64;
        for ox in 0..ow {
            let sx =
                ((ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = sx - x0 as f64;
            for ch in 0..c {
                out[(ch * oh + oy) * ow + ox] = (1.0 - wy) * (1.0 - wx) * a.at3(ch, y0, x0)
                    + (1.0 - wy) * wx * a.at3(ch, y0, x1)
                    + wy * (1.0 - wx) * a.at3(ch, y1, x0)
                    + wy * wx * a.at3(ch, y1, x1);
            }
        }
    }
    NdArray::from_vec(&[c, oh, ow], out).expect("resize shape")
}

pub fn resize_nearest_labels(l: &LabelRaster, oh: usize, ow: usize) -> LabelRaster {
    if l.h == oh && l.w == ow {
        return l.clone();
    }
    let mut out = LabelRaster::filled(oh, ow, 0);
    for oy in 0..oh {
        let sy = (((oy as f64 + 0.5) * l.h as f64 / oh as f64) as usize).min(l.h - 1);
        for ox in 0..ow {
            let sx = (((ox as f64 + 0.5) * l.w as f64 / ow as f64) as usize).min(l.w - 1);
            out.set(oy, ox, l.at(sy, sx));
        }
    }
    out
}

/// 3x3 binomial blur with edge clamping; pixel data only.
pub fn blur3(a: &NdArray) -> NdArray {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let kernel = [1.0, 2.0, 1.0];
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut norm = 0.0;
                for (dy, ky) in (-1i64..=1).zip(kernel.iter()) {
                    for (dx, kx) in (-1i64..=1).zip(kernel.iter()) {
                        let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        acc += ky * kx * a.at3(ch, yy, xx);
                        norm += ky * kx;
                    }
                }
                out[(ch * h + y) * w + x] = acc / norm;
            }
        }
    }
    NdArray::from_vec(&[c, h, w], out).expect("blur shape")
}

/// Apply one sampled augmentation to a whole sequence. Flip and crop
/// offsets are drawn once and shared by all frames and the labels; the
/// blur decision is drawn per frame.
pub fn augment(
    seq: &ModalitySequence,
    rng: &mut ChaCha8Rng,
    cfg: &AugmentConfig,
) -> Result<ModalitySequence> {
    let (h, w) = (seq.labels.h, seq.labels.w);
    let ch = ((h as f64 * cfg.crop_frac).round() as usize).clamp(1, h);
    let cw = ((w as f64 * cfg.crop_frac).round() as usize).clamp(1, w);
    let flip = rng.gen_range(0.0..1.0) < cfg.flip_prob;
    let oy = if ch < h { rng.gen_range(0..=h - ch) } else { 0 };
    let ox = if cw < w { rng.gen_range(0..=w - cw) } else { 0 };

    let mut frames = Vec::with_capacity(seq.frames.len());
    for f in &seq.frames {
        let mut out = resize_bilinear(&crop_array(f, oy, ox, ch, cw)?, h, w);
        if flip {
            out = flip_horizontal(&out);
        }
        if rng.gen_range(0.0..1.0) < cfg.blur_prob {
            out = blur3(&out);
        }
        frames.push(out);
    }
    let mut labels = resize_nearest_labels(&crop_labels(&seq.labels, oy, ox, ch, cw)?, h, w);
    if flip {
        labels = flip_labels_horizontal(&labels);
    }
    Ok(ModalitySequence {
        frames,
        labels,
        scene_id: seq.scene_id.clone(),
    })
}
