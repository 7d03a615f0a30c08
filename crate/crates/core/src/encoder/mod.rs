//! Toy hierarchical image encoder: four stages of halving resolution with
//! windowed self-attention blocks, FPN-style fusion of stages 3-4 into the
//! high-level feature map, convolutional taps for the two high-resolution
//! feature maps, and low-rank adaptation of attention query/value
//! projections.

pub mod lora;

pub use lora::{check_rank_bound, lora_apply, LoraWeights};

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::graph::Var;
use crate::numerics::NdArray;
use crate::params::{trunc_normal, ParamStore, Session};

#[derive(Clone, Copy, Debug)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stage_widths: [usize; 4],
    pub window: usize,
    pub lora_rank: usize,
    /// Channel width of the fused high-level features.
    pub c_e: usize,
    /// Channel width of the two high-resolution taps.
    pub c_high: usize,
    pub use_lora: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 1,
            stage_widths: [16, 32, 64, 64],
            window: 4,
            lora_rank: 4,
            c_e: 64,
            c_high: 32,
            use_lora: true,
        }
    }
}

impl EncoderConfig {
    /// Closed-form trainable LoRA parameter count: `r * (2 d_Q + 2 d_V)`
    /// summed over the attention blocks.
    pub fn lora_param_count(&self) -> usize {
        self.stage_widths
            .iter()
            .map(|&d| self.lora_rank * (2 * d + 2 * d))
            .sum()
    }
}

/// Per-frame encoder outputs: fused high-level features plus the two
/// high-resolution taps.
pub struct EncoderOutput {
    pub f_e: Var,      // [c_e, h/16, w/16]
    pub f_high1: Var,  // [c_high, h/4, w/4]
    pub f_high2: Var,  // [c_high, h/8, w/8]
}

pub fn init_encoder_params(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) {
    let std = 0.02;
    let w = cfg.stage_widths;
    store.insert(
        "enc.patch.w",
        trunc_normal(rng, &[w[0], cfg.in_channels, 4, 4], std),
    );
    store.insert("enc.patch.b", NdArray::zeros(&[w[0]]));
    for i in 0..4 {
        let d = w[i];
        let p = format!("enc.s{i}");
        store.insert(&format!("{p}.ln.g"), NdArray::filled(&[d], 1.0));
        store.insert(&format!("{p}.ln.b"), NdArray::zeros(&[d]));
        for proj in ["wq", "wk", "wv"] {
            store.insert(&format!("{p}.attn.{proj}"), trunc_normal(rng, &[d, d], std));
        }
        for bias in ["bq", "bk", "bv"] {
            store.insert(&format!("{p}.attn.{bias}"), NdArray::zeros(&[d]));
        }
        // Residual-branch output projection starts at zero so an untrained
        // block is the identity.
        store.insert(&format!("{p}.attn.wo"), NdArray::zeros(&[d, d]));
        store.insert(&format!("{p}.attn.bo"), NdArray::zeros(&[d]));
        let r = cfg.lora_rank;
        store.insert(&format!("{p}.lora.a_q"), trunc_normal(rng, &[d, r], std));
        store.insert(&format!("{p}.lora.b_q"), NdArray::zeros(&[r, d]));
        store.insert(&format!("{p}.lora.a_v"), trunc_normal(rng, &[d, r], std));
        store.insert(&format!("{p}.lora.b_v"), NdArray::zeros(&[r, d]));
    }
    for i in 1..4 {
        store.insert(
            &format!("enc.ds{i}.w"),
            trunc_normal(rng, &[w[i], w[i - 1], 3, 3], std),
        );
        store.insert(&format!("enc.ds{i}.b"), NdArray::zeros(&[w[i]]));
    }
    store.insert(
        "enc.high1.w",
        trunc_normal(rng, &[cfg.c_high, w[0], 3, 3], std),
    );
    store.insert("enc.high1.b", NdArray::zeros(&[cfg.c_high]));
    store.insert(
        "enc.high2.w",
        trunc_normal(rng, &[cfg.c_high, w[1], 3, 3], std),
    );
    store.insert("enc.high2.b", NdArray::zeros(&[cfg.c_high]));
    store.insert(
        "enc.fpn.lat3.w",
        trunc_normal(rng, &[cfg.c_e, w[2], 1, 1], std),
    );
    store.insert("enc.fpn.lat3.b", NdArray::zeros(&[cfg.c_e]));
    store.insert(
        "enc.fpn.lat4.w",
        trunc_normal(rng, &[cfg.c_e, w[3], 1, 1], std),
    );
    store.insert("enc.fpn.lat4.b", NdArray::zeros(&[cfg.c_e]));
    store.insert(
        "enc.fpn.out.w",
        trunc_normal(rng, &[cfg.c_e, cfg.c_e, 3, 3], std),
    );
    store.insert("enc.fpn.out.b", NdArray::zeros(&[cfg.c_e]));
}

/// Parameter names belonging to the encoder backbone (everything under
/// `enc.` except the LoRA factors).
pub fn is_backbone_param(name: &str) -> bool {
    name.starts_with("enc.") && !name.contains(".lora.")
}

fn window_indices(h: usize, w: usize, win: usize) -> Vec<Vec<usize>> {
    let mut windows = Vec::new();
    for wy in (0..h).step_by(win) {
        for wx in (0..w).step_by(win) {
            let mut idx = Vec::with_capacity(win * win);
            for dy in 0..win {
                for dx in 0..win {
                    idx.push((wy + dy) * w + wx + dx);
                }
            }
            windows.push(idx);
        }
    }
    windows
}

fn attn_block(sess: &mut Session, cfg: &EncoderConfig, stage: usize, x: Var) -> Result<Var> {
    let shape = sess.g.value(x).shape().to_vec();
    let (d, h, w) = (shape[0], shape[1], shape[2]);
    let win = cfg.window.min(h).min(w);
    if h % win != 0 || w % win != 0 {
        return Err(Error::ShapeMismatch(format!(
            "window {win} does not tile {h}x{w}"
        )));
    }
    let p = format!("enc.s{stage}");
    let tokens = sess.g.image_to_tokens(x)?;
    let ln_g = sess.param(&format!("{p}.ln.g"))?;
    let ln_b = sess.param(&format!("{p}.ln.b"))?;
    let normed = sess.g.layer_norm_rows(tokens, ln_g, ln_b)?;

    let mut wq = sess.param(&format!("{p}.attn.wq"))?;
    let wk = sess.param(&format!("{p}.attn.wk"))?;
    let mut wv = sess.param(&format!("{p}.attn.wv"))?;
    if cfg.use_lora {
        check_rank_bound(cfg.lora_rank, d)?;
        let aq = sess.param(&format!("{p}.lora.a_q"))?;
        let bq = sess.param(&format!("{p}.lora.b_q"))?;
        let av = sess.param(&format!("{p}.lora.a_v"))?;
        let bv = sess.param(&format!("{p}.lora.b_v"))?;
        let dq = sess.g.matmul(aq, bq)?;
        let dv = sess.g.matmul(av, bv)?;
        wq = sess.g.add(wq, dq)?;
        wv = sess.g.add(wv, dv)?;
    }
    let bq = sess.param(&format!("{p}.attn.bq"))?;
    let bk = sess.param(&format!("{p}.attn.bk"))?;
    let bv = sess.param(&format!("{p}.attn.bv"))?;
    let wo = sess.param(&format!("{p}.attn.wo"))?;
    let bo = sess.param(&format!("{p}.attn.bo"))?;

    let windows = window_indices(h, w, win);
    let mut outs = Vec::with_capacity(windows.len());
    let mut order = Vec::with_capacity(h * w);
    for idx in &windows {
        order.extend_from_slice(idx);
        let t = sess.g.select_rows(normed, idx.clone())?;
        let q0 = sess.g.matmul(t, wq)?;
        let q = sess.g.add_row_broadcast(q0, bq)?;
        let k0 = sess.g.matmul(t, wk)?;
        let k = sess.g.add_row_broadcast(k0, bk)?;
        let v0 = sess.g.matmul(t, wv)?;
        let v = sess.g.add_row_broadcast(v0, bv)?;
        let att = sess.g.attention(q, k, v)?;
        let o0 = sess.g.matmul(att, wo)?;
        let o = sess.g.add_row_broadcast(o0, bo)?;
        outs.push(o);
    }
    let all = sess.g.concat_rows(&outs)?;
    let mut inv = vec![0usize; h * w];
    for (row, &tok) in order.iter().enumerate() {
        inv[tok] = row;
    }
    let branch = sess.g.select_rows(all, inv)?;
    let sum = sess.g.add(tokens, branch)?;
    sess.g.tokens_to_image(sum, d, h, w)
}

fn conv(sess: &mut Session, x: Var, prefix: &str, stride: usize, pad: usize) -> Result<Var> {
    let w = sess.param(&format!("{prefix}.w"))?;
    let b = sess.param(&format!("{prefix}.b"))?;
    sess.g.conv2d(x, w, b, stride, pad)
}

/// Encode one `[c, h, w]` frame. `h` and `w` must be divisible by 16.
pub fn encode(sess: &mut Session, cfg: &EncoderConfig, frame: &NdArray) -> Result<EncoderOutput> {
    let shape = frame.shape();
    if shape.len() != 3 || shape[0] != cfg.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "frame shape {shape:?}, expected [{}, h, w]",
            cfg.in_channels
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "spatial dims {h}x{w} not divisible by 16"
        )));
    }
    let x0 = sess.g.constant(frame.clone());
    let mut x = conv(sess, x0, "enc.patch", 4, 0)?;
    let mut stages = Vec::with_capacity(4);
    for i in 0..4 {
        if i > 0 {
            x = conv(sess, x, &format!("enc.ds{i}"), 2, 1)?;
        }
        x = attn_block(sess, cfg, i, x)?;
        // Resolution law: stage i (1-based) lives at h / 2^(i+1).
        let expect = h >> (i + 2);
        let got = sess.g.value(x).shape()[1];
        if got != expect {
            return Err(Error::ShapeMismatch(format!(
                "stage {} at {got}, expected {expect}",
                i + 1
            )));
        }
        stages.push(x);
    }
    let f_high1 = conv(sess, stages[0], "enc.high1", 1, 1)?;
    let f_high2 = conv(sess, stages[1], "enc.high2", 1, 1)?;
    let lat3 = conv(sess, stages[2], "enc.fpn.lat3", 1, 0)?;
    let lat4 = conv(sess, stages[3], "enc.fpn.lat4", 1, 0)?;
    let up4 = sess.g.upsample_nearest(lat4, 2)?;
    let fused = sess.g.add(lat3, up4)?;
    let f_e = conv(sess, fused, "enc.fpn.out", 1, 1)?;
    Ok(EncoderOutput {
        f_e,
        f_high1,
        f_high2,
    })
}
