//! Sequence memory: frames of one scene are processed in order, each frame
//! after the first attends over compact feature/positional entries banked
//! from every earlier frame, and the per-frame class logits are averaged
//! into the scene prediction. The final frame attends but is never banked.

use rand_chacha::ChaCha8Rng;

use crate::encoder::{self, EncoderConfig, EncoderOutput};
use crate::error::{Error, Result};
use crate::numerics::graph::Var;
use crate::numerics::positional::sinusoidal_positions_offset;
use crate::numerics::NdArray;
use crate::params::{trunc_normal, ParamStore, Session};

#[derive(Clone, Copy, Debug)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub num_classes: usize,
    /// Channel width of banked memory features.
    pub c_mem: usize,
    /// Channel width of the decoder pyramid.
    pub c_dec: usize,
    pub use_memory: bool,
    /// Average the per-frame masks into the output; when off, the final
    /// frame's mask is the output.
    pub use_residual: bool,
}

impl ModelConfig {
    pub fn new(num_classes: usize) -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            num_classes,
            c_mem: 16,
            c_dec: 32,
            use_memory: true,
            use_residual: true,
        }
    }
}

/// One banked frame: compressed features plus their positional encoding,
/// both as `[n, c_mem]` token matrices at 1/16 resolution.
pub struct MemoryEntry {
    pub v_fea: Var,
    pub v_pos: Var,
}

/// Outputs of one scene pass.
pub struct SequenceOutput {
    /// Scene class logits `[c, h, w]`: the per-frame average, or the final
    /// frame's logits when the averaging residual is disabled.
    pub fused_logits: Var,
    /// Per-frame class logits, one per modality, in input order.
    pub frame_logits: Vec<Var>,
    /// Per-frame high-resolution taps `[c_high, h/4, w/4]`; consumed by
    /// the prototype module during training.
    pub frame_features: Vec<Var>,
    /// Per-frame encoder features `[c_e, h/16, w/16]` before memory
    /// attention, one per frame.
    pub pre_memory: Vec<Var>,
    /// Post-memory features for the frames that attended over the bank
    /// (all but the first when memory is on, none otherwise).
    pub post_memory: Vec<Var>,
    /// Number of frames whose memory entries were banked.
    pub banked_frames: usize,
}

pub fn init_model_params(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    encoder::init_encoder_params(store, &cfg.encoder, rng);
    let std = 0.02;
    let ce = cfg.encoder.c_e;
    let (cm, cd, c) = (cfg.c_mem, cfg.c_dec, cfg.num_classes);
    store.insert("mem.enc.w", trunc_normal(rng, &[cm, ce + c, 1, 1], std));
    store.insert("mem.enc.b", NdArray::zeros(&[cm]));
    store.insert("mem.attn.lnq.g", NdArray::filled(&[ce], 1.0));
    store.insert("mem.attn.lnq.b", NdArray::zeros(&[ce]));
    store.insert("mem.attn.wq", trunc_normal(rng, &[ce, ce], std));
    store.insert("mem.attn.bq", NdArray::zeros(&[ce]));
    store.insert("mem.attn.wk", trunc_normal(rng, &[cm, ce], std));
    store.insert("mem.attn.bk", NdArray::zeros(&[ce]));
    store.insert("mem.attn.wv", trunc_normal(rng, &[cm, ce], std));
    store.insert("mem.attn.bv", NdArray::zeros(&[ce]));
    // Zero-initialized branch outputs keep an untrained memory pass exactly
    // equal to the memory-free pass.
    store.insert("mem.attn.wo", NdArray::zeros(&[ce, ce]));
    store.insert("mem.attn.bo", NdArray::zeros(&[ce]));
    store.insert("mem.ffn.ln.g", NdArray::filled(&[ce], 1.0));
    store.insert("mem.ffn.ln.b", NdArray::zeros(&[ce]));
    store.insert("mem.ffn.w1", trunc_normal(rng, &[ce, ce], std));
    store.insert("mem.ffn.b1", NdArray::zeros(&[ce]));
    store.insert("mem.ffn.w2", NdArray::zeros(&[ce, ce]));
    store.insert("mem.ffn.b2", NdArray::zeros(&[ce]));
    store.insert("dec.in.w", trunc_normal(rng, &[cd, ce, 1, 1], std));
    store.insert("dec.in.b", NdArray::zeros(&[cd]));
    store.insert("dec.lat2.w", trunc_normal(rng, &[cd, cfg.encoder.c_high, 1, 1], std));
    store.insert("dec.lat2.b", NdArray::zeros(&[cd]));
    store.insert("dec.mid2.w", trunc_normal(rng, &[cd, cd, 3, 3], std));
    store.insert("dec.mid2.b", NdArray::zeros(&[cd]));
    store.insert("dec.lat1.w", trunc_normal(rng, &[cd, cfg.encoder.c_high, 1, 1], std));
    store.insert("dec.lat1.b", NdArray::zeros(&[cd]));
    store.insert("dec.mid1.w", trunc_normal(rng, &[cd, cd, 3, 3], std));
    store.insert("dec.mid1.b", NdArray::zeros(&[cd]));
    store.insert("dec.head.w", trunc_normal(rng, &[c, cd, 1, 1], std));
    store.insert("dec.head.b", NdArray::zeros(&[c]));
}

fn conv(sess: &mut Session, x: Var, prefix: &str, stride: usize, pad: usize) -> Result<Var> {
    let w = sess.param(&format!("{prefix}.w"))?;
    let b = sess.param(&format!("{prefix}.b"))?;
    sess.g.conv2d(x, w, b, stride, pad)
}

/// Concatenate banked entries (feature tokens with positional encodings
/// added) into one `[m*n, c_mem]` context matrix.
pub fn build_memory_context(sess: &mut Session, bank: &[MemoryEntry]) -> Result<Var> {
    if bank.is_empty() {
        return Err(Error::InvalidArgument("empty memory bank".into()));
    }
    let mut parts = Vec::with_capacity(bank.len());
    for e in bank {
        parts.push(sess.g.add(e.v_fea, e.v_pos)?);
    }
    sess.g.concat_rows(&parts)
}

/// Cross-attention of frame features `f_e` (`[c_e, h16, w16]`) over the
/// banked context, followed by a pointwise feed-forward; both branches are
/// residual, so zeroed output projections make this the identity.
pub fn memory_attention(
    sess: &mut Session,
    f_e: Var,
    bank: &[MemoryEntry],
    frame_index: usize,
) -> Result<Var> {
    let shape = sess.g.value(f_e).shape().to_vec();
    let (ce, h, w) = (shape[0], shape[1], shape[2]);
    let n = h * w;
    let mut tokens = sess.g.image_to_tokens(f_e)?;

    let context = build_memory_context(sess, bank)?;
    let lnq_g = sess.param("mem.attn.lnq.g")?;
    let lnq_b = sess.param("mem.attn.lnq.b")?;
    let normed = sess.g.layer_norm_rows(tokens, lnq_g, lnq_b)?;
    let pos = sess
        .g
        .constant(sinusoidal_positions_offset(n, ce, frame_index * n)?);
    let posed = sess.g.add(normed, pos)?;
    let wq = sess.param("mem.attn.wq")?;
    let bq = sess.param("mem.attn.bq")?;
    let q0 = sess.g.matmul(posed, wq)?;
    let q = sess.g.add_row_broadcast(q0, bq)?;
    let wk = sess.param("mem.attn.wk")?;
    let bk = sess.param("mem.attn.bk")?;
    let k0 = sess.g.matmul(context, wk)?;
    let k = sess.g.add_row_broadcast(k0, bk)?;
    let wv = sess.param("mem.attn.wv")?;
    let bv = sess.param("mem.attn.bv")?;
    let v0 = sess.g.matmul(context, wv)?;
    let v = sess.g.add_row_broadcast(v0, bv)?;
    let att = sess.g.attention(q, k, v)?;
    let wo = sess.param("mem.attn.wo")?;
    let bo = sess.param("mem.attn.bo")?;
    let o0 = sess.g.matmul(att, wo)?;
    let branch = sess.g.add_row_broadcast(o0, bo)?;
    tokens = sess.g.add(tokens, branch)?;

    let ln_g = sess.param("mem.ffn.ln.g")?;
    let ln_b = sess.param("mem.ffn.ln.b")?;
    let fnorm = sess.g.layer_norm_rows(tokens, ln_g, ln_b)?;
    let w1 = sess.param("mem.ffn.w1")?;
    let b1 = sess.param("mem.ffn.b1")?;
    let h1 = sess.g.matmul(fnorm, w1)?;
    let h1 = sess.g.add_row_broadcast(h1, b1)?;
    let h1 = sess.g.relu(h1);
    let w2 = sess.param("mem.ffn.w2")?;
    let b2 = sess.param("mem.ffn.b2")?;
    let h2 = sess.g.matmul(h1, w2)?;
    let ffn = sess.g.add_row_broadcast(h2, b2)?;
    tokens = sess.g.add(tokens, ffn)?;
    sess.g.tokens_to_image(tokens, ce, h, w)
}

/// Decode fused frame features plus the two high-resolution taps into
/// full-resolution class logits. Also returns the `[c_dec, h/4, w/4]`
/// feature map feeding the classification head.
pub fn decode_mask(sess: &mut Session, f_c: Var, out: &EncoderOutput) -> Result<(Var, Var)> {
    let x = conv(sess, f_c, "dec.in", 1, 0)?;
    let x = sess.g.relu(x);
    let x = sess.g.upsample_bilinear(x, 2)?;
    let lat2 = conv(sess, out.f_high2, "dec.lat2", 1, 0)?;
    let x = sess.g.add(x, lat2)?;
    let x = conv(sess, x, "dec.mid2", 1, 1)?;
    let x = sess.g.relu(x);
    let x = sess.g.upsample_bilinear(x, 2)?;
    let lat1 = conv(sess, out.f_high1, "dec.lat1", 1, 0)?;
    let x = sess.g.add(x, lat1)?;
    let x = conv(sess, x, "dec.mid1", 1, 1)?;
    let feat = sess.g.relu(x);
    let logits4 = conv(sess, feat, "dec.head", 1, 0)?;
    let logits = sess.g.upsample_bilinear(logits4, 4)?;
    Ok((logits, feat))
}

/// Compress a frame's post-memory features and its predicted mask into a
/// memory entry at 1/16 resolution.
pub fn encode_memory(
    sess: &mut Session,
    cfg: &ModelConfig,
    f_c: Var,
    logits: Var,
    frame_index: usize,
) -> Result<MemoryEntry> {
    let lshape = sess.g.value(logits).shape().to_vec();
    let (c, h, w) = (lshape[0], lshape[1], lshape[2]);
    if c != cfg.num_classes {
        return Err(Error::ShapeMismatch(format!(
            "logits have {c} channels, expected {}",
            cfg.num_classes
        )));
    }
    let tok = sess.g.image_to_tokens(logits)?;
    let prob_tok = sess.g.softmax_rows(tok)?;
    let probs = sess.g.tokens_to_image(prob_tok, c, h, w)?;
    let mask_small = sess.g.avg_pool(probs, 16)?;
    let stacked = sess.g.concat_channels(f_c, mask_small)?;
    let fea_img = conv(sess, stacked, "mem.enc", 1, 0)?;
    let v_fea = sess.g.image_to_tokens(fea_img)?;
    let n = (h / 16) * (w / 16);
    let v_pos = sess
        .g
        .constant(sinusoidal_positions_offset(n, cfg.c_mem, frame_index * n)?);
    Ok(MemoryEntry { v_fea, v_pos })
}

/// Arithmetic mean of the per-frame logits.
pub fn average_masks(sess: &mut Session, frame_logits: &[Var]) -> Result<Var> {
    if frame_logits.is_empty() {
        return Err(Error::InvalidArgument("no frame logits to average".into()));
    }
    let mut acc = frame_logits[0];
    for &l in &frame_logits[1..] {
        acc = sess.g.add(acc, l)?;
    }
    Ok(sess.g.scale(acc, 1.0 / frame_logits.len() as f64))
}

/// Run the full sequence pass over one scene's modality frames.
///
/// Frame 1 bypasses memory attention (nothing is banked yet); every later
/// frame attends over all earlier entries; the final frame attends but is
/// not banked.
pub fn run_sequence(
    sess: &mut Session,
    cfg: &ModelConfig,
    frames: &[NdArray],
) -> Result<SequenceOutput> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("empty frame sequence".into()));
    }
    let mut bank: Vec<MemoryEntry> = Vec::new();
    let mut frame_logits = Vec::with_capacity(frames.len());
    let mut frame_features = Vec::with_capacity(frames.len());
    let mut pre_memory = Vec::with_capacity(frames.len());
    let mut post_memory = Vec::new();
    for (i, frame) in frames.iter().enumerate() {
        let enc = encoder::encode(sess, &cfg.encoder, frame)?;
        pre_memory.push(enc.f_e);
        let f_c = if cfg.use_memory && !bank.is_empty() {
            let fc = memory_attention(sess, enc.f_e, &bank, i)?;
            post_memory.push(fc);
            fc
        } else {
            enc.f_e
        };
        let (logits, _) = decode_mask(sess, f_c, &enc)?;
        if cfg.use_memory && i + 1 < frames.len() {
            bank.push(encode_memory(sess, cfg, f_c, logits, i)?);
        }
        frame_logits.push(logits);
        frame_features.push(enc.f_high1);
    }
    let fused_logits = if cfg.use_residual {
        average_masks(sess, &frame_logits)?
    } else {
        *frame_logits.last().unwrap()
    };
    Ok(SequenceOutput {
        fused_logits,
        frame_logits,
        frame_features,
        pre_memory,
        post_memory,
        banked_frames: bank.len(),
    })
}
