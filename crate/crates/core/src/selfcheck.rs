//! Self-contained oracle and invariant suite, runnable from the CLI.
//!
//! Each check recomputes an expected value through an independent route
//! (hand arithmetic, brute force, or a limit case) and compares against the
//! pipeline implementation. The gradient suite compares analytic gradients
//! against central finite differences on a small instance.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::raster::LabelRaster;
use crate::error::{Error, Result};
use crate::eval::{iou_metrics, ClassAveraging, ConfusionMatrix};
use crate::losses::{ohem_ce, LossConfig};
use crate::memory::{average_masks, MemoryEntry, ModelConfig};
use crate::numerics::gradcheck::{finite_diff_check, GradReport};
use crate::numerics::{NdArray, Var};
use crate::params::{ParamStore, Session};
use crate::spmm::{
    compute_current_prototypes, momentum_update, proto_loss, CurrentPrototypes, PrototypeBank,
    SpmmConfig, PROTO_DIM,
};

pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn run(name: &'static str, f: impl FnOnce() -> Result<()>) -> CheckResult {
    match f() {
        Ok(()) => CheckResult {
            name,
            passed: true,
            detail: "ok".into(),
        },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn expect(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidArgument(msg.to_string()))
    }
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> Result<()> {
    let rel = (a - b).abs() / b.abs().max(1.0);
    expect(rel <= tol, &format!("{what}: got {a}, want {b}"))
}

fn mask_average_oracle() -> Result<()> {
    let store = ParamStore::new();
    let mut sess = Session::new(&store);
    let vals = [1.0, 4.0, -2.0];
    let vars: Vec<_> = vals
        .iter()
        .map(|&v| sess.g.constant(NdArray::filled(&[2, 2, 2], v)))
        .collect();
    let avg = average_masks(&mut sess, &vars)?;
    close(sess.g.value(avg).data()[0], 1.0, 1e-6, "mask average")
}

fn identity_projection_store() -> ParamStore {
    let mut store = ParamStore::new();
    let mut w = NdArray::zeros(&[PROTO_DIM, PROTO_DIM, 1, 1]);
    for i in 0..PROTO_DIM {
        w.data_mut()[i * PROTO_DIM + i] = 1.0;
    }
    store.insert("proto.proj.w", w);
    store.insert("proto.proj.b", NdArray::zeros(&[PROTO_DIM]));
    store
}

fn prototype_pooling_oracle() -> Result<()> {
    let store = identity_projection_store();
    let mut sess = Session::new(&store);
    let mut f = NdArray::zeros(&[PROTO_DIM, 2, 2]);
    for ch in 0..PROTO_DIM {
        f.data_mut()[ch * 4..(ch + 1) * 4].copy_from_slice(&[1.0, 2.0, 3.0, 5.0]);
    }
    let fvar = sess.g.constant(f);
    let mask = LabelRaster::new(2, 2, vec![0, 0, 1, 1])?;
    let cur = compute_current_prototypes(
        &mut sess,
        &SpmmConfig::default(),
        &[fvar],
        &mask,
        2,
    )?;
    let v = sess.g.value(cur.values);
    close(v.data()[0], 1.5, 1e-6, "class-0 prototype")?;
    close(v.data()[PROTO_DIM], 4.0, 1e-6, "class-1 prototype")
}

fn momentum_oracle() -> Result<()> {
    let mut bank = PrototypeBank::new(1, 0.2)?;
    momentum_update(&mut bank, &NdArray::filled(&[1, PROTO_DIM], 1.0), &[true])?;
    momentum_update(&mut bank, &NdArray::filled(&[1, PROTO_DIM], 2.0), &[true])?;
    close(bank.global.data()[0], 1.2, 1e-6, "momentum blend")
}

fn proto_loss_oracle() -> Result<()> {
    let store = ParamStore::new();
    let mut bank = PrototypeBank::new(3, 0.2)?;
    bank.seen = vec![true; 3];
    let mut sess = Session::new(&store);
    let values = sess.g.constant(NdArray::filled(&[3, PROTO_DIM], 1.0));
    let cur = CurrentPrototypes {
        values,
        present: vec![true; 3],
        counts: vec![1; 3],
    };
    let l = proto_loss(&mut sess, &bank, &cur, 64, 64)?;
    close(sess.g.value(l).data()[0], 256.0, 1e-6, "prototype loss")
}

fn ohem_plain_ce_limit() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let store = ParamStore::new();
    let (c, h, w) = (3, 8, 8);
    let n = h * w;
    let logits_arr = NdArray::from_vec(
        &[c, h, w],
        (0..c * n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )?;
    let labels: Vec<u32> = (0..n).map(|_| rng.gen_range(0..c as u32)).collect();
    // Brute-force mean CE.
    let mut want = 0.0;
    for p in 0..n {
        let mx = (0..c)
            .map(|k| logits_arr.data()[k * n + p])
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..c)
            .map(|k| (logits_arr.data()[k * n + p] - mx).exp())
            .sum();
        want -= logits_arr.data()[labels[p] as usize * n + p] - mx - z.ln();
    }
    want /= n as f64;
    let mut sess = Session::new(&store);
    let logits = sess.g.constant(logits_arr);
    let gt = LabelRaster::new(h, w, labels)?;
    let cfg = LossConfig {
        ohem_threshold: 1.0,
        ohem_min_kept: 1.0,
        ..LossConfig::default()
    };
    let l = ohem_ce(&mut sess, logits, &gt, &cfg)?;
    close(sess.g.value(l).data()[0], want, 1e-6, "plain-CE limit")
}

fn miou_oracle() -> Result<()> {
    let mut cm = ConfusionMatrix::new(2);
    cm.record(
        &LabelRaster::new(1, 4, vec![0, 1, 1, 1])?,
        &LabelRaster::new(1, 4, vec![0, 0, 1, 1])?,
    )?;
    let m = iou_metrics(&cm, ClassAveraging::IncludeAll);
    expect(
        (m.per_class_iou[0] - 50.0).abs() < 0.01
            && (m.per_class_iou[1] - 200.0 / 3.0).abs() < 0.01
            && (m.miou - 175.0 / 3.0).abs() < 0.01,
        &format!("mIoU oracle: got {:?} / {}", m.per_class_iou, m.miou),
    )
}

/// The fast oracle suite behind `check`.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        run("mask_average_oracle", mask_average_oracle),
        run("prototype_pooling_oracle", prototype_pooling_oracle),
        run("momentum_oracle", momentum_oracle),
        run("proto_loss_oracle", proto_loss_oracle),
        run("ohem_plain_ce_limit", ohem_plain_ce_limit),
        run("miou_oracle", miou_oracle),
    ]
}

/// Parameter store with every tensor (including the zero-initialized
/// residual projections and adapter factors) replaced by O(1) random
/// values, so every gradient path carries signal well above the
/// central-difference noise floor.
fn randomized_store(model: &ModelConfig, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut base = ParamStore::new();
    crate::memory::init_model_params(&mut base, model, rng);
    crate::spmm::init_prototype_params(&mut base, model, rng);
    let names: Vec<String> = base.names().cloned().collect();
    for name in names {
        let shape = base.value(&name).unwrap().shape().to_vec();
        base.set_value(&name, crate::params::trunc_normal(rng, &shape, 0.3))
            .unwrap();
    }
    base
}

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> NdArray {
    let n: usize = shape.iter().product();
    NdArray::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Finite-difference check of one component: `loss_of` rebuilds the
/// component forward pass from a store and returns the scalar loss node.
fn check_component(
    base: &ParamStore,
    checked: &[&str],
    epsilon: f64,
    loss_of: &dyn Fn(&mut Session) -> Result<Var>,
) -> Result<GradReport> {
    let mut sess = Session::new(base);
    let root = loss_of(&mut sess)?;
    let grads = sess.g.backward(root)?;
    let analytic_all = sess.collect_grads(&grads);
    let mut params = BTreeMap::new();
    let mut analytic = BTreeMap::new();
    for name in checked {
        params.insert(name.to_string(), base.value(name)?.clone());
        analytic.insert(
            name.to_string(),
            analytic_all
                .get(*name)
                .cloned()
                .unwrap_or_else(|| NdArray::zeros(base.value(name).unwrap().shape())),
        );
    }
    let eval = |over: &BTreeMap<String, NdArray>| -> Result<f64> {
        let mut store = base.clone();
        for (name, value) in over {
            store.set_value(name, value.clone())?;
        }
        let mut sess = Session::new(&store);
        let root = loss_of(&mut sess)?;
        Ok(sess.g.value(root).data()[0])
    };
    finite_diff_check(eval, &params, &analytic, epsilon)
}

/// Scalar probe: weighted mean of an output tensor against fixed random
/// weights, so every output coordinate contributes with a distinct sign.
fn weighted_mean(sess: &mut Session, x: Var, weights: &NdArray) -> Result<Var> {
    let w = sess.g.constant(weights.clone());
    let prod = sess.g.mul(x, w)?;
    Ok(sess.g.mean_all(prod))
}

/// Finite-difference gradient checks for each learned component on small
/// instances: encoder adapter factors, memory-attention projections,
/// decoder head, prototype projection with the prototype loss, and the
/// memory encoder.
pub fn gradient_checks() -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let model = ModelConfig::new(2);
    let base = randomized_store(&model, &mut rng);
    let eps = 1e-5;
    let mut merged: BTreeMap<String, f64> = BTreeMap::new();

    // Adapter factors through the full encoder on the smallest legal frame.
    {
        let frame = random_array(&mut rng, &[1, 32, 32]);
        let probe = random_array(&mut rng, &[model.encoder.c_e, 2, 2]);
        let enc_cfg = model.encoder;
        let rep = check_component(
            &base,
            &["enc.s0.lora.a_q", "enc.s0.lora.b_q", "enc.s0.lora.b_v"],
            eps,
            &move |sess| {
                let out = crate::encoder::encode(sess, &enc_cfg, &frame)?;
                weighted_mean(sess, out.f_e, &probe)
            },
        )?;
        merged.extend(rep.per_parameter_errors);
    }

    // Memory cross-attention and feed-forward over a two-entry bank on a
    // 4x4 token grid.
    {
        let f_e = random_array(&mut rng, &[model.encoder.c_e, 4, 4]);
        let probe = random_array(&mut rng, &[model.encoder.c_e, 4, 4]);
        let fea: Vec<NdArray> = (0..2)
            .map(|_| random_array(&mut rng, &[16, model.c_mem]))
            .collect();
        let pos: Vec<NdArray> = (0..2)
            .map(|_| random_array(&mut rng, &[16, model.c_mem]))
            .collect();
        let rep = check_component(
            &base,
            &[
                "mem.attn.wk",
                "mem.attn.bq",
                "mem.attn.bv",
                "mem.attn.lnq.g",
                "mem.ffn.b1",
            ],
            eps,
            &move |sess| {
                let f = sess.g.constant(f_e.clone());
                let bank: Vec<MemoryEntry> = fea
                    .iter()
                    .zip(&pos)
                    .map(|(a, b)| MemoryEntry {
                        v_fea: sess.g.constant(a.clone()),
                        v_pos: sess.g.constant(b.clone()),
                    })
                    .collect();
                let out = crate::memory::memory_attention(sess, f, &bank, 2)?;
                weighted_mean(sess, out, &probe)
            },
        )?;
        merged.extend(rep.per_parameter_errors);
    }

    // Decoder pyramid from synthetic taps; head output at 4x the 8x8 grid.
    {
        let f_c = random_array(&mut rng, &[model.encoder.c_e, 2, 2]);
        let high2 = random_array(&mut rng, &[model.encoder.c_high, 4, 4]);
        let high1 = random_array(&mut rng, &[model.encoder.c_high, 8, 8]);
        let probe = random_array(&mut rng, &[model.num_classes, 32, 32]);
        let rep = check_component(
            &base,
            &["dec.head.w", "dec.head.b", "dec.lat1.b", "dec.mid1.b"],
            eps,
            &move |sess| {
                let f = sess.g.constant(f_c.clone());
                let out = crate::encoder::EncoderOutput {
                    f_e: f,
                    f_high1: sess.g.constant(high1.clone()),
                    f_high2: sess.g.constant(high2.clone()),
                };
                let (logits, _) = crate::memory::decode_mask(sess, f, &out)?;
                weighted_mean(sess, logits, &probe)
            },
        )?;
        merged.extend(rep.per_parameter_errors);
    }

    // Shared prototype projection through masked pooling and the
    // prototype loss on a 4x4 grid.
    {
        let feats: Vec<NdArray> = (0..2)
            .map(|_| random_array(&mut rng, &[model.encoder.c_high, 4, 4]))
            .collect();
        let mask = LabelRaster::new(4, 4, (0..16).map(|p| (p % 2) as u32).collect())?;
        let mut bank = PrototypeBank::new(2, 0.2)?;
        bank.seen = vec![true; 2];
        bank.global = random_array(&mut rng, &[2, PROTO_DIM]);
        let rep = check_component(
            &base,
            &["proto.proj.w", "proto.proj.b"],
            eps,
            &move |sess| {
                let fvars: Vec<Var> =
                    feats.iter().map(|f| sess.g.constant(f.clone())).collect();
                let cur = compute_current_prototypes(
                    sess,
                    &SpmmConfig::default(),
                    &fvars,
                    &mask,
                    2,
                )?;
                proto_loss(sess, &bank, &cur, 16, 16)
            },
        )?;
        merged.extend(rep.per_parameter_errors);
    }

    // Memory encoder: features plus pooled mask probabilities into a bank
    // entry; single token at 1/16 of a 16x16 mask.
    {
        let f_c = random_array(&mut rng, &[model.encoder.c_e, 1, 1]);
        let logits = random_array(&mut rng, &[model.num_classes, 16, 16]);
        let probe = random_array(&mut rng, &[1, model.c_mem]);
        let model_cfg = model;
        let rep = check_component(
            &base,
            &["mem.enc.w", "mem.enc.b"],
            eps,
            &move |sess| {
                let f = sess.g.constant(f_c.clone());
                let l = sess.g.constant(logits.clone());
                let entry = crate::memory::encode_memory(sess, &model_cfg, f, l, 0)?;
                weighted_mean(sess, entry.v_fea, &probe)
            },
        )?;
        merged.extend(rep.per_parameter_errors);
    }

    let max = merged.values().cloned().fold(0.0_f64, f64::max);
    Ok(GradReport {
        max_relative_error: max,
        per_parameter_errors: merged,
    })
}
