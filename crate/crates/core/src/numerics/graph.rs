use crate::error::{Error, Result};
use crate::numerics::array::{matmul, softmax_rows, transpose, NdArray};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    SoftmaxRows(usize),
    LayerNormRows {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    AddRowBroadcast {
        x: usize,
        bias: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    UpsampleNearest {
        x: usize,
        factor: usize,
    },
    UpsampleBilinear {
        x: usize,
        factor: usize,
    },
    AvgPool {
        x: usize,
        factor: usize,
    },
    ConcatRows(Vec<usize>),
    ConcatChannels(usize, usize),
    ImageToTokens(usize),
    TokensToImage {
        x: usize,
        c: usize,
        h: usize,
        w: usize,
    },
    SelectRows {
        x: usize,
        idx: Vec<usize>,
    },
    SumAll(usize),
    MeanAll(usize),
    /// Softmax cross-entropy over hard pixels; see `losses` module for the
    /// selection rule. Saved softmax probabilities and the kept set drive the
    /// backward pass (the selection itself is treated as constant).
    OhemCe {
        logits: usize,
        labels: Vec<u32>,
        probs: Vec<f64>,
        kept: Vec<usize>,
    },
    /// Per-class masked mean over pixels: `[d,h,w]` features + `h*w` labels
    /// -> `[num_classes, d]` prototypes (zero rows for absent classes).
    MaskedClassMean {
        feat: usize,
        labels: Vec<u32>,
        counts: Vec<usize>,
    },
}

struct Node {
    value: NdArray,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Operations append nodes; `backward` walks the tape
/// once and accumulates gradients for every node that requires them.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients keyed by node index, produced by [`Graph::backward`].
pub struct Grads {
    slots: Vec<Option<NdArray>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&NdArray> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<NdArray> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &NdArray {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: NdArray, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn leaf(&mut self, value: NdArray, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: NdArray) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !va.same_shape(vb) {
            return Err(Error::ShapeMismatch(format!(
                "add {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = NdArray::from_vec(va.shape(), data)?;
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(out, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !va.same_shape(vb) {
            return Err(Error::ShapeMismatch(format!(
                "sub {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = NdArray::from_vec(va.shape(), data)?;
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(out, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !va.same_shape(vb) {
            return Err(Error::ShapeMismatch(format!(
                "mul {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = NdArray::from_vec(va.shape(), data)?;
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(out, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.nodes[a.0].value.map(|v| v * s);
        let rg = self.needs(&[a.0]);
        self.push(out, Op::Scale(a.0, s), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(out, Op::MatMul(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if !self.nodes[a.0].value.is_matrix() {
            return Err(Error::ShapeMismatch("transpose wants 2-d".into()));
        }
        let out = transpose(&self.nodes[a.0].value);
        let rg = self.needs(&[a.0]);
        Ok(self.push(out, Op::Transpose(a.0), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|v| v.max(0.0));
        let rg = self.needs(&[a.0]);
        self.push(out, Op::Relu(a.0), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        if !self.nodes[a.0].value.is_matrix() {
            return Err(Error::ShapeMismatch("softmax_rows wants 2-d".into()));
        }
        let out = softmax_rows(&self.nodes[a.0].value);
        let rg = self.needs(&[a.0]);
        Ok(self.push(out, Op::SoftmaxRows(a.0), rg))
    }

    /// Per-row layer normalization of `[n, c]` tokens with learned gain/bias.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let eps = 1e-5;
        let vx = &self.nodes[x.0].value;
        if !vx.is_matrix() {
            return Err(Error::ShapeMismatch("layer_norm wants 2-d input".into()));
        }
        let (n, c) = (vx.rows(), vx.cols());
        let vg = &self.nodes[gamma.0].value;
        let vb = &self.nodes[beta.0].value;
        if vg.numel() != c || vb.numel() != c {
            return Err(Error::ShapeMismatch("layer_norm gain/bias size".into()));
        }
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &vx.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv * vg.data()[j] + vb.data()[j];
            }
        }
        let out = NdArray::from_vec(&[n, c], out)?;
        let rg = self.needs(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            out,
            Op::LayerNormRows {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
            rg,
        ))
    }

    /// `[n, c]` tokens plus a `[c]` bias row.
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let vb = &self.nodes[bias.0].value;
        if !vx.is_matrix() || vb.numel() != vx.cols() {
            return Err(Error::ShapeMismatch("add_row_broadcast shapes".into()));
        }
        let (n, c) = (vx.rows(), vx.cols());
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                out[i * c + j] = vx.at2(i, j) + vb.data()[j];
            }
        }
        let out = NdArray::from_vec(&[n, c], out)?;
        let rg = self.needs(&[x.0, bias.0]);
        Ok(self.push(
            out,
            Op::AddRowBroadcast {
                x: x.0,
                bias: bias.0,
            },
            rg,
        ))
    }

    /// 2-d convolution over a `[c_in, h, w]` image with `[c_out, c_in, kh, kw]`
    /// weights and `[c_out]` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let vw = &self.nodes[w.0].value;
        let vb = &self.nodes[b.0].value;
        if vx.shape().len() != 3 || vw.shape().len() != 4 {
            return Err(Error::ShapeMismatch("conv2d wants [c,h,w] and [o,c,kh,kw]".into()));
        }
        let (ci, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (co, ci2, kh, kw) = (
            vw.shape()[0],
            vw.shape()[1],
            vw.shape()[2],
            vw.shape()[3],
        );
        if ci != ci2 || vb.numel() != co {
            return Err(Error::ShapeMismatch(format!(
                "conv2d channels: x {ci}, w {ci2}, bias {}",
                vb.numel()
            )));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::ShapeMismatch("conv2d kernel exceeds input".into()));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; co * oh * ow];
        let xd = vx.data();
        let wv = vw.data();
        for o in 0..co {
            let base = o * oh * ow;
            let bias = vb.data()[o];
            for v in &mut out[base..base + oh * ow] {
                *v = bias;
            }
            for c in 0..ci {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wgt = wv[((o * ci + c) * kh + ky) * kw + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        let (oy_lo, oy_hi) = conv_span(ky, pad, stride, h, oh);
                        let (ox_lo, ox_hi) = conv_span(kx, pad, stride, wd, ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let xrow = (c * h + iy) * wd + kx + ox_lo * stride - pad;
                            let orow = base + oy * ow;
                            if stride == 1 {
                                let xs = &xd[xrow..xrow + (ox_hi - ox_lo)];
                                let os = &mut out[orow + ox_lo..orow + ox_hi];
                                for (ov, xv) in os.iter_mut().zip(xs) {
                                    *ov += wgt * xv;
                                }
                            } else {
                                for (i, ox) in (ox_lo..ox_hi).enumerate() {
                                    out[orow + ox] += wgt * xd[xrow + i * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = NdArray::from_vec(&[co, oh, ow], out)?;
        let rg = self.needs(&[x.0, w.0, b.0]);
        Ok(self.push(
            out,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        if vx.shape().len() != 3 {
            return Err(Error::ShapeMismatch("upsample wants [c,h,w]".into()));
        }
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[(ch * oh + oy) * ow + ox] = vx.at3(ch, oy / factor, ox / factor);
                }
            }
        }
        let out = NdArray::from_vec(&[c, oh, ow], out)?;
        let rg = self.needs(&[x.0]);
        Ok(self.push(out, Op::UpsampleNearest { x: x.0, factor }, rg))
    }

    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        if vx.shape().len() != 3 {
            return Err(Error::ShapeMismatch("upsample wants [c,h,w]".into()));
        }
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![0.0; c * oh * ow];
        for oy in 0..oh {
            let (y0, y1, wy) = bilinear_coords(oy, factor, h);
            for ox in 0..ow {
                let (x0, x1, wx) = bilinear_coords(ox, factor, w);
                for ch in 0..c {
                    let v = (1.0 - wy) * (1.0 - wx) * vx.at3(ch, y0, x0)
                        + (1.0 - wy) * wx * vx.at3(ch, y0, x1)
                        + wy * (1.0 - wx) * vx.at3(ch, y1, x0)
                        + wy * wx * vx.at3(ch, y1, x1);
                    out[(ch * oh + oy) * ow + ox] = v;
                }
            }
        }
        let out = NdArray::from_vec(&[c, oh, ow], out)?;
        let rg = self.needs(&[x.0]);
        Ok(self.push(out, Op::UpsampleBilinear { x: x.0, factor }, rg))
    }

    /// Area-average downsample by an integer factor.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        if vx.shape().len() != 3 {
            return Err(Error::ShapeMismatch("avg_pool wants [c,h,w]".into()));
        }
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::ShapeMismatch(format!(
                "avg_pool factor {factor} does not divide {h}x{w}"
            )));
        }
        let (oh, ow) = (h / factor, w / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            s += vx.at3(ch, oy * factor + dy, ox * factor + dx);
                        }
                    }
                    out[(ch * oh + oy) * ow + ox] = s * norm;
                }
            }
        }
        let out = NdArray::from_vec(&[c, oh, ow], out)?;
        let rg = self.needs(&[x.0]);
        Ok(self.push(out, Op::AvgPool { x: x.0, factor }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_rows of nothing".into()));
        }
        let c = self.nodes[parts[0].0].value.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = &self.nodes[p.0].value;
            if !v.is_matrix() || v.cols() != c {
                return Err(Error::ShapeMismatch("concat_rows column mismatch".into()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = NdArray::from_vec(&[rows, c], data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.needs(&ids);
        Ok(self.push(out, Op::ConcatRows(ids), rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        if va.shape().len() != 3
            || vb.shape().len() != 3
            || va.shape()[1..] != vb.shape()[1..]
        {
            return Err(Error::ShapeMismatch("concat_channels spatial dims".into()));
        }
        let mut data = Vec::with_capacity(va.numel() + vb.numel());
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let shape = [va.shape()[0] + vb.shape()[0], va.shape()[1], va.shape()[2]];
        let out = NdArray::from_vec(&shape, data)?;
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(out, Op::ConcatChannels(a.0, b.0), rg))
    }

    /// `[c,h,w]` image -> `[h*w, c]` row-major token matrix.
    pub fn image_to_tokens(&mut self, x: Var) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        if vx.shape().len() != 3 {
            return Err(Error::ShapeMismatch("image_to_tokens wants [c,h,w]".into()));
        }
        let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let n = h * w;
        let mut out = vec![0.0; n * c];
        for ch in 0..c {
            for t in 0..n {
                out[t * c + ch] = vx.data()[ch * n + t];
            }
        }
        let out = NdArray::from_vec(&[n, c], out)?;
        let rg = self.needs(&[x.0]);
        Ok(self.push(out, Op::ImageToTokens(x.0), rg))
    }

    pub fn tokens_to_image(&mut self, x: Var, c: usize, h: usize, w: usize) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        if !vx.is_matrix() || vx.rows() != h * w || vx.cols() != c {
            return Err(Error::ShapeMismatch(format!(
                "tokens_to_image {:?} vs [{c},{h},{w}]",
                vx.shape()
            )));
        }
        let n = h * w;
        let mut out = vec![0.0; c * n];
        for ch in 0..c {
            for t in 0..n {
                out[ch * n + t] = vx.at2(t, ch);
            }
        }
        let out = NdArray::from_vec(&[c, h, w], out)?;
        let rg = self.needs(&[x.0]);
        Ok(self.push(out, Op::TokensToImage { x: x.0, c, h, w }, rg))
    }

    /// Gather rows by index (duplicates allowed); backward scatter-adds.
    pub fn select_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        if !vx.is_matrix() {
            return Err(Error::ShapeMismatch("select_rows wants 2-d".into()));
        }
        let (n, c) = (vx.rows(), vx.cols());
        if idx.iter().any(|&i| i >= n) {
            return Err(Error::InvalidArgument("select_rows index out of range".into()));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            out.extend_from_slice(&vx.data()[i * c..(i + 1) * c]);
        }
        let out = NdArray::from_vec(&[idx.len(), c], out)?;
        let rg = self.needs(&[x.0]);
        Ok(self.push(out, Op::SelectRows { x: x.0, idx }, rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let rg = self.needs(&[a.0]);
        self.push(NdArray::scalar(s), Op::SumAll(a.0), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s: f64 = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.needs(&[a.0]);
        self.push(NdArray::scalar(s), Op::MeanAll(a.0), rg)
    }

    /// Softmax cross-entropy over the hardest pixels of `[c,h,w]` logits.
    ///
    /// A pixel is kept when its true-class probability falls below
    /// `threshold`; if fewer than `min_kept_frac` of the valid pixels
    /// qualify, the hardest ones are added up to that floor (pixels tied
    /// with the cutoff probability are all kept). Pixels labeled 255 are
    /// ignored. Returns 0 when no valid pixels exist.
    pub fn ohem_ce(
        &mut self,
        logits: Var,
        labels: &[u32],
        threshold: f64,
        min_kept_frac: f64,
    ) -> Result<Var> {
        let vl = &self.nodes[logits.0].value;
        if vl.shape().len() != 3 {
            return Err(Error::ShapeMismatch("ohem_ce wants [c,h,w] logits".into()));
        }
        let (c, h, w) = (vl.shape()[0], vl.shape()[1], vl.shape()[2]);
        let n = h * w;
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "ohem_ce labels {} vs pixels {n}",
                labels.len()
            )));
        }
        for &l in labels {
            if l != 255 && l as usize >= c {
                return Err(Error::InvalidArgument(format!(
                    "label {l} out of range for {c} classes"
                )));
            }
        }
        // Per-pixel stabilized softmax.
        let mut probs = vec![0.0; c * n];
        let ld = vl.data();
        for p in 0..n {
            let mut mx = f64::NEG_INFINITY;
            for k in 0..c {
                mx = mx.max(ld[k * n + p]);
            }
            let mut sum = 0.0;
            for k in 0..c {
                let e = (ld[k * n + p] - mx).exp();
                probs[k * n + p] = e;
                sum += e;
            }
            for k in 0..c {
                probs[k * n + p] /= sum;
            }
        }
        let valid: Vec<usize> = (0..n).filter(|&p| labels[p] != 255).collect();
        let mut kept: Vec<usize> = Vec::new();
        if !valid.is_empty() {
            let true_prob =
                |p: usize| -> f64 { probs[(labels[p] as usize) * n + p] };
            kept = valid
                .iter()
                .copied()
                .filter(|&p| true_prob(p) < threshold)
                .collect();
            let floor = ((min_kept_frac * valid.len() as f64).ceil() as usize).max(1);
            if kept.len() < floor {
                let mut by_hardness = valid.clone();
                by_hardness.sort_by(|&a, &b| {
                    true_prob(a)
                        .partial_cmp(&true_prob(b))
                        .unwrap()
                        .then(a.cmp(&b))
                });
                let cutoff = true_prob(by_hardness[floor - 1]);
                kept = valid
                    .iter()
                    .copied()
                    .filter(|&p| true_prob(p) <= cutoff)
                    .collect();
            }
        }
        let mut loss = 0.0;
        for &p in &kept {
            let pr = probs[(labels[p] as usize) * n + p].max(1e-300);
            loss -= pr.ln();
        }
        if !kept.is_empty() {
            loss /= kept.len() as f64;
        }
        let rg = self.needs(&[logits.0]);
        Ok(self.push(
            NdArray::scalar(loss),
            Op::OhemCe {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
                kept,
            },
            rg,
        ))
    }

    /// Per-class mean of `[d,h,w]` feature pixels selected by an `h*w` label
    /// raster with values in `0..num_classes`. Returns `[num_classes, d]`
    /// with zero rows for absent classes, plus the per-class pixel counts.
    pub fn masked_class_mean(
        &mut self,
        feat: Var,
        labels: &[u32],
        num_classes: usize,
    ) -> Result<(Var, Vec<usize>)> {
        let vf = &self.nodes[feat.0].value;
        if vf.shape().len() != 3 {
            return Err(Error::ShapeMismatch("masked_class_mean wants [d,h,w]".into()));
        }
        let (d, h, w) = (vf.shape()[0], vf.shape()[1], vf.shape()[2]);
        let n = h * w;
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "masked_class_mean labels {} vs pixels {n}",
                labels.len()
            )));
        }
        let mut counts = vec![0usize; num_classes];
        for &l in labels {
            let t = l as usize;
            if t >= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "mask value {l} out of range for {num_classes} classes"
                )));
            }
            counts[t] += 1;
        }
        let mut out = vec![0.0; num_classes * d];
        let fd = vf.data();
        for p in 0..n {
            let t = labels[p] as usize;
            for ch in 0..d {
                out[t * d + ch] += fd[ch * n + p];
            }
        }
        for t in 0..num_classes {
            if counts[t] > 0 {
                let inv = 1.0 / counts[t] as f64;
                for ch in 0..d {
                    out[t * d + ch] *= inv;
                }
            }
        }
        let out = NdArray::from_vec(&[num_classes, d], out)?;
        let rg = self.needs(&[feat.0]);
        let var = self.push(
            out,
            Op::MaskedClassMean {
                feat: feat.0,
                labels: labels.to_vec(),
                counts: counts.clone(),
            },
            rg,
        );
        Ok((var, counts))
    }

    /// Differentiable scaled dot-product attention composed from primitives.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let d = self.value(q).cols();
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, 1.0 / (d as f64).sqrt());
        let weights = self.softmax_rows(scaled)?;
        self.matmul(weights, v)
    }

    /// Reverse pass from a scalar root. Gradients flow only through nodes
    /// whose `requires_grad` is set.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::InvalidArgument(
                "backward root must be scalar".into(),
            ));
        }
        let mut slots: Vec<Option<NdArray>> = vec![None; self.nodes.len()];
        slots[root.0] = Some(NdArray::scalar(1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad && !matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = match slots[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut slots);
            slots[i] = Some(g);
        }
        Ok(Grads { slots })
    }

    fn accumulate(&self, slots: &mut [Option<NdArray>], id: usize, delta: NdArray) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut slots[id] {
            Some(acc) => {
                for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &NdArray, slots: &mut [Option<NdArray>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(slots, *a, g.clone());
                self.accumulate(slots, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(slots, *a, g.clone());
                self.accumulate(slots, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                let da = NdArray::from_vec(
                    g.shape(),
                    g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect(),
                )
                .unwrap();
                let db = NdArray::from_vec(
                    g.shape(),
                    g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect(),
                )
                .unwrap();
                self.accumulate(slots, *a, da);
                self.accumulate(slots, *b, db);
            }
            Op::Scale(a, s) => {
                self.accumulate(slots, *a, g.map(|v| v * s));
            }
            Op::MatMul(a, b) => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                let da = matmul(g, &transpose(vb)).unwrap();
                let db = matmul(&transpose(va), g).unwrap();
                self.accumulate(slots, *a, da);
                self.accumulate(slots, *b, db);
            }
            Op::Transpose(a) => {
                self.accumulate(slots, *a, transpose(g));
            }
            Op::Relu(a) => {
                let va = &self.nodes[*a].value;
                let da = NdArray::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(va.data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                )
                .unwrap();
                self.accumulate(slots, *a, da);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let (m, n) = (y.rows(), y.cols());
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        da[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(slots, *a, NdArray::from_vec(&[m, n], da).unwrap());
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let vx = &self.nodes[*x].value;
                let vg = &self.nodes[*gamma].value;
                let (n, c) = (vx.rows(), vx.cols());
                let mut dx = vec![0.0; n * c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for r in 0..n {
                    let row = &vx.data()[r * c..(r + 1) * c];
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> =
                        gr.iter().zip(vg.data()).map(|(gv, gm)| gv * gm).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / c as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[r * c + j] =
                            (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat) * inv;
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                }
                self.accumulate(slots, *x, NdArray::from_vec(&[n, c], dx).unwrap());
                self.accumulate(slots, *gamma, NdArray::from_vec(&[c], dgamma).unwrap());
                self.accumulate(slots, *beta, NdArray::from_vec(&[c], dbeta).unwrap());
            }
            Op::AddRowBroadcast { x, bias } => {
                let (n, c) = (g.rows(), g.cols());
                let mut db = vec![0.0; c];
                for r in 0..n {
                    for j in 0..c {
                        db[j] += g.at2(r, j);
                    }
                }
                self.accumulate(slots, *x, g.clone());
                self.accumulate(slots, *bias, NdArray::from_vec(&[c], db).unwrap());
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let vx = &self.nodes[*x].value;
                let vw = &self.nodes[*w].value;
                let (ci, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let (co, _, kh, kw) = (
                    vw.shape()[0],
                    vw.shape()[1],
                    vw.shape()[2],
                    vw.shape()[3],
                );
                let (oh, ow) = (g.shape()[1], g.shape()[2]);
                let mut dx = vec![0.0; ci * h * wd];
                let mut dw = vec![0.0; vw.numel()];
                let mut db = vec![0.0; co];
                let gd = g.data();
                let xd = vx.data();
                let wv = vw.data();
                for o in 0..co {
                    let gbase = o * oh * ow;
                    db[o] += gd[gbase..gbase + oh * ow].iter().sum::<f64>();
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let widx = ((o * ci + c) * kh + ky) * kw + kx;
                                let wgt = wv[widx];
                                let mut wacc = 0.0;
                                let (oy_lo, oy_hi) = conv_span(ky, *pad, *stride, h, oh);
                                let (ox_lo, ox_hi) = conv_span(kx, *pad, *stride, wd, ow);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                for oy in oy_lo..oy_hi {
                                    let iy = oy * stride + ky - pad;
                                    let xrow =
                                        (c * h + iy) * wd + kx + ox_lo * stride - pad;
                                    let grow = gbase + oy * ow;
                                    if *stride == 1 {
                                        let n = ox_hi - ox_lo;
                                        let gs = &gd[grow + ox_lo..grow + ox_hi];
                                        let xs = &xd[xrow..xrow + n];
                                        let ds = &mut dx[xrow..xrow + n];
                                        for ((gv, xv), dv) in
                                            gs.iter().zip(xs).zip(ds.iter_mut())
                                        {
                                            wacc += gv * xv;
                                            *dv += gv * wgt;
                                        }
                                    } else {
                                        for (i, ox) in (ox_lo..ox_hi).enumerate() {
                                            let gv = gd[grow + ox];
                                            wacc += gv * xd[xrow + i * stride];
                                            dx[xrow + i * stride] += gv * wgt;
                                        }
                                    }
                                }
                                dw[widx] += wacc;
                            }
                        }
                    }
                }
                self.accumulate(slots, *x, NdArray::from_vec(&[ci, h, wd], dx).unwrap());
                self.accumulate(slots, *w, NdArray::from_vec(vw.shape(), dw).unwrap());
                self.accumulate(slots, *b, NdArray::from_vec(&[co], db).unwrap());
            }
            Op::UpsampleNearest { x, factor } => {
                let vx = &self.nodes[*x].value;
                let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let (oh, ow) = (h * factor, w * factor);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dx[(ch * h + oy / factor) * w + ox / factor] +=
                                g.data()[(ch * oh + oy) * ow + ox];
                        }
                    }
                }
                self.accumulate(slots, *x, NdArray::from_vec(&[c, h, w], dx).unwrap());
            }
            Op::UpsampleBilinear { x, factor } => {
                let vx = &self.nodes[*x].value;
                let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let (oh, ow) = (h * factor, w * factor);
                let mut dx = vec![0.0; c * h * w];
                for oy in 0..oh {
                    let (y0, y1, wy) = bilinear_coords(oy, *factor, h);
                    for ox in 0..ow {
                        let (x0, x1, wx) = bilinear_coords(ox, *factor, w);
                        for ch in 0..c {
                            let gv = g.data()[(ch * oh + oy) * ow + ox];
                            dx[(ch * h + y0) * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                            dx[(ch * h + y0) * w + x1] += gv * (1.0 - wy) * wx;
                            dx[(ch * h + y1) * w + x0] += gv * wy * (1.0 - wx);
                            dx[(ch * h + y1) * w + x1] += gv * wy * wx;
                        }
                    }
                }
                self.accumulate(slots, *x, NdArray::from_vec(&[c, h, w], dx).unwrap());
            }
            Op::AvgPool { x, factor } => {
                let vx = &self.nodes[*x].value;
                let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let (oh, ow) = (h / factor, w / factor);
                let norm = 1.0 / (factor * factor) as f64;
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g.data()[(ch * oh + oy) * ow + ox] * norm;
                            for dy in 0..*factor {
                                for dxp in 0..*factor {
                                    dx[(ch * h + oy * factor + dy) * w + ox * factor + dxp] +=
                                        gv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(slots, *x, NdArray::from_vec(&[c, h, w], dx).unwrap());
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.nodes[p].value.rows();
                    let slice = g.data()[offset * c..(offset + rows) * c].to_vec();
                    offset += rows;
                    self.accumulate(
                        slots,
                        p,
                        NdArray::from_vec(&[rows, c], slice).unwrap(),
                    );
                }
            }
            Op::ConcatChannels(a, b) => {
                let ca = self.nodes[*a].value.shape()[0];
                let (h, w) = (g.shape()[1], g.shape()[2]);
                let split = ca * h * w;
                let da = NdArray::from_vec(&[ca, h, w], g.data()[..split].to_vec()).unwrap();
                let cb = self.nodes[*b].value.shape()[0];
                let db = NdArray::from_vec(&[cb, h, w], g.data()[split..].to_vec()).unwrap();
                self.accumulate(slots, *a, da);
                self.accumulate(slots, *b, db);
            }
            Op::ImageToTokens(x) => {
                let vx = &self.nodes[*x].value;
                let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let n = h * w;
                let mut dx = vec![0.0; c * n];
                for ch in 0..c {
                    for t in 0..n {
                        dx[ch * n + t] = g.at2(t, ch);
                    }
                }
                self.accumulate(slots, *x, NdArray::from_vec(&[c, h, w], dx).unwrap());
            }
            Op::TokensToImage { x, c, h, w } => {
                let n = h * w;
                let mut dx = vec![0.0; n * c];
                for ch in 0..*c {
                    for t in 0..n {
                        dx[t * c + ch] = g.data()[ch * n + t];
                    }
                }
                self.accumulate(slots, *x, NdArray::from_vec(&[n, *c], dx).unwrap());
            }
            Op::SelectRows { x, idx } => {
                let vx = &self.nodes[*x].value;
                let (n, c) = (vx.rows(), vx.cols());
                let mut dx = vec![0.0; n * c];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[src * c + j] += g.at2(r, j);
                    }
                }
                self.accumulate(slots, *x, NdArray::from_vec(&[n, c], dx).unwrap());
            }
            Op::SumAll(a) => {
                let va = &self.nodes[*a].value;
                self.accumulate(slots, *a, NdArray::filled(va.shape(), g.item()));
            }
            Op::MeanAll(a) => {
                let va = &self.nodes[*a].value;
                self.accumulate(
                    slots,
                    *a,
                    NdArray::filled(va.shape(), g.item() / va.numel() as f64),
                );
            }
            Op::OhemCe {
                logits,
                labels,
                probs,
                kept,
            } => {
                let vl = &self.nodes[*logits].value;
                let (c, h, w) = (vl.shape()[0], vl.shape()[1], vl.shape()[2]);
                let n = h * w;
                let mut dl = vec![0.0; c * n];
                if !kept.is_empty() {
                    let scale = g.item() / kept.len() as f64;
                    for &p in kept {
                        let t = labels[p] as usize;
                        for k in 0..c {
                            let mut d = probs[k * n + p];
                            if k == t {
                                d -= 1.0;
                            }
                            dl[k * n + p] += scale * d;
                        }
                    }
                }
                self.accumulate(slots, *logits, NdArray::from_vec(&[c, h, w], dl).unwrap());
            }
            Op::MaskedClassMean {
                feat,
                labels,
                counts,
            } => {
                let vf = &self.nodes[*feat].value;
                let (d, h, w) = (vf.shape()[0], vf.shape()[1], vf.shape()[2]);
                let n = h * w;
                let mut df = vec![0.0; d * n];
                for p in 0..n {
                    let t = labels[p] as usize;
                    if counts[t] == 0 {
                        continue;
                    }
                    let inv = 1.0 / counts[t] as f64;
                    for ch in 0..d {
                        df[ch * n + p] += g.at2(t, ch) * inv;
                    }
                }
                self.accumulate(slots, *feat, NdArray::from_vec(&[d, h, w], df).unwrap());
            }
        }
    }
}

/// Output index range `[lo, hi)` whose input index `o*stride + k - pad`
/// stays inside `[0, in_size)`.
#[inline]
fn conv_span(k: usize, pad: usize, stride: usize, in_size: usize, out_size: usize) -> (usize, usize) {
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let hi = if in_size + pad > k {
        (in_size + pad - k).div_ceil(stride).min(out_size)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn bilinear_coords(o: usize, factor: usize, size: usize) -> (usize, usize, f64) {
    let src = (o as f64 + 0.5) / factor as f64 - 0.5;
    if src <= 0.0 {
        return (0, 0, 0.0);
    }
    let max = (size - 1) as f64;
    if src >= max {
        return (size - 1, size - 1, 0.0);
    }
    let y0 = src.floor() as usize;
    let y1 = (y0 + 1).min(size - 1);
    (y0, y1, src - y0 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_through_matmul_sum() {
        let mut g = Graph::new();
        let a = g.leaf(
            NdArray::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            true,
        );
        let b = g.leaf(
            NdArray::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            true,
        );
        let c = g.matmul(a, b).unwrap();
        let s = g.sum_all(c);
        let grads = g.backward(s).unwrap();
        // d(sum(A·I))/dA = ones.
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
        // d/dB = Aᵀ·ones = column sums of A broadcast.
        assert_eq!(grads.get(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let a = g.leaf(
            NdArray::from_vec(&[2, 3], vec![1.0, -2.0, 0.3, 100.0, 100.0, 100.0]).unwrap(),
            false,
        );
        let s = g.softmax_rows(a).unwrap();
        let v = g.value(s);
        for r in 0..2 {
            let sum: f64 = (0..3).map(|j| v.at2(r, j)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn select_rows_backward_scatter_adds() {
        let mut g = Graph::new();
        let a = g.leaf(
            NdArray::from_vec(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap(),
            true,
        );
        let sel = g.select_rows(a, vec![0, 0, 2]).unwrap();
        let s = g.sum_all(sel);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[2.0, 0.0, 1.0]);
    }

    #[test]
    fn avg_pool_matches_block_means() {
        let mut g = Graph::new();
        let x = g.leaf(
            NdArray::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            false,
        );
        let p = g.avg_pool(x, 2).unwrap();
        assert_eq!(g.value(p).data(), &[2.5]);
    }

    #[test]
    fn tokens_round_trip() {
        let mut g = Graph::new();
        let x = g.leaf(
            NdArray::from_vec(&[2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap(),
            false,
        );
        let t = g.image_to_tokens(x).unwrap();
        let back = g.tokens_to_image(t, 2, 2, 2).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut g = Graph::new();
        let x = g.leaf(
            NdArray::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            false,
        );
        let w = g.leaf(NdArray::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap(), false);
        let b = g.leaf(NdArray::zeros(&[1]), false);
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
