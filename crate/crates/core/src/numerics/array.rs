use crate::error::{Error, Result};

/// Dense row-major n-dimensional array of `f64` values.
///
/// The universal carrier for rasters, features, logits and weights in this
/// crate. Values produced by graph operations are immutable; mutation is
/// reserved for construction and optimizer updates.
#[derive(Clone, Debug, PartialEq)]
pub struct NdArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl NdArray {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        NdArray {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        NdArray {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(NdArray {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: f64) -> Self {
        NdArray {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// First element; convenient for `[1]`-shaped scalars.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> NdArray {
        NdArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Error if any element is NaN or infinite.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn same_shape(&self, other: &NdArray) -> bool {
        self.shape == other.shape
    }
}

/// Plain dense matrix product `[m x k] . [k x n] -> [m x n]`.
pub fn matmul(a: &NdArray, b: &NdArray) -> Result<NdArray> {
    if !a.is_matrix() || !b.is_matrix() {
        return Err(Error::ShapeMismatch("matmul wants 2-d operands".into()));
    }
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner dims {k} vs {k2}"
        )));
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    NdArray::from_vec(&[m, n], out)
}

pub fn transpose(a: &NdArray) -> NdArray {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.at2(i, j);
        }
    }
    NdArray::from_vec(&[n, m], out).expect("transpose shape")
}

/// Row-wise softmax with max-subtraction stabilization.
pub fn softmax_rows(a: &NdArray) -> NdArray {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &a.data()[i * n..(i + 1) * n];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..n {
            let e = (row[j] - mx).exp();
            out[i * n + j] = e;
            sum += e;
        }
        for j in 0..n {
            out[i * n + j] /= sum;
        }
    }
    NdArray::from_vec(&[m, n], out).expect("softmax shape")
}

/// Scaled dot-product attention: `softmax(Q Kᵀ / sqrt(d)) V`.
///
/// Pure function over plain arrays; the differentiable path composes the
/// same computation from graph primitives.
pub fn scaled_dot_attention(q: &NdArray, k: &NdArray, v: &NdArray) -> Result<NdArray> {
    if !q.is_matrix() || !k.is_matrix() || !v.is_matrix() {
        return Err(Error::ShapeMismatch("attention wants 2-d operands".into()));
    }
    if q.cols() != k.cols() {
        return Err(Error::ShapeMismatch(format!(
            "query dim {} vs key dim {}",
            q.cols(),
            k.cols()
        )));
    }
    if k.rows() == 0 || k.rows() != v.rows() {
        return Err(Error::ShapeMismatch(format!(
            "key count {} vs value count {}",
            k.rows(),
            v.rows()
        )));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let scores = matmul(q, &transpose(k))?.map(|s| s * scale);
    let weights = softmax_rows(&scores);
    matmul(&weights, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_len() {
        assert!(NdArray::from_vec(&[2, 2], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn matmul_known_product() {
        let a = NdArray::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = NdArray::from_vec(&[2, 1], vec![5.0, 6.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn attention_single_key_returns_value_row() {
        // n_k = 1: softmax over a single key is 1 for every query.
        let q = NdArray::from_vec(&[3, 2], vec![1.0, -2.0, 0.5, 0.0, 9.0, 3.0]).unwrap();
        let k = NdArray::from_vec(&[1, 2], vec![0.3, 0.7]).unwrap();
        let v = NdArray::from_vec(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert!((out.at2(i, j) - v.at2(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let q = NdArray::from_vec(&[2, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let k = NdArray::from_vec(&[3, 2], vec![0.2, 0.4, 0.2, 0.4, 0.2, 0.4]).unwrap();
        let v = NdArray::from_vec(&[3, 1], vec![3.0, 6.0, 9.0]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        for i in 0..2 {
            assert!((out.at2(i, 0) - 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_hand_softmax_oracle() {
        // Q=[[1,0]], K=[[1,0],[0,1]], V=[[1],[0]], d=2.
        // scores = [1/sqrt(2), 0]; w0 = e^s0/(e^s0+1); output = w0*1 + w1*0.
        let q = NdArray::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let k = NdArray::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = NdArray::from_vec(&[2, 1], vec![1.0, 0.0]).unwrap();
        let s0 = 1.0 / 2.0_f64.sqrt();
        let w0 = s0.exp() / (s0.exp() + 1.0);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        assert!((out.item() - w0).abs() < 1e-12);
    }

    #[test]
    fn attention_rejects_empty_keys_shape() {
        let q = NdArray::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let k = NdArray::from_vec(&[1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let v = NdArray::from_vec(&[1, 1], vec![1.0]).unwrap();
        assert!(scaled_dot_attention(&q, &k, &v).is_err());
    }
}
