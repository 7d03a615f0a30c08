use crate::error::{Error, Result};
use crate::numerics::array::{matmul, NdArray};

/// Low-rank adapter weights for one attention block's query/value
/// projections. One instance is shared across all modalities.
#[derive(Clone, Debug)]
pub struct LoraWeights {
    pub w_a_q: NdArray, // d_q x r
    pub w_b_q: NdArray, // r x d_q
    pub w_a_v: NdArray, // d_v x r
    pub w_b_v: NdArray, // r x d_v
    pub rank: usize,
}

impl LoraWeights {
    pub fn new(
        w_a_q: NdArray,
        w_b_q: NdArray,
        w_a_v: NdArray,
        w_b_v: NdArray,
    ) -> Result<Self> {
        let r = w_a_q.cols();
        let d_q = w_a_q.rows();
        let d_v = w_a_v.rows();
        if w_b_q.rows() != r || w_b_q.cols() != d_q || w_a_v.cols() != r || w_b_v.rows() != r
            || w_b_v.cols() != d_v
        {
            return Err(Error::ShapeMismatch("inconsistent LoRA factor shapes".into()));
        }
        check_rank_bound(r, d_q)?;
        check_rank_bound(r, d_v)?;
        Ok(LoraWeights {
            w_a_q,
            w_b_q,
            w_a_v,
            w_b_v,
            rank: r,
        })
    }
}

/// The low-rank bound `r <= d/4` standing in for "r much smaller than d".
pub fn check_rank_bound(rank: usize, d: usize) -> Result<()> {
    if rank == 0 || rank > d / 4 {
        return Err(Error::InvalidArgument(format!(
            "LoRA rank {rank} exceeds bound d/4 = {} (d = {d})",
            d / 4
        )));
    }
    Ok(())
}

/// Adapt base query/value projection matrices: `Q' = Q + W_a^Q W_b^Q`,
/// `V' = V + W_a^V W_b^V`.
pub fn lora_apply(q: &NdArray, v: &NdArray, lw: &LoraWeights) -> Result<(NdArray, NdArray)> {
    let dq = matmul(&lw.w_a_q, &lw.w_b_q)?;
    let dv = matmul(&lw.w_a_v, &lw.w_b_v)?;
    if !dq.same_shape(q) || !dv.same_shape(v) {
        return Err(Error::ShapeMismatch(format!(
            "LoRA delta {:?}/{:?} vs projections {:?}/{:?}",
            dq.shape(),
            dv.shape(),
            q.shape(),
            v.shape()
        )));
    }
    let add = |a: &NdArray, b: &NdArray| {
        NdArray::from_vec(
            a.shape(),
            a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
        )
        .expect("same shape")
    };
    Ok((add(q, &dq), add(v, &dv)))
}
