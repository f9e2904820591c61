//! The shared transformer block: QKV projection, scaled dot-product
//! attention over a set, and a residual feed-forward output.
//!
//! Inputs are `[B, S, d_in]` batches of sets; attention runs within each set.

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// Weights of one transformer block, generic over the handle type so the same
/// layout can hold tensors, parameter ids, or graph variables.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransParams<H> {
    /// `d_in × d`
    pub w_q: H,
    pub w_k: H,
    pub w_v: H,
    /// `d × 2d`, `2d`
    pub ffn_w1: H,
    pub ffn_b1: H,
    /// `2d × d_in`, `d_in`
    pub ffn_w2: H,
    pub ffn_b2: H,
}

impl<H> TransParams<H> {
    pub fn map<U>(&self, mut f: impl FnMut(&H) -> U) -> TransParams<U> {
        TransParams {
            w_q: f(&self.w_q),
            w_k: f(&self.w_k),
            w_v: f(&self.w_v),
            ffn_w1: f(&self.ffn_w1),
            ffn_b1: f(&self.ffn_b1),
            ffn_w2: f(&self.ffn_w2),
            ffn_b2: f(&self.ffn_b2),
        }
    }

    pub fn named(&self) -> [(&'static str, &H); 7] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("ffn_w1", &self.ffn_w1),
            ("ffn_b1", &self.ffn_b1),
            ("ffn_w2", &self.ffn_w2),
            ("ffn_b2", &self.ffn_b2),
        ]
    }
}

/// Shapes of the block's tensors for input width `d_in` and key width `d`.
pub fn trans_shapes(d_in: usize, d: usize) -> TransParams<Vec<usize>> {
    TransParams {
        w_q: vec![d_in, d],
        w_k: vec![d_in, d],
        w_v: vec![d_in, d],
        ffn_w1: vec![d, 2 * d],
        ffn_b1: vec![2 * d],
        ffn_w2: vec![2 * d, d_in],
        ffn_b2: vec![d_in],
    }
}

impl TransParams<Tensor> {
    pub fn zeros(d_in: usize, d: usize) -> Self {
        trans_shapes(d_in, d).map(|s| Tensor::zeros(s))
    }

    pub fn bind(&self, g: &mut Graph) -> TransParams<Var> {
        self.map(|t| g.param(t.clone()))
    }

    pub fn bind_constant(&self, g: &mut Graph) -> TransParams<Var> {
        self.map(|t| g.constant(t.clone()))
    }

    /// Width of the key/value projections.
    pub fn key_dim(&self) -> usize {
        self.w_k.shape()[1]
    }
}

/// `Q = F·W_q`, `K = F·W_k`, `V = F·W_v`.
pub fn project_qkv(g: &mut Graph, f: Var, p: &TransParams<Var>) -> Result<(Var, Var, Var)> {
    Ok((g.matmul(f, p.w_q)?, g.matmul(f, p.w_k)?, g.matmul(f, p.w_v)?))
}

/// `softmax(Q·Kᵀ/√d)·V` within each set of `[B, S, d]` inputs.
pub fn attend(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let d = *g.shape(k).last().unwrap();
    let logits = g.batch_matmul(q, k, true)?;
    let scaled = g.scale(logits, 1.0 / (d as f64).sqrt());
    let weights = g.softmax(scaled, 2)?;
    g.batch_matmul(weights, v, false)
}

/// Two-layer perceptron with a ReLU hidden layer.
pub fn ffn(g: &mut Graph, y: Var, p: &TransParams<Var>) -> Result<Var> {
    let h = g.linear(y, p.ffn_w1, p.ffn_b1)?;
    let h = g.relu(h);
    g.linear(h, p.ffn_w2, p.ffn_b2)
}

/// `O = F + FFN(attend(project_qkv(F)))` for `F` of shape `[B, S, d_in]`.
pub fn trans_block(g: &mut Graph, f: Var, p: &TransParams<Var>) -> Result<Var> {
    let (q, k, v) = project_qkv(g, f, p)?;
    let y = attend(g, q, k, v)?;
    let update = ffn(g, y, p)?;
    g.add(f, update)
}

/// Value-level convenience: one set `F: S×d_in` through the block.
pub fn trans_block_eval(f: &Tensor, params: &TransParams<Tensor>) -> Result<Tensor> {
    let mut g = Graph::new();
    let (s, d) = (f.rows(), f.cols());
    let fv = g.constant(f.clone().reshape(&[1, s, d])?);
    let p = params.bind_constant(&mut g);
    let out = trans_block(&mut g, fv, &p)?;
    g.take_value(out).reshape(&[s, d])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[Vec<f64>]) -> Tensor {
        let t = Tensor::from_rows(rows).unwrap();
        let (s, d) = (t.rows(), t.cols());
        t.reshape(&[1, s, d]).unwrap()
    }

    #[test]
    fn singleton_set_returns_value() {
        let mut g = Graph::new();
        let v = g.constant(set(&[vec![0.3, -1.2]]));
        let q = g.constant(set(&[vec![5.0, 1.0]]));
        let k = g.constant(set(&[vec![-2.0, 4.0]]));
        let y = attend(&mut g, q, k, v).unwrap();
        assert_eq!(g.value(y).data(), &[0.3, -1.2]);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut g = Graph::new();
        let q = g.constant(set(&[vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.0, 9.0]]));
        let k = g.constant(set(&vec![vec![0.7, 0.1]; 3]));
        let v = g.constant(set(&[vec![1.0, 0.0], vec![2.0, 3.0], vec![3.0, 6.0]]));
        let y = attend(&mut g, q, k, v).unwrap();
        for row in g.value(y).data().chunks(2) {
            assert!((row[0] - 2.0).abs() < 1e-14 && (row[1] - 3.0).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_ffn_is_pure_residual() {
        let mut p = TransParams::zeros(3, 3);
        p.w_q = Tensor::identity(3);
        p.w_v = Tensor::identity(3);
        let f = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]]).unwrap();
        assert_eq!(trans_block_eval(&f, &p).unwrap(), f);
    }

    #[test]
    fn identity_projections() {
        let mut g = Graph::new();
        let f = g.constant(set(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let eye = g.constant(Tensor::identity(2));
        let p = TransParams {
            w_q: eye,
            w_k: eye,
            w_v: eye,
            ffn_w1: eye,
            ffn_b1: eye,
            ffn_w2: eye,
            ffn_b2: eye,
        };
        let (q, k, v) = project_qkv(&mut g, f, &p).unwrap();
        for x in [q, k, v] {
            assert_eq!(g.value(x).data(), g.value(f).data());
        }
    }
}
