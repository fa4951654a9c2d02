//! Layers composed from graph primitives. Each layer owns [`ParamId`]s into a
//! [`ParamStore`] and reads the bound leaves at forward time.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::float::Float;
use crate::graph::{ConvSpec, Graph, Var};
use crate::init::xavier_uniform;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            xavier_uniform(vec![in_features, out_features], in_features, out_features, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_features]))?;
        Ok(Self {
            weight,
            bias: Some(bias),
            in_features,
            out_features,
        })
    }

    /// `x [m, in] -> [m, out]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        match self.bias {
            Some(b) => g.add_row(y, p[b]),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: ParamId,
    bias: ParamId,
    spec: ConvSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let k2 = kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            xavier_uniform(
                vec![out_channels, in_channels, kernel, kernel],
                in_channels * k2,
                out_channels * k2,
                rng,
            ),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_channels]))?;
        Ok(Self {
            weight,
            bias,
            spec: ConvSpec { stride, padding },
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p[self.weight], Some(p[self.bias]), self.spec)
    }
}

/// Layer normalization over the last axis with learned gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
    eps: f64,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(vec![dim], T::one()))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![dim]))?;
        Ok(Self {
            gamma,
            beta,
            eps: 1e-5,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let axis = g.shape(x).len().saturating_sub(1);
        let y = g.layer_norm(x, axis, T::lit(self.eps))?;
        let y = g.mul_row(y, p[self.gamma])?;
        g.add_row(y, p[self.beta])
    }
}

/// Output of an attention call: the attended values and, per head, the
/// `[Lq, Lk]` attention weights (rows sum to 1).
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention over already-projected `q [Lq,d]`,
/// `k [Lk,d]`, `v [Lk,d]`, split into `num_heads` column groups and
/// concatenated back to `[Lq, d]`.
pub fn attend<T: Float>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    num_heads: usize,
) -> Result<AttentionOutput> {
    let d = *g.shape(q).last().unwrap_or(&0);
    if num_heads == 0 || d % num_heads != 0 {
        return Err(invalid(
            "attention",
            format!("width {d} is not divisible by {num_heads} heads"),
        ));
    }
    for other in [k, v] {
        if g.shape(other).len() != 2 || g.shape(other)[1] != d {
            return Err(crate::TensorError::ShapeMismatch {
                op: "attention",
                lhs: g.shape(q).to_vec(),
                rhs: g.shape(other).to_vec(),
            });
        }
    }
    if g.shape(k)[0] != g.shape(v)[0] {
        return Err(crate::TensorError::ShapeMismatch {
            op: "attention keys/values",
            lhs: g.shape(k).to_vec(),
            rhs: g.shape(v).to_vec(),
        });
    }
    let head_dim = d / num_heads;
    let scale = T::lit(1.0 / (head_dim as f64).sqrt());
    let mut heads = Vec::with_capacity(num_heads);
    let mut weights = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = g.slice_cols(q, h * head_dim, head_dim)?;
        let kh = g.slice_cols(k, h * head_dim, head_dim)?;
        let vh = g.slice_cols(v, h * head_dim, head_dim)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores, 1)?;
        heads.push(g.matmul(attn, vh)?);
        weights.push(attn);
    }
    let output = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    Ok(AttentionOutput { output, weights })
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q_proj: Linear,
    k_proj: Linear,
    v_proj: Linear,
    out_proj: Linear,
    pub num_heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        num_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_heads == 0 || dim % num_heads != 0 {
            return Err(invalid(
                "attention",
                format!("width {dim} is not divisible by {num_heads} heads"),
            ));
        }
        Ok(Self {
            q_proj: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k_proj: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v_proj: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            out_proj: Linear::new(store, &format!("{name}.out"), dim, dim, rng)?,
            num_heads,
        })
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        queries: Var,
        keys: Var,
        values: Var,
    ) -> Result<AttentionOutput> {
        let q = self.q_proj.forward(g, p, queries)?;
        let k = self.k_proj.forward(g, p, keys)?;
        let v = self.v_proj.forward(g, p, values)?;
        let att = attend(g, q, k, v, self.num_heads)?;
        Ok(AttentionOutput {
            output: self.out_proj.forward(g, p, att.output)?,
            weights: att.weights,
        })
    }
}

/// Two-layer position-wise feed-forward block with GELU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
    dropout: f64,
}

impl FeedForward {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng)?,
            dropout,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(g, p, x)?;
        let h = g.gelu(h);
        let h = g.dropout(h, self.dropout)?;
        self.down.forward(g, p, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(g: &mut Graph<f64>, rows: usize, cols: usize, v: &[f64]) -> Var {
        g.constant(Tensor::from_f64(vec![rows, cols], v).unwrap())
    }

    #[test]
    fn single_key_returns_value_row() {
        let mut g = Graph::<f64>::inference();
        let v_row = [0.3, -1.2, 4.0, 0.5];
        let k = mat(&mut g, 1, 4, &[1.0, 2.0, 3.0, 4.0]);
        let v = mat(&mut g, 1, 4, &v_row);
        for q_row in [[0.0; 4], [9.0, -3.0, 1.0, 0.0]] {
            let q = mat(&mut g, 1, 4, &q_row);
            let out = attend(&mut g, q, k, v, 1).unwrap();
            for (a, b) in g.value(out.output).data().iter().zip(&v_row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aligned_query_selects_matching_value() {
        // scores = (s, 0)/sqrt(2) with s = 40: weight on key 1 is
        // 1 / (1 + exp(-40/sqrt 2)) ~ 1 - 5.3e-13.
        let mut g = Graph::<f64>::inference();
        let q = mat(&mut g, 1, 2, &[40.0, 0.0]);
        let k = mat(&mut g, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let v = mat(&mut g, 2, 2, &[5.0, -5.0, 1.0, 1.0]);
        let out = attend(&mut g, q, k, v, 1).unwrap();
        let w1 = 1.0 / (1.0 + (-40.0 / 2f64.sqrt()).exp());
        let expected = [5.0 * w1 + (1.0 - w1), -5.0 * w1 + (1.0 - w1)];
        for (a, b) in g.value(out.output).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((g.value(out.output).data()[0] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let mha = MultiHeadAttention::new(&mut store, "mha", 8, 2, &mut rng).unwrap();
        let mut g = Graph::<f64>::inference();
        let p = g.bind(&store);
        let q = g.constant(crate::init::uniform(vec![3, 8], 1.0, &mut rng));
        let kv = g.constant(crate::init::uniform(vec![5, 8], 1.0, &mut rng));
        let out = mha.forward(&mut g, &p, q, kv, kv).unwrap();
        assert_eq!(g.shape(out.output), &[3, 8]);
        assert_eq!(out.weights.len(), 2);
        for w in out.weights {
            for row in g.value(w).data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn indivisible_width_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        assert!(MultiHeadAttention::new(&mut store, "mha", 10, 4, &mut rng).is_err());
        let mut g = Graph::<f64>::inference();
        let x = mat(&mut g, 1, 6, &[0.0; 6]);
        assert!(attend(&mut g, x, x, x, 4).is_err());
    }
}
