//! Small post-LayerNorm transformer used by both tiny backends.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::params::{uniform, xavier, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Shape of a tiny transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TinyDims {
    pub hidden_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub max_len: usize,
}

impl Default for TinyDims {
    fn default() -> Self {
        TinyDims {
            hidden_dim: 32,
            heads: 2,
            layers: 2,
            ff_dim: 64,
            max_len: 128,
        }
    }
}

impl TinyDims {
    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.hidden_dim == 0 || self.heads == 0 || self.layers == 0 || self.ff_dim == 0 {
            return Err("tiny dims must be positive".into());
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(format!(
                "hidden_dim {} not divisible by {} heads",
                self.hidden_dim, self.heads
            ));
        }
        if self.max_len < 8 {
            return Err("max_len must be at least 8".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

impl Dense {
    fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        Dense {
            weight: store.add(format!("{name}.weight"), xavier(inputs, outputs, rng)),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, outputs))),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn register<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Norm {
            gain: store.add(format!("{name}.gain"), Array2::ones((1, width))),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, width))),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Debug, Clone)]
struct Block {
    query: Dense,
    key: Dense,
    value: Dense,
    output: Dense,
    attn_norm: Norm,
    ff_in: Dense,
    ff_out: Dense,
    ff_norm: Norm,
}

/// Token + position embeddings followed by `layers` self-attention blocks.
#[derive(Debug, Clone)]
pub struct Transformer {
    dims: TinyDims,
    causal: bool,
    token_embedding: ParamId,
    position_embedding: ParamId,
    embed_norm: Norm,
    blocks: Vec<Block>,
}

impl Transformer {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        vocab_size: usize,
        dims: TinyDims,
        causal: bool,
        rng: &mut R,
    ) -> Self {
        let d = dims.hidden_dim;
        let token_embedding = store.add(format!("{prefix}.tok_emb"), uniform(vocab_size, d, 0.1, rng));
        let position_embedding =
            store.add(format!("{prefix}.pos_emb"), uniform(dims.max_len, d, 0.1, rng));
        let embed_norm = Norm::register(store, &format!("{prefix}.emb_norm"), d);
        let blocks = (0..dims.layers)
            .map(|l| {
                let n = |s: &str| format!("{prefix}.layer{l}.{s}");
                Block {
                    query: Dense::register(store, &n("q"), d, d, rng),
                    key: Dense::register(store, &n("k"), d, d, rng),
                    value: Dense::register(store, &n("v"), d, d, rng),
                    output: Dense::register(store, &n("o"), d, d, rng),
                    attn_norm: Norm::register(store, &n("attn_norm"), d),
                    ff_in: Dense::register(store, &n("ff_in"), d, dims.ff_dim, rng),
                    ff_out: Dense::register(store, &n("ff_out"), dims.ff_dim, d, rng),
                    ff_norm: Norm::register(store, &n("ff_norm"), d),
                }
            })
            .collect();
        Transformer {
            dims,
            causal,
            token_embedding,
            position_embedding,
            embed_norm,
            blocks,
        }
    }

    pub fn dims(&self) -> TinyDims {
        self.dims
    }

    /// Contextual states, one row per id. `ids.len()` must not exceed
    /// `max_len`; callers truncate beforehand.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, ids: &[usize]) -> Var {
        let len = ids.len();
        assert!(len > 0 && len <= self.dims.max_len, "sequence length {len}");
        let positions: Vec<usize> = (0..len).collect();
        let tok_table = g.param(store, self.token_embedding);
        let pos_table = g.param(store, self.position_embedding);
        let tok = g.gather(tok_table, ids);
        let pos = g.gather(pos_table, &positions);
        let sum = g.add(tok, pos);
        let mut x = self.embed_norm.forward(g, store, sum);

        let mask = self.causal.then(|| {
            Array2::from_shape_fn((len, len), |(i, j)| {
                if j > i {
                    T::of(-1e9)
                } else {
                    T::zero()
                }
            })
        });
        let head_dim = self.dims.head_dim();
        let scale = T::one() / T::of(head_dim as f64).sqrt();

        for block in &self.blocks {
            let q = block.query.forward(g, store, x);
            let k = block.key.forward(g, store, x);
            let v = block.value.forward(g, store, x);
            let mut heads = Vec::with_capacity(self.dims.heads);
            for h in 0..self.dims.heads {
                let qh = g.slice_cols(q, h * head_dim, head_dim);
                let kh = g.slice_cols(k, h * head_dim, head_dim);
                let vh = g.slice_cols(v, h * head_dim, head_dim);
                let scores = g.matmul_nt(qh, kh);
                let mut scores = g.scale(scores, scale);
                if let Some(mask) = &mask {
                    scores = g.add_const(scores, mask);
                }
                let attn = g.softmax_rows(scores);
                heads.push(g.matmul(attn, vh));
            }
            let merged = if heads.len() == 1 {
                heads[0]
            } else {
                g.concat_cols(&heads)
            };
            let attended = block.output.forward(g, store, merged);
            let res = g.add(x, attended);
            x = block.attn_norm.forward(g, store, res);

            let hidden = block.ff_in.forward(g, store, x);
            let hidden = g.relu(hidden);
            let out = block.ff_out.forward(g, store, hidden);
            let res = g.add(x, out);
            x = block.ff_norm.forward(g, store, res);
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn causal_prefix_states_ignore_future_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let net = Transformer::register(&mut store, "dec", 10, TinyDims::default(), true, &mut rng);
        let mut g = Graph::new();
        let a = net.forward(&mut g, &store, &[1, 2, 3, 4]);
        let mut g2 = Graph::new();
        let b = net.forward(&mut g2, &store, &[1, 2, 3, 9]);
        let (va, vb) = (g.value(a), g2.value(b));
        for r in 0..3 {
            for c in 0..32 {
                assert!((va[[r, c]] - vb[[r, c]]).abs() < 1e-12);
            }
        }
        assert!((va[[3, 0]] - vb[[3, 0]]).abs() > 1e-9);
    }

    #[test]
    fn encoder_gradients_reach_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let dims = TinyDims {
            hidden_dim: 8,
            heads: 2,
            layers: 1,
            ff_dim: 8,
            max_len: 8,
        };
        let net = Transformer::register(&mut store, "enc", 5, dims, false, &mut rng);
        let mut g = Graph::new();
        let h = net.forward(&mut g, &store, &[0, 3, 4]);
        let loss = g.cross_entropy(h, &[Some(1), Some(2), None]);
        let grads = g.backward(loss);
        let emb = grads.param(net.token_embedding).unwrap();
        assert!(emb.row(3).iter().any(|v| v.abs() > 0.0));
        assert!(emb.row(1).iter().all(|v| *v == 0.0));
    }
}
