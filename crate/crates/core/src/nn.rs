//! Parameter registry and the transformer building blocks.
//!
//! Parameters live in a flat [`ParamStore`]; layers keep only ids into it.
//! Registration order is fixed by construction order, which makes ids stable
//! across runs with the same config and lets checkpoints address parameters
//! positionally. Encoder blocks are pre-norm residual, so a block with all
//! parameters at zero is the identity map.

use crate::graph::{Graph, Var};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Input projections, temporal resampling maps, and prepended tokens of
    /// the per-modality embedding front end.
    EmbedProjection,
    /// The self-attention encoder inside the embedding front end.
    EmbedEncoder,
    /// Completeness score estimation: its token, encoder, and head.
    Integrity,
    SharedEncoder,
    PrivateEncoder,
    Decoder,
    Discriminator,
    Fusion,
    Prediction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub path: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, path: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        self.params.push(Param {
            path: path.into(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    /// Insert the parameter into a graph as a differentiable leaf.
    pub fn var(&self, g: &mut Graph, id: ParamId) -> Var {
        g.param_leaf(self.params[id.0].value.clone(), id.0)
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Weight initializer: scaled normal draws from a dedicated stream.
pub struct Init<'r> {
    pub rng: &'r mut CounterRng,
    pub std: f64,
}

impl Init<'_> {
    pub fn normal(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let std = self.std;
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| self.rng.next_normal() * std).collect(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl LinearLayer {
    pub fn init(
        store: &mut ParamStore,
        init: &mut Init,
        group: ParamGroup,
        path: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(format!("{path}.w"), group, init.normal(&[d_in, d_out]));
        let b = bias.then(|| store.add(format!("{path}.b"), group, Tensor::zeros(&[d_out])));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = store.var(g, self.w);
        let b = self.b.map(|id| store.var(g, id));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormLayer {
    pub fn init(store: &mut ParamStore, group: ParamGroup, path: &str, d: usize) -> Self {
        let gamma = store.add(format!("{path}.gamma"), group, Tensor::full(&[d], 1.0));
        let beta = store.add(format!("{path}.beta"), group, Tensor::zeros(&[d]));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = store.var(g, self.gamma);
        let beta = store.var(g, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: LinearLayer,
    pub wk: LinearLayer,
    pub wv: LinearLayer,
    pub wo: LinearLayer,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn init(
        store: &mut ParamStore,
        init: &mut Init,
        group: ParamGroup,
        path: &str,
        d: usize,
        heads: usize,
    ) -> Self {
        assert!(
            heads > 0 && d % heads == 0,
            "width {d} not divisible into {heads} heads"
        );
        Self {
            wq: LinearLayer::init(store, init, group, &format!("{path}.wq"), d, d, true),
            wk: LinearLayer::init(store, init, group, &format!("{path}.wk"), d, d, true),
            wv: LinearLayer::init(store, init, group, &format!("{path}.wv"), d, d, true),
            wo: LinearLayer::init(store, init, group, &format!("{path}.wo"), d, d, true),
            heads,
        }
    }

    /// Attention with queries from `qx` and keys/values from `kv`; pass the
    /// same var for both to get self-attention.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, qx: Var, kv: Var) -> Var {
        let dk = g.value(qx).last_dim() / self.heads;
        let q = self.wq.forward(g, store, qx);
        let k = self.wk.forward(g, store, kv);
        let v = self.wv.forward(g, store, kv);
        let qh = g.split_heads(q, self.heads);
        let kh = g.split_heads(k, self.heads);
        let vh = g.split_heads(v, self.heads);
        let kt = g.transpose_last(kh);
        let scores = g.bmm(qh, kt);
        let scaled = g.scale(scores, 1.0 / (dk as f64).sqrt());
        let attn = g.softmax_last(scaled);
        let ctx = g.bmm(attn, vh);
        let merged = g.merge_heads(ctx, self.heads);
        self.wo.forward(g, store, merged)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: LinearLayer,
    pub w2: LinearLayer,
}

impl FeedForward {
    pub fn init(
        store: &mut ParamStore,
        init: &mut Init,
        group: ParamGroup,
        path: &str,
        d: usize,
        hidden: usize,
    ) -> Self {
        Self {
            w1: LinearLayer::init(store, init, group, &format!("{path}.w1"), d, hidden, true),
            w2: LinearLayer::init(store, init, group, &format!("{path}.w2"), hidden, d, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.w1.forward(g, store, x);
        let a = g.relu(h);
        self.w2.forward(g, store, a)
    }
}

/// Pre-norm residual block: attention then feed-forward, each behind a
/// layer norm, with dropout on the sublayer outputs.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1: LayerNormLayer,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNormLayer,
    pub ff: FeedForward,
    pub dropout: f64,
}

impl EncoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        init: &mut Init,
        group: ParamGroup,
        path: &str,
        d: usize,
        heads: usize,
        ff_hidden: usize,
        dropout: f64,
    ) -> Self {
        Self {
            ln1: LayerNormLayer::init(store, group, &format!("{path}.ln1"), d),
            attn: MultiHeadAttention::init(store, init, group, &format!("{path}.attn"), d, heads),
            ln2: LayerNormLayer::init(store, group, &format!("{path}.ln2"), d),
            ff: FeedForward::init(store, init, group, &format!("{path}.ff"), d, ff_hidden),
            dropout,
        }
    }

    pub fn forward_self(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let normed = self.ln1.forward(g, store, x);
        let attn = self.attn.forward(g, store, normed, normed);
        let attn = g.dropout(attn, self.dropout);
        let x = g.add(x, attn);
        let normed = self.ln2.forward(g, store, x);
        let ff = self.ff.forward(g, store, normed);
        let ff = g.dropout(ff, self.dropout);
        g.add(x, ff)
    }

    /// Query stream `x` attends over a fixed `kv` stream.
    pub fn forward_cross(&self, g: &mut Graph, store: &ParamStore, x: Var, kv: Var) -> Var {
        let normed = self.ln1.forward(g, store, x);
        let attn = self.attn.forward(g, store, normed, kv);
        let attn = g.dropout(attn, self.dropout);
        let x = g.add(x, attn);
        let normed = self.ln2.forward(g, store, x);
        let ff = self.ff.forward(g, store, normed);
        let ff = g.dropout(ff, self.dropout);
        g.add(x, ff)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderStack {
    pub layers: Vec<EncoderLayer>,
}

impl EncoderStack {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        init: &mut Init,
        group: ParamGroup,
        path: &str,
        depth: usize,
        d: usize,
        heads: usize,
        ff_hidden: usize,
        dropout: f64,
    ) -> Self {
        let layers = (0..depth)
            .map(|i| {
                EncoderLayer::init(
                    store,
                    init,
                    group,
                    &format!("{path}.layer{i}"),
                    d,
                    heads,
                    ff_hidden,
                    dropout,
                )
            })
            .collect();
        Self { layers }
    }

    pub fn forward_self(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Var {
        for layer in &self.layers {
            x = layer.forward_self(g, store, x);
        }
        x
    }

    pub fn forward_cross(&self, g: &mut Graph, store: &ParamStore, mut x: Var, kv: Var) -> Var {
        for layer in &self.layers {
            x = layer.forward_cross(g, store, x, kv);
        }
        x
    }
}
