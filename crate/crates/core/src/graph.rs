//! Eager tape-based reverse-mode differentiation.
//!
//! Every operation computes its value immediately and records enough to run
//! the backward pass. Nodes are appended in construction order, so walking
//! the tape in reverse is a valid topological order. Gradient accumulation is
//! single-threaded over nodes; the kernels inside one node parallelize over
//! disjoint output rows, which keeps the whole pass deterministic.

use crate::rng::CounterRng;
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, softmax_rows_into, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf {
        param: Option<usize>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// x [.., in] times w [in, out] plus optional bias [out].
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    /// w [p, q] applied on the left of every batch entry of x [N, q, d].
    MatLeft {
        w: Var,
        x: Var,
    },
    /// Batched matmul [B, p, q] @ [B, q, r].
    Bmm(Var, Var),
    TransposeLast(Var),
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        heads: usize,
    },
    SoftmaxLast(Var),
    Relu(Var),
    Softplus(Var),
    Square(Var),
    Sqrt(Var),
    Clamp01(Var),
    Dropout {
        x: Var,
        mask: Tensor,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    /// tok [1, d] prepended to every batch entry of x [N, T, d].
    ConcatTime {
        tok: Var,
        x: Var,
    },
    /// tok [T, d] repeated across a batch of size n.
    BroadcastTime {
        tok: Var,
        n: usize,
    },
    SliceTime {
        x: Var,
        idx: usize,
    },
    MeanTime(Var),
    SumTimeKeep(Var),
    MeanTimeKeep(Var),
    SubBcastTime {
        x: Var,
        m: Var,
    },
    DivBcastTime {
        x: Var,
        s: Var,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatLast(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    /// Each sample block of x scaled by the matching entry of s [N].
    MulPerSample {
        x: Var,
        s: Var,
    },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
    dropout_rng: Option<CounterRng>,
}

impl Graph {
    /// Graph for inference and for gradient-stopped target passes: dropout
    /// layers pass through unchanged.
    pub fn eval() -> Self {
        Self {
            nodes: Vec::new(),
            dropout_rng: None,
        }
    }

    /// Graph for a training step; `rng` drives the dropout masks in
    /// construction order.
    pub fn train(rng: CounterRng) -> Self {
        Self {
            nodes: Vec::new(),
            dropout_rng: Some(rng),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    pub fn param_leaf(&mut self, value: Tensor, param_id: usize) -> Var {
        self.push(
            value,
            Op::Leaf {
                param: Some(param_id),
            },
        )
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).shape,
            self.value(b).shape,
            "add shape mismatch"
        );
        let data = self.zip(a, b, |x, y| x + y);
        self.push(data, Op::Add(a, b))
    }

    pub fn add_many(&mut self, vars: &[Var]) -> Var {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).shape,
            self.value(b).shape,
            "sub shape mismatch"
        );
        let data = self.zip(a, b, |x, y| x - y);
        self.push(data, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).shape,
            self.value(b).shape,
            "mul shape mismatch"
        );
        let data = self.zip(a, b, |x, y| x * y);
        self.push(data, Op::Mul(a, b))
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape.clone(), data)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddScalar(a))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        assert_eq!(tw.rank(), 2, "linear weight must be 2-d");
        let (d_in, d_out) = (tw.shape[0], tw.shape[1]);
        assert_eq!(tx.last_dim(), d_in, "linear input width mismatch");
        let rows = tx.rows();
        let mut out = vec![0.0; rows * d_out];
        matmul_into(&mut out, &tx.data, &tw.data, rows, d_in, d_out);
        if let Some(bias) = b {
            let tb = self.value(bias);
            assert_eq!(tb.shape, vec![d_out], "linear bias width mismatch");
            for row in out.chunks_mut(d_out) {
                for (slot, &bv) in row.iter_mut().zip(&tb.data) {
                    *slot += bv;
                }
            }
        }
        let mut shape = self.value(x).shape.clone();
        *shape.last_mut().unwrap() = d_out;
        self.push(Tensor::new(shape, out), Op::Linear { x, w, b })
    }

    pub fn mat_left(&mut self, w: Var, x: Var) -> Var {
        let (tw, tx) = (self.value(w), self.value(x));
        assert_eq!(tw.rank(), 2, "mat_left weight must be 2-d");
        assert_eq!(tx.rank(), 3, "mat_left input must be 3-d");
        let (p, q) = (tw.shape[0], tw.shape[1]);
        let (n, t, d) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        assert_eq!(q, t, "mat_left time axis mismatch");
        let mut out = vec![0.0; n * p * d];
        for i in 0..n {
            let x_i = &tx.data[i * t * d..(i + 1) * t * d];
            matmul_into(&mut out[i * p * d..(i + 1) * p * d], &tw.data, x_i, p, q, d);
        }
        self.push(Tensor::new(vec![n, p, d], out), Op::MatLeft { w, x })
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.rank(), 3, "bmm lhs must be 3-d");
        assert_eq!(tb.rank(), 3, "bmm rhs must be 3-d");
        let (bs, p, q) = (ta.shape[0], ta.shape[1], ta.shape[2]);
        let (bs2, q2, r) = (tb.shape[0], tb.shape[1], tb.shape[2]);
        assert_eq!(bs, bs2, "bmm batch mismatch");
        assert_eq!(q, q2, "bmm inner dim mismatch");
        let mut out = vec![0.0; bs * p * r];
        crate::par::for_each_chunk(&mut out, p * r, |i, block| {
            let a_i = &ta.data[i * p * q..(i + 1) * p * q];
            let b_i = &tb.data[i * q * r..(i + 1) * q * r];
            crate::tensor::seq_matmul_into(block, a_i, b_i, p, q, r);
        });
        self.push(Tensor::new(vec![bs, p, r], out), Op::Bmm(a, b))
    }

    pub fn transpose_last(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let rank = ta.rank();
        assert!(rank >= 2, "transpose_last needs rank >= 2");
        let (p, q) = (ta.shape[rank - 2], ta.shape[rank - 1]);
        let batch = ta.numel() / (p * q);
        let mut out = vec![0.0; ta.numel()];
        for i in 0..batch {
            let src = &ta.data[i * p * q..(i + 1) * p * q];
            let dst = &mut out[i * p * q..(i + 1) * p * q];
            for r in 0..p {
                for c in 0..q {
                    dst[c * p + r] = src[r * q + c];
                }
            }
        }
        let mut shape = ta.shape.clone();
        shape.swap(rank - 2, rank - 1);
        self.push(Tensor::new(shape, out), Op::TransposeLast(a))
    }

    pub fn split_heads(&mut self, x: Var, heads: usize) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.rank(), 3, "split_heads input must be [N, T, d]");
        let (n, t, d) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        assert_eq!(
            d % heads,
            0,
            "model width {d} not divisible by {heads} heads"
        );
        let dk = d / heads;
        let mut out = vec![0.0; tx.numel()];
        for i in 0..n {
            for h in 0..heads {
                for s in 0..t {
                    let src = (i * t + s) * d + h * dk;
                    let dst = ((i * heads + h) * t + s) * dk;
                    out[dst..dst + dk].copy_from_slice(&tx.data[src..src + dk]);
                }
            }
        }
        self.push(
            Tensor::new(vec![n * heads, t, dk], out),
            Op::SplitHeads { x, heads },
        )
    }

    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.rank(), 3, "merge_heads input must be [N*H, T, dk]");
        let (nh, t, dk) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        assert_eq!(nh % heads, 0);
        let n = nh / heads;
        let d = dk * heads;
        let mut out = vec![0.0; tx.numel()];
        for i in 0..n {
            for h in 0..heads {
                for s in 0..t {
                    let src = ((i * heads + h) * t + s) * dk;
                    let dst = (i * t + s) * d + h * dk;
                    out[dst..dst + dk].copy_from_slice(&tx.data[src..src + dk]);
                }
            }
        }
        self.push(Tensor::new(vec![n, t, d], out), Op::MergeHeads { x, heads })
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let n = tx.last_dim();
        let mut out = vec![0.0; tx.numel()];
        softmax_rows_into(&mut out, &tx.data, n);
        self.push(Tensor::new(tx.shape.clone(), out), Op::SoftmaxLast(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| {
            if v > 0.0 {
                v + (-v).exp().ln_1p()
            } else {
                v.exp().ln_1p()
            }
        });
        self.push(value, Op::Softplus(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.push(value, Op::Square(x))
    }

    /// Elementwise square root; callers guard the domain with an epsilon.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::sqrt);
        self.push(value, Op::Sqrt(x))
    }

    pub fn clamp01(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.clamp(0.0, 1.0));
        self.push(value, Op::Clamp01(x))
    }

    /// Inverted dropout with keep scaling. Identity in eval graphs and when
    /// p == 0.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if p <= 0.0 {
            return x;
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        let scale = 1.0 / (1.0 - p);
        let n = self.nodes[x.0].value.numel();
        let mask_data: Vec<f64> = (0..n)
            .map(|_| if rng.next_f64() < p { 0.0 } else { scale })
            .collect();
        let mask = Tensor::new(self.value(x).shape.clone(), mask_data);
        let value = Tensor::new(
            mask.shape.clone(),
            self.value(x)
                .data
                .iter()
                .zip(&mask.data)
                .map(|(&v, &m)| v * m)
                .collect(),
        );
        self.push(value, Op::Dropout { x, mask })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let tx = self.value(x);
        let d = tx.last_dim();
        assert_eq!(self.value(gamma).shape, vec![d]);
        assert_eq!(self.value(beta).shape, vec![d]);
        let (tg, tb) = (self.value(gamma), self.value(beta));
        let mut out = vec![0.0; tx.numel()];
        crate::par::for_each_chunk(&mut out, d, |i, row| {
            let src = &tx.data[i * d..(i + 1) * d];
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, slot) in row.iter_mut().enumerate() {
                *slot = (src[j] - mean) * inv * tg.data[j] + tb.data[j];
            }
        });
        self.push(
            Tensor::new(tx.shape.clone(), out),
            Op::LayerNorm { x, gamma, beta },
        )
    }

    pub fn concat_time(&mut self, tok: Var, x: Var) -> Var {
        let (tt, tx) = (self.value(tok), self.value(x));
        assert_eq!(tx.rank(), 3);
        let (n, t, d) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        assert_eq!(tt.shape, vec![1, d], "prepended token must be [1, d]");
        let mut out = vec![0.0; n * (t + 1) * d];
        for i in 0..n {
            let dst = i * (t + 1) * d;
            out[dst..dst + d].copy_from_slice(&tt.data);
            out[dst + d..dst + (t + 1) * d].copy_from_slice(&tx.data[i * t * d..(i + 1) * t * d]);
        }
        self.push(
            Tensor::new(vec![n, t + 1, d], out),
            Op::ConcatTime { tok, x },
        )
    }

    pub fn broadcast_time(&mut self, tok: Var, n: usize) -> Var {
        let tt = self.value(tok);
        assert_eq!(tt.rank(), 2, "broadcast_time source must be [T, d]");
        let (t, d) = (tt.shape[0], tt.shape[1]);
        let mut out = vec![0.0; n * t * d];
        for i in 0..n {
            out[i * t * d..(i + 1) * t * d].copy_from_slice(&tt.data);
        }
        self.push(
            Tensor::new(vec![n, t, d], out),
            Op::BroadcastTime { tok, n },
        )
    }

    pub fn slice_time(&mut self, x: Var, idx: usize) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.rank(), 3);
        let (n, t, d) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        assert!(idx < t);
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let src = (i * t + idx) * d;
            out[i * d..(i + 1) * d].copy_from_slice(&tx.data[src..src + d]);
        }
        self.push(Tensor::new(vec![n, d], out), Op::SliceTime { x, idx })
    }

    pub fn mean_time(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.rank(), 3);
        let (n, t, d) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for s in 0..t {
                let src = (i * t + s) * d;
                for j in 0..d {
                    out[i * d + j] += tx.data[src + j];
                }
            }
        }
        let inv = 1.0 / t as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        self.push(Tensor::new(vec![n, d], out), Op::MeanTime(x))
    }

    pub fn sum_time_keep(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.rank(), 3);
        let (n, t, d) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for s in 0..t {
                let src = (i * t + s) * d;
                for j in 0..d {
                    out[i * d + j] += tx.data[src + j];
                }
            }
        }
        self.push(Tensor::new(vec![n, 1, d], out), Op::SumTimeKeep(x))
    }

    pub fn mean_time_keep(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.rank(), 3);
        let (n, t, d) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for s in 0..t {
                let src = (i * t + s) * d;
                for j in 0..d {
                    out[i * d + j] += tx.data[src + j];
                }
            }
        }
        let inv = 1.0 / t as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        self.push(Tensor::new(vec![n, 1, d], out), Op::MeanTimeKeep(x))
    }

    pub fn sub_bcast_time(&mut self, x: Var, m: Var) -> Var {
        let (tx, tm) = (self.value(x), self.value(m));
        let (n, t, d) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        assert_eq!(tm.shape, vec![n, 1, d]);
        let mut out = vec![0.0; tx.numel()];
        for i in 0..n {
            for s in 0..t {
                let base = (i * t + s) * d;
                for j in 0..d {
                    out[base + j] = tx.data[base + j] - tm.data[i * d + j];
                }
            }
        }
        self.push(
            Tensor::new(tx.shape.clone(), out),
            Op::SubBcastTime { x, m },
        )
    }

    pub fn div_bcast_time(&mut self, x: Var, s: Var) -> Var {
        let (tx, ts) = (self.value(x), self.value(s));
        let (n, t, d) = (tx.shape[0], tx.shape[1], tx.shape[2]);
        assert_eq!(ts.shape, vec![n, 1, d]);
        let mut out = vec![0.0; tx.numel()];
        for i in 0..n {
            for step in 0..t {
                let base = (i * t + step) * d;
                for j in 0..d {
                    out[base + j] = tx.data[base + j] / ts.data[i * d + j];
                }
            }
        }
        self.push(
            Tensor::new(tx.shape.clone(), out),
            Op::DivBcastTime { x, s },
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.rank(), 2);
        let (n, d) = (tx.shape[0], tx.shape[1]);
        let mut out = vec![0.0; idx.len() * d];
        for (i, &src) in idx.iter().enumerate() {
            assert!(src < n);
            out[i * d..(i + 1) * d].copy_from_slice(&tx.data[src * d..(src + 1) * d]);
        }
        self.push(
            Tensor::new(vec![idx.len(), d], out),
            Op::GatherRows { x, idx },
        )
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.rank(), 2);
        assert_eq!(tb.rank(), 2);
        assert_eq!(ta.shape[0], tb.shape[0]);
        let (n, da, db) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; n * (da + db)];
        for i in 0..n {
            out[i * (da + db)..i * (da + db) + da].copy_from_slice(&ta.data[i * da..(i + 1) * da]);
            out[i * (da + db) + da..(i + 1) * (da + db)]
                .copy_from_slice(&tb.data[i * db..(i + 1) * db]);
        }
        self.push(Tensor::new(vec![n, da + db], out), Op::ConcatLast(a, b))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s: f64 = tx.data.iter().sum::<f64>() / tx.numel() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(x))
    }

    pub fn mul_per_sample(&mut self, x: Var, s: Var) -> Var {
        let (tx, ts) = (self.value(x), self.value(s));
        let n = tx.shape[0];
        assert_eq!(ts.shape, vec![n], "per-sample scale must be [N]");
        let block = tx.numel() / n;
        let mut out = vec![0.0; tx.numel()];
        for i in 0..n {
            let c = ts.data[i];
            for j in 0..block {
                out[i * block + j] = tx.data[i * block + j] * c;
            }
        }
        self.push(
            Tensor::new(tx.shape.clone(), out),
            Op::MulPerSample { x, s },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let value = self.value(x).reshaped(shape);
        self.push(value, Op::Reshape(x))
    }

    /// Sum of squared entries as a scalar node.
    pub fn frob_sq(&mut self, x: Var) -> Var {
        let sq = self.square(x);
        self.sum_all(sq)
    }

    /// Gradient of a specific node from a [`Graph::backward`] result.
    pub fn grad<'a>(&self, grads: &'a [Option<Tensor>], v: Var) -> Option<&'a Tensor> {
        grads[v.0].as_ref()
    }

    /// Gradients of `loss` with respect to every node, indexed by node id.
    pub fn backward(&self, loss: Var) -> Vec<Option<Tensor>> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else {
                continue;
            };
            self.backward_node(id, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        grads
    }

    /// Collapse node gradients onto parameter ids (a parameter inserted more
    /// than once accumulates across its leaves).
    pub fn param_grads(&self, grads: &[Option<Tensor>], n_params: usize) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = (0..n_params).map(|_| None).collect();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(p) } = node.op {
                if let Some(g) = &grads[id] {
                    match &mut out[p] {
                        Some(acc) => {
                            for (slot, &v) in acc.data.iter_mut().zip(&g.data) {
                                *slot += v;
                            }
                        }
                        slot => *slot = Some(g.clone()),
                    }
                }
            }
        }
        out
    }

    fn backward_node(&self, id: usize, gy: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let node = &self.nodes[id];
        let accum =
            |grads: &mut Vec<Option<Tensor>>, v: Var, shape: &[usize], f: &dyn Fn(&mut [f64])| {
                let slot = &mut grads[v.0];
                if slot.is_none() {
                    *slot = Some(Tensor::zeros(shape));
                }
                f(&mut slot.as_mut().unwrap().data);
            };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                for &v in &[*a, *b] {
                    accum(grads, v, &self.value(v).shape, &|g| {
                        for (slot, &d) in g.iter_mut().zip(&gy.data) {
                            *slot += d;
                        }
                    });
                }
            }
            Op::Sub(a, b) => {
                accum(grads, *a, &self.value(*a).shape, &|g| {
                    for (slot, &d) in g.iter_mut().zip(&gy.data) {
                        *slot += d;
                    }
                });
                accum(grads, *b, &self.value(*b).shape, &|g| {
                    for (slot, &d) in g.iter_mut().zip(&gy.data) {
                        *slot -= d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                accum(grads, *a, &ta.shape, &|g| {
                    for i in 0..g.len() {
                        g[i] += gy.data[i] * tb.data[i];
                    }
                });
                accum(grads, *b, &tb.shape, &|g| {
                    for i in 0..g.len() {
                        g[i] += gy.data[i] * ta.data[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                accum(grads, *a, &self.value(*a).shape, &|g| {
                    for (slot, &d) in g.iter_mut().zip(&gy.data) {
                        *slot += c * d;
                    }
                });
            }
            Op::AddScalar(a) => {
                accum(grads, *a, &self.value(*a).shape, &|g| {
                    for (slot, &d) in g.iter_mut().zip(&gy.data) {
                        *slot += d;
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (d_in, d_out) = (tw.shape[0], tw.shape[1]);
                let rows = tx.rows();
                accum(grads, *x, &tx.shape, &|g| {
                    let mut dx = vec![0.0; rows * d_in];
                    matmul_nt_into(&mut dx, &gy.data, &tw.data, rows, d_out, d_in);
                    for (slot, &d) in g.iter_mut().zip(&dx) {
                        *slot += d;
                    }
                });
                accum(grads, *w, &tw.shape, &|g| {
                    let mut dw = vec![0.0; d_in * d_out];
                    matmul_tn_into(&mut dw, &tx.data, &gy.data, rows, d_in, d_out);
                    for (slot, &d) in g.iter_mut().zip(&dw) {
                        *slot += d;
                    }
                });
                if let Some(bias) = b {
                    accum(grads, *bias, &[d_out], &|g| {
                        for row in gy.data.chunks(d_out) {
                            for (slot, &d) in g.iter_mut().zip(row) {
                                *slot += d;
                            }
                        }
                    });
                }
            }
            Op::MatLeft { w, x } => {
                let (tw, tx) = (self.value(*w), self.value(*x));
                let (p, q) = (tw.shape[0], tw.shape[1]);
                let (n, _, d) = (tx.shape[0], tx.shape[1], tx.shape[2]);
                accum(grads, *w, &tw.shape, &|g| {
                    let mut dw_i = vec![0.0; p * q];
                    for i in 0..n {
                        let gy_i = &gy.data[i * p * d..(i + 1) * p * d];
                        let x_i = &tx.data[i * q * d..(i + 1) * q * d];
                        matmul_nt_into(&mut dw_i, gy_i, x_i, p, d, q);
                        for (slot, &v) in g.iter_mut().zip(&dw_i) {
                            *slot += v;
                        }
                    }
                });
                accum(grads, *x, &tx.shape, &|g| {
                    for i in 0..n {
                        let gy_i = &gy.data[i * p * d..(i + 1) * p * d];
                        let mut dx_i = vec![0.0; q * d];
                        matmul_tn_into(&mut dx_i, &tw.data, gy_i, p, q, d);
                        for (slot, &v) in g[i * q * d..(i + 1) * q * d].iter_mut().zip(&dx_i) {
                            *slot += v;
                        }
                    }
                });
            }
            Op::Bmm(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, p, q) = (ta.shape[0], ta.shape[1], ta.shape[2]);
                let r = tb.shape[2];
                accum(grads, *a, &ta.shape, &|g| {
                    for i in 0..bs {
                        let gy_i = &gy.data[i * p * r..(i + 1) * p * r];
                        let b_i = &tb.data[i * q * r..(i + 1) * q * r];
                        let mut da = vec![0.0; p * q];
                        matmul_nt_into(&mut da, gy_i, b_i, p, r, q);
                        for (slot, &v) in g[i * p * q..(i + 1) * p * q].iter_mut().zip(&da) {
                            *slot += v;
                        }
                    }
                });
                accum(grads, *b, &tb.shape, &|g| {
                    for i in 0..bs {
                        let a_i = &ta.data[i * p * q..(i + 1) * p * q];
                        let gy_i = &gy.data[i * p * r..(i + 1) * p * r];
                        let mut db = vec![0.0; q * r];
                        matmul_tn_into(&mut db, a_i, gy_i, p, q, r);
                        for (slot, &v) in g[i * q * r..(i + 1) * q * r].iter_mut().zip(&db) {
                            *slot += v;
                        }
                    }
                });
            }
            Op::TransposeLast(a) => {
                let ta = self.value(*a);
                let rank = ta.rank();
                let (p, q) = (ta.shape[rank - 2], ta.shape[rank - 1]);
                let batch = ta.numel() / (p * q);
                accum(grads, *a, &ta.shape, &|g| {
                    for i in 0..batch {
                        let gy_i = &gy.data[i * p * q..(i + 1) * p * q];
                        let g_i = &mut g[i * p * q..(i + 1) * p * q];
                        for r0 in 0..q {
                            for c0 in 0..p {
                                g_i[c0 * q + r0] += gy_i[r0 * p + c0];
                            }
                        }
                    }
                });
            }
            Op::SplitHeads { x, heads } => {
                let tx = self.value(*x);
                let (n, t, d) = (tx.shape[0], tx.shape[1], tx.shape[2]);
                let dk = d / heads;
                let heads = *heads;
                accum(grads, *x, &tx.shape, &|g| {
                    for i in 0..n {
                        for h in 0..heads {
                            for s in 0..t {
                                let src = ((i * heads + h) * t + s) * dk;
                                let dst = (i * t + s) * d + h * dk;
                                for c in 0..dk {
                                    g[dst + c] += gy.data[src + c];
                                }
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { x, heads } => {
                let tx = self.value(*x);
                let (nh, t, dk) = (tx.shape[0], tx.shape[1], tx.shape[2]);
                let heads = *heads;
                let n = nh / heads;
                let d = dk * heads;
                accum(grads, *x, &tx.shape, &|g| {
                    for i in 0..n {
                        for h in 0..heads {
                            for s in 0..t {
                                let dst = ((i * heads + h) * t + s) * dk;
                                let src = (i * t + s) * d + h * dk;
                                for c in 0..dk {
                                    g[dst + c] += gy.data[src + c];
                                }
                            }
                        }
                    }
                });
            }
            Op::SoftmaxLast(a) => {
                let y = &node.value;
                let n = y.last_dim();
                accum(grads, *a, &y.shape, &|g| {
                    for (row_idx, row) in y.data.chunks(n).enumerate() {
                        let gy_row = &gy.data[row_idx * n..(row_idx + 1) * n];
                        let dot: f64 = gy_row.iter().zip(row).map(|(&a, &b)| a * b).sum();
                        let g_row = &mut g[row_idx * n..(row_idx + 1) * n];
                        for j in 0..n {
                            g_row[j] += row[j] * (gy_row[j] - dot);
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                accum(grads, *a, &ta.shape, &|g| {
                    for i in 0..g.len() {
                        if ta.data[i] > 0.0 {
                            g[i] += gy.data[i];
                        }
                    }
                });
            }
            Op::Softplus(a) => {
                let ta = self.value(*a);
                accum(grads, *a, &ta.shape, &|g| {
                    for i in 0..g.len() {
                        let s = 1.0 / (1.0 + (-ta.data[i]).exp());
                        g[i] += gy.data[i] * s;
                    }
                });
            }
            Op::Square(a) => {
                let ta = self.value(*a);
                accum(grads, *a, &ta.shape, &|g| {
                    for i in 0..g.len() {
                        g[i] += 2.0 * ta.data[i] * gy.data[i];
                    }
                });
            }
            Op::Sqrt(a) => {
                let y = &node.value;
                accum(grads, *a, &y.shape, &|g| {
                    for i in 0..g.len() {
                        g[i] += gy.data[i] / (2.0 * y.data[i]);
                    }
                });
            }
            Op::Clamp01(a) => {
                let ta = self.value(*a);
                accum(grads, *a, &ta.shape, &|g| {
                    for i in 0..g.len() {
                        if (0.0..=1.0).contains(&ta.data[i]) {
                            g[i] += gy.data[i];
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                accum(grads, *x, &self.value(*x).shape, &|g| {
                    for i in 0..g.len() {
                        g[i] += gy.data[i] * mask.data[i];
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (tx, tg) = (self.value(*x), self.value(*gamma));
                let d = tx.last_dim();
                let rows = tx.rows();
                accum(grads, *beta, &[d], &|g| {
                    for row in gy.data.chunks(d) {
                        for (slot, &v) in g.iter_mut().zip(row) {
                            *slot += v;
                        }
                    }
                });
                let row_stats = |i: usize| {
                    let src = &tx.data[i * d..(i + 1) * d];
                    let mean = src.iter().sum::<f64>() / d as f64;
                    let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
                };
                accum(grads, *gamma, &[d], &|g| {
                    for i in 0..rows {
                        let (mean, inv) = row_stats(i);
                        let src = &tx.data[i * d..(i + 1) * d];
                        let gy_row = &gy.data[i * d..(i + 1) * d];
                        for j in 0..d {
                            g[j] += gy_row[j] * (src[j] - mean) * inv;
                        }
                    }
                });
                accum(grads, *x, &tx.shape, &|g| {
                    for i in 0..rows {
                        let (mean, inv) = row_stats(i);
                        let src = &tx.data[i * d..(i + 1) * d];
                        let gy_row = &gy.data[i * d..(i + 1) * d];
                        let mut sum_g = 0.0;
                        let mut sum_gx = 0.0;
                        for j in 0..d {
                            let xh = (src[j] - mean) * inv;
                            let gj = gy_row[j] * tg.data[j];
                            sum_g += gj;
                            sum_gx += gj * xh;
                        }
                        let inv_d = 1.0 / d as f64;
                        for j in 0..d {
                            let xh = (src[j] - mean) * inv;
                            let gj = gy_row[j] * tg.data[j];
                            g[i * d + j] += (gj - sum_g * inv_d - xh * sum_gx * inv_d) * inv;
                        }
                    }
                });
            }
            Op::ConcatTime { tok, x } => {
                let tx = self.value(*x);
                let (n, t, d) = (tx.shape[0], tx.shape[1], tx.shape[2]);
                accum(grads, *tok, &[1, d], &|g| {
                    for i in 0..n {
                        let src = i * (t + 1) * d;
                        for j in 0..d {
                            g[j] += gy.data[src + j];
                        }
                    }
                });
                accum(grads, *x, &tx.shape, &|g| {
                    for i in 0..n {
                        let src = i * (t + 1) * d + d;
                        let dst = i * t * d;
                        for j in 0..t * d {
                            g[dst + j] += gy.data[src + j];
                        }
                    }
                });
            }
            Op::BroadcastTime { tok, n } => {
                let tt = self.value(*tok);
                let block = tt.numel();
                let n = *n;
                accum(grads, *tok, &tt.shape, &|g| {
                    for i in 0..n {
                        for j in 0..block {
                            g[j] += gy.data[i * block + j];
                        }
                    }
                });
            }
            Op::SliceTime { x, idx } => {
                let tx = self.value(*x);
                let (n, t, d) = (tx.shape[0], tx.shape[1], tx.shape[2]);
                let idx = *idx;
                accum(grads, *x, &tx.shape, &|g| {
                    for i in 0..n {
                        let dst = (i * t + idx) * d;
                        for j in 0..d {
                            g[dst + j] += gy.data[i * d + j];
                        }
                    }
                });
            }
            Op::MeanTime(a) => {
                let ta = self.value(*a);
                let (n, t, d) = (ta.shape[0], ta.shape[1], ta.shape[2]);
                let inv = 1.0 / t as f64;
                accum(grads, *a, &ta.shape, &|g| {
                    for i in 0..n {
                        for s in 0..t {
                            let dst = (i * t + s) * d;
                            for j in 0..d {
                                g[dst + j] += gy.data[i * d + j] * inv;
                            }
                        }
                    }
                });
            }
            Op::SumTimeKeep(a) | Op::MeanTimeKeep(a) => {
                let ta = self.value(*a);
                let (n, t, d) = (ta.shape[0], ta.shape[1], ta.shape[2]);
                let inv = if matches!(node.op, Op::MeanTimeKeep(_)) {
                    1.0 / t as f64
                } else {
                    1.0
                };
                accum(grads, *a, &ta.shape, &|g| {
                    for i in 0..n {
                        for s in 0..t {
                            let dst = (i * t + s) * d;
                            for j in 0..d {
                                g[dst + j] += gy.data[i * d + j] * inv;
                            }
                        }
                    }
                });
            }
            Op::SubBcastTime { x, m } => {
                let tx = self.value(*x);
                let (n, t, d) = (tx.shape[0], tx.shape[1], tx.shape[2]);
                accum(grads, *x, &tx.shape, &|g| {
                    for (slot, &v) in g.iter_mut().zip(&gy.data) {
                        *slot += v;
                    }
                });
                accum(grads, *m, &[n, 1, d], &|g| {
                    for i in 0..n {
                        for s in 0..t {
                            let src = (i * t + s) * d;
                            for j in 0..d {
                                g[i * d + j] -= gy.data[src + j];
                            }
                        }
                    }
                });
            }
            Op::DivBcastTime { x, s } => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                let (n, t, d) = (tx.shape[0], tx.shape[1], tx.shape[2]);
                accum(grads, *x, &tx.shape, &|g| {
                    for i in 0..n {
                        for step in 0..t {
                            let base = (i * t + step) * d;
                            for j in 0..d {
                                g[base + j] += gy.data[base + j] / ts.data[i * d + j];
                            }
                        }
                    }
                });
                accum(grads, *s, &[n, 1, d], &|g| {
                    for i in 0..n {
                        for step in 0..t {
                            let base = (i * t + step) * d;
                            for j in 0..d {
                                let sv = ts.data[i * d + j];
                                g[i * d + j] -= gy.data[base + j] * tx.data[base + j] / (sv * sv);
                            }
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let tx = self.value(*x);
                let d = tx.shape[1];
                accum(grads, *x, &tx.shape, &|g| {
                    for (i, &src) in idx.iter().enumerate() {
                        for j in 0..d {
                            g[src * d + j] += gy.data[i * d + j];
                        }
                    }
                });
            }
            Op::ConcatLast(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, da, db) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                accum(grads, *a, &ta.shape, &|g| {
                    for i in 0..n {
                        for j in 0..da {
                            g[i * da + j] += gy.data[i * (da + db) + j];
                        }
                    }
                });
                accum(grads, *b, &tb.shape, &|g| {
                    for i in 0..n {
                        for j in 0..db {
                            g[i * db + j] += gy.data[i * (da + db) + da + j];
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let ta = self.value(*a);
                let gv = gy.data[0];
                accum(grads, *a, &ta.shape, &|g| {
                    for slot in g.iter_mut() {
                        *slot += gv;
                    }
                });
            }
            Op::MeanAll(a) => {
                let ta = self.value(*a);
                let gv = gy.data[0] / ta.numel() as f64;
                accum(grads, *a, &ta.shape, &|g| {
                    for slot in g.iter_mut() {
                        *slot += gv;
                    }
                });
            }
            Op::MulPerSample { x, s } => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                let n = tx.shape[0];
                let block = tx.numel() / n;
                accum(grads, *x, &tx.shape, &|g| {
                    for i in 0..n {
                        let c = ts.data[i];
                        for j in 0..block {
                            g[i * block + j] += gy.data[i * block + j] * c;
                        }
                    }
                });
                accum(grads, *s, &[n], &|g| {
                    for i in 0..n {
                        let mut acc = 0.0;
                        for j in 0..block {
                            acc += gy.data[i * block + j] * tx.data[i * block + j];
                        }
                        g[i] += acc;
                    }
                });
            }
            Op::Reshape(a) => {
                let ta = self.value(*a);
                accum(grads, *a, &ta.shape, &|g| {
                    for (slot, &v) in g.iter_mut().zip(&gy.data) {
                        *slot += v;
                    }
                });
            }
        }
    }
}
