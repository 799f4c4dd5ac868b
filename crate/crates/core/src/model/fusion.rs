//! Dominant-modality fusion and the regression head.
//!
//! The modality with the highest clamped integrity score (batch majority)
//! leads: its surrogate is refined through a shared encoder chain, and each
//! fusion layer attends from the refined dominant stream into the two
//! auxiliary surrogates, accumulating onto a learnable fused base. A cross
//! attention encoder then reads the dominant stream against the fused one
//! and regresses the sentiment score from an anchor position.

use crate::graph::{Graph, Var};
use crate::nn::{EncoderLayer, EncoderStack, Init, LinearLayer, ParamGroup, ParamId, ParamStore};
use crate::rng::CounterRng;
use crate::tensor::Tensor;
use crate::{Modality, PerModality};

use super::ModelConfig;

/// Batch-level dominant pick: per-sample argmax of the clamped scores with
/// ties broken towards the earlier modality in (l, a, v) order, then a
/// majority vote with the same tie-break.
pub fn select_dominant(scores: &PerModality<Vec<f64>>) -> Modality {
    let n = scores.l.len();
    let mut votes = [0usize; 3];
    for i in 0..n {
        let mut best = Modality::Language;
        let mut best_score = f64::NEG_INFINITY;
        for m in Modality::ALL {
            let s = scores.get(m)[i].clamp(0.0, 1.0);
            if s > best_score {
                best_score = s;
                best = m;
            }
        }
        votes[best.index()] += 1;
    }
    let mut winner = Modality::Language;
    let mut most = 0;
    for m in Modality::ALL {
        if votes[m.index()] > most {
            most = votes[m.index()];
            winner = m;
        }
    }
    winner
}

/// One fusion layer: a query projection for the dominant stream and
/// key/value projections per modality. Only the two auxiliary modalities'
/// projections participate in a given forward pass; keeping all three
/// makes the parameter count independent of which modality dominates.
#[derive(Debug, Clone)]
pub struct FusionLayer {
    pub wq: LinearLayer,
    pub wk: PerModality<LinearLayer>,
    pub wv: PerModality<LinearLayer>,
}

impl FusionLayer {
    fn init(store: &mut ParamStore, init: &mut Init, path: &str, d: usize) -> Self {
        Self {
            wq: LinearLayer::init(
                store,
                init,
                ParamGroup::Fusion,
                &format!("{path}.wq"),
                d,
                d,
                true,
            ),
            wk: PerModality::from_fn(|m| {
                LinearLayer::init(
                    store,
                    init,
                    ParamGroup::Fusion,
                    &format!("{path}.wk.{m}"),
                    d,
                    d,
                    true,
                )
            }),
            wv: PerModality::from_fn(|m| {
                LinearLayer::init(
                    store,
                    init,
                    ParamGroup::Fusion,
                    &format!("{path}.wv.{m}"),
                    d,
                    d,
                    true,
                )
            }),
        }
    }

    fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fuse_prev: Var,
        dom: Var,
        aux: &[Modality],
        surrogates: &PerModality<Var>,
        heads: usize,
    ) -> (Var, Vec<(Modality, Var)>) {
        let d = g.value(dom).last_dim();
        let dk = d / heads;
        let q = self.wq.forward(g, store, dom);
        let qh = g.split_heads(q, heads);
        let mut merged = Vec::with_capacity(aux.len());
        let mut gammas = Vec::with_capacity(aux.len());
        for &m in aux {
            let src = *surrogates.get(m);
            let k = self.wk.get(m).forward(g, store, src);
            let v = self.wv.get(m).forward(g, store, src);
            let kh = g.split_heads(k, heads);
            let vh = g.split_heads(v, heads);
            let kt = g.transpose_last(kh);
            let scores = g.bmm(qh, kt);
            let scaled = g.scale(scores, 1.0 / (dk as f64).sqrt());
            let gamma = g.softmax_last(scaled);
            let ctx = g.bmm(gamma, vh);
            merged.push(g.merge_heads(ctx, heads));
            gammas.push((m, gamma));
        }
        let sum = g.add_many(&merged);
        (g.add(fuse_prev, sum), gammas)
    }
}

#[derive(Debug, Clone)]
pub struct FusionModule {
    /// Refinement encoders applied to the dominant stream, shared across
    /// modalities so the dominant pick does not change the parameter count.
    pub refine: Vec<EncoderLayer>,
    /// Learnable fused base, [T, d], broadcast over the batch.
    pub base: ParamId,
    pub layers: Vec<FusionLayer>,
    pub heads: usize,
}

pub struct FusionOutput {
    /// Dominant stream at each depth; entry 0 is the surrogate itself.
    pub dom_streams: Vec<Var>,
    pub fused: Var,
    /// Attention maps per layer, per auxiliary modality.
    pub attention: Vec<Vec<(Modality, Var)>>,
}

impl FusionModule {
    pub fn init(store: &mut ParamStore, rng: &mut CounterRng, cfg: &ModelConfig) -> Self {
        let mut init = Init {
            rng,
            std: 1.0 / (cfg.d as f64).sqrt(),
        };
        let refine = (0..cfg.fusion_layers.saturating_sub(1))
            .map(|i| {
                EncoderLayer::init(
                    store,
                    &mut init,
                    ParamGroup::Fusion,
                    &format!("fusion.refine{i}"),
                    cfg.d,
                    cfg.heads,
                    cfg.d * cfg.ff_multiplier,
                    cfg.dropout,
                )
            })
            .collect();
        let base = store.add(
            "fusion.base",
            ParamGroup::Fusion,
            Tensor::zeros(&[cfg.t, cfg.d]),
        );
        let layers = (0..cfg.fusion_layers)
            .map(|j| FusionLayer::init(store, &mut init, &format!("fusion.layer{j}"), cfg.d))
            .collect();
        Self {
            refine,
            base,
            layers,
            heads: cfg.heads,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        dominant: Modality,
        surrogates: &PerModality<Var>,
    ) -> FusionOutput {
        let n = g.value(surrogates.l).shape[0];
        let mut dom_streams = vec![*surrogates.get(dominant)];
        for enc in &self.refine {
            let prev = *dom_streams.last().unwrap();
            dom_streams.push(enc.forward_self(g, store, prev));
        }
        let aux: Vec<Modality> = Modality::ALL
            .iter()
            .copied()
            .filter(|&m| m != dominant)
            .collect();
        let base = store.var(g, self.base);
        let mut fused = g.broadcast_time(base, n);
        let mut attention = Vec::with_capacity(self.layers.len());
        for (j, layer) in self.layers.iter().enumerate() {
            let (next, gammas) = layer.step(
                g,
                store,
                fused,
                dom_streams[j],
                &aux,
                surrogates,
                self.heads,
            );
            fused = next;
            attention.push(gammas);
        }
        FusionOutput {
            dom_streams,
            fused,
            attention,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PredictionModule {
    pub dom_anchor: ParamId,
    pub fuse_anchor: ParamId,
    pub encoder: EncoderStack,
    pub head: LinearLayer,
}

impl PredictionModule {
    pub fn init(store: &mut ParamStore, rng: &mut CounterRng, cfg: &ModelConfig) -> Self {
        let dom_anchor = store.add(
            "prediction.dom_anchor",
            ParamGroup::Prediction,
            Tensor::zeros(&[1, cfg.d]),
        );
        let fuse_anchor = store.add(
            "prediction.fuse_anchor",
            ParamGroup::Prediction,
            Tensor::zeros(&[1, cfg.d]),
        );
        let mut init = Init {
            rng,
            std: 1.0 / (cfg.d as f64).sqrt(),
        };
        let encoder = EncoderStack::init(
            store,
            &mut init,
            ParamGroup::Prediction,
            "prediction.encoder",
            cfg.encoder_depth,
            cfg.d,
            cfg.heads,
            cfg.d * cfg.ff_multiplier,
            cfg.dropout,
        );
        let head = LinearLayer::init(
            store,
            &mut init,
            ParamGroup::Prediction,
            "prediction.head",
            cfg.d,
            1,
            true,
        );
        Self {
            dom_anchor,
            fuse_anchor,
            encoder,
            head,
        }
    }

    /// Returns the pooled representation [N, d] and the score [N].
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, dom: Var, fused: Var) -> (Var, Var) {
        let n = g.value(dom).shape[0];
        let da = store.var(g, self.dom_anchor);
        let fa = store.var(g, self.fuse_anchor);
        let h_dom = g.concat_time(da, dom);
        let h_fuse = g.concat_time(fa, fused);
        let encoded = self.encoder.forward_cross(g, store, h_dom, h_fuse);
        let pooled = g.slice_time(encoded, 0);
        let score = self.head.forward(g, store, pooled);
        let y_hat = g.reshape(score, vec![n]);
        (pooled, y_hat)
    }
}

/// Mean squared error of the regression output.
pub fn prediction_loss(g: &mut Graph, y_hat: Var, y: Var) -> Var {
    assert_eq!(
        g.value(y_hat).shape,
        g.value(y).shape,
        "prediction/label length mismatch"
    );
    let diff = g.sub(y_hat, y);
    let sq = g.square(diff);
    g.mean_all(sq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn per_sample(l: &[f64], a: &[f64], v: &[f64]) -> PerModality<Vec<f64>> {
        PerModality::new(l.to_vec(), a.to_vec(), v.to_vec())
    }

    #[test]
    fn unanimous_scores_pick_the_obvious_winner() {
        let scores = per_sample(&[0.9, 0.9], &[0.1, 0.2], &[0.1, 0.3]);
        assert_eq!(select_dominant(&scores), Modality::Language);
    }

    #[test]
    fn majority_vote_decides_mixed_batches() {
        let scores = per_sample(&[0.1, 0.2, 0.1], &[0.8, 0.9, 0.2], &[0.3, 0.1, 0.9]);
        assert_eq!(select_dominant(&scores), Modality::Acoustic);
    }

    #[test]
    fn vote_ties_resolve_towards_language() {
        let scores = per_sample(
            &[0.9, 0.1, 0.1, 0.9],
            &[0.1, 0.8, 0.8, 0.1],
            &[0.0, 0.0, 0.0, 0.0],
        );
        assert_eq!(select_dominant(&scores), Modality::Language);
    }

    #[test]
    fn selection_survives_increasing_transforms() {
        let scores = per_sample(&[0.2, 0.4], &[0.6, 0.5], &[0.1, 0.3]);
        let mapped = scores.map(|col| col.iter().map(|s| 0.1 + 0.5 * s).collect::<Vec<_>>());
        assert_eq!(select_dominant(&scores), select_dominant(&mapped));
        assert_eq!(select_dominant(&scores), select_dominant(&scores));
    }

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            t: 4,
            d: 8,
            heads: 2,
            encoder_depth: 1,
            fusion_layers: 3,
            ff_multiplier: 2,
            dropout: 0.0,
        }
    }

    fn random_states(n: usize, cfg: &ModelConfig, seed: u64) -> PerModality<Tensor> {
        let mut rng = CounterRng::new(seed);
        PerModality::from_fn(|_| {
            Tensor::new(
                vec![n, cfg.t, cfg.d],
                (0..n * cfg.t * cfg.d).map(|_| rng.next_normal()).collect(),
            )
        })
    }

    #[test]
    fn zeroed_refinement_leaves_the_dominant_stream_unchanged() {
        let cfg = toy_cfg();
        let mut store = ParamStore::new();
        let mut rng = CounterRng::new(31);
        let fusion = FusionModule::init(&mut store, &mut rng, &cfg);
        for (_, p) in store.iter_mut() {
            p.value.data.fill(0.0);
        }
        let mut g = Graph::eval();
        let states = random_states(2, &cfg, 32);
        let surrogates = PerModality::from_fn(|m| g.leaf(states.get(m).clone()));
        let out = fusion.forward(&mut g, &store, Modality::Acoustic, &surrogates);
        assert_eq!(out.dom_streams.len(), 3);
        let first = g.value(out.dom_streams[0]).data.clone();
        assert_eq!(g.value(out.dom_streams[2]).data, first);
    }

    #[test]
    fn constant_keys_give_uniform_attention_rows() {
        let cfg = toy_cfg();
        let mut store = ParamStore::new();
        let mut rng = CounterRng::new(33);
        let fusion = FusionModule::init(&mut store, &mut rng, &cfg);
        let mut g = Graph::eval();
        let mut states = random_states(2, &cfg, 34);
        for m in [Modality::Acoustic, Modality::Visual] {
            let t = states.get_mut(m);
            let first_row: Vec<f64> = t.data[..cfg.d].to_vec();
            for row in t.data.chunks_mut(cfg.d) {
                row.copy_from_slice(&first_row);
            }
        }
        let surrogates = PerModality::from_fn(|m| g.leaf(states.get(m).clone()));
        let out = fusion.forward(&mut g, &store, Modality::Language, &surrogates);
        for layer in &out.attention {
            for (_, gamma) in layer {
                for &p in &g.value(*gamma).data {
                    assert!((p - 1.0 / cfg.t as f64).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_value_projections_leave_the_fused_base_untouched() {
        let cfg = toy_cfg();
        let mut store = ParamStore::new();
        let mut rng = CounterRng::new(35);
        let fusion = FusionModule::init(&mut store, &mut rng, &cfg);
        let mut base_rng = CounterRng::new(36);
        {
            let base = store.get_mut(fusion.base);
            base.value = Tensor::new(
                vec![cfg.t, cfg.d],
                (0..cfg.t * cfg.d).map(|_| base_rng.next_normal()).collect(),
            );
        }
        for layer in &fusion.layers {
            for m in Modality::ALL {
                let wv = layer.wv.get(m);
                store.get_mut(wv.w).value.data.fill(0.0);
                store.get_mut(wv.b.unwrap()).value.data.fill(0.0);
            }
        }
        let mut g = Graph::eval();
        let states = random_states(3, &cfg, 37);
        let surrogates = PerModality::from_fn(|m| g.leaf(states.get(m).clone()));
        let out = fusion.forward(&mut g, &store, Modality::Visual, &surrogates);
        let base_bcast: Vec<f64> = std::iter::repeat(&store.value(fusion.base).data)
            .take(3)
            .flat_map(|d| d.iter().copied())
            .collect();
        assert_eq!(g.value(out.fused).data, base_bcast);
    }

    #[test]
    fn single_head_step_matches_hand_computation() {
        let cfg = ModelConfig {
            t: 2,
            d: 2,
            heads: 1,
            encoder_depth: 1,
            fusion_layers: 1,
            ff_multiplier: 2,
            dropout: 0.0,
        };
        let mut store = ParamStore::new();
        let mut rng = CounterRng::new(38);
        let fusion = FusionModule::init(&mut store, &mut rng, &cfg);
        // Identity projections so Q, K, V equal the raw streams.
        let layer = &fusion.layers[0];
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let ids: Vec<crate::nn::ParamId> = std::iter::once(layer.wq.w)
            .chain(
                Modality::ALL
                    .iter()
                    .flat_map(|&m| [layer.wk.get(m).w, layer.wv.get(m).w]),
            )
            .collect();
        for id in ids {
            store.get_mut(id).value = eye.clone();
        }
        for (_, p) in store.iter_mut() {
            if p.path.ends_with(".b") {
                p.value.data.fill(0.0);
            }
        }
        let dom = vec![1.0, 0.0, 0.0, 1.0];
        let aux_a = vec![0.5, -0.5, 1.5, 2.0];
        let aux_v = vec![2.0, 1.0, -1.0, 0.5];
        let mut g = Graph::eval();
        let surrogates = PerModality::new(
            g.leaf(Tensor::new(vec![1, 2, 2], dom.clone())),
            g.leaf(Tensor::new(vec![1, 2, 2], aux_a.clone())),
            g.leaf(Tensor::new(vec![1, 2, 2], aux_v.clone())),
        );
        let out = fusion.forward(&mut g, &store, Modality::Language, &surrogates);

        let scale = 1.0 / 2.0f64.sqrt();
        let mut expected = vec![0.0; 4];
        for aux in [&aux_a, &aux_v] {
            for qi in 0..2 {
                let q = &dom[qi * 2..qi * 2 + 2];
                let logits: Vec<f64> = (0..2)
                    .map(|ki| scale * (q[0] * aux[ki * 2] + q[1] * aux[ki * 2 + 1]))
                    .collect();
                let mx = logits[0].max(logits[1]);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z = e[0] + e[1];
                for j in 0..2 {
                    expected[qi * 2 + j] += (e[0] / z) * aux[j] + (e[1] / z) * aux[2 + j];
                }
            }
        }
        for (got, want) in g.value(out.fused).data.iter().zip(&expected) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn attention_rows_always_sum_to_one() {
        let cfg = toy_cfg();
        let mut store = ParamStore::new();
        let mut rng = CounterRng::new(39);
        let fusion = FusionModule::init(&mut store, &mut rng, &cfg);
        let mut g = Graph::eval();
        let states = random_states(2, &cfg, 40);
        let surrogates = PerModality::from_fn(|m| g.leaf(states.get(m).clone()));
        let out = fusion.forward(&mut g, &store, Modality::Language, &surrogates);
        for layer in &out.attention {
            for (_, gamma) in layer {
                for row in g.value(*gamma).data.chunks(cfg.t) {
                    let s: f64 = row.iter().sum();
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn prediction_emits_scores_per_sample() {
        let cfg = toy_cfg();
        let mut store = ParamStore::new();
        let mut rng = CounterRng::new(41);
        let fusion = FusionModule::init(&mut store, &mut rng, &cfg);
        let pred = PredictionModule::init(&mut store, &mut rng, &cfg);
        let states = random_states(3, &cfg, 42);
        let run = || {
            let mut g = Graph::eval();
            let surrogates = PerModality::from_fn(|m| g.leaf(states.get(m).clone()));
            let out = fusion.forward(&mut g, &store, Modality::Language, &surrogates);
            let (pooled, y_hat) =
                pred.forward(&mut g, &store, *out.dom_streams.last().unwrap(), out.fused);
            assert_eq!(g.value(pooled).shape, vec![3, cfg.d]);
            assert_eq!(g.value(y_hat).shape, vec![3]);
            g.value(y_hat).data.clone()
        };
        let first = run();
        assert!(first.iter().all(|v| v.is_finite()));
        assert_eq!(first, run());
    }

    #[test]
    fn prediction_loss_is_plain_mse() {
        let mut g = Graph::eval();
        let y_hat = g.leaf(Tensor::new(vec![2], vec![2.0, 1.0]));
        let y = g.leaf(Tensor::new(vec![2], vec![0.0, 1.0]));
        let loss = prediction_loss(&mut g, y_hat, y);
        assert_eq!(g.value(loss).item(), 2.0);

        let mut rng = CounterRng::new(43);
        let n = 64;
        let a: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
        let reference: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64;
        let ya = g.leaf(Tensor::new(vec![n], a));
        let yb = g.leaf(Tensor::new(vec![n], b));
        let loss = prediction_loss(&mut g, ya, yb);
        assert!((g.value(loss).item() - reference).abs() < 1e-12);
    }
}
