//! Completeness score estimation.
//!
//! Each modality owns an estimator: a learnable anchor row is prepended to
//! the embedded sequence, a small self-attention encoder mixes it with the
//! sequence, and a linear head reads the anchor position. Scores leave the
//! head unclamped so the regression loss sees raw values; consumers clamp
//! to [0, 1] where a convex blend is required.

use crate::graph::{Graph, Var};
use crate::nn::{EncoderStack, Init, LinearLayer, ParamGroup, ParamId, ParamStore};
use crate::rng::CounterRng;
use crate::tensor::Tensor;
use crate::{Modality, PerModality};

use super::ModelConfig;

#[derive(Debug, Clone)]
pub struct IntegrityEstimator {
    pub anchor: ParamId,
    pub encoder: EncoderStack,
    pub head: LinearLayer,
}

impl IntegrityEstimator {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut CounterRng,
        cfg: &ModelConfig,
        m: Modality,
    ) -> Self {
        let path = format!("integrity.{m}");
        let anchor = store.add(
            format!("{path}.anchor"),
            ParamGroup::Integrity,
            Tensor::zeros(&[1, cfg.d]),
        );
        let mut init = Init {
            rng,
            std: 1.0 / (cfg.d as f64).sqrt(),
        };
        let encoder = EncoderStack::init(
            store,
            &mut init,
            ParamGroup::Integrity,
            &format!("{path}.encoder"),
            cfg.encoder_depth,
            cfg.d,
            cfg.heads,
            cfg.d * cfg.ff_multiplier,
            cfg.dropout,
        );
        let head = LinearLayer::init(
            store,
            &mut init,
            ParamGroup::Integrity,
            &format!("{path}.head"),
            cfg.d,
            1,
            true,
        );
        // Zeroed head: scores start at the bias and the encoder ramps in
        // through the regression signal instead of a random readout.
        store.get_mut(head.w).value.data.fill(0.0);
        Self {
            anchor,
            encoder,
            head,
        }
    }

    /// `embedded` is [N, T, d]; returns raw scores [N].
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, embedded: Var) -> Var {
        let n = g.value(embedded).shape[0];
        let anchor = store.var(g, self.anchor);
        let with_anchor = g.concat_time(anchor, embedded);
        let encoded = self.encoder.forward_self(g, store, with_anchor);
        let pooled = g.slice_time(encoded, 0);
        let score = self.head.forward(g, store, pooled);
        g.reshape(score, vec![n])
    }
}

/// Mean over samples of the squared distance between predicted and true
/// per-modality score vectors.
pub fn integrity_loss(g: &mut Graph, pred: &PerModality<Var>, target: &PerModality<Var>) -> Var {
    let n = g.value(pred.l).numel();
    for m in Modality::ALL {
        assert_eq!(
            g.value(*pred.get(m)).shape,
            g.value(*target.get(m)).shape,
            "integrity score shape mismatch for modality {m}"
        );
    }
    let mut terms = Vec::with_capacity(3);
    for m in Modality::ALL {
        let diff = g.sub(*pred.get(m), *target.get(m));
        terms.push(g.frob_sq(diff));
    }
    let total = g.add_many(&terms);
    g.scale(total, 1.0 / n as f64)
}
