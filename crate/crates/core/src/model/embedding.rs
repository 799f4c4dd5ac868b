//! Per-modality embedding front end.
//!
//! Raw sequences of arbitrary length and width are projected to the model
//! width, resampled to the common length with a learned map over the time
//! axis, prefixed with a learnable anchor row that starts at zero, and run
//! through a small self-attention encoder. The anchor row is dropped from
//! the output, leaving a [T x d] embedding per sample.

use crate::graph::{Graph, Var};
use crate::nn::{EncoderStack, Init, LinearLayer, ParamGroup, ParamId, ParamStore};
use crate::rng::CounterRng;
use crate::tensor::Tensor;
use crate::Modality;

use super::ModelConfig;
use crate::data::SeqDims;

#[derive(Debug, Clone)]
pub struct ModalityEmbed {
    pub proj: LinearLayer,
    pub resample: ParamId,
    pub anchor: ParamId,
    pub encoder: EncoderStack,
    t: usize,
}

impl ModalityEmbed {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut CounterRng,
        cfg: &ModelConfig,
        dims: SeqDims,
        m: Modality,
    ) -> Self {
        let path = format!("embed.{m}");
        let proj = {
            let mut init = Init {
                rng,
                std: 1.0 / (dims.width as f64).sqrt(),
            };
            LinearLayer::init(
                store,
                &mut init,
                ParamGroup::EmbedProjection,
                &format!("{path}.proj"),
                dims.width,
                cfg.d,
                true,
            )
        };
        let resample = {
            // Nearest-step assignment between the source and target grids,
            // so the initial resampling carries rows through verbatim
            // (masked steps included) and training refines it from there.
            let mut w = Tensor::zeros(&[cfg.t, dims.steps]);
            for i in 0..cfg.t {
                let j = if cfg.t == 1 {
                    0
                } else {
                    let p = i as f64 * (dims.steps - 1) as f64 / (cfg.t - 1) as f64;
                    p.round() as usize
                };
                w.data[i * dims.steps + j.min(dims.steps - 1)] = 1.0;
            }
            store.add(format!("{path}.resample"), ParamGroup::EmbedProjection, w)
        };
        let anchor = store.add(
            format!("{path}.anchor"),
            ParamGroup::EmbedProjection,
            Tensor::zeros(&[1, cfg.d]),
        );
        let encoder = {
            let mut init = Init {
                rng,
                std: 1.0 / (cfg.d as f64).sqrt(),
            };
            EncoderStack::init(
                store,
                &mut init,
                ParamGroup::EmbedEncoder,
                &format!("{path}.encoder"),
                cfg.encoder_depth,
                cfg.d,
                cfg.heads,
                cfg.d * cfg.ff_multiplier,
                cfg.dropout,
            )
        };
        Self {
            proj,
            resample,
            anchor,
            encoder,
            t: cfg.t,
        }
    }

    /// `x` is [N, steps, width] in raw feature space; returns [N, T, d].
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let projected = self.proj.forward(g, store, x);
        let r = store.var(g, self.resample);
        let resampled = g.mat_left(r, projected);
        let anchor = store.var(g, self.anchor);
        let with_anchor = g.concat_time(anchor, resampled);
        let encoded = self.encoder.forward_self(g, store, with_anchor);
        drop_anchor_row(g, encoded, self.t)
    }
}

/// Remove the prepended row via a constant selection matrix, keeping the
/// copy bit-exact (the matmul kernel skips zero weights entirely).
fn drop_anchor_row(g: &mut Graph, x: Var, t: usize) -> Var {
    let mut sel = Tensor::zeros(&[t, t + 1]);
    for i in 0..t {
        sel.data[i * (t + 1) + i + 1] = 1.0;
    }
    let s = g.leaf(sel);
    g.mat_left(s, x)
}
