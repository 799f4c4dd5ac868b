//! Cross-modal completion: disentangled shared/private spaces, integrity
//! weighted surrogates, decoders, and the reconstruction losses that anchor
//! them at two depths.
//!
//! The shared and private encoders themselves are plain [`EncoderStack`]s
//! owned by the model; this module holds the pieces with their own math:
//! the loss builders, the surrogate blend, and the mutual-information
//! discriminators.

use crate::graph::{Graph, Var};
use crate::nn::{Init, LinearLayer, ParamGroup, ParamStore};
use crate::rng::CounterRng;
use crate::{IfusionError, Modality, PerModality, Result};

use super::ModelConfig;

/// Scores a pair of [T x d] representations: both are mean-pooled over
/// time, concatenated, and passed through two hidden layers and a scalar
/// head.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub l1: LinearLayer,
    pub l2: LinearLayer,
    pub out: LinearLayer,
}

impl Discriminator {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut CounterRng,
        cfg: &ModelConfig,
        path: &str,
    ) -> Self {
        let mut init = Init {
            rng,
            std: 1.0 / (cfg.d as f64).sqrt(),
        };
        Self {
            l1: LinearLayer::init(
                store,
                &mut init,
                ParamGroup::Discriminator,
                &format!("{path}.l1"),
                2 * cfg.d,
                cfg.d,
                true,
            ),
            l2: LinearLayer::init(
                store,
                &mut init,
                ParamGroup::Discriminator,
                &format!("{path}.l2"),
                cfg.d,
                cfg.d,
                true,
            ),
            out: LinearLayer::init(
                store,
                &mut init,
                ParamGroup::Discriminator,
                &format!("{path}.out"),
                cfg.d,
                1,
                true,
            ),
        }
    }

    /// `x`, `y` are [N, T, d]; returns scores [N].
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, y: Var) -> Var {
        let n = g.value(x).shape[0];
        let px = g.mean_time(x);
        let py = g.mean_time(y);
        let cat = g.concat_last(px, py);
        let h = self.l1.forward(g, store, cat);
        let h = g.relu(h);
        let h = self.l2.forward(g, store, h);
        let h = g.relu(h);
        let s = self.out.forward(g, store, h);
        g.reshape(s, vec![n])
    }
}

/// Sum over the three modality pairs of the batch-mean squared distance
/// between shared representations.
pub fn similarity_loss(g: &mut Graph, shared: &PerModality<Var>) -> Var {
    let n = g.value(shared.l).shape[0];
    let pairs = [
        (shared.l, shared.a),
        (shared.l, shared.v),
        (shared.a, shared.v),
    ];
    let mut terms = Vec::with_capacity(3);
    for (x, y) in pairs {
        let diff = g.sub(x, y);
        terms.push(g.frob_sq(diff));
    }
    let total = g.add_many(&terms);
    g.scale(total, 1.0 / n as f64)
}

const COLUMN_NORM_GUARD: f64 = 1e-8;

/// Zero-mean over time, then scale each column to unit norm. The guard
/// keeps fully-zero columns (dropped modalities early in training) finite.
fn normalize_columns(g: &mut Graph, x: Var) -> Var {
    let mean = g.mean_time_keep(x);
    let centered = g.sub_bcast_time(x, mean);
    let sq = g.square(centered);
    let col_sq = g.sum_time_keep(sq);
    let guarded = g.add_scalar(col_sq, COLUMN_NORM_GUARD);
    let norm = g.sqrt(guarded);
    g.div_bcast_time(centered, norm)
}

/// Squared Frobenius norm of the normalized cross-covariance between one
/// modality's shared and private representations, scaled by 1/d^2 and
/// averaged over the batch.
pub fn difference_loss_single(g: &mut Graph, shared: Var, private: Var) -> Var {
    let shape = g.value(shared).shape.clone();
    let (n, d) = (shape[0], shape[2]);
    let sn = normalize_columns(g, shared);
    let pn = normalize_columns(g, private);
    let st = g.transpose_last(sn);
    let cross = g.bmm(st, pn);
    let total = g.frob_sq(cross);
    g.scale(total, 1.0 / (n as f64 * (d * d) as f64))
}

/// Average of [`difference_loss_single`] over the three modalities.
pub fn difference_loss(
    g: &mut Graph,
    shared: &PerModality<Var>,
    private: &PerModality<Var>,
) -> Var {
    let mut terms = Vec::with_capacity(3);
    for m in Modality::ALL {
        terms.push(difference_loss_single(g, *shared.get(m), *private.get(m)));
    }
    let total = g.add_many(&terms);
    g.scale(total, 1.0 / 3.0)
}

/// Shallow completion objective: pairwise shared similarity plus the
/// modality-averaged shared/private separation penalty.
pub fn encoder_completion_loss(
    g: &mut Graph,
    shared: &PerModality<Var>,
    private: &PerModality<Var>,
) -> (Var, Var, Var) {
    let sim = similarity_loss(g, shared);
    let diff = difference_loss(g, shared, private);
    (g.add(sim, diff), sim, diff)
}

/// Convex blend between a modality's own embedding and the summed shared
/// representations of the other two, weighted by the clamped integrity
/// score per sample. The weight enters as a constant: the estimator is
/// supervised by its own loss alone, so the downstream terms cannot drag
/// the scores toward a blend they happen to prefer.
pub fn build_surrogate(
    g: &mut Graph,
    embedded: Var,
    integrity_raw: Var,
    donor1: Var,
    donor2: Var,
) -> Var {
    let clamped = g.clamp01(integrity_raw);
    let w = g.leaf(g.value(clamped).clone());
    let own = g.mul_per_sample(embedded, w);
    let donors = g.add(donor1, donor2);
    let inv = g.one_minus(w);
    let borrowed = g.mul_per_sample(donors, inv);
    g.add(own, borrowed)
}

/// Jensen-Shannon style lower bound on mutual information: the joint term
/// averages -softplus(-score) over aligned pairs, the marginal term
/// averages -softplus(score) over pairs misaligned by `perm`.
pub fn mi_lower_bound(
    g: &mut Graph,
    store: &ParamStore,
    disc: &Discriminator,
    x: Var,
    y: Var,
    perm: &[usize],
) -> Result<Var> {
    let shape = g.value(y).shape.clone();
    let n = shape[0];
    if n < 2 {
        return Err(IfusionError::Data(format!(
            "mutual information bound needs at least 2 samples for negatives, got {n}"
        )));
    }
    assert_eq!(perm.len(), n, "negative permutation length mismatch");
    let joint = disc.forward(g, store, x, y);
    let neg_joint = g.scale(joint, -1.0);
    let sp_joint = g.softplus(neg_joint);
    let mean_joint = g.mean_all(sp_joint);

    let flat = g.reshape(y, vec![n, shape[1] * shape[2]]);
    let shuffled_flat = g.gather_rows(flat, perm.to_vec());
    let y_shuffled = g.reshape(shuffled_flat, shape);
    let marginal = disc.forward(g, store, x, y_shuffled);
    let sp_marginal = g.softplus(marginal);
    let mean_marginal = g.mean_all(sp_marginal);

    let sum = g.add(mean_joint, mean_marginal);
    Ok(g.scale(sum, -1.0))
}

/// The deep completion loss terms, kept separate so the report can log
/// each one.
pub struct DecoderLossParts {
    pub mse_global: Var,
    pub mse_semantic: Var,
    pub mi_global: Var,
    pub mi_semantic: Var,
    pub total: Var,
}

/// Weights for the four deep completion terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderLossWeights {
    pub mse_global: f64,
    pub mse_semantic: f64,
    pub mi_global: f64,
    pub mi_semantic: f64,
}

impl Default for DecoderLossWeights {
    fn default() -> Self {
        Self {
            mse_global: 0.5,
            mi_global: 0.4,
            mse_semantic: 0.3,
            mi_semantic: 0.2,
        }
    }
}

/// Mean over modalities and batch of the squared distance to the clean
/// target.
fn mean_reconstruction_mse(g: &mut Graph, got: &PerModality<Var>, clean: &PerModality<Var>) -> Var {
    let n = g.value(got.l).shape[0];
    let mut terms = Vec::with_capacity(3);
    for m in Modality::ALL {
        let diff = g.sub(*got.get(m), *clean.get(m));
        terms.push(g.frob_sq(diff));
    }
    let total = g.add_many(&terms);
    g.scale(total, 1.0 / (3 * n) as f64)
}

/// Deep validation of the reconstructions: MSE towards the clean teacher
/// values plus negated MI bounds, at both the global (embedding) and
/// semantic (re-encoded shared) depths.
#[allow(clippy::too_many_arguments)]
pub fn decoder_completion_loss(
    g: &mut Graph,
    store: &ParamStore,
    reconstructed: &PerModality<Var>,
    re_encoded: &PerModality<Var>,
    clean_embedded: &PerModality<Var>,
    clean_semantic: &PerModality<Var>,
    disc_global: &PerModality<Discriminator>,
    disc_semantic: &PerModality<Discriminator>,
    perm: &[usize],
    weights: DecoderLossWeights,
) -> Result<DecoderLossParts> {
    let mse_global = mean_reconstruction_mse(g, reconstructed, clean_embedded);
    let mse_semantic = mean_reconstruction_mse(g, re_encoded, clean_semantic);

    let mut bounds_g = Vec::with_capacity(3);
    let mut bounds_s = Vec::with_capacity(3);
    for m in Modality::ALL {
        bounds_g.push(mi_lower_bound(
            g,
            store,
            disc_global.get(m),
            *reconstructed.get(m),
            *clean_embedded.get(m),
            perm,
        )?);
        bounds_s.push(mi_lower_bound(
            g,
            store,
            disc_semantic.get(m),
            *re_encoded.get(m),
            *clean_semantic.get(m),
            perm,
        )?);
    }
    let sum_g = g.add_many(&bounds_g);
    let mi_global = g.scale(sum_g, -1.0);
    let sum_s = g.add_many(&bounds_s);
    let mi_semantic = g.scale(sum_s, -1.0);

    let parts = [
        g.scale(mse_global, weights.mse_global),
        g.scale(mi_global, weights.mi_global),
        g.scale(mse_semantic, weights.mse_semantic),
        g.scale(mi_semantic, weights.mi_semantic),
    ];
    let total = g.add_many(&parts);
    Ok(DecoderLossParts {
        mse_global,
        mse_semantic,
        mi_global,
        mi_semantic,
        total,
    })
}

/// Alternate shallow constraint: negated MI bounds between shared pairs,
/// one discriminator per pair.
pub fn pairwise_mi_similarity(
    g: &mut Graph,
    store: &ParamStore,
    shared: &PerModality<Var>,
    pair_discs: &[Discriminator; 3],
    perm: &[usize],
) -> Result<Var> {
    let pairs = [
        (shared.l, shared.a),
        (shared.l, shared.v),
        (shared.a, shared.v),
    ];
    let mut bounds = Vec::with_capacity(3);
    for ((x, y), disc) in pairs.into_iter().zip(pair_discs) {
        bounds.push(mi_lower_bound(g, store, disc, x, y, perm)?);
    }
    let total = g.add_many(&bounds);
    Ok(g.scale(total, -1.0))
}

/// Alternate shallow constraint: batch-mean squared deviation of each
/// shared representation from the three-modality centroid, summed over
/// modalities.
pub fn three_way_similarity(g: &mut Graph, shared: &PerModality<Var>) -> Var {
    let n = g.value(shared.l).shape[0];
    let sum = g.add_many(&[shared.l, shared.a, shared.v]);
    let centroid = g.scale(sum, 1.0 / 3.0);
    let mut terms = Vec::with_capacity(3);
    for m in Modality::ALL {
        let diff = g.sub(*shared.get(m), centroid);
        terms.push(g.frob_sq(diff));
    }
    let total = g.add_many(&terms);
    g.scale(total, 1.0 / n as f64)
}
