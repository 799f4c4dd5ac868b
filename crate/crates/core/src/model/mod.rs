//! The three-stage model: per-modality embedding with completeness
//! estimation, integrity-weighted cross-modal completion, and dominant
//! modality fusion with a regression head.
//!
//! All parameters live in one [`ParamStore`]; construction order is fixed,
//! so parameter ids and paths are stable for a given configuration and
//! checkpoints can address them positionally.

pub mod completion;
pub mod embedding;
pub mod fusion;
pub mod integrity;

use serde::{Deserialize, Serialize};

use crate::data::SeqDims;
use crate::graph::{Graph, Var};
use crate::nn::{EncoderStack, Init, ParamGroup, ParamStore};
use crate::rng::CounterRng;
use crate::tensor::Tensor;
use crate::{IfusionError, Modality, PerModality, Result};

use completion::{build_surrogate, Discriminator};
use embedding::ModalityEmbed;
use fusion::{select_dominant, FusionModule, FusionOutput, PredictionModule};
use integrity::IntegrityEstimator;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Common sequence length after temporal resampling.
    pub t: usize,
    /// Model width.
    pub d: usize,
    pub heads: usize,
    /// Depth of the embedding, integrity, shared, private, decoder, and
    /// prediction encoders.
    pub encoder_depth: usize,
    pub fusion_layers: usize,
    /// Feed-forward hidden width as a multiple of `d`.
    pub ff_multiplier: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            t: 8,
            d: 128,
            heads: 4,
            encoder_depth: 2,
            fusion_layers: 3,
            ff_multiplier: 4,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.d == 0 || self.heads == 0 {
            return Err(IfusionError::Config(
                "model dimensions must be positive".into(),
            ));
        }
        if self.d % self.heads != 0 {
            return Err(IfusionError::Config(format!(
                "width {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.encoder_depth == 0 || self.fusion_layers == 0 || self.ff_multiplier == 0 {
            return Err(IfusionError::Config(
                "encoder depth, fusion layers, and feed-forward multiplier must be positive".into(),
            ));
        }
        if !self.dropout.is_finite() || !(0.0..1.0).contains(&self.dropout) {
            return Err(IfusionError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Which constraint pulls the shared representations together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityConstraint {
    #[default]
    PairwiseMse,
    PairwiseMi,
    ThreeWay,
}

#[derive(Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub dims: PerModality<SeqDims>,
    pub similarity: SimilarityConstraint,
    pub store: ParamStore,
    pub embed: PerModality<ModalityEmbed>,
    pub integrity: PerModality<IntegrityEstimator>,
    pub shared: PerModality<EncoderStack>,
    pub private: PerModality<EncoderStack>,
    pub decoder: PerModality<EncoderStack>,
    pub disc_global: PerModality<Discriminator>,
    pub disc_semantic: PerModality<Discriminator>,
    /// Only present under the pairwise mutual-information constraint.
    pub pair_discs: Option<[Discriminator; 3]>,
    pub fusion: FusionModule,
    pub prediction: PredictionModule,
}

impl ModelState {
    pub fn new(
        config: ModelConfig,
        dims: PerModality<SeqDims>,
        similarity: SimilarityConstraint,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        for (m, d) in dims.iter() {
            if d.steps == 0 || d.width == 0 {
                return Err(IfusionError::Config(format!(
                    "modality {m} has empty dimensions"
                )));
            }
        }
        let mut store = ParamStore::new();
        let mut rng = CounterRng::new(seed).derive_named("model-init");
        let ff = config.d * config.ff_multiplier;
        let enc_std = 1.0 / (config.d as f64).sqrt();

        let embed = PerModality::from_fn(|m| {
            ModalityEmbed::init(&mut store, &mut rng, &config, *dims.get(m), m)
        });
        let integrity =
            PerModality::from_fn(|m| IntegrityEstimator::init(&mut store, &mut rng, &config, m));
        let stack =
            |store: &mut ParamStore, rng: &mut CounterRng, group: ParamGroup, path: String| {
                let mut init = Init { rng, std: enc_std };
                EncoderStack::init(
                    store,
                    &mut init,
                    group,
                    &path,
                    config.encoder_depth,
                    config.d,
                    config.heads,
                    ff,
                    config.dropout,
                )
            };
        let shared = PerModality::from_fn(|m| {
            stack(
                &mut store,
                &mut rng,
                ParamGroup::SharedEncoder,
                format!("shared.{m}"),
            )
        });
        let private = PerModality::from_fn(|m| {
            stack(
                &mut store,
                &mut rng,
                ParamGroup::PrivateEncoder,
                format!("private.{m}"),
            )
        });
        let decoder = PerModality::from_fn(|m| {
            stack(
                &mut store,
                &mut rng,
                ParamGroup::Decoder,
                format!("decoder.{m}"),
            )
        });
        let disc_global = PerModality::from_fn(|m| {
            Discriminator::init(&mut store, &mut rng, &config, &format!("midisc.global.{m}"))
        });
        let disc_semantic = PerModality::from_fn(|m| {
            Discriminator::init(
                &mut store,
                &mut rng,
                &config,
                &format!("midisc.semantic.{m}"),
            )
        });
        let pair_discs = (similarity == SimilarityConstraint::PairwiseMi).then(|| {
            ["l_a", "l_v", "a_v"].map(|pair| {
                Discriminator::init(&mut store, &mut rng, &config, &format!("simdisc.{pair}"))
            })
        });
        let fusion = FusionModule::init(&mut store, &mut rng, &config);
        let prediction = PredictionModule::init(&mut store, &mut rng, &config);
        Ok(Self {
            config,
            dims,
            similarity,
            store,
            embed,
            integrity,
            shared,
            private,
            decoder,
            disc_global,
            disc_semantic,
            pair_discs,
            fusion,
            prediction,
        })
    }

    /// Insert raw features as leaves and run the embedding front ends.
    pub fn embed_batch(&self, g: &mut Graph, features: &PerModality<Tensor>) -> PerModality<Var> {
        PerModality::from_fn(|m| {
            let x = g.leaf(features.get(m).clone());
            self.embed.get(m).forward(g, &self.store, x)
        })
    }

    /// Raw (unclamped) completeness scores, [N] per modality.
    pub fn integrity_scores(&self, g: &mut Graph, embedded: &PerModality<Var>) -> PerModality<Var> {
        PerModality::from_fn(|m| {
            self.integrity
                .get(m)
                .forward(g, &self.store, *embedded.get(m))
        })
    }

    pub fn disentangle_all(
        &self,
        g: &mut Graph,
        embedded: &PerModality<Var>,
    ) -> (PerModality<Var>, PerModality<Var>) {
        let shared = PerModality::from_fn(|m| {
            self.shared
                .get(m)
                .forward_self(g, &self.store, *embedded.get(m))
        });
        let private = PerModality::from_fn(|m| {
            self.private
                .get(m)
                .forward_self(g, &self.store, *embedded.get(m))
        });
        (shared, private)
    }

    /// Integrity-weighted blend per modality; with `force_full` the blend
    /// is skipped and every surrogate is the modality's own embedding.
    pub fn build_surrogates(
        &self,
        g: &mut Graph,
        embedded: &PerModality<Var>,
        shared: &PerModality<Var>,
        integrity_raw: &PerModality<Var>,
        force_full: bool,
    ) -> PerModality<Var> {
        if force_full {
            return *embedded;
        }
        PerModality::from_fn(|m| {
            let [o1, o2] = others(m);
            build_surrogate(
                g,
                *embedded.get(m),
                *integrity_raw.get(m),
                *shared.get(o1),
                *shared.get(o2),
            )
        })
    }

    /// Decode surrogates back to embedding space and re-encode their
    /// shared semantics.
    pub fn decode_all(
        &self,
        g: &mut Graph,
        surrogates: &PerModality<Var>,
    ) -> (PerModality<Var>, PerModality<Var>) {
        let reconstructed = PerModality::from_fn(|m| {
            self.decoder
                .get(m)
                .forward_self(g, &self.store, *surrogates.get(m))
        });
        let re_encoded = PerModality::from_fn(|m| {
            self.shared
                .get(m)
                .forward_self(g, &self.store, *reconstructed.get(m))
        });
        (reconstructed, re_encoded)
    }

    /// Clean-pass targets for the deep completion losses, computed on a
    /// separate eval-mode graph so they carry no gradient.
    pub fn teacher_targets(
        &self,
        features: &PerModality<Tensor>,
    ) -> (PerModality<Tensor>, PerModality<Tensor>) {
        let mut g = Graph::eval();
        let embedded = self.embed_batch(&mut g, features);
        let semantic = PerModality::from_fn(|m| {
            self.shared
                .get(m)
                .forward_self(&mut g, &self.store, *embedded.get(m))
        });
        (
            embedded.map(|&v| g.value(v).clone()),
            semantic.map(|&v| g.value(v).clone()),
        )
    }

    /// Fusion plus prediction; returns the fusion diagnostics, the pooled
    /// representation, and the scores.
    pub fn fuse_and_predict(
        &self,
        g: &mut Graph,
        dominant: Modality,
        surrogates: &PerModality<Var>,
    ) -> (FusionOutput, Var, Var) {
        let out = self.fusion.forward(g, &self.store, dominant, surrogates);
        let dom_top = *out.dom_streams.last().unwrap();
        let (pooled, y_hat) = self.prediction.forward(g, &self.store, dom_top, out.fused);
        (out, pooled, y_hat)
    }
}

/// The two modalities other than `m`, in (l, a, v) order.
pub fn others(m: Modality) -> [Modality; 2] {
    match m {
        Modality::Language => [Modality::Acoustic, Modality::Visual],
        Modality::Acoustic => [Modality::Language, Modality::Visual],
        Modality::Visual => [Modality::Language, Modality::Acoustic],
    }
}

pub struct InferenceOutput {
    pub y_hat: Vec<f64>,
    pub integrity_raw: PerModality<Vec<f64>>,
    /// Clamped to [0, 1], as used by the blend and the dominant pick.
    pub integrity: PerModality<Vec<f64>>,
    pub dominant: Modality,
}

impl ModelState {
    /// Full eval-mode pipeline on one batch of (possibly corrupted)
    /// features, skipping the training-only decoders and discriminators.
    pub fn infer_batch(
        &self,
        features: &PerModality<Tensor>,
        force_full_integrity: bool,
    ) -> InferenceOutput {
        let n = features.l.shape[0];
        let mut g = Graph::eval();
        let embedded = self.embed_batch(&mut g, features);
        let raw = self.integrity_scores(&mut g, &embedded);
        let integrity_raw = PerModality::from_fn(|m| g.value(*raw.get(m)).data.clone());
        let integrity = if force_full_integrity {
            PerModality::from_fn(|_| vec![1.0; n])
        } else {
            integrity_raw.map(|v| v.iter().map(|x| x.clamp(0.0, 1.0)).collect())
        };
        let (shared, _) = self.disentangle_all(&mut g, &embedded);
        let surrogates =
            self.build_surrogates(&mut g, &embedded, &shared, &raw, force_full_integrity);
        let dominant = select_dominant(&integrity);
        let (_, _, y_hat) = self.fuse_and_predict(&mut g, dominant, &surrogates);
        InferenceOutput {
            y_hat: g.value(y_hat).data.clone(),
            integrity_raw,
            integrity,
            dominant,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{
        assemble_batch, features_to_tensor, generate_synthetic_dataset, SyntheticSpec,
    };
    use crate::missingness::{apply_missingness, mode_plan};

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_train: 8,
            dims: PerModality::new(
                SeqDims { steps: 6, width: 5 },
                SeqDims { steps: 5, width: 4 },
                SeqDims { steps: 7, width: 3 },
            ),
            ..SyntheticSpec::default()
        }
    }

    fn small_model(seed: u64) -> ModelState {
        let cfg = ModelConfig {
            t: 4,
            d: 8,
            heads: 2,
            encoder_depth: 1,
            fusion_layers: 2,
            ff_multiplier: 2,
            dropout: 0.1,
        };
        ModelState::new(
            cfg,
            small_spec().dims,
            SimilarityConstraint::PairwiseMse,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn construction_is_deterministic_and_covers_every_group() {
        let a = small_model(3);
        let b = small_model(3);
        assert_eq!(a.store.len(), b.store.len());
        for ((_, pa), (_, pb)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(pa.path, pb.path);
            assert_eq!(pa.value.data, pb.value.data);
        }
        for group in [
            ParamGroup::EmbedProjection,
            ParamGroup::EmbedEncoder,
            ParamGroup::Integrity,
            ParamGroup::SharedEncoder,
            ParamGroup::PrivateEncoder,
            ParamGroup::Decoder,
            ParamGroup::Discriminator,
            ParamGroup::Fusion,
            ParamGroup::Prediction,
        ] {
            assert!(
                a.store.iter().any(|(_, p)| p.group == group),
                "no parameters in group {group:?}"
            );
        }
    }

    #[test]
    fn pair_discriminators_exist_only_for_the_mi_constraint() {
        let base = small_model(4);
        assert!(base.pair_discs.is_none());
        let with =
            ModelState::new(base.config, base.dims, SimilarityConstraint::PairwiseMi, 4).unwrap();
        assert!(with.pair_discs.is_some());
        assert!(with.store.len() > base.store.len());
    }

    #[test]
    fn invalid_head_split_is_rejected() {
        let cfg = ModelConfig {
            d: 10,
            heads: 4,
            ..ModelConfig::default()
        };
        let err = ModelState::new(cfg, small_spec().dims, SimilarityConstraint::PairwiseMse, 1)
            .unwrap_err();
        assert!(err.to_string().contains("divisible"), "{err}");
    }

    #[test]
    fn forward_stays_finite_under_every_retention_mode() {
        let model = small_model(5);
        let spec = small_spec();
        let ds = generate_synthetic_dataset(&spec, "train").unwrap();
        let batch = assemble_batch(&ds, &[0, 1, 2, 3]);
        for mode in 0..6 {
            let plan = mode_plan(mode, ds.samples.len(), spec.dims.map(|d| d.steps)).unwrap();
            let corrupted = apply_missingness(&batch, &plan, None).unwrap();
            let features = PerModality::from_fn(|m| {
                features_to_tensor(corrupted.features.get(m), batch.len(), *batch.dims.get(m))
            });
            let out = model.infer_batch(&features, false);
            assert_eq!(out.y_hat.len(), 4);
            assert!(
                out.y_hat.iter().all(|v| v.is_finite()),
                "mode {mode} produced a non-finite score"
            );
            for (m, scores) in out.integrity_raw.iter() {
                assert!(
                    scores.iter().all(|v| v.is_finite()),
                    "mode {mode} produced a non-finite {m} integrity score"
                );
            }
        }
    }

    #[test]
    fn forcing_full_integrity_changes_the_blend() {
        let model = small_model(6);
        let spec = small_spec();
        let ds = generate_synthetic_dataset(&spec, "train").unwrap();
        let batch = assemble_batch(&ds, &[0, 1, 2]);
        let plan = mode_plan(0, ds.samples.len(), spec.dims.map(|d| d.steps)).unwrap();
        let corrupted = apply_missingness(&batch, &plan, None).unwrap();
        let features = PerModality::from_fn(|m| {
            features_to_tensor(corrupted.features.get(m), batch.len(), *batch.dims.get(m))
        });
        let forced = model.infer_batch(&features, true);
        assert_eq!(forced.dominant, Modality::Language);
        assert!(forced.integrity.l.iter().all(|&v| v == 1.0));
        let free = model.infer_batch(&features, false);
        assert!(free.integrity.l.iter().all(|v| v.is_finite()));
        assert_ne!(forced.y_hat, free.y_hat);
    }

    #[test]
    fn teacher_targets_match_an_explicit_clean_pass() {
        let model = small_model(7);
        let spec = small_spec();
        let ds = generate_synthetic_dataset(&spec, "train").unwrap();
        let batch = assemble_batch(&ds, &[0, 1]);
        let features = PerModality::from_fn(|m| {
            features_to_tensor(batch.features.get(m), batch.len(), *batch.dims.get(m))
        });
        let (clean_embed, clean_sem) = model.teacher_targets(&features);
        let mut g = Graph::eval();
        let embedded = model.embed_batch(&mut g, &features);
        for m in Modality::ALL {
            assert_eq!(g.value(*embedded.get(m)).data, clean_embed.get(m).data);
        }
        let (shared, _) = model.disentangle_all(&mut g, &embedded);
        for m in Modality::ALL {
            assert_eq!(g.value(*shared.get(m)).data, clean_sem.get(m).data);
        }
    }
}
