//! Two-stage optimization: loss assembly over corrupted batches, AdamW with
//! per-parameter state, warmup-cosine scheduling, binary checkpoints, and
//! the epoch driver.
//!
//! Stage one trains only the embedding projections and the integrity
//! estimators against the completeness targets; everything else stays
//! bitwise frozen. Stage two unfreezes the full model and adds the
//! prediction objective. Every random decision is derived from the run
//! seed, so a run is a pure function of its configuration.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, RunConfig};
use crate::data::{
    assemble_batch, epoch_batches, features_to_tensor, generate_synthetic_dataset,
    load_feature_archive, Dataset, SeqDims,
};
use crate::error::{IfusionError, Result};
use crate::evaluation::predict_dataset;
use crate::graph::{Graph, Var};
use crate::missingness::{apply_missingness, sample_missing_plan, MissingPlan};
use crate::model::completion::{
    decoder_completion_loss, difference_loss, pairwise_mi_similarity, similarity_loss,
    three_way_similarity, DecoderLossWeights,
};
use crate::model::fusion::prediction_loss;
use crate::model::integrity::integrity_loss;
use crate::model::{ModelState, SimilarityConstraint};
use crate::nn::{ParamGroup, ParamId, ParamStore};
use crate::rng::CounterRng;
use crate::tensor::Tensor;
use crate::{Modality, PerModality};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Integrity estimation term.
    pub alpha: f64,
    /// Completion term (shallow and deep combined).
    pub beta: f64,
    /// Prediction term, active in stage two.
    pub sigma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            beta: 0.4,
            sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs spent in the estimation-only stage before joint training.
    pub stage1_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    /// Stage-two epochs without a validation improvement before stopping.
    pub early_stop_patience: usize,
    pub shuffle: bool,
    pub loss_weights: LossWeights,
    pub decoder_weights: DecoderLossWeights,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 150,
            stage1_epochs: 40,
            lr: 1e-4,
            weight_decay: 1e-4,
            warmup_epochs: 5,
            early_stop_patience: 20,
            shuffle: true,
            loss_weights: LossWeights::default(),
            decoder_weights: DecoderLossWeights::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(IfusionError::Config("training.batch_size is zero".into()));
        }
        if self.epochs == 0 {
            return Err(IfusionError::Config("training.epochs is zero".into()));
        }
        if self.stage1_epochs > self.epochs {
            return Err(IfusionError::Config(format!(
                "training.stage1_epochs {} exceeds epochs {}",
                self.stage1_epochs, self.epochs
            )));
        }
        if self.warmup_epochs > self.epochs {
            return Err(IfusionError::Config(format!(
                "training.warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(IfusionError::Config(format!(
                "training.lr {} must be positive",
                self.lr
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(IfusionError::Config(format!(
                "training.weight_decay {} must be non-negative",
                self.weight_decay
            )));
        }
        if self.early_stop_patience == 0 {
            return Err(IfusionError::Config(
                "training.early_stop_patience is zero".into(),
            ));
        }
        let w = &self.loss_weights;
        let dw = &self.decoder_weights;
        for (name, v) in [
            ("alpha", w.alpha),
            ("beta", w.beta),
            ("sigma", w.sigma),
            ("mse_global", dw.mse_global),
            ("mi_global", dw.mi_global),
            ("mse_semantic", dw.mse_semantic),
            ("mi_semantic", dw.mi_semantic),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(IfusionError::Config(format!(
                    "loss weight {name} = {v} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Embedding projections and integrity estimators only.
    EstimationWarmup,
    /// Every parameter group.
    Full,
}

impl Stage {
    pub fn trains(self, group: ParamGroup) -> bool {
        match self {
            Stage::EstimationWarmup => {
                matches!(group, ParamGroup::EmbedProjection | ParamGroup::Integrity)
            }
            Stage::Full => true,
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Stage::EstimationWarmup => 1,
            Stage::Full => 2,
        }
    }
}

pub fn stage_for_epoch(cfg: &TrainingConfig, epoch: usize, single_stage: bool) -> Stage {
    if !single_stage && epoch < cfg.stage1_epochs {
        Stage::EstimationWarmup
    } else {
        Stage::Full
    }
}

/// Linear warmup to the base rate, then cosine decay to zero across the
/// remaining epochs. When every epoch is warmup the rate simply holds.
pub fn learning_rate(cfg: &TrainingConfig, epoch: usize) -> f64 {
    if epoch < cfg.warmup_epochs {
        return cfg.lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64;
    }
    if cfg.epochs <= cfg.warmup_epochs {
        return cfg.lr;
    }
    let t = (epoch - cfg.warmup_epochs) as f64 / (cfg.epochs - cfg.warmup_epochs) as f64;
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Raw (unweighted) values of every loss term for one batch or epoch.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub ie: f64,
    pub sim: f64,
    pub diff: f64,
    pub mse_global: f64,
    pub mi_global: f64,
    pub mse_semantic: f64,
    pub mi_semantic: f64,
    pub pred: f64,
    pub total: f64,
}

impl LossTerms {
    /// First non-finite term in the fixed reporting order, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("integrity_estimation", self.ie),
            ("similarity", self.sim),
            ("difference", self.diff),
            ("mse_global", self.mse_global),
            ("mi_global", self.mi_global),
            ("mse_semantic", self.mse_semantic),
            ("mi_semantic", self.mi_semantic),
            ("prediction", self.pred),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }

    fn scaled(&self, c: f64) -> LossTerms {
        LossTerms {
            ie: self.ie * c,
            sim: self.sim * c,
            diff: self.diff * c,
            mse_global: self.mse_global * c,
            mi_global: self.mi_global * c,
            mse_semantic: self.mse_semantic * c,
            mi_semantic: self.mi_semantic * c,
            pred: self.pred * c,
            total: self.total * c,
        }
    }

    fn add_scaled(&mut self, other: &LossTerms, c: f64) {
        self.ie += other.ie * c;
        self.sim += other.sim * c;
        self.diff += other.diff * c;
        self.mse_global += other.mse_global * c;
        self.mi_global += other.mi_global * c;
        self.mse_semantic += other.mse_semantic * c;
        self.mi_semantic += other.mi_semantic * c;
        self.pred += other.pred * c;
        self.total += other.total * c;
    }
}

/// Weighted sum of the three top-level objectives. The prediction term is
/// omitted entirely during the estimation stage.
pub fn compose_total(g: &mut Graph, w: &LossWeights, ie: Var, rec: Var, pred: Option<Var>) -> Var {
    let a = g.scale(ie, w.alpha);
    let b = g.scale(rec, w.beta);
    let mut total = g.add(a, b);
    if let Some(p) = pred {
        let c = g.scale(p, w.sigma);
        total = g.add(total, c);
    }
    total
}

/// Everything one optimization step needs besides the model itself.
pub struct BatchInputs<'a> {
    /// Corrupted features, [N, steps, width] per modality.
    pub corrupted: &'a PerModality<Tensor>,
    /// Exact completeness targets, [N] per modality.
    pub integrity_target: &'a PerModality<Tensor>,
    /// Clean-pass embeddings from the teacher pass, gradient-free.
    pub clean_embedded: &'a PerModality<Tensor>,
    /// Clean-pass shared semantics from the teacher pass, gradient-free.
    pub clean_semantic: &'a PerModality<Tensor>,
    /// Labels, absent during the estimation stage.
    pub labels: Option<&'a Tensor>,
    /// Derangement pairing negatives for the MI bounds.
    pub perm: &'a [usize],
}

/// Build the full loss graph for one batch and return the scalar to
/// backpropagate plus the raw term values.
pub fn batch_losses(
    g: &mut Graph,
    model: &ModelState,
    inputs: &BatchInputs,
    weights: &LossWeights,
    decoder_weights: DecoderLossWeights,
    ablation: &crate::config::AblationConfig,
) -> Result<(Var, LossTerms)> {
    let n = inputs.corrupted.l.shape[0];
    let embedded = model.embed_batch(g, inputs.corrupted);
    let integrity_raw = model.integrity_scores(g, &embedded);
    let target = PerModality::from_fn(|m| g.leaf(inputs.integrity_target.get(m).clone()));
    let ie = integrity_loss(g, &integrity_raw, &target);

    let (shared, private) = model.disentangle_all(g, &embedded);
    let sim = if ablation.disable_similarity {
        g.scalar(0.0)
    } else {
        match ablation.similarity_constraint {
            SimilarityConstraint::PairwiseMse => similarity_loss(g, &shared),
            SimilarityConstraint::ThreeWay => three_way_similarity(g, &shared),
            SimilarityConstraint::PairwiseMi => {
                let discs = model.pair_discs.as_ref().ok_or_else(|| {
                    IfusionError::Config(
                        "pairwise MI constraint requires pair discriminators".into(),
                    )
                })?;
                pairwise_mi_similarity(g, &model.store, &shared, discs, inputs.perm)?
            }
        }
    };
    let diff = if ablation.disable_difference {
        g.scalar(0.0)
    } else {
        difference_loss(g, &shared, &private)
    };
    let mut rec = g.add(sim, diff);

    let surrogates = model.build_surrogates(
        g,
        &embedded,
        &shared,
        &integrity_raw,
        ablation.force_full_integrity,
    );

    let mut deep = None;
    if !ablation.disable_reconstruction {
        let (reconstructed, re_encoded) = model.decode_all(g, &surrogates);
        let clean_embedded = PerModality::from_fn(|m| g.leaf(inputs.clean_embedded.get(m).clone()));
        let clean_semantic = PerModality::from_fn(|m| g.leaf(inputs.clean_semantic.get(m).clone()));
        let parts = decoder_completion_loss(
            g,
            &model.store,
            &reconstructed,
            &re_encoded,
            &clean_embedded,
            &clean_semantic,
            &model.disc_global,
            &model.disc_semantic,
            inputs.perm,
            decoder_weights,
        )?;
        rec = g.add(rec, parts.total);
        deep = Some(parts);
    }

    let mut pred_var = None;
    if let Some(labels) = inputs.labels {
        let scores = if ablation.force_full_integrity {
            PerModality::from_fn(|_| vec![1.0; n])
        } else {
            integrity_raw.map(|&v| g.value(v).data.clone())
        };
        let dominant = crate::model::fusion::select_dominant(&scores);
        let (_, _, y_hat) = model.fuse_and_predict(g, dominant, &surrogates);
        let y = g.leaf(labels.clone());
        pred_var = Some(prediction_loss(g, y_hat, y));
    }

    let total = compose_total(g, weights, ie, rec, pred_var);
    let terms = LossTerms {
        ie: g.value(ie).item(),
        sim: g.value(sim).item(),
        diff: g.value(diff).item(),
        mse_global: deep.as_ref().map_or(0.0, |p| g.value(p.mse_global).item()),
        mi_global: deep.as_ref().map_or(0.0, |p| g.value(p.mi_global).item()),
        mse_semantic: deep
            .as_ref()
            .map_or(0.0, |p| g.value(p.mse_semantic).item()),
        mi_semantic: deep.as_ref().map_or(0.0, |p| g.value(p.mi_semantic).item()),
        pred: pred_var.map_or(0.0, |p| g.value(p).item()),
        total: g.value(total).item(),
    };
    Ok((total, terms))
}

/// AdamW with decoupled weight decay and a per-parameter step count, so
/// parameters that sit out early stages keep unbiased moment corrections
/// once they start moving.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: Vec<u64>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let m = store
            .iter()
            .map(|(_, p)| Tensor::zeros(&p.value.shape))
            .collect::<Vec<_>>();
        let v = m.clone();
        let steps = vec![0; store.len()];
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m,
            v,
            steps,
        }
    }

    /// One update. Parameters in non-trainable groups and parameters with
    /// no gradient are skipped entirely: values, moments, and step counts
    /// all stay bitwise untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Tensor>],
        lr: f64,
        trainable: impl Fn(ParamGroup) -> bool,
    ) {
        for (id, param) in store.iter_mut() {
            if !trainable(param.group) {
                continue;
            }
            let Some(grad) = &grads[id.0] else {
                continue;
            };
            let i = id.0;
            self.steps[i] += 1;
            let t = self.steps[i] as f64;
            let bc1 = 1.0 - self.beta1.powf(t);
            let bc2 = 1.0 - self.beta2.powf(t);
            let m = &mut self.m[i].data;
            let v = &mut self.v[i].data;
            let p = &mut param.value.data;
            for j in 0..p.len() {
                let g = grad.data[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p[j]);
            }
        }
    }

    pub fn step_count(&self, index: usize) -> u64 {
        self.steps[index]
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IFCKPT01";

#[derive(Debug, Serialize, Deserialize)]
struct ParamRecord {
    path: String,
    group: ParamGroup,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config_hash: String,
    config: serde_json::Value,
    dims: PerModality<SeqDims>,
    epoch: usize,
    best_val_mae: Option<f64>,
    best_epoch: Option<usize>,
    params: Vec<ParamRecord>,
    opt_steps: Vec<u64>,
}

/// A checkpoint parsed from disk but not yet bound to a model.
pub struct CheckpointFile {
    header: CheckpointHeader,
    data: Vec<f64>,
}

/// A checkpoint turned back into a ready-to-use run state.
pub struct RestoredRun {
    pub config: RunConfig,
    pub model: ModelState,
    pub optimizer: AdamW,
    pub epoch: usize,
    pub best_val_mae: Option<f64>,
    pub best_epoch: Option<usize>,
}

pub fn write_checkpoint(
    path: &Path,
    cfg: &RunConfig,
    model: &ModelState,
    optimizer: &AdamW,
    epoch: usize,
    best_val_mae: Option<f64>,
    best_epoch: Option<usize>,
) -> Result<()> {
    let header = CheckpointHeader {
        config_hash: cfg.content_hash(),
        config: serde_json::to_value(cfg).expect("config serializes"),
        dims: model.dims,
        epoch,
        best_val_mae,
        best_epoch,
        params: model
            .store
            .iter()
            .map(|(_, p)| ParamRecord {
                path: p.path.clone(),
                group: p.group,
                shape: p.value.shape.clone(),
            })
            .collect(),
        opt_steps: optimizer.steps.clone(),
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    let total = model.store.total_values();
    let mut bytes = Vec::with_capacity(16 + header_bytes.len() + 3 * total * 8);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_bytes);
    for (_, p) in model.store.iter() {
        for &x in &p.value.data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    for bank in [&optimizer.m, &optimizer.v] {
        for t in bank {
            for &x in &t.data {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    fs::write(path, bytes).map_err(|e| IfusionError::io(path.display().to_string(), e))
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let bytes = fs::read(path).map_err(|e| IfusionError::io(path.display().to_string(), e))?;
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(IfusionError::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(IfusionError::Checkpoint(format!(
            "{} is truncated inside the header",
            path.display()
        )));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| IfusionError::Checkpoint(format!("unreadable header: {e}")))?;
    let body = &bytes[16 + header_len..];
    if body.len() % 8 != 0 {
        return Err(IfusionError::Checkpoint(format!(
            "{} has a ragged data section",
            path.display()
        )));
    }
    let data: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let expected: usize = header
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    if data.len() != 3 * expected {
        return Err(IfusionError::Checkpoint(format!(
            "data section holds {} values, header promises {}",
            data.len(),
            3 * expected
        )));
    }
    Ok(CheckpointFile { header, data })
}

impl CheckpointFile {
    pub fn config_hash(&self) -> &str {
        &self.header.config_hash
    }

    pub fn epoch(&self) -> usize {
        self.header.epoch
    }

    /// Rebuild the model and optimizer exactly as they were saved. The
    /// embedded configuration is re-validated and its hash re-checked, so
    /// a checkpoint edited by hand is rejected.
    pub fn restore(&self) -> Result<RestoredRun> {
        let config: RunConfig = serde_json::from_value(self.header.config.clone())
            .map_err(|e| IfusionError::Checkpoint(format!("embedded config: {e}")))?;
        config.validate()?;
        if config.content_hash() != self.header.config_hash {
            return Err(IfusionError::Checkpoint(
                "embedded config does not match its recorded hash".into(),
            ));
        }
        let mut model = ModelState::new(
            config.model,
            self.header.dims,
            config.ablation.similarity_constraint,
            config.seed,
        )?;
        if model.store.len() != self.header.params.len() {
            return Err(IfusionError::Checkpoint(format!(
                "checkpoint stores {} parameters, model has {}",
                self.header.params.len(),
                model.store.len()
            )));
        }
        for ((_, p), rec) in model.store.iter().zip(&self.header.params) {
            if p.path != rec.path || p.value.shape != rec.shape {
                return Err(IfusionError::Checkpoint(format!(
                    "parameter mismatch: checkpoint has {} {:?}, model has {} {:?}",
                    rec.path, rec.shape, p.path, p.value.shape
                )));
            }
        }
        let total = model.store.total_values();
        let mut cursor = 0usize;
        for (_, p) in model.store.iter_mut() {
            let k = p.value.numel();
            p.value.data.copy_from_slice(&self.data[cursor..cursor + k]);
            cursor += k;
        }
        let mut optimizer = AdamW::new(&model.store, config.training.weight_decay);
        for bank in [&mut optimizer.m, &mut optimizer.v] {
            for t in bank.iter_mut() {
                let k = t.numel();
                t.data.copy_from_slice(&self.data[cursor..cursor + k]);
                cursor += k;
            }
        }
        debug_assert_eq!(cursor, 3 * total);
        if self.header.opt_steps.len() != optimizer.steps.len() {
            return Err(IfusionError::Checkpoint(
                "optimizer step table has the wrong length".into(),
            ));
        }
        optimizer.steps.copy_from_slice(&self.header.opt_steps);
        Ok(RestoredRun {
            config,
            model,
            optimizer,
            epoch: self.header.epoch,
            best_val_mae: self.header.best_val_mae,
            best_epoch: self.header.best_epoch,
        })
    }
}

/// Load the train, validation, and test splits named by the data config.
pub fn load_splits(data: &DataConfig) -> Result<(Dataset, Dataset, Dataset)> {
    match data {
        DataConfig::Synthetic(spec) => Ok((
            generate_synthetic_dataset(spec, "train")?,
            generate_synthetic_dataset(spec, "valid")?,
            generate_synthetic_dataset(spec, "test")?,
        )),
        DataConfig::Archive { dir } => {
            let base = Path::new(dir);
            Ok((
                load_feature_archive(&base.join("train"))?,
                load_feature_archive(&base.join("valid"))?,
                load_feature_archive(&base.join("test"))?,
            ))
        }
    }
}

#[derive(Debug, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: u8,
    pub lr: f64,
    pub loss: LossTerms,
    pub val_mae: f64,
    pub val_ie: PerModality<f64>,
    pub best_val_mae: Option<f64>,
}

pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub best_val_mae: Option<f64>,
    pub best_epoch: Option<usize>,
    pub final_val_mae: f64,
    pub log: Vec<EpochRecord>,
}

fn merge_small_tail(mut batches: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    if batches.len() >= 2 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

/// Everything one modality's estimator trains during stage 1: its embedding
/// projection and its integrity module. Disjoint across modalities, which is
/// what makes per-modality snapshots composable.
fn snapshot_stage1_params(store: &ParamStore, m: Modality) -> Vec<(ParamId, Tensor)> {
    let integrity_prefix = format!("integrity.{m}.");
    let embed_prefix = format!("embed.{m}.");
    store
        .iter()
        .filter(|(_, p)| {
            matches!(p.group, ParamGroup::Integrity | ParamGroup::EmbedProjection)
                && (p.path.starts_with(&integrity_prefix) || p.path.starts_with(&embed_prefix))
        })
        .map(|(id, p)| (id, p.value.clone()))
        .collect()
}

fn plan_seed(seed: u64, label: &str, epoch: Option<usize>) -> u64 {
    let rng = CounterRng::new(seed).derive_named(label);
    let mut rng = match epoch {
        Some(e) => rng.derive(e as u64),
        None => rng,
    };
    rng.next_u64()
}

/// Run the two-stage loop, writing `resolved_config.json`,
/// `train_log.jsonl`, the best checkpoint as `checkpoint.bin`, and the
/// rolling `last.bin` into `out_dir`. With `resume` the run continues from
/// `last.bin` under the identical configuration.
pub fn train(cfg: &RunConfig, out_dir: &Path, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| IfusionError::io(out_dir.display().to_string(), e))?;
    let (train_set, valid_set, _) = load_splits(&cfg.data)?;
    train_set.validate()?;
    valid_set.validate()?;
    if train_set.len() < 2 {
        return Err(IfusionError::Data(
            "training needs at least 2 samples for the shuffled MI negatives".into(),
        ));
    }
    let tcfg = &cfg.training;
    let steps = train_set.dims.map(|d| d.steps);

    let (mut model, mut optimizer, start_epoch, mut best_val_mae, mut best_epoch) = if resume {
        let last = out_dir.join("last.bin");
        let file = read_checkpoint(&last)?;
        if file.config_hash() != cfg.content_hash() {
            return Err(IfusionError::Checkpoint(
                "resume config does not match the checkpointed run".into(),
            ));
        }
        let restored = file.restore()?;
        (
            restored.model,
            restored.optimizer,
            restored.epoch + 1,
            restored.best_val_mae,
            restored.best_epoch,
        )
    } else {
        let model = ModelState::new(
            cfg.model,
            train_set.dims,
            cfg.ablation.similarity_constraint,
            cfg.seed,
        )?;
        let optimizer = AdamW::new(&model.store, tcfg.weight_decay);
        (model, optimizer, 0, None, None)
    };

    let config_path = out_dir.join("resolved_config.json");
    fs::write(&config_path, cfg.to_json_pretty())
        .map_err(|e| IfusionError::io(config_path.display().to_string(), e))?;
    let log_path = out_dir.join("train_log.jsonl");
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .append(resume)
        .truncate(!resume)
        .write(true)
        .open(&log_path)
        .map_err(|e| IfusionError::io(log_path.display().to_string(), e))?;

    let fixed_plan = if cfg.missingness.resample_per_epoch {
        None
    } else {
        Some(sample_missing_plan(
            train_set.len(),
            steps,
            cfg.missingness.drop_rate,
            cfg.missingness.intra,
            plan_seed(cfg.seed, "train-plan", None),
        )?)
    };
    let valid_plan = sample_missing_plan(
        valid_set.len(),
        steps,
        cfg.missingness.drop_rate,
        cfg.missingness.intra,
        plan_seed(cfg.seed, "valid-plan", None),
    )?;
    let unknown = cfg.missingness.unknown_vector.as_deref();

    let mut log = Vec::new();
    let mut stale_epochs = 0usize;
    let mut stopped_early = false;
    let mut final_val_mae = f64::NAN;
    let mut epochs_run = start_epoch;
    let mut best_stage1: PerModality<Option<(f64, Vec<(ParamId, Tensor)>)>> =
        PerModality::from_fn(|_| None);

    for epoch in start_epoch..tcfg.epochs {
        let stage = stage_for_epoch(tcfg, epoch, cfg.ablation.single_stage);
        let lr = learning_rate(tcfg, epoch);
        let resampled;
        let epoch_plan: &MissingPlan = match &fixed_plan {
            Some(p) => p,
            None => {
                resampled = sample_missing_plan(
                    train_set.len(),
                    steps,
                    cfg.missingness.drop_rate,
                    cfg.missingness.intra,
                    plan_seed(cfg.seed, "train-plan", Some(epoch)),
                )?;
                &resampled
            }
        };
        let batches = merge_small_tail(epoch_batches(
            train_set.len(),
            tcfg.batch_size,
            tcfg.shuffle,
            cfg.seed,
            epoch,
        ));

        let mut epoch_terms = LossTerms::default();
        for (b_idx, batch_indices) in batches.iter().enumerate() {
            let batch = assemble_batch(&train_set, batch_indices);
            let n = batch.len();
            let corrupted_raw = apply_missingness(&batch, epoch_plan, unknown)?;
            let corrupted = PerModality::from_fn(|m| {
                features_to_tensor(corrupted_raw.features.get(m), n, *batch.dims.get(m))
            });
            let clean = PerModality::from_fn(|m| {
                features_to_tensor(batch.features.get(m), n, *batch.dims.get(m))
            });
            let (clean_embedded, clean_semantic) = model.teacher_targets(&clean);
            let integrity_target = PerModality::from_fn(|m| {
                Tensor::new(vec![n], corrupted_raw.integrity.get(m).clone())
            });
            let perm = CounterRng::new(cfg.seed)
                .derive_named("mi-negatives")
                .derive(epoch as u64)
                .derive(b_idx as u64)
                .derangement(n);
            let labels_tensor = Tensor::new(vec![n], batch.labels.clone());
            let labels = match stage {
                Stage::EstimationWarmup => None,
                Stage::Full => Some(&labels_tensor),
            };
            let dropout_rng = CounterRng::new(cfg.seed)
                .derive_named("dropout")
                .derive(epoch as u64)
                .derive(b_idx as u64);
            let mut g = Graph::train(dropout_rng);
            let inputs = BatchInputs {
                corrupted: &corrupted,
                integrity_target: &integrity_target,
                clean_embedded: &clean_embedded,
                clean_semantic: &clean_semantic,
                labels,
                perm: &perm,
            };
            let (total, terms) = batch_losses(
                &mut g,
                &model,
                &inputs,
                &tcfg.loss_weights,
                tcfg.decoder_weights,
                &cfg.ablation,
            )?;
            if let Some(term) = terms.first_non_finite() {
                return Err(IfusionError::Diverged(term.to_string(), epoch));
            }
            let grads = g.backward(total);
            let param_grads = g.param_grads(&grads, model.store.len());
            optimizer.step(&mut model.store, &param_grads, lr, |group| {
                stage.trains(group)
            });
            epoch_terms.add_scaled(&terms, n as f64);
        }
        let epoch_terms = epoch_terms.scaled(1.0 / train_set.len() as f64);

        let val = predict_dataset(
            &model,
            &valid_set,
            &valid_plan,
            tcfg.batch_size,
            unknown,
            cfg.ablation.force_full_integrity,
        )?;
        let val_mae = val
            .predictions
            .iter()
            .zip(&val.labels)
            .map(|(p, y)| (p - y).abs())
            .sum::<f64>()
            / val.labels.len() as f64;
        if !val_mae.is_finite() {
            return Err(IfusionError::Diverged("validation_mae".into(), epoch));
        }
        let val_ie = PerModality::from_fn(|m| {
            val.integrity_predicted
                .get(m)
                .iter()
                .zip(val.integrity_true.get(m))
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / val.labels.len() as f64
        });
        final_val_mae = val_mae;
        epochs_run = epoch + 1;

        // The three estimators share no trainable parameters during stage 1,
        // so each gets its own early-stopping decision: snapshot a modality
        // whenever its validation integrity error improves, and stitch the
        // snapshots back together when the stage ends.
        if stage == Stage::EstimationWarmup {
            for m in Modality::ALL {
                let err = *val_ie.get(m);
                let slot = best_stage1.get_mut(m);
                if slot.as_ref().is_none_or(|(b, _)| err < *b) {
                    *slot = Some((err, snapshot_stage1_params(&model.store, m)));
                }
            }
            let last_stage1 = epoch + 1 == tcfg.epochs
                || stage_for_epoch(tcfg, epoch + 1, cfg.ablation.single_stage) == Stage::Full;
            if last_stage1 {
                for m in Modality::ALL {
                    if let Some((_, params)) = best_stage1.get(m) {
                        for (id, value) in params {
                            model.store.get_mut(*id).value = value.clone();
                        }
                    }
                }
                write_checkpoint(
                    &out_dir.join("checkpoint.bin"),
                    cfg,
                    &model,
                    &optimizer,
                    epoch,
                    best_val_mae,
                    best_epoch,
                )?;
            }
        }

        if stage == Stage::Full {
            let improved = best_val_mae.map_or(true, |b| val_mae < b);
            if improved {
                best_val_mae = Some(val_mae);
                best_epoch = Some(epoch);
                stale_epochs = 0;
                write_checkpoint(
                    &out_dir.join("checkpoint.bin"),
                    cfg,
                    &model,
                    &optimizer,
                    epoch,
                    best_val_mae,
                    best_epoch,
                )?;
            } else {
                stale_epochs += 1;
            }
        }

        let record = EpochRecord {
            epoch,
            stage: stage.number(),
            lr,
            loss: epoch_terms,
            val_mae,
            val_ie,
            best_val_mae,
        };
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(log_file, "{line}")
            .map_err(|e| IfusionError::io(log_path.display().to_string(), e))?;
        log.push(record);

        write_checkpoint(
            &out_dir.join("last.bin"),
            cfg,
            &model,
            &optimizer,
            epoch,
            best_val_mae,
            best_epoch,
        )?;

        if stage == Stage::Full && stale_epochs >= tcfg.early_stop_patience {
            stopped_early = true;
            break;
        }
    }
    log_file
        .flush()
        .map_err(|e| IfusionError::io(log_path.display().to_string(), e))?;

    let best_path = out_dir.join("checkpoint.bin");
    if !best_path.exists() {
        write_checkpoint(
            &best_path,
            cfg,
            &model,
            &optimizer,
            epochs_run.saturating_sub(1),
            best_val_mae,
            best_epoch,
        )?;
    }

    Ok(TrainOutcome {
        out_dir: out_dir.to_path_buf(),
        epochs_run,
        stopped_early,
        best_val_mae,
        best_epoch,
        final_val_mae,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::AblationConfig;
    use crate::data::SyntheticSpec;
    use crate::model::ModelConfig;

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            t: 4,
            d: 8,
            heads: 2,
            encoder_depth: 1,
            fusion_layers: 2,
            ff_multiplier: 2,
            dropout: 0.0,
        }
    }

    fn tiny_run_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data = DataConfig::Synthetic(SyntheticSpec {
            n_train: 6,
            n_valid: 4,
            n_test: 4,
            dims: PerModality::new(
                SeqDims { steps: 5, width: 4 },
                SeqDims { steps: 4, width: 3 },
                SeqDims { steps: 6, width: 4 },
            ),
            ..SyntheticSpec::default()
        });
        cfg.model = tiny_model_config();
        cfg.training.batch_size = 3;
        cfg.training.epochs = 3;
        cfg.training.stage1_epochs = 2;
        cfg.training.warmup_epochs = 1;
        cfg.training.lr = 1e-3;
        cfg
    }

    fn tiny_model(seed: u64) -> ModelState {
        let dims = PerModality::new(
            SeqDims { steps: 5, width: 4 },
            SeqDims { steps: 4, width: 3 },
            SeqDims { steps: 6, width: 4 },
        );
        ModelState::new(
            tiny_model_config(),
            dims,
            SimilarityConstraint::PairwiseMse,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn defaults_match_the_documented_recipe() {
        let cfg = TrainingConfig::default();
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.epochs, 150);
        assert_eq!(cfg.stage1_epochs, 40);
        assert_eq!(cfg.lr, 1e-4);
        assert_eq!(cfg.weight_decay, 1e-4);
        assert_eq!(cfg.warmup_epochs, 5);
        assert_eq!(cfg.early_stop_patience, 20);
        assert!(cfg.shuffle);
        assert_eq!(cfg.loss_weights.alpha, 0.9);
        assert_eq!(cfg.loss_weights.beta, 0.4);
        assert_eq!(cfg.loss_weights.sigma, 1.0);
        cfg.validate().unwrap();
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        let mut cfg = TrainingConfig::default();
        cfg.stage1_epochs = cfg.epochs + 1;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainingConfig::default();
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainingConfig::default();
        cfg.loss_weights.beta = -0.1;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainingConfig::default();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn warmup_then_cosine_schedule() {
        let cfg = TrainingConfig {
            lr: 1e-3,
            warmup_epochs: 5,
            epochs: 105,
            ..TrainingConfig::default()
        };
        assert!((learning_rate(&cfg, 0) - 2e-4).abs() < 1e-18);
        assert!((learning_rate(&cfg, 4) - 1e-3).abs() < 1e-18);
        assert!((learning_rate(&cfg, 5) - 1e-3).abs() < 1e-18);
        let mid = learning_rate(&cfg, 55);
        assert!((mid - 5e-4).abs() < 1e-12);
        assert!(learning_rate(&cfg, 104) < 1e-5);
        let degenerate = TrainingConfig {
            warmup_epochs: 3,
            epochs: 3,
            stage1_epochs: 0,
            ..TrainingConfig::default()
        };
        for e in 0..3 {
            assert!(learning_rate(&degenerate, e).is_finite());
        }
    }

    #[test]
    fn stage_composition_hits_the_expected_totals() {
        let w = LossWeights::default();
        let mut g = Graph::eval();
        let ie = g.scalar(1.0);
        let rec = g.scalar(1.0);
        let stage1 = compose_total(&mut g, &w, ie, rec, None);
        assert!((g.value(stage1).item() - 1.3).abs() < 1e-10);
        let pred = g.scalar(2.0);
        let stage2 = compose_total(&mut g, &w, ie, rec, Some(pred));
        assert!((g.value(stage2).item() - 3.3).abs() < 1e-10);
    }

    #[test]
    fn divergence_reporting_follows_the_term_order() {
        let mut terms = LossTerms::default();
        assert_eq!(terms.first_non_finite(), None);
        terms.pred = f64::NAN;
        terms.mi_global = f64::INFINITY;
        assert_eq!(terms.first_non_finite(), Some("mi_global"));
        terms.sim = f64::NAN;
        assert_eq!(terms.first_non_finite(), Some("similarity"));
    }

    #[test]
    fn adamw_first_step_matches_the_closed_form() {
        let mut store = ParamStore::new();
        let id = store.add("p", ParamGroup::Prediction, Tensor::scalar(1.0));
        let mut opt = AdamW::new(&store, 0.0);
        let grads = vec![Some(Tensor::scalar(0.5))];
        opt.step(&mut store, &grads, 0.1, |_| true);
        // With bias correction, step one reduces to p - lr * g/(|g| + eps).
        let expected = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8));
        assert!((store.value(id).item() - expected).abs() < 1e-15);
        assert_eq!(opt.step_count(0), 1);
    }

    #[test]
    fn weight_decay_is_decoupled_from_the_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("p", ParamGroup::Prediction, Tensor::scalar(2.0));
        let mut opt = AdamW::new(&store, 0.1);
        let grads = vec![Some(Tensor::scalar(0.0))];
        opt.step(&mut store, &grads, 0.1, |_| true);
        assert!((store.value(id).item() - 2.0 * (1.0 - 0.01)).abs() < 1e-15);
    }

    #[test]
    fn frozen_groups_stay_bitwise_identical() {
        let mut store = ParamStore::new();
        let frozen = store.add("enc", ParamGroup::EmbedEncoder, Tensor::full(&[3], 0.7));
        let live = store.add("proj", ParamGroup::EmbedProjection, Tensor::full(&[3], 0.7));
        let before = store.value(frozen).data.clone();
        let mut opt = AdamW::new(&store, 0.01);
        let grads = vec![Some(Tensor::full(&[3], 1.0)), Some(Tensor::full(&[3], 1.0))];
        for _ in 0..3 {
            opt.step(&mut store, &grads, 0.05, |g| {
                Stage::EstimationWarmup.trains(g)
            });
        }
        assert_eq!(store.value(frozen).data, before);
        assert_eq!(opt.step_count(0), 0);
        assert_ne!(store.value(live).data, before);
        assert_eq!(opt.step_count(1), 3);
    }

    #[test]
    fn missing_gradients_are_skipped() {
        let mut store = ParamStore::new();
        let id = store.add("p", ParamGroup::Fusion, Tensor::scalar(1.5));
        let mut opt = AdamW::new(&store, 0.5);
        opt.step(&mut store, &[None], 0.1, |_| true);
        assert_eq!(store.value(id).item(), 1.5);
        assert_eq!(opt.step_count(0), 0);
    }

    #[test]
    fn checkpoints_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_run_config();
        cfg.seed = 42;
        let mut model = tiny_model(42);
        let mut opt = AdamW::new(&model.store, cfg.training.weight_decay);
        let mut rng = CounterRng::new(9);
        for _ in 0..2 {
            let grads: Vec<Option<Tensor>> = model
                .store
                .iter()
                .map(|(_, p)| {
                    Some(Tensor::new(
                        p.value.shape.clone(),
                        p.value.data.iter().map(|_| rng.next_normal()).collect(),
                    ))
                })
                .collect();
            opt.step(&mut model.store, &grads, 1e-3, |_| true);
        }
        let path = dir.path().join("ck.bin");
        write_checkpoint(&path, &cfg, &model, &opt, 7, Some(0.5), Some(6)).unwrap();
        let restored = read_checkpoint(&path).unwrap().restore().unwrap();
        assert_eq!(restored.epoch, 7);
        assert_eq!(restored.best_val_mae, Some(0.5));
        assert_eq!(restored.best_epoch, Some(6));
        assert_eq!(restored.config.content_hash(), cfg.content_hash());
        for ((_, a), (_, b)) in model.store.iter().zip(restored.model.store.iter()) {
            assert_eq!(a.value.data, b.value.data, "param {}", a.path);
        }
        for i in 0..model.store.len() {
            assert_eq!(opt.m[i].data, restored.optimizer.m[i].data);
            assert_eq!(opt.v[i].data, restored.optimizer.v[i].data);
            assert_eq!(opt.steps[i], restored.optimizer.steps[i]);
        }
    }

    #[test]
    fn tampered_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run_config();
        let model = tiny_model(cfg.seed);
        let opt = AdamW::new(&model.store, 0.0);
        let path = dir.path().join("ck.bin");
        write_checkpoint(&path, &cfg, &model, &opt, 0, None, None).unwrap();
        let mut file = read_checkpoint(&path).unwrap();
        file.header.config["seed"] = serde_json::json!(999);
        let err = match file.restore() {
            Ok(_) => panic!("tampered checkpoint restored"),
            Err(e) => e,
        };
        assert_eq!(err.kind(), "checkpoint");

        let garbage = dir.path().join("garbage.bin");
        fs::write(&garbage, b"not a checkpoint").unwrap();
        assert!(read_checkpoint(&garbage).is_err());
    }

    #[test]
    fn tail_batches_below_two_samples_are_merged() {
        let batches = merge_small_tail(vec![vec![0, 1, 2], vec![3]]);
        assert_eq!(batches, vec![vec![0, 1, 2, 3]]);
        let batches = merge_small_tail(vec![vec![0, 1], vec![2, 3]]);
        assert_eq!(batches, vec![vec![0, 1], vec![2, 3]]);
        let single = merge_small_tail(vec![vec![0]]);
        assert_eq!(single, vec![vec![0]]);
    }

    #[test]
    fn short_run_trains_logs_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run_config();
        let out = train(&cfg, dir.path(), false).unwrap();
        assert_eq!(out.epochs_run, 3);
        assert!(!out.stopped_early);
        assert_eq!(out.log.len(), 3);
        assert_eq!(out.log[0].stage, 1);
        assert_eq!(out.log[2].stage, 2);
        assert!(out.final_val_mae.is_finite());
        assert!(out.best_val_mae.is_some());
        assert!(dir.path().join("resolved_config.json").exists());
        assert!(dir.path().join("checkpoint.bin").exists());
        assert!(dir.path().join("last.bin").exists());
        let log_text = fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
        assert_eq!(log_text.lines().count(), 3);

        let mut longer = cfg.clone();
        longer.training.epochs = 4;
        assert!(train(&longer, dir.path(), true).is_err());

        let resumed = train(&cfg, dir.path(), true).unwrap();
        assert_eq!(resumed.epochs_run, 3);
        assert!(resumed.log.is_empty());
    }

    #[test]
    fn warmup_stage_leaves_downstream_groups_at_their_init() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_run_config();
        cfg.training.epochs = 2;
        cfg.training.stage1_epochs = 2;
        let out = train(&cfg, dir.path(), false).unwrap();
        assert_eq!(out.epochs_run, 2);
        let trained = read_checkpoint(&dir.path().join("last.bin"))
            .unwrap()
            .restore()
            .unwrap();
        let fresh = tiny_model(cfg.seed);
        let mut changed = 0;
        for ((_, a), (_, b)) in fresh.store.iter().zip(trained.model.store.iter()) {
            let moves = Stage::EstimationWarmup.trains(a.group);
            if a.value.data != b.value.data {
                changed += 1;
                assert!(moves, "frozen parameter {} moved", a.path);
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn ablations_change_the_recorded_terms() {
        let cfg = tiny_run_config();
        let (train_set, _, _) = load_splits(&cfg.data).unwrap();
        let model = tiny_model(cfg.seed);
        let batch = assemble_batch(&train_set, &[0, 1, 2]);
        let steps = train_set.dims.map(|d| d.steps);
        let plan =
            sample_missing_plan(3, steps, 0.5, crate::missingness::IntraMode::Uniform, 5).unwrap();
        let corrupted_raw = apply_missingness(&batch, &plan, None).unwrap();
        let corrupted = PerModality::from_fn(|m| {
            features_to_tensor(corrupted_raw.features.get(m), 3, *batch.dims.get(m))
        });
        let clean = PerModality::from_fn(|m| {
            features_to_tensor(batch.features.get(m), 3, *batch.dims.get(m))
        });
        let (clean_embedded, clean_semantic) = model.teacher_targets(&clean);
        let integrity_target =
            PerModality::from_fn(|m| Tensor::new(vec![3], corrupted_raw.integrity.get(m).clone()));
        let labels = Tensor::new(vec![3], batch.labels.clone());
        let perm = vec![1, 2, 0];
        let inputs = BatchInputs {
            corrupted: &corrupted,
            integrity_target: &integrity_target,
            clean_embedded: &clean_embedded,
            clean_semantic: &clean_semantic,
            labels: Some(&labels),
            perm: &perm,
        };
        let w = LossWeights::default();
        let dw = DecoderLossWeights::default();

        let mut g = Graph::eval();
        let (_, base) =
            batch_losses(&mut g, &model, &inputs, &w, dw, &AblationConfig::default()).unwrap();
        assert!(base.total.is_finite());
        assert!(base.sim != 0.0 && base.diff != 0.0);

        let ablated = AblationConfig {
            disable_similarity: true,
            disable_reconstruction: true,
            ..AblationConfig::default()
        };
        let mut g = Graph::eval();
        let (_, cut) = batch_losses(&mut g, &model, &inputs, &w, dw, &ablated).unwrap();
        assert_eq!(cut.sim, 0.0);
        assert_eq!(cut.mse_global, 0.0);
        assert_eq!(cut.mi_global, 0.0);
        assert_eq!(cut.diff, base.diff);
    }
}
