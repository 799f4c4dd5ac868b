//! Simulated dual-level missingness with exact completeness labels.
//!
//! Corruption happens at two levels: whole modalities vanish (drawn uniformly
//! from the six ways to drop a proper nonempty subset, so at least one
//! modality always survives), and surviving modalities lose a random fraction
//! of their time steps. The fraction of steps kept is recorded per modality
//! as the completeness label the estimator trains against.
//!
//! Plans are pure functions of (seed, sample index): the per-sample draw
//! order is one uniform for the drop decision, one subset pick if it fired,
//! then per surviving modality in (l, a, v) order a ratio draw (skipped for
//! [`IntraMode::Fixed`]) followed by a step shuffle.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{IfusionError, Result};
use crate::rng::CounterRng;
use crate::{Modality, PerModality};

/// How the per-modality masked-step ratio is chosen for surviving modalities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntraMode {
    /// Ratio drawn uniformly from [0, 1) per (sample, modality).
    Uniform,
    /// Every surviving modality masks the same fixed ratio of steps.
    Fixed(f64),
}

impl IntraMode {
    pub fn validate(&self) -> Result<()> {
        if let IntraMode::Fixed(r) = self {
            if !r.is_finite() || !(0.0..=1.0).contains(r) {
                return Err(IfusionError::Config(format!(
                    "fixed masking ratio {r} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// The six droppable subsets, in the order the subset draw indexes them.
const DROP_SUBSETS: [[bool; 3]; 6] = [
    [true, false, false],
    [false, true, false],
    [false, false, true],
    [true, true, false],
    [true, false, true],
    [false, true, true],
];

/// Retained modalities per evaluation mode: pairs first, then singletons.
pub const MODE_RETAINED: [[bool; 3]; 6] = [
    [false, true, true],
    [true, false, true],
    [true, true, false],
    [false, false, true],
    [false, true, false],
    [true, false, false],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMissingness {
    /// Whole-modality drops from the subset draw.
    pub inter_drop: PerModality<bool>,
    /// Per step: true if the step survives. All false for dropped modalities.
    pub kept_steps: PerModality<Vec<bool>>,
    /// Kept step count over total steps, exactly.
    pub integrity: PerModality<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingPlan {
    pub seed: u64,
    pub drop_rate: f64,
    pub steps: PerModality<usize>,
    pub samples: Vec<SampleMissingness>,
}

impl MissingPlan {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn mask_one_sample(
    rng: &mut CounterRng,
    steps: PerModality<usize>,
    drop_rate: f64,
    intra: IntraMode,
) -> SampleMissingness {
    let dropped = if rng.next_f64() < drop_rate {
        DROP_SUBSETS[rng.next_below(DROP_SUBSETS.len())]
    } else {
        [false; 3]
    };
    let inter_drop = PerModality::from_fn(|m| dropped[m.index()]);
    let mut kept_steps: PerModality<Vec<bool>> = PerModality::default();
    let mut integrity = PerModality::new(0.0, 0.0, 0.0);
    for m in Modality::ALL {
        let t = *steps.get(m);
        if *inter_drop.get(m) {
            *kept_steps.get_mut(m) = vec![false; t];
            continue;
        }
        let ratio = match intra {
            IntraMode::Uniform => rng.next_f64(),
            IntraMode::Fixed(r) => r,
        };
        let masked = (ratio * t as f64).round() as usize;
        let mut order: Vec<usize> = (0..t).collect();
        rng.shuffle(&mut order);
        let mut kept = vec![true; t];
        for &idx in &order[..masked] {
            kept[idx] = false;
        }
        *integrity.get_mut(m) = (t - masked) as f64 / t as f64;
        *kept_steps.get_mut(m) = kept;
    }
    SampleMissingness {
        inter_drop,
        kept_steps,
        integrity,
    }
}

pub fn sample_missing_plan(
    n: usize,
    steps: PerModality<usize>,
    drop_rate: f64,
    intra: IntraMode,
    seed: u64,
) -> Result<MissingPlan> {
    if !drop_rate.is_finite() || !(0.0..=1.0).contains(&drop_rate) {
        return Err(IfusionError::Config(format!(
            "drop_rate {drop_rate} outside [0, 1]"
        )));
    }
    intra.validate()?;
    let root = CounterRng::new(seed).derive_named("missing-plan");
    let samples = crate::par::map_indexed(n, |i| {
        let mut rng = root.derive(i as u64);
        mask_one_sample(&mut rng, steps, drop_rate, intra)
    });
    Ok(MissingPlan {
        seed,
        drop_rate,
        steps,
        samples,
    })
}

/// Fixed-pattern plan: the mode's retained modalities stay complete, the
/// rest are fully dropped.
pub fn mode_plan(mode: usize, n: usize, steps: PerModality<usize>) -> Result<MissingPlan> {
    if mode >= MODE_RETAINED.len() {
        return Err(IfusionError::Config(format!(
            "mode {mode} out of range 0..{}",
            MODE_RETAINED.len()
        )));
    }
    let retained = MODE_RETAINED[mode];
    let sample = SampleMissingness {
        inter_drop: PerModality::from_fn(|m| !retained[m.index()]),
        kept_steps: PerModality::from_fn(|m| vec![retained[m.index()]; *steps.get(m)]),
        integrity: PerModality::from_fn(|m| if retained[m.index()] { 1.0 } else { 0.0 }),
    };
    Ok(MissingPlan {
        seed: mode as u64,
        drop_rate: 1.0,
        steps,
        samples: vec![sample; n],
    })
}

/// A batch after corruption: masked steps overwritten, labels of the exact
/// surviving fraction attached.
#[derive(Debug, Clone)]
pub struct CorruptedBatch {
    pub features: PerModality<Vec<f32>>,
    /// Exact completeness per modality, [N] each.
    pub integrity: PerModality<Vec<f64>>,
    /// True where the whole modality was dropped, [N] each.
    pub inter_drop: PerModality<Vec<bool>>,
}

/// Overwrite masked steps: acoustic and visual steps become zero vectors,
/// language steps become `unknown_vector` (zeros when absent). Surviving
/// steps are copied bit-for-bit. `batch.indices` picks each sample's row in
/// the plan.
pub fn apply_missingness(
    batch: &Batch,
    plan: &MissingPlan,
    unknown_vector: Option<&[f32]>,
) -> Result<CorruptedBatch> {
    for m in Modality::ALL {
        if batch.dims.get(m).steps != *plan.steps.get(m) {
            return Err(IfusionError::Shape(format!(
                "plan has {} steps for modality {m}, batch has {}",
                plan.steps.get(m),
                batch.dims.get(m).steps
            )));
        }
    }
    if let Some(u) = unknown_vector {
        if u.len() != batch.dims.l.width {
            return Err(IfusionError::Config(format!(
                "unknown_vector has {} entries, language width is {}",
                u.len(),
                batch.dims.l.width
            )));
        }
    }
    for &idx in &batch.indices {
        if idx >= plan.len() {
            return Err(IfusionError::Data(format!(
                "batch sample index {idx} outside plan of {} samples",
                plan.len()
            )));
        }
    }
    let features = PerModality::from_fn(|m| {
        let dims = *batch.dims.get(m);
        let src = batch.features.get(m);
        let mut out = src.clone();
        let per = dims.steps * dims.width;
        for (row, &plan_idx) in batch.indices.iter().enumerate() {
            let kept = plan.samples[plan_idx].kept_steps.get(m);
            for (t, &keep) in kept.iter().enumerate() {
                if keep {
                    continue;
                }
                let at = row * per + t * dims.width;
                match (m, unknown_vector) {
                    (Modality::Language, Some(u)) => out[at..at + dims.width].copy_from_slice(u),
                    _ => out[at..at + dims.width].fill(0.0),
                }
            }
        }
        out
    });
    let integrity = PerModality::from_fn(|m| {
        batch
            .indices
            .iter()
            .map(|&i| *plan.samples[i].integrity.get(m))
            .collect()
    });
    let inter_drop = PerModality::from_fn(|m| {
        batch
            .indices
            .iter()
            .map(|&i| *plan.samples[i].inter_drop.get(m))
            .collect()
    });
    Ok(CorruptedBatch {
        features,
        integrity,
        inter_drop,
    })
}
