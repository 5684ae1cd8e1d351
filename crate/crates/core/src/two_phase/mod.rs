//! Toy two-phase pipeline: train a convolutional classifier, convert it into
//! an attention classifier and keep training.

mod dataset;
mod model;
mod train;

pub use dataset::{class_colour, class_shape, generate_toy_dataset, DatasetConfig, ToyDataset, DATASET_VERSION};
pub use model::{
    backward, forward_loss, full_mask, transfer, AttnClassifier, Batch, Classifier, ConvClassifier,
    Gradients, LinearHead, LossOutput, ParamGroup, ParamId, TrainableMask,
};
pub use train::{argmax, evaluate, template_baseline_accuracy, train_phase, EpochMetrics, TrainConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::construction::{BoundaryMode, DEFAULT_BIAS_SCALE};
use crate::error::{arg_err, Error, Result};
use crate::scalar::Real;

pub const CONFIG_VERSION: u32 = 1;

fn default_bias_scale() -> f64 {
    DEFAULT_BIAS_SCALE
}

/// Architecture of both phases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ModelConfig {
    pub kernel_size: usize,
    pub out_channels: usize,
    pub patch: usize,
    #[serde(default = "default_bias_scale")]
    pub bias_scale: f64,
    #[serde(default)]
    pub boundary: BoundaryMode,
    pub init_seed: u64,
}

/// Complete pipeline configuration as stored in the JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct TwoPhaseConfig {
    pub config_version: u32,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub phase1: TrainConfig,
    pub phase2: TrainConfig,
}

impl TwoPhaseConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(Error::Version {
                found: self.config_version,
                expected: CONFIG_VERSION,
            });
        }
        self.dataset.validate()?;
        self.phase1.validate()?;
        self.phase2.validate()?;
        let m = &self.model;
        if m.kernel_size.is_multiple_of(2) {
            return arg_err("kernel size must be odd");
        }
        if m.out_channels == 0 || m.patch == 0 {
            return arg_err("outChannels and patch must be >= 1");
        }
        if !self.dataset.height.is_multiple_of(m.patch) || !self.dataset.width.is_multiple_of(m.patch) {
            return arg_err("image height and width must be multiples of the patch size");
        }
        Ok(())
    }
}

/// Outcome of comparing the convolutional model with its transferred copy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TransferCheck {
    /// Largest logit difference over every sample of the dataset.
    pub max_logit_diff: f64,
    pub conv_val_loss: f64,
    pub attn_val_loss: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TwoPhaseReport {
    pub baseline_val_acc: f64,
    pub phase1: Vec<EpochMetrics>,
    pub transfer: TransferCheck,
    pub phase2: Vec<EpochMetrics>,
}

/// Report plus the final models of both phases.
#[derive(Clone, Debug)]
pub struct TwoPhaseOutcome<T> {
    pub report: TwoPhaseReport,
    pub conv: ConvClassifier<T>,
    pub attn: AttnClassifier<T>,
}

/// Logit tolerance for the transfer check at precision `T`.
pub fn transfer_tolerance<T: Real>() -> f64 {
    match T::DTYPE {
        crate::scalar::DType::F32 => 1e-4,
        crate::scalar::DType::F64 => 1e-8,
    }
}

/// Compares logits of the two classifiers on every sample.
pub fn check_transfer<T: Real>(
    conv: &ConvClassifier<T>,
    attn: &AttnClassifier<T>,
    data: &ToyDataset<T>,
) -> Result<TransferCheck> {
    let mut max_diff = 0.0f64;
    for img in &data.images {
        let a = conv.logits(img)?;
        let b = attn.logits(img)?;
        for (x, y) in a.iter().zip(&b) {
            max_diff = max_diff.max((x.as_f64() - y.as_f64()).abs());
        }
    }
    let (conv_val_loss, _) = evaluate(conv, data, &data.val)?;
    let (attn_val_loss, _) = evaluate(attn, data, &data.val)?;
    let tolerance = transfer_tolerance::<T>();
    let loss_ok = data.val.is_empty() || (conv_val_loss - attn_val_loss).abs() <= tolerance.max(1e-4);
    Ok(TransferCheck {
        max_logit_diff: max_diff,
        conv_val_loss,
        attn_val_loss,
        tolerance,
        passed: max_diff <= tolerance && loss_ok,
    })
}

/// Runs phase 1 (convolution), transfer, and phase 2 (attention).
pub fn run_two_phase<T: Real>(cfg: &TwoPhaseConfig) -> Result<TwoPhaseOutcome<T>> {
    cfg.validate()?;
    let data = generate_toy_dataset::<T>(&cfg.dataset)?;
    let m = &cfg.model;
    let mut rng = ChaCha8Rng::seed_from_u64(m.init_seed);
    let mut conv = ConvClassifier::<T>::init(
        &mut rng,
        m.kernel_size,
        cfg.dataset.channels,
        m.out_channels,
        cfg.dataset.num_classes,
    )?;
    let phase1 = train_phase(&mut conv, &data, &cfg.phase1)?;
    let mut attn = transfer(&conv, m.patch, m.bias_scale, m.boundary, cfg.dataset.height, cfg.dataset.width)?;
    let check = check_transfer(&conv, &attn, &data)?;
    let phase2 = train_phase(&mut attn, &data, &cfg.phase2)?;
    Ok(TwoPhaseOutcome {
        report: TwoPhaseReport {
            baseline_val_acc: template_baseline_accuracy(&data),
            phase1,
            transfer: check,
            phase2,
        },
        conv,
        attn,
    })
}
