//! Controlled component ablations: each variant trains identically to the
//! full system except for the one ablated mechanism, on the same data and
//! seed, and reports paired metrics plus inference latency.

use serde::Serialize;

use super::{ground_truth_of, predict_dataset, train_stage, AdamW, Progress, TrainConfig};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{AttentionKind, Model, ModelConfig, QueryMode};
use crate::scenegen::{generate_dataset, GenSettings, SplitCounts};
use crate::{Error, Result};

/// Which component gets ablated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    Full,
    /// Replace the query bank with one shared, autoregressively-positioned
    /// token embedding.
    NoQueryBank,
    /// Plain causal attention everywhere.
    CausalOnly,
    /// Scale the query bank to `k` slots.
    QueryCount(usize),
    /// Replace the generated phrase with the reserved dummy token at
    /// inference time.
    DummyPhrase,
    /// Drop the alignment stage and train stage 2 only.
    SkipStage1,
}

impl std::str::FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AblationVariant::Full),
            "no_query_bank" => Ok(AblationVariant::NoQueryBank),
            "causal_only" => Ok(AblationVariant::CausalOnly),
            "dummy_phrase" => Ok(AblationVariant::DummyPhrase),
            "skip_stage1" => Ok(AblationVariant::SkipStage1),
            other => {
                if let Some(k) = other.strip_prefix('k').and_then(|k| k.parse::<usize>().ok()) {
                    Ok(AblationVariant::QueryCount(k))
                } else {
                    Err(Error::Config(format!(
                        "unknown ablation variant {other:?} (expected full, no_query_bank, \
                         causal_only, dummy_phrase, skip_stage1, or k<N>)"
                    )))
                }
            }
        }
    }
}

impl std::fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AblationVariant::Full => write!(f, "full"),
            AblationVariant::NoQueryBank => write!(f, "no_query_bank"),
            AblationVariant::CausalOnly => write!(f, "causal_only"),
            AblationVariant::QueryCount(k) => write!(f, "k{k}"),
            AblationVariant::DummyPhrase => write!(f, "dummy_phrase"),
            AblationVariant::SkipStage1 => write!(f, "skip_stage1"),
        }
    }
}

/// Reduced-scale configuration shared by every arm of an ablation run.
#[derive(Debug, Clone)]
pub struct AblationSettings {
    pub gen: GenSettings,
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl Default for AblationSettings {
    fn default() -> Self {
        let gen = GenSettings {
            counts: SplitCounts { stage1: 256, stage2: 256, val: 1, test: 128 },
            ..GenSettings::default()
        };
        let mut train = TrainConfig::default();
        train.stage1.epochs = 6;
        train.stage2.epochs = 5;
        AblationSettings { gen, train, model: ModelConfig::default() }
    }
}

/// One trained-and-evaluated arm.
#[derive(Debug, Clone, Serialize)]
pub struct VariantOutcome {
    pub variant: String,
    pub seed: u64,
    pub report: MetricsReport,
    pub mean_latency_ms: f64,
}

/// Paired reports: the requested variant next to the full baseline trained
/// under the same seed and data.
#[derive(Debug, Clone, Serialize)]
pub struct AblationPair {
    pub variant: VariantOutcome,
    pub full: VariantOutcome,
}

fn variant_model_config(base: &ModelConfig, variant: AblationVariant) -> ModelConfig {
    let mut config = *base;
    match variant {
        AblationVariant::Full | AblationVariant::DummyPhrase | AblationVariant::SkipStage1 => {}
        AblationVariant::NoQueryBank => config.query_mode = QueryMode::SharedToken,
        AblationVariant::CausalOnly => config.attention = AttentionKind::Causal,
        AblationVariant::QueryCount(k) => config.k = k,
    }
    config
}

/// Train and evaluate one arm under `(variant, seed)`.
pub fn run_variant(
    variant: AblationVariant,
    seed: u64,
    settings: &AblationSettings,
) -> Result<VariantOutcome> {
    let data = generate_dataset(seed, &settings.gen)?;
    let config = variant_model_config(&settings.model, variant);
    config.validate()?;
    if config.k < settings.gen.query_capacity {
        return Err(Error::Config(format!(
            "variant slot count {} is below the data instance cap {}",
            config.k, settings.gen.query_capacity
        )));
    }
    let mut model = Model::new(config, seed)?;
    let mut sink = std::io::sink();
    if variant != AblationVariant::SkipStage1 {
        let mut opt = AdamW::new(&model, &settings.train.stage1);
        train_stage(
            &mut model,
            &data.stage1,
            &settings.train.stage1,
            1,
            seed,
            &mut opt,
            Progress::default(),
            None,
            &mut sink,
        )?;
    }
    {
        let mut opt = AdamW::new(&model, &settings.train.stage2);
        train_stage(
            &mut model,
            &data.stage2,
            &settings.train.stage2,
            2,
            seed,
            &mut opt,
            Progress::default(),
            None,
            &mut sink,
        )?;
    }
    let dummy = variant == AblationVariant::DummyPhrase;
    let (predictions, mean_latency_ms) = predict_dataset(&model, &data.test, config.tau, dummy)?;
    let report = evaluate(&predictions, &ground_truth_of(&data.test))?;
    Ok(VariantOutcome { variant: variant.to_string(), seed, report, mean_latency_ms })
}

/// Train the requested variant and the full baseline under one seed.
pub fn run_ablation(
    variant: AblationVariant,
    seed: u64,
    settings: &AblationSettings,
) -> Result<AblationPair> {
    let variant_outcome = run_variant(variant, seed, settings)?;
    let full = run_variant(AblationVariant::Full, seed, settings)?;
    Ok(AblationPair { variant: variant_outcome, full })
}
