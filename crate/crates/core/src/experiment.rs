//! End-to-end run configuration and the pipeline stages the CLI chains together.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::data::{
    dominant_confounder, generate, select_group, select_minority, split, BiasConfig, GroupedDataset,
};
use crate::error::{Error, Result};
use crate::eval::{group_accuracies, EvalReport};
use crate::model::{init_params, InterventionSpec, ModelConfig, ModelParams};
use crate::numeric::derive_seed;
use crate::steering::{
    candidates_at, diff_field, mean_activations, sweep_single_layer, CandidateVector,
    SteeringField, SweepResult, UnitDirection,
};
use crate::train::{train_erm, TrainConfig, TrainReport};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SteeringMode {
    #[default]
    None,
    Single,
    Full,
    Subtract,
}

impl std::str::FromStr for SteeringMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "single" => Ok(Self::Single),
            "full" => Ok(Self::Full),
            "subtract" => Ok(Self::Subtract),
            other => Err(Error::Config(format!("unknown steering mode {other:?}"))),
        }
    }
}

/// Which group's mean is subtracted from which.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    /// `r = mean(majority) − mean(minority)`
    #[default]
    MajorityMinusMinority,
    /// `r = mean(minority) − mean(majority)`
    MinorityMinusMajority,
}

impl std::str::FromStr for Orientation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "majority-minus-minority" | "majority" => Ok(Self::MajorityMinusMinority),
            "minority-minus-majority" | "minority" => Ok(Self::MinorityMinusMajority),
            other => Err(Error::Config(format!("unknown orientation {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeansSource {
    #[default]
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SteeringOptions {
    pub mode: SteeringMode,
    /// Token position whose per-layer differences form the candidate set; 0 is CLS.
    pub position: usize,
    /// Class whose majority/minority groups define the bias vector.
    pub class: u32,
    pub orientation: Orientation,
    pub alpha: f32,
    pub means_from: MeansSource,
}

impl Default for SteeringOptions {
    fn default() -> Self {
        Self {
            mode: SteeringMode::Single,
            position: 0,
            class: 0,
            orientation: Orientation::default(),
            alpha: 1.0,
            means_from: MeansSource::Train,
        }
    }
}

/// Everything a run needs. Stage seeds are derived from `seed`; the model's
/// vocabulary, sequence length and class count follow the `data` section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: BiasConfig,
    pub train: TrainConfig,
    pub steering: SteeringOptions,
    /// Group-balance the test split.
    pub balanced_test: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            data: BiasConfig::default(),
            train: TrainConfig::default(),
            steering: SteeringOptions::default(),
            balanced_test: true,
        }
    }
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn data_config(&self) -> BiasConfig {
        BiasConfig {
            seed: derive_seed(self.seed, "data"),
            ..self.data.clone()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.data.vocab_size,
            seq_len: self.data.seq_len,
            n_classes: self.data.n_classes,
            seed: derive_seed(self.seed, "init"),
            ..self.model.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, "train"),
            ..self.train.clone()
        }
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, "split")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model_config().validate()?;
        self.train.validate()?;
        if self.steering.class as usize >= self.data.n_classes {
            return Err(Error::Config(format!(
                "steering class {} out of range",
                self.steering.class
            )));
        }
        if self.steering.position >= self.data.seq_len {
            return Err(Error::Config(format!(
                "steering position {} outside sequence of length {}",
                self.steering.position, self.data.seq_len
            )));
        }
        if !self.steering.alpha.is_finite() {
            return Err(Error::Config("alpha must be finite".to_string()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: GroupedDataset,
    pub val: GroupedDataset,
    pub test: GroupedDataset,
}

pub fn generate_splits(config: &RunConfig) -> Result<Splits> {
    config.validate()?;
    let data_cfg = config.data_config();
    let all = generate(&data_cfg)?;
    let (train, val, test) = split(
        &all,
        data_cfg.fractions(),
        config.balanced_test,
        config.split_seed(),
    )?;
    Ok(Splits { train, val, test })
}

pub fn train_baseline(
    config: &RunConfig,
    splits: &Splits,
) -> Result<(ModelParams<f32>, TrainReport)> {
    let init = init_params(&config.model_config())?;
    train_erm(&init, &splits.train, &splits.val, &config.train_config())
}

/// `(over, under)` groups for a class: the majority group and the pooled
/// minority groups, swapped for [`Orientation::MinorityMinusMajority`].
pub fn orientation_groups(
    dataset: &GroupedDataset,
    class: u32,
    orientation: Orientation,
) -> Result<(GroupedDataset, GroupedDataset)> {
    let majority = select_group(
        dataset,
        class,
        dominant_confounder(class, dataset.n_confounders),
    )?;
    let minority = select_minority(dataset, class)?;
    Ok(match orientation {
        Orientation::MajorityMinusMinority => (majority, minority),
        Orientation::MinorityMinusMajority => (minority, majority),
    })
}

/// Difference-in-means output for one class: the per-layer candidates at the
/// requested position and the raw full `[L × T × d_model]` field.
#[derive(Clone, Debug, PartialEq)]
pub struct Extraction {
    pub candidates: Vec<CandidateVector>,
    pub raw_field: Vec<f32>,
}

impl Extraction {
    pub fn field(&self, config: &ModelConfig) -> Result<SteeringField> {
        SteeringField::from_raw(
            config.n_layers,
            config.seq_len,
            config.d_model,
            &self.raw_field,
        )
    }
}

pub fn extract(
    params: &ModelParams<f32>,
    data: &GroupedDataset,
    options: &SteeringOptions,
) -> Result<Extraction> {
    let (over, under) = orientation_groups(data, options.class, options.orientation)?;
    let mu = mean_activations(params, &over)?;
    let nu = mean_activations(params, &under)?;
    let raw_field = diff_field(&mu, &nu)?;
    let all = crate::steering::diff_in_means(&mu, &nu)?;
    Ok(Extraction {
        candidates: candidates_at(&all, options.position),
        raw_field,
    })
}

/// Builds the intervention for `mode` from a chosen direction or field.
pub fn intervention_for(
    mode: SteeringMode,
    direction: Option<&UnitDirection>,
    field: Option<&SteeringField>,
    alpha: f32,
) -> Result<InterventionSpec> {
    let need_dir = || {
        direction
            .cloned()
            .ok_or_else(|| Error::Config("this mode needs a steering direction".to_string()))
    };
    Ok(match mode {
        SteeringMode::None => InterventionSpec::None,
        SteeringMode::Single => InterventionSpec::SingleGlobal {
            direction: need_dir()?,
        },
        SteeringMode::Subtract => InterventionSpec::Subtract {
            direction: need_dir()?,
            alpha,
        },
        SteeringMode::Full => InterventionSpec::FullField {
            field: field
                .cloned()
                .ok_or_else(|| Error::Config("full mode needs a steering field".to_string()))?,
        },
    })
}

/// Results of one generate → train → extract → sweep → evaluate run.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub splits: Splits,
    pub params: ModelParams<f32>,
    pub train_report: TrainReport,
    pub extraction: Extraction,
    pub sweep: SweepResult,
    pub baseline: EvalReport,
    pub steered: EvalReport,
    pub elapsed: Duration,
}

/// Runs the whole pipeline with the single-layer sweep choice applied on test data.
pub fn run_pipeline(config: &RunConfig) -> Result<Outcome> {
    let started = Instant::now();
    let splits = generate_splits(config)?;
    let (params, train_report) = train_baseline(config, &splits)?;
    let means_data = match config.steering.means_from {
        MeansSource::Train => &splits.train,
        MeansSource::Val => &splits.val,
    };
    let extraction = extract(&params, means_data, &config.steering)?;
    let sweep = sweep_single_layer(&params, &extraction.candidates, &splits.val)?;
    let baseline = group_accuracies(&params, &splits.test, &InterventionSpec::None)?;
    let steered = group_accuracies(
        &params,
        &splits.test,
        &InterventionSpec::SingleGlobal {
            direction: sweep.direction.clone(),
        },
    )?;
    Ok(Outcome {
        splits,
        params,
        train_report,
        extraction,
        sweep,
        baseline,
        steered,
        elapsed: started.elapsed(),
    })
}
