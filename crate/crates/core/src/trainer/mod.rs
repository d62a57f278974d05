//! Toy-scale training of the mask estimator and the VAD.
//!
//! Each batch item is evaluated (forward and backward) on a rayon worker;
//! gradients are then summed in batch order, so results do not depend on
//! scheduling.

mod bptt;
mod data;
mod loss;
mod objective;
mod optim;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

pub use bptt::{backward_sequence, forward_sequence, DropoutMasks, Trace};
pub use data::{
    is_validation_clip, mean_power, mix_at_snr, synth_background, synth_mixture, synth_speech,
    Corpus, DataSource, MixtureKind, MixtureSample,
};
pub use loss::{
    select_permutation, si_snr, si_snr_with_grad, upit_loss, upit_loss_with_grad, upit_permutation,
    Permutation, UpitOutcome, SI_SNR_EPS,
};
pub use objective::{
    bce_loss, features, reconstruct, separation_loss, separation_loss_from_spec, Outcome,
    TrainingExample,
};
pub use optim::{adam_step, AdamState, Decision, PlateauSchedule, ADAM_EPS, BETA1, BETA2};

use crate::audio::AudioError;
use crate::lstm::{LstmError, LstmShape, LstmWeights};
use crate::spectral::{StftConfig, StftPlan};
use crate::vad::{energy_label, VadError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("degenerate target")]
    DegenerateTarget,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numeric failure: {0}")]
    NumericFailure(String),
    #[error("training diverged")]
    Diverged,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Lstm(#[from] LstmError),
    #[error(transparent)]
    Vad(#[from] VadError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Rate the estimator is trained at.
pub const TRAIN_RATE: u32 = 16000;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_halving_patience: usize,
    pub early_stop_patience: usize,
    /// Validation loss must beat the best so far by more than this.
    pub min_improvement: f64,
    /// Dropout rate on the outputs of all but the last LSTM layer.
    pub dropout: f64,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub validation_items: usize,
    pub sample_seconds: f64,
    pub snr_range: (f64, f64),
    pub epochs_max: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 2e-4,
            lr_halving_patience: 3,
            early_stop_patience: 10,
            min_improvement: 1e-4,
            dropout: 0.25,
            batch_size: 16,
            batches_per_epoch: 50,
            validation_items: 32,
            sample_seconds: 2.0,
            snr_range: (-5.0, 5.0),
            epochs_max: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.lr_halving_patience == 0 {
            return bad("LR halving patience must be positive");
        }
        if !(self.snr_range.0 <= self.snr_range.1) {
            return bad("SNR range is inverted");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.batch_size == 0
            || self.batches_per_epoch == 0
            || self.validation_items == 0
            || self.epochs_max == 0
        {
            return bad("batch size, batches, validation items and epochs must be positive");
        }
        if !(self.lr0 >= 0.0 && self.sample_seconds > 0.0) {
            return bad("learning rate and sample length must be positive");
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights of the best validation epoch.
    pub weights: LstmWeights,
    pub log: Vec<EpochRecord>,
    /// The output halves were swapped after training so that the first
    /// half is the speech mask.
    pub swapped_outputs: bool,
}

/// Per-example loss (and gradient) used by the generic loop.
trait Objective: Sync {
    type Example: Send + Sync;
    fn draw(&self, rng: &mut ChaCha8Rng, validation: bool) -> Result<Self::Example>;
    fn frames(&self, example: &Self::Example) -> usize;
    fn evaluate(
        &self,
        weights: &LstmWeights,
        example: &Self::Example,
        dropout: Option<&DropoutMasks>,
        want_grad: bool,
    ) -> Result<(f64, Option<LstmWeights>)>;
}

struct Separation<'a> {
    plan: StftPlan,
    source: &'a DataSource,
    config: &'a TrainConfig,
}

impl Objective for Separation<'_> {
    type Example = TrainingExample;

    fn draw(&self, rng: &mut ChaCha8Rng, validation: bool) -> Result<TrainingExample> {
        let m = self.source.draw(
            rng,
            validation,
            self.config.sample_seconds,
            self.config.snr_range,
            TRAIN_RATE,
        )?;
        Ok(example_from(&m))
    }

    fn frames(&self, example: &TrainingExample) -> usize {
        self.plan.config().frames_for(example.mixture.len())
    }

    fn evaluate(
        &self,
        weights: &LstmWeights,
        example: &TrainingExample,
        dropout: Option<&DropoutMasks>,
        want_grad: bool,
    ) -> Result<(f64, Option<LstmWeights>)> {
        let o = separation_loss(weights, &self.plan, example, dropout, want_grad)?;
        Ok((o.loss, o.grads))
    }
}

pub fn example_from(m: &MixtureSample) -> TrainingExample {
    TrainingExample {
        mixture: m.mixture.channel(0).to_vec(),
        targets: [
            m.speech.channel(0).to_vec(),
            m.background.channel(0).to_vec(),
        ],
    }
}

/// A VAD training item: mixture magnitudes and clean-speech labels.
pub struct VadExample {
    pub features: ndarray::Array2<f64>,
    pub labels: Vec<u8>,
}

struct VadTraining<'a> {
    plan: StftPlan,
    source: &'a DataSource,
    config: &'a TrainConfig,
    bins: usize,
}

impl VadTraining<'_> {
    fn example(&self, m: &MixtureSample) -> Result<VadExample> {
        let labels = energy_label(&m.speech, &self.plan.config())?;
        let spec = self.plan.stft(m.mixture.channel(0));
        Ok(VadExample {
            features: features(&spec, self.bins),
            labels: labels.as_slice().to_vec(),
        })
    }
}

impl Objective for VadTraining<'_> {
    type Example = VadExample;

    fn draw(&self, rng: &mut ChaCha8Rng, validation: bool) -> Result<VadExample> {
        let m = self.source.draw(
            rng,
            validation,
            self.config.sample_seconds,
            self.config.snr_range,
            TRAIN_RATE,
        )?;
        self.example(&m)
    }

    fn frames(&self, example: &VadExample) -> usize {
        example.labels.len()
    }

    fn evaluate(
        &self,
        weights: &LstmWeights,
        example: &VadExample,
        dropout: Option<&DropoutMasks>,
        want_grad: bool,
    ) -> Result<(f64, Option<LstmWeights>)> {
        bce_loss(
            weights,
            &example.features,
            &example.labels,
            dropout,
            want_grad,
        )
    }
}

fn mean_loss<O: Objective>(
    objective: &O,
    weights: &LstmWeights,
    items: &[O::Example],
) -> Result<f64> {
    let losses = items
        .par_iter()
        .map(|ex| objective.evaluate(weights, ex, None, false).map(|(l, _)| l))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn run<O: Objective>(
    objective: &O,
    config: &TrainConfig,
    mut weights: LstmWeights,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(LstmWeights, Vec<EpochRecord>, Vec<O::Example>)> {
    config.validate()?;
    weights.validate()?;
    let shape = weights.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut val_rng = ChaCha8Rng::seed_from_u64(config.seed);
    val_rng.set_stream(1);
    let validation = (0..config.validation_items)
        .map(|_| objective.draw(&mut val_rng, true))
        .collect::<Result<Vec<_>>>()?;

    let mut adam = AdamState::new(weights.param_count());
    let mut schedule = PlateauSchedule::new(
        config.lr0,
        config.lr_halving_patience,
        config.early_stop_patience,
        config.min_improvement,
    );
    let mut best = weights.clone();
    let mut log = Vec::new();
    for epoch in 1..=config.epochs_max {
        let lr = schedule.lr;
        let mut train_total = 0.0;
        for _ in 0..config.batches_per_epoch {
            let batch = (0..config.batch_size)
                .map(|_| {
                    let ex = objective.draw(&mut rng, false)?;
                    let drop = (config.dropout > 0.0).then(|| {
                        DropoutMasks::sample(
                            &mut rng,
                            shape.layers,
                            objective.frames(&ex),
                            shape.hidden,
                            config.dropout,
                        )
                    });
                    Ok((ex, drop))
                })
                .collect::<Result<Vec<_>>>()?;
            let results = batch
                .par_iter()
                .map(|(ex, drop)| objective.evaluate(&weights, ex, drop.as_ref(), true))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    TrainError::NumericFailure(_) => TrainError::Diverged,
                    other => other,
                })?;
            let mut grads = LstmWeights::zeros(shape);
            let scale = 1.0 / config.batch_size as f64;
            let mut batch_loss = 0.0;
            for (loss, g) in results {
                batch_loss += loss;
                let g = g.expect("gradient requested");
                for (acc, part) in grads.params_mut().into_iter().zip(g.params()) {
                    acc.iter_mut().zip(part).for_each(|(a, b)| *a += b * scale);
                }
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::Diverged);
            }
            train_total += batch_loss * scale;
            adam_step(&mut weights, &grads, &mut adam, lr);
            if !weights.is_finite() {
                return Err(TrainError::Diverged);
            }
        }
        let val_loss = mean_loss(objective, &weights, &validation)?;
        if !val_loss.is_finite() {
            return Err(TrainError::Diverged);
        }
        let record = EpochRecord {
            epoch,
            train_loss: train_total / config.batches_per_epoch as f64,
            val_loss,
            lr,
        };
        on_epoch(&record);
        log.push(record);
        let decision = schedule.observe(val_loss);
        if decision.improved {
            best = weights.clone();
        }
        if decision.stop {
            break;
        }
    }
    Ok((best, log, validation))
}

/// Trains a mask estimator from `initial` weights.
pub fn train_from(
    config: &TrainConfig,
    initial: LstmWeights,
    source: &DataSource,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let plan = StftPlan::new(
        StftConfig::for_rate(TRAIN_RATE).map_err(|e| TrainError::Shape(e.to_string()))?,
    );
    let shape = initial.shape();
    if shape.input > plan.config().n_bins() || shape.output != 2 * shape.input {
        return Err(TrainError::Shape(format!(
            "network {shape:?} cannot produce two masks at {TRAIN_RATE} Hz"
        )));
    }
    let objective = Separation {
        plan,
        source,
        config,
    };
    let (mut weights, log, validation) = run(&objective, config, initial, on_epoch)?;

    // uPIT leaves the output order free; put the speech mask first.
    let swaps = validation
        .par_iter()
        .map(|ex| {
            separation_loss(&weights, &objective.plan, ex, None, false).map(|o| o.permutation)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| *p == Permutation::Swap)
        .count();
    let swapped_outputs = 2 * swaps > validation.len();
    if swapped_outputs {
        weights.swap_output_halves();
    }
    Ok(TrainOutcome {
        weights,
        log,
        swapped_outputs,
    })
}

pub fn train(config: &TrainConfig, shape: LstmShape, source: &DataSource) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5EED));
    train_from(
        config,
        LstmWeights::random(shape, &mut rng),
        source,
        &mut |_| {},
    )
}

/// Trains a single-output VAD network with binary cross-entropy against
/// energy labels of the clean speech stems.
pub fn train_vad(
    config: &TrainConfig,
    shape: LstmShape,
    source: &DataSource,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let plan = StftPlan::new(
        StftConfig::for_rate(TRAIN_RATE).map_err(|e| TrainError::Shape(e.to_string()))?,
    );
    if shape.output != 1 || shape.input > plan.config().n_bins() {
        return Err(TrainError::Shape(format!("{shape:?} is not a VAD shape")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5EED));
    let objective = VadTraining {
        plan,
        source,
        config,
        bins: shape.input,
    };
    let (weights, log, _) = run(
        &objective,
        config,
        LstmWeights::random(shape, &mut rng),
        on_epoch,
    )?;
    Ok(TrainOutcome {
        weights,
        log,
        swapped_outputs: false,
    })
}

/// Mean SI-SNR of mixtures and of first-slot estimates against the speech
/// stems.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SeparationScore {
    pub mixture_si_snr: f64,
    pub estimate_si_snr: f64,
}

impl SeparationScore {
    pub fn improvement(&self) -> f64 {
        self.estimate_si_snr - self.mixture_si_snr
    }
}

pub fn score_separation(
    weights: &LstmWeights,
    examples: &[TrainingExample],
) -> Result<SeparationScore> {
    let plan = StftPlan::new(
        StftConfig::for_rate(TRAIN_RATE).map_err(|e| TrainError::Shape(e.to_string()))?,
    );
    let bins = weights.shape().input;
    let pairs = examples
        .par_iter()
        .map(|ex| {
            let spec = plan.stft(&ex.mixture);
            let trace = forward_sequence(weights, features(&spec, bins).view(), None)?;
            let [speech, _] = reconstruct(&plan, &spec, &trace.output, ex.mixture.len())?;
            Ok((
                si_snr(&ex.mixture, &ex.targets[0])?,
                si_snr(&speech, &ex.targets[0])?,
            ))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let n = pairs.len() as f64;
    Ok(SeparationScore {
        mixture_si_snr: pairs.iter().map(|p| p.0).sum::<f64>() / n,
        estimate_si_snr: pairs.iter().map(|p| p.1).sum::<f64>() / n,
    })
}

/// The validation mixtures a run with `config` would use.
pub fn validation_examples(
    config: &TrainConfig,
    source: &DataSource,
) -> Result<Vec<TrainingExample>> {
    let mut val_rng = ChaCha8Rng::seed_from_u64(config.seed);
    val_rng.set_stream(1);
    (0..config.validation_items)
        .map(|_| {
            Ok(example_from(&source.draw(
                &mut val_rng,
                true,
                config.sample_seconds,
                config.snr_range,
                TRAIN_RATE,
            )?))
        })
        .collect()
}

/// Log as JSON lines.
pub fn log_to_jsonl(log: &[EpochRecord]) -> String {
    log.iter()
        .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            batches_per_epoch: 2,
            validation_items: 2,
            sample_seconds: 0.25,
            epochs_max: 3,
            dropout: 0.0,
            ..TrainConfig::default()
        }
    }

    fn source() -> DataSource {
        DataSource::Synthetic {
            kind: MixtureKind::TonesVsNoise,
            seed: 4,
            clips: 20,
        }
    }

    const SMALL: LstmShape = LstmShape {
        input: 257,
        hidden: 4,
        layers: 2,
        output: 514,
    };

    #[test]
    fn zero_stop_patience_runs_one_epoch() {
        let config = TrainConfig {
            early_stop_patience: 0,
            ..tiny_config()
        };
        let out = train(&config, SMALL, &source()).unwrap();
        assert_eq!(out.log.len(), 1);
    }

    #[test]
    fn training_without_dropout_is_reproducible() {
        let a = train(&tiny_config(), SMALL, &source()).unwrap();
        let b = train(&tiny_config(), SMALL, &source()).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.log, b.log);
        let c = train(
            &TrainConfig {
                dropout: 0.25,
                ..tiny_config()
            },
            SMALL,
            &source(),
        )
        .unwrap();
        let d = train(
            &TrainConfig {
                dropout: 0.25,
                ..tiny_config()
            },
            SMALL,
            &source(),
        )
        .unwrap();
        assert_eq!(c.weights, d.weights);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            snr_range: (5.0, -5.0),
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lr_halving_patience: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn log_lines_are_json() {
        let log = vec![EpochRecord {
            epoch: 1,
            train_loss: -1.0,
            val_loss: -2.0,
            lr: 2e-4,
        }];
        let s = log_to_jsonl(&log);
        let back: EpochRecord = serde_json::from_str(s.trim()).unwrap();
        assert_eq!(back, log[0]);
    }
}
