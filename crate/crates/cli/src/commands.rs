//! Subcommand implementations. Each returns a report the binary prints, so
//! tests can drive them without spawning processes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use drmx_core::audio::{read_wav, write_wav, AudioBuffer, WavEncoding};
use drmx_core::evalstats::{
    median_iqr, si_snr_improvement, significance_table, table_to_csv, ItemRatings, RatingSet,
};
use drmx_core::lstm::{load_weights, save_weights};
use drmx_core::nmf::NmfConfig;
use drmx_core::separator::{
    db_to_gain, enhance_stream, oracle_masker, pipeline_config, LstmMasker, MaskEstimator,
    RemixParams, SeparatorError, MODEL_BINS,
};
use drmx_core::stimulus::{build_stimulus_set, channel_vad, nmf_masker, ConditionSpec};
use drmx_core::trainer::{
    log_to_jsonl, score_separation, train_from, train_vad, validation_examples, EpochRecord,
    TrainConfig,
};
use drmx_core::trainer::{synth_mixture, Corpus, DataSource, MixtureKind};
use drmx_core::{AnalysisMode, BackgroundClass, Condition, LstmShape, LstmWeights, Scale};
use rand::SeedableRng;

use crate::catalogue::{save_item, write_manifest, ManifestItem};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("missing weights: {0}")]
    MissingWeights(String),
    #[error("unsupported sample rate: {0} Hz (expected 16000 or 48000)")]
    UnsupportedRate(u32),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingWeights(_) => 2,
            CliError::UnsupportedRate(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

impl From<SeparatorError> for CliError {
    fn from(e: SeparatorError) -> Self {
        match e {
            SeparatorError::UnsupportedRate(r) => CliError::UnsupportedRate(r),
            other => CliError::Other(other.into()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "drmx",
    version,
    about = "Dialogue remixing: enhancement, training, listening tests"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Enhance a WAV file by remixing the estimated speech and background.
    Enhance(EnhanceArgs),
    /// Train the mask estimator.
    Train(TrainArgs),
    /// Train the LSTM voice activity detector.
    TrainVad(TrainArgs),
    /// Build listening-test stimuli into a catalogue directory.
    Stimuli(StimuliArgs),
    /// Median/IQR and pairwise rank-sum tests over a ratings CSV.
    Stats(StatsArgs),
    /// Run the HTTP rating service and live-remix socket.
    Serve(ServeArgs),
    /// Write randomly initialized weights.
    InitWeights(InitWeightsArgs),
    /// Print the shape of a weight file.
    InspectWeights { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MaskerKind {
    Lstm,
    Oracle,
    Nmf,
}

#[derive(Debug, Clone, Args)]
pub struct EnhanceArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long = "out")]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value = "lstm")]
    pub masker: MaskerKind,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// LSTM VAD weights for the NMF masker; energy labels are used otherwise.
    #[arg(long)]
    pub vad_weights: Option<PathBuf>,
    /// Clean speech stem, aligned with the input.
    #[arg(long)]
    pub speech: Option<PathBuf>,
    #[arg(long)]
    pub background: Option<PathBuf>,
    #[arg(long, default_value_t = RemixParams::DEFAULT_ALPHA_DB, allow_hyphen_values = true)]
    pub alpha_db: f64,
    #[arg(long, default_value_t = RemixParams::DEFAULT_LAMBDA_DB, allow_hyphen_values = true)]
    pub lambda_db: f64,
    /// Drop the processing latency so the output lines up with the input.
    #[arg(long)]
    pub align: bool,
    #[arg(long)]
    pub pcm16: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnhanceReport {
    pub sample_rate: u32,
    pub latency_samples: usize,
    pub latency_ms: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub si_snr_improvement_db: Option<f64>,
}

fn read_stems(
    args: &EnhanceArgs,
    input: &AudioBuffer,
) -> anyhow::Result<Option<(AudioBuffer, AudioBuffer)>> {
    let (Some(sp), Some(bg)) = (&args.speech, &args.background) else {
        if args.speech.is_some() != args.background.is_some() {
            bail!("--speech and --background must be given together");
        }
        return Ok(None);
    };
    let speech = read_wav(sp).with_context(|| format!("reading {}", sp.display()))?;
    let background = read_wav(bg).with_context(|| format!("reading {}", bg.display()))?;
    for (name, stem) in [("speech", &speech), ("background", &background)] {
        if stem.sample_rate() != input.sample_rate()
            || stem.num_channels() != input.num_channels()
            || stem.len() != input.len()
        {
            bail!("{name} stem does not match the input's rate, channels and length");
        }
    }
    Ok(Some((speech, background)))
}

fn load_model(path: Option<&Path>, what: &str) -> CliResult<Arc<LstmWeights>> {
    let path = path
        .ok_or_else(|| CliError::MissingWeights(format!("--{what} is required for this masker")))?;
    if !path.exists() {
        return Err(CliError::MissingWeights(format!(
            "{} does not exist",
            path.display()
        )));
    }
    let w = load_weights(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Arc::new(w))
}

pub fn enhance(args: &EnhanceArgs) -> CliResult<EnhanceReport> {
    let input =
        read_wav(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let rate = input.sample_rate();
    let (config, _) = pipeline_config(rate)?;
    let params = RemixParams::from_db(args.alpha_db, args.lambda_db);
    let stems = read_stems(args, &input)?;

    let output = match args.masker {
        MaskerKind::Lstm => {
            let w = load_model(args.weights.as_deref(), "weights")?;
            let shape = w.shape();
            if shape.input != MODEL_BINS || shape.output != 2 * MODEL_BINS {
                return Err(anyhow!(
                    "weights have shape {shape:?}, expected 257 inputs and 514 outputs"
                )
                .into());
            }
            enhance_stream(
                &input,
                |_| Ok(Box::new(LstmMasker::new(w.clone())?) as Box<dyn MaskEstimator>),
                params,
            )?
        }
        MaskerKind::Oracle => {
            let (speech, background) = stems
                .as_ref()
                .ok_or_else(|| anyhow!("the oracle masker needs --speech and --background"))?;
            enhance_stream(
                &input,
                |ch| {
                    Ok(Box::new(oracle_masker(
                        speech.channel(ch),
                        background.channel(ch),
                        rate,
                    )?) as Box<dyn MaskEstimator>)
                },
                params,
            )?
        }
        MaskerKind::Nmf => {
            let vad = match &args.vad_weights {
                Some(p) => Some(load_model(Some(p), "vad-weights")?),
                None => None,
            };
            let maskers = (0..input.num_channels())
                .map(|ch| {
                    let clean = stems.as_ref().map(|(s, _)| s.channel(ch));
                    let labels = channel_vad(input.channel(ch), clean, rate, vad.as_deref())?;
                    nmf_masker(input.channel(ch), rate, &labels, &NmfConfig::default())
                })
                .collect::<Result<Vec<_>, _>>()
                .context("NMF masks")?;
            enhance_stream(
                &input,
                |ch| Ok(Box::new(maskers[ch].clone()) as Box<dyn MaskEstimator>),
                params,
            )?
        }
    };

    let latency = config.latency_samples();
    let aligned: Vec<Vec<f64>> = output
        .channels()
        .iter()
        .map(|c| c[latency..latency + input.len()].to_vec())
        .collect();
    let improvement = match &stems {
        Some((speech, _)) => {
            let per_channel = (0..input.num_channels())
                .map(|ch| si_snr_improvement(&aligned[ch], input.channel(ch), speech.channel(ch)))
                .collect::<Result<Vec<_>, _>>()
                .context("SI-SNR")?;
            Some(per_channel.iter().sum::<f64>() / per_channel.len() as f64)
        }
        None => None,
    };
    let written = if args.align {
        AudioBuffer::new(rate, aligned).context("aligned output")?
    } else {
        output
    };
    let encoding = if args.pcm16 {
        WavEncoding::Pcm16
    } else {
        WavEncoding::Float32
    };
    write_wav(&written, &args.output, encoding)
        .with_context(|| format!("writing {}", args.output.display()))?;
    Ok(EnhanceReport {
        sample_rate: rate,
        latency_samples: latency,
        latency_ms: latency as f64 * 1000.0 / rate as f64,
        alpha: params.alpha,
        lambda: params.lambda,
        si_snr_improvement_db: improvement,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SyntheticKind {
    Tones,
    Am,
}

impl From<SyntheticKind> for MixtureKind {
    fn from(k: SyntheticKind) -> Self {
        match k {
            SyntheticKind::Tones => MixtureKind::TonesVsNoise,
            SyntheticKind::Am => MixtureKind::AmNoiseVsMusicLike,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Directory with `speech/` and `background/` WAV folders at 16 kHz.
    #[arg(long, conflicts_with = "synthetic")]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "tones")]
    pub synthetic: SyntheticKind,
    #[arg(long, default_value_t = 50)]
    pub clips: usize,
    /// Hidden units; defaults to 600 for the separator and 64 for the VAD.
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long, default_value_t = MODEL_BINS)]
    pub bins: usize,
    /// JSON file with a full training configuration; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub batches: Option<usize>,
    #[arg(long)]
    pub val_items: Option<usize>,
    #[arg(long)]
    pub seconds: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from existing weights.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Write the epoch log as JSON lines.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub best_val_loss: f64,
    pub swapped_outputs: bool,
    pub si_snr_improvement_db: Option<f64>,
}

fn train_config(args: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut config = match &args.config {
        Some(p) => serde_json::from_slice(
            &std::fs::read(p).with_context(|| format!("reading {}", p.display()))?,
        )
        .with_context(|| format!("parsing {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.epochs {
        config.epochs_max = v;
    }
    if let Some(v) = args.lr {
        config.lr0 = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.batches {
        config.batches_per_epoch = v;
    }
    if let Some(v) = args.val_items {
        config.validation_items = v;
    }
    if let Some(v) = args.seconds {
        config.sample_seconds = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    config.validate()?;
    Ok(config)
}

fn data_source(args: &TrainArgs, seed: u64) -> anyhow::Result<DataSource> {
    Ok(match &args.corpus {
        Some(root) => DataSource::Corpus(Corpus::open(root)?),
        None => DataSource::Synthetic {
            kind: args.synthetic.into(),
            seed,
            clips: args.clips,
        },
    })
}

pub fn print_epoch(r: &EpochRecord) {
    println!(
        "epoch {:>3}  train {:>9.4}  val {:>9.4}  lr {:.2e}",
        r.epoch, r.train_loss, r.val_loss, r.lr
    );
}

pub fn train(
    args: &TrainArgs,
    vad: bool,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> CliResult<TrainReport> {
    let config = train_config(args)?;
    let source = data_source(args, config.seed)?;
    let outcome = if vad {
        let shape = LstmShape {
            input: args.bins,
            hidden: args.hidden.unwrap_or(64),
            layers: args.layers.unwrap_or(1),
            output: 1,
        };
        train_vad(&config, shape, &source, on_epoch).map_err(anyhow::Error::from)?
    } else {
        let initial = match &args.init {
            Some(p) => (*load_model(Some(p), "init")?).clone(),
            None => {
                let shape = LstmShape {
                    input: args.bins,
                    hidden: args.hidden.unwrap_or(600),
                    layers: args.layers.unwrap_or(3),
                    output: 2 * args.bins,
                };
                let mut rng =
                    rand_chacha::ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5EED));
                LstmWeights::random(shape, &mut rng)
            }
        };
        train_from(&config, initial, &source, on_epoch).map_err(anyhow::Error::from)?
    };
    save_weights(&outcome.weights, &args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(log) = &args.log {
        std::fs::write(log, log_to_jsonl(&outcome.log))
            .with_context(|| format!("writing {}", log.display()))?;
    }
    let improvement = if vad {
        None
    } else {
        let examples = validation_examples(&config, &source).map_err(anyhow::Error::from)?;
        Some(
            score_separation(&outcome.weights, &examples)
                .map_err(anyhow::Error::from)?
                .improvement(),
        )
    };
    Ok(TrainReport {
        epochs: outcome.log.len(),
        best_val_loss: outcome
            .log
            .iter()
            .map(|r| r.val_loss)
            .fold(f64::INFINITY, f64::min),
        swapped_outputs: outcome.swapped_outputs,
        si_snr_improvement_db: improvement,
    })
}

#[derive(Debug, Clone, Args)]
pub struct StimuliArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON plan listing items and their stem files.
    #[arg(long, conflicts_with = "synthetic")]
    pub plan: Option<PathBuf>,
    /// Generate this many synthetic items instead of reading a plan.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long, default_value_t = 48000)]
    pub rate: u32,
    #[arg(long, default_value_t = 10.0)]
    pub seconds: f64,
    /// Mix SNR of the original for synthetic items.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub snr_db: f64,
    /// Conditions besides reference and anchor.
    #[arg(long, value_delimiter = ',', default_value = "original,nmf,oracle")]
    pub conditions: Vec<String>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub vad_weights: Option<PathBuf>,
    #[arg(long, default_value_t = RemixParams::DEFAULT_ALPHA_DB, allow_hyphen_values = true)]
    pub alpha_db: f64,
    #[arg(long, default_value_t = RemixParams::DEFAULT_LAMBDA_DB, allow_hyphen_values = true)]
    pub lambda_db: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanItem {
    pub item_id: String,
    pub class: BackgroundClass,
    pub speech: PathBuf,
    pub background: PathBuf,
    /// Rescale the background to this SNR; stems are mixed as given otherwise.
    #[serde(default)]
    pub snr_db: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StimulusPlan {
    pub items: Vec<PlanItem>,
}

fn condition_specs(args: &StimuliArgs) -> CliResult<Vec<ConditionSpec>> {
    let mut specs = Vec::new();
    for name in &args.conditions {
        let spec = match Condition::parse(name.trim()) {
            Some(Condition::Original) => ConditionSpec::Original,
            Some(Condition::Oracle) => ConditionSpec::Oracle,
            Some(Condition::Lstm) => {
                ConditionSpec::Lstm(load_model(args.weights.as_deref(), "weights")?)
            }
            Some(Condition::Nmf) => {
                let vad = match &args.vad_weights {
                    Some(p) => Some(load_model(Some(p), "vad-weights")?),
                    None => None,
                };
                ConditionSpec::Nmf {
                    config: NmfConfig::default(),
                    vad,
                }
            }
            Some(Condition::Reference | Condition::Anchor) => continue,
            None => return Err(anyhow!("unknown condition {name}").into()),
        };
        specs.push(spec);
    }
    Ok(specs)
}

pub fn stimuli(args: &StimuliArgs) -> CliResult<Vec<ManifestItem>> {
    let specs = condition_specs(args)?;
    let params = RemixParams::from_db(args.alpha_db, args.lambda_db);
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let mut manifest = Vec::new();
    let mut add = |id: &str,
                   class,
                   speech: AudioBuffer,
                   background: AudioBuffer,
                   snr: Option<f64>|
     -> CliResult<()> {
        pipeline_config(speech.sample_rate())?;
        let background = match snr {
            Some(db) => drmx_core::stimulus::scale_background(&speech, &background, db)
                .map_err(anyhow::Error::from)?,
            None => background,
        };
        let set = build_stimulus_set(id, class, &speech, &background, None, &specs, params)
            .map_err(anyhow::Error::from)?;
        manifest
            .push(save_item(&args.out, &set, &speech, &background).map_err(anyhow::Error::from)?);
        Ok(())
    };
    match (&args.plan, args.synthetic) {
        (Some(plan_path), _) => {
            let plan: StimulusPlan = serde_json::from_slice(
                &std::fs::read(plan_path)
                    .with_context(|| format!("reading {}", plan_path.display()))?,
            )
            .context("parsing plan")?;
            let base = plan_path.parent().unwrap_or(Path::new("."));
            for item in plan.items {
                let speech = read_wav(base.join(&item.speech))
                    .with_context(|| format!("reading {}", item.speech.display()))?;
                let background = read_wav(base.join(&item.background))
                    .with_context(|| format!("reading {}", item.background.display()))?;
                add(&item.item_id, item.class, speech, background, item.snr_db)?;
            }
        }
        (None, Some(n)) => {
            let classes = [
                BackgroundClass::Sports,
                BackgroundClass::Speech,
                BackgroundClass::Music,
                BackgroundClass::Environment,
            ];
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
            for k in 0..n {
                let kind = if k % 2 == 0 {
                    MixtureKind::TonesVsNoise
                } else {
                    MixtureKind::AmNoiseVsMusicLike
                };
                pipeline_config(args.rate)?;
                let m = synth_mixture(&mut rng, args.seconds, args.snr_db, kind, args.rate)
                    .map_err(anyhow::Error::from)?;
                add(
                    &format!("item{:02}", k + 1),
                    classes[k % classes.len()],
                    m.speech,
                    m.background,
                    None,
                )?;
            }
        }
        (None, None) => return Err(anyhow!("either --plan or --synthetic is required").into()),
    }
    write_manifest(&args.out, manifest.clone()).map_err(anyhow::Error::from)?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScaleArg {
    Quality,
    Effort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Pooled,
    PerItem,
}

#[derive(Debug, Clone, Args)]
pub struct StatsArgs {
    /// CSV with header `item,condition,value`.
    #[arg(long)]
    pub ratings: PathBuf,
    #[arg(long, value_enum, default_value = "quality")]
    pub scale: ScaleArg,
    #[arg(long, value_enum, default_value = "pooled")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Write the significance table as CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
struct RatingRow {
    item: String,
    condition: String,
    value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionStats {
    pub condition: String,
    pub n: usize,
    pub median: f64,
    pub iqr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StatsReport {
    pub conditions: Vec<ConditionStats>,
    pub table_csv: String,
}

pub fn stats(args: &StatsArgs) -> CliResult<StatsReport> {
    let scale = match args.scale {
        ScaleArg::Quality => Scale::Quality,
        ScaleArg::Effort => Scale::Effort,
    };
    let mode = match args.mode {
        ModeArg::Pooled => AnalysisMode::Pooled,
        ModeArg::PerItem => AnalysisMode::PerItem,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(&args.ratings)
        .with_context(|| format!("reading {}", args.ratings.display()))?;
    let mut grouped: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for row in reader.deserialize::<RatingRow>() {
        let row = row.context("malformed ratings row")?;
        grouped
            .entry((row.item, row.condition))
            .or_default()
            .push(row.value);
    }
    let mut by_condition: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut ratings = Vec::new();
    for ((item, condition), values) in grouped {
        by_condition
            .entry(condition.clone())
            .or_default()
            .extend(&values);
        ratings.push(ItemRatings {
            item,
            set: RatingSet::new(condition, scale, values).map_err(anyhow::Error::from)?,
        });
    }
    let conditions = by_condition
        .iter()
        .map(|(c, v)| {
            let s = median_iqr(v)?;
            Ok(ConditionStats {
                condition: c.clone(),
                n: v.len(),
                median: s.median,
                iqr: s.iqr,
            })
        })
        .collect::<Result<Vec<_>, drmx_core::StatsError>>()
        .map_err(anyhow::Error::from)?;
    let tested: Vec<&String> = by_condition
        .keys()
        .filter(|c| *c != "reference" && *c != "anchor")
        .collect();
    let mut pairs = Vec::new();
    for i in 0..tested.len() {
        for j in i + 1..tested.len() {
            pairs.push((tested[i].clone(), tested[j].clone()));
        }
    }
    let table =
        significance_table(&ratings, &pairs, mode, args.alpha).map_err(anyhow::Error::from)?;
    let table_csv = table_to_csv(&table);
    if let Some(out) = &args.out {
        std::fs::write(out, &table_csv).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(StatsReport {
        conditions,
        table_csv,
    })
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Catalogue written by `drmx stimuli`.
    #[arg(long)]
    pub stimuli: PathBuf,
    #[arg(long)]
    pub sessions: PathBuf,
    /// Separator weights for `masker=lstm` on the live socket.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

pub async fn serve(args: &ServeArgs) -> CliResult<()> {
    let weights = match &args.weights {
        Some(p) => Some(load_model(Some(p), "weights")?),
        None => None,
    };
    let (state, quarantined) = crate::service::build_state(crate::service::ServiceConfig {
        stimuli_dir: args.stimuli.clone(),
        sessions_dir: args.sessions.clone(),
        weights,
    })?;
    for q in quarantined {
        tracing::error!(file = %q.original.display(), moved_to = %q.moved_to.display(), "quarantined session: {}", q.reason);
    }
    let listener = tokio::net::TcpListener::bind(&args.addr)
        .await
        .with_context(|| format!("binding {}", args.addr))?;
    tracing::info!(
        "listening on {}",
        listener.local_addr().context("local address")?
    );
    axum::serve(listener, crate::service::router(state))
        .await
        .context("server")?;
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct InitWeightsArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = MODEL_BINS)]
    pub bins: usize,
    #[arg(long, default_value_t = 600)]
    pub hidden: usize,
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    /// Output units; twice the bins for a separator, 1 for a VAD.
    #[arg(long)]
    pub outputs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn init_weights(args: &InitWeightsArgs) -> CliResult<LstmShape> {
    let shape = LstmShape {
        input: args.bins,
        hidden: args.hidden,
        layers: args.layers,
        output: args.outputs.unwrap_or(2 * args.bins),
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(args.seed);
    let w = LstmWeights::random(shape, &mut rng);
    save_weights(&w, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(shape)
}

pub fn inspect_weights(path: &Path) -> CliResult<(LstmShape, usize)> {
    let w = load_model(Some(path), "weights")?;
    Ok((w.shape(), w.param_count()))
}

pub fn gain_line(label: &str, db: f64) -> String {
    format!("{label}: {:.6} ({db:+.1} dB)", db_to_gain(db))
}
