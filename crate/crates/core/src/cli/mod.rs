//! Command-line front end: corpus generation, training, synthesis, transfer,
//! evaluation, statistics and plots.

mod plot;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::control::{apply_biases, compute_token_stats, style_transfer, BiasSpec, TokenWeightStats};
use crate::corpus::{
    generate_synthetic_corpus, load_corpus, read_split, write_json, znorm_durations, AcousticFeatures, GeneratorConfig,
    PhonemeSequence, Utterance,
};
use crate::encoders::WordStyleEmbeddings;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_pair, extract_pitch, MetricsReport, UtteranceMetrics, DEFAULT_VOICING_THRESHOLD};
use crate::model::{Model, ModelConfig};
use crate::training::{Checkpoint, Trainer, TrainingConfig, CONFIG_FILE, TOKEN_STATS_FILE};

pub use plot::{kde_curves, plot, PlotKind};

#[derive(Debug, Parser)]
#[command(name = "wordstyle", version, about = "Word-level style token synthesis in acoustic feature space")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with known per-word style factors.
    GenCorpus(GenCorpusArgs),
    /// Train a model and write a checkpoint directory.
    Train(TrainArgs),
    /// Synthesize features from text with reference or prior style.
    Synth(SynthArgs),
    /// Transfer the per-word style of a recorded utterance onto new text.
    Transfer(TransferArgs),
    /// Score synthesized features against held-out ground truth.
    Eval(EvalArgs),
    /// Token weight and duration statistics over a corpus.
    Stats(StatsArgs),
    /// Emit an SVG plot and its CSV data.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub utterances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// File listing the training utterance ids; defaults to the whole corpus.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// JSON file with optional `model` and `training` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Write a snapshot checkpoint every N steps under `OUT/snapshots`.
    #[arg(long)]
    pub snapshot_every: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// One utterance per line: words separated by spaces, phonemes by `.`.
    #[arg(long)]
    pub text: PathBuf,
    /// Utterance id whose audio supplies the word styles.
    #[arg(long, requires = "corpus", conflicts_with = "prior")]
    pub reference: Option<String>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Predict word styles from text alone.
    #[arg(long, required_unless_present = "reference")]
    pub prior: bool,
    /// TOKEN:STDS[:WORD], repeatable.
    #[arg(long = "bias")]
    pub bias: Vec<String>,
    /// Token statistics file; defaults to the one in the checkpoint.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub source: String,
    #[arg(long)]
    pub text: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long = "bias")]
    pub bias: Vec<String>,
    /// Token statistics file; defaults to the one in the checkpoint.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Style from each utterance's own audio.
    Reference,
    /// Style predicted by the prior from text.
    Prior,
    /// Ground truth scored against itself.
    GroundTruth,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory; not needed for `ground-truth`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long, value_enum)]
    pub mode: EvalMode,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_VOICING_THRESHOLD)]
    pub voicing_threshold: f64,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Directory receiving token_stats.json, duration_stats.json and
    /// durations.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Synthesis output or corpus directory; repeat to overlay variants.
    #[arg(long = "in", required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub kind: PlotKind,
    /// SVG path; the CSV is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Utterance id for F0 contours; defaults to the first in each input.
    #[arg(long)]
    pub utterance: Option<String>,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                2
            } else {
                1
            }
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenCorpus(a) => cmd_gen_corpus(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Transfer(a) => cmd_transfer(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Stats(a) => cmd_stats(&a),
        Command::Plot(a) => plot(&a.inputs, a.kind, &a.out, a.utterance.as_deref()),
    }
}

pub fn cmd_gen_corpus(a: &GenCorpusArgs) -> Result<()> {
    generate_synthetic_corpus(&a.out, a.utterances, a.seed, &GeneratorConfig::default())?;
    eprintln!("wrote {} utterances to {}", a.utterances, a.out.display());
    Ok(())
}

/// Optional overrides read by `train --config`.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfigFile {
    pub model: Option<ModelConfig>,
    pub training: Option<TrainingConfig>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

/// Corpus restricted to the ids of `split`, in split order.
pub fn select_split(corpus: Vec<Utterance>, ids: &[String]) -> Result<Vec<Utterance>> {
    if ids.is_empty() {
        return Err(Error::InvalidInput("split lists no utterances".into()));
    }
    let mut by_id: BTreeMap<String, Utterance> = corpus.into_iter().map(|u| (u.id.clone(), u)).collect();
    ids.iter()
        .map(|id| by_id.remove(id).ok_or_else(|| Error::InvalidInput(format!("utterance {id} is not in the corpus (or listed twice)"))))
        .collect()
}

fn load_selection(corpus: &Path, split: Option<&Path>) -> Result<Vec<Utterance>> {
    let utts = load_corpus(corpus)?;
    match split {
        Some(p) => select_split(utts, &read_split(p)?),
        None => Ok(utts),
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let file: TrainConfigFile = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfigFile::default(),
    };
    let model_config = file.model.unwrap_or_default();
    let mut config = file.training.unwrap_or_default();
    if let Some(s) = a.steps {
        config.max_steps = s;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(b) = a.batch_size {
        config.batch_size = b;
    }
    let corpus = load_selection(&a.corpus, a.split.as_deref())?;
    let mut trainer = Trainer::new(&corpus, model_config, config)?;
    while !trainer.is_done() {
        let rec = trainer.step(&corpus)?;
        if a.log_every > 0 && rec.step % a.log_every == 0 {
            eprintln!(
                "step {:>6}  lr {:.2e}  recon {:.4}  duration {:.4}  prior {:.4}  total {:.4}",
                rec.step, rec.lr, rec.recon, rec.duration, rec.prior, rec.total
            );
        }
        if let Some(every) = a.snapshot_every.filter(|&e| e > 0) {
            if rec.step % every == 0 {
                trainer.checkpoint().save(&a.out.join("snapshots").join(format!("step{:06}", rec.step)))?;
            }
        }
    }
    let ckpt = trainer.finish(&corpus)?;
    ckpt.save(&a.out)?;
    eprintln!("saved checkpoint to {}", a.out.display());
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<Checkpoint> {
    if !dir.join(CONFIG_FILE).exists() {
        return Err(Error::InvalidInput(format!("{} is not a checkpoint directory", dir.display())));
    }
    Checkpoint::load(dir)
}

/// Reads a text file of utterances, one per non-blank line.
pub fn read_text_file(path: &Path) -> Result<Vec<PhonemeSequence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<PhonemeSequence> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            PhonemeSequence::parse(l).map_err(|e| Error::InvalidInput(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect::<Result<_>>()?;
    if lines.is_empty() {
        return Err(Error::InvalidInput(format!("{} holds no utterances", path.display())));
    }
    Ok(lines)
}

fn parse_biases(specs: &[String], ckpt: &Checkpoint, stats: Option<&Path>) -> Result<(Vec<BiasSpec>, Option<TokenWeightStats>)> {
    let biases: Vec<BiasSpec> = specs.iter().map(|s| s.parse()).collect::<Result<_>>()?;
    if biases.is_empty() {
        return Ok((biases, None));
    }
    let stats = match stats {
        Some(p) => TokenWeightStats::load(p)?,
        None => ckpt.token_stats.clone().ok_or_else(|| {
            Error::InvalidInput(format!("checkpoint has no {TOKEN_STATS_FILE}; pass --stats from the `stats` command"))
        })?,
    };
    Ok((biases, Some(stats)))
}

fn find_utterance(corpus: &Path, id: &str) -> Result<Utterance> {
    load_corpus(corpus)?
        .into_iter()
        .find(|u| u.id == id)
        .ok_or_else(|| Error::InvalidInput(format!("utterance {id} is not in {}", corpus.display())))
}

/// Sidecar written next to each synthesized `.f32` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSidecar {
    pub id: String,
    pub text: String,
    pub durations_predicted: Vec<usize>,
    pub n_frames: usize,
}

/// Writes `<id>.f32`, `<id>.json` and `<id>.f0.csv` into `out`.
pub fn write_synthesis(out: &Path, id: &str, text: &PhonemeSequence, durations: &[usize], features: &AcousticFeatures) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    features.write(&out.join(format!("{id}.f32")))?;
    let sidecar = SynthSidecar {
        id: id.to_string(),
        text: text.to_line(),
        durations_predicted: durations.to_vec(),
        n_frames: features.n_frames(),
    };
    write_json(&out.join(format!("{id}.json")), &sidecar)?;
    let track = extract_pitch(features, DEFAULT_VOICING_THRESHOLD)?;
    let mut csv = String::from("frame,f0_hz,voiced\n");
    for (t, (f, v)) in track.f0.iter().zip(&track.voiced).enumerate() {
        csv.push_str(&format!("{t},{f},{}\n", u8::from(*v)));
    }
    let path = out.join(format!("{id}.f0.csv"));
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))
}

fn synth_lines(
    ckpt: &Checkpoint,
    lines: &[PhonemeSequence],
    biases: &[String],
    stats: Option<&Path>,
    out: &Path,
    style_for: impl Fn(&PhonemeSequence) -> Result<WordStyleEmbeddings>,
) -> Result<()> {
    let (biases, stats) = parse_biases(biases, ckpt, stats)?;
    for (k, text) in lines.iter().enumerate() {
        let mut style = style_for(text)?;
        if let Some(stats) = &stats {
            style = apply_biases(&ckpt.model, &style, &biases, stats)?;
        }
        let synth = ckpt.model.synthesize(text, &style, None)?;
        write_synthesis(out, &format!("synth{k:04}"), text, &synth.durations, &synth.features)?;
    }
    eprintln!("wrote {} utterances to {}", lines.len(), out.display());
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let ckpt = load_model(&a.model)?;
    let lines = read_text_file(&a.text)?;
    match (&a.reference, a.prior) {
        (Some(_), true) | (None, false) => {
            Err(Error::InvalidInput("exactly one of --reference and --prior is required".into()))
        }
        (Some(id), false) => {
            let corpus = a.corpus.as_ref().ok_or_else(|| Error::InvalidInput("--reference needs --corpus".into()))?;
            let source = find_utterance(corpus, id)?;
            synth_lines(&ckpt, &lines, &a.bias, a.stats.as_deref(), &a.out, |t| style_transfer(&ckpt.model, &source, t, 1.0))
        }
        (None, true) => synth_lines(&ckpt, &lines, &a.bias, a.stats.as_deref(), &a.out, |t| ckpt.model.prior_embeddings(t)),
    }
}

pub fn cmd_transfer(a: &TransferArgs) -> Result<()> {
    let ckpt = load_model(&a.model)?;
    let lines = read_text_file(&a.text)?;
    let source = find_utterance(&a.corpus, &a.source)?;
    synth_lines(&ckpt, &lines, &a.bias, a.stats.as_deref(), &a.out, |t| style_transfer(&ckpt.model, &source, t, a.alpha))
}

/// Synthesizes every utterance in `utts` with predicted durations and
/// scores it against the recording.
pub fn evaluate_model(model: Option<&Model>, utts: &[Utterance], mode: EvalMode, threshold: f64) -> Result<Vec<UtteranceMetrics>> {
    utts.iter()
        .map(|u| {
            let estimate = match (mode, model) {
                (EvalMode::GroundTruth, _) => u.features.clone(),
                (_, None) => return Err(Error::InvalidInput("a model is required for this mode".into())),
                (EvalMode::Reference, Some(m)) => m.synthesize(&u.text, &m.reference_embeddings(u)?, None)?.features,
                (EvalMode::Prior, Some(m)) => m.synthesize(&u.text, &m.prior_embeddings(&u.text)?, None)?.features,
            };
            evaluate_pair(&u.id, &u.features, &estimate, threshold)
        })
        .collect()
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ids = read_split(&a.split)?;
    let utts = select_split(load_corpus(&a.corpus)?, &ids)?;
    let ckpt = match (&a.model, a.mode) {
        (_, EvalMode::GroundTruth) => None,
        (Some(dir), _) => Some(load_model(dir)?),
        (None, _) => return Err(Error::InvalidInput("--model is required for this mode".into())),
    };
    let per = evaluate_model(ckpt.as_ref().map(|c| &c.model), &utts, a.mode, a.voicing_threshold)?;
    let model_id = match (&a.model, a.mode) {
        (_, EvalMode::GroundTruth) => "ground-truth".to_string(),
        (Some(dir), _) => dir.display().to_string(),
        (None, _) => unreachable!("checked above"),
    };
    let split = a.split.file_stem().map_or_else(|| a.split.display().to_string(), |s| s.to_string_lossy().into_owned());
    let report = MetricsReport::from_utterances(&model_id, &split, per)?;
    write_json(&a.out, &report)?;
    eprintln!(
        "{} utterances: ffe {:.4}  vde {:.4}  gpe {:.4}  mcd {:.4} dB",
        report.per_utterance.len(),
        report.ffe,
        report.vde,
        report.gpe,
        report.mcd
    );
    Ok(())
}

pub fn cmd_stats(a: &StatsArgs) -> Result<()> {
    let ckpt = load_model(&a.model)?;
    let utts = load_selection(&a.corpus, a.split.as_deref())?;
    let stats = compute_token_stats(&ckpt.model, &utts)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    stats.save(&a.out.join(TOKEN_STATS_FILE))?;
    let (durations, table) = znorm_durations(&utts)?;
    write_json(&a.out.join("duration_stats.json"), &durations)?;
    let mut csv = String::from("utterance,phoneme,duration,z\n");
    for r in &table {
        csv.push_str(&format!("{},{},{},{}\n", r.utterance, r.phoneme, r.duration, r.z));
    }
    let path = a.out.join("durations.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    for k in 0..stats.n_tokens() {
        eprintln!("token {k:>2}: mean {:.4}  std {:.4}", stats.mean[k], stats.std[k]);
    }
    Ok(())
}
