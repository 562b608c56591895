//! Utterance data model, the on-disk corpus format, and the synthetic corpus
//! generator.
//!
//! A corpus directory holds `manifest.json` plus one `.f32` file per
//! utterance (raw little-endian `f32`, row-major `[n_frames x 22]`). The
//! synthetic generator additionally writes `style_factors.json`, the latent
//! per-word pitch/rate factors, which only the acceptance suite reads.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_CHANNELS: usize = 22;
pub const N_CEPSTRAL: usize = 20;
pub const PERIOD_CHANNEL: usize = 20;
pub const CORRELATION_CHANNEL: usize = 21;
pub const SAMPLE_RATE_HZ: f64 = 24000.0;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const STYLE_FACTORS_FILE: &str = "style_factors.json";

/// Phone set: 16 vowels followed by 24 consonants.
pub const INVENTORY: [&str; 40] = [
    "aa", "ae", "ah", "ao", "aw", "ax", "ay", "eh", "er", "ey", "ih", "iy", "ow", "oy", "uh", "uw", //
    "b", "ch", "d", "dh", "f", "g", "hh", "jh", "k", "l", "m", "n", "ng", "p", "r", "s", "sh", "t",
    "th", "v", "w", "y", "z", "zh",
];
pub const N_VOWELS: usize = 16;

pub fn phoneme_index(symbol: &str) -> Option<usize> {
    INVENTORY.iter().position(|s| *s == symbol)
}

pub fn is_vowel(index: usize) -> bool {
    index < N_VOWELS
}

/// Nominal duration in frames of a phoneme at neutral speaking rate.
pub fn base_duration(index: usize) -> usize {
    if is_vowel(index) {
        6 + index % 5
    } else {
        3 + index % 4
    }
}

/// Phonemes with their word membership.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeSequence {
    phonemes: Vec<String>,
    word_ids: Vec<usize>,
}

impl PhonemeSequence {
    pub fn new(phonemes: Vec<String>, word_ids: Vec<usize>) -> Result<Self> {
        if phonemes.is_empty() {
            return Err(Error::InvalidInput("empty phoneme sequence".into()));
        }
        if phonemes.len() != word_ids.len() {
            return Err(Error::Shape(format!(
                "{} phonemes but {} word ids",
                phonemes.len(),
                word_ids.len()
            )));
        }
        if word_ids[0] != 0 {
            return Err(Error::InvalidInput("word ids must start at 0".into()));
        }
        for pair in word_ids.windows(2) {
            if pair[1] != pair[0] && pair[1] != pair[0] + 1 {
                return Err(Error::InvalidInput(format!(
                    "word ids must be non-decreasing in steps of 1, found {} -> {}",
                    pair[0], pair[1]
                )));
            }
        }
        Ok(PhonemeSequence { phonemes, word_ids })
    }

    /// Parses one line of the text grammar: words separated by whitespace,
    /// phonemes within a word separated by `.`, e.g. `h.e.l.o w.er.l.d`.
    pub fn parse(line: &str) -> Result<Self> {
        let mut phonemes = Vec::new();
        let mut word_ids = Vec::new();
        for (w, word) in line.split_whitespace().enumerate() {
            for p in word.split('.') {
                if p.is_empty() {
                    return Err(Error::InvalidInput(format!("empty phoneme in word `{word}`")));
                }
                phonemes.push(p.to_string());
                word_ids.push(w);
            }
        }
        Self::new(phonemes, word_ids)
    }

    pub fn phonemes(&self) -> &[String] {
        &self.phonemes
    }

    pub fn word_ids(&self) -> &[usize] {
        &self.word_ids
    }

    pub fn len(&self) -> usize {
        self.phonemes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phonemes.is_empty()
    }

    pub fn n_words(&self) -> usize {
        self.word_ids.last().map_or(0, |w| w + 1)
    }

    /// Inventory indices; fails on the first unknown symbol.
    pub fn indices(&self) -> Result<Vec<usize>> {
        self.phonemes
            .iter()
            .map(|p| phoneme_index(p).ok_or_else(|| Error::UnknownPhoneme(p.clone())))
            .collect()
    }

    /// Keeps only the first `n_words` words.
    pub fn truncate_words(&self, n_words: usize) -> Result<Self> {
        let keep = self.word_ids.iter().take_while(|&&w| w < n_words).count();
        Self::new(self.phonemes[..keep].to_vec(), self.word_ids[..keep].to_vec())
    }

    /// Renders back into the text grammar accepted by [`PhonemeSequence::parse`].
    pub fn to_line(&self) -> String {
        let mut out = String::new();
        for (i, p) in self.phonemes.iter().enumerate() {
            if i > 0 {
                out.push(if self.word_ids[i] != self.word_ids[i - 1] { ' ' } else { '.' });
            }
            out.push_str(p);
        }
        out
    }
}

/// Frame-level acoustic features, `[n_frames x 22]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticFeatures {
    frames: Array2<f32>,
}

impl AcousticFeatures {
    pub fn new(frames: Array2<f32>) -> Result<Self> {
        if frames.ncols() != N_CHANNELS {
            return Err(Error::Shape(format!("expected {N_CHANNELS} channels, got {}", frames.ncols())));
        }
        if frames.nrows() == 0 {
            return Err(Error::InvalidInput("features must have at least one frame".into()));
        }
        Ok(AcousticFeatures { frames })
    }

    pub fn from_f64(frames: &Array2<f64>) -> Result<Self> {
        Self::new(frames.mapv(|v| v as f32))
    }

    pub fn frames(&self) -> &Array2<f32> {
        &self.frames
    }

    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.frames.mapv(f64::from)
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.frames.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(bytes: &[u8], n_frames: usize) -> Result<Self> {
        if bytes.len() != n_frames * N_CHANNELS * 4 {
            return Err(Error::Shape(format!(
                "expected {} rows of {N_CHANNELS} f32, file holds {} bytes",
                n_frames,
                bytes.len()
            )));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let frames = Array2::from_shape_vec((n_frames, N_CHANNELS), data)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(frames)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_le_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Reads a `.f32` file whose row count is inferred from its size.
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let row = N_CHANNELS * 4;
        if bytes.len() % row != 0 {
            return Err(Error::Shape(format!("{}: size is not a multiple of {row}", path.display())));
        }
        Self::from_le_bytes(&bytes, bytes.len() / row)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub text: PhonemeSequence,
    pub durations: Vec<usize>,
    pub features: AcousticFeatures,
}

impl Utterance {
    pub fn new(
        id: impl Into<String>,
        text: PhonemeSequence,
        durations: Vec<usize>,
        features: AcousticFeatures,
    ) -> Result<Self> {
        let id = id.into();
        if durations.len() != text.len() {
            return Err(Error::utterance(
                &id,
                format!("{} durations for {} phonemes", durations.len(), text.len()),
            ));
        }
        if durations.contains(&0) {
            return Err(Error::utterance(&id, "durations must be positive"));
        }
        let total: usize = durations.iter().sum();
        if total != features.n_frames() {
            return Err(Error::utterance(
                &id,
                format!("durations sum to {total} but features have {} frames", features.n_frames()),
            ));
        }
        Ok(Utterance { id, text, durations, features })
    }

    /// Frame range `[start, end)` covered by each word.
    pub fn word_frame_spans(&self) -> Vec<(usize, usize)> {
        word_frame_spans(&self.durations, self.text.word_ids())
    }
}

/// Assigns frames to phonemes by cumulative duration, then to words.
pub fn word_frame_spans(durations: &[usize], word_ids: &[usize]) -> Vec<(usize, usize)> {
    let n_words = word_ids.last().map_or(0, |w| w + 1);
    let mut spans = vec![(usize::MAX, 0); n_words];
    let mut t = 0;
    for (&d, &w) in durations.iter().zip(word_ids) {
        let span = &mut spans[w];
        span.0 = span.0.min(t);
        t += d;
        span.1 = t;
    }
    spans
}

/// Latent per-word style of a synthetic utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleFactors {
    pub pitch: Vec<f64>,
    pub rate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Seeds the per-phoneme cepstral templates; independent of the corpus
    /// seed so that corpora generated with different seeds share a voice.
    pub template_seed: u64,
    pub noise_std: f64,
    pub min_words: usize,
    pub max_words: usize,
    pub min_phonemes_per_word: usize,
    pub max_phonemes_per_word: usize,
    pub vowel_correlation: f32,
    pub consonant_correlation: f32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            template_seed: 0x5eed_7e17,
            noise_std: 0.05,
            min_words: 2,
            max_words: 8,
            min_phonemes_per_word: 1,
            max_phonemes_per_word: 5,
            vowel_correlation: 0.8,
            consonant_correlation: 0.1,
        }
    }
}

/// Pitch period in samples for a latent pitch factor.
pub fn pitch_period(pitch_factor: f64) -> f64 {
    160.0 * 2f64.powf(-pitch_factor * 0.5)
}

pub fn scaled_duration(base: usize, rate_factor: f64) -> usize {
    let d = (base as f64 * 2f64.powf(-rate_factor * 0.5)).round();
    (d as usize).max(1)
}

pub fn phoneme_templates(config: &GeneratorConfig) -> Vec<[f64; N_CEPSTRAL]> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.template_seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    INVENTORY
        .iter()
        .map(|_| {
            let mut t = [0.0; N_CEPSTRAL];
            for v in t.iter_mut() {
                *v = normal.sample(&mut rng);
            }
            t
        })
        .collect()
}

/// Renders features for a phoneme sequence under given per-word factors.
/// `rng` supplies the cepstral noise.
pub fn render_utterance(
    id: &str,
    text: &PhonemeSequence,
    factors: &StyleFactors,
    templates: &[[f64; N_CEPSTRAL]],
    config: &GeneratorConfig,
    rng: &mut impl Rng,
) -> Result<Utterance> {
    let indices = text.indices()?;
    let noise = Normal::new(0.0, config.noise_std).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let durations: Vec<usize> = indices
        .iter()
        .zip(text.word_ids())
        .map(|(&p, &w)| scaled_duration(base_duration(p), factors.rate[w]))
        .collect();
    let n_frames: usize = durations.iter().sum();
    let mut frames = Array2::<f32>::zeros((n_frames, N_CHANNELS));
    let mut t = 0;
    for ((&p, &w), &d) in indices.iter().zip(text.word_ids()).zip(&durations) {
        let period = pitch_period(factors.pitch[w]) as f32;
        let corr = if is_vowel(p) { config.vowel_correlation } else { config.consonant_correlation };
        for _ in 0..d {
            let mut row = frames.row_mut(t);
            for c in 0..N_CEPSTRAL {
                row[c] = (templates[p][c] + noise.sample(rng)) as f32;
            }
            row[PERIOD_CHANNEL] = period;
            row[CORRELATION_CHANNEL] = corr;
            t += 1;
        }
    }
    Utterance::new(id, text.clone(), durations, AcousticFeatures::new(frames)?)
}

/// Generates `n_utterances` synthetic utterances in memory. Pure function of
/// its arguments.
pub fn synthesize_corpus(
    n_utterances: usize,
    seed: u64,
    config: &GeneratorConfig,
) -> Result<Vec<(Utterance, StyleFactors)>> {
    if n_utterances < 1 {
        return Err(Error::InvalidInput("n_utterances must be at least 1".into()));
    }
    if config.min_words < 1
        || config.min_words > config.max_words
        || config.min_phonemes_per_word < 1
        || config.min_phonemes_per_word > config.max_phonemes_per_word
    {
        return Err(Error::InvalidInput("inconsistent generator word/phoneme ranges".into()));
    }
    let templates = phoneme_templates(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = n_utterances.to_string().len().max(4);
    let mut out = Vec::with_capacity(n_utterances);
    for u in 0..n_utterances {
        let n_words = rng.gen_range(config.min_words..=config.max_words);
        let mut phonemes = Vec::new();
        let mut word_ids = Vec::new();
        let mut factors = StyleFactors { pitch: Vec::with_capacity(n_words), rate: Vec::with_capacity(n_words) };
        for w in 0..n_words {
            let n_ph = rng.gen_range(config.min_phonemes_per_word..=config.max_phonemes_per_word);
            for _ in 0..n_ph {
                phonemes.push(INVENTORY[rng.gen_range(0..INVENTORY.len())].to_string());
                word_ids.push(w);
            }
            factors.pitch.push(rng.gen_range(-1.0..=1.0));
            factors.rate.push(rng.gen_range(-1.0..=1.0));
        }
        let text = PhonemeSequence::new(phonemes, word_ids)?;
        let id = format!("utt{u:0width$}");
        let utt = render_utterance(&id, &text, &factors, &templates, config, &mut rng)?;
        out.push((utt, factors));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    phonemes: Vec<String>,
    word_ids: Vec<usize>,
    durations: Vec<usize>,
    n_frames: usize,
    feature_file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FactorsEntry {
    id: String,
    pitch_factors: Vec<f64>,
    rate_factors: Vec<f64>,
}

/// Writes utterances (and optionally their latent factors) in the corpus
/// directory format.
pub fn write_corpus(dir: &Path, utterances: &[Utterance], factors: Option<&[StyleFactors]>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Vec::with_capacity(utterances.len());
    for utt in utterances {
        let feature_file = format!("{}.f32", utt.id);
        utt.features.write(&dir.join(&feature_file))?;
        manifest.push(ManifestEntry {
            id: utt.id.clone(),
            phonemes: utt.text.phonemes().to_vec(),
            word_ids: utt.text.word_ids().to_vec(),
            durations: utt.durations.clone(),
            n_frames: utt.features.n_frames(),
            feature_file,
        });
    }
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    if let Some(factors) = factors {
        let entries: Vec<FactorsEntry> = utterances
            .iter()
            .zip(factors)
            .map(|(u, f)| FactorsEntry {
                id: u.id.clone(),
                pitch_factors: f.pitch.clone(),
                rate_factors: f.rate.clone(),
            })
            .collect();
        write_json(&dir.join(STYLE_FACTORS_FILE), &entries)?;
    }
    Ok(())
}

/// Generates a synthetic corpus and writes it to `out`.
pub fn generate_synthetic_corpus(out: &Path, n_utterances: usize, seed: u64, config: &GeneratorConfig) -> Result<()> {
    let items = synthesize_corpus(n_utterances, seed, config)?;
    let (utts, factors): (Vec<_>, Vec<_>) = items.into_iter().unzip();
    write_corpus(out, &utts, Some(&factors))
}

pub fn load_corpus(dir: &Path) -> Result<Vec<Utterance>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    let mut out = Vec::with_capacity(manifest.len());
    for entry in manifest {
        let seq = PhonemeSequence::new(entry.phonemes, entry.word_ids)
            .map_err(|e| Error::utterance(&entry.id, e.to_string()))?;
        let fpath = dir.join(&entry.feature_file);
        let bytes = fs::read(&fpath)
            .map_err(|e| Error::utterance(&entry.id, format!("missing feature file {}: {e}", fpath.display())))?;
        let features = AcousticFeatures::from_le_bytes(&bytes, entry.n_frames).map_err(|_| {
            Error::utterance(
                &entry.id,
                format!(
                    "shape mismatch: manifest says {} frames, {} holds {} rows",
                    entry.n_frames,
                    entry.feature_file,
                    bytes.len() as f64 / (N_CHANNELS * 4) as f64
                ),
            )
        })?;
        out.push(Utterance::new(entry.id, seq, entry.durations, features)?);
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

pub fn load_style_factors(dir: &Path) -> Result<BTreeMap<String, StyleFactors>> {
    let path = dir.join(STYLE_FACTORS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let entries: Vec<FactorsEntry> = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    Ok(entries
        .into_iter()
        .map(|e| (e.id, StyleFactors { pitch: e.pitch_factors, rate: e.rate_factors }))
        .collect())
}

/// Reads a split file: one utterance id per line, blank lines ignored.
pub fn read_split(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Mean and population standard deviation of a phone class's durations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DurationStats {
    pub classes: BTreeMap<String, ClassStats>,
}

impl DurationStats {
    pub fn from_durations<'a>(items: impl IntoIterator<Item = (&'a str, usize)>) -> Self {
        let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (p, d) in items {
            acc.entry(p.to_string()).or_default().push(d as f64);
        }
        let classes = acc
            .into_iter()
            .map(|(p, ds)| {
                let (mean, std) = mean_std(&ds);
                (p, ClassStats { mean, std, count: ds.len() })
            })
            .collect();
        DurationStats { classes }
    }

    /// Normalizes one duration; `None` for a phone class without statistics.
    pub fn normalize(&self, phoneme: &str, duration: usize) -> Option<f64> {
        self.classes
            .get(phoneme)
            .map(|s| (duration as f64 - s.mean) / s.std.max(STD_FLOOR))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedDuration {
    pub utterance: String,
    pub phoneme: String,
    pub duration: usize,
    pub z: f64,
}

/// Per-phone-class duration z-normalization over a whole corpus.
pub fn znorm_durations(corpus: &[Utterance]) -> Result<(DurationStats, Vec<NormalizedDuration>)> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    let stats = DurationStats::from_durations(
        corpus
            .iter()
            .flat_map(|u| u.text.phonemes().iter().map(String::as_str).zip(u.durations.iter().copied())),
    );
    let mut table = Vec::new();
    for u in corpus {
        for (p, &d) in u.text.phonemes().iter().zip(&u.durations) {
            let z = stats.normalize(p, d).expect("class seen while collecting statistics");
            table.push(NormalizedDuration { utterance: u.id.clone(), phoneme: p.clone(), duration: d, z });
        }
    }
    Ok((stats, table))
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
