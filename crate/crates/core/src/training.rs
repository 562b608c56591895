//! Joint training of the synthesis model and the prior, learning-rate
//! schedule, gradient-isolation audit and checkpoint directories.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{compute_token_stats, TokenWeightStats};
use crate::corpus::{write_json, Utterance};
use crate::error::{Error, Result};
use crate::model::{FeatureNorm, Model, ModelConfig};
use crate::nn::{Adam, Gradients, Graph, Mat, ParamStore};

pub const FORMAT_VERSION: u32 = 1;
pub const CONFIG_FILE: &str = "config.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const TOKEN_STATS_FILE: &str = "token_stats.json";

const PARAMS_MAGIC: &[u8; 4] = b"WSTP";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub adam_betas: (f64, f64),
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub decay_steps: usize,
    pub l2_factor: f64,
    pub base_lr: f64,
    pub seed: u64,
    pub max_steps: usize,
    pub lambda_dur: f64,
    pub lambda_prior: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            adam_betas: (0.9, 0.999),
            batch_size: 8,
            warmup_steps: 200,
            decay_steps: 2000,
            l2_factor: 1e-6,
            base_lr: 1e-3,
            seed: 0,
            max_steps: 3000,
            lambda_dur: 1.0,
            lambda_prior: 1.0,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainingConfig {
    /// Full-scale schedule: batch 32, 4000 warmup steps, halving every
    /// 50000 steps.
    pub fn full_scale() -> Self {
        TrainingConfig { batch_size: 32, warmup_steps: 4000, decay_steps: 50_000, max_steps: 200_000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.adam_betas;
        let bad = |what: &str| Err(Error::InvalidInput(format!("training config: {what}")));
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.warmup_steps == 0 || self.decay_steps == 0 || self.max_steps == 0 {
            return bad("batch size, warmup, decay period and max steps must be positive");
        }
        if self.warmup_steps >= self.max_steps {
            return bad("warmup must be shorter than max steps");
        }
        if !(self.base_lr > 0.0) || !(self.l2_factor >= 0.0) {
            return bad("base lr must be positive and l2 factor non-negative");
        }
        if !(self.lambda_dur >= 0.0) || !(self.lambda_prior >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("gradient clip must be positive");
            }
        }
        Ok(())
    }

    /// Linear warmup then halving every `decay_steps`.
    pub fn lr(&self, step: usize) -> f64 {
        let ramp = (step as f64 / self.warmup_steps as f64).min(1.0);
        let halvings = step.saturating_sub(self.warmup_steps) / self.decay_steps;
        self.base_lr * ramp * 0.5f64.powi(halvings.min(i32::MAX as usize) as i32)
    }
}

/// Loss components averaged over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub recon: f64,
    pub duration: f64,
    pub prior: f64,
    pub total: f64,
}

impl LossRecord {
    fn is_finite(&self) -> bool {
        [self.recon, self.duration, self.prior, self.total].iter().all(|v| v.is_finite())
    }
}

/// Batch-mean losses and their gradients, including the L2 term.
pub fn batch_gradients(model: &Model, batch: &[&Utterance], config: &TrainingConfig) -> Result<(LossRecord, Gradients)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = Gradients::zeros_like(&model.params);
    let mut rec = LossRecord::default();
    for utt in batch {
        let mut g = Graph::new(&model.params);
        let lv = model.loss_vars(&mut g, utt)?;
        let dur = g.scale(lv.duration, config.lambda_dur);
        let prior = g.scale(lv.prior, config.lambda_prior);
        let sum = g.add(lv.recon, dur);
        let total = g.add(sum, prior);
        rec.recon += g.scalar(lv.recon) * scale;
        rec.duration += g.scalar(lv.duration) * scale;
        rec.prior += g.scalar(lv.prior) * scale;
        rec.total += g.scalar(total) * scale;
        g.backward_into(total, &mut grads, scale);
    }
    if config.l2_factor > 0.0 {
        rec.total += config.l2_factor * model.params.sum_squares();
        for id in model.params.ids() {
            grads.accumulate(id, &(model.params.get(id) * (2.0 * config.l2_factor)));
        }
    }
    Ok((rec, grads))
}

/// Stateful optimizer loop over a fixed corpus.
pub struct Trainer {
    pub model: Model,
    pub config: TrainingConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    step: usize,
    log: Vec<LossRecord>,
}

impl Trainer {
    /// Fits feature normalization on `corpus` and initializes the model.
    pub fn new(corpus: &[Utterance], model_config: ModelConfig, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        if corpus.is_empty() {
            return Err(Error::InvalidInput("cannot train on an empty corpus".into()));
        }
        let model = Model::new(model_config, FeatureNorm::fit(corpus)?)?;
        let (b1, b2) = config.adam_betas;
        let adam = Adam::new(&model.params, b1, b2);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer { model, config, adam, rng, order: Vec::new(), cursor: 0, step: 0, log: Vec::new() })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn log(&self) -> &[LossRecord] {
        &self.log
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.max_steps
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let size = self.config.batch_size.min(n);
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.cursor >= self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// One optimizer update. Steps are numbered from 1.
    pub fn step(&mut self, corpus: &[Utterance]) -> Result<LossRecord> {
        let step = self.step + 1;
        let idx = self.next_batch(corpus.len());
        let batch: Vec<&Utterance> = idx.iter().map(|&i| &corpus[i]).collect();
        let (mut rec, mut grads) = batch_gradients(&self.model, &batch, &self.config)?;
        if !rec.is_finite() || !grads.all_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        if let Some(clip) = self.config.grad_clip {
            let norm = grads.global_norm();
            if norm > clip {
                grads.scale(clip / norm);
            }
        }
        rec.step = step;
        rec.lr = self.config.lr(step);
        self.adam.update(&mut self.model.params, &grads, rec.lr);
        if !self.model.params.all_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        self.step = step;
        self.log.push(rec);
        Ok(rec)
    }

    /// The current parameters rounded to their stored precision.
    pub fn snapshot(&self) -> Model {
        let mut model = self.model.clone();
        model.params.round_to_f32();
        model
    }

    /// Checkpoint of the current parameters, without token statistics.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.snapshot(),
            training: self.config.clone(),
            step: self.step,
            token_stats: None,
            loss_log: self.log.clone(),
        }
    }

    /// Final checkpoint with token statistics over `corpus`.
    pub fn finish(self, corpus: &[Utterance]) -> Result<Checkpoint> {
        let mut ckpt = self.checkpoint();
        ckpt.token_stats = Some(compute_token_stats(&ckpt.model, corpus)?);
        Ok(ckpt)
    }
}

/// Trains for `config.max_steps` updates and returns the final checkpoint.
pub fn train(corpus: &[Utterance], model_config: ModelConfig, config: TrainingConfig) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(corpus, model_config, config)?;
    while !trainer.is_done() {
        trainer.step(corpus)?;
    }
    trainer.finish(corpus)
}

/// Largest gradient magnitudes across the isolation boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientAudit {
    /// Prior loss into non-prior parameters.
    pub prior_to_main: f64,
    /// Reconstruction and duration losses into prior parameters.
    pub main_to_prior: f64,
    /// Word sequence encoder output into phoneme encoder parameters.
    pub word_seq_to_phoneme: f64,
    /// Parameters that received gradient where none is allowed.
    pub violations: Vec<String>,
}

impl GradientAudit {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the stop-gradient boundaries on one utterance.
pub fn audit_gradients(model: &Model, utt: &Utterance) -> Result<GradientAudit> {
    let mut g = Graph::new(&model.params);
    let lv = model.loss_vars(&mut g, utt)?;
    let main = g.add(lv.recon, lv.duration);
    let prior_grads = g.backward(lv.prior);
    let main_grads = g.backward(main);
    let (n, d) = g.shape(lv.word_seq);
    let mut rng = ChaCha8Rng::seed_from_u64(0x0a0d17);
    let seed = Mat::from_shape_simple_fn((n, d), || rng.gen_range(-1.0..1.0));
    let ws_grads = g.backward_with(lv.word_seq, seed);

    let mut audit = GradientAudit { prior_to_main: 0.0, main_to_prior: 0.0, word_seq_to_phoneme: 0.0, violations: Vec::new() };
    for id in model.params.ids() {
        let name = model.params.name(id);
        if Model::is_prior_param(name) {
            let m = main_grads.max_abs(id);
            audit.main_to_prior = audit.main_to_prior.max(m);
            if main_grads.get(id).is_some() && m != 0.0 {
                audit.violations.push(format!("reconstruction/duration -> {name}"));
            }
        } else {
            let m = prior_grads.max_abs(id);
            audit.prior_to_main = audit.prior_to_main.max(m);
            if m != 0.0 {
                audit.violations.push(format!("prior -> {name}"));
            }
        }
        if name.starts_with("phoneme_encoder.") {
            let m = ws_grads.max_abs(id);
            audit.word_seq_to_phoneme = audit.word_seq_to_phoneme.max(m);
            if m != 0.0 {
                audit.violations.push(format!("word sequence -> {name}"));
            }
        }
    }
    Ok(audit)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointConfig {
    format_version: u32,
    step: usize,
    model: ModelConfig,
    training: TrainingConfig,
    feature_norm: FeatureNorm,
}

/// A trained model with its training configuration and history.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub training: TrainingConfig,
    pub step: usize,
    pub token_stats: Option<TokenWeightStats>,
    pub loss_log: Vec<LossRecord>,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let config = CheckpointConfig {
            format_version: FORMAT_VERSION,
            step: self.step,
            model: self.model.config.clone(),
            training: self.training.clone(),
            feature_norm: self.model.norm.clone(),
        };
        write_json(&dir.join(CONFIG_FILE), &config)?;
        let path = dir.join(PARAMS_FILE);
        fs::write(&path, encode_params(&self.model.params)).map_err(|e| Error::io(&path, e))?;
        write_loss_log(&dir.join(LOSS_LOG_FILE), &self.loss_log)?;
        let stats_path = dir.join(TOKEN_STATS_FILE);
        match &self.token_stats {
            Some(s) => s.save(&stats_path)?,
            None if stats_path.exists() => fs::remove_file(&stats_path).map_err(|e| Error::io(&stats_path, e))?,
            None => {}
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let config: CheckpointConfig = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if config.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", config.format_version)));
        }
        let path = dir.join(PARAMS_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let params = decode_params(&bytes)?;
        let model = Model::with_params(config.model, config.feature_norm, params)?;
        let stats_path = dir.join(TOKEN_STATS_FILE);
        let token_stats = if stats_path.exists() { Some(TokenWeightStats::load(&stats_path)?) } else { None };
        let log_path = dir.join(LOSS_LOG_FILE);
        let loss_log = if log_path.exists() { read_loss_log(&log_path)? } else { Vec::new() };
        Ok(Checkpoint { model, training: config.training, step: config.step, token_stats, loss_log })
    }
}

/// `WSTP`, version, array count, then per array: name length, name, rank,
/// dimensions and little-endian f32 values. All integers are u32 LE.
pub fn encode_params(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.n_scalars() * 4);
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for e in store.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        for d in [e.value.nrows(), e.value.ncols()] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in e.value.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != PARAMS_MAGIC {
        return Err(Error::Checkpoint("parameter file has the wrong magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported parameter file version {version}")));
    }
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        if rank != 2 {
            return Err(Error::Checkpoint(format!("{name}: expected a rank-2 array, found rank {rank}")));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
        let data = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?)?;
        let values: Vec<f64> =
            data.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect();
        let value = Mat::from_shape_vec((rows, cols), values).expect("length checked");
        store.add(name, value);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok(store)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("parameter file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn write_loss_log(path: &Path, log: &[LossRecord]) -> Result<()> {
    let mut s = String::from("step,lr,recon,duration,prior,total\n");
    for r in log {
        s.push_str(&format!("{},{},{},{},{},{}\n", r.step, r.lr, r.recon, r.duration, r.prior, r.total));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize| Error::Checkpoint(format!("{}: malformed line {line}", path.display()));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(bad(i + 1));
        }
        let step = fields[0].parse().map_err(|_| bad(i + 1))?;
        let v: Vec<f64> = fields[1..].iter().map(|f| f.parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad(i + 1))?;
        out.push(LossRecord { step, lr: v[0], recon: v[1], duration: v[2], prior: v[3], total: v[4] });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthesize_corpus, GeneratorConfig};

    pub(crate) fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            d_enc: 8,
            d_ws: 4,
            d_ref: 8,
            n_tokens: 3,
            d_token: 6,
            d_attn: 4,
            ref_channels: 4,
            d_prior: 8,
            dur_hidden: 4,
            prenet: 4,
            d_dec: 8,
            ..ModelConfig::default()
        }
    }

    fn corpus(n: usize) -> Vec<Utterance> {
        synthesize_corpus(n, 3, &GeneratorConfig::default()).unwrap().into_iter().map(|(u, _)| u).collect()
    }

    #[test]
    fn schedule_examples() {
        let c = TrainingConfig::default();
        assert_eq!(c.lr(0), 0.0);
        assert_eq!(c.lr(100), 5e-4);
        assert_eq!(c.lr(200), 1e-3);
        assert_eq!(c.lr(2199), 1e-3);
        assert_eq!(c.lr(2200), 5e-4);
        assert_eq!(c.lr(200 + 2 * 2000), 2.5e-4);
        let full = TrainingConfig::full_scale();
        assert_eq!(full.lr(4000 + 2 * 50_000), 2.5e-4);
    }

    #[test]
    fn schedule_non_increasing_after_warmup() {
        let c = TrainingConfig { warmup_steps: 5, decay_steps: 3, max_steps: 50, ..Default::default() };
        for s in 5..60 {
            assert!(c.lr(s + 1) <= c.lr(s));
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainingConfig::default().validate().is_ok());
        assert!(TrainingConfig { warmup_steps: 10, max_steps: 10, ..Default::default() }.validate().is_err());
        assert!(TrainingConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainingConfig { base_lr: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainingConfig { grad_clip: Some(0.0), ..Default::default() }.validate().is_err());
    }

    #[test]
    fn losses_finite_and_l2_accounted() {
        let data = corpus(3);
        let model = Model::new(tiny_model_config(), FeatureNorm::fit(&data).unwrap()).unwrap();
        let batch: Vec<&Utterance> = data.iter().collect();
        let cfg = TrainingConfig::default();
        let (rec, grads) = batch_gradients(&model, &batch, &cfg).unwrap();
        assert!(rec.recon > 0.0 && rec.duration > 0.0 && rec.prior >= 0.0);
        let expected = rec.recon + rec.duration + rec.prior + cfg.l2_factor * model.params.sum_squares();
        assert!((rec.total - expected).abs() < 1e-12);
        assert!(grads.all_finite());
        for id in model.params.ids() {
            assert!(grads.get(id).is_some(), "{} got no gradient", model.params.name(id));
        }
    }

    #[test]
    fn prior_weight_does_not_touch_main_gradients() {
        let data = corpus(2);
        let model = Model::new(tiny_model_config(), FeatureNorm::fit(&data).unwrap()).unwrap();
        let batch: Vec<&Utterance> = data.iter().collect();
        let with = TrainingConfig { lambda_prior: 1.0, ..Default::default() };
        let without = TrainingConfig { lambda_prior: 0.0, ..Default::default() };
        let (_, a) = batch_gradients(&model, &batch, &with).unwrap();
        let (_, b) = batch_gradients(&model, &batch, &without).unwrap();
        for id in model.params.ids() {
            if !Model::is_prior_param(model.params.name(id)) {
                assert_eq!(a.get(id), b.get(id), "{}", model.params.name(id));
            }
        }
    }

    #[test]
    fn audit_is_clean() {
        let data = corpus(2);
        let model = Model::new(tiny_model_config(), FeatureNorm::fit(&data).unwrap()).unwrap();
        let audit = audit_gradients(&model, &data[0]).unwrap();
        assert!(audit.is_clean(), "{:?}", audit.violations);
        assert_eq!(audit.prior_to_main, 0.0);
        assert_eq!(audit.word_seq_to_phoneme, 0.0);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let data = corpus(4);
        let cfg = TrainingConfig { batch_size: 2, warmup_steps: 5, max_steps: 40, base_lr: 1e-2, ..Default::default() };
        let a = train(&data, tiny_model_config(), cfg.clone()).unwrap();
        let b = train(&data, tiny_model_config(), cfg).unwrap();
        assert_eq!(a.loss_log, b.loss_log);
        assert_eq!(a.model.params.entries(), b.model.params.entries());
        let first = a.loss_log[0].recon;
        let last = a.loss_log.last().unwrap().recon;
        assert!(last < first, "{first} -> {last}");
        assert_eq!(a.token_stats.as_ref().unwrap().n_tokens(), 3);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let data = corpus(3);
        let cfg = TrainingConfig { batch_size: 2, warmup_steps: 2, max_steps: 5, ..Default::default() };
        let ckpt = train(&data, tiny_model_config(), cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ckpt.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.model.params.entries(), ckpt.model.params.entries());
        assert_eq!(back.model.norm, ckpt.model.norm);
        assert_eq!(back.training, ckpt.training);
        assert_eq!(back.step, 5);
        assert_eq!(back.token_stats, ckpt.token_stats);
        assert_eq!(back.loss_log, ckpt.loss_log);
        let a = ckpt.model.teacher_forced(&data[0]).unwrap();
        let b = back.model.teacher_forced(&data[0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_params_are_rejected() {
        let mut store = ParamStore::new();
        store.add("a", Mat::from_elem((2, 3), 0.5));
        let bytes = encode_params(&store);
        assert_eq!(decode_params(&bytes).unwrap().entries(), store.entries());
        assert!(decode_params(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode_params(&wrong).is_err());
        let mut longer = bytes;
        longer.push(0);
        assert!(decode_params(&longer).is_err());
    }

    #[test]
    fn non_finite_loss_reports_step() {
        let data = corpus(2);
        let cfg = TrainingConfig { batch_size: 1, warmup_steps: 1, max_steps: 3, ..Default::default() };
        let mut t = Trainer::new(&data, tiny_model_config(), cfg).unwrap();
        t.step(&data).unwrap();
        let id = t.model.params.ids().next().unwrap();
        t.model.params.get_mut(id)[[0, 0]] = f64::NAN;
        match t.step(&data) {
            Err(Error::NonFiniteLoss { step }) => assert_eq!(step, 2),
            other => panic!("{other:?}"),
        }
    }
}
