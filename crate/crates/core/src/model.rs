//! The full synthesis model: phoneme encoder, word sequence encoder,
//! reference summarizer with style tokens, duration predictor, frame decoder
//! and the autoregressive prior, all sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AcousticFeatures, PhonemeSequence, Utterance, INVENTORY, N_CHANNELS, PERIOD_CHANNEL};
use crate::decoder::{check_upsample_args, duration_target, DurationPrediction, DurationPredictor, FrameDecoder, SigmaMode};
use crate::encoders::{
    build_conditioning, PhonemeEncoder, ReferenceSummarizer, StyleTokenBank, WordSequenceEncoder, WordStyleEmbeddings,
};
use crate::error::{Error, Result};
use crate::nn::{Graph, Mat, ParamStore, Var};
use crate::prior::Prior;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_enc: usize,
    pub d_ws: usize,
    pub d_ref: usize,
    pub n_tokens: usize,
    pub d_token: usize,
    pub d_attn: usize,
    pub ref_channels: usize,
    pub kernel: usize,
    pub d_prior: usize,
    pub dur_hidden: usize,
    pub prenet: usize,
    pub d_dec: usize,
    pub sigma_mode: SigmaMode,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_enc: 64,
            d_ws: 32,
            d_ref: 128,
            n_tokens: 15,
            d_token: 128,
            d_attn: 128,
            ref_channels: 32,
            kernel: 3,
            d_prior: 256,
            dur_hidden: 64,
            prenet: 64,
            d_dec: 128,
            sigma_mode: SigmaMode::Predicted,
            init_seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn d_cond(&self) -> usize {
        self.d_enc + self.d_ws + self.d_token
    }

    fn validate(&self) -> Result<()> {
        let dims = [
            self.d_enc,
            self.d_ws,
            self.d_ref,
            self.n_tokens,
            self.d_token,
            self.d_attn,
            self.ref_channels,
            self.d_prior,
            self.dur_hidden,
            self.prenet,
            self.d_dec,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput("model dimensions must be positive".into()));
        }
        if self.d_enc % 2 != 0 || self.d_ws % 2 != 0 {
            return Err(Error::InvalidInput("bidirectional encoder widths must be even".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidInput("convolution kernel must be odd".into()));
        }
        if let SigmaMode::Fixed(s) = self.sigma_mode {
            if !(s > 0.0) {
                return Err(Error::InvalidInput("fixed sigma must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Per-channel standardization fitted on the training corpus. The network
/// reads and predicts standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    pub fn identity() -> Self {
        FeatureNorm { mean: vec![0.0; N_CHANNELS], std: vec![1.0; N_CHANNELS] }
    }

    pub fn fit(corpus: &[Utterance]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::InvalidInput("empty corpus".into()));
        }
        let mut sum = vec![0.0; N_CHANNELS];
        let mut sq = vec![0.0; N_CHANNELS];
        let mut n = 0usize;
        for u in corpus {
            for row in u.features.frames().rows() {
                for (c, &v) in row.iter().enumerate() {
                    let v = f64::from(v);
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1;
            }
        }
        let n = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-3))
            .collect();
        Ok(FeatureNorm { mean, std })
    }

    pub fn normalize(&self, features: &AcousticFeatures) -> Mat {
        let mut m = features.to_f64();
        for mut row in m.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        m
    }

    pub fn denormalize(&self, m: &Mat) -> Mat {
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[c] + self.mean[c];
            }
        }
        out
    }
}

/// Graph nodes for one utterance's text.
#[derive(Debug, Clone, Copy)]
pub struct TextEncoding {
    pub enc: Var,
    pub word_seq: Var,
}

/// Graph nodes of the training losses for one utterance.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub recon: Var,
    pub duration: Var,
    pub prior: Var,
    pub style_weights: Var,
    pub word_seq: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    pub features: AcousticFeatures,
    pub durations: Vec<usize>,
    pub prediction: DurationPrediction,
}

/// Lowest pitch period written into synthesized features, in samples.
pub const MIN_PERIOD: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub norm: FeatureNorm,
    pub phoneme_encoder: PhonemeEncoder,
    pub reference: ReferenceSummarizer,
    pub tokens: StyleTokenBank,
    pub word_seq: WordSequenceEncoder,
    pub duration: DurationPredictor,
    pub decoder: FrameDecoder,
    pub prior: Prior,
}

impl Model {
    pub fn new(config: ModelConfig, norm: FeatureNorm) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let c = &config;
        let phoneme_encoder = PhonemeEncoder::new(&mut store, INVENTORY.len(), c.d_enc, c.kernel, &mut rng);
        let word_seq = WordSequenceEncoder::new(&mut store, c.d_enc, c.d_ws, &mut rng);
        let reference = ReferenceSummarizer::new(&mut store, c.ref_channels, c.kernel, c.d_ref, &mut rng);
        let tokens = StyleTokenBank::new(&mut store, c.n_tokens, c.d_token, c.d_ref, c.d_attn, &mut rng);
        let duration = DurationPredictor::new(&mut store, c.d_cond(), c.dur_hidden, c.sigma_mode, &mut rng);
        let decoder = FrameDecoder::new(&mut store, c.d_cond(), c.prenet, c.d_dec, &mut rng);
        let prior = Prior::new(&mut store, c.d_enc + c.d_ws, c.d_token, c.d_prior, &mut rng);
        if norm.mean.len() != N_CHANNELS || norm.std.len() != N_CHANNELS {
            return Err(Error::Shape("feature normalization must have 22 channels".into()));
        }
        Ok(Model {
            config,
            params: store,
            norm,
            phoneme_encoder,
            reference,
            tokens,
            word_seq,
            duration,
            decoder,
            prior,
        })
    }

    /// Rebuilds a model around stored parameters; names and shapes must match
    /// what `config` produces.
    pub fn with_params(config: ModelConfig, norm: FeatureNorm, params: ParamStore) -> Result<Self> {
        let mut model = Model::new(config, norm)?;
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (fresh, stored) in model.params.entries().iter().zip(params.entries()) {
            if fresh.name != stored.name || fresh.value.dim() != stored.value.dim() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    stored.name,
                    stored.value.dim(),
                    fresh.name,
                    fresh.value.dim()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    /// Name prefixes of the components trained only by the prior loss.
    pub fn is_prior_param(name: &str) -> bool {
        name.starts_with("prior.")
    }

    pub fn encode_text(&self, g: &mut Graph, text: &PhonemeSequence) -> Result<TextEncoding> {
        let indices = text.indices()?;
        let enc = self.phoneme_encoder.forward(g, &indices);
        let word_seq = self.word_seq.forward(g, enc, text.word_ids());
        Ok(TextEncoding { enc, word_seq })
    }

    /// Token weights and style embeddings computed from an utterance's audio.
    pub fn reference_style(&self, g: &mut Graph, utt: &Utterance) -> Result<(Var, Var)> {
        let frames = self.norm.normalize(&utt.features);
        let query = self.reference.forward(g, &frames, &utt.durations, utt.text.word_ids())?;
        Ok(self.tokens.attend(g, query))
    }

    /// Builds all training losses for one utterance.
    pub fn loss_vars(&self, g: &mut Graph, utt: &Utterance) -> Result<LossVars> {
        let word_ids = utt.text.word_ids();
        let text = self.encode_text(g, &utt.text)?;
        let (weights, style) = self.reference_style(g, utt)?;
        let cond = build_conditioning(g, text.enc, text.word_seq, style, word_ids)?;

        let (log_d, sigma) = self.duration.forward(g, cond);
        let target_d = Mat::from_shape_fn((utt.durations.len(), 1), |(i, _)| duration_target(utt.durations[i]));
        let target_d = g.constant(target_d);
        let duration = g.mean_square(log_d, target_d);

        let frames = self.norm.normalize(&utt.features);
        let dc = self.decoder.condition(g, cond, sigma, &utt.durations);
        let pred = self.decoder.teacher_forced(g, dc, &frames)?;
        let target = g.constant(frames);
        let mse = g.mean_square(pred, target);
        let mae = g.mean_abs(pred, target);
        let recon = g.add(mse, mae);

        let prior_in = self.prior.inputs(g, text.enc, text.word_seq, word_ids);
        let (_, prior) = self.prior.teacher_forced(g, prior_in, style)?;
        Ok(LossVars { recon, duration, prior, style_weights: weights, word_seq: text.word_seq })
    }

    pub fn reference_embeddings(&self, utt: &Utterance) -> Result<WordStyleEmbeddings> {
        let mut g = Graph::new(&self.params);
        let (w, e) = self.reference_style(&mut g, utt)?;
        Ok(WordStyleEmbeddings { embeddings: g.value(e).clone(), weights: Some(g.value(w).clone()) })
    }

    pub fn prior_embeddings(&self, text: &PhonemeSequence) -> Result<WordStyleEmbeddings> {
        let mut g = Graph::new(&self.params);
        let t = self.encode_text(&mut g, text)?;
        let inputs = self.prior.inputs(&mut g, t.enc, t.word_seq, text.word_ids());
        let e = self.prior.generate(&mut g, inputs);
        Ok(WordStyleEmbeddings { embeddings: g.value(e).clone(), weights: None })
    }

    fn conditioning(&self, g: &mut Graph, text: &PhonemeSequence, style: &WordStyleEmbeddings) -> Result<Var> {
        if style.n_words() != text.n_words() || style.embeddings.ncols() != self.config.d_token {
            return Err(Error::Shape(format!(
                "style has {} x {} embeddings for {} words",
                style.n_words(),
                style.embeddings.ncols(),
                text.n_words()
            )));
        }
        let t = self.encode_text(g, text)?;
        let s = g.constant(style.embeddings.clone());
        build_conditioning(g, t.enc, t.word_seq, s, text.word_ids())
    }

    pub fn predict_durations(&self, text: &PhonemeSequence, style: &WordStyleEmbeddings) -> Result<DurationPrediction> {
        let mut g = Graph::new(&self.params);
        let cond = self.conditioning(&mut g, text, style)?;
        let (l, s) = self.duration.forward(&mut g, cond);
        Ok(DurationPrediction {
            log_durations: g.value(l).iter().copied().collect(),
            sigmas: g.value(s).iter().copied().collect(),
        })
    }

    /// Free-running synthesis. Predicted durations are used unless
    /// `durations` is given.
    pub fn synthesize(
        &self,
        text: &PhonemeSequence,
        style: &WordStyleEmbeddings,
        durations: Option<&[usize]>,
    ) -> Result<Synthesis> {
        let mut g = Graph::new(&self.params);
        let cond = self.conditioning(&mut g, text, style)?;
        let (l, s) = self.duration.forward(&mut g, cond);
        let prediction = DurationPrediction {
            log_durations: g.value(l).iter().copied().collect(),
            sigmas: g.value(s).iter().copied().collect(),
        };
        let durations = match durations {
            Some(d) => d.to_vec(),
            None => prediction.durations(),
        };
        check_upsample_args(text.len(), &durations, &prediction.sigmas)?;
        let dc = self.decoder.condition(&mut g, cond, s, &durations);
        let out = self.decoder.free_running(&mut g, dc)?;
        let features = self.to_features(g.value(out))?;
        Ok(Synthesis { features, durations, prediction })
    }

    /// Teacher-forced reconstruction with reference style and ground-truth
    /// durations, as seen during training.
    pub fn teacher_forced(&self, utt: &Utterance) -> Result<AcousticFeatures> {
        let mut g = Graph::new(&self.params);
        let t = self.encode_text(&mut g, &utt.text)?;
        let (_, style) = self.reference_style(&mut g, utt)?;
        let cond = build_conditioning(&mut g, t.enc, t.word_seq, style, utt.text.word_ids())?;
        let (_, sigma) = self.duration.forward(&mut g, cond);
        let dc = self.decoder.condition(&mut g, cond, sigma, &utt.durations);
        let frames = self.norm.normalize(&utt.features);
        let out = self.decoder.teacher_forced(&mut g, dc, &frames)?;
        self.to_features(g.value(out))
    }

    fn to_features(&self, normalized: &Mat) -> Result<AcousticFeatures> {
        let mut m = self.norm.denormalize(normalized);
        m.column_mut(PERIOD_CHANNEL).mapv_inplace(|p| p.max(MIN_PERIOD));
        AcousticFeatures::from_f64(&m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthesize_corpus, GeneratorConfig};

    fn small_config() -> ModelConfig {
        ModelConfig {
            d_enc: 16,
            d_ws: 8,
            d_ref: 16,
            n_tokens: 4,
            d_token: 12,
            d_attn: 8,
            ref_channels: 8,
            d_prior: 16,
            dur_hidden: 8,
            prenet: 8,
            d_dec: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn losses_are_finite_and_non_negative() {
        let corpus: Vec<_> = synthesize_corpus(3, 4, &GeneratorConfig::default())
            .unwrap()
            .into_iter()
            .map(|(u, _)| u)
            .collect();
        let model = Model::new(small_config(), FeatureNorm::fit(&corpus).unwrap()).unwrap();
        for u in &corpus {
            let mut g = Graph::new(&model.params);
            let l = model.loss_vars(&mut g, u).unwrap();
            for v in [l.recon, l.duration, l.prior] {
                let x = g.scalar(v);
                assert!(x.is_finite() && x >= 0.0);
            }
        }
    }

    #[test]
    fn synthesis_respects_given_durations() {
        let corpus: Vec<_> = synthesize_corpus(1, 9, &GeneratorConfig::default())
            .unwrap()
            .into_iter()
            .map(|(u, _)| u)
            .collect();
        let model = Model::new(small_config(), FeatureNorm::fit(&corpus).unwrap()).unwrap();
        let u = &corpus[0];
        let style = model.reference_embeddings(u).unwrap();
        let syn = model.synthesize(&u.text, &style, Some(&u.durations)).unwrap();
        assert_eq!(syn.features.n_frames(), u.features.n_frames());
        let prior = model.prior_embeddings(&u.text).unwrap();
        assert!(prior.weights.is_none());
        let syn = model.synthesize(&u.text, &prior, None).unwrap();
        assert_eq!(syn.features.n_frames(), syn.durations.iter().sum::<usize>());
        let bad = WordStyleEmbeddings { embeddings: Mat::zeros((1, 12)), weights: None };
        if u.text.n_words() != 1 {
            assert!(model.synthesize(&u.text, &bad, None).is_err());
        }
    }

    #[test]
    fn with_params_checks_layout() {
        let model = Model::new(small_config(), FeatureNorm::identity()).unwrap();
        let again = Model::with_params(small_config(), FeatureNorm::identity(), model.params.clone()).unwrap();
        assert_eq!(again.params, model.params);
        let other = Model::new(ModelConfig { d_dec: 20, ..small_config() }, FeatureNorm::identity()).unwrap();
        assert!(Model::with_params(small_config(), FeatureNorm::identity(), other.params).is_err());
    }
}
