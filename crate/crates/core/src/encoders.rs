//! Text and reference encoders.
//!
//! * [`PhonemeEncoder`]: embedding, one convolution, one bidirectional GRU.
//! * [`ReferenceSummarizer`]: per-word acoustic summary (two convolutions and
//!   a GRU whose final state is the summary), computed strictly inside each
//!   word's frame span.
//! * [`StyleTokenBank`]: scaled bilinear attention of a summary over the
//!   style tokens; the word style embedding is the softmax-weighted token sum.
//! * [`WordSequenceEncoder`]: text-only word-level encoder that reads
//!   stop-gradient phoneme encodings.

use ndarray::Array2;
use rand::Rng;

use crate::corpus::{word_frame_spans, N_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{BiGru, Conv1d, Graph, Gru, Linear, Mat, ParamId, ParamStore, Var};

/// Per-word style embeddings, optionally with the token weights that
/// produced them. Weights are absent once an embedding has been biased or
/// predicted by the prior.
#[derive(Debug, Clone, PartialEq)]
pub struct WordStyleEmbeddings {
    pub embeddings: Mat,
    pub weights: Option<Mat>,
}

impl WordStyleEmbeddings {
    pub fn n_words(&self) -> usize {
        self.embeddings.nrows()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PhonemeEncoder {
    pub embedding: ParamId,
    pub conv: Conv1d,
    pub rnn: BiGru,
    pub dim: usize,
}

impl PhonemeEncoder {
    pub fn new(store: &mut ParamStore, n_symbols: usize, dim: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let embedding = store.add_uniform("phoneme_encoder.embedding", (n_symbols, dim), 0.5, rng);
        let conv = Conv1d::new(store, "phoneme_encoder.conv", dim, dim, kernel, rng);
        let rnn = BiGru::new(store, "phoneme_encoder.rnn", dim, dim / 2, rng);
        PhonemeEncoder { embedding, conv, rnn, dim }
    }

    /// `[n_phonemes x dim]` encodings of inventory indices.
    pub fn forward(&self, g: &mut Graph, indices: &[usize]) -> Var {
        let table = g.param(self.embedding);
        let emb = g.gather_rows(table, indices);
        let c = self.conv.forward(g, emb, &[]);
        let c = g.relu(c);
        self.rnn.forward(g, c)
    }
}

/// Mean of phoneme rows per word.
pub fn word_average(g: &mut Graph, enc: Var, word_ids: &[usize]) -> Var {
    g.segment_mean(enc, word_ids)
}

#[derive(Debug, Clone, Copy)]
pub struct ReferenceSummarizer {
    pub conv1: Conv1d,
    pub conv2: Conv1d,
    pub rnn: Gru,
}

impl ReferenceSummarizer {
    pub fn new(store: &mut ParamStore, channels: usize, kernel: usize, d_ref: usize, rng: &mut impl Rng) -> Self {
        ReferenceSummarizer {
            conv1: Conv1d::new(store, "reference.conv1", N_CHANNELS, channels, kernel, rng),
            conv2: Conv1d::new(store, "reference.conv2", channels, channels, kernel, rng),
            rnn: Gru::new(store, "reference.rnn", channels, d_ref, rng),
        }
    }

    /// One summary row per word. `frames` are normalized features whose rows
    /// are partitioned into phonemes by `durations` and into words by
    /// `word_ids`; convolutions and recurrence restart at every word.
    pub fn forward(&self, g: &mut Graph, frames: &Mat, durations: &[usize], word_ids: &[usize]) -> Result<Var> {
        if frames.nrows() == 0 {
            return Err(Error::InvalidInput("reference has no frames".into()));
        }
        let total: usize = durations.iter().sum();
        if total != frames.nrows() || durations.len() != word_ids.len() {
            return Err(Error::Shape(format!(
                "durations sum to {total} over {} phonemes, reference has {} frames and {} word ids",
                durations.len(),
                frames.nrows(),
                word_ids.len()
            )));
        }
        let spans = word_frame_spans(durations, word_ids);
        if spans.iter().any(|&(s, e)| e <= s) {
            return Err(Error::InvalidInput("every word needs at least one frame".into()));
        }
        let starts: Vec<usize> = spans.iter().map(|s| s.0).collect();
        let last: Vec<usize> = spans.iter().map(|s| s.1 - 1).collect();
        let x = g.constant(frames.clone());
        let c1 = self.conv1.forward(g, x, &starts);
        let c1 = g.relu(c1);
        let c2 = self.conv2.forward(g, c1, &starts);
        let c2 = g.relu(c2);
        let states = self.rnn.forward(g, c2, None, &starts);
        Ok(g.gather_rows(states, &last))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StyleTokenBank {
    pub tokens: ParamId,
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub n_tokens: usize,
    pub d_token: usize,
    pub d_attn: usize,
}

impl StyleTokenBank {
    pub fn new(
        store: &mut ParamStore,
        n_tokens: usize,
        d_token: usize,
        d_query: usize,
        d_attn: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let token_scale = 0.5 / (d_token as f64).sqrt();
        let tokens = store.add_uniform("tokens.embeddings", (n_tokens, d_token), token_scale, rng);
        let w_query =
            store.add_uniform("tokens.query_proj", (d_query, d_attn), 1.0 / (d_query as f64).sqrt(), rng);
        let w_key = store.add_uniform("tokens.key_proj", (d_token, d_attn), 1.0, rng);
        StyleTokenBank { tokens, w_query, w_key, n_tokens, d_token, d_attn }
    }

    /// Softmax weights `[n x n_tokens]` and embeddings `[n x d_token]` for
    /// each query row.
    pub fn attend(&self, g: &mut Graph, query: Var) -> (Var, Var) {
        let wq = g.param(self.w_query);
        let wk = g.param(self.w_key);
        let tokens = g.param(self.tokens);
        let q = g.matmul(query, wq);
        let k = g.matmul(tokens, wk);
        let scores = g.matmul_nt(q, k);
        let scores = g.scale(scores, 1.0 / (self.d_attn as f64).sqrt());
        let weights = g.softmax_rows(scores);
        let emb = g.matmul(weights, tokens);
        (weights, emb)
    }

    /// Token attention for one query vector, outside any training graph.
    pub fn attend_query(&self, params: &ParamStore, query: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::new(params);
        let q = g.constant(Array2::from_shape_vec((1, query.len()), query.to_vec()).expect("row vector"));
        let (w, e) = self.attend(&mut g, q);
        (g.value(w).iter().copied().collect(), g.value(e).iter().copied().collect())
    }

    pub fn token(&self, params: &ParamStore, k: usize) -> Vec<f64> {
        params.get(self.tokens).row(k).to_vec()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct WordSequenceEncoder {
    pub proj: Linear,
    pub rnn: BiGru,
    pub dim: usize,
}

impl WordSequenceEncoder {
    pub fn new(store: &mut ParamStore, d_enc: usize, dim: usize, rng: &mut impl Rng) -> Self {
        WordSequenceEncoder {
            proj: Linear::new(store, "word_seq.proj", d_enc, dim, rng),
            rnn: BiGru::new(store, "word_seq.rnn", dim, dim / 2, rng),
            dim,
        }
    }

    /// `[n_words x dim]`. The phoneme encodings are read through a
    /// stop-gradient, so no gradient reaches the phoneme encoder from here.
    pub fn forward(&self, g: &mut Graph, enc: Var, word_ids: &[usize]) -> Var {
        let frozen = g.detach(enc);
        let p = self.proj.forward(g, frozen);
        let avg = word_average(g, p, word_ids);
        self.rnn.forward(g, avg)
    }
}

/// Per-phoneme decoder input: `[enc_i | ws[word(i)] | style[word(i)]]`.
pub fn build_conditioning(g: &mut Graph, enc: Var, ws: Var, style: Var, word_ids: &[usize]) -> Result<Var> {
    let n_words = word_ids.last().map_or(0, |w| w + 1);
    if g.shape(enc).0 != word_ids.len() {
        return Err(Error::Shape(format!(
            "{} phoneme encodings for {} word ids",
            g.shape(enc).0,
            word_ids.len()
        )));
    }
    if g.shape(ws).0 != n_words || g.shape(style).0 != n_words {
        return Err(Error::Shape(format!(
            "expected {n_words} word rows, got {} word-sequence and {} style rows",
            g.shape(ws).0,
            g.shape(style).0
        )));
    }
    let ws_rep = g.gather_rows(ws, word_ids);
    let style_rep = g.gather_rows(style, word_ids);
    Ok(g.concat_cols(&[enc, ws_rep, style_rep]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_simple_fn((r, c), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn word_average_definitions() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let e = g.constant(Mat::from_shape_vec((3, 2), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let one = word_average(&mut g, e, &[0, 1, 2]);
        assert_eq!(g.value(one), g.value(e));
        let two = word_average(&mut g, e, &[0, 0, 1]);
        assert_eq!(g.value(two).row(0).to_vec(), vec![2.0, 3.0]);
        assert_eq!(g.value(two).row(1).to_vec(), vec![5.0, 6.0]);
    }

    #[test]
    fn softmax_attention_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let bank = StyleTokenBank::new(&mut store, 15, 128, 128, 128, &mut rng);
        // zero query -> all scores equal
        let (w, e) = bank.attend_query(&store, &[0.0; 128]);
        assert!(w.iter().all(|&x| (x - 1.0 / 15.0).abs() < 1e-12));
        let tokens = store.get(bank.tokens);
        for (c, &v) in e.iter().enumerate() {
            let mean = tokens.column(c).sum() / 15.0;
            assert!((v - mean).abs() < 1e-12);
        }

        let mut single = ParamStore::new();
        let one = StyleTokenBank::new(&mut single, 1, 128, 128, 128, &mut rng);
        let q: Vec<f64> = (0..128).map(|i| (i as f64).sin()).collect();
        let (w, e) = one.attend_query(&single, &q);
        assert_eq!(w, vec![1.0]);
        assert_eq!(e, one.token(&single, 0));
    }

    #[test]
    fn softmax_of_ln3_and_zero() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let s = g.constant(Mat::from_shape_vec((1, 2), vec![3f64.ln(), 0.0]).unwrap());
        let w = g.softmax_rows(s);
        assert!((g.value(w)[[0, 0]] - 0.75).abs() < 1e-12);
        assert!((g.value(w)[[0, 1]] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn reference_summary_is_local_to_word() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let summ = ReferenceSummarizer::new(&mut store, 8, 3, 16, &mut rng);
        // word 0 spans frames [0, 10), word 1 spans [10, 16)
        let durations = [4, 6, 3, 3];
        let word_ids = [0, 0, 1, 1];
        let frames = rand_mat(&mut rng, 16, N_CHANNELS);
        let run = |f: &Mat| {
            let mut g = Graph::new(&store);
            let v = summ.forward(&mut g, f, &durations, &word_ids).unwrap();
            g.value(v).clone()
        };
        let base = run(&frames);
        assert_eq!(base.dim(), (2, 16));
        let mut perturbed = frames.clone();
        perturbed.row_mut(11).fill(3.0);
        let out = run(&perturbed);
        assert_eq!(base.row(0), out.row(0));
        assert_ne!(base.row(1), out.row(1));

        // identical spans produce identical summaries
        let mut twin = rand_mat(&mut rng, 10, N_CHANNELS);
        let block = twin.clone();
        twin.append(ndarray::Axis(0), block.view()).unwrap();
        let mut g = Graph::new(&store);
        let v = summ.forward(&mut g, &twin, &[5, 5, 5, 5], &[0, 0, 1, 1]).unwrap();
        assert_eq!(g.value(v).row(0), g.value(v).row(1));

        let mut g = Graph::new(&store);
        assert!(summ.forward(&mut g, &frames, &[4, 6, 3, 2], &word_ids).is_err());
        assert!(summ.forward(&mut g, &Mat::zeros((0, N_CHANNELS)), &[], &[]).is_err());
    }

    #[test]
    fn conditioning_replicates_word_rows() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let enc = g.constant(Mat::from_elem((4, 64), 0.5));
        let ws = g.constant(Mat::from_shape_fn((2, 32), |(i, _)| i as f64));
        let style = g.constant(Mat::from_shape_fn((2, 128), |(i, j)| (i * 128 + j) as f64));
        let word_ids = [0, 0, 1, 1];
        let c = build_conditioning(&mut g, enc, ws, style, &word_ids).unwrap();
        let v = g.value(c);
        assert_eq!(v.dim(), (4, 224));
        for (i, &w) in word_ids.iter().enumerate() {
            assert_eq!(v.slice(ndarray::s![i, 96..]), g.value(style).row(w));
        }
        assert_ne!(v.slice(ndarray::s![0, 96..]), v.slice(ndarray::s![2, 96..]));
        let bad = g.constant(Mat::zeros((3, 128)));
        assert!(build_conditioning(&mut g, enc, ws, bad, &word_ids).is_err());
    }

    #[test]
    fn word_sequence_encoder_blocks_phoneme_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let penc = PhonemeEncoder::new(&mut store, 40, 16, 3, &mut rng);
        let wse = WordSequenceEncoder::new(&mut store, 16, 8, &mut rng);
        let mut g = Graph::new(&store);
        let enc = penc.forward(&mut g, &[1, 5, 7, 2, 9]);
        let ws = wse.forward(&mut g, enc, &[0, 0, 1, 2, 2]);
        assert_eq!(g.shape(ws), (3, 8));
        let target = g.constant(Mat::from_elem((3, 8), 0.3));
        let loss = g.mean_square(ws, target);
        let grads = g.backward(loss);
        for id in store.ids() {
            let name = store.name(id);
            if name.starts_with("phoneme_encoder") {
                assert!(grads.get(id).is_none(), "{name} received gradient");
            } else {
                assert!(grads.get(id).is_some(), "{name} missing gradient");
            }
        }
    }
}
