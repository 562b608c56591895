//! Style control: corpus token-weight statistics, std-scaled biasing toward
//! a token, and style transfer mixed with the prior.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{mean_std, write_json, PhonemeSequence, Utterance, STD_FLOOR};
use crate::encoders::WordStyleEmbeddings;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Mat;

/// Corpus mean and population std of every token's attention weight.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenWeightStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct MeanStd {
    mean: f64,
    std: f64,
}

impl TokenWeightStats {
    /// Statistics over rows of token weights (one row per word).
    pub fn from_weights<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut columns: Vec<Vec<f64>> = Vec::new();
        for row in rows {
            if columns.is_empty() {
                columns = vec![Vec::new(); row.len()];
            }
            if row.len() != columns.len() {
                return Err(Error::Shape("token weight rows differ in length".into()));
            }
            for (c, &v) in columns.iter_mut().zip(row) {
                c.push(v);
            }
        }
        if columns.is_empty() || columns[0].is_empty() {
            return Err(Error::InvalidInput("no words to collect token statistics from".into()));
        }
        let (mean, std) = columns.iter().map(|c| mean_std(c)).unzip();
        Ok(TokenWeightStats { mean, std })
    }

    pub fn n_tokens(&self) -> usize {
        self.mean.len()
    }

    /// Standard deviation used as the unit of bias amounts.
    pub fn unit(&self, token: usize) -> f64 {
        self.std[token].max(STD_FLOOR)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: BTreeMap<String, MeanStd> = self
            .mean
            .iter()
            .zip(&self.std)
            .enumerate()
            .map(|(k, (&mean, &std))| (format!("token_{k}"), MeanStd { mean, std }))
            .collect();
        write_json(path, &map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: BTreeMap<String, MeanStd> = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let mut mean = Vec::with_capacity(map.len());
        let mut std = Vec::with_capacity(map.len());
        for k in 0..map.len() {
            let entry = map
                .get(&format!("token_{k}"))
                .ok_or_else(|| Error::InvalidInput(format!("{}: missing token_{k}", path.display())))?;
            mean.push(entry.mean);
            std.push(entry.std);
        }
        Ok(TokenWeightStats { mean, std })
    }
}

/// Runs the reference path over every word of the corpus and aggregates the
/// token weights.
pub fn compute_token_stats(model: &Model, corpus: &[Utterance]) -> Result<TokenWeightStats> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for utt in corpus {
        let style = model.reference_embeddings(utt)?;
        let weights = style.weights.expect("reference embeddings carry weights");
        rows.extend(weights.rows().into_iter().map(|r| r.to_vec()));
    }
    TokenWeightStats::from_weights(rows.iter().map(Vec::as_slice))
}

/// Words a bias applies to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WordSelection {
    All,
    Words(Vec<usize>),
}

/// One biasing instruction: move `words` by `amount_stds` standard
/// deviations of token `token`. Parsed from `TOKEN:STDS[:WORD]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasSpec {
    pub token: usize,
    pub amount_stds: f64,
    pub word: Option<usize>,
}

impl BiasSpec {
    pub fn selection(&self) -> WordSelection {
        match self.word {
            Some(w) => WordSelection::Words(vec![w]),
            None => WordSelection::All,
        }
    }
}

impl FromStr for BiasSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("malformed bias spec `{s}`, expected TOKEN:STDS[:WORD]"));
        let parts: Vec<&str> = s.split(':').collect();
        if !(2..=3).contains(&parts.len()) {
            return Err(bad());
        }
        let token = parts[0].trim().parse::<usize>().map_err(|_| bad())?;
        let amount_stds = parts[1].trim().parse::<f64>().map_err(|_| bad())?;
        if !amount_stds.is_finite() {
            return Err(bad());
        }
        let word = match parts.get(2).map(|w| w.trim()) {
            None => None,
            Some(w) if w.eq_ignore_ascii_case("all") => None,
            Some(w) => Some(w.parse::<usize>().map_err(|_| bad())?),
        };
        Ok(BiasSpec { token, amount_stds, word })
    }
}

impl fmt::Display for BiasSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{:+}", self.token, self.amount_stds)?;
        if let Some(w) = self.word {
            write!(f, ":{w}")?;
        }
        Ok(())
    }
}

/// Adds `amount * std_token * token_vector` to every selected word's
/// embedding. `tokens` is the `[n_tokens x d]` token matrix. The result no
/// longer carries token weights.
pub fn bias_embeddings(
    style: &WordStyleEmbeddings,
    token: usize,
    amount: f64,
    words: &WordSelection,
    tokens: &Mat,
    stats: &TokenWeightStats,
) -> Result<WordStyleEmbeddings> {
    if token >= tokens.nrows() || token >= stats.n_tokens() {
        return Err(Error::InvalidInput(format!("token {token} out of range 0..{}", tokens.nrows())));
    }
    if tokens.ncols() != style.embeddings.ncols() {
        return Err(Error::Shape("token and embedding widths differ".into()));
    }
    let n = style.n_words();
    let selected: Vec<usize> = match words {
        WordSelection::All => (0..n).collect(),
        WordSelection::Words(ws) => {
            if let Some(&w) = ws.iter().find(|&&w| w >= n) {
                return Err(Error::InvalidInput(format!("word index {w} out of range 0..{n}")));
            }
            ws.clone()
        }
    };
    let shift = &tokens.row(token) * (amount * stats.unit(token));
    let mut embeddings = style.embeddings.clone();
    for w in selected {
        let mut row = embeddings.row_mut(w);
        row += &shift;
    }
    Ok(WordStyleEmbeddings { embeddings, weights: None })
}

/// Applies bias specs in order using the model's token bank.
pub fn apply_biases(
    model: &Model,
    style: &WordStyleEmbeddings,
    specs: &[BiasSpec],
    stats: &TokenWeightStats,
) -> Result<WordStyleEmbeddings> {
    let tokens = model.params.get(model.tokens.tokens);
    let mut out = style.clone();
    for spec in specs {
        out = bias_embeddings(&out, spec.token, spec.amount_stds, &spec.selection(), tokens, stats)?;
    }
    Ok(out)
}

/// Word `w` of the result is `alpha * source[w] + (1 - alpha) * prior[w]`;
/// target words without a source counterpart keep the prior embedding.
pub fn mix_styles(source: &Mat, prior: &Mat, alpha: f64) -> Result<Mat> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if source.ncols() != prior.ncols() {
        return Err(Error::Shape("source and prior embedding widths differ".into()));
    }
    let mut out = prior.clone();
    for w in 0..prior.nrows().min(source.nrows()) {
        if alpha == 1.0 {
            out.row_mut(w).assign(&source.row(w));
        } else if alpha != 0.0 {
            let mixed = &source.row(w) * alpha + &prior.row(w) * (1.0 - alpha);
            out.row_mut(w).assign(&mixed);
        }
    }
    Ok(out)
}

/// Style embeddings for `target_text` carrying the per-word style of the
/// `source` recording, mixed with the prior's prediction for the target.
pub fn style_transfer(
    model: &Model,
    source: &Utterance,
    target_text: &PhonemeSequence,
    alpha: f64,
) -> Result<WordStyleEmbeddings> {
    if source.text.is_empty() || target_text.is_empty() {
        return Err(Error::InvalidInput("style transfer needs non-empty source and target".into()));
    }
    let source_emb = model.reference_embeddings(source)?;
    let prior = model.prior_embeddings(target_text)?;
    let embeddings = mix_styles(&source_emb.embeddings, &prior.embeddings, alpha)?;
    Ok(WordStyleEmbeddings { embeddings, weights: None })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_hand_example() {
        let rows = [vec![0.2, 0.8], vec![0.4, 0.6]];
        let s = TokenWeightStats::from_weights(rows.iter().map(Vec::as_slice)).unwrap();
        assert!((s.mean[0] - 0.3).abs() < 1e-12);
        assert!((s.std[0] - 0.1).abs() < 1e-12);
        assert!((s.mean.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stats_zero_variance_and_empty() {
        let rows = [vec![0.5, 0.5], vec![0.5, 0.5]];
        let s = TokenWeightStats::from_weights(rows.iter().map(Vec::as_slice)).unwrap();
        assert_eq!(s.std, vec![0.0, 0.0]);
        assert_eq!(s.unit(0), STD_FLOOR);
        assert!(TokenWeightStats::from_weights(std::iter::empty()).is_err());
    }

    #[test]
    fn stats_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = TokenWeightStats { mean: (0..15).map(|k| k as f64 / 105.0).collect(), std: vec![0.01; 15] };
        let p = dir.path().join("token_stats.json");
        s.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"token_14\""));
        assert_eq!(TokenWeightStats::load(&p).unwrap(), s);
    }

    fn fixture() -> (WordStyleEmbeddings, Mat, TokenWeightStats) {
        let style = WordStyleEmbeddings {
            embeddings: Mat::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 * 0.1),
            weights: Some(Mat::from_elem((3, 2), 0.5)),
        };
        let tokens = Mat::from_shape_vec((2, 4), vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.0, 2.0]).unwrap();
        let stats = TokenWeightStats { mean: vec![0.5, 0.5], std: vec![0.1, 0.2] };
        (style, tokens, stats)
    }

    #[test]
    fn bias_identity_and_definition() {
        let (style, tokens, stats) = fixture();
        let same = bias_embeddings(&style, 0, 0.0, &WordSelection::All, &tokens, &stats).unwrap();
        assert_eq!(same.embeddings, style.embeddings);
        assert!(same.weights.is_none());

        let one = bias_embeddings(&style, 0, 1.0, &WordSelection::Words(vec![1]), &tokens, &stats).unwrap();
        let expected = &style.embeddings.row(1) + &(&tokens.row(0) * 0.1);
        assert_eq!(one.embeddings.row(1), expected);
        assert_eq!(one.embeddings.row(0), style.embeddings.row(0));
        assert_eq!(one.embeddings.row(2), style.embeddings.row(2));
    }

    #[test]
    fn bias_inverse_and_global_shift() {
        let (style, tokens, stats) = fixture();
        let up = bias_embeddings(&style, 1, 2.0, &WordSelection::All, &tokens, &stats).unwrap();
        let back = bias_embeddings(&up, 1, -2.0, &WordSelection::All, &tokens, &stats).unwrap();
        assert!((&back.embeddings - &style.embeddings).iter().all(|v| v.abs() < 1e-6));
        let delta = &up.embeddings - &style.embeddings;
        for w in 1..3 {
            assert!((&delta.row(w) - &delta.row(0)).iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn bias_errors() {
        let (style, tokens, stats) = fixture();
        assert!(bias_embeddings(&style, 2, 1.0, &WordSelection::All, &tokens, &stats).is_err());
        assert!(bias_embeddings(&style, 0, 1.0, &WordSelection::Words(vec![3]), &tokens, &stats).is_err());
    }

    #[test]
    fn bias_spec_grammar() {
        assert_eq!("3:+2".parse::<BiasSpec>().unwrap(), BiasSpec { token: 3, amount_stds: 2.0, word: None });
        assert_eq!("7:-1:4".parse::<BiasSpec>().unwrap(), BiasSpec { token: 7, amount_stds: -1.0, word: Some(4) });
        assert_eq!("0:0.5:all".parse::<BiasSpec>().unwrap().word, None);
        for bad in ["3", "x:1", "3:y", "3:1:z", "1:2:3:4", "3:nan"] {
            assert!(bad.parse::<BiasSpec>().is_err(), "{bad}");
        }
        assert_eq!("7:-1:4".parse::<BiasSpec>().unwrap().to_string(), "7:-1:4");
    }

    #[test]
    fn mixture_endpoints_and_midpoint() {
        let source = Mat::from_shape_fn((2, 3), |(i, j)| (i + j) as f64);
        let prior = Mat::from_shape_fn((3, 3), |(i, j)| (i * j) as f64 - 1.0);
        assert_eq!(mix_styles(&source, &prior, 0.0).unwrap(), prior);
        let full = mix_styles(&source, &prior, 1.0).unwrap();
        assert_eq!(full.row(0), source.row(0));
        assert_eq!(full.row(1), source.row(1));
        assert_eq!(full.row(2), prior.row(2));
        let mid = mix_styles(&source, &prior, 0.5).unwrap();
        assert_eq!(mid[[1, 2]], (source[[1, 2]] + prior[[1, 2]]) / 2.0);
        assert!(mix_styles(&source, &prior, 1.5).is_err());
    }
}
