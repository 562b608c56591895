//! Autoregressive prior over word style embeddings.
//!
//! The prior reads `[word_average(enc) | word_seq]` per word, both behind a
//! stop-gradient, and predicts each word's style embedding from the text and
//! the previous embedding. Its loss is the mean squared error against the
//! (stop-gradient) reference embeddings, i.e. the negative log-likelihood of
//! a unit-variance isotropic Gaussian up to constants.

use rand::Rng;

use crate::encoders::word_average;
use crate::error::{Error, Result};
use crate::nn::{Graph, Gru, Linear, ParamStore, Var};

#[derive(Debug, Clone, Copy)]
pub struct Prior {
    pub cell: Gru,
    pub out: Linear,
    pub d_input: usize,
    pub d_style: usize,
}

impl Prior {
    pub fn new(store: &mut ParamStore, d_input: usize, d_style: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Prior {
            cell: Gru::new(store, "prior.cell", d_input + d_style, hidden, rng),
            out: Linear::new(store, "prior.out", hidden, d_style, rng),
            d_input,
            d_style,
        }
    }

    /// Builds the `[n_words x (d_enc + d_ws)]` prior inputs. Neither encoder
    /// receives gradient through them.
    pub fn inputs(&self, g: &mut Graph, enc: Var, word_seq: Var, word_ids: &[usize]) -> Var {
        let enc = g.detach(enc);
        let ws = g.detach(word_seq);
        let avg = word_average(g, enc, word_ids);
        g.concat_cols(&[avg, ws])
    }

    /// Predictions with ground-truth previous embeddings fed at every step,
    /// and the MSE loss against `targets`.
    pub fn teacher_forced(&self, g: &mut Graph, inputs: Var, targets: Var) -> Result<(Var, Var)> {
        let (n, d_in) = g.shape(inputs);
        let (nt, d_style) = g.shape(targets);
        if n != nt {
            return Err(Error::Shape(format!("{n} prior input rows but {nt} target rows")));
        }
        if d_in != self.d_input || d_style != self.d_style {
            return Err(Error::Shape(format!(
                "prior expects inputs of width {} and targets of width {}, got {d_in} and {d_style}",
                self.d_input, self.d_style
            )));
        }
        let targets = g.detach(targets);
        let first = g.zeros(1, d_style);
        let prev = if n > 1 {
            let head = g.slice_rows(targets, 0, n - 1);
            g.concat_rows(&[first, head])
        } else {
            first
        };
        let x = g.concat_cols(&[inputs, prev]);
        let h = self.cell.forward(g, x, None, &[]);
        let pred = self.out.forward(g, h);
        let loss = g.mean_square(pred, targets);
        Ok((pred, loss))
    }

    /// Free-running generation from a zero initial state and a zero first
    /// embedding; each prediction is fed back as the next step's input.
    pub fn generate(&self, g: &mut Graph, inputs: Var) -> Var {
        let n = g.shape(inputs).0;
        let mut h = g.zeros(1, self.cell.hidden);
        let mut prev = g.zeros(1, self.d_style);
        let mut rows = Vec::with_capacity(n);
        for w in 0..n {
            let x_w = g.slice_rows(inputs, w, w + 1);
            let x = g.concat_cols(&[x_w, prev]);
            h = self.cell.forward(g, x, Some(h), &[]);
            prev = self.out.forward(g, h);
            rows.push(prev);
        }
        g.concat_rows(&rows)
    }
}
