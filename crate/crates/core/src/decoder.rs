//! Non-attentive decoding: duration prediction, Gaussian upsampling and an
//! autoregressive frame decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::N_CHANNELS;
use crate::error::{Error, Result};
use crate::nn::{upsample_weights, Graph, Gru, Linear, Mat, ParamStore, Var};

/// How the per-phoneme upsampling range is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum SigmaMode {
    Predicted,
    Fixed(f64),
}

pub const SIGMA_FLOOR: f64 = 1e-2;

/// Per-phoneme log-duration target: `ln(1 + d)`.
pub fn duration_target(d: usize) -> f64 {
    (1.0 + d as f64).ln()
}

/// Inverse of [`duration_target`], rounded and clamped at 0. If every
/// phoneme decodes to 0 frames, the phoneme with the largest prediction
/// gets one frame.
pub fn decode_durations(log_durations: &[f64]) -> Vec<usize> {
    let mut d: Vec<usize> = log_durations
        .iter()
        .map(|&l| {
            let v = (l.exp() - 1.0).round();
            if v > 0.0 {
                v as usize
            } else {
                0
            }
        })
        .collect();
    if d.iter().sum::<usize>() == 0 && !d.is_empty() {
        let best = log_durations
            .iter()
            .enumerate()
            .fold(0, |b, (i, &l)| if l > log_durations[b] { i } else { b });
        d[best] = 1;
    }
    d
}

#[derive(Debug, Clone, PartialEq)]
pub struct DurationPrediction {
    pub log_durations: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl DurationPrediction {
    pub fn durations(&self) -> Vec<usize> {
        decode_durations(&self.log_durations)
    }

    /// Sum of `exp(l_i)`, a smooth proxy for total length.
    pub fn total_expected(&self) -> f64 {
        self.log_durations.iter().map(|l| l.exp()).sum()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DurationPredictor {
    pub hidden: Linear,
    pub out: Linear,
    pub sigma_mode: SigmaMode,
}

impl DurationPredictor {
    pub fn new(store: &mut ParamStore, d_cond: usize, hidden: usize, sigma_mode: SigmaMode, rng: &mut impl Rng) -> Self {
        let h = Linear::new(store, "duration.hidden", d_cond, hidden, rng);
        let out = Linear::new(store, "duration.out", hidden, 2, rng);
        // start near a 6-frame duration and sigma 1.5
        let b = store.get_mut(out.b);
        b[[0, 0]] = duration_target(6);
        b[[0, 1]] = (1.5f64.exp() - 1.0).ln();
        DurationPredictor { hidden: h, out, sigma_mode }
    }

    /// Log-durations `[n x 1]` and positive ranges `[n x 1]`.
    pub fn forward(&self, g: &mut Graph, cond: Var) -> (Var, Var) {
        let h = self.hidden.forward(g, cond);
        let h = g.relu(h);
        let o = self.out.forward(g, h);
        let log_d = g.slice_cols(o, 0, 1);
        let n = g.shape(cond).0;
        let sigma = match self.sigma_mode {
            SigmaMode::Predicted => {
                let raw = g.slice_cols(o, 1, 2);
                let sp = g.softplus(raw);
                let floor = g.constant(Mat::from_elem((1, 1), SIGMA_FLOOR));
                g.add_row(sp, floor)
            }
            SigmaMode::Fixed(s) => g.constant(Mat::from_elem((n, 1), s)),
        };
        (log_d, sigma)
    }
}

/// Gaussian upsampling on plain matrices. Fails when all durations are zero
/// or a range is not positive.
pub fn gaussian_upsample(cond: &Mat, durations: &[usize], sigmas: &[f64]) -> Result<Mat> {
    check_upsample_args(cond.nrows(), durations, sigmas)?;
    let (w, _) = upsample_weights(durations, sigmas);
    Ok(w.dot(cond))
}

pub(crate) fn check_upsample_args(n: usize, durations: &[usize], sigmas: &[f64]) -> Result<()> {
    if durations.len() != n || sigmas.len() != n {
        return Err(Error::Shape(format!(
            "{n} conditioning rows, {} durations, {} ranges",
            durations.len(),
            sigmas.len()
        )));
    }
    if durations.iter().sum::<usize>() == 0 {
        return Err(Error::InvalidInput("durations are all zero".into()));
    }
    if let Some(s) = sigmas.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::InvalidInput(format!("upsampling range must be positive, got {s}")));
    }
    Ok(())
}

/// Prenet over the previous frame, one GRU layer, and a projection of
/// `[state | conditioning]` to the 22 feature channels.
#[derive(Debug, Clone, Copy)]
pub struct FrameDecoder {
    pub prenet1: Linear,
    pub prenet2: Linear,
    pub rnn: Gru,
    pub proj: Linear,
    pub d_cond: usize,
}

/// Frame-rate contributions of the conditioning to the GRU input and to the
/// output projection. Both are projected per phoneme and then upsampled,
/// which equals upsampling first because upsampling is linear.
#[derive(Debug, Clone, Copy)]
pub struct DecoderConditioning {
    pub rnn_input: Var,
    pub output: Var,
}

impl FrameDecoder {
    pub fn new(store: &mut ParamStore, d_cond: usize, prenet: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        FrameDecoder {
            prenet1: Linear::new(store, "decoder.prenet1", N_CHANNELS, prenet, rng),
            prenet2: Linear::new(store, "decoder.prenet2", prenet, prenet, rng),
            rnn: Gru::new(store, "decoder.rnn", d_cond + prenet, hidden, rng),
            proj: Linear::new(store, "decoder.proj", hidden + d_cond, N_CHANNELS, rng),
            d_cond,
        }
    }

    fn prenet(&self, g: &mut Graph, prev: Var) -> Var {
        let a = self.prenet1.forward(g, prev);
        let a = g.relu(a);
        let b = self.prenet2.forward(g, a);
        g.relu(b)
    }

    /// Upsamples phoneme conditioning `cond` `[n x d_cond]` to
    /// `sum(durations)` frames, already multiplied into the decoder weights.
    pub fn condition(&self, g: &mut Graph, cond: Var, sigma: Var, durations: &[usize]) -> DecoderConditioning {
        let w_in = g.param(self.rnn.input.w);
        let w_cond = g.slice_rows(w_in, 0, self.d_cond);
        let x = g.matmul(cond, w_cond);
        let rnn_input = g.gaussian_upsample(x, sigma, durations);
        let w_out = g.param(self.proj.w);
        let hidden = self.rnn.hidden;
        let w_cond = g.slice_rows(w_out, hidden, hidden + self.d_cond);
        let o = g.matmul(cond, w_cond);
        let output = g.gaussian_upsample(o, sigma, durations);
        DecoderConditioning { rnn_input, output }
    }

    fn rnn_input(&self, g: &mut Graph, c: Var, pre: Var) -> Var {
        let w_in = g.param(self.rnn.input.w);
        let rows = g.shape(w_in).0;
        let w_pre = g.slice_rows(w_in, self.d_cond, rows);
        let b = g.param(self.rnn.input.b);
        let x = g.matmul(pre, w_pre);
        let x = g.add(x, c);
        g.add_row(x, b)
    }

    fn output(&self, g: &mut Graph, h: Var, c: Var) -> Var {
        let w_out = g.param(self.proj.w);
        let w_h = g.slice_rows(w_out, 0, self.rnn.hidden);
        let b = g.param(self.proj.b);
        let y = g.matmul(h, w_h);
        let y = g.add(y, c);
        g.add_row(y, b)
    }

    /// Teacher-forced decoding: frame `t` sees ground-truth frame `t - 1`
    /// (zeros for `t = 0`).
    pub fn teacher_forced(&self, g: &mut Graph, cond: DecoderConditioning, teacher: &Mat) -> Result<Var> {
        let t_len = g.shape(cond.rnn_input).0;
        if teacher.nrows() != t_len {
            return Err(Error::Shape(format!(
                "teacher frames have {} rows, upsampled conditioning has {t_len}",
                teacher.nrows()
            )));
        }
        let mut prev = Mat::zeros((t_len, N_CHANNELS));
        if t_len > 1 {
            prev.slice_mut(ndarray::s![1.., ..]).assign(&teacher.slice(ndarray::s![..t_len - 1, ..]));
        }
        let prev = g.constant(prev);
        let pre = self.prenet(g, prev);
        let xp = self.rnn_input(g, cond.rnn_input, pre);
        let h = self.rnn.forward_projected(g, xp, None, &[]);
        Ok(self.output(g, h, cond.output))
    }

    /// Self-feeding decoding from a zero initial frame.
    pub fn free_running(&self, g: &mut Graph, cond: DecoderConditioning) -> Result<Var> {
        let t_len = g.shape(cond.rnn_input).0;
        if t_len == 0 {
            return Err(Error::InvalidInput("nothing to decode".into()));
        }
        let mut prev = g.zeros(1, N_CHANNELS);
        let mut h = g.zeros(1, self.rnn.hidden);
        let mut frames = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let pre = self.prenet(g, prev);
            let c_in = g.slice_rows(cond.rnn_input, t, t + 1);
            let xp = self.rnn_input(g, c_in, pre);
            h = self.rnn.forward_projected(g, xp, Some(h), &[]);
            let c_out = g.slice_rows(cond.output, t, t + 1);
            prev = self.output(g, h, c_out);
            frames.push(prev);
        }
        Ok(g.concat_rows(&frames))
    }
}
