use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};

/// `y = x W + b`, `W` stored `[in x out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (d_in as f64).sqrt();
        let w = store.add_uniform(format!("{name}.weight"), (d_in, d_out), scale, rng);
        let b = store.add_zeros(format!("{name}.bias"), (1, d_out));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }
}

/// Same-length 1-D convolution over rows (time), zero padded at the edges
/// of every segment.
#[derive(Debug, Clone, Copy)]
pub struct Conv1d {
    pub kernel: usize,
    pub proj: Linear,
}

impl Conv1d {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        Conv1d { kernel, proj: Linear::new(store, name, d_in * kernel, d_out, rng) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, segment_starts: &[usize]) -> Var {
        let unfolded = g.unfold(x, self.kernel, segment_starts);
        self.proj.forward(g, unfolded)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Gru {
    pub input: Linear,
    pub recurrent: ParamId,
    pub recurrent_bias: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let input = Linear::new(store, &format!("{name}.input"), d_in, 3 * hidden, rng);
        let scale = 1.0 / (hidden as f64).sqrt();
        let recurrent = store.add_uniform(format!("{name}.recurrent"), (hidden, 3 * hidden), scale, rng);
        let recurrent_bias = store.add_zeros(format!("{name}.recurrent_bias"), (1, 3 * hidden));
        Gru { input, recurrent, recurrent_bias, hidden }
    }

    /// Runs over all rows of `x`; `h0` defaults to zeros.
    pub fn forward(&self, g: &mut Graph, x: Var, h0: Option<Var>, segment_starts: &[usize]) -> Var {
        let xp = self.input.forward(g, x);
        self.forward_projected(g, xp, h0, segment_starts)
    }

    pub fn forward_projected(&self, g: &mut Graph, xp: Var, h0: Option<Var>, segment_starts: &[usize]) -> Var {
        let h0 = h0.unwrap_or_else(|| g.zeros(1, self.hidden));
        let u = g.param(self.recurrent);
        let bh = g.param(self.recurrent_bias);
        g.gru(xp, h0, u, bh, segment_starts)
    }
}

/// Forward and backward GRU, outputs concatenated `[fwd | bwd]`.
#[derive(Debug, Clone, Copy)]
pub struct BiGru {
    pub fwd: Gru,
    pub bwd: Gru,
}

impl BiGru {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        BiGru {
            fwd: Gru::new(store, &format!("{name}.fwd"), d_in, hidden, rng),
            bwd: Gru::new(store, &format!("{name}.bwd"), d_in, hidden, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let f = self.fwd.forward(g, x, None, &[]);
        let xr = g.reverse_rows(x);
        let br = self.bwd.forward(g, xr, None, &[]);
        let b = g.reverse_rows(br);
        g.concat_cols(&[f, b])
    }

    pub fn output_dim(&self) -> usize {
        self.fwd.hidden + self.bwd.hidden
    }
}
