//! Objective evaluation: pitch extraction, DTW alignment, FFE/VDE/GPE, MCD
//! and kernel density estimates of duration and pitch distributions.

use std::f64::consts::{LN_10, PI};

use serde::{Deserialize, Serialize};

use crate::corpus::{AcousticFeatures, CORRELATION_CHANNEL, N_CEPSTRAL, PERIOD_CHANNEL, SAMPLE_RATE_HZ};
use crate::error::{Error, Result};

pub const DEFAULT_VOICING_THRESHOLD: f64 = 0.3;
pub const GROSS_PITCH_TOLERANCE: f64 = 0.2;
pub const DURATION_BANDWIDTH: f64 = 0.25;
pub const PITCH_BANDWIDTH: f64 = 5.0;
pub const PITCH_STD_BANDWIDTH: f64 = 2.0;
/// Half-width of default KDE grids, in bandwidths beyond the extreme samples.
pub const KDE_SPAN: f64 = 6.0;

/// Per-frame fundamental frequency; `f0` is 0 on unvoiced frames.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchTrack {
    pub f0: Vec<f64>,
    pub voiced: Vec<bool>,
}

impl PitchTrack {
    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }

    pub fn voiced_f0(&self) -> impl Iterator<Item = f64> + '_ {
        self.f0.iter().zip(&self.voiced).filter(|(_, &v)| v).map(|(&f, _)| f)
    }
}

/// Frames are voiced when their pitch correlation reaches `threshold`.
pub fn extract_pitch(features: &AcousticFeatures, threshold: f64) -> Result<PitchTrack> {
    let frames = features.frames();
    let mut f0 = Vec::with_capacity(frames.nrows());
    let mut voiced = Vec::with_capacity(frames.nrows());
    for (t, row) in frames.rows().into_iter().enumerate() {
        let v = f64::from(row[CORRELATION_CHANNEL]) >= threshold;
        let period = f64::from(row[PERIOD_CHANNEL]);
        if v && !(period > 0.0) {
            return Err(Error::InvalidInput(format!("voiced frame {t} has non-positive pitch period {period}")));
        }
        voiced.push(v);
        f0.push(if v { SAMPLE_RATE_HZ / period } else { 0.0 });
    }
    Ok(PitchTrack { f0, voiced })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub path: Vec<(usize, usize)>,
    pub cost: f64,
}

/// DTW over a precomputed `[n x m]` local distance matrix.
pub fn dtw_from_distances(dist: &[Vec<f64>]) -> Result<Alignment> {
    let n = dist.len();
    let m = dist.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return Err(Error::InvalidInput("dtw needs two non-empty sequences".into()));
    }
    if dist.iter().any(|r| r.len() != m) {
        return Err(Error::Shape("ragged distance matrix".into()));
    }
    let mut acc = vec![vec![f64::INFINITY; m]; n];
    for i in 0..n {
        for j in 0..m {
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[i - 1][j - 1] } else { f64::INFINITY };
                let up = if i > 0 { acc[i - 1][j] } else { f64::INFINITY };
                let left = if j > 0 { acc[i][j - 1] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[i][j] = best + dist[i][j];
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let mut next = None;
        let mut best = f64::INFINITY;
        // candidates in tie-preference order: diagonal, then i-step, then j-step
        let candidates = [
            (i > 0 && j > 0).then(|| (i - 1, j - 1)),
            (i > 0).then(|| (i - 1, j)),
            (j > 0).then(|| (i, j - 1)),
        ];
        for (a, b) in candidates.into_iter().flatten() {
            if acc[a][b] < best {
                best = acc[a][b];
                next = Some((a, b));
            }
        }
        (i, j) = next.expect("a predecessor always exists");
        path.push((i, j));
    }
    path.reverse();
    Ok(Alignment { path, cost: acc[n - 1][m - 1] })
}

/// Euclidean distance on the cepstral channels.
pub fn cepstral_distance(a: &[f32], b: &[f32]) -> f64 {
    a[..N_CEPSTRAL]
        .iter()
        .zip(&b[..N_CEPSTRAL])
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

pub fn dtw_align(a: &AcousticFeatures, b: &AcousticFeatures) -> Result<Alignment> {
    let (fa, fb) = (a.frames(), b.frames());
    let rows_b: Vec<Vec<f32>> = fb.rows().into_iter().map(|r| r.to_vec()).collect();
    let dist: Vec<Vec<f64>> = fa
        .rows()
        .into_iter()
        .map(|ra| {
            let ra = ra.to_vec();
            rows_b.iter().map(|rb| cepstral_distance(&ra, rb)).collect()
        })
        .collect();
    dtw_from_distances(&dist)
}

/// Frame counts behind FFE, VDE and GPE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PitchErrorCounts {
    pub n_frames: usize,
    pub voicing_errors: usize,
    pub both_voiced: usize,
    pub gross_errors: usize,
}

impl PitchErrorCounts {
    pub fn vde(&self) -> f64 {
        ratio(self.voicing_errors, self.n_frames)
    }

    pub fn gpe(&self) -> f64 {
        ratio(self.gross_errors, self.both_voiced)
    }

    pub fn ffe(&self) -> f64 {
        ratio(self.voicing_errors + self.gross_errors, self.n_frames)
    }

    fn merge(&mut self, other: &PitchErrorCounts) {
        self.n_frames += other.n_frames;
        self.voicing_errors += other.voicing_errors;
        self.both_voiced += other.both_voiced;
        self.gross_errors += other.gross_errors;
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn pitch_error_counts(reference: &PitchTrack, estimate: &PitchTrack, path: &[(usize, usize)]) -> Result<PitchErrorCounts> {
    if path.is_empty() {
        return Err(Error::InvalidInput("no aligned frames to compare".into()));
    }
    let mut c = PitchErrorCounts { n_frames: path.len(), ..Default::default() };
    for &(i, j) in path {
        if i >= reference.len() || j >= estimate.len() {
            return Err(Error::Shape(format!("alignment pair ({i}, {j}) outside the tracks")));
        }
        let (vr, ve) = (reference.voiced[i], estimate.voiced[j]);
        if vr != ve {
            c.voicing_errors += 1;
        } else if vr {
            c.both_voiced += 1;
            let f_ref = reference.f0[i];
            if (estimate.f0[j] - f_ref).abs() > GROSS_PITCH_TOLERANCE * f_ref {
                c.gross_errors += 1;
            }
        }
    }
    Ok(c)
}

/// Returns `(ffe, vde, gpe)`.
pub fn compute_ffe_vde_gpe(reference: &PitchTrack, estimate: &PitchTrack, path: &[(usize, usize)]) -> Result<(f64, f64, f64)> {
    let c = pitch_error_counts(reference, estimate, path)?;
    Ok((c.ffe(), c.vde(), c.gpe()))
}

/// Mel-cepstral distortion of one frame pair over channels 1..=19.
pub fn frame_mcd(a: &[f32], b: &[f32]) -> f64 {
    let sq: f64 = (1..N_CEPSTRAL)
        .map(|c| {
            let d = f64::from(a[c]) - f64::from(b[c]);
            d * d
        })
        .sum();
    10.0 / LN_10 * (2.0 * sq).sqrt()
}

/// Mean MCD over aligned frame pairs, in dB.
pub fn compute_mcd(reference: &AcousticFeatures, estimate: &AcousticFeatures, path: &[(usize, usize)]) -> Result<f64> {
    Ok(mcd_sum(reference, estimate, path)? / path.len() as f64)
}

fn mcd_sum(reference: &AcousticFeatures, estimate: &AcousticFeatures, path: &[(usize, usize)]) -> Result<f64> {
    if path.is_empty() {
        return Err(Error::InvalidInput("no aligned frames to compare".into()));
    }
    let (r, e) = (reference.frames(), estimate.frames());
    let mut sum = 0.0;
    for &(i, j) in path {
        if i >= r.nrows() || j >= e.nrows() {
            return Err(Error::Shape(format!("alignment pair ({i}, {j}) outside the features")));
        }
        let (a, b) = (r.row(i), e.row(j));
        sum += frame_mcd(a.as_slice().expect("contiguous"), b.as_slice().expect("contiguous"));
    }
    Ok(sum)
}

/// Metrics of one synthesized utterance against its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub id: String,
    pub ffe: f64,
    pub vde: f64,
    pub gpe: f64,
    pub mcd: f64,
    pub n_frames_compared: usize,
    #[serde(skip)]
    counts: PitchErrorCounts,
    #[serde(skip)]
    mcd_sum: f64,
}

/// DTW-aligns `estimate` to `reference` and scores it.
pub fn evaluate_pair(id: &str, reference: &AcousticFeatures, estimate: &AcousticFeatures, threshold: f64) -> Result<UtteranceMetrics> {
    let alignment = dtw_align(reference, estimate)?;
    let counts = pitch_error_counts(&extract_pitch(reference, threshold)?, &extract_pitch(estimate, threshold)?, &alignment.path)?;
    let mcd_sum = mcd_sum(reference, estimate, &alignment.path)?;
    Ok(UtteranceMetrics {
        id: id.to_string(),
        ffe: counts.ffe(),
        vde: counts.vde(),
        gpe: counts.gpe(),
        mcd: mcd_sum / counts.n_frames as f64,
        n_frames_compared: counts.n_frames,
        counts,
        mcd_sum,
    })
}

/// Corpus-level report; rates and MCD pool all aligned frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_id: String,
    pub split: String,
    pub ffe: f64,
    pub vde: f64,
    pub gpe: f64,
    pub mcd: f64,
    pub n_frames_compared: usize,
    pub per_utterance: Vec<UtteranceMetrics>,
}

impl MetricsReport {
    pub fn from_utterances(model_id: &str, split: &str, per_utterance: Vec<UtteranceMetrics>) -> Result<Self> {
        if per_utterance.is_empty() {
            return Err(Error::InvalidInput("no utterances evaluated".into()));
        }
        let mut counts = PitchErrorCounts::default();
        let mut mcd_sum = 0.0;
        for u in &per_utterance {
            counts.merge(&u.counts);
            mcd_sum += u.mcd_sum;
        }
        Ok(MetricsReport {
            model_id: model_id.to_string(),
            split: split.to_string(),
            ffe: counts.ffe(),
            vde: counts.vde(),
            gpe: counts.gpe(),
            mcd: mcd_sum / counts.n_frames as f64,
            n_frames_compared: counts.n_frames,
            per_utterance,
        })
    }
}

/// Uniform evaluation grid `[min, max]` with `n_points` points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdeGrid {
    pub min: f64,
    pub max: f64,
    pub n_points: usize,
}

impl KdeGrid {
    /// Grid reaching `KDE_SPAN` bandwidths past the extreme samples, with at
    /// least ten points per bandwidth.
    pub fn spanning(samples: &[f64], bandwidth: f64) -> Result<Self> {
        check_kde_args(samples, bandwidth)?;
        let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - KDE_SPAN * bandwidth;
        let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + KDE_SPAN * bandwidth;
        let n_points = (((hi - lo) / (bandwidth / 10.0)).ceil() as usize + 1).max(1001);
        Ok(KdeGrid { min: lo, max: hi, n_points })
    }

    pub fn points(&self) -> Vec<f64> {
        if self.n_points == 1 {
            return vec![self.min];
        }
        let step = (self.max - self.min) / (self.n_points - 1) as f64;
        (0..self.n_points).map(|k| self.min + step * k as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdeCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

impl KdeCurve {
    /// Trapezoidal integral over the grid.
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("grid_value,density\n");
        for (x, y) in self.grid.iter().zip(&self.density) {
            s.push_str(&format!("{x},{y}\n"));
        }
        s
    }
}

fn check_kde_args(samples: &[f64], bandwidth: f64) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("kde needs at least one sample".into()));
    }
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::InvalidInput(format!("kde bandwidth must be positive, got {bandwidth}")));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("kde samples must be finite".into()));
    }
    Ok(())
}

/// Gaussian-kernel density estimate evaluated on `grid`.
pub fn kde_estimate(samples: &[f64], bandwidth: f64, grid: KdeGrid) -> Result<KdeCurve> {
    check_kde_args(samples, bandwidth)?;
    if grid.n_points == 0 || !(grid.max >= grid.min) {
        return Err(Error::InvalidInput("kde grid must have points and max >= min".into()));
    }
    let norm = 1.0 / (samples.len() as f64 * bandwidth * (2.0 * PI).sqrt());
    let points = grid.points();
    let density = points
        .iter()
        .map(|&x| {
            samples
                .iter()
                .map(|&s| {
                    let u = (x - s) / bandwidth;
                    (-0.5 * u * u).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect();
    Ok(KdeCurve { grid: points, density })
}

/// KDE on the default grid spanning the samples.
pub fn kde_auto(samples: &[f64], bandwidth: f64) -> Result<KdeCurve> {
    kde_estimate(samples, bandwidth, KdeGrid::spanning(samples, bandwidth)?)
}

/// Population standard deviation of voiced F0; 0 with fewer than two
/// voiced frames.
pub fn pitch_deviation_per_utterance(track: &PitchTrack) -> f64 {
    let v: Vec<f64> = track.voiced_f0().collect();
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Mean voiced F0, or `None` when nothing is voiced.
pub fn mean_voiced_f0(track: &PitchTrack) -> Option<f64> {
    let v: Vec<f64> = track.voiced_f0().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::N_CHANNELS;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn track(f0: &[f64]) -> PitchTrack {
        PitchTrack { f0: f0.to_vec(), voiced: f0.iter().map(|&f| f > 0.0).collect() }
    }

    fn features(rows: &[[f32; 2]]) -> AcousticFeatures {
        // (period, correlation) per frame, cepstra zero
        let mut m = Array2::<f32>::zeros((rows.len(), N_CHANNELS));
        for (t, r) in rows.iter().enumerate() {
            m[[t, PERIOD_CHANNEL]] = r[0];
            m[[t, CORRELATION_CHANNEL]] = r[1];
        }
        AcousticFeatures::new(m).unwrap()
    }

    #[test]
    fn pitch_extraction_rules() {
        let t = extract_pitch(&features(&[[160.0, 0.8], [160.0, 0.1], [120.0, 0.3]]), 0.3).unwrap();
        assert_eq!(t.voiced, vec![true, false, true]);
        assert_eq!(t.f0, vec![150.0, 0.0, 200.0]);
        assert!(extract_pitch(&features(&[[0.0, 0.9]]), 0.3).is_err());
        assert!(extract_pitch(&features(&[[0.0, 0.1]]), 0.3).is_ok());
    }

    fn dist_matrix(a: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
        a.iter().map(|x| b.iter().map(|y| (x - y).abs()).collect()).collect()
    }

    #[test]
    fn dtw_examples() {
        let al = dtw_from_distances(&dist_matrix(&[0.0], &[0.0, 1.0])).unwrap();
        assert_eq!(al.path, vec![(0, 0), (0, 1)]);
        assert_eq!(al.cost, 1.0);
        let same = dtw_from_distances(&dist_matrix(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(same.path, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(same.cost, 0.0);
        assert!(dtw_from_distances(&[]).is_err());
    }

    #[test]
    fn dtw_prefers_diagonal_on_ties() {
        // all-zero distances: every path costs 0, the diagonal wins
        let al = dtw_from_distances(&vec![vec![0.0; 3]; 3]).unwrap();
        assert_eq!(al.path, vec![(0, 0), (1, 1), (2, 2)]);
        let al = dtw_from_distances(&vec![vec![0.0; 2]; 3]).unwrap();
        assert_eq!(al.path, vec![(0, 0), (1, 0), (2, 1)]);
    }

    fn brute_force(dist: &[Vec<f64>], i: usize, j: usize) -> f64 {
        let here = dist[i][j];
        if i == 0 && j == 0 {
            return here;
        }
        let mut best = f64::INFINITY;
        if i > 0 && j > 0 {
            best = best.min(brute_force(dist, i - 1, j - 1));
        }
        if i > 0 {
            best = best.min(brute_force(dist, i - 1, j));
        }
        if j > 0 {
            best = best.min(brute_force(dist, i, j - 1));
        }
        here + best
    }

    fn path_cost(dist: &[Vec<f64>], path: &[(usize, usize)]) -> f64 {
        path.iter().map(|&(i, j)| dist[i][j]).sum()
    }

    proptest! {
        #[test]
        fn dtw_matches_brute_force(a in prop::collection::vec(-5i32..5, 1..=6), b in prop::collection::vec(-5i32..5, 1..=6)) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let d = dist_matrix(&a, &b);
            let al = dtw_from_distances(&d).unwrap();
            prop_assert_eq!(al.cost, brute_force(&d, a.len() - 1, b.len() - 1));
            prop_assert_eq!(path_cost(&d, &al.path), al.cost);
            prop_assert_eq!(al.path[0], (0, 0));
            prop_assert_eq!(*al.path.last().unwrap(), (a.len() - 1, b.len() - 1));
            for w in al.path.windows(2) {
                let step = (w[1].0 - w[0].0, w[1].1 - w[0].1);
                prop_assert!(matches!(step, (1, 0) | (0, 1) | (1, 1)));
            }
        }

        #[test]
        fn pitch_rates_are_consistent(pairs in prop::collection::vec((0u8..3, 0u8..3), 1..40)) {
            let f = |k: u8| [0.0, 100.0, 150.0][k as usize];
            let r = track(&pairs.iter().map(|p| f(p.0)).collect::<Vec<_>>());
            let e = track(&pairs.iter().map(|p| f(p.1)).collect::<Vec<_>>());
            let path: Vec<_> = (0..pairs.len()).map(|t| (t, t)).collect();
            let c = pitch_error_counts(&r, &e, &path).unwrap();
            let (ffe, vde, gpe) = (c.ffe(), c.vde(), c.gpe());
            prop_assert!(ffe >= vde && ffe <= 1.0);
            prop_assert!((0.0..=1.0).contains(&gpe));
            prop_assert!((ffe - (vde + c.gross_errors as f64 / c.n_frames as f64)).abs() < 1e-12);
        }

        #[test]
        fn kde_is_a_density(samples in prop::collection::vec(-50.0f64..50.0, 1..20), bw in 0.1f64..5.0) {
            let curve = kde_auto(&samples, bw).unwrap();
            prop_assert!(curve.density.iter().all(|&d| d >= 0.0));
            prop_assert!((curve.integral() - 1.0).abs() < 1e-3);
            let mut doubled = samples.clone();
            doubled.extend_from_slice(&samples);
            let grid = KdeGrid::spanning(&samples, bw).unwrap();
            let a = kde_estimate(&samples, bw, grid).unwrap();
            let b = kde_estimate(&doubled, bw, grid).unwrap();
            for (x, y) in a.density.iter().zip(&b.density) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pitch_rate_hand_example() {
        // 10 frames: 2 voicing mismatches, 5 both voiced with 1 gross error
        let r = track(&[100.0, 100.0, 100.0, 100.0, 100.0, 100.0, 0.0, 0.0, 0.0, 0.0]);
        let e = track(&[100.0, 110.0, 90.0, 119.0, 130.0, 0.0, 100.0, 0.0, 0.0, 0.0]);
        let path: Vec<_> = (0..10).map(|t| (t, t)).collect();
        let (ffe, vde, gpe) = compute_ffe_vde_gpe(&r, &e, &path).unwrap();
        assert!((vde - 0.2).abs() < 1e-12);
        assert!((gpe - 0.2).abs() < 1e-12);
        assert!((ffe - 0.3).abs() < 1e-12);
        assert_eq!(compute_ffe_vde_gpe(&r, &r, &path).unwrap(), (0.0, 0.0, 0.0));
        let silent = track(&[0.0; 4]);
        assert_eq!(compute_ffe_vde_gpe(&silent, &silent, &path[..4]).unwrap(), (0.0, 0.0, 0.0));
        assert!(compute_ffe_vde_gpe(&r, &e, &[]).is_err());
    }

    #[test]
    fn mcd_hand_example() {
        let a = AcousticFeatures::new(Array2::zeros((1, N_CHANNELS))).unwrap();
        let mut m = Array2::<f32>::zeros((1, N_CHANNELS));
        m[[0, 3]] = 0.1;
        let b = AcousticFeatures::new(m.clone()).unwrap();
        let expected = 10.0 / LN_10 * 2f64.sqrt() * f64::from(0.1f32);
        assert!((compute_mcd(&a, &b, &[(0, 0)]).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.6142).abs() < 1e-4);
        m[[0, 3]] = 0.2;
        let c = AcousticFeatures::new(m.clone()).unwrap();
        assert!((compute_mcd(&a, &c, &[(0, 0)]).unwrap() - 2.0 * expected).abs() < 1e-9);
        m[[0, 0]] = 5.0;
        m[[0, 3]] = 0.0;
        let energy_only = AcousticFeatures::new(m).unwrap();
        assert_eq!(compute_mcd(&a, &energy_only, &[(0, 0)]).unwrap(), 0.0);
        assert!(compute_mcd(&a, &b, &[]).is_err());
    }

    #[test]
    fn kde_peak_value() {
        let c = kde_estimate(&[0.0], 1.0, KdeGrid { min: -6.0, max: 6.0, n_points: 1001 }).unwrap();
        assert!((c.density[500] - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-12);
        assert!((c.integral() - 1.0).abs() < 1e-3);
        assert!(kde_estimate(&[], 1.0, KdeGrid { min: 0.0, max: 1.0, n_points: 3 }).is_err());
        assert!(kde_estimate(&[0.0], 0.0, KdeGrid { min: 0.0, max: 1.0, n_points: 3 }).is_err());
        assert!(c.to_csv().starts_with("grid_value,density\n"));
    }

    #[test]
    fn pitch_deviation_examples() {
        assert_eq!(pitch_deviation_per_utterance(&track(&[150.0, 150.0, 150.0])), 0.0);
        assert_eq!(pitch_deviation_per_utterance(&track(&[100.0, 0.0, 200.0])), 50.0);
        assert_eq!(pitch_deviation_per_utterance(&track(&[0.0, 0.0])), 0.0);
        assert_eq!(pitch_deviation_per_utterance(&track(&[120.0])), 0.0);
        assert_eq!(mean_voiced_f0(&track(&[100.0, 0.0, 200.0])), Some(150.0));
        assert_eq!(mean_voiced_f0(&track(&[0.0])), None);
    }

    #[test]
    fn evaluation_of_identity_is_zero() {
        use crate::corpus::{synthesize_corpus, GeneratorConfig};
        let corpus = synthesize_corpus(2, 9, &GeneratorConfig::default()).unwrap();
        let utts: Vec<_> = corpus.iter().map(|(u, _)| u).collect();
        let per: Vec<_> = utts
            .iter()
            .map(|u| evaluate_pair(&u.id, &u.features, &u.features, DEFAULT_VOICING_THRESHOLD).unwrap())
            .collect();
        for (m, u) in per.iter().zip(&utts) {
            assert_eq!((m.ffe, m.vde, m.gpe, m.mcd), (0.0, 0.0, 0.0, 0.0));
            assert_eq!(m.n_frames_compared, u.features.n_frames());
        }
        let report = MetricsReport::from_utterances("truth", "all", per).unwrap();
        assert_eq!((report.ffe, report.mcd), (0.0, 0.0));
        let json = serde_json::to_value(&report).unwrap();
        for key in ["model_id", "split", "ffe", "vde", "gpe", "mcd", "per_utterance"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn neutral_generator_pitch_is_exact() {
        use crate::corpus::{phoneme_templates, render_utterance, GeneratorConfig, PhonemeSequence, StyleFactors};
        use rand::SeedableRng;
        let text = PhonemeSequence::parse("aa.b iy.k.ow").unwrap();
        let cfg = GeneratorConfig::default();
        let factors = StyleFactors { pitch: vec![0.0, 0.0], rate: vec![0.3, -0.2] };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let utt = render_utterance("u", &text, &factors, &phoneme_templates(&cfg), &cfg, &mut rng).unwrap();
        let t = extract_pitch(&utt.features, DEFAULT_VOICING_THRESHOLD).unwrap();
        assert!(t.voiced.iter().any(|&v| v) && t.voiced.iter().any(|&v| !v));
        assert!(t.voiced_f0().all(|f| f == 150.0));
    }
}
