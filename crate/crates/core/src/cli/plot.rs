//! SVG plots with their CSV data: F0 contour overlays and KDE curves of
//! durations, pitch and per-utterance pitch deviation.

use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;

use super::SynthSidecar;
use crate::corpus::{load_corpus, AcousticFeatures, DurationStats, PhonemeSequence, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::metrics::{
    extract_pitch, kde_estimate, pitch_deviation_per_utterance, KdeCurve, KdeGrid, PitchTrack,
    DEFAULT_VOICING_THRESHOLD, DURATION_BANDWIDTH, PITCH_BANDWIDTH, PITCH_STD_BANDWIDTH,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    /// F0 contours of one utterance, one line per input.
    F0,
    /// Z-normalized phone durations.
    DurationsKde,
    /// Voiced F0 values.
    PitchKde,
    /// Per-utterance F0 standard deviation.
    PitchStdKde,
}

impl PlotKind {
    pub fn bandwidth(self) -> Option<f64> {
        match self {
            PlotKind::F0 => None,
            PlotKind::DurationsKde => Some(DURATION_BANDWIDTH),
            PlotKind::PitchKde => Some(PITCH_BANDWIDTH),
            PlotKind::PitchStdKde => Some(PITCH_STD_BANDWIDTH),
        }
    }

    fn x_label(self) -> &'static str {
        match self {
            PlotKind::F0 => "frame",
            PlotKind::DurationsKde => "duration (z)",
            PlotKind::PitchKde => "F0 (Hz)",
            PlotKind::PitchStdKde => "F0 std per utterance (Hz)",
        }
    }
}

struct VariantUtterance {
    id: String,
    text: PhonemeSequence,
    durations: Vec<usize>,
    features: AcousticFeatures,
}

struct Variant {
    label: String,
    utterances: Vec<VariantUtterance>,
}

/// Reads a corpus directory or a directory of synthesis outputs.
fn load_variant(dir: &Path) -> Result<Variant> {
    let label = dir
        .file_name()
        .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
    let utterances = if dir.join(MANIFEST_FILE).exists() {
        load_corpus(dir)?
            .into_iter()
            .map(|u| VariantUtterance { id: u.id, text: u.text, durations: u.durations, features: u.features })
            .collect()
    } else {
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut sidecars: Vec<PathBuf> = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().is_some_and(|e| e == "json") && path.with_extension("f32").exists() {
                sidecars.push(path);
            }
        }
        sidecars.sort();
        let mut out = Vec::with_capacity(sidecars.len());
        for path in sidecars {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let side: SynthSidecar = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
            let features = AcousticFeatures::read(&path.with_extension("f32"))?;
            if features.n_frames() != side.n_frames {
                return Err(Error::utterance(&side.id, "frame count differs from its sidecar"));
            }
            out.push(VariantUtterance {
                text: PhonemeSequence::parse(&side.text)?,
                id: side.id,
                durations: side.durations_predicted,
                features,
            });
        }
        out
    };
    if utterances.is_empty() {
        return Err(Error::InvalidInput(format!("{} holds no utterances", dir.display())));
    }
    Ok(Variant { label, utterances })
}

fn tracks(v: &Variant) -> Result<Vec<PitchTrack>> {
    v.utterances.iter().map(|u| extract_pitch(&u.features, DEFAULT_VOICING_THRESHOLD)).collect()
}

/// Samples of the plotted quantity per variant. Durations are z-normalized
/// with the phone-class statistics of the first variant.
fn kde_samples(kind: PlotKind, variants: &[Variant]) -> Result<Vec<Vec<f64>>> {
    let stats = DurationStats::from_durations(variants[0].utterances.iter().flat_map(|u| {
        u.text.phonemes().iter().map(String::as_str).zip(u.durations.iter().copied())
    }));
    variants
        .iter()
        .map(|v| {
            let samples: Vec<f64> = match kind {
                PlotKind::DurationsKde => v
                    .utterances
                    .iter()
                    .flat_map(|u| u.text.phonemes().iter().zip(&u.durations).filter_map(|(p, &d)| stats.normalize(p, d)))
                    .collect(),
                PlotKind::PitchKde => tracks(v)?.iter().flat_map(|t| t.voiced_f0().collect::<Vec<_>>()).collect(),
                PlotKind::PitchStdKde => tracks(v)?.iter().map(pitch_deviation_per_utterance).collect(),
                PlotKind::F0 => unreachable!("not a density plot"),
            };
            if samples.is_empty() {
                return Err(Error::InvalidInput(format!("{}: nothing to estimate a density from", v.label)));
            }
            Ok(samples)
        })
        .collect()
}

/// A shared grid covering every variant's samples by `KDE_SPAN` bandwidths.
fn common_grid(samples: &[Vec<f64>], bandwidth: f64) -> Result<KdeGrid> {
    let mut grid = KdeGrid::spanning(&samples[0], bandwidth)?;
    for s in &samples[1..] {
        let g = KdeGrid::spanning(s, bandwidth)?;
        grid.min = grid.min.min(g.min);
        grid.max = grid.max.max(g.max);
    }
    grid.n_points = (((grid.max - grid.min) / (bandwidth / 10.0)).ceil() as usize + 1).max(1001);
    Ok(grid)
}

/// KDE curves of `kind` for every input directory, on one grid.
pub fn kde_curves(kind: PlotKind, inputs: &[PathBuf]) -> Result<Vec<(String, KdeCurve)>> {
    let bandwidth = kind.bandwidth().ok_or_else(|| Error::InvalidInput("f0 is not a density plot".into()))?;
    let variants = inputs.iter().map(|p| load_variant(p)).collect::<Result<Vec<_>>>()?;
    let samples = kde_samples(kind, &variants)?;
    let grid = common_grid(&samples, bandwidth)?;
    variants
        .iter()
        .zip(&samples)
        .map(|(v, s)| Ok((v.label.clone(), kde_estimate(s, bandwidth, grid)?)))
        .collect()
}

fn column_names(labels: &[String], single: &str) -> Vec<String> {
    if labels.len() == 1 {
        return vec![single.to_string()];
    }
    labels.iter().map(|l| format!("{single}:{}", l.replace(',', "_"))).collect()
}

/// Writes the SVG at `out` and the CSV next to it, each through a temporary
/// file renamed into place.
pub fn plot(inputs: &[PathBuf], kind: PlotKind, out: &Path, utterance: Option<&str>) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::InvalidInput("plot needs at least one input".into()));
    }
    let (series, csv) = match kind {
        PlotKind::F0 => f0_series(inputs, utterance)?,
        _ => {
            let curves = kde_curves(kind, inputs)?;
            let labels: Vec<String> = curves.iter().map(|(l, _)| l.clone()).collect();
            let mut csv = format!("grid_value,{}\n", column_names(&labels, "density").join(","));
            for (k, x) in curves[0].1.grid.iter().enumerate() {
                csv.push_str(&x.to_string());
                for (_, c) in &curves {
                    csv.push_str(&format!(",{}", c.density[k]));
                }
                csv.push('\n');
            }
            let series = curves
                .into_iter()
                .map(|(label, c)| Series { label, points: vec![c.grid.into_iter().zip(c.density).collect()] })
                .collect();
            (series, csv)
        }
    };
    let y_label = if kind == PlotKind::F0 { "F0 (Hz)" } else { "density" };
    write_atomic(&out.with_extension("csv"), csv.as_bytes())?;
    write_atomic(out, render_svg(&series, kind.x_label(), y_label).as_bytes())
}

struct Series {
    label: String,
    /// Disjoint polyline segments.
    points: Vec<Vec<(f64, f64)>>,
}

fn f0_series(inputs: &[PathBuf], utterance: Option<&str>) -> Result<(Vec<Series>, String)> {
    let mut labels = Vec::new();
    let mut contours: Vec<PitchTrack> = Vec::new();
    for dir in inputs {
        let v = load_variant(dir)?;
        let u = match utterance {
            Some(id) => v
                .utterances
                .iter()
                .find(|u| u.id == id)
                .ok_or_else(|| Error::InvalidInput(format!("utterance {id} is not in {}", dir.display())))?,
            None => &v.utterances[0],
        };
        contours.push(extract_pitch(&u.features, DEFAULT_VOICING_THRESHOLD)?);
        labels.push(v.label);
    }
    let len = contours.iter().map(PitchTrack::len).max().unwrap_or(0);
    let mut csv = format!("frame,{}\n", column_names(&labels, "f0_hz").join(","));
    for t in 0..len {
        csv.push_str(&t.to_string());
        for c in &contours {
            match c.f0.get(t) {
                Some(f) => csv.push_str(&format!(",{f}")),
                None => csv.push(','),
            }
        }
        csv.push('\n');
    }
    let series = labels
        .into_iter()
        .zip(&contours)
        .map(|(label, c)| {
            let mut points: Vec<Vec<(f64, f64)>> = vec![Vec::new()];
            for (t, (&f, &v)) in c.f0.iter().zip(&c.voiced).enumerate() {
                if v {
                    points.last_mut().expect("non-empty").push((t as f64, f));
                } else if !points.last().expect("non-empty").is_empty() {
                    points.push(Vec::new());
                }
            }
            points.retain(|s| !s.is_empty());
            Series { label, points }
        })
        .collect();
    Ok((series, csv))
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn render_svg(series: &[Series], x_label: &str, y_label: &str) -> String {
    let (w, h, left, right, top, bottom) = (720.0, 440.0, 70.0, 20.0, 20.0, 50.0);
    let all = series.iter().flat_map(|s| s.points.iter().flatten());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let sy = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <rect x=\"{left}\" y=\"{top}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>\n",
        w - left - right,
        h - top - bottom
    );
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            sx(fx),
            h - bottom + 16.0,
            tick(fx)
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            left - 6.0,
            sy(fy) + 4.0,
            tick(fy)
        ));
    }
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
        (left + w - right) / 2.0,
        h - 10.0,
        escape(x_label)
    ));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>\n",
        (top + h - bottom) / 2.0,
        (top + h - bottom) / 2.0,
        escape(y_label)
    ));
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        for seg in &ser.points {
            let pts: Vec<String> = seg.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            s.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                pts.join(" ")
            ));
        }
        let ly = top + 16.0 + 16.0 * i as f64;
        s.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            w - right - 150.0,
            w - right - 130.0,
            w - right - 124.0,
            ly + 4.0,
            escape(&ser.label)
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().ok_or_else(|| Error::InvalidInput(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

