//! Score histograms over unobserved pairs, first-pass min/max curves, DNS/ANS
//! selection overlap and augmentation-gain summaries, with CSV and SVG output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::InteractionSet;
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::model::ParamStore;
use crate::rng::StreamRng;

/// Share of the epoch-0 distribution lying below the marker.
pub const MARKER_QUANTILE: f64 = 0.8;

/// Draws `n` (user, item) pairs, user uniform and item uniform among the
/// user's unobserved items. Users who have interacted with everything are
/// skipped.
pub fn sample_unobserved_pairs(
    train: &InteractionSet,
    n: usize,
    rng: &mut StreamRng,
) -> Result<Vec<(usize, usize)>> {
    let eligible: Vec<usize> = (0..train.n_users())
        .filter(|&u| train.user_items(u).len() < train.n_items())
        .collect();
    if eligible.is_empty() || n == 0 {
        return Err(Error::Empty("unobserved pair sample".into()));
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u = eligible[rng.random_range(0..eligible.len())];
        let observed = train.user_items(u);
        // dense users fall back to enumerating the pool
        let item = if observed.len() * 2 < train.n_items() {
            loop {
                let i = rng.random_range(0..train.n_items());
                if observed.binary_search(&i).is_err() {
                    break i;
                }
            }
        } else {
            let pool: Vec<usize> = (0..train.n_items())
                .filter(|i| observed.binary_search(i).is_err())
                .collect();
            pool[rng.random_range(0..pool.len())]
        };
        out.push((u, item));
    }
    Ok(out)
}

pub fn pair_scores(params: &ParamStore, pairs: &[(usize, usize)]) -> Vec<f64> {
    pairs
        .par_iter()
        .map(|&(u, i)| dot(params.user(u), params.item(i)))
        .collect()
}

/// Nearest-rank quantile: the smallest sample with at least `q·n` samples at
/// or below it.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("quantile input".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!(
            "quantile {q} outside [0, 1]"
        )));
    }
    let mut v = values.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Ok(v[rank - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub epoch: usize,
    /// `n_bins + 1` strictly increasing edges spanning the observed scores.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// Marker position in min-max normalised units of this sample.
    pub marker: f64,
    /// Fraction of samples whose normalised score is below `marker`.
    pub below_marker: f64,
}

impl ScoreHistogram {
    pub fn samples(&self) -> u64 {
        self.counts.iter().sum()
    }
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}

fn normalise(x: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        (x - lo) / (hi - lo)
    } else {
        0.0
    }
}

/// Bins `scores` uniformly over their range. With no `marker`, the marker
/// becomes this sample's own 80th percentile in normalised units, which is
/// how the epoch-0 reference is fixed.
pub fn score_histogram(
    epoch: usize,
    scores: &[f64],
    n_bins: usize,
    marker: Option<f64>,
) -> Result<ScoreHistogram> {
    if scores.is_empty() {
        return Err(Error::Empty("score sample".into()));
    }
    if n_bins < 2 {
        return Err(Error::InvalidArgument(
            "histogram needs at least 2 bins".into(),
        ));
    }
    if scores.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("histogram scores".into()));
    }
    let (lo, hi) = min_max(scores);
    let (a, b) = if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    };
    let width = (b - a) / n_bins as f64;
    let edges: Vec<f64> = (0..=n_bins)
        .map(|k| if k == n_bins { b } else { a + k as f64 * width })
        .collect();
    let mut counts = vec![0u64; n_bins];
    for &x in scores {
        let k = (((x - a) / width) as usize).min(n_bins - 1);
        counts[k] += 1;
    }
    let normalised: Vec<f64> = scores.iter().map(|&x| normalise(x, lo, hi)).collect();
    let marker = match marker {
        Some(m) => m,
        None => quantile(&normalised, MARKER_QUANTILE)?,
    };
    let below = normalised.iter().filter(|&&x| x < marker).count();
    Ok(ScoreHistogram {
        epoch,
        edges,
        counts,
        marker,
        below_marker: below as f64 / scores.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMaxPoint {
    pub epoch: usize,
    pub min: f64,
    pub max: f64,
}

/// Per-epoch means of the per-draw minimum and maximum first-pass score.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MinMaxAccumulator {
    epochs: BTreeMap<usize, (f64, f64, u64)>,
}

impl MinMaxAccumulator {
    pub fn push(&mut self, epoch: usize, scores: &[f64]) {
        if scores.is_empty() {
            return;
        }
        let (lo, hi) = min_max(scores);
        let e = self.epochs.entry(epoch).or_insert((0.0, 0.0, 0));
        e.0 += lo;
        e.1 += hi;
        e.2 += 1;
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// Raw per-epoch means, before run-wide normalisation.
    pub fn raw(&self) -> Vec<MinMaxPoint> {
        self.epochs
            .iter()
            .map(|(&epoch, &(lo, hi, n))| MinMaxPoint {
                epoch,
                min: lo / n as f64,
                max: hi / n as f64,
            })
            .collect()
    }

    /// Maps the smallest per-epoch minimum to 0 and the largest maximum to 1.
    pub fn finish(&self) -> Result<Vec<MinMaxPoint>> {
        let raw = self.raw();
        if raw.is_empty() {
            return Err(Error::Empty("candidate draws".into()));
        }
        let lo = raw.iter().map(|p| p.min).fold(f64::INFINITY, f64::min);
        let hi = raw.iter().map(|p| p.max).fold(f64::NEG_INFINITY, f64::max);
        Ok(raw
            .into_iter()
            .map(|p| MinMaxPoint {
                epoch: p.epoch,
                min: normalise(p.min, lo, hi),
                max: normalise(p.max, lo, hi),
            })
            .collect())
    }
}

/// Convenience wrapper over [`MinMaxAccumulator`] for `(epoch, scores)` draws.
pub fn minmax_curve(draws: &[(usize, Vec<f64>)]) -> Result<Vec<MinMaxPoint>> {
    let mut acc = MinMaxAccumulator::default();
    for (epoch, scores) in draws {
        acc.push(*epoch, scores);
    }
    acc.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapStat {
    pub first_epoch: usize,
    pub last_epoch: usize,
    pub events: u64,
    pub agreements: u64,
    pub ratio: f64,
}

/// Fraction of `(ans_base_item, dns_item)` pairs that agree.
pub fn overlap_ratio(pairs: &[(usize, usize)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("paired selections".into()));
    }
    let same = pairs.iter().filter(|(a, b)| a == b).count();
    Ok(same as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OverlapCounter {
    epochs: BTreeMap<usize, (u64, u64)>,
}

impl OverlapCounter {
    pub fn push(&mut self, epoch: usize, ans_base: usize, dns_choice: usize) {
        let e = self.epochs.entry(epoch).or_insert((0, 0));
        e.0 += 1;
        e.1 += u64::from(ans_base == dns_choice);
    }

    pub fn per_epoch(&self) -> Vec<OverlapStat> {
        self.epochs
            .iter()
            .map(|(&epoch, &(events, agreements))| OverlapStat {
                first_epoch: epoch,
                last_epoch: epoch,
                events,
                agreements,
                ratio: agreements as f64 / events as f64,
            })
            .collect()
    }

    pub fn whole_run(&self) -> Option<OverlapStat> {
        let first = *self.epochs.keys().next()?;
        let last = *self.epochs.keys().next_back()?;
        let (events, agreements) = self
            .epochs
            .values()
            .fold((0, 0), |(e, a), &(x, y)| (e + x, a + y));
        Some(OverlapStat {
            first_epoch: first,
            last_epoch: last,
            events,
            agreements,
            ratio: agreements as f64 / events as f64,
        })
    }
}

/// Running summary of augmentation gains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainStats {
    pub count: u64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub positive: u64,
}

impl Default for GainStats {
    fn default() -> Self {
        GainStats {
            count: 0,
            mean: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            positive: 0,
        }
    }
}

impl GainStats {
    pub fn push(&mut self, gain: f64) {
        self.count += 1;
        self.mean += (gain - self.mean) / self.count as f64;
        self.min = self.min.min(gain);
        self.max = self.max.max(gain);
        self.positive += u64::from(gain > 0.0);
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HistogramRow {
    epoch: usize,
    bin_lo: f64,
    bin_hi: f64,
    count: u64,
}

pub fn write_histogram_csv<W: Write>(w: W, histograms: &[ScoreHistogram]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for h in histograms {
        for (k, &count) in h.counts.iter().enumerate() {
            out.serialize(HistogramRow {
                epoch: h.epoch,
                bin_lo: h.edges[k],
                bin_hi: h.edges[k + 1],
                count,
            })?;
        }
    }
    out.flush().map_err(|e| Error::io("<csv>", e))
}

/// Bins and counts per epoch, as written by [`write_histogram_csv`].
/// Marker fields are not part of the CSV and come back as NaN.
pub fn read_histogram_csv<R: Read>(r: R) -> Result<Vec<ScoreHistogram>> {
    let mut by_epoch: BTreeMap<usize, ScoreHistogram> = BTreeMap::new();
    for row in csv::Reader::from_reader(r).deserialize() {
        let row: HistogramRow = row?;
        let h = by_epoch.entry(row.epoch).or_insert_with(|| ScoreHistogram {
            epoch: row.epoch,
            edges: vec![row.bin_lo],
            counts: Vec::new(),
            marker: f64::NAN,
            below_marker: f64::NAN,
        });
        h.edges.push(row.bin_hi);
        h.counts.push(row.count);
    }
    Ok(by_epoch.into_values().collect())
}

pub fn write_minmax_csv<W: Write>(w: W, points: &[MinMaxPoint]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for p in points {
        out.serialize(p)?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn read_minmax_csv<R: Read>(r: R) -> Result<Vec<MinMaxPoint>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

pub fn write_overlap_csv<W: Write>(w: W, stats: &[OverlapStat]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for s in stats {
        out.serialize(s)?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))
}

const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 200.0;
const PAD: f64 = 30.0;

/// One bar-chart panel per histogram, side by side.
pub fn histograms_svg(histograms: &[ScoreHistogram]) -> String {
    let width = PAD + histograms.len() as f64 * (PANEL_W + PAD);
    let height = PANEL_H + 2.0 * PAD;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    for (p, h) in histograms.iter().enumerate() {
        let x0 = PAD + p as f64 * (PANEL_W + PAD);
        let peak = h.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        let bar = PANEL_W / h.counts.len().max(1) as f64;
        let _ = writeln!(
            s,
            r#"<text x="{x0}" y="{}">epoch {}</text>"#,
            PAD - 10.0,
            h.epoch
        );
        let _ = writeln!(
            s,
            r##"<rect x="{x0}" y="{PAD}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#888"/>"##
        );
        for (k, &c) in h.counts.iter().enumerate() {
            let bh = PANEL_H * c as f64 / peak;
            let _ = writeln!(
                s,
                r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4a7ab5"/>"##,
                x0 + k as f64 * bar,
                PAD + PANEL_H - bh,
                bar * 0.9,
                bh
            );
        }
        if h.marker.is_finite() {
            let mx = x0 + PANEL_W * h.marker;
            let _ = writeln!(
                s,
                r##"<line x1="{mx:.2}" y1="{PAD}" x2="{mx:.2}" y2="{}" stroke="#c33" stroke-dasharray="4 3"/>"##,
                PAD + PANEL_H
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{x0}" y="{}">{:.3} .. {:.3}</text>"#,
            PAD + PANEL_H + 18.0,
            h.edges.first().copied().unwrap_or(0.0),
            h.edges.last().copied().unwrap_or(0.0)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Two polylines, normalised min and max, against epoch.
pub fn minmax_svg(points: &[MinMaxPoint]) -> String {
    let width = PANEL_W + 2.0 * PAD;
    let height = PANEL_H + 2.0 * PAD;
    let last = points.iter().map(|p| p.epoch).max().unwrap_or(0).max(1) as f64;
    let xy = |epoch: usize, v: f64| {
        (
            PAD + PANEL_W * epoch as f64 / last,
            PAD + PANEL_H * (1.0 - v),
        )
    };
    let line = |f: &dyn Fn(&MinMaxPoint) -> f64| {
        points
            .iter()
            .map(|p| {
                let (x, y) = xy(p.epoch, f(p));
                format!("{x:.2},{y:.2}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r##"<rect x="{PAD}" y="{PAD}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#888"/>"##
    );
    let _ = writeln!(
        s,
        r##"<polyline points="{}" fill="none" stroke="#c33"/>"##,
        line(&|p| p.max)
    );
    let _ = writeln!(
        s,
        r##"<polyline points="{}" fill="none" stroke="#4a7ab5"/>"##,
        line(&|p| p.min)
    );
    let _ = writeln!(
        s,
        r#"<text x="{PAD}" y="{}">max (red), min (blue) by epoch</text>"#,
        PAD - 10.0
    );
    s.push_str("</svg>\n");
    s
}
