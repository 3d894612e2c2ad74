//! Activity and delay decisions from recovered effective channels, and the
//! evaluation metrics built on them.
//!
//! Every user owns a group of `group_len` consecutive rows of the estimate,
//! one per delay hypothesis. A user's score is the largest row norm in its
//! group, which for a single real or complex antenna is the entry magnitude.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_model::{effective_channel, GroundTruth};

fn check_groups(x: &ArrayView2<'_, f64>, group_len: usize) -> Result<usize> {
    if group_len == 0 || x.nrows() % group_len != 0 {
        return Err(Error::Shape(format!(
            "{} rows do not split into groups of {group_len}",
            x.nrows()
        )));
    }
    Ok(x.nrows() / group_len)
}

fn row_norm(x: &ArrayView2<'_, f64>, row: usize) -> f64 {
    x.row(row).iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Index within each group of the row with the largest norm. Ties go to the
/// smallest delay.
fn group_argmax(x: &ArrayView2<'_, f64>, group_len: usize) -> Vec<(usize, f64)> {
    (0..x.nrows() / group_len)
        .map(|user| {
            let mut best = (0, row_norm(x, user * group_len));
            for t in 1..group_len {
                let n = row_norm(x, user * group_len + t);
                if n > best.1 {
                    best = (t, n);
                }
            }
            best
        })
        .collect()
}

/// Keeps the strongest row of every user group and zeroes the others.
pub fn group_refine(x: ArrayView2<'_, f64>, group_len: usize) -> Result<Array2<f64>> {
    check_groups(&x, group_len)?;
    let mut out = Array2::<f64>::zeros(x.raw_dim());
    for (user, (t, _)) in group_argmax(&x, group_len).into_iter().enumerate() {
        let row = user * group_len + t;
        out.row_mut(row).assign(&x.row(row));
    }
    Ok(out)
}

/// Per-user decisions at one threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub active: Vec<bool>,
    /// Detected delay, present only for users declared active.
    pub delay: Vec<Option<usize>>,
    pub score: Vec<f64>,
    pub refined: Array2<f64>,
    pub threshold: f64,
}

/// Declares a user active when its score exceeds `threshold`.
pub fn detect(estimate: ArrayView2<'_, f64>, group_len: usize, threshold: f64) -> Result<DetectionResult> {
    let refined = group_refine(estimate, group_len)?;
    let best = group_argmax(&refined.view(), group_len);
    let active: Vec<bool> = best.iter().map(|&(_, s)| s > threshold).collect();
    Ok(DetectionResult {
        delay: best
            .iter()
            .zip(&active)
            .map(|(&(t, _), &a)| a.then_some(t))
            .collect(),
        score: best.iter().map(|&(_, s)| s).collect(),
        active,
        refined,
        threshold,
    })
}

/// Raw counts behind the detection ratios.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub active: usize,
    pub missed: usize,
    pub inactive: usize,
    pub false_alarms: usize,
    /// Active users that were missed or detected at the wrong delay.
    pub delay_errors: usize,
}

impl Counts {
    fn add(&mut self, o: &Counts) {
        self.active += o.active;
        self.missed += o.missed;
        self.inactive += o.inactive;
        self.false_alarms += o.false_alarms;
        self.delay_errors += o.delay_errors;
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Detection ratios and estimation errors. Ratios whose denominator is zero
/// are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub missed_detection: Option<f64>,
    pub false_alarm: Option<f64>,
    pub delay_error: Option<f64>,
    /// `||x_refined - x0||^2 / ||x0||^2` on the effective channel.
    pub nmse: Option<f64>,
    /// `||x_refined - x0||^2`.
    pub mse: f64,
    /// Counts pooled over all samples.
    pub counts: Counts,
    pub samples: usize,
}

/// Metrics of one sample.
pub fn compute_metrics(result: &DetectionResult, truth: &GroundTruth) -> Result<MetricReport> {
    if result.active.len() != truth.users() {
        return Err(Error::Shape(format!(
            "{} detected users, {} true users",
            result.active.len(),
            truth.users()
        )));
    }
    let group_len = result.refined.nrows() / truth.users();
    let x0 = effective_channel(truth, group_len - 1);
    if x0.dim() != result.refined.dim() {
        return Err(Error::Shape("estimate and effective channel differ in shape".into()));
    }
    let counts = count(&result.active, &result.delay, truth);
    let err2 = (&result.refined - &x0).iter().map(|v| v * v).sum::<f64>();
    let energy = x0.iter().map(|v| v * v).sum::<f64>();
    Ok(MetricReport {
        missed_detection: ratio(counts.missed, counts.active),
        false_alarm: ratio(counts.false_alarms, counts.inactive),
        delay_error: ratio(counts.delay_errors, counts.active),
        nmse: (counts.active > 0 && energy > 0.0).then(|| err2 / energy),
        mse: err2,
        counts,
        samples: 1,
    })
}

fn count(active: &[bool], delay: &[Option<usize>], truth: &GroundTruth) -> Counts {
    let mut c = Counts::default();
    for user in 0..truth.users() {
        if truth.active[user] {
            c.active += 1;
            if !active[user] {
                c.missed += 1;
            }
            if !active[user] || delay[user] != truth.delay[user] {
                c.delay_errors += 1;
            }
        } else {
            c.inactive += 1;
            if active[user] {
                c.false_alarms += 1;
            }
        }
    }
    c
}

/// Averages per-sample ratios over the samples where they are defined and
/// pools the counts.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    sums: [f64; 4],
    defined: [usize; 4],
    mse: f64,
    counts: Counts,
    samples: usize,
}

impl MetricAccumulator {
    pub fn add(&mut self, r: &MetricReport) {
        let parts = [r.missed_detection, r.false_alarm, r.delay_error, r.nmse];
        for (k, p) in parts.iter().enumerate() {
            if let Some(v) = p {
                self.sums[k] += v;
                self.defined[k] += 1;
            }
        }
        self.mse += r.mse * r.samples as f64;
        self.counts.add(&r.counts);
        self.samples += r.samples;
    }

    pub fn finish(&self) -> MetricReport {
        let avg = |k: usize| (self.defined[k] > 0).then(|| self.sums[k] / self.defined[k] as f64);
        MetricReport {
            missed_detection: avg(0),
            false_alarm: avg(1),
            delay_error: avg(2),
            nmse: avg(3),
            mse: if self.samples > 0 { self.mse / self.samples as f64 } else { 0.0 },
            counts: self.counts,
            samples: self.samples,
        }
    }
}

/// Threshold-independent summary of one estimate: what every threshold-based
/// metric needs, without keeping the estimate itself.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub score: Vec<f64>,
    /// Strongest delay per user.
    pub argmax: Vec<usize>,
    pub truth_active: Vec<bool>,
    pub truth_delay: Vec<Option<usize>>,
    /// `||x_refined - x0||^2`.
    pub err2: f64,
    /// `||x0||^2`.
    pub energy: f64,
}

impl ScoredSample {
    pub fn new(estimate: ArrayView2<'_, f64>, truth: &GroundTruth) -> Result<Self> {
        let group_len = estimate.nrows() / truth.users().max(1);
        let r = detect(estimate, group_len, f64::INFINITY)?;
        let x0 = effective_channel(truth, group_len - 1);
        if x0.dim() != r.refined.dim() {
            return Err(Error::Shape("estimate and effective channel differ in shape".into()));
        }
        let best = group_argmax(&r.refined.view(), group_len);
        Ok(ScoredSample {
            argmax: best.iter().map(|b| b.0).collect(),
            score: r.score,
            truth_active: truth.active.clone(),
            truth_delay: truth.delay.clone(),
            err2: (&r.refined - &x0).iter().map(|v| v * v).sum(),
            energy: x0.iter().map(|v| v * v).sum(),
        })
    }

    /// Builds a sample from externally produced scores, for methods that do not
    /// produce a full effective-channel estimate.
    pub fn from_scores(score: Vec<f64>, argmax: Vec<usize>, truth: &GroundTruth, err2: f64, energy: f64) -> Self {
        ScoredSample {
            score,
            argmax,
            truth_active: truth.active.clone(),
            truth_delay: truth.delay.clone(),
            err2,
            energy,
        }
    }

    pub fn report(&self, threshold: f64) -> MetricReport {
        let mut c = Counts::default();
        for (u, &s) in self.score.iter().enumerate() {
            let detected = s > threshold;
            if self.truth_active[u] {
                c.active += 1;
                if !detected {
                    c.missed += 1;
                }
                if !detected || self.truth_delay[u] != Some(self.argmax[u]) {
                    c.delay_errors += 1;
                }
            } else {
                c.inactive += 1;
                if detected {
                    c.false_alarms += 1;
                }
            }
        }
        MetricReport {
            missed_detection: ratio(c.missed, c.active),
            false_alarm: ratio(c.false_alarms, c.inactive),
            delay_error: ratio(c.delay_errors, c.active),
            nmse: (c.active > 0 && self.energy > 0.0).then(|| self.err2 / self.energy),
            mse: self.err2,
            counts: c,
            samples: 1,
        }
    }
}

/// Dataset-level metrics at one threshold.
pub fn evaluate(samples: &[ScoredSample], threshold: f64) -> MetricReport {
    let mut acc = MetricAccumulator::default();
    for s in samples {
        acc.add(&s.report(threshold));
    }
    acc.finish()
}

/// One operating point of a receiver operating characteristic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub false_alarm: f64,
    pub missed_detection: f64,
}

/// Averaged (false alarm, missed detection) pairs, one per threshold, sorted
/// by increasing threshold.
pub fn roc_sweep(samples: &[ScoredSample], grid: &[f64]) -> Result<Vec<RocPoint>> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("threshold grid is empty".into()));
    }
    if grid.iter().any(|q| q.is_nan()) {
        return Err(Error::InvalidArgument("threshold grid contains NaN".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    Ok(grid
        .into_iter()
        .map(|q| {
            let r = evaluate(samples, q);
            RocPoint {
                threshold: q,
                false_alarm: r.false_alarm.unwrap_or(0.0),
                missed_detection: r.missed_detection.unwrap_or(0.0),
            }
        })
        .collect())
}

/// Thresholds at `points` evenly spaced quantiles of all pooled scores,
/// together with 0 and `+inf`.
pub fn threshold_grid(samples: &[ScoredSample], points: usize) -> Vec<f64> {
    let mut pool: Vec<f64> = samples.iter().flat_map(|s| s.score.iter().copied()).collect();
    pool.sort_by(f64::total_cmp);
    let mut grid = vec![0.0, f64::INFINITY];
    if !pool.is_empty() && points > 0 {
        for k in 0..points {
            let pos = k as f64 / points.max(2).saturating_sub(1) as f64;
            grid.push(pool[((pool.len() - 1) as f64 * pos).round() as usize]);
        }
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

/// Threshold at the `(1 - target)` quantile of the pooled inactive-user
/// scores, so that about a fraction `target` of inactive users exceeds it.
pub fn calibrate_threshold(samples: &[ScoredSample], target: f64) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target false alarm must lie in (0, 1), got {target}"
        )));
    }
    let mut pool: Vec<f64> = samples
        .iter()
        .flat_map(|s| {
            s.score
                .iter()
                .zip(&s.truth_active)
                .filter(|(_, &a)| !a)
                .map(|(&v, _)| v)
        })
        .collect();
    if pool.is_empty() {
        return Err(Error::EmptyInactivePool);
    }
    pool.sort_by(f64::total_cmp);
    let n = pool.len();
    let k = (((1.0 - target) * n as f64).ceil() as usize).clamp(1, n) - 1;
    Ok(pool[k])
}

/// Missed detection read off a ROC at false alarm `fa` by linear
/// interpolation between neighboring operating points. `None` outside the
/// range of false alarms the curve reaches.
pub fn missed_at_false_alarm(roc: &[RocPoint], fa: f64) -> Option<f64> {
    let mut pts: Vec<(f64, f64)> = roc.iter().map(|p| (p.false_alarm, p.missed_detection)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let (lo, hi) = (pts.first()?.0, pts.last()?.0);
    if fa < lo || fa > hi {
        return None;
    }
    for w in pts.windows(2) {
        let ((f0, m0), (f1, m1)) = (w[0], w[1]);
        if fa >= f0 && fa <= f1 {
            if f1 == f0 {
                return Some(m0.min(m1));
            }
            return Some(m0 + (m1 - m0) * (fa - f0) / (f1 - f0));
        }
    }
    Some(pts[0].1)
}

/// False-alarm interval covered by both curves.
pub fn overlap(a: &[RocPoint], b: &[RocPoint]) -> Option<(f64, f64)> {
    let range = |r: &[RocPoint]| {
        let lo = r.iter().map(|p| p.false_alarm).fold(f64::INFINITY, f64::min);
        let hi = r.iter().map(|p| p.false_alarm).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let (a0, a1) = range(a);
    let (b0, b1) = range(b);
    let (lo, hi) = (a0.max(b0), a1.min(b1));
    (lo < hi).then_some((lo, hi))
}

/// Checks that curve `a` has strictly lower missed detection than `b` at
/// `points` evenly spaced false alarms across their overlap. Points where `b`
/// already has zero missed detection cannot be beaten and are skipped.
/// Returns the number of compared points, the worst margin
/// `min(md_b - md_a)` and the false alarm where it occurs.
pub fn dominance(a: &[RocPoint], b: &[RocPoint], points: usize) -> Option<(usize, f64, f64)> {
    let (lo, hi) = overlap(a, b)?;
    let mut compared = 0;
    let (mut worst, mut at) = (f64::INFINITY, f64::NAN);
    for k in 0..points {
        let fa = lo + (hi - lo) * (k as f64 + 0.5) / points as f64;
        let (ma, mb) = (missed_at_false_alarm(a, fa)?, missed_at_false_alarm(b, fa)?);
        if mb == 0.0 {
            continue;
        }
        compared += 1;
        if mb - ma < worst {
            (worst, at) = (mb - ma, fa);
        }
    }
    Some((compared, worst, at))
}
