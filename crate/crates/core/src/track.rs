//! Antinode tracks through a video and saturating-rise fits of their ring
//! counts.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::annot::fmt_sig6;
use crate::detect::Detection;
use crate::error::{Error, Result};

/// Frame rate of the high-speed ESPI recordings.
pub const DEFAULT_FPS: f64 = 15037.0;
pub const MIN_FIT_SAMPLES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Gate {
    /// Half the larger semi-axis of the track's last detection.
    Auto,
    Pixels(f64),
}

impl FromStr for Gate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Gate::Auto);
        }
        match s.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(Gate::Pixels(v)),
            _ => Err(Error::invalid(format!("gate must be 'auto' or a positive number, got '{s}'"))),
        }
    }
}

impl fmt::Display for Gate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Gate::Auto => write!(f, "auto"),
            Gate::Pixels(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackConfig {
    pub fps: f64,
    pub gate: Gate,
    pub max_misses: usize,
}

impl Default for TrackConfig {
    fn default() -> Self {
        TrackConfig {
            fps: DEFAULT_FPS,
            gate: Gate::Auto,
            max_misses: 3,
        }
    }
}

impl TrackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::invalid("fps must be positive"));
        }
        if self.max_misses == 0 {
            return Err(Error::invalid("max_misses must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackSample {
    pub frame: usize,
    pub t: f64,
    pub cx: f64,
    pub cy: f64,
    pub rings: f64,
    /// Larger semi-axis of the detection, used by the automatic gate.
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub track_id: usize,
    pub samples: Vec<TrackSample>,
}

impl Track {
    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    pub fn rings(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.rings).collect()
    }
}

struct Open {
    track: Track,
    misses: usize,
}

/// Greedy gated nearest-centroid linking. `frames[i]` holds the detections
/// of frame `i`; sample time is `i / fps`.
pub fn link(frames: &[Vec<Detection>], cfg: &TrackConfig) -> Vec<Track> {
    let mut open: Vec<Open> = Vec::new();
    let mut closed: Vec<Track> = Vec::new();
    let mut next_id = 0;

    for (f, dets) in frames.iter().enumerate() {
        let mut order: Vec<&Detection> = dets.iter().collect();
        order.sort_by(|p, q| {
            q.score
                .total_cmp(&p.score)
                .then(p.ellipse.cx.total_cmp(&q.ellipse.cx))
                .then(p.ellipse.cy.total_cmp(&q.ellipse.cy))
        });
        let mut taken = vec![false; open.len()];
        for d in order {
            let (cx, cy) = (d.ellipse.cx, d.ellipse.cy);
            let mut best: Option<(usize, f64)> = None;
            for (k, o) in open.iter().enumerate() {
                if taken[k] {
                    continue;
                }
                let last = o.track.samples.last().expect("tracks are never empty");
                let gate = match cfg.gate {
                    Gate::Auto => 0.5 * last.radius,
                    Gate::Pixels(g) => g,
                };
                let dist = ((cx - last.cx).powi(2) + (cy - last.cy).powi(2)).sqrt();
                if dist <= gate && best.is_none_or(|(_, b)| dist < b) {
                    best = Some((k, dist));
                }
            }
            let sample = TrackSample {
                frame: f,
                t: f as f64 / cfg.fps,
                cx,
                cy,
                rings: d.rings(),
                radius: d.ellipse.a.max(d.ellipse.b),
            };
            match best {
                Some((k, _)) => {
                    taken[k] = true;
                    open[k].track.samples.push(sample);
                    open[k].misses = 0;
                }
                None => {
                    open.push(Open {
                        track: Track {
                            track_id: next_id,
                            samples: vec![sample],
                        },
                        misses: 0,
                    });
                    taken.push(true);
                    next_id += 1;
                }
            }
        }
        let mut still = Vec::with_capacity(open.len());
        for (k, mut o) in open.into_iter().enumerate() {
            if !taken[k] {
                o.misses += 1;
            }
            if o.misses >= cfg.max_misses {
                closed.push(o.track);
            } else {
                still.push(o);
            }
        }
        open = still;
    }
    closed.extend(open.into_iter().map(|o| o.track));
    closed.sort_by_key(|t| t.track_id);
    closed
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiseFit {
    pub a_max: f64,
    pub tau: f64,
    pub t0: f64,
    pub rmse: f64,
    /// Gauss-Newton reached its stopping criterion.
    pub converged: bool,
    /// A parameter sits on its search bound or the amplitude is not positive.
    pub degenerate: bool,
    /// The model explains less than 90% of the variance.
    pub poor_fit: bool,
}

/// `a (1 - exp(-(t - t0) / tau))` for `t >= t0`, zero before.
pub fn rise_model(t: f64, a_max: f64, tau: f64, t0: f64) -> f64 {
    if t <= t0 {
        0.0
    } else {
        a_max * (1.0 - libm::exp(-(t - t0) / tau))
    }
}

fn sse(t: &[f64], r: &[f64], a: f64, tau: f64, t0: f64) -> f64 {
    t.iter()
        .zip(r)
        .map(|(&ti, &ri)| {
            let e = ri - rise_model(ti, a, tau, t0);
            e * e
        })
        .sum()
}

/// Least-squares amplitude for fixed `(tau, t0)`.
fn best_amplitude(t: &[f64], r: &[f64], tau: f64, t0: f64) -> Option<f64> {
    let (mut gg, mut gr) = (0.0, 0.0);
    for (&ti, &ri) in t.iter().zip(r) {
        let g = rise_model(ti, 1.0, tau, t0);
        gg += g * g;
        gr += g * ri;
    }
    (gg > 0.0).then(|| gr / gg)
}

/// Solve a 3x3 symmetric system after scaling it to unit diagonal.
fn solve3(m: [[f64; 3]; 3], v: [f64; 3]) -> Option<[f64; 3]> {
    let d: [f64; 3] = std::array::from_fn(|i| m[i][i].sqrt());
    if d.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return None;
    }
    let ms: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| m[i][j] / (d[i] * d[j])));
    let vs: [f64; 3] = std::array::from_fn(|i| v[i] / d[i]);
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let det_s = det(ms);
    if !det_s.is_finite() || det_s.abs() <= 1e-13 {
        return None;
    }
    let mut out = [0.0; 3];
    for (c, slot) in out.iter_mut().enumerate() {
        let mut mc = ms;
        for row in 0..3 {
            mc[row][c] = vs[row];
        }
        *slot = det(mc) / det_s / d[c];
    }
    Some(out)
}

const GRID_T0: usize = 21;
const GRID_TAU: usize = 30;
const MAX_ITER: usize = 100;

/// Fit the saturating rise to a series: coarse grid over `(t0, tau)` with
/// the amplitude solved exactly, then Gauss-Newton on all three parameters
/// with step halving.
pub fn fit_rise_series(t: &[f64], r: &[f64]) -> Result<RiseFit> {
    fit_rise_traced(t, r).map(|(fit, _)| fit)
}

/// [`fit_rise_series`] plus the sum of squared residuals at the grid
/// optimum and after every accepted Gauss-Newton step.
pub fn fit_rise_traced(t: &[f64], r: &[f64]) -> Result<(RiseFit, Vec<f64>)> {
    if t.len() != r.len() {
        return Err(Error::invalid("times and values differ in length"));
    }
    let n = t.len();
    if n < MIN_FIT_SAMPLES {
        return Err(Error::TooFewSamples {
            need: MIN_FIT_SAMPLES,
            got: n,
        });
    }
    if t.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("sample times must be strictly increasing"));
    }
    let span = t[n - 1] - t[0];
    let mut steps: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    steps.sort_by(f64::total_cmp);
    let dt = steps[steps.len() / 2];
    let tau_lo = 0.05 * dt;
    let tau_hi = 20.0 * span;

    let mut best = (f64::INFINITY, 0.0, tau_lo, t[0]);
    for i in 0..GRID_T0 {
        let t0 = t[0] - 0.5 * span + span * i as f64 / (GRID_T0 - 1) as f64;
        for j in 0..GRID_TAU {
            let tau = tau_lo * (tau_hi / tau_lo).powf(j as f64 / (GRID_TAU - 1) as f64);
            if let Some(a) = best_amplitude(t, r, tau, t0) {
                let e = sse(t, r, a, tau, t0);
                if e < best.0 {
                    best = (e, a, tau, t0);
                }
            }
        }
    }
    let grid = best;

    // Gauss-Newton in (a, t0, ln tau)
    let (mut cur_sse, mut a, mut tau, mut t0) = grid;
    let mut trace = vec![cur_sse];
    let mut converged = false;
    for _ in 0..MAX_ITER {
        let mut jtj = [[0.0; 3]; 3];
        let mut jtr = [0.0; 3];
        for (&ti, &ri) in t.iter().zip(r) {
            if ti <= t0 {
                continue;
            }
            let e = libm::exp(-(ti - t0) / tau);
            let jac = [1.0 - e, -a * e / tau, -a * e * (ti - t0) / tau];
            let res = ri - a * (1.0 - e);
            for p in 0..3 {
                jtr[p] += jac[p] * res;
                for q in 0..3 {
                    jtj[p][q] += jac[p] * jac[q];
                }
            }
        }
        let Some(delta) = solve3(jtj, jtr) else {
            converged = cur_sse <= 1e-24 * n as f64;
            break;
        };
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let na = a + step * delta[0];
            let nt0 = t0 + step * delta[1];
            let ntau = (tau * libm::exp(step * delta[2])).clamp(tau_lo, tau_hi);
            let e = sse(t, r, na, ntau, nt0);
            if e <= cur_sse {
                accepted = Some((e, na, ntau, nt0));
                break;
            }
            step *= 0.5;
        }
        let Some((e, na, ntau, nt0)) = accepted else {
            converged = true;
            break;
        };
        let small = (na - a).abs() <= 1e-10 * a.abs().max(1e-12)
            && (nt0 - t0).abs() <= 1e-10 * tau
            && (ntau - tau).abs() <= 1e-10 * tau;
        let stalled = cur_sse - e <= 1e-15 * cur_sse.max(1e-300);
        cur_sse = e;
        trace.push(e);
        a = na;
        tau = ntau;
        t0 = nt0;
        if small || stalled {
            converged = true;
            break;
        }
    }
    if !converged {
        (cur_sse, a, tau, t0) = grid;
    }

    let mean = r.iter().sum::<f64>() / n as f64;
    let sst: f64 = r.iter().map(|v| (v - mean) * (v - mean)).sum();
    let degenerate = !(a > 0.0) || tau <= tau_lo * (1.0 + 1e-9) || tau >= tau_hi * (1.0 - 1e-9);
    let poor_fit = sst > 0.0 && cur_sse > 0.1 * sst;
    let fit = RiseFit {
        a_max: a,
        tau,
        t0,
        rmse: (cur_sse / n as f64).sqrt(),
        converged,
        degenerate,
        poor_fit,
    };
    Ok((fit, trace))
}

pub fn fit_rise(track: &Track) -> Result<RiseFit> {
    fit_rise_series(&track.times(), &track.rings())
}

/// Pearson correlation of ring counts at times where both tracks have a
/// sample within `0.5 / fps` of each other.
pub fn series_correlation(a: &Track, b: &Track, fps: f64) -> Result<f64> {
    let tol = 0.5 / fps;
    let mut pairs = Vec::new();
    for s in &a.samples {
        let idx = b.samples.partition_point(|x| x.t < s.t);
        let near = [idx.checked_sub(1), Some(idx)]
            .into_iter()
            .flatten()
            .filter_map(|i| b.samples.get(i))
            .min_by(|p, q| (p.t - s.t).abs().total_cmp(&(q.t - s.t).abs()));
        if let Some(m) = near {
            if (m.t - s.t).abs() <= tol {
                pairs.push((s.rings, m.rings));
            }
        }
    }
    if pairs.len() < 3 {
        return Err(Error::TooFewSamples {
            need: 3,
            got: pairs.len(),
        });
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in &pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation of a constant series".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

pub const TRACKS_HEADER: &str = "track_id,frame,t,cx,cy,rings";
pub const FITS_HEADER: &str = "track_id,n,a_max,tau,t0,rmse,converged,degenerate,poor_fit";

pub fn tracks_to_csv(tracks: &[Track]) -> String {
    let mut out = format!("{TRACKS_HEADER}\n");
    for tr in tracks {
        for s in &tr.samples {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                tr.track_id,
                s.frame,
                fmt_sig6(s.t),
                fmt_sig6(s.cx),
                fmt_sig6(s.cy),
                fmt_sig6(s.rings)
            ));
        }
    }
    out
}

pub fn fits_to_csv(fits: &[(usize, usize, RiseFit)]) -> String {
    let mut out = format!("{FITS_HEADER}\n");
    for (id, n, f) in fits {
        out.push_str(&format!(
            "{id},{n},{},{},{},{},{},{},{}\n",
            fmt_sig6(f.a_max),
            fmt_sig6(f.tau),
            fmt_sig6(f.t0),
            fmt_sig6(f.rmse),
            f.converged,
            f.degenerate,
            f.poor_fit
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annot::EllipseAnnotation;

    fn det(cx: f64, cy: f64, rings: f64) -> Detection {
        Detection::from_ellipse(EllipseAnnotation::new(cx, cy, 30.0, 25.0, 0.0, rings).unwrap(), 0.9)
    }

    #[test]
    fn stationary_antinode_is_one_track() {
        let frames: Vec<Vec<Detection>> = (0..100).map(|i| vec![det(100.0 + (i % 2) as f64, 80.0, 3.0)]).collect();
        let tracks = link(&frames, &TrackConfig::default());
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].samples.len(), 100);
        assert!((tracks[0].samples[99].t - 99.0 / 15037.0).abs() < 1e-15);
    }

    #[test]
    fn separated_antinodes_never_swap() {
        let frames: Vec<Vec<Detection>> = (0..30)
            .map(|i| {
                let mut v = vec![det(100.0, 100.0, 2.0), det(200.0, 100.0, 7.0)];
                if i % 2 == 1 {
                    v.reverse();
                }
                v
            })
            .collect();
        let tracks = link(&frames, &TrackConfig::default());
        assert_eq!(tracks.len(), 2);
        for tr in &tracks {
            let first = tr.samples[0].cx;
            assert!(tr.samples.iter().all(|s| s.cx == first));
        }
    }

    #[test]
    fn short_dropout_survives_long_one_splits() {
        let mut frames: Vec<Vec<Detection>> = (0..20).map(|_| vec![det(100.0, 100.0, 2.0)]).collect();
        frames[5].clear();
        frames[6].clear();
        assert_eq!(link(&frames, &TrackConfig::default()).len(), 1);
        frames[10].clear();
        frames[11].clear();
        frames[12].clear();
        assert_eq!(link(&frames, &TrackConfig::default()).len(), 2);
    }

    fn series(a: f64, tau: f64, t0: f64, fps: f64, dur: f64) -> (Vec<f64>, Vec<f64>) {
        let n = (dur * fps).round() as usize;
        let t: Vec<f64> = (0..n).map(|i| i as f64 / fps).collect();
        let r = t.iter().map(|&x| rise_model(x, a, tau, t0)).collect();
        (t, r)
    }

    #[test]
    fn recovers_forward_model() {
        let (t, r) = series(3.0, 2e-3, 0.0, DEFAULT_FPS, 30e-3);
        let f = fit_rise_series(&t, &r).unwrap();
        assert!((f.tau - 2e-3).abs() / 2e-3 < 0.05, "{f:?}");
        assert!((f.a_max - 3.0).abs() / 3.0 < 0.05);
        assert!(f.converged && !f.degenerate && !f.poor_fit);
    }

    #[test]
    fn constant_series_is_degenerate() {
        let t: Vec<f64> = (0..40).map(|i| i as f64 / DEFAULT_FPS).collect();
        let f = fit_rise_series(&t, &vec![5.0; 40]).unwrap();
        assert!((f.a_max - 5.0).abs() < 0.05);
        assert!(f.degenerate, "{f:?}");
    }

    #[test]
    fn decaying_series_is_a_poor_fit() {
        let t: Vec<f64> = (0..60).map(|i| i as f64 / DEFAULT_FPS).collect();
        let r: Vec<f64> = t.iter().map(|&x| 5.0 * (-x / 1e-3).exp()).collect();
        let f = fit_rise_series(&t, &r).unwrap();
        assert!(f.poor_fit, "{f:?}");
    }

    #[test]
    fn too_few_samples() {
        let (t, r) = series(3.0, 2e-3, 0.0, DEFAULT_FPS, 5.0 / DEFAULT_FPS);
        assert!(matches!(fit_rise_series(&t, &r), Err(Error::TooFewSamples { .. })));
    }

    fn track_of(values: &[f64]) -> Track {
        Track {
            track_id: 0,
            samples: values
                .iter()
                .enumerate()
                .map(|(i, &v)| TrackSample {
                    frame: i,
                    t: i as f64 / DEFAULT_FPS,
                    cx: 0.0,
                    cy: 0.0,
                    rings: v,
                    radius: 10.0,
                })
                .collect(),
        }
    }

    #[test]
    fn correlation_examples() {
        let a = track_of(&[1.0, 2.0, 4.0, 3.0, 5.0]);
        assert!((series_correlation(&a, &a, DEFAULT_FPS).unwrap() - 1.0).abs() < 1e-12);
        let b = track_of(&[9.0, 8.0, 6.0, 7.0, 5.0]);
        assert!((series_correlation(&a, &b, DEFAULT_FPS).unwrap() + 1.0).abs() < 1e-12);
        assert!(series_correlation(&a, &track_of(&[1.0, 2.0]), DEFAULT_FPS).is_err());
    }

    #[test]
    fn gate_parsing() {
        assert_eq!("auto".parse::<Gate>().unwrap(), Gate::Auto);
        assert_eq!("12.5".parse::<Gate>().unwrap(), Gate::Pixels(12.5));
        assert!("-1".parse::<Gate>().is_err());
    }
}
