//! Validation metrics: log-likelihood-ratio cost and Tippett curves.

use std::f64::consts::LN_10;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::log2_1p_exp;

/// Natural-log likelihood ratios split by ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialSet {
    pub same: Vec<f64>,
    pub diff: Vec<f64>,
}

impl TrialSet {
    pub fn new(same: Vec<f64>, diff: Vec<f64>) -> Result<Self> {
        if same.is_empty() || diff.is_empty() {
            return Err(Error::InsufficientData(format!(
                "need trials of both kinds, got {} same and {} different",
                same.len(),
                diff.len()
            )));
        }
        if same.iter().chain(&diff).any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite log likelihood ratio".into()));
        }
        Ok(TrialSet { same, diff })
    }
}

/// `0.5 * (mean log2(1 + 1/LR_s) + mean log2(1 + LR_d))`.
pub fn compute_cllr(trials: &TrialSet) -> f64 {
    let same = trials.same.iter().map(|&l| log2_1p_exp(-l)).sum::<f64>() / trials.same.len() as f64;
    let diff = trials.diff.iter().map(|&l| log2_1p_exp(l)).sum::<f64>() / trials.diff.len() as f64;
    0.5 * (same + diff)
}

/// Empirical curve as `(log10 LR, proportion)` points at each distinct value.
#[derive(Clone, Debug, PartialEq)]
pub struct TippettCurve {
    pub points: Vec<(f64, f64)>,
    /// `true`: proportion of values `<= x`; `false`: proportion `>= x`.
    pub cumulative: bool,
}

impl TippettCurve {
    fn build(log_lrs: &[f64], cumulative: bool) -> Self {
        let mut v: Vec<f64> = log_lrs.iter().map(|l| l / LN_10).collect();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        let mut points = Vec::new();
        let mut i = 0;
        while i < v.len() {
            let mut j = i;
            while j < v.len() && v[j] == v[i] {
                j += 1;
            }
            let p = if cumulative { j as f64 / n } else { (v.len() - i) as f64 / n };
            points.push((v[i], p));
            i = j;
        }
        TippettCurve { points, cumulative }
    }

    /// Proportion at `x` (log10 units).
    pub fn proportion_at(&self, x: f64) -> f64 {
        if self.cumulative {
            self.points
                .iter()
                .take_while(|(v, _)| *v <= x)
                .last()
                .map_or(0.0, |p| p.1)
        } else {
            self.points
                .iter()
                .find(|(v, _)| *v >= x)
                .map_or(0.0, |p| p.1)
        }
    }

    /// log10 LR where the curve reaches proportion `p`: for the cumulative
    /// curve the smallest such value, for the survival curve the largest.
    pub fn crossing_at(&self, p: f64) -> f64 {
        if self.cumulative {
            self.points
                .iter()
                .find(|(_, q)| *q >= p)
                .map_or(f64::INFINITY, |q| q.0)
        } else {
            self.points
                .iter()
                .rev()
                .find(|(_, q)| *q >= p)
                .map_or(f64::NEG_INFINITY, |q| q.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub system_id: String,
    pub cllr: f64,
    pub n_same: usize,
    pub n_diff: usize,
    pub tippett_same: TippettCurve,
    pub tippett_diff: TippettCurve,
}

pub fn tippett_points(trials: &TrialSet) -> (TippettCurve, TippettCurve) {
    (
        TippettCurve::build(&trials.same, true),
        TippettCurve::build(&trials.diff, false),
    )
}

pub fn validate(system_id: &str, trials: &TrialSet) -> ValidationReport {
    let (tippett_same, tippett_diff) = tippett_points(trials);
    ValidationReport {
        system_id: system_id.to_string(),
        cllr: compute_cllr(trials),
        n_same: trials.same.len(),
        n_diff: trials.diff.len(),
        tippett_same,
        tippett_diff,
    }
}

impl ValidationReport {
    pub fn summary_line(&self) -> String {
        format!("Cllr={:.6} Ns={} Nd={}", self.cllr, self.n_same, self.n_diff)
    }

    pub fn tippett_csv(&self) -> String {
        let mut s = String::from("curve,log10_lr,proportion\n");
        for (name, c) in [("same", &self.tippett_same), ("different", &self.tippett_diff)] {
            for (x, p) in &c.points {
                let _ = writeln!(s, "{name},{x},{p}");
            }
        }
        s
    }

    pub fn write(&self, dir: &Path, trials: &TrialSet) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, body: String| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(p, e))
        };
        put("trials.csv", trials_csv(trials))?;
        put("tippett.csv", self.tippett_csv())?;
        put("tippett.svg", render_tippett_svg(self))?;
        put("summary.txt", self.summary_line() + "\n")
    }
}

pub fn trials_csv(trials: &TrialSet) -> String {
    let mut s = String::from("label,ln_lr,log10_lr\n");
    for (label, values) in [("same", &trials.same), ("different", &trials.diff)] {
        for l in values {
            let _ = writeln!(s, "{label},{l},{}", l / LN_10);
        }
    }
    s
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;

/// Step polylines for both curves with axes, ticks and a legend.
pub fn render_tippett_svg(report: &ValidationReport) -> String {
    let xs = report
        .tippett_same
        .points
        .iter()
        .chain(&report.tippett_diff.points)
        .map(|p| p.0);
    let (mut lo, mut hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        lo = -1.0;
        hi = 1.0;
    }
    lo = (lo - 0.5).floor();
    hi = (hi + 0.5).ceil();
    if hi - lo < 2.0 {
        hi = lo + 2.0;
    }
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - lo) / (hi - lo) * pw;
    let sy = |p: f64| TOP + (1.0 - p) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(s, "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<rect x=\"{LEFT}\" y=\"{TOP}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>"
    );
    let step = ((hi - lo) / 10.0).ceil().max(1.0);
    let mut t = lo;
    while t <= hi + 1e-9 {
        let x = sx(t);
        let _ = writeln!(
            s,
            "<line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"#ccc\"/><text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{t}</text>",
            TOP,
            TOP + ph,
            TOP + ph + 16.0
        );
        t += step;
    }
    for i in 0..=4 {
        let p = i as f64 / 4.0;
        let y = sy(p);
        let _ = writeln!(
            s,
            "<line x1=\"{LEFT}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#ccc\"/><text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{p:.2}</text>",
            LEFT + pw,
            LEFT - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">log10 likelihood ratio</text>",
        LEFT + pw / 2.0,
        HEIGHT - 18.0
    );
    let _ = writeln!(
        s,
        "<text x=\"18\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.2})\">cumulative proportion</text>",
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );

    let polyline = |c: &TippettCurve| -> String {
        let mut pts: Vec<(f64, f64)> = Vec::new();
        if c.cumulative {
            let mut level = 0.0;
            pts.push((lo, 0.0));
            for &(x, p) in &c.points {
                pts.push((x, level));
                pts.push((x, p));
                level = p;
            }
            pts.push((hi, level));
        } else {
            let mut level = 1.0;
            pts.push((lo, 1.0));
            for (i, &(x, p)) in c.points.iter().enumerate() {
                if i > 0 {
                    pts.push((x, level));
                }
                pts.push((x, p));
                level = c.points.get(i + 1).map_or(0.0, |n| n.1);
                pts.push((x, level));
            }
            pts.push((hi, 0.0));
        }
        pts.iter()
            .map(|&(x, p)| format!("{:.2},{:.2}", sx(x), sy(p)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let _ = writeln!(
        s,
        "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"{}\"/>",
        polyline(&report.tippett_same)
    );
    let _ = writeln!(
        s,
        "<polyline fill=\"none\" stroke=\"#d62728\" stroke-width=\"2\" stroke-dasharray=\"6 3\" points=\"{}\"/>",
        polyline(&report.tippett_diff)
    );
    let lx = LEFT + 10.0;
    let ly = TOP + 14.0;
    let _ = writeln!(
        s,
        "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{:.2}\" y2=\"{ly}\" stroke=\"#1f77b4\" stroke-width=\"2\"/><text x=\"{:.2}\" y=\"{:.2}\">same speaker</text>",
        lx + 24.0,
        lx + 30.0,
        ly + 4.0
    );
    let _ = writeln!(
        s,
        "<line x1=\"{lx}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#d62728\" stroke-width=\"2\" stroke-dasharray=\"6 3\"/><text x=\"{:.2}\" y=\"{:.2}\">different speaker</text>",
        ly + 18.0,
        lx + 24.0,
        ly + 18.0,
        lx + 30.0,
        ly + 22.0
    );
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{} {}</text>",
        LEFT + pw - 6.0,
        TOP + 16.0,
        xml_escape(&report.system_id),
        report.summary_line()
    );
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
