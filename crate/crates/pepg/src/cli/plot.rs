//! Standalone SVG figures from run CSVs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{PepgError, Result};
use crate::trainers::{RunRecord, RunRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PlotKind {
    /// Exact value (mean ± stderr) next to log-scale stability.
    Curves,
    /// Log-scale stability alone.
    Stability,
    /// Final exact value per group with stderr whiskers.
    SweepBars,
}

/// Runs sharing a label.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub label: String,
    pub runs: Vec<Vec<RunRow>>,
}

/// Cross-run mean and standard error at each iteration present in every run.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

impl Group {
    pub fn band(&self, f: impl Fn(&RunRow) -> f64) -> Band {
        let len = self.runs.iter().map(Vec::len).min().unwrap_or(0);
        let k = self.runs.len() as f64;
        let mut band = Band { x: Vec::with_capacity(len), mean: Vec::with_capacity(len), stderr: Vec::with_capacity(len) };
        for i in 0..len {
            let xs: Vec<f64> = self.runs.iter().map(|r| f(&r[i])).collect();
            let m = xs.iter().sum::<f64>() / k;
            let se = if xs.len() > 1 {
                (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
            } else {
                0.0
            };
            band.x.push(self.runs[0][i].iteration as f64);
            band.mean.push(m);
            band.stderr.push(se);
        }
        band
    }
}

/// Expands `pattern` and groups the CSVs by parent directory name, or by the
/// `algo` column for files without one. Fails with `no inputs` on an empty match.
pub fn load_groups(pattern: &str) -> Result<Vec<Group>> {
    let paths: Vec<PathBuf> = glob::glob(pattern)
        .map_err(|e| PepgError::config("glob", e.to_string()))?
        .filter_map(|p| p.ok())
        .filter(|p| p.is_file())
        .collect();
    if paths.is_empty() {
        return Err(PepgError::config("glob", "no inputs"));
    }
    let mut groups: BTreeMap<String, Vec<Vec<RunRow>>> = BTreeMap::new();
    for path in paths {
        let rows = RunRecord::read_csv(std::fs::File::open(&path)?)
            .map_err(|e| PepgError::config(path.display().to_string(), e.to_string()))?;
        let label = parent_label(&path).or_else(|| rows.first().map(|r| r.algo.clone())).unwrap_or_default();
        groups.entry(label).or_default().push(rows);
    }
    Ok(groups.into_iter().map(|(label, runs)| Group { label, runs }).collect())
}

fn parent_label(path: &Path) -> Option<String> {
    let name = path.parent()?.file_name()?.to_str()?;
    (!name.is_empty() && name != "." && name != "..").then(|| name.to_string())
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const PANEL_W: f64 = 460.0;
const PANEL_H: f64 = 320.0;
const MARGIN: f64 = 60.0;
/// Stability values at or below this are drawn at the floor of the log axis.
const LOG_FLOOR: f64 = 1e-16;

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Axis {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            let v = if log { v.max(LOG_FLOOR).log10() } else { v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if log {
            (lo, hi) = (lo.floor(), hi.ceil());
        }
        if hi - lo < 1e-12 {
            (lo, hi) = (lo - 0.5, hi + 0.5);
        } else if !log {
            let pad = 0.05 * (hi - lo);
            (lo, hi) = (lo - pad, hi + pad);
        }
        Axis { lo, hi, log }
    }

    /// Fraction of the axis covered by `v`, 0 at the bottom.
    fn frac(&self, v: f64) -> f64 {
        let v = if self.log { v.max(LOG_FLOOR).log10() } else { v };
        ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            let step = ((self.hi - self.lo) / 6.0).ceil().max(1.0);
            let mut out = Vec::new();
            let mut e = self.lo;
            while e <= self.hi + 1e-9 {
                out.push((10f64.powf(e), format!("1e{}", e as i64)));
                e += step;
            }
            out
        } else {
            (0..=4)
                .map(|i| {
                    let v = self.lo + (self.hi - self.lo) * i as f64 / 4.0;
                    (v, format!("{v:.3}"))
                })
                .collect()
        }
    }
}

struct Panel {
    ox: f64,
    oy: f64,
}

impl Panel {
    fn px(&self, frac_x: f64) -> f64 {
        self.ox + MARGIN + frac_x * (PANEL_W - MARGIN - 10.0)
    }
    fn py(&self, frac_y: f64) -> f64 {
        self.oy + PANEL_H - MARGIN + -frac_y * (PANEL_H - MARGIN - 30.0)
    }
}

fn frame(svg: &mut String, p: &Panel, title: &str, ylabel: &str, xr: (f64, f64), y: &Axis) {
    let (x0, x1, y0, y1) = (p.px(0.0), p.px(1.0), p.py(0.0), p.py(1.0));
    let _ = writeln!(svg, r##"<rect x="{x0:.1}" y="{y1:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#333"/>"##, x1 - x0, y0 - y1);
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="14">{}</text>"#, (x0 + x1) / 2.0, p.oy + 20.0, escape(title));
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">iteration</text>"#, (x0 + x1) / 2.0, y0 + 38.0);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12" transform="rotate(-90 {:.1} {:.1})">{}</text>"#,
        p.ox + 14.0, (y0 + y1) / 2.0, p.ox + 14.0, (y0 + y1) / 2.0, escape(ylabel)
    );
    for (v, label) in y.ticks() {
        let yy = p.py(y.frac(v));
        let _ = writeln!(svg, r##"<line x1="{x0:.1}" y1="{yy:.1}" x2="{x1:.1}" y2="{yy:.1}" stroke="#ddd"/>"##);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{label}</text>"#, x0 - 4.0, yy + 3.0);
    }
    for i in 0..=4 {
        let v = xr.0 + (xr.1 - xr.0) * i as f64 / 4.0;
        let xx = p.px(i as f64 / 4.0);
        let _ = writeln!(svg, r#"<text x="{xx:.1}" y="{:.1}" text-anchor="middle" font-size="10">{v:.0}</text>"#, y0 + 14.0);
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn series(svg: &mut String, p: &Panel, band: &Band, xr: (f64, f64), y: &Axis, color: &str) {
    if band.x.is_empty() {
        return;
    }
    let fx = |x: f64| p.px(if xr.1 > xr.0 { (x - xr.0) / (xr.1 - xr.0) } else { 0.5 });
    if band.stderr.iter().any(|&s| s > 0.0) {
        let mut pts = String::new();
        for i in 0..band.x.len() {
            let _ = write!(pts, "{:.2},{:.2} ", fx(band.x[i]), p.py(y.frac(band.mean[i] + band.stderr[i])));
        }
        for i in (0..band.x.len()).rev() {
            let _ = write!(pts, "{:.2},{:.2} ", fx(band.x[i]), p.py(y.frac(band.mean[i] - band.stderr[i])));
        }
        let _ = writeln!(svg, r#"<polygon class="band" points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, pts.trim_end());
    }
    let pts: Vec<String> =
        band.x.iter().zip(&band.mean).map(|(&x, &m)| format!("{:.2},{:.2}", fx(x), p.py(y.frac(m)))).collect();
    let _ = writeln!(svg, r#"<polyline class="mean" points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, pts.join(" "));
}

fn legend(svg: &mut String, groups: &[Group], x: f64, y: f64) {
    for (i, g) in groups.iter().enumerate() {
        let yy = y + 16.0 * i as f64;
        let c = PALETTE[i % PALETTE.len()];
        let _ = writeln!(svg, r#"<rect x="{x:.1}" y="{:.1}" width="12" height="4" fill="{c}"/>"#, yy - 4.0);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{yy:.1}" font-size="11">{} (n={})</text>"#, x + 16.0, escape(&g.label), g.runs.len());
    }
}

fn open(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

fn line_panel(svg: &mut String, p: &Panel, bands: &[Band], title: &str, ylabel: &str, log: bool) {
    let xs = bands.iter().flat_map(|b| b.x.iter().copied());
    let xr = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    let xr = if xr.0.is_finite() { xr } else { (0.0, 1.0) };
    let ys = bands.iter().flat_map(|b| {
        b.mean.iter().zip(&b.stderr).flat_map(|(m, s)| [m - s, m + s]).collect::<Vec<_>>()
    });
    let axis = Axis::fit(ys, log);
    frame(svg, p, title, ylabel, xr, &axis);
    for (i, band) in bands.iter().enumerate() {
        series(svg, p, band, xr, &axis, PALETTE[i % PALETTE.len()]);
    }
}

/// Renders one figure.
pub fn render(kind: PlotKind, groups: &[Group]) -> String {
    let legend_h = 16.0 * groups.len() as f64 + 10.0;
    match kind {
        PlotKind::Curves => {
            let mut svg = open(2.0 * PANEL_W, PANEL_H + legend_h);
            let values: Vec<Band> = groups.iter().map(|g| g.band(|r| r.exact_value)).collect();
            let stab: Vec<Band> = groups.iter().map(|g| g.band(|r| r.stability_l2)).collect();
            line_panel(&mut svg, &Panel { ox: 0.0, oy: 0.0 }, &values, "performative value", "exact value", false);
            line_panel(&mut svg, &Panel { ox: PANEL_W, oy: 0.0 }, &stab, "stability", "occupancy shift (log)", true);
            legend(&mut svg, groups, MARGIN, PANEL_H + 8.0);
            svg + "</svg>\n"
        }
        PlotKind::Stability => {
            let mut svg = open(PANEL_W, PANEL_H + legend_h);
            let stab: Vec<Band> = groups.iter().map(|g| g.band(|r| r.stability_l2)).collect();
            line_panel(&mut svg, &Panel { ox: 0.0, oy: 0.0 }, &stab, "stability", "occupancy shift (log)", true);
            legend(&mut svg, groups, MARGIN, PANEL_H + 8.0);
            svg + "</svg>\n"
        }
        PlotKind::SweepBars => {
            let w = (MARGIN + 70.0 * groups.len() as f64 + 20.0).max(PANEL_W);
            let mut svg = open(w, PANEL_H + 60.0);
            let finals: Vec<(f64, f64)> = groups
                .iter()
                .map(|g| {
                    let b = g.band(|r| r.exact_value);
                    b.mean.last().copied().zip(b.stderr.last().copied()).unwrap_or((f64::NAN, 0.0))
                })
                .collect();
            let axis = Axis::fit(finals.iter().flat_map(|(m, s)| [m - s, m + s, 0.0]), false);
            let p = Panel { ox: 0.0, oy: 0.0 };
            let (top, bottom) = (p.py(1.0), p.py(0.0));
            let _ = writeln!(svg, r##"<rect x="{MARGIN:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#333"/>"##, w - MARGIN - 10.0, bottom - top);
            let _ = writeln!(svg, r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">final performative value</text>"#, w / 2.0);
            for (v, label) in axis.ticks() {
                let yy = p.py(axis.frac(v));
                let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{label}</text>"#, MARGIN - 4.0, yy + 3.0);
            }
            let zero = p.py(axis.frac(0.0));
            for (i, (g, &(m, s))) in groups.iter().zip(&finals).enumerate() {
                let x = MARGIN + 20.0 + 70.0 * i as f64;
                let ym = p.py(axis.frac(m));
                let c = PALETTE[i % PALETTE.len()];
                let _ = writeln!(svg, r#"<rect class="bar" x="{x:.1}" y="{:.1}" width="40" height="{:.1}" fill="{c}"/>"#, ym.min(zero), (zero - ym).abs());
                if s > 0.0 {
                    let (hi, lo) = (p.py(axis.frac(m + s)), p.py(axis.frac(m - s)));
                    let _ = writeln!(svg, r##"<line x1="{:.1}" y1="{hi:.1}" x2="{:.1}" y2="{lo:.1}" stroke="#000"/>"##, x + 20.0, x + 20.0);
                }
                let _ = writeln!(
                    svg,
                    r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10" transform="rotate(-45 {:.1} {:.1})">{}</text>"#,
                    x + 20.0, bottom + 12.0, x + 20.0, bottom + 12.0, escape(&g.label)
                );
            }
            svg + "</svg>\n"
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(seed: u64, values: &[f64]) -> Vec<RunRow> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| RunRow {
                iteration: i,
                seed,
                algo: "pepg".into(),
                mc_return: v,
                exact_value: v,
                stability_l2: 10f64.powi(-(i as i32)),
                grad_norm: 0.0,
                wall_ms: 0.0,
            })
            .collect()
    }

    #[test]
    fn band_statistics() {
        let g = Group { label: "a".into(), runs: vec![run(0, &[1.0, 2.0]), run(1, &[3.0, 2.0])] };
        let b = g.band(|r| r.exact_value);
        assert_eq!(b.mean, vec![2.0, 2.0]);
        // sd = √2, stderr = √2/√2 = 1
        assert!((b.stderr[0] - 1.0).abs() < 1e-12);
        assert_eq!(b.stderr[1], 0.0);
    }

    #[test]
    fn single_run_has_no_band() {
        let g = [Group { label: "solo".into(), runs: vec![run(0, &[0.0, 1.0, 0.5])] }];
        let svg = render(PlotKind::Curves, &g);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("class=\"mean\"").count(), 2);
        assert!(!svg.contains("class=\"band\""));
    }

    #[test]
    fn multiple_seeds_draw_bands_and_bars() {
        let g = [
            Group { label: "a".into(), runs: vec![run(0, &[0.0, 1.0]), run(1, &[0.2, 1.4])] },
            Group { label: "b<c".into(), runs: vec![run(0, &[0.5, 0.5]), run(1, &[0.1, 0.7])] },
        ];
        let curves = render(PlotKind::Curves, &g);
        // Stability is seed-independent in this fixture, so only the value panel has bands.
        assert_eq!(curves.matches("class=\"band\"").count(), 2);
        assert!(curves.contains("b&lt;c"));
        assert!(render(PlotKind::Stability, &g).contains("1e-1"));
        assert_eq!(render(PlotKind::SweepBars, &g).matches("class=\"bar\"").count(), 2);
    }

    #[test]
    fn log_axis_clamps_zero() {
        let a = Axis::fit([0.0, 1e-3, 1.0].into_iter(), true);
        assert_eq!((a.lo, a.hi), (-16.0, 0.0));
        assert_eq!(a.frac(0.0), 0.0);
    }

    #[test]
    fn empty_glob_reports_no_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let pattern = format!("{}/*.csv", dir.path().display());
        let err = load_groups(&pattern).unwrap_err();
        assert!(err.to_string().contains("no inputs"));
    }
}
