//! Hand-written SVG figures.
//!
//! Coordinates are printed with two decimals and labels with a fixed
//! precision, so identical inputs give identical bytes.

use std::fmt::Write;

use relufair::audit::AuditReport;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A plotting area mapping data ranges onto the page.
struct Canvas {
    body: String,
    x: (f64, f64),
    y: (f64, f64),
}

impl Canvas {
    fn new(title: &str, x: (f64, f64), y: (f64, f64)) -> Self {
        let mut body = String::new();
        let _ = writeln!(
            body,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(body, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(body, r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="15">{}</text>"#, (W - RIGHT + LEFT) / 2.0, esc(title));
        Self { body, x, y }
    }

    fn px(&self, v: f64) -> f64 {
        let (a, b) = self.x;
        LEFT + (v - a) / (b - a) * (W - LEFT - RIGHT)
    }

    fn py(&self, v: f64) -> f64 {
        let (a, b) = self.y;
        H - BOTTOM - (v - a) / (b - a) * (H - TOP - BOTTOM)
    }

    fn axes(&mut self, x_label: &str, y_label: &str, y_ticks: &[(f64, String)]) {
        let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
        let _ = writeln!(self.body, r#"<line x1="{x0:.2}" y1="{y1:.2}" x2="{x1:.2}" y2="{y1:.2}" stroke="black"/>"#);
        let _ = writeln!(self.body, r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x0:.2}" y2="{y1:.2}" stroke="black"/>"#);
        for (v, label) in y_ticks {
            let y = self.py(*v);
            let _ = writeln!(self.body, r##"<line x1="{x0:.2}" y1="{y:.2}" x2="{x1:.2}" y2="{y:.2}" stroke="#dddddd"/>"##);
            let _ = writeln!(self.body, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{label}</text>"#, x0 - 6.0, y + 4.0);
        }
        let _ = writeln!(self.body, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, H - 12.0, esc(x_label));
        let _ = writeln!(
            self.body,
            r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            esc(y_label)
        );
    }

    fn x_tick(&mut self, v: f64, label: &str) {
        let x = self.px(v);
        let _ = writeln!(self.body, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, H - BOTTOM + 18.0, esc(label));
    }

    fn legend(&mut self, names: &[String]) {
        for (i, name) in names.iter().enumerate() {
            let y = TOP + 10.0 + 18.0 * i as f64;
            let x = W - RIGHT + 14.0;
            let _ = writeln!(self.body, r#"<rect x="{x:.2}" y="{:.2}" width="10" height="10" fill="{}"/>"#, y - 9.0, color(i));
            let _ = writeln!(self.body, r#"<text x="{:.2}" y="{y:.2}">{}</text>"#, x + 16.0, esc(name));
        }
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

fn linear_ticks(lo: f64, hi: f64) -> Vec<(f64, String)> {
    (0..=4)
        .map(|k| {
            let v = lo + (hi - lo) * k as f64 / 4.0;
            (v, format!("{v:.3}"))
        })
        .collect()
}

/// Padded range covering every value; a degenerate range is widened to ±1.
fn range(values: impl Iterator<Item = f64>, include_zero: bool) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if include_zero {
        lo = lo.min(0.0);
        hi = hi.max(0.0);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 1.0, hi + 1.0);
    }
    let pad = 0.05 * (hi - lo);
    (if include_zero && lo == 0.0 { 0.0 } else { lo - pad }, hi + pad)
}

/// Bars grouped by category, one colour per series.
pub fn grouped_bars(title: &str, y_label: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    let (_, hi) = range(series.iter().flat_map(|(_, v)| v.iter().copied()), true);
    let mut c = Canvas::new(title, (0.0, categories.len().max(1) as f64), (0.0, hi));
    c.axes("model", y_label, &linear_ticks(0.0, hi));
    let k = series.len().max(1) as f64;
    let slot = 0.8 / k;
    for (i, cat) in categories.iter().enumerate() {
        c.x_tick(i as f64 + 0.5, cat);
        for (s, (_, values)) in series.iter().enumerate() {
            let Some(&v) = values.get(i) else { continue };
            if !v.is_finite() {
                continue;
            }
            let x0 = c.px(i as f64 + 0.1 + slot * s as f64);
            let x1 = c.px(i as f64 + 0.1 + slot * (s + 1) as f64);
            let (y, base) = (c.py(v), c.py(0.0));
            let _ = writeln!(
                c.body,
                r#"<rect x="{x0:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                x1 - x0,
                base - y,
                color(s)
            );
        }
    }
    let names: Vec<String> = series.iter().map(|(n, _)| n.clone()).collect();
    c.legend(&names);
    c.finish()
}

/// One polyline per series over categorical x positions. Missing values
/// break the line.
pub fn line_plot(title: &str, y_label: &str, categories: &[String], series: &[(String, Vec<Option<f64>>)]) -> String {
    let (lo, hi) = range(series.iter().flat_map(|(_, v)| v.iter().flatten().copied()), true);
    let n = categories.len().max(1) as f64;
    let mut c = Canvas::new(title, (-0.5, n - 0.5), (lo, hi));
    c.axes("model", y_label, &linear_ticks(lo, hi));
    for (i, cat) in categories.iter().enumerate() {
        c.x_tick(i as f64, cat);
    }
    for (s, (_, values)) in series.iter().enumerate() {
        let mut runs: Vec<Vec<(f64, f64)>> = vec![Vec::new()];
        for (i, v) in values.iter().enumerate() {
            match v {
                Some(v) if v.is_finite() => runs.last_mut().expect("non-empty").push((c.px(i as f64), c.py(*v))),
                _ => runs.push(Vec::new()),
            }
        }
        for run in runs.iter().filter(|r| !r.is_empty()) {
            let pts: Vec<String> = run.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
            let _ = writeln!(
                c.body,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
                pts.join(" "),
                color(s)
            );
            for (x, y) in run {
                let _ = writeln!(c.body, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{}"/>"#, color(s));
            }
        }
    }
    let names: Vec<String> = series.iter().map(|(n, _)| n.clone()).collect();
    c.legend(&names);
    c.finish()
}

/// Points coloured by series.
pub fn scatter(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let finite = |p: &&(f64, f64)| p.0.is_finite() && p.1.is_finite();
    let x = range(series.iter().flat_map(|(_, v)| v.iter().filter(finite).map(|p| p.0)), false);
    let y = range(series.iter().flat_map(|(_, v)| v.iter().filter(finite).map(|p| p.1)), false);
    let mut c = Canvas::new(title, x, y);
    c.axes(x_label, y_label, &linear_ticks(y.0, y.1));
    for k in 0..=4 {
        let v = x.0 + (x.1 - x.0) * k as f64 / 4.0;
        c.x_tick(v, &format!("{v:.3}"));
    }
    for (s, (_, pts)) in series.iter().enumerate() {
        for p in pts.iter().filter(finite) {
            let _ = writeln!(c.body, r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{}"/>"#, c.px(p.0), c.py(p.1), color(s));
        }
    }
    let names: Vec<String> = series.iter().map(|(n, _)| n.clone()).collect();
    c.legend(&names);
    c.finish()
}

/// Log-log plot of approximation error against segment count.
pub fn rate_plot(title: &str, series: &[(String, Vec<(usize, f64)>)]) -> String {
    let logs: Vec<(String, Vec<(f64, f64)>)> = series
        .iter()
        .map(|(n, pts)| {
            let p = pts
                .iter()
                .filter(|(_, e)| *e > 0.0)
                .map(|&(k, e)| ((k as f64).log10(), e.log10()))
                .collect();
            (n.clone(), p)
        })
        .collect();
    let x = range(logs.iter().flat_map(|(_, v)| v.iter().map(|p| p.0)), false);
    let y = range(logs.iter().flat_map(|(_, v)| v.iter().map(|p| p.1)), false);
    let mut c = Canvas::new(title, x, y);
    let ticks: Vec<(f64, String)> = (y.0.ceil() as i32..=y.1.floor() as i32).map(|k| (k as f64, format!("1e{k}"))).collect();
    c.axes("segments n (log scale)", "error (log scale)", &ticks);
    let ns: std::collections::BTreeSet<usize> = series.iter().flat_map(|(_, p)| p.iter().map(|&(k, _)| k)).collect();
    for k in ns {
        c.x_tick((k as f64).log10(), &k.to_string());
    }
    for (s, (_, pts)) in logs.iter().enumerate() {
        let line: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", c.px(p.0), c.py(p.1))).collect();
        let _ = writeln!(c.body, r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#, line.join(" "), color(s));
        for p in pts {
            let _ = writeln!(c.body, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}"/>"#, c.px(p.0), c.py(p.1), color(s));
        }
    }
    let names: Vec<String> = series.iter().map(|(n, _)| n.clone()).collect();
    c.legend(&names);
    c.finish()
}

/// Relative drop per group along the report's model order, base first.
pub fn drop_series(report: &AuditReport) -> Vec<(String, Vec<Option<f64>>)> {
    report
        .group_names
        .iter()
        .enumerate()
        .map(|(a, g)| (g.clone(), report.models().map(|m| m.relative_drops[a]).collect()))
        .collect()
}

/// The five per-seed figures of an audit, as `(file name, svg)`.
pub fn audit_figures(report: &AuditReport) -> Vec<(String, String)> {
    let models: Vec<String> = report.models().map(|m| m.name.clone()).collect();
    let per_group = |f: &dyn Fn(&relufair::audit::ModelAudit, usize) -> f64| -> Vec<(String, Vec<f64>)> {
        report
            .group_names
            .iter()
            .enumerate()
            .map(|(a, g)| (g.clone(), report.models().map(|m| f(m, a)).collect()))
            .collect()
    };
    let acc = per_group(&|m, a| m.groups[a].accuracy);
    let grad = per_group(&|m, a| m.train_groups[a].grad_norm);
    let points = |f: &dyn Fn(&relufair::audit::GroupMetrics, &relufair::audit::GroupMetrics) -> Option<f64>| -> Vec<(String, Vec<(f64, f64)>)> {
        report
            .group_names
            .iter()
            .enumerate()
            .map(|(a, g)| {
                let pts = report
                    .models()
                    .filter_map(|m| f(&m.groups[a], &m.train_groups[a]).map(|x| (x, m.groups[a].accuracy)))
                    .collect();
                (g.clone(), pts)
            })
            .collect()
    };
    vec![
        ("accuracy.svg".into(), grouped_bars("Accuracy by model and group", "accuracy", &models, &acc)),
        ("grad_norm.svg".into(), grouped_bars("Group gradient norm (train split)", "gradient norm", &models, &grad)),
        (
            "relative_drop.svg".into(),
            line_plot("Relative accuracy drop against base", "drop (%)", &models, &drop_series(report)),
        ),
        (
            "accuracy_vs_grad_norm.svg".into(),
            scatter("Accuracy against gradient norm", "gradient norm", "accuracy", &points(&|_, t| Some(t.grad_norm))),
        ),
        (
            "accuracy_vs_distance.svg".into(),
            scatter(
                "Accuracy against boundary distance",
                "mean boundary distance",
                "accuracy",
                &points(&|e, _| e.mean_boundary_distance),
            ),
        ),
    ]
}
