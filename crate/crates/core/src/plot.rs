//! Curve data and minimal SVG line plots for a finished run: ECE over the
//! trajectory, the guidance-scale schedule (linear vs sine), and the raw
//! classifier-gradient norm over the trajectory.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::experiment::Experiment;
use crate::io::{csv, parse_csv};
use crate::samplers::SamplerKind;
use crate::schedule::{GuidanceSchedule, ScheduleMode};

/// One named polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// A static line plot: axes, tick labels at the extremes, one polyline per series.
pub fn svg_line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#, W / 2.0, escape(title));
    let (left, right, top, bottom) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
    let _ =
        writeln!(s, r#"<polyline points="{left},{top} {left},{bottom} {right},{bottom}" fill="none" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{left}" y="{}" font-size="11">{}</text>"#, bottom + 16.0, fmt_tick(x0));
    let _ = writeln!(
        s,
        r#"<text x="{right}" y="{}" font-size="11" text-anchor="end">{}</text>"#,
        bottom + 16.0,
        fmt_tick(x1)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{bottom}" font-size="11" text-anchor="end">{}</text>"#,
        left - 4.0,
        fmt_tick(y0)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{}</text>"#,
        left - 4.0,
        top + 4.0,
        fmt_tick(y1)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ =
            writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, coords.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
            right - 150.0,
            top + 14.0 * (i as f64 + 1.0),
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn read_required(run: &Path, name: &str) -> Result<String> {
    let path = run.join(name);
    std::fs::read_to_string(&path).map_err(|e| Error::Format {
        path: path.display().to_string(),
        reason: format!("required input missing or unreadable: {e}"),
    })
}

fn column(header: &[String], name: &str, path: &Path) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Format { path: path.display().to_string(), reason: format!("missing column {name}") })
}

/// The scale schedule of `config` for both modes, with the configured γ for
/// the sine curve.
pub fn schedule_curves(config: &RunConfig) -> Result<(GuidanceSchedule, GuidanceSchedule)> {
    let mut linear = config.clone();
    linear.guidance.schedule = ScheduleMode::Linear;
    let mut sine = config.clone();
    sine.guidance.schedule = ScheduleMode::Sine;
    // The schedule only needs the classifier kind to build; avoid training a network for it.
    linear.classifier.kind = crate::config::ClassifierKind::Bayes;
    sine.classifier.kind = crate::config::ClassifierKind::Bayes;
    Ok((Experiment::build(linear)?.guidance_schedule()?, Experiment::build(sine)?.guidance_schedule()?))
}

/// Reads a run directory and renders `(file name, contents)` pairs.
pub fn plot_files(run: &Path) -> Result<Vec<(String, String)>> {
    if !run.is_dir() {
        return Err(Error::Format { path: run.display().to_string(), reason: "not a run directory".into() });
    }
    let meta = read_required(run, "meta.toml")?;
    let cal_text = read_required(run, "calibration.csv")?;
    let traj_text = read_required(run, "trajectory.csv")?;
    let config = RunConfig::from_toml(&meta)?;

    let cal_path = run.join("calibration.csv");
    let (ch, crows) = parse_csv(&cal_text, &cal_path)?;
    let (ct, cx0, cxt) = (
        column(&ch, "t", &cal_path)?,
        column(&ch, "ece_predicted_x0", &cal_path)?,
        column(&ch, "ece_noisy_sample", &cal_path)?,
    );
    let traj_path = run.join("trajectory.csv");
    let (th, trows) = parse_csv(&traj_text, &traj_path)?;
    let (tt, tg) = (column(&th, "t", &traj_path)?, column(&th, "grad_norm", &traj_path)?);

    let mut files = Vec::new();
    let x0: Vec<(f64, f64)> = crows.iter().map(|r| (r[ct], r[cx0])).collect();
    let xt: Vec<(f64, f64)> = crows.iter().map(|r| (r[ct], r[cxt])).collect();
    files.push((
        "ece_curve.csv".into(),
        csv(
            &["t", "ece_predicted_x0", "ece_noisy_sample"],
            crows.iter().map(|r| vec![fmt(r[ct]), fmt(r[cx0]), fmt(r[cxt])]),
        ),
    ));
    files.push((
        "ece_curve.svg".into(),
        svg_line_plot(
            "ECE along the trajectory",
            "t",
            "ECE_t",
            &[Series { name: "predicted x0".into(), points: x0 }, Series { name: "noisy x_t".into(), points: xt }],
        ),
    ));

    let (linear, sine) = schedule_curves(&config)?;
    let steps = linear.steps();
    let rows: Vec<(usize, f64, f64)> =
        (1..=steps).map(|t| Ok((t, linear.scale_at(t)?, sine.scale_at(t)?))).collect::<Result<_>>()?;
    let step_label = if config.sampler == SamplerKind::Edm { "reverse index" } else { "t" };
    files.push((
        "schedule_curve.csv".into(),
        csv(&["t", "linear", "sine"], rows.iter().map(|(t, l, s)| vec![t.to_string(), fmt(*l), fmt(*s)])),
    ));
    files.push((
        "schedule_curve.svg".into(),
        svg_line_plot(
            "Guidance scale schedule",
            step_label,
            "scale",
            &[
                Series { name: "linear".into(), points: rows.iter().map(|r| (r.0 as f64, r.1)).collect() },
                Series {
                    name: format!("sine (gamma={})", sine.gamma()),
                    points: rows.iter().map(|r| (r.0 as f64, r.2)).collect(),
                },
            ],
        ),
    ));

    let grads: Vec<(f64, f64)> = trows.iter().map(|r| (r[tt], r[tg])).collect();
    files.push(("grad_norm.csv".into(), csv(&["t", "grad_norm"], grads.iter().map(|(t, g)| vec![fmt(*t), fmt(*g)]))));
    files.push((
        "grad_norm.svg".into(),
        svg_line_plot(
            "Classifier gradient norm",
            step_label,
            "mean ||grad||",
            &[Series { name: "grad norm".into(), points: grads }],
        ),
    ));
    Ok(files)
}

fn fmt(v: f64) -> String {
    format!("{v}")
}
