//! Figures: precision-recall curves, class imbalance bars and the frozen-area
//! series. Every figure writes `<out>.png`, a `<out>.csv` sidecar holding the
//! plotted values and a `<out>.json` manifest.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use chrono::NaiveDate;
use clap::ValueEnum;
use glacio::fsio;
use plotters::prelude::*;
use serde_json::json;

use crate::CliError;

const WIDTH: u32 = 800;
const HEIGHT: u32 = 500;
const FONT_PATHS: [&str; 3] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
];
const COLORS: [RGBColor; 6] = [
    RGBColor(0x33, 0x33, 0x33),
    RGBColor(0x1f, 0x4e, 0xd8),
    RGBColor(0x10, 0xa8, 0xb8),
    RGBColor(0x9a, 0x6a, 0xd0),
    RGBColor(0xd8, 0x2a, 0x2a),
    RGBColor(0x2a, 0x9a, 0x3a),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Artifact {
    /// Precision-recall curves, one per class (`pr.csv`).
    Pr,
    /// Ground-truth class frequencies (`class_frequencies.csv`).
    Imbalance,
    /// Raw and smoothed frozen fraction with gap spans (`series.csv`).
    Series,
}

/// Registers a system sans-serif font once. Without one, figures are drawn
/// without text.
fn have_font() -> bool {
    static FONT: OnceLock<bool> = OnceLock::new();
    *FONT.get_or_init(|| {
        let custom = std::env::var_os("GLACIO_FONT").map(PathBuf::from);
        let candidates = custom.into_iter().chain(FONT_PATHS.iter().map(PathBuf::from));
        for p in candidates {
            if let Ok(bytes) = std::fs::read(&p) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        log::warn!("no usable font found; figures are drawn without labels");
        false
    })
}

fn draw_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::runtime(format!("plot rendering failed: {e}"))
}

struct Table {
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path, required: &[&str]) -> Result<Table, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = r
        .headers()
        .map_err(|e| CliError::config(format!("{}: row 1: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut idx = Vec::new();
    for name in required {
        idx.push(headers.iter().position(|h| h == name).ok_or_else(|| {
            CliError::config(format!("{}: missing column `{name}`", path.display()))
        })?);
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::config(format!("{}: row {}: {e}", path.display(), i + 2)))?;
        rows.push(idx.iter().map(|&j| rec.get(j).unwrap_or("").to_string()).collect());
    }
    Ok(Table { rows })
}

fn number(path: &Path, row: usize, col: &str, raw: &str) -> Result<f64, CliError> {
    raw.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| CliError::config(format!("{}: row {row}: invalid {col} `{raw}`", path.display())))
}

fn parse_date(raw: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(raw, "%Y-%m-%d")
        .or_else(|_| NaiveDate::parse_from_str(raw, "%d.%m.%y"))
        .ok()
}

fn sidecar_csv(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = headers.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

fn write_outputs(out: &Path, pixels: Vec<u8>, sidecar: String, manifest: serde_json::Value) -> Result<(), CliError> {
    let img = image::RgbImage::from_raw(WIDTH, HEIGHT, pixels).expect("buffer size");
    fsio::write_atomic(out, &glacio::dataset::encode_png(&img)?)?;
    fsio::write_atomic(&out.with_extension("csv"), sidecar.as_bytes())?;
    fsio::write_json(&out.with_extension("json"), &manifest)?;
    Ok(())
}

pub fn run(artifact: &Artifact, input: &Path, out: &Path) -> Result<(), CliError> {
    if out.extension().is_none_or(|e| e != "png") {
        return Err(CliError::config(format!("{}: plot output must end in .png", out.display())));
    }
    match artifact {
        Artifact::Pr => plot_pr(input, out),
        Artifact::Imbalance => plot_imbalance(input, out),
        Artifact::Series => plot_series(input, out),
    }
}

fn plot_pr(input: &Path, out: &Path) -> Result<(), CliError> {
    let t = read_table(input, &["class", "threshold", "precision", "recall"])?;
    let mut curves: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    let mut rows = Vec::new();
    for (i, r) in t.rows.iter().enumerate() {
        let row = i + 2;
        let thr = number(input, row, "threshold", &r[1])?;
        let p = number(input, row, "precision", &r[2])?;
        let rc = number(input, row, "recall", &r[3])?;
        match curves.iter_mut().find(|(c, _)| *c == r[0]) {
            Some((_, pts)) => pts.push((rc, p)),
            None => curves.push((r[0].clone(), vec![(rc, p)])),
        }
        rows.push(vec![r[0].clone(), thr.to_string(), p.to_string(), rc.to_string()]);
    }
    let text = have_font();
    let mut buf = vec![255u8; (WIDTH * HEIGHT * 3) as usize];
    {
        let root = BitMapBackend::with_buffer(&mut buf, (WIDTH, HEIGHT)).into_drawing_area();
        let mut builder = ChartBuilder::on(&root);
        builder.margin(20);
        if text {
            builder
                .caption("Precision-recall", ("sans-serif", 22))
                .x_label_area_size(40)
                .y_label_area_size(50);
        }
        let mut chart = builder.build_cartesian_2d(0f64..1f64, 0f64..1.02f64).map_err(draw_err)?;
        let mut mesh = chart.configure_mesh();
        if text {
            mesh.x_desc("Recall").y_desc("Precision");
        } else {
            mesh.x_labels(0).y_labels(0);
        }
        mesh.draw().map_err(draw_err)?;
        for (i, (name, pts)) in curves.iter().enumerate() {
            let color = COLORS[(i + 1) % COLORS.len()];
            let series = chart
                .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
                .map_err(draw_err)?;
            if text {
                series
                    .label(name.as_str())
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
            }
        }
        if text {
            chart
                .configure_series_labels()
                .position(SeriesLabelPosition::LowerLeft)
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(draw_err)?;
        }
        root.present().map_err(draw_err)?;
    }
    let manifest = json!({
        "kind": "pr",
        "input": input.display().to_string(),
        "classes": curves.iter().map(|(c, _)| c.clone()).collect::<Vec<_>>(),
        "points": rows.len(),
    });
    write_outputs(out, buf, sidecar_csv(&["class", "threshold", "precision", "recall"], &rows), manifest)
}

fn plot_imbalance(input: &Path, out: &Path) -> Result<(), CliError> {
    let t = read_table(input, &["class", "frequency"])?;
    let mut bars = Vec::new();
    for (i, r) in t.rows.iter().enumerate() {
        let f = number(input, i + 2, "frequency", &r[1])?;
        if f < 0.0 {
            return Err(CliError::config(format!("{}: row {}: negative frequency", input.display(), i + 2)));
        }
        bars.push((r[0].clone(), f));
    }
    if bars.is_empty() {
        return Err(CliError::config(format!("{}: no rows", input.display())));
    }
    let top = bars.iter().map(|b| b.1).fold(0.0, f64::max).max(1e-9) * 1.1;
    let n = bars.len();
    let text = have_font();
    let mut buf = vec![255u8; (WIDTH * HEIGHT * 3) as usize];
    {
        let root = BitMapBackend::with_buffer(&mut buf, (WIDTH, HEIGHT)).into_drawing_area();
        let mut builder = ChartBuilder::on(&root);
        builder.margin(20);
        if text {
            builder
                .caption("Class frequencies (ground truth)", ("sans-serif", 22))
                .x_label_area_size(40)
                .y_label_area_size(60);
        }
        let mut chart = builder.build_cartesian_2d(0f64..n as f64, 0f64..top).map_err(draw_err)?;
        let names: Vec<String> = bars.iter().map(|b| b.0.clone()).collect();
        let fmt = move |x: &f64| {
            let i = x.floor() as usize;
            if (x - i as f64 - 0.5).abs() < 1e-6 {
                names.get(i).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        };
        let mut mesh = chart.configure_mesh();
        mesh.disable_x_mesh();
        if text {
            mesh.x_labels(2 * n + 1).x_label_formatter(&fmt).y_desc("Frequency");
        } else {
            mesh.x_labels(0).y_labels(0);
        }
        mesh.draw().map_err(draw_err)?;
        chart
            .draw_series(bars.iter().enumerate().map(|(i, (_, f))| {
                Rectangle::new([(i as f64 + 0.15, 0.0), (i as f64 + 0.85, *f)], COLORS[i % COLORS.len()].filled())
            }))
            .map_err(draw_err)?;
        root.present().map_err(draw_err)?;
    }
    let rows: Vec<Vec<String>> = bars.iter().map(|(c, f)| vec![c.clone(), f.to_string()]).collect();
    let manifest = json!({
        "kind": "imbalance",
        "input": input.display().to_string(),
        "classes": bars.iter().map(|b| b.0.clone()).collect::<Vec<_>>(),
    });
    write_outputs(out, buf, sidecar_csv(&["class", "frequency"], &rows), manifest)
}

/// Inclusive runs of consecutive gap days.
pub fn gap_spans(days: &[(NaiveDate, bool)]) -> Vec<(NaiveDate, NaiveDate)> {
    let mut spans: Vec<(NaiveDate, NaiveDate)> = Vec::new();
    for &(d, gap) in days {
        if !gap {
            continue;
        }
        match spans.last_mut() {
            Some((_, end)) if *end + chrono::Duration::days(1) == d => *end = d,
            _ => spans.push((d, d)),
        }
    }
    spans
}

fn plot_series(input: &Path, out: &Path) -> Result<(), CliError> {
    let t = read_table(
        input,
        &["date", "frozen_fraction_raw", "frozen_fraction_smoothed", "n_frames"],
    )?;
    // (date, raw, smoothed); gap rows have no values.
    let mut days: Vec<(NaiveDate, Option<f64>, Option<f64>)> = Vec::new();
    for (i, r) in t.rows.iter().enumerate() {
        let row = i + 2;
        let d = parse_date(r[0].trim())
            .ok_or_else(|| CliError::config(format!("{}: row {row}: invalid date `{}`", input.display(), r[0])))?;
        if let Some((prev, ..)) = days.last() {
            if d <= *prev {
                return Err(CliError::config(format!("{}: row {row}: dates not increasing", input.display())));
            }
        }
        let opt = |col: &str, raw: &str| -> Result<Option<f64>, CliError> {
            if raw.trim().is_empty() {
                Ok(None)
            } else {
                number(input, row, col, raw).map(Some)
            }
        };
        days.push((d, opt("frozen_fraction_raw", &r[1])?, opt("frozen_fraction_smoothed", &r[2])?));
    }
    let Some(&(first, ..)) = days.first() else {
        return Err(CliError::config(format!("{}: no rows", input.display())));
    };
    let last = days.last().unwrap().0;
    let x = |d: NaiveDate| (d - first).num_days() as f64;
    let span_days = x(last).max(1.0);
    let spans = gap_spans(&days.iter().map(|(d, raw, _)| (*d, raw.is_none())).collect::<Vec<_>>());

    let text = have_font();
    let mut buf = vec![255u8; (WIDTH * HEIGHT * 3) as usize];
    {
        let root = BitMapBackend::with_buffer(&mut buf, (WIDTH, HEIGHT)).into_drawing_area();
        let mut builder = ChartBuilder::on(&root);
        builder.margin(20);
        if text {
            builder
                .caption("Frozen lake area", ("sans-serif", 22))
                .x_label_area_size(40)
                .y_label_area_size(50);
        }
        let mut chart = builder
            .build_cartesian_2d(-0.5f64..span_days + 0.5, 0f64..1.02f64)
            .map_err(draw_err)?;
        let fmt = move |v: &f64| (first + chrono::Duration::days(v.round() as i64)).format("%d.%m.%y").to_string();
        let mut mesh = chart.configure_mesh();
        if text {
            mesh.x_labels(8).x_label_formatter(&fmt).y_desc("Frozen fraction");
        } else {
            mesh.x_labels(0).y_labels(0);
        }
        mesh.draw().map_err(draw_err)?;
        chart
            .draw_series(spans.iter().map(|(a, b)| {
                Rectangle::new([(x(*a) - 0.5, 0.0), (x(*b) + 0.5, 1.02)], RED.mix(0.3).filled())
            }))
            .map_err(draw_err)?;
        // Lines break at gaps.
        for (col, color, label) in [(1usize, COLORS[2], "raw"), (2, COLORS[1], "smoothed")] {
            let mut segments: Vec<Vec<(f64, f64)>> = vec![Vec::new()];
            for (d, raw, sm) in &days {
                match if col == 1 { raw } else { sm } {
                    Some(v) => segments.last_mut().unwrap().push((x(*d), *v)),
                    None => segments.push(Vec::new()),
                }
            }
            for (k, seg) in segments.into_iter().filter(|s| !s.is_empty()).enumerate() {
                let s = chart
                    .draw_series(LineSeries::new(seg, color.stroke_width(2)))
                    .map_err(draw_err)?;
                if text && k == 0 {
                    s.label(label)
                        .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
                }
            }
        }
        if text {
            chart
                .configure_series_labels()
                .position(SeriesLabelPosition::UpperRight)
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(draw_err)?;
        }
        root.present().map_err(draw_err)?;
    }
    let fmt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let rows: Vec<Vec<String>> = days
        .iter()
        .map(|(d, raw, sm)| vec![d.format("%Y-%m-%d").to_string(), fmt(*raw), fmt(*sm)])
        .collect();
    let manifest = json!({
        "kind": "series",
        "input": input.display().to_string(),
        "first_date": first.format("%Y-%m-%d").to_string(),
        "last_date": last.format("%Y-%m-%d").to_string(),
        "gap_spans": spans
            .iter()
            .map(|(a, b)| [a.format("%Y-%m-%d").to_string(), b.format("%Y-%m-%d").to_string()])
            .collect::<Vec<_>>(),
    });
    write_outputs(
        out,
        buf,
        sidecar_csv(&["date", "frozen_fraction_raw", "frozen_fraction_smoothed"], &rows),
        manifest,
    )
}
