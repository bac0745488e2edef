//! Standalone SVG line charts of a run's metric curves, read back from its
//! metrics.csv.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};

struct Series {
    label: &'static str,
    color: &'static str,
    points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 300.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 28.0;
const MARGIN_B: f64 = 36.0;

fn panel(title: &str, series: &[Series], y_offset: f64) -> String {
    let mut out = String::new();
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let ys: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).collect();
    if xs.is_empty() {
        return out;
    }
    let (x_min, x_max) = (
        xs.iter().cloned().fold(f64::INFINITY, f64::min),
        xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let (mut y_min, mut y_max) = (
        ys.iter().cloned().fold(f64::INFINITY, f64::min),
        ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    if (y_max - y_min).abs() < 1e-12 {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let sx = |x: f64| MARGIN_L + (x - x_min) / (x_max - x_min).max(1e-12) * plot_w;
    let sy = |y: f64| y_offset + MARGIN_T + plot_h - (y - y_min) / (y_max - y_min) * plot_h;

    writeln!(
        out,
        r#"<text x="{}" y="{}" font-size="14" font-family="sans-serif" font-weight="bold">{title}</text>"#,
        MARGIN_L,
        y_offset + 18.0
    )
    .unwrap();
    // axes
    writeln!(
        out,
        r##"<rect x="{}" y="{}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#888"/>"##,
        MARGIN_L,
        y_offset + MARGIN_T
    )
    .unwrap();
    for (v, anchor_y) in [(y_max, y_offset + MARGIN_T + 12.0), (y_min, y_offset + MARGIN_T + plot_h)] {
        writeln!(
            out,
            r#"<text x="{}" y="{anchor_y}" font-size="11" font-family="sans-serif" text-anchor="end">{v:.4}</text>"#,
            MARGIN_L - 6.0
        )
        .unwrap();
    }
    for (v, anchor_x) in [(x_min, MARGIN_L), (x_max, MARGIN_L + plot_w)] {
        writeln!(
            out,
            r#"<text x="{anchor_x}" y="{}" font-size="11" font-family="sans-serif" text-anchor="middle">{v:.0}</text>"#,
            y_offset + MARGIN_T + plot_h + 16.0
        )
        .unwrap();
    }
    writeln!(
        out,
        r#"<text x="{}" y="{}" font-size="11" font-family="sans-serif" text-anchor="middle">epoch</text>"#,
        MARGIN_L + plot_w / 2.0,
        y_offset + MARGIN_T + plot_h + 30.0
    )
    .unwrap();
    // series
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        writeln!(
            out,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.8" points="{}"/>"#,
            s.color,
            pts.join(" ")
        )
        .unwrap();
        let lx = MARGIN_L + plot_w - 120.0;
        let ly = y_offset + MARGIN_T + 16.0 + i as f64 * 16.0;
        writeln!(
            out,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{}" stroke-width="1.8"/>"#,
            lx + 18.0,
            s.color
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="11" font-family="sans-serif">{}</text>"#,
            lx + 24.0,
            ly + 4.0,
            s.label
        )
        .unwrap();
    }
    out
}

/// Reads `metrics.csv` in a run directory and writes `metrics.svg` next to
/// it: loss curves on top, the validation metric below.
pub fn plot_run(run_dir: &Path) -> Result<std::path::PathBuf> {
    let csv_path = run_dir.join("metrics.csv");
    let text = std::fs::read_to_string(&csv_path)
        .with_context(|| format!("reading {}", csv_path.display()))?;
    let mut train_loss = Vec::new();
    let mut val_loss = Vec::new();
    let mut val_metric = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 4 {
            bail!("malformed metrics.csv line {}", i + 1);
        }
        let epoch: f64 = cols[0].parse().context("epoch column")?;
        let loss: f64 = cols[2].parse().context("loss column")?;
        let metric: f64 = cols[3].parse().context("metric column")?;
        match cols[1] {
            "train" => train_loss.push((epoch, loss)),
            "val" => {
                val_loss.push((epoch, loss));
                val_metric.push((epoch, metric));
            }
            other => bail!("unknown split '{other}' in metrics.csv"),
        }
    }
    if train_loss.is_empty() && val_loss.is_empty() {
        bail!("metrics.csv holds no epochs");
    }
    let mut svg = String::new();
    let total_h = HEIGHT * 2.0;
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{total_h}" viewBox="0 0 {WIDTH} {total_h}">"#
    )?;
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
    svg.push_str(&panel(
        "loss",
        &[
            Series {
                label: "train",
                color: "#1f77b4",
                points: train_loss,
            },
            Series {
                label: "validation",
                color: "#d62728",
                points: val_loss,
            },
        ],
        0.0,
    ));
    svg.push_str(&panel(
        "validation metric",
        &[Series {
            label: "validation",
            color: "#2ca02c",
            points: val_metric,
        }],
        HEIGHT,
    ));
    writeln!(svg, "</svg>")?;
    let out = run_dir.join("metrics.svg");
    std::fs::write(&out, svg)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plots_a_small_csv() {
        let dir = std::env::temp_dir().join(format!("maw_plot_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(
            dir.join("metrics.csv"),
            "epoch,split,loss,metric,cum_seconds,t_base,t_feat,t_attn,t_meta\n\
             1,train,1.0,1.0,0,0,0,0,0\n1,val,0.9,0.9,0,0,0,0,0\n\
             2,train,0.8,0.8,0,0,0,0,0\n2,val,0.7,0.7,0,0,0,0,0\n",
        )
        .unwrap();
        let svg = plot_run(&dir).unwrap();
        let body = std::fs::read_to_string(svg).unwrap();
        assert!(body.starts_with("<svg"));
        assert!(body.contains("polyline"));
        std::fs::remove_dir_all(&dir).ok();
    }
}
