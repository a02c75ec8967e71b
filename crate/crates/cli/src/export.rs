//! Result files: aggregate CSV tables and hand-rolled SVG charts.
//!
//! Everything here is a pure function of a [`SweepSummary`]; re-exporting
//! from the same run CSVs always reproduces byte-identical files. The SVGs
//! are written directly (no plotting dependency): a line chart of mean
//! validation curves and a box plot of per-run wall times.

use crate::aggregate::{GroupSummary, SweepSummary};
use lpattn_core::error::{Error, Result};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// tab10: visually distinct line/box colors, reused cyclically.
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

const CHART_W: f64 = 760.0;
const CHART_H: f64 = 480.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 120.0; // room for the legend
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 48.0;

fn esc(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Trim a tick label like 2.5000 to 2.5 (and 2.0 to 2).
fn tick_label(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// All groups must share one evaluation grid for the cross-p tables.
fn shared_grid(summary: &SweepSummary) -> Result<&[usize]> {
    let first = summary
        .groups
        .first()
        .ok_or_else(|| Error::Aggregation("nothing to export: no groups".into()))?;
    for g in &summary.groups[1..] {
        if g.iters != first.iters {
            return Err(Error::Aggregation(format!(
                "groups '{}' and '{}' were evaluated on different iteration \
                 grids; cannot tabulate curves side by side",
                first.label(),
                g.label()
            )));
        }
    }
    Ok(&first.iters)
}

/// `curves_by_p.csv`: the mean validation curve of every group, one column
/// per group, on the shared iteration grid.
pub fn curves_by_p_csv(summary: &SweepSummary) -> Result<String> {
    let grid = shared_grid(summary)?;
    let mut out = String::from("iter");
    for g in &summary.groups {
        write!(out, ",{}", g.label()).unwrap();
    }
    out.push('\n');
    for (row, &iter) in grid.iter().enumerate() {
        write!(out, "{iter}").unwrap();
        for g in &summary.groups {
            write!(out, ",{:.6}", g.mean_val[row]).unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

/// `fold_<i>_curves.csv`: per-fold validation curves, one file per fold,
/// with a column for every group that ran that fold.
pub fn fold_curves_csv(summary: &SweepSummary, fold: usize) -> Result<Option<String>> {
    let grid = shared_grid(summary)?;
    let columns: Vec<(&GroupSummary, usize)> = summary
        .groups
        .iter()
        .filter_map(|g| {
            g.folds
                .iter()
                .position(|f| f.fold == fold)
                .map(|idx| (g, idx))
        })
        .collect();
    if columns.is_empty() {
        return Ok(None);
    }
    let mut out = String::from("iter");
    for (g, _) in &columns {
        write!(out, ",{}", g.label()).unwrap();
    }
    out.push('\n');
    for (row, &iter) in grid.iter().enumerate() {
        write!(out, "{iter}").unwrap();
        for (g, idx) in &columns {
            write!(out, ",{:.6}", g.folds[*idx].val[row]).unwrap();
        }
        out.push('\n');
    }
    Ok(Some(out))
}

/// `min_loss_table.csv`: the headline result — minimum of the mean
/// validation curve per group, with the iteration where it occurs.
pub fn min_loss_table_csv(summary: &SweepSummary) -> String {
    let mut out = String::from("p,averaged_min,argmin_iter\n");
    for g in &summary.groups {
        writeln!(out, "{},{:.6},{}", g.label(), g.averaged_min, g.argmin_iter).unwrap();
    }
    out
}

/// `fold_min_table.csv`: the companion statistic — mean of per-fold minima.
pub fn fold_min_table_csv(summary: &SweepSummary) -> String {
    let mut out = String::from("p,mean_fold_min\n");
    for g in &summary.groups {
        writeln!(out, "{},{:.6}", g.label(), g.mean_fold_min).unwrap();
    }
    out
}

/// `runtime_stats.csv`: wall-time five-number summary per group; outliers
/// are semicolon-separated inside the final cell.
pub fn runtime_stats_csv(summary: &SweepSummary) -> String {
    let mut out = String::from("p,mean,median,q1,q3,whisker_lo,whisker_hi,outliers\n");
    for g in &summary.groups {
        let r = &g.runtime;
        let outliers = r
            .outliers
            .iter()
            .map(|v| format!("{v:.3}"))
            .collect::<Vec<_>>()
            .join(";");
        writeln!(
            out,
            "{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{}",
            g.label(),
            r.mean,
            r.median,
            r.q1,
            r.q3,
            r.whisker_lo,
            r.whisker_hi,
            outliers
        )
        .unwrap();
    }
    out
}

/// Linear map from data space to pixel space (y measured downward).
struct Scale {
    min: f64,
    max: f64,
    lo_px: f64,
    hi_px: f64,
}

impl Scale {
    fn new(min: f64, max: f64, lo_px: f64, hi_px: f64) -> Scale {
        let (min, max) = if (max - min).abs() < 1e-12 {
            (min - 0.5, max + 0.5)
        } else {
            (min, max)
        };
        Scale {
            min,
            max,
            lo_px,
            hi_px,
        }
    }

    fn px(&self, v: f64) -> f64 {
        self.lo_px + (v - self.min) / (self.max - self.min) * (self.hi_px - self.lo_px)
    }

    fn ticks(&self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| self.min + (self.max - self.min) * i as f64 / (n - 1) as f64)
            .collect()
    }
}

fn svg_header(title: &str) -> String {
    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{CHART_W}\" height=\"{CHART_H}\" \
         viewBox=\"0 0 {CHART_W} {CHART_H}\" font-family=\"sans-serif\" font-size=\"12\">"
    )
    .unwrap();
    write!(
        s,
        "<rect width=\"{CHART_W}\" height=\"{CHART_H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        CHART_W / 2.0,
        esc(title)
    )
    .unwrap();
    s
}

fn svg_axes(s: &mut String, x: &Scale, y: &Scale, x_label: &str, y_label: &str) {
    let left = MARGIN_L;
    let right = CHART_W - MARGIN_R;
    let top = MARGIN_T;
    let bottom = CHART_H - MARGIN_B;
    write!(
        s,
        "<line x1=\"{left}\" y1=\"{bottom}\" x2=\"{right}\" y2=\"{bottom}\" stroke=\"black\"/>\n\
         <line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{bottom}\" stroke=\"black\"/>\n"
    )
    .unwrap();
    for t in x.ticks(6) {
        let px = x.px(t);
        write!(
            s,
            "<line x1=\"{px}\" y1=\"{bottom}\" x2=\"{px}\" y2=\"{}\" stroke=\"black\"/>\n\
             <text x=\"{px}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            bottom + 5.0,
            bottom + 19.0,
            tick_label(t)
        )
        .unwrap();
    }
    for t in y.ticks(6) {
        let py = y.px(t);
        write!(
            s,
            "<line x1=\"{}\" y1=\"{py}\" x2=\"{left}\" y2=\"{py}\" stroke=\"black\"/>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            left - 5.0,
            left - 8.0,
            py + 4.0,
            tick_label(t)
        )
        .unwrap();
    }
    writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        (left + right) / 2.0,
        CHART_H - 10.0,
        esc(x_label)
    )
    .unwrap();
    writeln!(
        s,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>",
        (top + bottom) / 2.0,
        (top + bottom) / 2.0,
        esc(y_label)
    )
    .unwrap();
}

/// Line chart of the mean validation curve per group.
pub fn curves_svg(summary: &SweepSummary) -> Result<String> {
    let grid = shared_grid(summary)?;
    let x_min = *grid.first().unwrap() as f64;
    let x_max = *grid.last().unwrap() as f64;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for g in &summary.groups {
        for &v in &g.mean_val {
            y_min = y_min.min(v);
            y_max = y_max.max(v);
        }
    }
    let pad = 0.05 * (y_max - y_min).max(1e-9);
    let x = Scale::new(x_min, x_max, MARGIN_L, CHART_W - MARGIN_R);
    let y = Scale::new(y_min - pad, y_max + pad, CHART_H - MARGIN_B, MARGIN_T);

    let mut s = svg_header("Mean validation loss by iteration");
    svg_axes(&mut s, &x, &y, "iteration", "validation loss");
    for (i, g) in summary.groups.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points = grid
            .iter()
            .zip(&g.mean_val)
            .map(|(&it, &v)| format!("{:.2},{:.2}", x.px(it as f64), y.px(v)))
            .collect::<Vec<_>>()
            .join(" ");
        writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{points}\"/>"
        )
        .unwrap();
        let ly = MARGIN_T + 14.0 * i as f64;
        let lx = CHART_W - MARGIN_R + 12.0;
        write!(
            s,
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{}\" y=\"{}\">{}</text>\n",
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            esc(&legend_name(g))
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn legend_name(g: &GroupSummary) -> String {
    match g.p {
        Some(p) => format!("p = {}", tick_label(p)),
        None => g.variant.clone(),
    }
}

/// Box plot of per-run wall times, one box per group.
pub fn runtime_box_svg(summary: &SweepSummary) -> Result<String> {
    if summary.groups.is_empty() {
        return Err(Error::Aggregation("nothing to export: no groups".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for g in &summary.groups {
        let r = &g.runtime;
        for v in [r.whisker_lo, r.whisker_hi, r.mean] {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        for &o in &r.outliers {
            lo = lo.min(o);
            hi = hi.max(o);
        }
    }
    let pad = 0.08 * (hi - lo).max(1e-9);
    let y = Scale::new(lo - pad, hi + pad, CHART_H - MARGIN_B, MARGIN_T);
    let n = summary.groups.len() as f64;
    let plot_w = CHART_W - MARGIN_L - MARGIN_R;
    let slot = plot_w / n;
    let box_w = (slot * 0.5).min(48.0);

    let mut s = svg_header("Wall-clock time per run");
    // y axis only; group labels take the x axis
    let bottom = CHART_H - MARGIN_B;
    write!(
        s,
        "<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{bottom}\" stroke=\"black\"/>\n\
         <line x1=\"{MARGIN_L}\" y1=\"{bottom}\" x2=\"{}\" y2=\"{bottom}\" stroke=\"black\"/>\n",
        CHART_W - MARGIN_R
    )
    .unwrap();
    for t in y.ticks(6) {
        let py = y.px(t);
        write!(
            s,
            "<line x1=\"{}\" y1=\"{py}\" x2=\"{MARGIN_L}\" y2=\"{py}\" stroke=\"black\"/>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            MARGIN_L - 5.0,
            MARGIN_L - 8.0,
            py + 4.0,
            tick_label(t)
        )
        .unwrap();
    }
    writeln!(
        s,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">seconds</text>",
        (MARGIN_T + bottom) / 2.0,
        (MARGIN_T + bottom) / 2.0
    )
    .unwrap();

    for (i, g) in summary.groups.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let cx = MARGIN_L + slot * (i as f64 + 0.5);
        let r = &g.runtime;
        let (bx0, bx1) = (cx - box_w / 2.0, cx + box_w / 2.0);
        let (y_q1, y_q3) = (y.px(r.q1), y.px(r.q3));
        let (y_med, y_lo, y_hi) = (y.px(r.median), y.px(r.whisker_lo), y.px(r.whisker_hi));
        // whisker stems and caps
        write!(
            s,
            "<line x1=\"{cx}\" y1=\"{y_lo}\" x2=\"{cx}\" y2=\"{y_q1}\" stroke=\"black\"/>\n\
             <line x1=\"{cx}\" y1=\"{y_q3}\" x2=\"{cx}\" y2=\"{y_hi}\" stroke=\"black\"/>\n\
             <line x1=\"{}\" y1=\"{y_lo}\" x2=\"{}\" y2=\"{y_lo}\" stroke=\"black\"/>\n\
             <line x1=\"{}\" y1=\"{y_hi}\" x2=\"{}\" y2=\"{y_hi}\" stroke=\"black\"/>\n",
            cx - box_w / 4.0,
            cx + box_w / 4.0,
            cx - box_w / 4.0,
            cx + box_w / 4.0
        )
        .unwrap();
        // interquartile box and median line
        write!(
            s,
            "<rect x=\"{bx0}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{color}\" \
             fill-opacity=\"0.35\" stroke=\"{color}\"/>\n\
             <line x1=\"{bx0}\" y1=\"{y_med}\" x2=\"{bx1}\" y2=\"{y_med}\" stroke=\"black\" \
             stroke-width=\"1.5\"/>\n",
            y_q3.min(y_q1),
            bx1 - bx0,
            (y_q1 - y_q3).abs().max(0.5)
        )
        .unwrap();
        // mean diamond
        let my = y.px(r.mean);
        writeln!(
            s,
            "<path d=\"M {cx} {} L {} {my} L {cx} {} L {} {my} Z\" fill=\"black\"/>",
            my - 4.0,
            cx + 4.0,
            my + 4.0,
            cx - 4.0
        )
        .unwrap();
        for &o in &r.outliers {
            writeln!(
                s,
                "<circle cx=\"{cx}\" cy=\"{}\" r=\"3\" fill=\"none\" stroke=\"{color}\"/>",
                y.px(o)
            )
            .unwrap();
        }
        writeln!(
            s,
            "<text x=\"{cx}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            bottom + 19.0,
            esc(&legend_name(g))
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Write every table and chart into `out_dir`, returning the paths written.
pub fn export_all(summary: &SweepSummary, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let mut emit = |name: String, contents: String| -> Result<()> {
        let path = out_dir.join(name);
        write_file(&path, &contents)?;
        written.push(path);
        Ok(())
    };
    emit("curves_by_p.csv".into(), curves_by_p_csv(summary)?)?;
    let mut fold_ids: Vec<usize> = summary
        .groups
        .iter()
        .flat_map(|g| g.folds.iter().map(|f| f.fold))
        .collect();
    fold_ids.sort_unstable();
    fold_ids.dedup();
    for fold in fold_ids {
        if let Some(contents) = fold_curves_csv(summary, fold)? {
            emit(format!("fold_{fold}_curves.csv"), contents)?;
        }
    }
    emit("min_loss_table.csv".into(), min_loss_table_csv(summary))?;
    emit("fold_min_table.csv".into(), fold_min_table_csv(summary))?;
    emit("runtime_stats.csv".into(), runtime_stats_csv(summary))?;
    emit("val_curves.svg".into(), curves_svg(summary)?)?;
    emit("runtime_box.svg".into(), runtime_box_svg(summary)?)?;
    Ok(written)
}
