//! Line chart of the data-fraction sweep as a standalone SVG: x is the
//! training fraction in percent, y the weighted AUROC in percent, one
//! polyline per model with a shaded +-std band. No timestamps, so equal
//! inputs produce byte-identical files.

use cxrlab_core::sweep::SweepSummary;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;

const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

pub fn sweep_plot(summaries: &[SweepSummary]) -> String {
    let mut models: Vec<&str> = Vec::new();
    for s in summaries {
        if !models.contains(&s.model.as_str()) {
            models.push(&s.model);
        }
    }

    let xs: Vec<f64> = summaries.iter().map(|s| s.fraction * 100.0).collect();
    let x_min = xs.iter().cloned().fold(f64::INFINITY, f64::min).min(10.0);
    let x_max = xs.iter().cloned().fold(100.0f64, f64::max);
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for s in summaries {
        y_min = y_min.min((s.mean_auroc - s.std_auroc) * 100.0);
        y_max = y_max.max((s.mean_auroc + s.std_auroc) * 100.0);
    }
    if !y_min.is_finite() {
        y_min = 0.0;
        y_max = 100.0;
    }
    let y_lo = ((y_min - 2.0) / 5.0).floor() * 5.0;
    let y_hi = ((y_max + 2.0) / 5.0).ceil() * 5.0;
    let (y_lo, y_hi) = (y_lo.max(0.0), y_hi.min(100.0).max(y_lo + 5.0));

    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x_of = |f: f64| LEFT + (f - x_min) / (x_max - x_min).max(1e-9) * plot_w;
    let y_of = |v: f64| TOP + (y_hi - v) / (y_hi - y_lo).max(1e-9) * plot_h;

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
         font-family=\"sans-serif\" font-size=\"13\">\n"
    ));
    out.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));

    // axes
    out.push_str(&format!(
        "  <line x1=\"{LEFT}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        TOP + plot_h,
        LEFT + plot_w,
        TOP + plot_h
    ));
    out.push_str(&format!(
        "  <line x1=\"{LEFT}\" y1=\"{TOP}\" x2=\"{LEFT}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        TOP + plot_h
    ));

    // x ticks at observed fractions
    let mut ticks: Vec<i64> = xs.iter().map(|&x| x.round() as i64).collect();
    ticks.sort_unstable();
    ticks.dedup();
    for t in &ticks {
        let x = x_of(*t as f64);
        out.push_str(&format!(
            "  <line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
            TOP + plot_h,
            TOP + plot_h + 5.0
        ));
        out.push_str(&format!(
            "  <text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{t}</text>\n",
            TOP + plot_h + 20.0
        ));
    }
    // y ticks, 6 steps
    for i in 0..=5 {
        let v = y_lo + (y_hi - y_lo) * i as f64 / 5.0;
        let y = y_of(v);
        out.push_str(&format!(
            "  <line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{LEFT}\" y2=\"{y:.2}\" stroke=\"black\"/>\n",
            LEFT - 5.0
        ));
        out.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{v:.0}</text>\n",
            LEFT - 9.0,
            y + 4.0
        ));
    }
    out.push_str(&format!(
        "  <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">training fraction (%)</text>\n",
        LEFT + plot_w / 2.0,
        HEIGHT - 15.0
    ));
    out.push_str(&format!(
        "  <text x=\"18\" y=\"{:.2}\" text-anchor=\"middle\" \
         transform=\"rotate(-90 18 {:.2})\">weighted AUROC (%)</text>\n",
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    ));

    for (mi, model) in models.iter().enumerate() {
        let color = PALETTE[mi % PALETTE.len()];
        let mut points: Vec<(f64, f64, f64)> = summaries
            .iter()
            .filter(|s| s.model == *model)
            .map(|s| (s.fraction * 100.0, s.mean_auroc * 100.0, s.std_auroc * 100.0))
            .collect();
        points.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite fractions"));
        if points.is_empty() {
            continue;
        }
        // +-std band
        let mut band = String::new();
        for (f, m, sd) in &points {
            band.push_str(&format!("{:.2},{:.2} ", x_of(*f), y_of(m + sd)));
        }
        for (f, m, sd) in points.iter().rev() {
            band.push_str(&format!("{:.2},{:.2} ", x_of(*f), y_of(m - sd)));
        }
        out.push_str(&format!(
            "  <polygon points=\"{}\" fill=\"{color}\" fill-opacity=\"0.15\" stroke=\"none\"/>\n",
            band.trim_end()
        ));
        // mean line
        let line: Vec<String> = points
            .iter()
            .map(|(f, m, _)| format!("{:.2},{:.2}", x_of(*f), y_of(*m)))
            .collect();
        out.push_str(&format!(
            "  <polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            line.join(" ")
        ));
        // legend
        let ly = TOP + 10.0 + 22.0 * mi as f64;
        out.push_str(&format!(
            "  <line x1=\"{:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" \
             stroke=\"{color}\" stroke-width=\"3\"/>\n",
            WIDTH - RIGHT + 15.0,
            WIDTH - RIGHT + 45.0
        ));
        out.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\">{model}</text>\n",
            WIDTH - RIGHT + 52.0,
            ly + 4.0
        ));
    }
    out.push_str("</svg>\n");
    out
}
