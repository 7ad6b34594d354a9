//! Minimal static SVG line plots for experiment reports. No timestamps or
//! other non-reproducible content is emitted.

use crate::experiments::ExperimentReport;

#[derive(Debug, Clone, Copy)]
pub struct Axes {
    pub log_x: bool,
    pub log_y: bool,
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn transform(v: f64, log: bool) -> Option<f64> {
    if log {
        (v > 0.0).then(|| v.ln())
    } else {
        Some(v)
    }
}

/// Render named series as polylines in one chart.
pub fn line_chart(series: &[(String, Vec<(f64, f64)>)], axes: Axes, title: &str) -> String {
    let mut pts: Vec<(usize, Vec<(f64, f64)>)> = Vec::new();
    for (idx, (_, raw)) in series.iter().enumerate() {
        let mapped: Vec<(f64, f64)> = raw
            .iter()
            .filter_map(|&(x, y)| Some((transform(x, axes.log_x)?, transform(y, axes.log_y)?)))
            .collect();
        if !mapped.is_empty() {
            pts.push((idx, mapped));
        }
    }
    let flat: Vec<(f64, f64)> = pts.iter().flat_map(|(_, p)| p.iter().cloned()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &flat {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if flat.is_empty() {
        x0 = 0.0;
        x1 = 1.0;
        y0 = 0.0;
        y1 = 1.0;
    }
    if (x1 - x0).abs() < 1e-300 {
        x1 = x0 + 1.0;
    }
    if (y1 - y0).abs() < 1e-300 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"monospace\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        title
    ));
    svg.push_str(&format!(
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#333\"/>\n",
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    ));
    // Corner tick labels carry the data range; interior ticks add noise at
    // this size.
    let lab = |v: f64, log: bool| -> String {
        let val = if log { v.exp() } else { v };
        format!("{val:.3e}")
    };
    svg.push_str(&format!(
        "<text x=\"{MARGIN}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\">{}</text>\n",
        H - MARGIN + 14.0,
        lab(x0, axes.log_x)
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" text-anchor=\"end\">{}</text>\n",
        W - MARGIN,
        H - MARGIN + 14.0,
        lab(x1, axes.log_x)
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" text-anchor=\"end\">{}</text>\n",
        MARGIN - 4.0,
        H - MARGIN,
        lab(y0, axes.log_y)
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" text-anchor=\"end\">{}</text>\n",
        MARGIN - 4.0,
        MARGIN + 10.0,
        lab(y1, axes.log_y)
    ));
    for (series_idx, (idx, mapped)) in pts.iter().enumerate() {
        let color = COLORS[idx % COLORS.len()];
        let path: Vec<String> = mapped
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            path.join(" ")
        ));
        let label = &series[*idx].0;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" fill=\"{color}\">{}</text>\n",
            MARGIN + 8.0,
            MARGIN + 16.0 + 14.0 * series_idx as f64,
            label
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Chart of every quantity in a report, axes chosen by experiment type.
pub fn report_chart(report: &ExperimentReport, axes: Axes) -> String {
    let mut quantities: Vec<String> = Vec::new();
    for r in &report.records {
        if !quantities.contains(&r.quantity) && r.value.is_finite() {
            quantities.push(r.quantity.clone());
        }
    }
    let series: Vec<(String, Vec<(f64, f64)>)> = quantities
        .into_iter()
        .map(|q| {
            let s = report.series(&q);
            (q, s)
        })
        .collect();
    let title = format!(
        "{} [{} {}]",
        report.experiment, report.version, report.config_hash
    );
    line_chart(&series, axes, &title)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_contains_series_and_no_timestamp() {
        let series = vec![(
            "kl".to_string(),
            vec![(0.1, 1.0), (0.2, 0.5), (0.4, 0.25)],
        )];
        let svg = line_chart(&series, Axes { log_x: false, log_y: true }, "demo");
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains("kl"));
        let again = line_chart(&series, Axes { log_x: false, log_y: true }, "demo");
        assert_eq!(svg, again);
    }
}
