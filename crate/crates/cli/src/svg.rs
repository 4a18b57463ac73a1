//! Fan charts: context, sampled median, 50% and 90% bands, ground truth.

use causal_flow::data::SeriesBatch;
use causal_flow::forecaster::Band;
use std::fmt::Write;

const W: f64 = 720.0;
const PANEL: f64 = 140.0;
const PAD: f64 = 30.0;

fn polyline(points: &[(f64, f64)], style: &str) -> String {
    let mut d = String::new();
    for (x, y) in points {
        let _ = write!(d, "{x:.2},{y:.2} ");
    }
    format!("<polyline fill=\"none\" {style} points=\"{}\"/>\n", d.trim_end())
}

fn area(upper: &[(f64, f64)], lower: &[(f64, f64)], fill: &str) -> String {
    let mut d = String::new();
    for (x, y) in upper.iter().chain(lower.iter().rev()) {
        let _ = write!(d, "{x:.2},{y:.2} ");
    }
    format!("<polygon fill=\"{fill}\" stroke=\"none\" points=\"{}\"/>\n", d.trim_end())
}

/// One panel per node for window `b`; `bands[node][step]` covers the
/// forecast window. Values after the context are drawn as ground truth when
/// `with_truth` is set.
pub fn fan_chart(data: &SeriesBatch, b: usize, bands: &[Vec<Band>], with_truth: bool, title: &str) -> String {
    let (k, tau, total) = (data.nodes(), data.context_len(), data.total_len());
    let height = PAD + k as f64 * (PANEL + PAD);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n<text x=\"{PAD}\" y=\"18\">{title}</text>\n"
    );
    let xs = |t: f64| PAD + (W - 2.0 * PAD) * t / (total - 1) as f64;
    for (i, node_bands) in bands.iter().enumerate().take(k) {
        let top = PAD + i as f64 * (PANEL + PAD);
        let series = data.series(b, i);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let shown = if with_truth { total } else { tau };
        for &v in &series[..shown] {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        for bd in node_bands {
            lo = lo.min(bd.q05);
            hi = hi.max(bd.q95);
        }
        if hi - lo < 1e-12 {
            hi = lo + 1.0;
        }
        let ys = |v: f64| top + PANEL * (1.0 - (v - lo) / (hi - lo));
        let _ = writeln!(
            s,
            "<rect x=\"{PAD}\" y=\"{top}\" width=\"{}\" height=\"{PANEL}\" fill=\"none\" stroke=\"#ccc\"/>\n<text x=\"{}\" y=\"{}\">node {i}</text>",
            W - 2.0 * PAD,
            PAD + 4.0,
            top + 12.0
        );
        let pts = |f: &dyn Fn(&Band) -> f64| -> Vec<(f64, f64)> {
            node_bands
                .iter()
                .enumerate()
                .map(|(h, bd)| (xs((tau + h) as f64), ys(f(bd))))
                .collect()
        };
        s += &area(&pts(&|b| b.q95), &pts(&|b| b.q05), "#c6dbef");
        s += &area(&pts(&|b| b.q75), &pts(&|b| b.q25), "#6baed6");
        s += &polyline(&pts(&|b| b.q50), "stroke=\"#08519c\" stroke-width=\"1.5\"");
        let ctx: Vec<(f64, f64)> = (0..tau).map(|t| (xs(t as f64), ys(series[t]))).collect();
        s += &polyline(&ctx, "stroke=\"black\" stroke-width=\"1\"");
        if with_truth {
            let fut: Vec<(f64, f64)> = (tau - 1..total).map(|t| (xs(t as f64), ys(series[t]))).collect();
            s += &polyline(&fut, "stroke=\"black\" stroke-dasharray=\"4 3\" stroke-width=\"1\"");
        }
    }
    s += "</svg>\n";
    s
}
