//! Dependency-free SVG figures: predicted-vs-chronological scatter and a
//! brain-PAD box plot. Coordinates are printed with fixed precision so the
//! files are byte-stable.

use std::fmt::Write as _;

const W: f64 = 480.0;
const H: f64 = 480.0;
const MARGIN: f64 = 56.0;

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        return (lo - 1.0, hi + 1.0);
    }
    let pad = (hi - lo) * 0.05;
    ((lo - pad).floor(), (hi + pad).ceil())
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 {
        out.push(if t.abs() < 1e-12 { 0.0 } else { t });
        t += step;
    }
    out
}

/// Scatter of predicted against chronological age with the identity line.
pub fn scatter_svg(chronological: &[f64], predicted: &[f64], title: &str) -> String {
    let all = chronological.iter().chain(predicted);
    let lo = all.clone().cloned().fold(f64::INFINITY, f64::min);
    let hi = all.cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = nice_range(lo, hi);
    let sx = |v: f64| MARGIN + (v - lo) / (hi - lo) * (W - 2.0 * MARGIN);
    let sy = |v: f64| H - MARGIN - (v - lo) / (hi - lo) * (H - 2.0 * MARGIN);

    let mut out = String::new();
    header(&mut out, title);
    let _ = writeln!(
        out,
        r##"<rect x="{m:.2}" y="{m:.2}" width="{w:.2}" height="{w:.2}" fill="none" stroke="#333"/>"##,
        m = MARGIN,
        w = W - 2.0 * MARGIN
    );
    for t in ticks(lo, hi) {
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{t}</text>"#, sx(t), H - MARGIN + 16.0);
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{t}</text>"#, MARGIN - 6.0, sy(t) + 4.0);
    }
    let _ = writeln!(
        out,
        r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#999" stroke-dasharray="4 3"/>"##,
        sx(lo),
        sy(lo),
        sx(hi),
        sy(hi)
    );
    for (c, p) in chronological.iter().zip(predicted) {
        let _ = writeln!(
            out,
            r##"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="#1f77b4" fill-opacity="0.6"/>"##,
            sx(*c),
            sy(*p)
        );
    }
    let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">Chronological age</text>"#, W / 2.0, H - 14.0);
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">Predicted age</text>"#,
        H / 2.0,
        H / 2.0
    );
    out.push_str("</svg>\n");
    out
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    sorted[i] + (sorted[j] - sorted[i]) * (pos - i as f64)
}

/// Box summary: (q1, median, q3, lower whisker, upper whisker, outliers).
pub fn box_stats(values: &[f64]) -> Option<(f64, f64, f64, f64, f64, Vec<f64>)> {
    if values.is_empty() {
        return None;
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let (q1, med, q3) = (quantile(&s, 0.25), quantile(&s, 0.5), quantile(&s, 0.75));
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inliers: Vec<f64> = s.iter().copied().filter(|v| *v >= lo_fence && *v <= hi_fence).collect();
    let lw = inliers.first().copied().unwrap_or(q1);
    let uw = inliers.last().copied().unwrap_or(q3);
    let outliers = s.into_iter().filter(|v| *v < lo_fence || *v > hi_fence).collect();
    Some((q1, med, q3, lw, uw, outliers))
}

/// Box plots of one or more labelled PAD distributions.
pub fn pad_boxplot_svg(groups: &[(&str, &[f64])], title: &str) -> String {
    let all: Vec<f64> = groups.iter().flat_map(|g| g.1.iter().copied()).collect();
    let lo = all.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0);
    let hi = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(0.0);
    let (lo, hi) = nice_range(lo, hi);
    let sy = |v: f64| H - MARGIN - (v - lo) / (hi - lo) * (H - 2.0 * MARGIN);
    let slot = (W - 2.0 * MARGIN) / groups.len().max(1) as f64;

    let mut out = String::new();
    header(&mut out, title);
    for t in ticks(lo, hi) {
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{t}</text>"#, MARGIN - 6.0, sy(t) + 4.0);
    }
    let _ = writeln!(
        out,
        r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#999" stroke-dasharray="4 3"/>"##,
        MARGIN,
        sy(0.0),
        W - MARGIN,
        sy(0.0)
    );
    for (k, (label, values)) in groups.iter().enumerate() {
        let cx = MARGIN + slot * (k as f64 + 0.5);
        let half = slot * 0.25;
        if let Some((q1, med, q3, lw, uw, outliers)) = box_stats(values) {
            let _ = writeln!(
                out,
                r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#aec7e8" stroke="#333"/>"##,
                cx - half,
                sy(q3),
                2.0 * half,
                (sy(q1) - sy(q3)).max(0.5)
            );
            let _ = writeln!(
                out,
                r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#333" stroke-width="2"/>"##,
                cx - half,
                sy(med),
                cx + half,
                sy(med)
            );
            for (a, b) in [(q3, uw), (q1, lw)] {
                let _ = writeln!(
                    out,
                    r##"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="#333"/>"##,
                    sy(a),
                    sy(b)
                );
                let _ = writeln!(
                    out,
                    r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#333"/>"##,
                    cx - half / 2.0,
                    sy(b),
                    cx + half / 2.0,
                    sy(b)
                );
            }
            for o in outliers {
                let _ = writeln!(out, r##"<circle cx="{cx:.2}" cy="{:.2}" r="2.5" fill="none" stroke="#333"/>"##, sy(o));
            }
        }
        let _ = writeln!(
            out,
            r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            H - MARGIN + 18.0,
            escape(label)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">Brain-PAD (years)</text>"#,
        H / 2.0,
        H / 2.0
    );
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_stats_quartiles() {
        let (q1, med, q3, lw, uw, out) = box_stats(&[1.0, 2.0, 3.0, 4.0, 5.0, 100.0]).unwrap();
        assert_eq!((q1, med, q3), (2.25, 3.5, 4.75));
        assert_eq!((lw, uw), (1.0, 5.0));
        assert_eq!(out, vec![100.0]);
        assert!(box_stats(&[]).is_none());
    }

    #[test]
    fn svgs_are_well_formed_and_stable() {
        let c = [20.0, 40.0, 60.0];
        let p = [25.0, 38.0, 70.0];
        let a = scatter_svg(&c, &p, "test");
        assert_eq!(a, scatter_svg(&c, &p, "test"));
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
        assert_eq!(a.matches("<circle").count(), 3);
        let pads = [5.0, -2.0, 10.0];
        let b = pad_boxplot_svg(&[("ours", &pads), ("other", &[1.0])], "PAD <A&B>");
        assert!(b.contains("PAD &lt;A&amp;B&gt;"));
        assert_eq!(ticks(0.0, 100.0), vec![0.0, 20.0, 40.0, 60.0, 80.0, 100.0]);
    }
}
