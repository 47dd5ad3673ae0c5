//! Minimal hand-written SVG charts for reports.

use std::fmt::Write;

use crate::evalkit::CountConfusion;

const W: f64 = 480.0;
const H: f64 = 400.0;
const PAD: f64 = 50.0;

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{title}</text>"#, W / 2.0);
    s
}

fn axes(s: &mut String, x_label: &str, y_label: &str, lo: f64, hi: f64, y_hi: f64) {
    let (x0, y0, x1, y1) = (PAD, H - PAD, W - PAD / 2.0, PAD);
    let _ = writeln!(s, r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" stroke="black" fill="none"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{x_label}</text>"#, (x0 + x1) / 2.0, H - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 14 {})">{y_label}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    let _ = writeln!(s, r#"<text x="{x0}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{lo:.0}</text>"#, y0 + 14.0);
    let _ = writeln!(s, r#"<text x="{x1}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{hi:.0}</text>"#, y0 + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{y_hi:.0}</text>"#, x0 - 4.0, y1 + 4.0);
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo.is_finite() && hi > lo {
        (lo, hi)
    } else if lo.is_finite() {
        (lo - 1.0, lo + 1.0)
    } else {
        (0.0, 1.0)
    }
}

/// Predicted against true length with the identity line.
pub fn scatter_svg(preds: &[f64], truths: &[f64]) -> String {
    let mut s = header("Predicted vs true length (cm)");
    let (lo, hi) = range(preds.iter().chain(truths).copied());
    let sx = |v: f64| PAD + (v - lo) / (hi - lo) * (W - 1.5 * PAD);
    let sy = |v: f64| H - PAD - (v - lo) / (hi - lo) * (H - 2.0 * PAD);
    axes(&mut s, "true length (cm)", "predicted length (cm)", lo, hi, hi);
    let _ = writeln!(s, r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="gray" stroke-dasharray="4 3"/>"#, sx(lo), sy(lo), sx(hi), sy(hi));
    for (&p, &t) in preds.iter().zip(truths) {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="steelblue" fill-opacity="0.6"/>"#, sx(t), sy(p));
    }
    s.push_str("</svg>\n");
    s
}

/// Overlaid histograms of two samples over a shared binning.
pub fn histogram_overlay_svg(a: &[f64], b: &[f64], bins: usize, labels: (&str, &str)) -> String {
    let mut s = header("Length distribution");
    let bins = bins.max(1);
    let (lo, hi) = range(a.iter().chain(b).copied());
    let count = |v: &[f64]| {
        let mut c = vec![0usize; bins];
        for &x in v {
            c[(((x - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)] += 1;
        }
        c
    };
    let (ca, cb) = (count(a), count(b));
    let top = ca.iter().chain(&cb).copied().max().unwrap_or(1).max(1) as f64;
    axes(&mut s, "length (cm)", "count", lo, hi, top);
    let bw = (W - 1.5 * PAD) / bins as f64;
    for (counts, color) in [(&ca, "steelblue"), (&cb, "darkorange")] {
        for (i, &c) in counts.iter().enumerate() {
            let h = c as f64 / top * (H - 2.0 * PAD);
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.45"/>"#,
                PAD + i as f64 * bw,
                H - PAD - h,
                bw,
                h
            );
        }
    }
    let _ = writeln!(s, r#"<text x="{}" y="44" font-family="sans-serif" font-size="11" fill="steelblue" text-anchor="end">{}</text>"#, W - PAD, labels.0);
    let _ = writeln!(s, r#"<text x="{}" y="58" font-family="sans-serif" font-size="11" fill="darkorange" text-anchor="end">{}</text>"#, W - PAD, labels.1);
    s.push_str("</svg>\n");
    s
}

/// Heat map of true (rows) against detected (columns) fish counts.
pub fn count_heatmap_svg(c: &CountConfusion) -> String {
    let mut s = header("Detected vs true fish count");
    let n = c.max_count + 1;
    let cell = ((W - 1.5 * PAD).min(H - 2.0 * PAD)) / n as f64;
    let top = c.matrix.iter().flatten().copied().max().unwrap_or(1).max(1) as f64;
    for (t, row) in c.matrix.iter().enumerate() {
        for (d, &v) in row.iter().enumerate() {
            let shade = 255.0 - 200.0 * v as f64 / top;
            let (x, y) = (PAD + d as f64 * cell, PAD + (n - 1 - t) as f64 * cell);
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{cell:.2}" height="{cell:.2}" fill="rgb({0:.0},{0:.0},255)" stroke="white"/>"#,
                shade
            );
            if v > 0 {
                let _ = writeln!(
                    s,
                    r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="middle">{v}</text>"#,
                    x + cell / 2.0,
                    y + cell / 2.0 + 4.0
                );
            }
        }
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">detected count</text>"#, PAD + n as f64 * cell / 2.0, PAD + n as f64 * cell + 20.0);
    let _ = writeln!(s, r#"<text x="20" y="{0}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 20 {0})">true count</text>"#, PAD + n as f64 * cell / 2.0);
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::count_confusion;

    #[test]
    fn charts_are_well_formed() {
        let sc = scatter_svg(&[10.0, 20.0], &[11.0, 19.0]);
        assert!(sc.starts_with("<svg") && sc.trim_end().ends_with("</svg>"));
        assert_eq!(sc.matches("<circle").count(), 2);
        let h = histogram_overlay_svg(&[1.0, 2.0, 3.0], &[2.0], 4, ("a", "b"));
        assert_eq!(h.matches("<rect").count(), 1 + 8);
        let c = count_confusion(&[1, 2, 2], &[1, 2, 3]).unwrap();
        let m = count_heatmap_svg(&c);
        assert_eq!(m.matches("<rect").count(), 1 + 16);
        assert!(scatter_svg(&[], &[]).contains("</svg>"));
    }
}
