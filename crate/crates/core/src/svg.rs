//! Minimal self-contained SVG emission: log-log scatter with decade ticks
//! and a fitted reference line. No plotting dependencies; the output is a
//! plain string the CLI writes next to its CSVs.

/// Render a log-log scatter of (x, y) points with an optional fitted line
/// given as (slope, intercept) in log10 coordinates and an annotation.
pub fn loglog_plot(
    points: &[(f64, f64)],
    fit: Option<(f64, f64)>,
    title: &str,
    x_label: &str,
    y_label: &str,
) -> String {
    let width = 640.0;
    let height = 480.0;
    let margin = 70.0;
    let plot_w = width - 2.0 * margin;
    let plot_h = height - 2.0 * margin;

    let finite: Vec<(f64, f64)> =
        points.iter().copied().filter(|(x, y)| *x > 0.0 && *y > 0.0).collect();
    let (lx_min, lx_max, ly_min, ly_max) = if finite.is_empty() {
        (0.0, 1.0, 0.0, 1.0)
    } else {
        let lx: Vec<f64> = finite.iter().map(|(x, _)| x.log10()).collect();
        let ly: Vec<f64> = finite.iter().map(|(_, y)| y.log10()).collect();
        let pad = 0.15;
        (
            lx.iter().cloned().fold(f64::INFINITY, f64::min) - pad,
            lx.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + pad,
            ly.iter().cloned().fold(f64::INFINITY, f64::min) - pad,
            ly.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + pad,
        )
    };
    let sx = |lx: f64| margin + (lx - lx_min) / (lx_max - lx_min).max(1e-12) * plot_w;
    let sy = |ly: f64| height - margin - (ly - ly_min) / (ly_max - ly_min).max(1e-12) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"30\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{}</text>\n",
        width / 2.0,
        escape(title)
    ));

    // axes
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = margin,
        b = height - margin,
        r = width - margin,
        t = margin
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
        width / 2.0,
        height - 20.0,
        escape(x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 18 {:.1})\">{}</text>\n",
        height / 2.0,
        height / 2.0,
        escape(y_label)
    ));

    // decade ticks
    for exp in (lx_min.floor() as i64)..=(lx_max.ceil() as i64) {
        let lx = exp as f64;
        if lx < lx_min || lx > lx_max {
            continue;
        }
        let x = sx(lx);
        svg.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
            height - margin,
            height - margin + 6.0
        ));
        svg.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">1e{exp}</text>\n",
            height - margin + 20.0
        ));
    }
    for exp in (ly_min.floor() as i64)..=(ly_max.ceil() as i64) {
        let ly = exp as f64;
        if ly < ly_min || ly > ly_max {
            continue;
        }
        let y = sy(ly);
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"black\"/>\n",
            margin - 6.0,
            margin
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{y:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\" dy=\"4\">1e{exp}</text>\n",
            margin - 10.0
        ));
    }

    // fitted line across the data range
    if let Some((slope, intercept)) = fit {
        let y0 = slope * lx_min + intercept;
        let y1 = slope * lx_max + intercept;
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"steelblue\" stroke-dasharray=\"6 3\"/>\n",
            sx(lx_min),
            sy(y0),
            sx(lx_max),
            sy(y1)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"steelblue\">slope {slope:.3}</text>\n",
            margin + 10.0,
            margin + 18.0
        ));
    }

    for (x, y) in &finite {
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"firebrick\"/>\n",
            sx(x.log10()),
            sy(y.log10())
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_points_and_fit() {
        let pts = [(8.0, 0.06), (16.0, 0.031), (32.0, 0.014), (64.0, 0.008)];
        let svg = loglog_plot(&pts, Some((-1.0, 0.0)), "decay", "N", "error");
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("</svg>"));
        assert_eq!(svg.matches("<circle").count(), 4);
        assert!(svg.contains("slope -1.000"));
    }

    #[test]
    fn tolerates_empty_and_nonpositive_input() {
        let svg = loglog_plot(&[], None, "t", "x", "y");
        assert!(svg.contains("</svg>"));
        let svg = loglog_plot(&[(0.0, -1.0)], None, "t", "x", "y");
        assert!(svg.contains("</svg>"));
    }
}
