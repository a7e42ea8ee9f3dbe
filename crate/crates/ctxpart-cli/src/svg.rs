//! Self-contained SVG charts from rect/polyline/text primitives only: a
//! piecewise-constant (step-function) polyline over training steps with
//! axis labels and a title. No external assets, fonts, or stylesheets.

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn format_tick(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e9 {
        format!("{}", v as i64)
    } else {
        format!("{v:.4}")
    }
}

/// Render one metric series as a step plot. `points` must be nonempty and
/// sorted by x; the x axis spans exactly the recorded range.
pub fn render_step_plot(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    assert!(!points.is_empty(), "caller guarantees a nonempty series");
    let (x_min, x_max) = (
        points.first().unwrap().0,
        points.last().unwrap().0,
    );
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for &(_, y) in points {
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    // degenerate spans still need a visible scale
    let x_span = if x_max > x_min { x_max - x_min } else { 1.0 };
    let (y_lo, y_hi) = if y_max > y_min {
        let pad = (y_max - y_min) * 0.05;
        (y_min - pad, y_max + pad)
    } else {
        let pad = if y_min == 0.0 { 0.5 } else { y_min.abs() * 0.1 };
        (y_min - pad, y_min + pad)
    };

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |x: f64| MARGIN_LEFT + (x - x_min) / x_span * plot_w;
    let sy = |y: f64| MARGIN_TOP + (y_hi - y) / (y_hi - y_lo) * plot_h;

    // piecewise-constant: hold each value until the next recorded x
    let mut path = String::new();
    let mut prev_y = points[0].1;
    path.push_str(&format!("{:.2},{:.2}", sx(points[0].0), sy(prev_y)));
    for &(x, y) in &points[1..] {
        path.push_str(&format!(" {:.2},{:.2}", sx(x), sy(prev_y)));
        path.push_str(&format!(" {:.2},{:.2}", sx(x), sy(y)));
        prev_y = y;
    }

    let mut svg = String::new();
    svg.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "  <rect x=\"{MARGIN_LEFT}\" y=\"{MARGIN_TOP}\" width=\"{plot_w}\" height=\"{plot_h}\" fill=\"none\" stroke=\"black\" stroke-width=\"1\"/>\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"16\">{}</text>\n",
        WIDTH / 2.0,
        MARGIN_TOP - 14.0,
        escape_xml(title)
    ));
    // x-axis tick labels at the exact recorded range ends plus midpoint
    for (frac, value) in [
        (0.0, x_min),
        (0.5, x_min + x_span / 2.0),
        (1.0, x_min + x_span),
    ] {
        svg.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"11\">{}</text>\n",
            MARGIN_LEFT + frac * plot_w,
            HEIGHT - MARGIN_BOTTOM + 16.0,
            format_tick(value)
        ));
    }
    for (frac, value) in [(0.0, y_lo), (0.5, (y_lo + y_hi) / 2.0), (1.0, y_hi)] {
        svg.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" font-family=\"monospace\" font-size=\"11\">{}</text>\n",
            MARGIN_LEFT - 6.0,
            MARGIN_TOP + (1.0 - frac) * plot_h + 4.0,
            format_tick(value)
        ));
    }
    svg.push_str(&format!(
        "  <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"13\">{}</text>\n",
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 12.0,
        escape_xml(x_label)
    ));
    svg.push_str(&format!(
        "  <text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"13\" transform=\"rotate(-90 16 {:.2})\">{}</text>\n",
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0,
        escape_xml(y_label)
    ));
    svg.push_str(&format!(
        "  <polyline points=\"{path}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\"/>\n"
    ));
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plot_is_well_formed_xml_with_a_polyline() {
        let points: Vec<(f64, f64)> = (1..=10).map(|i| (i as f64, (i as f64).sin())).collect();
        let svg = render_step_plot("loss <total> & more", "step", "loss", &points);
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert!(doc.descendants().any(|n| n.has_tag_name("polyline")));
        assert!(doc.descendants().any(|n| n.has_tag_name("rect")));
        let texts: Vec<&str> = doc
            .descendants()
            .filter(|n| n.has_tag_name("text"))
            .filter_map(|n| n.text())
            .collect();
        assert!(texts.contains(&"loss <total> & more"));
        assert!(texts.contains(&"step"));
    }

    #[test]
    fn constant_series_is_a_single_level() {
        let points = vec![(0.0, 2.5), (5.0, 2.5), (10.0, 2.5)];
        let svg = render_step_plot("flat", "step", "value", &points);
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let polyline = doc
            .descendants()
            .find(|n| n.has_tag_name("polyline"))
            .unwrap();
        let pts = polyline.attribute("points").unwrap();
        let ys: Vec<&str> = pts
            .split_whitespace()
            .map(|p| p.split(',').nth(1).unwrap())
            .collect();
        assert!(ys.windows(2).all(|w| w[0] == w[1]), "one horizontal level");
    }

    #[test]
    fn x_axis_spans_the_recorded_range() {
        let points = vec![(3.0, 1.0), (7.0, 4.0), (12.0, 2.0)];
        let svg = render_step_plot("span", "step", "v", &points);
        assert!(svg.contains(">3<"), "min step labeled");
        assert!(svg.contains(">12<"), "max step labeled");
    }

    #[test]
    fn single_point_series_renders() {
        let svg = render_step_plot("one", "step", "v", &[(5.0, 0.0)]);
        roxmltree::Document::parse(&svg).unwrap();
    }
}
