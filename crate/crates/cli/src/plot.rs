//! Static SVG scatter plot of accuracy against retained training memory.

use sherl_core::harness::ComparisonTable;

const W: f64 = 640.0;
const H: f64 = 440.0;
const MARGIN: f64 = 70.0;

/// One point per grid cell, labeled, with linear axes.
pub fn accuracy_memory_svg(table: &ComparisonTable) -> String {
    let xs: Vec<f64> = table.cells.iter().map(|c| c.mean_retained_total).collect();
    let ys: Vec<f64> = table.cells.iter().map(|c| c.mean_accuracy).collect();
    let (x0, x1) = padded_range(&xs);
    let (y0, y1) = padded_range(&ys);
    let sx = |v: f64| MARGIN + (v - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |v: f64| H - MARGIN - (v - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\">\n"
    ));
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    s.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    ));
    s.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        t = MARGIN,
        b = H - MARGIN
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\">retained bytes</text>\n",
        W / 2.0,
        H - 18.0
    ));
    s.push_str(&format!(
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\" \
         transform=\"rotate(-90 18 {})\">mean accuracy</text>\n",
        H / 2.0,
        H / 2.0
    ));
    for tick in 0..=4 {
        let fx = x0 + (x1 - x0) * tick as f64 / 4.0;
        let fy = y0 + (y1 - y0) * tick as f64 / 4.0;
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{:.0}</text>\n",
            sx(fx),
            H - MARGIN + 16.0,
            fx
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"10\">{:.3}</text>\n",
            MARGIN - 6.0,
            sy(fy) + 3.0,
            fy
        ));
    }
    for cell in &table.cells {
        let cx = sx(cell.mean_retained_total);
        let cy = sy(cell.mean_accuracy);
        s.push_str(&format!(
            "<circle cx=\"{cx:.1}\" cy=\"{cy:.1}\" r=\"4\" fill=\"steelblue\"/>\n"
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\">{}</text>\n",
            cx + 6.0,
            cy - 5.0,
            xml_escape(&cell.label)
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn padded_range(vals: &[f64]) -> (f64, f64) {
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    (lo - 0.08 * span, hi + 0.08 * span)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
