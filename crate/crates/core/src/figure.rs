//! Deterministic SVG bar charts of multi-run attribution statistics.
//!
//! Layout mirrors the data: blocks left to right in network order, weight
//! blocks in one panel and bias blocks in another (their magnitudes differ by
//! orders of magnitude, so they get independent scales). Bar height is the
//! magnitude of the cross-run mean; whiskers span ±1 sample std. The signed
//! mean and std ride along as `data-*` attributes so tests and tools can read
//! exact values back out of the file.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ParamKind;
use crate::report::{BlockStats, FigureMode, MultiRunStats};

const BAR_W: f64 = 46.0;
const SLOT_W: f64 = 64.0;
const PLOT_H: f64 = 260.0;
const MARGIN_TOP: f64 = 52.0;
const MARGIN_BOTTOM: f64 = 46.0;
const MARGIN_LEFT: f64 = 16.0;
const PANEL_GAP: f64 = 56.0;
const PANEL_PAD: f64 = 18.0;

/// Render the chart as an SVG 1.1 document. Byte-deterministic in its input.
pub fn render_figure(stats: &MultiRunStats, mode: FigureMode) -> Result<String> {
    if stats.blocks.is_empty() {
        return Err(Error::InvalidArgument {
            op: "render_figure",
            reason: "stats contain no blocks".into(),
        });
    }
    let weights: Vec<&BlockStats> = stats.blocks.iter().filter(|b| b.kind == ParamKind::Weight).collect();
    let biases: Vec<&BlockStats> = stats.blocks.iter().filter(|b| b.kind == ParamKind::Bias).collect();

    let weights_w = panel_width(weights.len());
    let biases_w = panel_width(biases.len());
    let width = MARGIN_LEFT + weights_w + PANEL_GAP + biases_w + MARGIN_LEFT;
    let height = MARGIN_TOP + PLOT_H + MARGIN_BOTTOM;

    let measure = match mode {
        FigureMode::Sum => "|sum of contributions| per block",
        FigureMode::Mean => "|mean contribution| per element",
    };
    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" \
         width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\">\n"
    );
    let _ = write!(
        svg,
        "<rect x=\"0\" y=\"0\" width=\"{width:.0}\" height=\"{height:.0}\" fill=\"#ffffff\"/>\n"
    );
    let _ = write!(
        svg,
        "<text x=\"{:.2}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" \
         fill=\"#222222\">{} — {} run{} — {}</text>\n",
        MARGIN_LEFT,
        stats.scenario,
        stats.run_count,
        if stats.run_count == 1 { "" } else { "s" },
        measure,
    );

    let mut x0 = MARGIN_LEFT;
    for (kind, blocks) in [(ParamKind::Weight, &weights), (ParamKind::Bias, &biases)] {
        if !blocks.is_empty() {
            panel(&mut svg, kind, blocks, mode, x0);
        }
        x0 += panel_width(blocks.len()) + PANEL_GAP;
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Render and write the chart.
pub fn emit_figure(stats: &MultiRunStats, mode: FigureMode, path: &Path) -> Result<()> {
    let svg = render_figure(stats, mode)?;
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

fn panel_width(bars: usize) -> f64 {
    2.0 * PANEL_PAD + bars.max(1) as f64 * SLOT_W
}

fn value_of(b: &BlockStats, mode: FigureMode) -> (f64, f64) {
    match mode {
        FigureMode::Sum => (b.sum_mean, b.sum_std),
        FigureMode::Mean => (b.per_element_mean, b.per_element_std),
    }
}

fn panel(svg: &mut String, kind: ParamKind, blocks: &[&BlockStats], mode: FigureMode, x0: f64) {
    let base = MARGIN_TOP + PLOT_H;
    let w = panel_width(blocks.len());
    // Independent scale: the tallest whisker tip defines the panel maximum.
    let vmax = blocks
        .iter()
        .map(|b| {
            let (m, s) = value_of(b, mode);
            m.abs() + s
        })
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let y_of = |v: f64| base - (v / vmax).clamp(0.0, 1.0) * PLOT_H;

    let _ = write!(svg, "<g class=\"panel\" data-kind=\"{kind}\">\n");
    let _ = write!(
        svg,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"13\" \
         fill=\"#222222\">{kind} blocks</text>\n",
        x0,
        MARGIN_TOP - 10.0,
    );
    // Axis: baseline and the panel maximum, so heights are interpretable.
    let _ = write!(
        svg,
        "<line x1=\"{:.2}\" y1=\"{base:.2}\" x2=\"{:.2}\" y2=\"{base:.2}\" \
         stroke=\"#555555\" stroke-width=\"1\"/>\n",
        x0,
        x0 + w,
    );
    let _ = write!(
        svg,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\" \
         fill=\"#555555\">max {vmax:.3e}</text>\n",
        x0,
        MARGIN_TOP + 10.0,
    );

    for (i, b) in blocks.iter().enumerate() {
        let (mean, std) = value_of(b, mode);
        let v = mean.abs();
        let cx = x0 + PANEL_PAD + i as f64 * SLOT_W + SLOT_W / 2.0;
        let bar_x = cx - BAR_W / 2.0;
        let bar_y = y_of(v);
        let fill = if kind == ParamKind::Weight { "#4878a8" } else { "#a86048" };
        let _ = write!(
            svg,
            "<rect class=\"bar\" data-block=\"{}\" data-value=\"{}\" data-std=\"{}\" \
             x=\"{bar_x:.2}\" y=\"{bar_y:.2}\" width=\"{BAR_W:.2}\" height=\"{:.2}\" \
             fill=\"{fill}\"/>\n",
            b.block,
            mean,
            std,
            base - bar_y,
        );
        // ±1 std whisker, clamped to the plot.
        let lo = y_of((v - std).max(0.0));
        let hi = y_of(v + std);
        let _ = write!(
            svg,
            "<line class=\"whisker\" x1=\"{cx:.2}\" y1=\"{lo:.2}\" x2=\"{cx:.2}\" y2=\"{hi:.2}\" \
             stroke=\"#222222\" stroke-width=\"1.5\"/>\n"
        );
        for y in [lo, hi] {
            let _ = write!(
                svg,
                "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" \
                 stroke=\"#222222\" stroke-width=\"1.5\"/>\n",
                cx - 7.0,
                cx + 7.0,
            );
        }
        let _ = write!(
            svg,
            "<text x=\"{cx:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\" \
             fill=\"#222222\" text-anchor=\"middle\">{}</text>\n",
            base + 16.0,
            b.block,
        );
    }
    svg.push_str("</g>\n");
}
