//! Trajectory path plots: one polyline per node, fading in over time.

use std::path::Path;

use plotters::coord::Shift;
use plotters::prelude::*;

use crate::error::CliError;

/// Node paths `[T, N, 2]` of one trajectory.
#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub steps: usize,
    pub nodes: usize,
    pub xy: Vec<f64>,
    /// Drawn with point markers instead of a plain line.
    pub markers: bool,
}

impl Series {
    /// Picks coordinates `coords` from `[T, N, P]` positions.
    pub fn from_positions(label: &str, positions: &[f64], steps: usize, nodes: usize, coords: [usize; 2]) -> Result<Self, CliError> {
        let p = positions.len() / (steps * nodes).max(1);
        if p * steps * nodes != positions.len() || coords.iter().any(|&c| c >= p) {
            return Err(CliError::Config(format!("cannot draw coordinates {coords:?} of {p}-dimensional positions")));
        }
        let xy = positions.chunks(p).flat_map(|c| [c[coords[0]], c[coords[1]]]).collect();
        Ok(Series { label: label.into(), steps, nodes, xy, markers: false })
    }

    fn point(&self, t: usize, i: usize) -> (f64, f64) {
        let k = (t * self.nodes + i) * 2;
        (self.xy[k], self.xy[k + 1])
    }
}

#[derive(Clone, Debug, Default)]
pub struct PlotOptions {
    pub title: String,
    /// Colors nodes by group instead of by index.
    pub node_groups: Option<Vec<usize>>,
    /// Printed next to the final position of each node.
    pub node_energy: Option<Vec<f64>>,
}

const GROUP_COLORS: [RGBColor; 4] = [RGBColor(31, 119, 180), RGBColor(214, 39, 40), RGBColor(44, 160, 44), RGBColor(148, 103, 189)];

fn node_color(opts: &PlotOptions, i: usize) -> RGBColor {
    match &opts.node_groups {
        Some(g) => GROUP_COLORS[g.get(i).copied().unwrap_or(0) % GROUP_COLORS.len()],
        None => {
            let c = Palette99::pick(i).to_rgba();
            RGBColor(c.0, c.1, c.2)
        }
    }
}

fn bounds(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let mut lo = (f64::INFINITY, f64::INFINITY);
    let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for s in series {
        for c in s.xy.chunks(2) {
            lo = (lo.0.min(c[0]), lo.1.min(c[1]));
            hi = (hi.0.max(c[0]), hi.1.max(c[1]));
        }
    }
    if !lo.0.is_finite() {
        return ((-1.0, 1.0), (-1.0, 1.0));
    }
    let pad = |a: f64, b: f64| {
        let m = ((b - a) * 0.05).max(1e-6);
        (a - m, b + m)
    };
    (pad(lo.0, hi.0), pad(lo.1, hi.1))
}

fn draw<DB: DrawingBackend>(root: DrawingArea<DB, Shift>, series: &[Series], opts: &PlotOptions, text: bool) -> Result<(), String>
where
    DB::ErrorType: 'static,
{
    root.fill(&WHITE).map_err(|e| e.to_string())?;
    let ((x0, x1), (y0, y1)) = bounds(series);
    let mut builder = ChartBuilder::on(&root);
    builder.margin(20);
    if text {
        builder.caption(&opts.title, ("sans-serif", 20)).x_label_area_size(30).y_label_area_size(40);
    }
    let mut chart = builder.build_cartesian_2d(x0..x1, y0..y1).map_err(|e| e.to_string())?;
    let mut mesh = chart.configure_mesh();
    if !text {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.light_line_style(WHITE.mix(0.0)).draw().map_err(|e| e.to_string())?;
    for s in series {
        for i in 0..s.nodes {
            let color = node_color(opts, i);
            for t in 1..s.steps {
                let alpha = 0.15 + 0.85 * t as f64 / (s.steps - 1).max(1) as f64;
                let style = color.mix(alpha).stroke_width(2);
                chart.draw_series(LineSeries::new([s.point(t - 1, i), s.point(t, i)], style)).map_err(|e| e.to_string())?;
                if s.markers {
                    chart
                        .draw_series([Circle::new(s.point(t, i), 2, color.mix(alpha).filled())])
                        .map_err(|e| e.to_string())?;
                }
            }
        }
    }
    if text {
        if let (Some(energy), Some(s)) = (&opts.node_energy, series.first()) {
            for (i, e) in energy.iter().enumerate().take(s.nodes) {
                let p = s.point(s.steps - 1, i);
                chart
                    .draw_series([Text::new(format!("{e:.2e}"), p, ("sans-serif", 12).into_font().color(&BLACK))])
                    .map_err(|e| e.to_string())?;
            }
        }
        let labels: Vec<&str> = series.iter().map(|s| s.label.as_str()).collect();
        root.draw(&Text::new(labels.join(" | "), (25, 780), ("sans-serif", 12).into_font().color(&BLACK)))
            .map_err(|e| e.to_string())?;
    }
    root.present().map_err(|e| e.to_string())
}

/// Writes an SVG or PNG depending on the extension of `path`. Text is only
/// rendered in SVG output.
pub fn plot_trajectories(series: &[Series], opts: &PlotOptions, path: &Path) -> Result<(), CliError> {
    if series.is_empty() {
        return Err(CliError::Config("nothing to plot".into()));
    }
    let nodes = series[0].nodes;
    if series.iter().any(|s| s.nodes != nodes || s.steps == 0) {
        return Err(CliError::Config("plotted series must share the node count and be non-empty".into()));
    }
    let size = (800, 800);
    let res = match path.extension().and_then(|e| e.to_str()) {
        Some("svg") => draw(SVGBackend::new(path, size).into_drawing_area(), series, opts, true),
        Some("png") => draw(BitMapBackend::new(path, size).into_drawing_area(), series, opts, false),
        other => return Err(CliError::Config(format!("unsupported plot format {other:?}"))),
    };
    res.map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
