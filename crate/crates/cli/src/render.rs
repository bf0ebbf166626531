//! Static SVG plots of sweep results.
//!
//! Plot spec (TOML):
//!
//! ```toml
//! kind = "norms"              # or "bias-variance"
//! output = "norms.svg"        # relative paths resolve against the CSV's directory
//! title = "branch norms"
//! teacher_norms = [0.4, 2.0]  # beta_l^2 sigma_t^2 reference lines (norms only)
//! gp_line = true              # sigma_w^4 reference line (norms only)
//! branch = "all"              # rows to plot for bias-variance
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::run::{read_rows, Row};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlotKind {
    Norms,
    BiasVariance,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotSpec {
    pub kind: PlotKind,
    pub output: PathBuf,
    #[serde(default)]
    pub title: Option<String>,
    #[serde(default)]
    pub teacher_norms: Vec<f64>,
    #[serde(default = "yes")]
    pub gp_line: bool,
    #[serde(default = "all")]
    pub branch: String,
    #[serde(default = "panel_width")]
    pub panel_width: u32,
    #[serde(default = "panel_height")]
    pub height: u32,
}

fn yes() -> bool {
    true
}
fn all() -> String {
    "all".into()
}
fn panel_width() -> u32 {
    360
}
fn panel_height() -> u32 {
    360
}

impl PlotSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let de = toml::Deserializer::parse(&text)
            .map_err(|e| Error::config("<plot spec>", e.to_string().trim_end()))?;
        serde_path_to_error::deserialize(de)
            .map_err(|e| Error::config(e.path().to_string(), e.inner().to_string()))
    }
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(255, 127, 14),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

struct Series {
    label: String,
    color: RGBColor,
    /// `(N, value)`, sorted by N.
    theory: Vec<(f64, f64)>,
    /// `(N, value, std_err)`.
    hmc: Vec<(f64, f64, f64)>,
}

/// `(σ_w, series, reference lines)` for one panel.
type Panel<'a> = (f64, Vec<Series>, Vec<(f64, &'a str)>);

fn collect(
    rows: &[Row],
    sigma_w: f64,
    branch: &str,
    quantity: &str,
    label: String,
    color: RGBColor,
) -> Series {
    let pick = |source: &str| {
        let mut v: Vec<&Row> = rows
            .iter()
            .filter(|r| {
                r.sigma_w == sigma_w
                    && r.branch == branch
                    && r.quantity == quantity
                    && r.source == source
            })
            .collect();
        v.sort_by_key(|r| r.width);
        v
    };
    Series {
        label,
        color,
        theory: pick("theory")
            .iter()
            .map(|r| (r.width as f64, r.value))
            .collect(),
        hmc: pick("hmc")
            .iter()
            .map(|r| (r.width as f64, r.value, r.std_err.unwrap_or(0.0)))
            .collect(),
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    let span = hi - lo;
    let pad = if span > 0.0 {
        0.08 * span
    } else {
        0.1 * lo.abs().max(1e-3)
    };
    (lo - pad, hi + pad)
}

fn draw_error<E: std::fmt::Display>(e: E) -> Error {
    Error::Render(e.to_string())
}

/// Renders `spec` from the rows in `csv`; returns the written file.
pub fn render(csv: &Path, spec: &PlotSpec) -> Result<PathBuf> {
    let rows = read_rows(csv)?;
    if rows.is_empty() {
        return Err(Error::Format {
            path: csv.to_path_buf(),
            message: "no rows to plot".into(),
        });
    }
    let output = if spec.output.is_absolute() {
        spec.output.clone()
    } else {
        csv.parent().unwrap_or(Path::new(".")).join(&spec.output)
    };
    let svg = render_svg(&rows, spec)?;
    std::fs::write(&output, svg).map_err(|e| Error::io(&output, e))?;
    Ok(output)
}

/// Renders to an SVG string; identical rows give identical output.
pub fn render_svg(rows: &[Row], spec: &PlotSpec) -> Result<String> {
    let mut sigmas: Vec<f64> = Vec::new();
    for r in rows {
        if !sigmas.contains(&r.sigma_w) {
            sigmas.push(r.sigma_w);
        }
    }
    sigmas.sort_by(f64::total_cmp);
    let widths: BTreeSet<usize> = rows.iter().map(|r| r.width).collect();
    let (wmin, wmax) = (
        *widths.first().unwrap() as f64,
        *widths.last().unwrap() as f64,
    );
    let (xlo, xhi) = if wmax > wmin {
        (wmin / 1.5, wmax * 1.5)
    } else {
        (wmin / 2.0, wmin * 2.0)
    };

    let panels: Vec<Panel> = sigmas
        .iter()
        .map(|&s| match spec.kind {
            PlotKind::Norms => {
                let mut branches: Vec<String> = rows
                    .iter()
                    .filter(|r| r.quantity == "u_scaled" && r.branch != "all")
                    .map(|r| r.branch.clone())
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                branches.sort_by_key(|b| b.parse::<usize>().unwrap_or(usize::MAX));
                let series = branches
                    .iter()
                    .enumerate()
                    .map(|(i, b)| {
                        collect(
                            rows,
                            s,
                            b,
                            "u_scaled",
                            format!("branch {b}"),
                            PALETTE[i % PALETTE.len()],
                        )
                    })
                    .collect();
                let mut refs = Vec::new();
                if spec.gp_line {
                    refs.push((s.powi(4), "GP"));
                }
                for t in &spec.teacher_norms {
                    refs.push((*t, "teacher"));
                }
                (s, series, refs)
            }
            PlotKind::BiasVariance => {
                let series = ["bias", "variance"]
                    .iter()
                    .enumerate()
                    .map(|(i, q)| collect(rows, s, &spec.branch, q, q.to_string(), PALETTE[i]))
                    .collect();
                (s, series, Vec::new())
            }
        })
        .collect();

    let mut svg = String::new();
    {
        let width = spec.panel_width * panels.len().max(1) as u32;
        let root = SVGBackend::with_string(&mut svg, (width, spec.height)).into_drawing_area();
        root.fill(&WHITE).map_err(draw_error)?;
        let root = match &spec.title {
            Some(t) => root.titled(t, ("sans-serif", 18)).map_err(draw_error)?,
            None => root,
        };
        let areas = root.split_evenly((1, panels.len().max(1)));
        for ((sigma_w, series, refs), area) in panels.iter().zip(areas.iter()) {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for s in series {
                for &(_, v) in &s.theory {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                for &(_, v, e) in &s.hmc {
                    lo = lo.min(v - e);
                    hi = hi.max(v + e);
                }
            }
            for (v, _) in refs {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
            let (ylo, yhi) = padded(lo, hi);
            let mut chart = ChartBuilder::on(area)
                .caption(format!("sigma_w = {sigma_w}"), ("sans-serif", 14))
                .margin(8)
                .x_label_area_size(32)
                .y_label_area_size(48)
                .build_cartesian_2d(
                    (xlo..xhi)
                        .log_scale()
                        .with_key_points(widths.iter().map(|w| *w as f64).collect::<Vec<_>>()),
                    ylo..yhi,
                )
                .map_err(draw_error)?;
            let y_desc = match spec.kind {
                PlotKind::Norms => "u_l sigma_w^2",
                PlotKind::BiasVariance => "test error",
            };
            chart
                .configure_mesh()
                .x_desc("N")
                .x_label_formatter(&|x| format!("{x}"))
                .y_desc(y_desc)
                .light_line_style(WHITE)
                .draw()
                .map_err(draw_error)?;
            let mut labelled = Vec::new();
            for (v, kind) in refs {
                let style = if *kind == "GP" {
                    ShapeStyle::from(&BLACK).stroke_width(1)
                } else {
                    ShapeStyle::from(&RGBColor(120, 120, 120)).stroke_width(1)
                };
                let drawn = chart
                    .draw_series(DashedLineSeries::new(
                        vec![(xlo, *v), (xhi, *v)],
                        6,
                        4,
                        style,
                    ))
                    .map_err(draw_error)?;
                if !labelled.contains(kind) {
                    labelled.push(*kind);
                    drawn
                        .label(*kind)
                        .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], style));
                }
            }
            for s in series {
                let color = s.color;
                chart
                    .draw_series(LineSeries::new(s.theory.clone(), color.stroke_width(2)))
                    .map_err(draw_error)?
                    .label(s.label.clone())
                    .legend(move |(x, y)| {
                        PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2))
                    });
                chart
                    .draw_series(s.theory.iter().map(|&p| Circle::new(p, 3, color.filled())))
                    .map_err(draw_error)?;
                chart
                    .draw_series(s.hmc.iter().map(|&(x, v, e)| {
                        ErrorBar::new_vertical(x, v - e, v, v + e, color.stroke_width(1), 8)
                    }))
                    .map_err(draw_error)?;
                chart
                    .draw_series(
                        s.hmc
                            .iter()
                            .map(|&(x, v, _)| Cross::new((x, v), 5, color.stroke_width(2))),
                    )
                    .map_err(draw_error)?;
            }
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .position(SeriesLabelPosition::UpperRight)
                .draw()
                .map_err(draw_error)?;
        }
        root.present().map_err(draw_error)?;
    }
    Ok(svg)
}
