//! Hand-rolled SVG charts over the emitted reports.
//!
//! The reports stay the source of truth: every marker carries `data-*`
//! attributes holding the exact plotted values, so a reader (or a test) can
//! pull the numbers back out of the picture.

use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::delta::DeltaRow;
use crate::error::{Error, Result};
use crate::pipeline::{SweepLevel, SweepReport};
use crate::report::{
    check_report_complete, read_json, write_text, AttributionFile, DeltaReportFile, ReportMeta,
    RunPaths, SweepFile,
};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 72.0;
const RIGHT: f64 = 560.0;
const TOP: f64 = 56.0;
const BOTTOM: f64 = 376.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn px(v: f64) -> String {
    format!("{v:.2}")
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(c),
        }
    }
    out
}

fn xml_unescape(s: &str) -> String {
    s.replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&apos;", "'")
        .replace("&amp;", "&")
}

/// Linear data-to-pixel mapping with a 5% pad on each side.
struct LinScale {
    d_lo: f64,
    d_hi: f64,
    p_lo: f64,
    p_hi: f64,
}

impl LinScale {
    fn fit(values: impl IntoIterator<Item = f64>, p_lo: f64, p_hi: f64) -> LinScale {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() || !hi.is_finite() {
            lo = 0.0;
            hi = 1.0;
        }
        if lo == hi {
            lo -= 1.0;
            hi += 1.0;
        }
        let pad = 0.05 * (hi - lo);
        LinScale { d_lo: lo - pad, d_hi: hi + pad, p_lo, p_hi }
    }

    fn map(&self, v: f64) -> f64 {
        self.p_lo + (v - self.d_lo) / (self.d_hi - self.d_lo) * (self.p_hi - self.p_lo)
    }

    fn ticks(&self, n: usize) -> Vec<f64> {
        (0..=n)
            .map(|i| self.d_lo + (self.d_hi - self.d_lo) * i as f64 / n as f64)
            .collect()
    }
}

fn tick_label(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

struct Svg {
    body: String,
}

impl Svg {
    fn new(title: &str) -> Svg {
        let mut body = String::new();
        body.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
        body.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
             viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"monospace\" font-size=\"12\">\n"
        ));
        body.push_str(&format!(
            "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
        ));
        body.push_str(&format!(
            "<text x=\"{}\" y=\"26\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
            px((LEFT + RIGHT) / 2.0),
            xml_escape(title)
        ));
        Svg { body }
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, dashed: bool) {
        let dash = if dashed { " stroke-dasharray=\"4 3\"" } else { "" };
        self.body.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{}\" stroke-width=\"1\"{}/>\n",
            px(x1),
            px(y1),
            px(x2),
            px(y2),
            stroke,
            dash
        ));
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, s: &str) {
        self.body.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"{anchor}\">{}</text>\n",
            px(x),
            px(y),
            xml_escape(s)
        ));
    }

    fn text_colored(&mut self, x: f64, y: f64, fill: &str, s: &str) {
        self.body.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{fill}\">{}</text>\n",
            px(x),
            px(y),
            xml_escape(s)
        ));
    }

    fn vtext(&mut self, x: f64, y: f64, s: &str) {
        self.body.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 {} {})\">{}</text>\n",
            px(x),
            px(y),
            px(x),
            px(y),
            xml_escape(s)
        ));
    }

    fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str) {
        if pts.len() < 2 {
            return;
        }
        let coords: Vec<String> =
            pts.iter().map(|(x, y)| format!("{},{}", px(*x), px(*y))).collect();
        self.body.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{stroke}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            coords.join(" ")
        ));
    }

    /// A marker circle annotated with the exact plotted values.
    fn marker(
        &mut self,
        x: f64,
        y: f64,
        fill: &str,
        series: &str,
        data_x: &str,
        data_y: f64,
        extra: &[(&str, f64)],
    ) {
        let mut attrs = format!(
            " data-series=\"{}\" data-x=\"{}\" data-y=\"{}\"",
            xml_escape(series),
            xml_escape(data_x),
            data_y
        );
        for (name, v) in extra {
            attrs.push_str(&format!(" data-{name}=\"{v}\""));
        }
        self.body.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{}\" r=\"3.5\" fill=\"{fill}\"{attrs}/>\n",
            px(x),
            px(y)
        ));
    }

    fn bar(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str, series: &str, data_x: &str, data_y: f64) {
        self.body.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{fill}\" \
             data-series=\"{}\" data-x=\"{}\" data-y=\"{}\"/>\n",
            px(x),
            px(y),
            px(w),
            px(h),
            xml_escape(series),
            xml_escape(data_x),
            data_y
        ));
    }

    fn frame(&mut self) {
        self.line(LEFT, TOP, LEFT, BOTTOM, "#333333", false);
        self.line(LEFT, BOTTOM, RIGHT, BOTTOM, "#333333", false);
    }

    fn y_axis(&mut self, scale: &LinScale, label: &str) {
        for t in scale.ticks(5) {
            let y = scale.map(t);
            self.line(LEFT - 4.0, y, LEFT, y, "#333333", false);
            self.text(LEFT - 8.0, y + 4.0, "end", &tick_label(t));
        }
        self.vtext(20.0, (TOP + BOTTOM) / 2.0, label);
    }

    fn x_axis_numeric(&mut self, scale: &LinScale, label: &str) {
        for t in scale.ticks(5) {
            let x = scale.map(t);
            self.line(x, BOTTOM, x, BOTTOM + 4.0, "#333333", false);
            self.text(x, BOTTOM + 18.0, "middle", &tick_label(t));
        }
        self.text((LEFT + RIGHT) / 2.0, BOTTOM + 40.0, "middle", label);
    }

    fn x_axis_categorical(&mut self, cats: &[String], label: &str) {
        for (i, cat) in cats.iter().enumerate() {
            let x = cat_pos(i, cats.len());
            self.line(x, BOTTOM, x, BOTTOM + 4.0, "#333333", false);
            self.text(x, BOTTOM + 18.0, "middle", cat);
        }
        self.text((LEFT + RIGHT) / 2.0, BOTTOM + 40.0, "middle", label);
    }

    fn meta_footer(&mut self, meta: &ReportMeta) {
        let line = format!(
            "config {}  seed {}  family {}  tod-in-base {}",
            meta.config_hash, meta.master_seed, meta.family, meta.tod_in_base
        );
        self.text(LEFT, HEIGHT - 12.0, "start", &line);
    }

    fn legend(&mut self, entries: &[(String, &'static str)]) {
        for (i, (name, col)) in entries.iter().enumerate() {
            self.text_colored(RIGHT + 16.0, TOP + 16.0 + 18.0 * i as f64, col, name);
        }
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

fn cat_pos(i: usize, n: usize) -> f64 {
    LEFT + (i as f64 + 0.5) * (RIGHT - LEFT) / n as f64
}

/// Gain per horizon with bootstrap whiskers.
pub fn delta_vs_horizon_svg(file: &DeltaReportFile) -> String {
    let report = &file.report;
    let mut rows: Vec<&DeltaRow> = report.rows.iter().collect();
    rows.sort_by_key(|r| r.horizon_min);

    let mut svg = Svg::new(&format!(
        "Driver gain vs horizon ({}, {} preset)",
        report.loss.as_str(),
        report.noise_level
    ));
    let xs = LinScale::fit(rows.iter().map(|r| r.horizon_min as f64), LEFT, RIGHT);
    let ys = LinScale::fit(
        rows.iter().flat_map(|r| [r.delta, r.ci_low, r.ci_high, 0.0]),
        BOTTOM,
        TOP,
    );
    svg.frame();
    svg.y_axis(&ys, &format!("delta {} (mg/dL)", report.loss.as_str()));
    svg.x_axis_numeric(&xs, "horizon (min)");

    let zero = ys.map(0.0);
    svg.line(LEFT, zero, RIGHT, zero, "#999999", true);

    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (xs.map(r.horizon_min as f64), ys.map(r.delta)))
        .collect();
    svg.polyline(&pts, color(0));
    for (row, (x, y)) in rows.iter().zip(&pts) {
        svg.line(*x, ys.map(row.ci_low), *x, ys.map(row.ci_high), color(0), false);
        svg.line(*x - 4.0, ys.map(row.ci_low), *x + 4.0, ys.map(row.ci_low), color(0), false);
        svg.line(*x - 4.0, ys.map(row.ci_high), *x + 4.0, ys.map(row.ci_high), color(0), false);
        svg.marker(
            *x,
            *y,
            color(0),
            "delta",
            &row.horizon_min.to_string(),
            row.delta,
            &[("lo", row.ci_low), ("hi", row.ci_high)],
        );
    }
    svg.legend(&[(format!("delta ({} episodes)", report.n_episodes), color(0))]);
    svg.meta_footer(&file.meta);
    svg.finish()
}

/// Percent gain per fidelity level, one series per horizon.
pub fn delta_vs_noise_svg(file: &SweepFile) -> String {
    let levels = &file.report.levels;
    let cats: Vec<String> = levels.iter().map(|l| l.level.clone()).collect();
    let mut horizons: Vec<i64> = Vec::new();
    for level in levels {
        for row in &level.delta.rows {
            if !horizons.contains(&row.horizon_min) {
                horizons.push(row.horizon_min);
            }
        }
    }
    horizons.sort_unstable();

    let loss = levels.first().map(|l| l.delta.loss.as_str()).unwrap_or("rmse");
    let mut svg = Svg::new(&format!("Driver gain vs input fidelity ({loss})"));
    let ys = LinScale::fit(
        levels
            .iter()
            .flat_map(|l| l.delta.rows.iter().map(|r| r.pct))
            .chain([0.0]),
        BOTTOM,
        TOP,
    );
    svg.frame();
    svg.y_axis(&ys, "percent gain over univariate");
    svg.x_axis_categorical(&cats, "fidelity preset");

    let zero = ys.map(0.0);
    svg.line(LEFT, zero, RIGHT, zero, "#999999", true);

    for (hi, h) in horizons.iter().enumerate() {
        let mut pts = Vec::new();
        for (li, level) in levels.iter().enumerate() {
            let Some(row) = level.delta.rows.iter().find(|r| r.horizon_min == *h) else {
                continue;
            };
            pts.push((cat_pos(li, cats.len()), ys.map(row.pct), row.pct, li));
        }
        let line_pts: Vec<(f64, f64)> = pts.iter().map(|(x, y, _, _)| (*x, *y)).collect();
        svg.polyline(&line_pts, color(hi));
        for (x, y, pct, li) in pts {
            svg.marker(x, y, color(hi), &format!("{h} min"), &cats[li], pct, &[]);
        }
    }
    svg.legend(
        &horizons.iter().enumerate().map(|(i, h)| (format!("{h} min"), color(i))).collect::<Vec<_>>(),
    );
    svg.meta_footer(&file.meta);
    svg.finish()
}

/// Permutation-importance shares as a bar chart.
pub fn attribution_shares_svg(file: &AttributionFile) -> String {
    let report = &file.report;
    let mut bars: Vec<(String, f64)> = report
        .entries
        .iter()
        .map(|e| (e.group.clone(), e.share))
        .collect();
    bars.push(("residual".into(), report.residual_share));

    let mut svg = Svg::new(&format!(
        "Attribution shares ({} preset, {} permutations)",
        file.meta.preset, report.r_reps
    ));
    let cats: Vec<String> = bars.iter().map(|(g, _)| g.clone()).collect();
    let ys = LinScale::fit(bars.iter().map(|(_, s)| *s).chain([0.0, 1.0]), BOTTOM, TOP);
    svg.frame();
    svg.y_axis(&ys, "share of permutation loss increase");
    svg.x_axis_categorical(&cats, "channel group");

    let slot = (RIGHT - LEFT) / bars.len() as f64;
    let width = 0.6 * slot;
    for (i, (group, share)) in bars.iter().enumerate() {
        let x = cat_pos(i, bars.len()) - width / 2.0;
        let y0 = ys.map(0.0);
        let y1 = ys.map(*share);
        let (top, height) = if y1 <= y0 { (y1, y0 - y1) } else { (y0, y1 - y0) };
        svg.bar(x, top, width, height, color(i), "share", group, *share);
    }
    svg.meta_footer(&file.meta);
    svg.finish()
}

/// One annotated value pulled back out of an SVG.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotPoint {
    pub series: String,
    pub x: String,
    pub y: f64,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
}

fn find_attr<'a>(tag: &'a str, name: &str) -> Option<&'a str> {
    let pat = format!(" data-{name}=\"");
    let start = tag.find(&pat)? + pat.len();
    let rest = &tag[start..];
    Some(&rest[..rest.find('"')?])
}

fn f64_attr(tag: &str, name: &str) -> Result<Option<f64>> {
    match find_attr(tag, name) {
        None => Ok(None),
        Some(raw) => raw
            .parse::<f64>()
            .map(Some)
            .map_err(|_| Error::validation(format!("bad data-{name} annotation {raw:?}"))),
    }
}

/// Reads the `data-*` annotations back out of an SVG emitted by this module.
pub fn extract_points(svg: &str) -> Result<Vec<PlotPoint>> {
    let mut out = Vec::new();
    for chunk in svg.split('<').skip(1) {
        let tag = &chunk[..chunk.find('>').unwrap_or(chunk.len())];
        if !tag.contains(" data-x=\"") {
            continue;
        }
        let series = find_attr(tag, "series")
            .ok_or_else(|| Error::validation("marker without data-series annotation"))?;
        let x = find_attr(tag, "x").expect("checked above");
        let y = f64_attr(tag, "y")?
            .ok_or_else(|| Error::validation("marker without data-y annotation"))?;
        out.push(PlotPoint {
            series: xml_unescape(series),
            x: xml_unescape(x),
            y,
            lo: f64_attr(tag, "lo")?,
            hi: f64_attr(tag, "hi")?,
        });
    }
    if out.is_empty() {
        return Err(Error::validation("no data annotations found in SVG"));
    }
    Ok(out)
}

fn check_meta(cfg: &RunConfig, meta: &ReportMeta, path: &Path) -> Result<()> {
    let want = cfg.config_hash();
    if meta.config_hash != want {
        return Err(Error::validation(format!(
            "{} was produced under config hash {}, but the current config hashes to {want}; \
             re-run the pipeline or pass the matching --config",
            path.display(),
            meta.config_hash
        )));
    }
    Ok(())
}

/// Renders the three standard plots from the reports on disk.
///
/// A bench-only run has no sweep file; the fidelity plot then degrades to a
/// single-level (single-point) chart built from the bench report.
pub fn render_plots(cfg: &RunConfig, paths: &RunPaths) -> Result<Vec<PathBuf>> {
    let reports = paths.reports_dir();

    let delta_path = reports.join("delta_report.json");
    if !delta_path.exists() {
        return Err(Error::validation(format!(
            "missing report {}; run the bench step first",
            delta_path.display()
        )));
    }
    let delta: DeltaReportFile = read_json(&delta_path)?;
    check_meta(cfg, &delta.meta, &delta_path)?;
    check_report_complete(cfg, &delta.report)?;

    let attr_path = reports.join("attribution.json");
    if !attr_path.exists() {
        return Err(Error::validation(format!(
            "missing report {}; run the bench step first",
            attr_path.display()
        )));
    }
    let attribution: AttributionFile = read_json(&attr_path)?;
    check_meta(cfg, &attribution.meta, &attr_path)?;

    let sweep_path = reports.join("sweep.json");
    let sweep: SweepFile = if sweep_path.exists() {
        let file: SweepFile = read_json(&sweep_path)?;
        check_meta(cfg, &file.meta, &sweep_path)?;
        for level in &file.report.levels {
            check_report_complete(cfg, &level.delta)?;
        }
        file
    } else {
        SweepFile {
            meta: delta.meta.clone(),
            report: SweepReport {
                levels: vec![SweepLevel {
                    level: delta.report.noise_level.clone(),
                    delta: delta.report.clone(),
                    attribution: attribution.report.clone(),
                }],
            },
        }
    };

    let dir = paths.plots_dir();
    let outputs = [
        (dir.join("delta_vs_horizon.svg"), delta_vs_horizon_svg(&delta)),
        (dir.join("delta_vs_noise.svg"), delta_vs_noise_svg(&sweep)),
        (dir.join("attribution_shares.svg"), attribution_shares_svg(&attribution)),
    ];
    let mut files = Vec::new();
    for (path, svg) in outputs {
        write_text(&path, &svg)?;
        files.push(path);
    }
    Ok(files)
}
