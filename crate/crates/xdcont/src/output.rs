//! Plain-text artifacts: CSV tables, JSON event logs, state and mesh
//! snapshots, and a dependency-free SVG bifurcation diagram.
//!
//! Every float is written in shortest round-trip form, so reading a file
//! back reproduces the bits that were written.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::continuation::{Branch, EventKind, EventRecord, TestValues};
use crate::error::{Error, Result};
use crate::experiments::{OrderFit, SweepResult};
use crate::mesh::Mesh;
use crate::models::{Measures, ModelKind, State};

/// Shortest decimal representation that parses back to the same f64.
pub fn fmt_g17(x: f64) -> String {
    if x.is_nan() {
        "nan".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".to_string() } else { "-inf".to_string() }
    } else {
        let mut s = format!("{x}");
        debug_assert!(s.parse::<f64>().map(|y| y.to_bits() == x.to_bits()).unwrap_or(false));
        if !s.contains('.') && !s.contains('e') && !s.contains("inf") {
            s.push_str(".0");
        }
        s
    }
}

/// Whether `x` rounds to the decimal string `printed` at its printed
/// precision (the comparison used when checking computed values against
/// published tables).
pub fn rounds_to_printed(x: f64, printed: &str) -> bool {
    let decimals = printed.split('.').nth(1).map(|d| d.len()).unwrap_or(0);
    format!("{x:.decimals$}") == printed
}

pub fn parse_f64(tok: &str) -> Result<f64> {
    match tok {
        "nan" => Ok(f64::NAN),
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => tok
            .parse::<f64>()
            .map_err(|_| Error::Parse(format!("expected a float, got `{tok}`"))),
    }
}

/// Writes a CSV table with a header row; every cell already stringified.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = String::new();
    writeln!(text, "{}", header.join(",")).ok();
    for row in rows {
        writeln!(text, "{}", row.join(",")).ok();
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Plain-text state snapshot: model tag, parameter value, field layout and
/// nodal values, restartable via `read_state_snapshot`.
pub fn write_state_snapshot(path: &Path, s: &State) -> Result<()> {
    let mut text = String::new();
    writeln!(text, "xdcont-state {}", s.model.tag()).ok();
    writeln!(text, "param {}", fmt_g17(s.param_value)).ok();
    writeln!(text, "nodes {}", s.node_count()).ok();
    writeln!(text, "components {}", s.components()).ok();
    for v in &s.fields {
        writeln!(text, "{}", fmt_g17(*v)).ok();
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_state_snapshot(path: &Path) -> Result<State> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let head = lines.next().ok_or_else(|| Error::Parse("empty state snapshot".into()))?;
    let tag = head
        .strip_prefix("xdcont-state ")
        .ok_or_else(|| Error::Parse(format!("not a state snapshot: `{head}`")))?;
    let model = ModelKind::from_tag(tag.trim())?;

    let mut expect_kv = |key: &str| -> Result<String> {
        let line = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("snapshot truncated before `{key}`")))?;
        line.strip_prefix(key)
            .map(|rest| rest.trim().to_string())
            .ok_or_else(|| Error::Parse(format!("expected `{key} ...`, got `{line}`")))
    };
    let param_value = parse_f64(&expect_kv("param")?)?;
    let nodes: usize = expect_kv("nodes")?
        .parse()
        .map_err(|_| Error::Parse("bad node count".into()))?;
    let components: usize = expect_kv("components")?
        .parse()
        .map_err(|_| Error::Parse("bad component count".into()))?;
    if components != model.components() {
        return Err(Error::Parse(format!(
            "snapshot claims {components} components but model `{}` has {}",
            model.tag(),
            model.components()
        )));
    }
    let mut fields = Vec::with_capacity(nodes * components);
    for line in lines {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        fields.push(parse_f64(t)?);
    }
    if fields.len() != nodes * components {
        return Err(Error::Parse(format!(
            "snapshot has {} values, expected {}",
            fields.len(),
            nodes * components
        )));
    }
    Ok(State::new(fields, param_value, model))
}

/// Lowercase label safe for file names. The sign suffixes used for branch
/// pairs stay distinct so the pair does not collide on one file.
pub fn sanitize_label(label: &str) -> String {
    label
        .chars()
        .map(|c| match c {
            '+' => 'p',
            '-' => 'm',
            c if c.is_ascii_alphanumeric() => c.to_ascii_lowercase(),
            _ => '_',
        })
        .collect()
}

/// One branch as a CSV table, one row per accepted point (event points
/// included, marked by their flag).
pub fn write_branch_csv(path: &Path, branch: &Branch) -> Result<()> {
    let header =
        ["step", "param", "v_at_origin", "u_l1", "u_l2", "n_unstable", "det_sign", "event_flag"];
    let rows: Vec<Vec<String>> = branch
        .points
        .iter()
        .map(|pt| {
            vec![
                pt.step_index.to_string(),
                fmt_g17(pt.state.param_value),
                fmt_g17(pt.measures.v_at_origin),
                fmt_g17(pt.measures.u_l1),
                fmt_g17(pt.measures.u_l2),
                pt.n_unstable.to_string(),
                pt.det_sign.to_string(),
                pt.event_flag.to_string(),
            ]
        })
        .collect();
    write_csv(path, &header, &rows)
}

/// One recorded event in the run-wide `events.json`: everything needed to
/// re-create the `EventRecord` (the state itself lives in `state_file`,
/// relative to the run directory).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSummary {
    /// Run-wide id, the `--event` argument of the `switch` subcommand.
    pub event_id: usize,
    pub branch: String,
    /// Id within its branch.
    pub local_id: usize,
    pub kind: EventKind,
    pub param: f64,
    pub multiplicity: usize,
    pub n_unstable_before: usize,
    pub n_unstable_after: usize,
    pub test_values: TestValues,
    pub state_file: String,
}

impl EventSummary {
    /// Rebuilds the continuation-facing record from the summary plus its
    /// reloaded state snapshot.
    pub fn to_record(&self, state: State) -> EventRecord {
        EventRecord {
            id: self.local_id,
            kind: self.kind,
            param_value: self.param,
            state,
            multiplicity: self.multiplicity,
            n_unstable_before: self.n_unstable_before,
            n_unstable_after: self.n_unstable_after,
            test_values: self.test_values,
        }
    }
}

/// Writes `events.json` plus one state snapshot per event under
/// `events/` in the run directory; returns the summaries in file order.
pub fn write_run_events(out_dir: &Path, branches: &[&Branch]) -> Result<Vec<EventSummary>> {
    let ev_dir = out_dir.join("events");
    std::fs::create_dir_all(&ev_dir)?;
    let mut entries = Vec::new();
    for branch in branches {
        for ev in &branch.events {
            let event_id = entries.len();
            let state_file = format!("events/event_{event_id:03}.txt");
            write_state_snapshot(&out_dir.join(&state_file), &ev.state)?;
            entries.push(EventSummary {
                event_id,
                branch: branch.label.clone(),
                local_id: ev.id,
                kind: ev.kind,
                param: ev.param_value,
                multiplicity: ev.multiplicity,
                n_unstable_before: ev.n_unstable_before,
                n_unstable_after: ev.n_unstable_after,
                test_values: ev.test_values,
                state_file,
            });
        }
    }
    let text = serde_json::to_string_pretty(&entries)
        .map_err(|e| Error::Parse(format!("serializing events: {e}")))?;
    std::fs::write(out_dir.join("events.json"), text + "\n")?;
    Ok(entries)
}

pub fn read_events_json(path: &Path) -> Result<Vec<EventSummary>> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Nodal table of one state for external plotting: coordinates plus one
/// column per component (and the summed density for the fast model).
pub fn write_point_data_csv(path: &Path, mesh: &Mesh, s: &State) -> Result<()> {
    if s.node_count() != mesh.node_count() {
        return Err(Error::invalid(format!(
            "state has {} nodes, mesh has {}",
            s.node_count(),
            mesh.node_count()
        )));
    }
    let header: &[&str] = match s.model {
        ModelKind::Cross => &["x", "y", "u", "v"],
        ModelKind::Fast => &["x", "y", "u1", "u2", "v", "u"],
    };
    let rows: Vec<Vec<String>> = (0..mesh.node_count())
        .map(|i| {
            let mut row = vec![fmt_g17(mesh.nodes[i][0]), fmt_g17(mesh.nodes[i][1])];
            for c in 0..s.components() {
                row.push(fmt_g17(s.field(c)[i]));
            }
            if s.model == ModelKind::Fast {
                row.push(fmt_g17(s.field(0)[i] + s.field(1)[i]));
            }
            row
        })
        .collect();
    write_csv(path, header, &rows)
}

/// Sweep table: one row per detected event per ladder member.
pub fn write_sweep_csv(path: &Path, result: &SweepResult) -> Result<()> {
    let header = ["eps", "event", "kind", "value", "reference", "abs_diff"];
    let rows: Vec<Vec<String>> = result
        .rows
        .iter()
        .map(|r| {
            vec![
                fmt_g17(r.eps),
                r.event.clone(),
                format!("{:?}", r.kind),
                fmt_g17(r.value),
                fmt_g17(r.reference),
                fmt_g17(r.abs_diff),
            ]
        })
        .collect();
    write_csv(path, &header, &rows)
}

/// Fit summary: slot -> fitted power law of the error against eps.
pub fn write_fit_json(path: &Path, fits: &BTreeMap<String, OrderFit>) -> Result<()> {
    let text = serde_json::to_string_pretty(fits)
        .map_err(|e| Error::Parse(format!("serializing fits: {e}")))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Solution measure plotted on the vertical axis of diagrams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureChoice {
    VAtOrigin,
    UL1,
    UL2,
}

impl MeasureChoice {
    pub fn label(self) -> &'static str {
        match self {
            MeasureChoice::VAtOrigin => "v(0)",
            MeasureChoice::UL1 => "|u|_L1",
            MeasureChoice::UL2 => "|u|_L2",
        }
    }

    pub fn pick(self, m: &Measures) -> f64 {
        match self {
            MeasureChoice::VAtOrigin => m.v_at_origin,
            MeasureChoice::UL1 => m.u_l1,
            MeasureChoice::UL2 => m.u_l2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvgOptions {
    pub width: u32,
    pub height: u32,
    pub measure: MeasureChoice,
    pub title: String,
}

impl Default for SvgOptions {
    fn default() -> Self {
        SvgOptions {
            width: 960,
            height: 600,
            measure: MeasureChoice::UL2,
            title: String::new(),
        }
    }
}

const PALETTE: [&str; 8] =
    ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"];

/// Data-to-pixel mapping plus accumulated SVG body.
struct Canvas {
    width: f64,
    height: f64,
    left: f64,
    right: f64,
    top: f64,
    bottom: f64,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    body: String,
}

/// Largest 1/2/5 x 10^k step that produces at most `max_ticks` ticks.
fn tick_step(range: f64, max_ticks: usize) -> f64 {
    let raw = range / max_ticks as f64;
    let mag = 10f64.powf(raw.abs().log10().floor());
    for mult in [1.0, 2.0, 5.0] {
        if mult * mag >= raw {
            return mult * mag;
        }
    }
    10.0 * mag
}

fn fmt_tick(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    let a = x.abs();
    if (1e-3..1e4).contains(&a) {
        let mut s = format!("{x:.4}");
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
        s
    } else {
        format!("{x:.2e}")
    }
}

impl Canvas {
    fn new(width: u32, height: u32, xb: (f64, f64), yb: (f64, f64)) -> Canvas {
        let pad = |(lo, hi): (f64, f64)| {
            if hi > lo {
                let m = 0.04 * (hi - lo);
                (lo - m, hi + m)
            } else {
                (lo - 0.5, hi + 0.5)
            }
        };
        let (x0, x1) = pad(xb);
        let (y0, y1) = pad(yb);
        Canvas {
            width: width as f64,
            height: height as f64,
            left: 64.0,
            right: 16.0,
            top: 34.0,
            bottom: 46.0,
            x0,
            x1,
            y0,
            y1,
            body: String::new(),
        }
    }

    fn px(&self, x: f64) -> f64 {
        self.left + (x - self.x0) / (self.x1 - self.x0) * (self.width - self.left - self.right)
    }

    fn py(&self, y: f64) -> f64 {
        self.height
            - self.bottom
            - (y - self.y0) / (self.y1 - self.y0) * (self.height - self.top - self.bottom)
    }

    fn axes(&mut self, title: &str, x_label: &str, y_label: &str) {
        let (w, h) = (self.width, self.height);
        let (l, r, t, b) = (self.left, self.right, self.top, self.bottom);
        write!(
            self.body,
            "<rect x=\"{l:.2}\" y=\"{t:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"#444\" stroke-width=\"1\"/>\n",
            w - l - r,
            h - t - b
        )
        .ok();
        let xs = tick_step(self.x1 - self.x0, 6);
        let mut x = (self.x0 / xs).ceil() * xs;
        while x <= self.x1 {
            let px = self.px(x);
            write!(
                self.body,
                "<line x1=\"{px:.2}\" y1=\"{t:.2}\" x2=\"{px:.2}\" y2=\"{:.2}\" stroke=\"#ddd\" stroke-width=\"0.6\"/>\n<text x=\"{px:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\" fill=\"#222\">{}</text>\n",
                h - b,
                h - b + 16.0,
                fmt_tick(x)
            )
            .ok();
            x += xs;
        }
        let ys = tick_step(self.y1 - self.y0, 6);
        let mut y = (self.y0 / ys).ceil() * ys;
        while y <= self.y1 {
            let py = self.py(y);
            write!(
                self.body,
                "<line x1=\"{l:.2}\" y1=\"{py:.2}\" x2=\"{:.2}\" y2=\"{py:.2}\" stroke=\"#ddd\" stroke-width=\"0.6\"/>\n<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"end\" fill=\"#222\">{}</text>\n",
                w - r,
                l - 6.0,
                py + 4.0,
                fmt_tick(y)
            )
            .ok();
            y += ys;
        }
        write!(
            self.body,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"middle\" fill=\"#000\">{x_label}</text>\n",
            l + (w - l - r) / 2.0,
            h - 8.0
        )
        .ok();
        write!(
            self.body,
            "<text x=\"14\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"middle\" fill=\"#000\" transform=\"rotate(-90 14 {:.2})\">{y_label}</text>\n",
            t + (h - t - b) / 2.0,
            t + (h - t - b) / 2.0
        )
        .ok();
        if !title.is_empty() {
            write!(
                self.body,
                "<text x=\"{:.2}\" y=\"20\" font-size=\"15\" text-anchor=\"middle\" fill=\"#000\">{title}</text>\n",
                w / 2.0
            )
            .ok();
        }
    }

    fn polyline(&mut self, pts: &[(f64, f64)], color: &str, width: f64) {
        if pts.len() < 2 {
            return;
        }
        let coords: Vec<String> =
            pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", self.px(x), self.py(y))).collect();
        write!(
            self.body,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\" stroke-linejoin=\"round\"/>\n",
            coords.join(" ")
        )
        .ok();
    }

    fn circle_marker(&mut self, x: f64, y: f64) {
        write!(
            self.body,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3.4\" fill=\"#fff\" stroke=\"#000\" stroke-width=\"1.1\"/>\n",
            self.px(x),
            self.py(y)
        )
        .ok();
    }

    fn cross_marker(&mut self, x: f64, y: f64) {
        let (px, py) = (self.px(x), self.py(y));
        let d = 3.6;
        write!(
            self.body,
            "<path d=\"M {:.2} {:.2} L {:.2} {:.2} M {:.2} {:.2} L {:.2} {:.2}\" stroke=\"#000\" stroke-width=\"1.4\"/>\n",
            px - d,
            py - d,
            px + d,
            py + d,
            px - d,
            py + d,
            px + d,
            py - d
        )
        .ok();
    }

    fn diamond_marker(&mut self, x: f64, y: f64) {
        let (px, py) = (self.px(x), self.py(y));
        let d = 4.0;
        write!(
            self.body,
            "<path d=\"M {:.2} {:.2} L {:.2} {:.2} L {:.2} {:.2} L {:.2} {:.2} Z\" fill=\"#000\"/>\n",
            px,
            py - d,
            px + d,
            py,
            px,
            py + d,
            px - d,
            py
        )
        .ok();
    }

    fn finish(self, width: u32, height: u32) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n<rect width=\"{width}\" height=\"{height}\" fill=\"#fff\"/>\n{}</svg>\n",
            self.body
        )
    }
}

/// Renders branches as measure-vs-parameter polylines: thick where stable
/// (no unstable eigenvalue), thin where unstable, circles at branch points,
/// crosses at folds, filled diamonds at Hopf points.
pub fn render_diagram_svg(branches: &[&Branch], opts: &SvgOptions) -> String {
    let mut xb = (f64::INFINITY, f64::NEG_INFINITY);
    let mut yb = (f64::INFINITY, f64::NEG_INFINITY);
    for br in branches {
        for pt in &br.points {
            let (x, y) = (pt.state.param_value, opts.measure.pick(&pt.measures));
            xb = (xb.0.min(x), xb.1.max(x));
            yb = (yb.0.min(y), yb.1.max(y));
        }
    }
    if !xb.0.is_finite() {
        xb = (0.0, 1.0);
        yb = (0.0, 1.0);
    }
    let mut canvas = Canvas::new(opts.width, opts.height, xb, yb);
    let x_label = branches.first().map(|b| b.param.name()).unwrap_or("param");
    canvas.axes(&opts.title, x_label, opts.measure.label());

    for (bi, br) in branches.iter().enumerate() {
        let color = PALETTE[bi % PALETTE.len()];
        // split into maximal stability runs; each run keeps the first point
        // of the next so the curve stays visually connected
        let pts = &br.points;
        let mut start = 0;
        while start < pts.len() {
            let stable = pts[start].n_unstable == 0;
            let mut end = start + 1;
            while end < pts.len() && (pts[end].n_unstable == 0) == stable {
                end += 1;
            }
            let upper = (end + 1).min(pts.len());
            let seg: Vec<(f64, f64)> = pts[start..upper]
                .iter()
                .map(|pt| (pt.state.param_value, opts.measure.pick(&pt.measures)))
                .collect();
            canvas.polyline(&seg, color, if stable { 2.6 } else { 1.0 });
            start = end;
        }
        for pt in pts {
            let (x, y) = (pt.state.param_value, opts.measure.pick(&pt.measures));
            match pt.event_flag {
                f if f == EventKind::BranchPoint.flag() => canvas.circle_marker(x, y),
                f if f == EventKind::Fold.flag() => canvas.cross_marker(x, y),
                f if f == EventKind::Hopf.flag() => canvas.diamond_marker(x, y),
                _ => {}
            }
        }
    }
    canvas.finish(opts.width, opts.height)
}

pub fn write_diagram_svg(path: &Path, branches: &[&Branch], opts: &SvgOptions) -> Result<()> {
    std::fs::write(path, render_diagram_svg(branches, opts))?;
    Ok(())
}

/// Renders labeled xy curves (no stability styling) with optional point
/// markers; used for the closed-form threshold curve.
pub fn render_curve_svg(
    series: &[(String, Vec<(f64, f64)>)],
    markers: &[(f64, f64)],
    x_label: &str,
    y_label: &str,
    title: &str,
    width: u32,
    height: u32,
) -> String {
    let mut xb = (f64::INFINITY, f64::NEG_INFINITY);
    let mut yb = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, pts) in series {
        for &(x, y) in pts {
            xb = (xb.0.min(x), xb.1.max(x));
            yb = (yb.0.min(y), yb.1.max(y));
        }
    }
    for &(x, y) in markers {
        xb = (xb.0.min(x), xb.1.max(x));
        yb = (yb.0.min(y), yb.1.max(y));
    }
    if !xb.0.is_finite() {
        xb = (0.0, 1.0);
        yb = (0.0, 1.0);
    }
    let mut canvas = Canvas::new(width, height, xb, yb);
    canvas.axes(title, x_label, y_label);
    for (si, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        canvas.polyline(pts, color, 1.8);
        if !label.is_empty() {
            if let Some(&(x, y)) = pts.last() {
                write!(
                    canvas.body,
                    "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" fill=\"{color}\">{label}</text>\n",
                    canvas.px(x) + 4.0,
                    canvas.py(y) - 4.0
                )
                .ok();
            }
        }
    }
    for &(x, y) in markers {
        canvas.circle_marker(x, y);
    }
    canvas.finish(width, height)
}

/// Branch file name for a label: `branch_<sanitized label>.csv`.
pub fn branch_csv_name(label: &str) -> PathBuf {
    PathBuf::from(format!("branch_{}.csv", sanitize_label(label)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt_round_trips_awkward_values() {
        for x in [0.1, 1.0 / 3.0, 6.02e23, 5e-324, -0.0, 2.0_f64.powi(-40), 13.0 / 8.0] {
            let s = fmt_g17(x);
            assert_eq!(parse_f64(&s).unwrap().to_bits(), x.to_bits(), "{s}");
        }
        assert!(parse_f64(&fmt_g17(f64::NAN)).unwrap().is_nan());
        assert_eq!(parse_f64(&fmt_g17(f64::INFINITY)).unwrap(), f64::INFINITY);
    }

    #[test]
    fn state_snapshot_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.txt");
        let s = State::new(vec![0.1, 0.2, 0.3, 1.0 / 3.0, 0.5, 0.6], 0.0327884, ModelKind::Fast);
        write_state_snapshot(&path, &s).unwrap();
        let back = read_state_snapshot(&path).unwrap();
        assert_eq!(back.model, ModelKind::Fast);
        assert_eq!(back.param_value.to_bits(), s.param_value.to_bits());
        assert_eq!(back.fields, s.fields);
    }

    #[test]
    fn snapshot_reader_rejects_mismatched_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "xdcont-state cross\nparam 0.5\nnodes 2\ncomponents 3\n").unwrap();
        assert!(read_state_snapshot(&path).is_err());
    }

    use crate::continuation::{BranchPoint, BranchStatus};
    use crate::models::{ContinuationParam, StateFlags};

    fn tiny_branch() -> Branch {
        let point = |step: usize, p: f64, n_unstable: usize, event_flag: u8| {
            let state = State::new(vec![1.0, 2.0, 0.5, 0.5], p, ModelKind::Cross);
            BranchPoint {
                step_index: step,
                measures: Measures { v_at_origin: 0.5, u_l1: 1.5 + p, u_l2: 1.6 + p },
                n_unstable,
                marginal: false,
                flags: StateFlags { coefficient_positive: true, u2_in_range: true },
                det_sign: 1,
                tangent_x: vec![0.0; 4],
                tangent_p: -1.0,
                spectrum: None,
                event_flag,
                state,
            }
        };
        let ev_state = State::new(vec![1.0, 2.0, 0.5, 0.5], 0.02, ModelKind::Cross);
        Branch {
            label: "homogeneous".into(),
            model: ModelKind::Cross,
            param: ContinuationParam::D,
            points: vec![
                point(0, 0.04, 0, 0),
                point(1, 0.03, 0, 0),
                point(2, 0.02, 0, 1),
                point(3, 0.01, 1, 0),
            ],
            events: vec![EventRecord {
                id: 0,
                kind: EventKind::BranchPoint,
                param_value: 0.02,
                state: ev_state,
                multiplicity: 1,
                n_unstable_before: 0,
                n_unstable_after: 1,
                test_values: TestValues {
                    det_sign_before: 1,
                    det_sign_after: -1,
                    bordered_sign_before: 1,
                    bordered_sign_after: -1,
                    tangent_param_before: -1.0,
                    tangent_param_after: -1.0,
                    hopf_real: -1.0,
                },
            }],
            status: BranchStatus::LeftWindow,
        }
    }

    #[test]
    fn branch_csv_is_deterministic_and_row_per_point() {
        let dir = tempfile::tempdir().unwrap();
        let branch = tiny_branch();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        write_branch_csv(&a, &branch).unwrap();
        write_branch_csv(&b, &branch).unwrap();
        let ta = std::fs::read(&a).unwrap();
        assert_eq!(ta, std::fs::read(&b).unwrap());
        let text = String::from_utf8(ta).unwrap();
        assert_eq!(text.lines().count(), 1 + branch.points.len());
        assert!(text.starts_with("step,param,"));
    }

    #[test]
    fn run_events_round_trip_into_records() {
        let dir = tempfile::tempdir().unwrap();
        let branch = tiny_branch();
        let entries = write_run_events(dir.path(), &[&branch]).unwrap();
        assert_eq!(entries.len(), 1);
        let back = read_events_json(&dir.path().join("events.json")).unwrap();
        assert_eq!(back, entries);
        let state = read_state_snapshot(&dir.path().join(&back[0].state_file)).unwrap();
        let rec = back[0].to_record(state);
        assert_eq!(rec, branch.events[0]);
    }

    #[test]
    fn diagram_svg_styles_stability_and_marks_events() {
        let branch = tiny_branch();
        let svg = render_diagram_svg(&[&branch], &SvgOptions::default());
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("stroke-width=\"2.6\""), "stable run missing");
        assert!(svg.contains("stroke-width=\"1\""), "unstable run missing");
        assert!(svg.contains("<circle"), "branch-point marker missing");
        assert_eq!(svg, render_diagram_svg(&[&branch], &SvgOptions::default()));
    }

    #[test]
    fn point_data_lists_fast_components_and_total() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = crate::mesh::build_interval_mesh(1.0, 3).unwrap();
        let s = State::new(
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            0.02,
            ModelKind::Fast,
        );
        let path = dir.path().join("pts.csv");
        write_point_data_csv(&path, &mesh, &s).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "x,y,u1,u2,v,u");
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(parse_f64(first[5]).unwrap(), 0.1 + 0.4);
    }
}
