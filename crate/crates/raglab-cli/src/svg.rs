//! Minimal line plots. Each renderer is a pure function of CSV text: same
//! bytes in, same SVG out, so plots never need separate reproducibility
//! arguments.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::CliError;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 54.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2"];

/// Parse CSV text (leading `#` comment lines allowed, first real line is the
/// header) and render one polyline per distinct value of `group_col`,
/// plotting `x_col` against `y_col`.
pub fn line_plot(
    csv: &str,
    title: &str,
    x_col: &str,
    y_col: &str,
    group_col: &str,
) -> Result<String, CliError> {
    let (header, rows) = parse_csv(csv)?;
    let xi = col(&header, x_col)?;
    let yi = col(&header, y_col)?;
    let gi = col(&header, group_col)?;

    // BTreeMap keeps series order deterministic regardless of row order
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (lineno, row) in rows.iter().enumerate() {
        let x: f64 = parse_num(row, xi, lineno)?;
        let y: f64 = parse_num(row, yi, lineno)?;
        series.entry(row[gi].clone()).or_default().push((x, y));
    }
    if series.is_empty() {
        return Err(CliError::Runtime("no data rows to plot".into()));
    }
    for pts in series.values_mut() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }

    let all = series.values().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"monospace\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    );
    let _ = write!(
        s,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        esc(title)
    );
    // axes
    let _ = write!(
        s,
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        t = MARGIN
    );
    let _ = write!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        H - 14.0,
        esc(x_col)
    );
    let _ = write!(
        s,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        H / 2.0,
        H / 2.0,
        esc(y_col)
    );
    for (v, at_x) in [(x0, MARGIN), (x1, W - MARGIN)] {
        let _ = write!(
            s,
            "<text x=\"{at_x}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            H - MARGIN + 16.0,
            fmt_num(v)
        );
    }
    for (v, at_y) in [(y0, H - MARGIN), (y1, MARGIN)] {
        let _ = write!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            MARGIN - 6.0,
            at_y + 4.0,
            fmt_num(v)
        );
    }

    for (idx, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        let path: Vec<String> =
            pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = write!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            path.join(" ")
        );
        let _ = write!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>\n",
            W - MARGIN + 6.0,
            MARGIN + 16.0 * idx as f64,
            esc(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Scatter plot colored by a label column; used for embedding projections.
pub fn scatter_plot(
    csv: &str,
    title: &str,
    x_col: &str,
    y_col: &str,
    label_col: &str,
) -> Result<String, CliError> {
    let (header, rows) = parse_csv(csv)?;
    let xi = col(&header, x_col)?;
    let yi = col(&header, y_col)?;
    let li = col(&header, label_col)?;

    let mut pts: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (lineno, row) in rows.iter().enumerate() {
        pts.entry(row[li].clone())
            .or_default()
            .push((parse_num(row, xi, lineno)?, parse_num(row, yi, lineno)?));
    }
    if pts.is_empty() {
        return Err(CliError::Runtime("no data rows to plot".into()));
    }
    let all = pts.values().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"monospace\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    );
    let _ = write!(
        s,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        esc(title)
    );
    for (idx, (name, points)) in pts.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        for &(x, y) in points {
            let _ = write!(
                s,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{color}\" fill-opacity=\"0.6\"/>\n",
                px(x),
                py(y)
            );
        }
        let _ = write!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>\n",
            W - MARGIN + 6.0,
            MARGIN + 16.0 * idx as f64,
            esc(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| CliError::Runtime("empty CSV".into()))?
        .split(',')
        .map(|c| c.trim().to_string())
        .collect::<Vec<_>>();
    let mut rows = Vec::new();
    for l in lines {
        let row: Vec<String> = l.split(',').map(|c| c.trim().to_string()).collect();
        if row.len() != header.len() {
            return Err(CliError::Runtime(format!(
                "CSV row has {} fields, header has {}",
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

fn col(header: &[String], name: &str) -> Result<usize, CliError> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::Runtime(format!("CSV has no '{name}' column")))
}

fn parse_num(row: &[String], idx: usize, lineno: usize) -> Result<f64, CliError> {
    row[idx]
        .parse()
        .map_err(|_| CliError::Runtime(format!("row {}: '{}' is not a number", lineno + 1, row[idx])))
}

fn fmt_num(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e9 {
        format!("{v}")
    } else {
        format!("{v:.3}")
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
