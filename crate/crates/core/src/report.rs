//! Results tables from the evaluation side, rendered as a pivot table and an
//! SVG chart of perplexity against the tuple budget.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{self, BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAX_SERIES: usize = 6;
const HEADER: [&str; 6] = ["dataset", "model", "method", "template", "k", "perplexity"];

#[derive(Clone, Debug, PartialEq)]
pub struct ResultsRow {
    pub dataset: String,
    pub model: String,
    pub method: String,
    pub template: String,
    pub k: usize,
    pub perplexity: f64,
}

impl ResultsRow {
    /// Series label, e.g. `freq/auto`.
    pub fn series(&self) -> String {
        format!("{}/{}", self.method, self.template)
    }
}

/// Parse tab-separated rows. A leading header line is skipped; blank lines
/// are ignored.
pub fn read_results(path: &Path, input: impl BufRead) -> Result<Vec<ResultsRow>> {
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in input.lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if rows.is_empty() && seen.is_empty() && fields == HEADER {
            continue;
        }
        if fields.len() != HEADER.len() {
            return Err(Error::parse(
                path,
                n,
                format!("expected {} tab-separated fields, found {}", HEADER.len(), fields.len()),
            ));
        }
        let k: usize = fields[4]
            .parse()
            .map_err(|_| Error::parse(path, n, format!("bad k {:?}", fields[4])))?;
        let perplexity: f64 = fields[5]
            .parse()
            .map_err(|_| Error::parse(path, n, format!("bad perplexity {:?}", fields[5])))?;
        if !(perplexity.is_finite() && perplexity > 0.0) {
            return Err(Error::parse(path, n, format!("perplexity must be positive, got {perplexity}")));
        }
        let row = ResultsRow {
            dataset: fields[0].to_owned(),
            model: fields[1].to_owned(),
            method: fields[2].to_owned(),
            template: fields[3].to_owned(),
            k,
            perplexity,
        };
        if !seen.insert((row.method.clone(), row.template.clone(), k)) {
            return Err(Error::parse(
                path,
                n,
                format!("duplicate row for method {}, template {}, k {k}", row.method, row.template),
            ));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::parse(path, 0, "no result rows"));
    }
    Ok(rows)
}

pub fn write_results(rows: &[ResultsRow], mut out: impl Write) -> io::Result<()> {
    writeln!(out, "{}", HEADER.join("\t"))?;
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.dataset, r.model, r.method, r.template, r.k, r.perplexity
        )?;
    }
    Ok(())
}

/// Perplexity by series and k.
#[derive(Clone, Debug, PartialEq)]
pub struct Pivot {
    pub ks: Vec<usize>,
    pub series: BTreeMap<String, BTreeMap<usize, f64>>,
}

pub fn pivot(rows: &[ResultsRow]) -> Result<Pivot> {
    let mut series: BTreeMap<String, BTreeMap<usize, f64>> = BTreeMap::new();
    let mut ks = BTreeSet::new();
    for r in rows {
        series.entry(r.series()).or_default().insert(r.k, r.perplexity);
        ks.insert(r.k);
    }
    if series.is_empty() {
        return Err(Error::InvalidArgument("no result rows".into()));
    }
    if series.len() > MAX_SERIES {
        return Err(Error::InvalidArgument(format!(
            "{} series, at most {MAX_SERIES} can be plotted",
            series.len()
        )));
    }
    Ok(Pivot {
        ks: ks.into_iter().collect(),
        series,
    })
}

/// `series<TAB>k1<TAB>k2...`, one row per series; missing cells are `-`.
pub fn write_pivot_table(p: &Pivot, mut out: impl Write) -> io::Result<()> {
    write!(out, "series")?;
    for k in &p.ks {
        write!(out, "\t{k}")?;
    }
    writeln!(out)?;
    for (name, cells) in &p.series {
        write!(out, "{name}")?;
        for k in &p.ks {
            match cells.get(k) {
                Some(v) => write!(out, "\t{v:.2}")?,
                None => write!(out, "\t-")?,
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

const PALETTE: [&str; MAX_SERIES] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A line chart with k on a logarithmic axis.
pub fn render_svg(p: &Pivot, title: &str) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 150.0, 40.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);

    let lk = |k: usize| (k.max(1) as f64).ln();
    let (kmin, kmax) = (lk(p.ks[0]), lk(*p.ks.last().unwrap()));
    let values = p.series.values().flat_map(|c| c.values().copied());
    let (mut ymin, mut ymax) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let pad = ((ymax - ymin) * 0.1).max(ymax.abs() * 0.01).max(1e-9);
    ymin -= pad;
    ymax += pad;
    let x = |k: usize| {
        if kmax > kmin {
            left + (lk(k) - kmin) / (kmax - kmin) * pw
        } else {
            left + pw / 2.0
        }
    };
    let y = |v: f64| top + (ymax - v) / (ymax - ymin) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{left} {top} V{} H{}" fill="none" stroke="black"/>"#,
        top + ph,
        left + pw
    );
    for &k in &p.ks {
        let xk = x(k);
        let _ = writeln!(
            s,
            r#"<line x1="{xk:.1}" y1="{}" x2="{xk:.1}" y2="{}" stroke="black"/><text x="{xk:.1}" y="{}" text-anchor="middle">{k}</text>"#,
            top + ph,
            top + ph + 5.0,
            top + ph + 18.0
        );
    }
    for i in 0..=4 {
        let v = ymin + (ymax - ymin) * f64::from(i) / 4.0;
        let yv = y(v);
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{yv:.1}" x2="{left}" y2="{yv:.1}" stroke="black"/><text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"#,
            left - 5.0,
            left - 8.0,
            yv + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">k (tuples)</text>"#,
        left + pw / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(18 {}) rotate(-90)" text-anchor="middle">perplexity</text>"#,
        top + ph / 2.0
    );
    for (i, (name, cells)) in p.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = cells.iter().map(|(&k, &v)| format!("{:.1},{:.1}", x(k), y(v))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        for (&k, &v) in cells {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                x(k),
                y(v)
            );
        }
        let ly = top + 10.0 + 18.0 * i as f64;
        let lx = left + pw + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}
