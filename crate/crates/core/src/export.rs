//! CSV and PGM writers, plus coincidence-matrix CSV round trips.
//!
//! Floats are written with Rust's shortest round-trip formatting, so output
//! is byte-identical for identical inputs and parses back exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::epr::{EprReport, ScalingTable};
use crate::error::{Error, Result};
use crate::jpd::Projection;
use crate::witness::{Basis, CoincidenceMatrix, ModeGrid, WitnessReport};

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `row,col,value` lines for every bin.
pub fn projection_csv(p: &Projection) -> String {
    let mut s = String::from("row,col,value\n");
    for y in 0..p.height {
        for x in 0..p.width {
            let _ = writeln!(s, "{y},{x},{}", p.at(x, y));
        }
    }
    s
}

pub fn write_projection_csv(p: &Projection, path: &Path) -> Result<()> {
    write_file(path, projection_csv(p).as_bytes())
}

/// Min-max scaling used for a heatmap; `value = min + level / 65535 · (max − min)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatmapScale {
    pub min: f64,
    pub max: f64,
}

/// Binary 16-bit PGM (P5, big-endian samples) with linear min-max scaling.
pub fn projection_pgm(p: &Projection) -> (Vec<u8>, HeatmapScale) {
    let min = p.values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = p.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let mut out = format!("P5\n{} {}\n65535\n", p.width, p.height).into_bytes();
    out.reserve(p.values.len() * 2);
    for &v in &p.values {
        let level = if range > 0.0 {
            ((v - min) / range * 65535.0).round() as u16
        } else {
            0
        };
        out.extend_from_slice(&level.to_be_bytes());
    }
    (out, HeatmapScale { min, max })
}

/// Writes `path` and a `<path>.scale` sidecar holding the scaling.
pub fn write_projection_pgm(p: &Projection, path: &Path) -> Result<HeatmapScale> {
    let (bytes, scale) = projection_pgm(p);
    write_file(path, &bytes)?;
    let mut side = path.as_os_str().to_owned();
    side.push(".scale");
    let text = format!("min={}\nmax={}\nlevels=65535\n", scale.min, scale.max);
    write_file(Path::new(&side), text.as_bytes())?;
    Ok(scale)
}

/// Header line: `# basis=<b> d=<d> origin=<x>,<y> side=<s> spacing=<g>`.
pub fn matrix_csv(m: &CoincidenceMatrix, grid: &ModeGrid) -> String {
    let mut s = format!(
        "# basis={} d={} origin={},{} side={} spacing={}\n",
        m.basis, m.d, grid.origin.0, grid.origin.1, grid.side, grid.spacing
    );
    for row in m.counts.chunks(m.d) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

pub fn write_matrix_csv(m: &CoincidenceMatrix, grid: &ModeGrid, path: &Path) -> Result<()> {
    write_file(path, matrix_csv(m, grid).as_bytes())
}

/// Grid description read back from a matrix header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatrixHeader {
    pub basis: Basis,
    pub d: usize,
    pub origin: (usize, usize),
    pub side: usize,
    pub spacing: usize,
}

pub fn parse_matrix_csv(text: &str) -> Result<(CoincidenceMatrix, MatrixHeader)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let head = lines
        .next()
        .and_then(|l| l.strip_prefix('#'))
        .ok_or_else(|| Error::Parse("missing '#' header line".into()))?;
    let mut basis = None;
    let (mut d, mut origin, mut side, mut spacing) = (None, None, None, None);
    for field in head.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("bad header field '{field}'")))?;
        let num = |v: &str| v.parse::<usize>().map_err(|_| Error::Parse(format!("bad number '{v}'")));
        match k {
            "basis" => basis = Some(v.parse::<Basis>()?),
            "d" => d = Some(num(v)?),
            "side" => side = Some(num(v)?),
            "spacing" => spacing = Some(num(v)?),
            "origin" => {
                let (x, y) = v
                    .split_once(',')
                    .ok_or_else(|| Error::Parse(format!("bad origin '{v}'")))?;
                origin = Some((num(x)?, num(y)?));
            }
            _ => {}
        }
    }
    let missing = |k: &str| Error::Parse(format!("header lacks '{k}'"));
    let header = MatrixHeader {
        basis: basis.ok_or_else(|| missing("basis"))?,
        d: d.ok_or_else(|| missing("d"))?,
        origin: origin.ok_or_else(|| missing("origin"))?,
        side: side.ok_or_else(|| missing("side"))?,
        spacing: spacing.ok_or_else(|| missing("spacing"))?,
    };
    let mut counts = Vec::with_capacity(header.d * header.d);
    for (r, line) in lines.enumerate() {
        let row: Vec<f64> = line
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("row {r}: bad value '{v}'")))
            })
            .collect::<Result<_>>()?;
        if row.len() != header.d {
            return Err(Error::Parse(format!(
                "row {r} has {} values, expected {}",
                row.len(),
                header.d
            )));
        }
        counts.extend(row);
    }
    let m = CoincidenceMatrix::new(header.basis, header.d, counts)?;
    Ok((m, header))
}

pub fn read_matrix_csv(path: &Path) -> Result<(CoincidenceMatrix, MatrixHeader)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix_csv(&text)
}

/// `r,bound,exceeded` for every `B_r`.
pub fn bounds_csv(r: &WitnessReport) -> String {
    let mut s = String::from("r,bound,exceeded\n");
    let f = r.f_conservative();
    for (k, b) in r.bounds() {
        let _ = writeln!(s, "{k},{b},{}", f > b);
    }
    s
}

pub fn epr_csv(r: &EprReport) -> String {
    format!(
        "n_frames,delta_r,delta_r_err,delta_k,delta_k_err,product,sigma_product,confidence,violates,confident\n\
         {},{},{},{},{},{},{},{},{},{}\n",
        r.n_frames,
        r.delta_r,
        r.delta_r_err,
        r.delta_k,
        r.delta_k_err,
        r.product,
        r.sigma_product,
        r.confidence,
        r.violates(),
        r.confident()
    )
}

pub fn scaling_csv(t: &ScalingTable) -> String {
    let mut s = String::from("n_frames,delta_r,delta_k,product,sigma_product,confidence,excluded\n");
    for row in &t.rows {
        match &row.analysis {
            Some(a) => {
                let r = &a.report;
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{}",
                    row.n_frames,
                    r.delta_r,
                    r.delta_k,
                    r.product,
                    r.sigma_product,
                    r.confidence,
                    row.excluded.as_deref().unwrap_or("")
                );
            }
            None => {
                let _ = writeln!(
                    s,
                    "{},,,,,,{}",
                    row.n_frames,
                    row.excluded.as_deref().unwrap_or("")
                );
            }
        }
    }
    let _ = writeln!(s, "# fit C = c*sqrt(N): c={} r_squared={}", t.coefficient, t.r_squared);
    s
}
