//! Entanglement-dimensionality witness from two-basis coincidence matrices.
//!
//! The fidelity of the measured state with the maximally entangled state on
//! `d` modes is bounded from below by `F̃ = F₁ + F̃₂`. `F₁` comes from the
//! position-basis diagonal, and `F̃₂` from the momentum-basis diagonal minus
//! a correction built from position-basis off-diagonal entries. A state of
//! Schmidt number `r` cannot exceed fidelity `r/d`, so `F̃ > (r−1)/d`
//! certifies at least `r` entangled dimensions.
//!
//! Normalisation: the target state carries its `1/d`, so ideal data gives
//! `F₁ = 1/d`, `F̃₂ = (d−1)/d` and `F̃ = 1`.

use std::fmt;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frames::{FrameSet, SensorGeometry};
use crate::jpd::AccumStats;

/// Square grid of sensor pixels that defines the discrete modes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModeGrid {
    pub side: usize,
    pub spacing: usize,
    pub origin: (usize, usize),
    sensor: (usize, usize),
    pixels: Vec<usize>,
}

impl ModeGrid {
    pub fn d(&self) -> usize {
        self.side * self.side
    }

    /// Pixels covered along each side.
    pub fn span(&self) -> usize {
        span(self.side, self.spacing)
    }

    /// Sensor pixel of mode `m`.
    pub fn pixel(&self, m: usize) -> usize {
        self.pixels[m]
    }

    pub fn pixels(&self) -> &[usize] {
        &self.pixels
    }

    pub fn sensor(&self) -> (usize, usize) {
        self.sensor
    }
}

fn span(side: usize, spacing: usize) -> usize {
    side + (side - 1) * spacing
}

/// Lays out `side × side` modes, `spacing` unused pixels apart, labelled in
/// row-major order. Without an origin the grid is centred on the sensor.
pub fn select_grid(
    geometry: &SensorGeometry,
    side: usize,
    spacing: usize,
    origin: Option<(usize, usize)>,
) -> Result<ModeGrid> {
    if side < 2 {
        return Err(Error::InvalidParam(format!("grid side must be >= 2, got {side}")));
    }
    let s = span(side, spacing);
    let (w, h) = (geometry.width, geometry.height);
    if s > w || s > h {
        return Err(Error::GridOverflow(format!(
            "grid spans {s}x{s} but the sensor is {w}x{h}"
        )));
    }
    let origin = origin.unwrap_or(((w - s) / 2, (h - s) / 2));
    if origin.0 + s > w || origin.1 + s > h {
        return Err(Error::GridOverflow(format!(
            "grid at ({}, {}) spanning {s} leaves the {w}x{h} sensor",
            origin.0, origin.1
        )));
    }
    let step = spacing + 1;
    let pixels = (0..side)
        .flat_map(|r| (0..side).map(move |c| (r, c)))
        .map(|(r, c)| geometry.index(origin.0 + c * step, origin.1 + r * step))
        .collect();
    Ok(ModeGrid {
        side,
        spacing,
        origin,
        sensor: (w, h),
        pixels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Basis {
    Position,
    Momentum,
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Basis::Position => "position",
            Basis::Momentum => "momentum",
        })
    }
}

impl std::str::FromStr for Basis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "position" => Ok(Basis::Position),
            "momentum" => Ok(Basis::Momentum),
            _ => Err(Error::Parse(format!("unknown basis '{s}'"))),
        }
    }
}

/// Horizontal neighbour, to the right unless that leaves the sensor.
fn neighbour(pixel: usize, width: usize) -> usize {
    if pixel % width + 1 < width {
        pixel + 1
    } else {
        pixel - 1
    }
}

/// Point reflection through the sensor centre.
fn reflect(pixel: usize, width: usize, height: usize) -> usize {
    let (x, y) = (pixel % width, pixel / width);
    (height - 1 - y) * width + (width - 1 - x)
}

/// The sensor pixel pair whose coincidences stand for matrix entry `(m, n)`.
///
/// Position basis: the two mode pixels. Momentum basis: the second photon's
/// mode is read at the point-reflected pixel, since momentum conservation
/// sends partners through the origin. A pair that would collapse onto one
/// pixel uses the horizontal neighbour instead, because a binary pixel
/// cannot see its own coincidences.
pub fn entry_pixels(grid: &ModeGrid, basis: Basis, m: usize, n: usize) -> (usize, usize) {
    let (w, h) = grid.sensor;
    let a = grid.pixel(m);
    let b = match basis {
        Basis::Position => grid.pixel(n),
        Basis::Momentum => reflect(grid.pixel(n), w, h),
    };
    if a == b {
        (a, neighbour(a, w))
    } else {
        (a, b)
    }
}

/// Integer statistics restricted to the `d²` pixel pairs a grid reads.
/// Small enough to keep one per jackknife block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModeStats {
    pub basis: Basis,
    pub d: usize,
    pub n_frames: u64,
    pair: Vec<u64>,
    first: Vec<u64>,
    second: Vec<u64>,
}

impl ModeStats {
    pub fn from_stats(stats: &AccumStats, grid: &ModeGrid, basis: Basis) -> Result<Self> {
        let g = stats.geometry();
        if (g.width, g.height) != grid.sensor {
            return Err(Error::GeometryMismatch(format!(
                "grid laid out on {}x{}, statistics are {}x{}",
                grid.sensor.0, grid.sensor.1, g.width, g.height
            )));
        }
        let d = grid.d();
        let mut pair = Vec::with_capacity(d * d);
        let mut first = Vec::with_capacity(d * d);
        let mut second = Vec::with_capacity(d * d);
        for m in 0..d {
            for n in 0..d {
                let (a, b) = entry_pixels(grid, basis, m, n);
                pair.push(stats.pair_count(a, b));
                first.push(stats.marginal()[a]);
                second.push(stats.marginal()[b]);
            }
        }
        Ok(Self {
            basis,
            d,
            n_frames: stats.n_frames(),
            pair,
            first,
            second,
        })
    }

    fn check(&self, other: &ModeStats) -> Result<()> {
        if self.d != other.d || self.basis != other.basis {
            return Err(Error::GeometryMismatch("mode statistics on different grids".into()));
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ModeStats) -> Result<()> {
        self.check(other)?;
        self.n_frames += other.n_frames;
        for (v, o) in [
            (&mut self.pair, &other.pair),
            (&mut self.first, &other.first),
            (&mut self.second, &other.second),
        ] {
            v.iter_mut().zip(o).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    /// `self` minus a sub-stream `other`.
    pub fn without(&self, other: &ModeStats) -> Result<ModeStats> {
        self.check(other)?;
        let sub = |a: &[u64], b: &[u64]| -> Result<Vec<u64>> {
            a.iter()
                .zip(b)
                .map(|(x, y)| {
                    x.checked_sub(*y)
                        .ok_or_else(|| Error::InvalidParam("block is not part of the total".into()))
                })
                .collect()
        };
        Ok(ModeStats {
            basis: self.basis,
            d: self.d,
            n_frames: self
                .n_frames
                .checked_sub(other.n_frames)
                .ok_or_else(|| Error::InvalidParam("block is not part of the total".into()))?,
            pair: sub(&self.pair, &other.pair)?,
            first: sub(&self.first, &other.first)?,
            second: sub(&self.second, &other.second)?,
        })
    }

    /// Accidental-subtracted coincidence counts, clamped at zero.
    pub fn to_matrix(&self) -> CoincidenceMatrix {
        let n = self.n_frames as f64;
        let counts = if self.n_frames == 0 {
            vec![0.0; self.d * self.d]
        } else {
            self.pair
                .iter()
                .zip(self.first.iter().zip(&self.second))
                .map(|(&c, (&sa, &sb))| (c as f64 - sa as f64 * sb as f64 / n).max(0.0))
                .collect()
        };
        CoincidenceMatrix {
            basis: self.basis,
            d: self.d,
            counts,
        }
    }
}

/// `d × d` genuine coincidence counts between modes, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CoincidenceMatrix {
    pub basis: Basis,
    pub d: usize,
    pub counts: Vec<f64>,
}

impl CoincidenceMatrix {
    pub fn new(basis: Basis, d: usize, counts: Vec<f64>) -> Result<Self> {
        if counts.len() != d * d {
            return Err(Error::InvalidParam(format!(
                "expected {} entries for d = {d}, got {}",
                d * d,
                counts.len()
            )));
        }
        if counts.iter().any(|&c| !c.is_finite() || c < 0.0) {
            return Err(Error::InvalidParam("counts must be finite and non-negative".into()));
        }
        Ok(Self { basis, d, counts })
    }

    /// Noiseless perfectly correlated matrix: mass only on the diagonal.
    pub fn ideal(basis: Basis, d: usize) -> Self {
        let mut counts = vec![0.0; d * d];
        for m in 0..d {
            counts[m * d + m] = 1.0;
        }
        Self { basis, d, counts }
    }

    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.counts[m * self.d + n]
    }

    /// Entries divided by their total; all zero when the total is zero.
    pub fn normalized(&self) -> Vec<f64> {
        let total: f64 = self.counts.iter().sum();
        if total > 0.0 {
            self.counts.iter().map(|c| c / total).collect()
        } else {
            vec![0.0; self.counts.len()]
        }
    }

    pub fn diagonal_mass(&self) -> f64 {
        let p = self.normalized();
        (0..self.d).map(|m| p[m * self.d + m]).sum()
    }
}

pub fn coincidence_matrix(stats: &AccumStats, grid: &ModeGrid, basis: Basis) -> Result<CoincidenceMatrix> {
    Ok(ModeStats::from_stats(stats, grid, basis)?.to_matrix())
}

/// `F₁ = (1/d) Σ_m ⟨mm|ρ|mm⟩`.
pub fn compute_f1(pos: &CoincidenceMatrix) -> f64 {
    pos.diagonal_mass() / pos.d as f64
}

/// Whether a quadruple enters the cross term: the modular condition on
/// `m − m' − n + n'` and the four inequalities.
pub fn cross_term_admits(d: usize, m: usize, n: usize, mp: usize, np: usize) -> bool {
    let modular = (m + np + 2 * d - mp - n).is_multiple_of(d);
    modular && m != np && m != n && n != np && np != mp
}

/// `F̃₂ = Σ_p ⟨p̃p̃|ρ|p̃p̃⟩ − 1/d − (1/d) Σ' √(⟨mn|ρ|mn⟩⟨m'n'|ρ|m'n'⟩)`.
///
/// For fixed `(m, n, m')` the modular condition fixes `n'`, so the sum has
/// `d³` candidate terms. Partial sums per `m` are combined in ascending order.
pub fn compute_f2_lower(pos: &CoincidenceMatrix, mom: &CoincidenceMatrix) -> Result<f64> {
    if pos.d != mom.d {
        return Err(Error::GeometryMismatch(format!(
            "position matrix has d = {}, momentum matrix d = {}",
            pos.d, mom.d
        )));
    }
    let d = pos.d;
    let roots: Vec<f64> = pos.normalized().into_iter().map(f64::sqrt).collect();
    let partial: Vec<f64> = (0..d)
        .into_par_iter()
        .map(|m| {
            let mut acc = 0.0;
            for n in 0..d {
                if n == m {
                    continue;
                }
                let r_mn = roots[m * d + n];
                if r_mn == 0.0 {
                    continue;
                }
                let shift = n + d - m;
                let mut inner = 0.0;
                for mp in 0..d {
                    let np = (mp + shift) % d;
                    if m != np && n != np && np != mp {
                        inner += roots[mp * d + np];
                    }
                }
                acc += r_mn * inner;
            }
            acc
        })
        .collect();
    let cross: f64 = partial.iter().sum::<f64>() / d as f64;
    Ok(mom.diagonal_mass() - 1.0 / d as f64 - cross)
}

pub const CONVENTION: &str = "target state normalised with 1/d (ideal data gives F = 1)";
pub const MOMENTUM_LABELS: &str = "momentum partner modes read at the point-reflected pixel";

#[derive(Debug, Clone, PartialEq)]
pub struct WitnessReport {
    pub d: usize,
    pub f1: f64,
    pub f2_tilde: f64,
    pub f_tilde: f64,
    /// Standard error of `f_tilde`; zero when no blocks were available.
    pub uncertainty: f64,
    pub f1_uncertainty: f64,
    pub f2_uncertainty: f64,
    pub d_ent: usize,
    pub n_blocks: usize,
}

impl WitnessReport {
    pub fn f_conservative(&self) -> f64 {
        self.f_tilde - self.uncertainty
    }

    /// `B_r = r/d` for `r = 1..=d`.
    pub fn bounds(&self) -> Vec<(usize, f64)> {
        (1..=self.d).map(|r| (r, r as f64 / self.d as f64)).collect()
    }
}

impl fmt::Display for WitnessReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "d             {}", self.d)?;
        writeln!(f, "F1            {:.6} +- {:.6}", self.f1, self.f1_uncertainty)?;
        writeln!(f, "F2_tilde      {:.6} +- {:.6}", self.f2_tilde, self.f2_uncertainty)?;
        writeln!(f, "F_tilde       {:.6} +- {:.6}", self.f_tilde, self.uncertainty)?;
        writeln!(f, "F_certified   {:.6}", self.f_conservative())?;
        writeln!(f, "d_ent         {}", self.d_ent)?;
        writeln!(f, "blocks        {}", self.n_blocks)?;
        writeln!(f, "convention    {CONVENTION}")?;
        write!(f, "labels        {MOMENTUM_LABELS}")
    }
}

/// Largest `r ≤ d` with `f > (r−1)/d`, at least 1.
pub fn certified_dimension(f: f64, d: usize) -> usize {
    (1..=d)
        .rev()
        .find(|&r| f > (r - 1) as f64 / d as f64)
        .unwrap_or(1)
}

pub fn certify(f1: f64, f2_tilde: f64, uncertainty: f64, d: usize) -> Result<WitnessReport> {
    if d < 2 {
        return Err(Error::InvalidParam(format!("d must be >= 2, got {d}")));
    }
    if uncertainty.is_nan() || uncertainty < 0.0 {
        return Err(Error::InvalidParam("uncertainty must be non-negative".into()));
    }
    let f_tilde = f1 + f2_tilde;
    Ok(WitnessReport {
        d,
        f1,
        f2_tilde,
        f_tilde,
        uncertainty,
        f1_uncertainty: 0.0,
        f2_uncertainty: 0.0,
        d_ent: certified_dimension(f_tilde - uncertainty, d),
        n_blocks: 0,
    })
}

fn evaluate(nf: &ModeStats, ff: &ModeStats) -> Result<(f64, f64)> {
    let pos = nf.to_matrix();
    let mom = ff.to_matrix();
    Ok((compute_f1(&pos), compute_f2_lower(&pos, &mom)?))
}

/// Jackknife standard error of leave-one-out estimates.
pub fn jackknife_se(values: &[f64]) -> f64 {
    let k = values.len();
    if k < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    ((k - 1) as f64 / k as f64 * ss).sqrt()
}

/// Witness from per-block statistics; the point estimate uses all blocks,
/// the uncertainty the leave-one-block-out jackknife.
pub fn witness_from_blocks(nf_blocks: &[ModeStats], ff_blocks: &[ModeStats]) -> Result<WitnessReport> {
    if nf_blocks.is_empty() || nf_blocks.len() != ff_blocks.len() {
        return Err(Error::InvalidParam(format!(
            "need matching non-empty block lists, got {} and {}",
            nf_blocks.len(),
            ff_blocks.len()
        )));
    }
    let total = |blocks: &[ModeStats]| -> Result<ModeStats> {
        let mut t = blocks[0].clone();
        for b in &blocks[1..] {
            t.merge(b)?;
        }
        Ok(t)
    };
    let nf = total(nf_blocks)?;
    let ff = total(ff_blocks)?;
    if nf.basis != Basis::Position || ff.basis != Basis::Momentum {
        return Err(Error::InvalidParam("expected position (NF) and momentum (FF) statistics".into()));
    }
    let (f1, f2) = evaluate(&nf, &ff)?;
    let k = nf_blocks.len();
    let (mut f1s, mut f2s, mut fs) = (Vec::new(), Vec::new(), Vec::new());
    if k >= 2 {
        for (bn, bf) in nf_blocks.iter().zip(ff_blocks) {
            let (a, b) = evaluate(&nf.without(bn)?, &ff.without(bf)?)?;
            f1s.push(a);
            f2s.push(b);
            fs.push(a + b);
        }
    }
    let uncertainty = jackknife_se(&fs);
    let mut report = certify(f1, f2, uncertainty, nf.d)?;
    report.f1_uncertainty = jackknife_se(&f1s);
    report.f2_uncertainty = jackknife_se(&f2s);
    report.n_blocks = k;
    Ok(report)
}

/// Witness from whole-run statistics. No blocks means no error estimate, so
/// the uncertainty is zero.
pub fn witness_pipeline(nf_stats: &AccumStats, ff_stats: &AccumStats, grid: &ModeGrid) -> Result<Timed<WitnessReport>> {
    let start = Instant::now();
    let nf = ModeStats::from_stats(nf_stats, grid, Basis::Position)?;
    let ff = ModeStats::from_stats(ff_stats, grid, Basis::Momentum)?;
    let mut r = witness_from_blocks(&[nf], &[ff])?;
    r.n_blocks = 0;
    Ok(Timed {
        value: r,
        elapsed: start.elapsed(),
    })
}

pub const DEFAULT_BLOCKS: usize = 20;

/// Splits each frame set into `n_blocks` contiguous blocks and runs the
/// jackknife witness. Also returns the whole-run statistics.
pub fn witness_from_frames(
    nf: &FrameSet,
    ff: &FrameSet,
    grid: &ModeGrid,
    n_blocks: usize,
) -> Result<(Timed<WitnessReport>, AccumStats, AccumStats)> {
    let start = Instant::now();
    let (nf_stats, nf_blocks) = blocked_mode_stats(nf, grid, Basis::Position, n_blocks)?;
    let (ff_stats, ff_blocks) = blocked_mode_stats(ff, grid, Basis::Momentum, n_blocks)?;
    let report = witness_from_blocks(&nf_blocks, &ff_blocks)?;
    Ok((
        Timed {
            value: report,
            elapsed: start.elapsed(),
        },
        nf_stats,
        ff_stats,
    ))
}

/// Contiguous block boundaries `[k·N/K, (k+1)·N/K)`.
pub fn block_bounds(n_frames: usize, n_blocks: usize) -> Vec<std::ops::Range<usize>> {
    (0..n_blocks)
        .map(|k| (k * n_frames / n_blocks)..((k + 1) * n_frames / n_blocks))
        .collect()
}

/// Accumulates `frames` block by block, returning the total statistics and
/// the per-block grid statistics.
pub fn blocked_mode_stats(
    frames: &FrameSet,
    grid: &ModeGrid,
    basis: Basis,
    n_blocks: usize,
) -> Result<(AccumStats, Vec<ModeStats>)> {
    if n_blocks == 0 {
        return Err(Error::InvalidParam("need at least one block".into()));
    }
    let mut total = AccumStats::new(*frames.geometry());
    let mut blocks = Vec::with_capacity(n_blocks);
    for range in block_bounds(frames.n_frames(), n_blocks) {
        let s = crate::jpd::accumulate(&frames.slice(range));
        blocks.push(ModeStats::from_stats(&s, grid, basis)?);
        total.merge(&s)?;
    }
    Ok((total, blocks))
}

/// A value with the wall-clock time it took to compute.
#[derive(Debug, Clone, PartialEq)]
pub struct Timed<T> {
    pub value: T,
    pub elapsed: Duration,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_examples() {
        let g = SensorGeometry::paper();
        let grid = select_grid(&g, 14, 1, None).unwrap();
        assert_eq!(grid.span(), 27);
        assert_eq!(grid.d(), 196);
        assert_eq!(grid.origin, ((64 - 27) / 2, (32 - 27) / 2));

        let g = SensorGeometry::square(8).unwrap();
        let grid = select_grid(&g, 2, 0, Some((0, 0))).unwrap();
        let coords: Vec<_> = grid.pixels().iter().map(|&p| g.coords(p)).collect();
        assert_eq!(coords, vec![(0, 0), (1, 0), (0, 1), (1, 1)]);

        assert_eq!(select_grid(&g, 4, 1, None).unwrap().span(), 7);
        assert!(matches!(select_grid(&g, 4, 2, None), Err(Error::GridOverflow(_))));
        assert!(select_grid(&g, 4, 1, Some((2, 0))).is_err());
    }

    #[test]
    #[allow(clippy::identity_op)]
    fn gamma_rule_examples() {
        for d in [4, 9] {
            assert_eq!((0 + 3 + 2 * d - 2 - 1) % d, 0);
            assert_ne!((0 + 2 + 2 * d - 0 - 1) % d, 0);
        }
        // (0,1,2,3) passes the modular rule and every inequality
        assert!(cross_term_admits(4, 0, 1, 2, 3));
        assert!(!cross_term_admits(4, 0, 1, 0, 2));
    }

    #[test]
    fn ideal_data_reaches_unit_fidelity() {
        for d in [4, 9, 16, 196] {
            let pos = CoincidenceMatrix::ideal(Basis::Position, d);
            let mom = CoincidenceMatrix::ideal(Basis::Momentum, d);
            let f1 = compute_f1(&pos);
            let f2 = compute_f2_lower(&pos, &mom).unwrap();
            assert!((f1 - 1.0 / d as f64).abs() < 1e-15);
            assert!((f2 - (d - 1) as f64 / d as f64).abs() < 1e-12);
            assert!((f1 + f2 - 1.0).abs() < 1e-12);
            assert_eq!(certify(f1, f2, 0.0, d).unwrap().d_ent, d);
        }
    }

    #[test]
    fn zero_diagonal_gives_zero_f1() {
        let d = 4;
        let mut c = vec![1.0; d * d];
        for m in 0..d {
            c[m * d + m] = 0.0;
        }
        let m = CoincidenceMatrix::new(Basis::Position, d, c).unwrap();
        assert_eq!(compute_f1(&m), 0.0);
    }

    #[test]
    fn certification_boundaries() {
        let r = certify(0.252, 0.0, 0.009, 196).unwrap();
        assert_eq!(r.d_ent, 48);
        let d = 16;
        assert_eq!(certify(1.0 / d as f64, 0.0, 0.0, d).unwrap().d_ent, 1);
        assert_eq!(certify(0.0, -0.3, 0.0, d).unwrap().d_ent, 1);
        assert_eq!(certify(1.0, 0.0, 0.0, d).unwrap().d_ent, d);
        assert!(certify(0.5, 0.0, 0.0, 1).is_err());
    }

    #[test]
    fn zero_rows_normalise_over_remaining_mass() {
        let d = 3;
        let mut c = vec![0.0; 9];
        c[4] = 2.0;
        c[8] = 2.0;
        let m = CoincidenceMatrix::new(Basis::Position, d, c).unwrap();
        let p = m.normalized();
        assert_eq!(p[4], 0.5);
        assert_eq!(p[0], 0.0);
        let empty = CoincidenceMatrix::new(Basis::Position, d, vec![0.0; 9]).unwrap();
        assert!(empty.normalized().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn entry_pixels_rules() {
        let g = SensorGeometry::new(7, 7, 1.0, 1.0).unwrap();
        let grid = select_grid(&g, 2, 5, Some((0, 0))).unwrap();
        // mode 1 sits at the right edge, so its neighbour is to the left
        let (a, b) = entry_pixels(&grid, Basis::Position, 1, 1);
        assert_eq!((g.coords(a), g.coords(b)), ((6, 0), (5, 0)));
        let (a, b) = entry_pixels(&grid, Basis::Position, 0, 0);
        assert_eq!((g.coords(a), g.coords(b)), ((0, 0), (1, 0)));
        let (a, b) = entry_pixels(&grid, Basis::Position, 0, 3);
        assert_eq!((g.coords(a), g.coords(b)), ((0, 0), (6, 6)));
        let (_, b) = entry_pixels(&grid, Basis::Momentum, 0, 0);
        assert_eq!(g.coords(b), (6, 6));

        let g = SensorGeometry::new(3, 3, 1.0, 1.0).unwrap();
        let grid = select_grid(&g, 3, 0, None).unwrap();
        // the centre pixel is its own reflection
        let (a, b) = entry_pixels(&grid, Basis::Momentum, 4, 4);
        assert_eq!((g.coords(a), g.coords(b)), ((1, 1), (2, 1)));
        let (a, b) = entry_pixels(&grid, Basis::Position, 2, 2);
        assert_eq!((g.coords(a), g.coords(b)), ((2, 0), (1, 0)));
    }

    #[test]
    fn jackknife_of_constant_is_zero() {
        assert_eq!(jackknife_se(&[0.3; 5]), 0.0);
        assert_eq!(jackknife_se(&[1.0]), 0.0);
        let se = jackknife_se(&[1.0, 2.0]);
        assert!((se - 0.5f64.sqrt() * 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn block_bounds_partition() {
        let b = block_bounds(103, 20);
        assert_eq!(b.len(), 20);
        assert_eq!(b[0].start, 0);
        assert_eq!(b[19].end, 103);
        assert!(b.windows(2).all(|w| w[0].end == w[1].start));
    }
}
