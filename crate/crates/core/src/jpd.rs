//! Joint probability distribution of photon pairs from binary frames.
//!
//! Everything is derived from three integer statistics: the frame count `N`,
//! the per-pixel hit counts `S_i` and the pair coincidence counts `C_ij`.
//! The estimator is
//!
//! ```text
//! Γ(i, j) = C_ij / N - S_i S_j / N²
//! ```
//!
//! whose first term counts genuine plus accidental coincidences and whose
//! second term is the accidental rate implied by the marginals.

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::frames::{Frame, FrameSet, SensorGeometry};

/// Exact sufficient statistics of a frame stream.
#[derive(Debug, Clone, PartialEq)]
pub struct AccumStats {
    geometry: SensorGeometry,
    n_frames: u64,
    marginal: Vec<u64>,
    /// Strict upper triangle `i < j`, row-major.
    pairs: Vec<u64>,
    row_base: Vec<usize>,
}

fn row_bases(n: usize) -> Vec<usize> {
    // index(i, j) = row_base[i] + j  (wrapping), for i < j
    (0..n)
        .map(|i| (i * (2 * n - i - 1) / 2).wrapping_sub(i + 1))
        .collect()
}

impl AccumStats {
    pub fn new(geometry: SensorGeometry) -> Self {
        let n = geometry.n_pixels();
        Self {
            geometry,
            n_frames: 0,
            marginal: vec![0; n],
            pairs: vec![0; n * (n - 1) / 2],
            row_base: row_bases(n),
        }
    }

    pub fn geometry(&self) -> &SensorGeometry {
        &self.geometry
    }

    pub fn n_frames(&self) -> u64 {
        self.n_frames
    }

    pub fn n_pixels(&self) -> usize {
        self.marginal.len()
    }

    /// `S_i`, the number of frames in which pixel `i` fired.
    pub fn marginal(&self) -> &[u64] {
        &self.marginal
    }

    #[inline]
    fn tri(&self, i: usize, j: usize) -> usize {
        self.row_base[i].wrapping_add(j)
    }

    /// `C_ij`; on the diagonal this is `S_i`.
    #[inline]
    pub fn pair_count(&self, i: usize, j: usize) -> u64 {
        match i.cmp(&j) {
            std::cmp::Ordering::Less => self.pairs[self.tri(i, j)],
            std::cmp::Ordering::Greater => self.pairs[self.tri(j, i)],
            std::cmp::Ordering::Equal => self.marginal[i],
        }
    }

    /// Adds one frame given its lit pixels in ascending order.
    #[inline]
    pub fn add_lit(&mut self, lit: &[u32]) {
        self.n_frames += 1;
        for (a, &pa) in lit.iter().enumerate() {
            let pa = pa as usize;
            self.marginal[pa] += 1;
            let base = self.row_base[pa];
            for &pb in &lit[a + 1..] {
                self.pairs[base.wrapping_add(pb as usize)] += 1;
            }
        }
    }

    pub fn add_frame(&mut self, frame: Frame<'_>, scratch: &mut Vec<u32>) {
        scratch.clear();
        frame.lit_pixels_into(scratch);
        self.add_lit(scratch);
    }

    fn check_grid(&self, other: &SensorGeometry) -> Result<()> {
        if self.geometry.same_grid(other) {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "statistics are {}x{}, frames are {}x{}",
                self.geometry.width, self.geometry.height, other.width, other.height
            )))
        }
    }

    /// Sequentially adds every frame of `frames`.
    pub fn add_frames(&mut self, frames: &FrameSet) -> Result<()> {
        self.check_grid(frames.geometry())?;
        let mut lit = Vec::with_capacity(64);
        for f in frames.iter() {
            self.add_frame(f, &mut lit);
        }
        Ok(())
    }

    /// Component-wise sum.
    pub fn merge(&mut self, other: &AccumStats) -> Result<()> {
        self.check_grid(&other.geometry)?;
        self.n_frames += other.n_frames;
        for (a, b) in self.marginal.iter_mut().zip(&other.marginal) {
            *a += b;
        }
        self.pairs
            .par_iter_mut()
            .zip(other.pairs.par_iter())
            .with_min_len(1 << 16)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Component-wise difference; `other` must be a sub-stream of `self`.
    pub fn subtract(&mut self, other: &AccumStats) -> Result<()> {
        self.check_grid(&other.geometry)?;
        let underflow = || Error::InvalidParam("subtracting statistics that are not a subset".into());
        self.n_frames = self.n_frames.checked_sub(other.n_frames).ok_or_else(underflow)?;
        for (a, b) in self.marginal.iter_mut().zip(&other.marginal) {
            *a = a.checked_sub(*b).ok_or_else(underflow)?;
        }
        for (a, b) in self.pairs.iter_mut().zip(&other.pairs) {
            *a = a.checked_sub(*b).ok_or_else(underflow)?;
        }
        Ok(())
    }

    fn require_frames(&self, needed: u64) -> Result<()> {
        if self.n_frames < needed {
            Err(Error::NotEnoughFrames {
                needed,
                have: self.n_frames,
            })
        } else {
            Ok(())
        }
    }

    fn check_pixel(&self, p: usize) -> Result<()> {
        if p < self.n_pixels() {
            Ok(())
        } else {
            Err(Error::PixelOutOfBounds {
                pixel: p,
                n_pixels: self.n_pixels(),
            })
        }
    }

    /// `Γ(i, j)·N = C_ij − S_i S_j / N`, the genuine coincidence count.
    pub fn coincidence_excess(&self, i: usize, j: usize) -> f64 {
        let n = self.n_frames as f64;
        self.pair_count(i, j) as f64 - (self.marginal[i] as f64 * self.marginal[j] as f64) / n
    }
}

/// The linear finite-N estimator shared by the production path and the oracle.
#[inline]
pub fn linear_gamma(c_ij: u64, s_i: u64, s_j: u64, n: u64) -> f64 {
    c_ij as f64 / n as f64 - (s_i as u128 * s_j as u128) as f64 / (n as u128 * n as u128) as f64
}

/// Accumulates a frame set, splitting it over the rayon pool.
pub fn accumulate(frames: &FrameSet) -> AccumStats {
    let geometry = *frames.geometry();
    let n = frames.n_frames();
    let workers = rayon::current_num_threads().clamp(1, n.max(1));
    if workers == 1 || n < 4096 {
        let mut stats = AccumStats::new(geometry);
        stats.add_frames(frames).expect("same geometry");
        return stats;
    }
    let per = n.div_ceil(workers);
    let partials: Vec<AccumStats> = (0..workers)
        .into_par_iter()
        .map(|w| {
            let mut s = AccumStats::new(geometry);
            let mut lit = Vec::with_capacity(64);
            for k in (w * per)..((w + 1) * per).min(n) {
                s.add_frame(frames.frame(k), &mut lit);
            }
            s
        })
        .collect();
    let mut iter = partials.into_iter();
    let mut total = iter.next().expect("at least one worker");
    for p in iter {
        total.merge(&p).expect("same geometry");
    }
    total
}

/// Accumulates a chunked stream such as [`crate::frames::stream_frames`].
pub fn accumulate_stream<I>(geometry: SensorGeometry, chunks: I) -> Result<AccumStats>
where
    I: IntoIterator<Item = Result<FrameSet>>,
{
    let mut total = AccumStats::new(geometry);
    let parallel = rayon::current_num_threads() > 1;
    for chunk in chunks {
        let chunk = chunk?;
        total.check_grid(chunk.geometry())?;
        if parallel {
            total.merge(&accumulate(&chunk))?;
        } else {
            total.add_frames(&chunk)?;
        }
    }
    Ok(total)
}

/// Which closed form turns the statistics into Γ.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Estimator {
    /// `⟨I_i I_j⟩ − ⟨I_i⟩⟨I_j⟩`, valid when per-pixel occupancy is ≪ 1.
    #[default]
    Linear,
    /// `A ln(1 + cov / ((1 − ⟨I_i⟩)(1 − ⟨I_j⟩)))`.
    LogCorrected { scale: f64 },
}

/// Read-only Γ accessor over an [`AccumStats`].
#[derive(Debug, Clone, Copy)]
pub struct JpdView<'a> {
    stats: &'a AccumStats,
    estimator: Estimator,
}

impl<'a> JpdView<'a> {
    pub fn new(stats: &'a AccumStats) -> Result<Self> {
        Self::with_estimator(stats, Estimator::Linear)
    }

    pub fn with_estimator(stats: &'a AccumStats, estimator: Estimator) -> Result<Self> {
        stats.require_frames(1)?;
        Ok(Self { stats, estimator })
    }

    pub fn stats(&self) -> &'a AccumStats {
        self.stats
    }

    #[inline]
    pub fn gamma(&self, i: usize, j: usize) -> f64 {
        let s = self.stats;
        let n = s.n_frames;
        let (si, sj) = (s.marginal[i], s.marginal[j]);
        let lin = linear_gamma(s.pair_count(i, j), si, sj, n);
        match self.estimator {
            Estimator::Linear => lin,
            Estimator::LogCorrected { scale } => {
                let pi = si as f64 / n as f64;
                let pj = sj as f64 / n as f64;
                let denom = (1.0 - pi) * (1.0 - pj);
                if denom <= 0.0 {
                    0.0
                } else {
                    scale * (lin / denom).ln_1p()
                }
            }
        }
    }
}

/// `Γ(i, j)` with the linear estimator. Needs at least two frames.
pub fn jpd_element(stats: &AccumStats, i: usize, j: usize) -> Result<f64> {
    stats.require_frames(2)?;
    stats.check_pixel(i)?;
    stats.check_pixel(j)?;
    Ok(JpdView::new(stats)?.gamma(i, j))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionKind {
    /// Γ summed along `r_i + r_j`.
    Sum,
    /// Γ summed along `r_i − r_j`.
    Minus,
    /// Γ(anchor, ·).
    Conditional { anchor: usize },
}

/// A 2D map derived from Γ.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub kind: ProjectionKind,
    pub width: usize,
    pub height: usize,
    /// Row-major, `values[y * width + x]`.
    pub values: Vec<f64>,
    /// Bin of the zero / central coordinate (the anchor for conditionals).
    pub center: (usize, usize),
    pub n_frames: u64,
    /// Peak-to-background ratio, set for conditional projections.
    pub snr: Option<f64>,
}

impl Projection {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Value at an offset from the central bin, if inside the grid.
    pub fn at_offset(&self, dx: isize, dy: isize) -> Option<f64> {
        let x = self.center.0 as isize + dx;
        let y = self.center.1 as isize + dy;
        (x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height)
            .then(|| self.at(x as usize, y as usize))
    }

    /// Bin of the largest value, ignoring `skip`.
    pub fn argmax_excluding(&self, skip: Option<(usize, usize)>) -> (usize, usize) {
        let mut best = (0, 0);
        let mut best_v = f64::NEG_INFINITY;
        for y in 0..self.height {
            for x in 0..self.width {
                if Some((x, y)) == skip {
                    continue;
                }
                let v = self.at(x, y);
                if v > best_v {
                    best_v = v;
                    best = (x, y);
                }
            }
        }
        best
    }

    /// Peak value over the standard deviation of all bins farther than
    /// `radius` from the peak. `skip` is left out of both.
    pub fn peak_snr(&self, radius: f64, skip: Option<(usize, usize)>) -> f64 {
        let peak = self.argmax_excluding(skip);
        let r2 = radius * radius;
        let bg: Vec<f64> = (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .filter(|&b| Some(b) != skip)
            .filter(|&(x, y)| {
                let dx = x as f64 - peak.0 as f64;
                let dy = y as f64 - peak.1 as f64;
                dx * dx + dy * dy > r2
            })
            .map(|(x, y)| self.at(x, y))
            .collect();
        let std = std_dev(&bg);
        if std > 0.0 {
            self.at(peak.0, peak.1) / std
        } else {
            f64::INFINITY
        }
    }
}

pub(crate) fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Background exclusion radius for conditional SNR, pixels.
pub const SNR_EXCLUSION_RADIUS: f64 = 5.0;

pub fn conditional_projection(stats: &AccumStats, anchor: usize) -> Result<Projection> {
    stats.require_frames(2)?;
    stats.check_pixel(anchor)?;
    let view = JpdView::new(stats)?;
    let g = stats.geometry;
    let mut values: Vec<f64> = (0..g.n_pixels()).map(|j| view.gamma(anchor, j)).collect();
    // a binary pixel cannot report a coincidence with itself
    values[anchor] = 0.0;
    let center = g.coords(anchor);
    let mut p = Projection {
        kind: ProjectionKind::Conditional { anchor },
        width: g.width,
        height: g.height,
        values,
        center,
        n_frames: stats.n_frames,
        snr: None,
    };
    p.snr = Some(p.peak_snr(SNR_EXCLUSION_RADIUS, Some(center)));
    Ok(p)
}

fn projection_dims(g: &SensorGeometry) -> (usize, usize, (usize, usize)) {
    (2 * g.width - 1, 2 * g.height - 1, (g.width - 1, g.height - 1))
}

/// Integer bin sums over unordered pairs `i < j`: Σ C_ij and Σ S_i S_j.
fn binned_pair_sums(stats: &AccumStats, minus: bool) -> (Vec<u64>, Vec<u128>) {
    let g = stats.geometry;
    let (pw, ph, _) = projection_dims(&g);
    let n = g.n_pixels();
    let (w, h) = (g.width as isize, g.height as isize);
    let mut genuine = vec![0u64; pw * ph];
    let mut accidental = vec![0u128; pw * ph];
    for i in 0..n {
        let (xi, yi) = g.coords(i);
        let si = stats.marginal[i] as u128;
        let base = stats.row_base[i];
        for j in i + 1..n {
            let (xj, yj) = g.coords(j);
            let bin = if minus {
                let dx = xi as isize - xj as isize + w - 1;
                let dy = yi as isize - yj as isize + h - 1;
                dy as usize * pw + dx as usize
            } else {
                (yi + yj) * pw + xi + xj
            };
            genuine[bin] += stats.pairs[base.wrapping_add(j)];
            accidental[bin] += si * stats.marginal[j] as u128;
        }
    }
    (genuine, accidental)
}

fn finish_projection(
    stats: &AccumStats,
    kind: ProjectionKind,
    values: Vec<f64>,
) -> Projection {
    let (width, height, center) = projection_dims(&stats.geometry);
    Projection {
        kind,
        width,
        height,
        values,
        center,
        n_frames: stats.n_frames,
        snr: None,
    }
}

/// `P₊(s) = Σ_{i+j=s, i≠j} Γ(i, j)` over ordered pairs, from the pair counts.
pub fn sum_projection(stats: &AccumStats) -> Result<Projection> {
    stats.require_frames(2)?;
    let (genuine, accidental) = binned_pair_sums(stats, false);
    let n = stats.n_frames;
    let values = genuine
        .iter()
        .zip(&accidental)
        .map(|(&c, &a)| 2.0 * (c as f64 / n as f64 - a as f64 / (n as u128 * n as u128) as f64))
        .collect();
    Ok(finish_projection(stats, ProjectionKind::Sum, values))
}

/// `P₋(d) = Σ_{i−j=d, i≠j} Γ(i, j)`; the `d = 0` bin is zero.
pub fn minus_projection(stats: &AccumStats) -> Result<Projection> {
    stats.require_frames(2)?;
    let (genuine, accidental) = binned_pair_sums(stats, true);
    let n = stats.n_frames;
    let (pw, ph, _) = projection_dims(&stats.geometry);
    let mut values = vec![0.0; pw * ph];
    // each unordered pair contributes equally to d and -d
    for bin in 0..pw * ph {
        let v = genuine[bin] as f64 / n as f64
            - accidental[bin] as f64 / (n as u128 * n as u128) as f64;
        let mirror = pw * ph - 1 - bin;
        values[bin] += v;
        values[mirror] += v;
    }
    let (cx, cy) = (stats.geometry.width - 1, stats.geometry.height - 1);
    values[cy * pw + cx] = 0.0;
    Ok(finish_projection(stats, ProjectionKind::Minus, values))
}

/// Projections of Γ under an arbitrary estimator, by direct summation.
pub fn projection_with(
    stats: &AccumStats,
    kind: ProjectionKind,
    estimator: Estimator,
) -> Result<Projection> {
    stats.require_frames(2)?;
    let view = JpdView::with_estimator(stats, estimator)?;
    let g = stats.geometry;
    let (pw, ph, (cx, cy)) = projection_dims(&g);
    let mut values = vec![0.0; pw * ph];
    let n = g.n_pixels();
    match kind {
        ProjectionKind::Conditional { anchor } => return conditional_projection(stats, anchor),
        ProjectionKind::Sum => {
            for i in 0..n {
                let (xi, yi) = g.coords(i);
                for j in i + 1..n {
                    let (xj, yj) = g.coords(j);
                    values[(yi + yj) * pw + xi + xj] += 2.0 * view.gamma(i, j);
                }
            }
        }
        ProjectionKind::Minus => {
            for i in 0..n {
                let (xi, yi) = g.coords(i);
                for j in i + 1..n {
                    let (xj, yj) = g.coords(j);
                    let bin = (yi + cy - yj) * pw + (xi + cx - xj);
                    let v = view.gamma(i, j);
                    values[bin] += v;
                    values[pw * ph - 1 - bin] += v;
                }
            }
            values[cy * pw + cx] = 0.0;
        }
    }
    Ok(finish_projection(stats, kind, values))
}

/// Per-bin standard deviation a projection would have if every pixel fired
/// independently at its observed rate. Pair terms are then uncorrelated with
/// `Var Γ(i, j) ≈ v_i v_j / N`, `v = p(1 − p)`, so bin variances add.
pub fn null_std(stats: &AccumStats, kind: ProjectionKind) -> Result<Projection> {
    stats.require_frames(2)?;
    let g = stats.geometry;
    let n = stats.n_frames as f64;
    let v: Vec<f64> = stats
        .marginal
        .iter()
        .map(|&s| {
            let p = s as f64 / n;
            p * (1.0 - p)
        })
        .collect();
    let values: Vec<f64> = match kind {
        ProjectionKind::Conditional { anchor } => {
            stats.check_pixel(anchor)?;
            let mut out: Vec<f64> = v.iter().map(|&vj| (v[anchor] * vj / n).sqrt()).collect();
            out[anchor] = 0.0;
            return Ok(Projection {
                kind,
                width: g.width,
                height: g.height,
                values: out,
                center: g.coords(anchor),
                n_frames: stats.n_frames,
                snr: None,
            });
        }
        // ordered pairs: each unordered pair enters a sum bin twice over
        ProjectionKind::Sum => spectral_pair_products(&v, g.width, g.height, false)
            .into_iter()
            .map(|x| (2.0 * x.max(0.0) / n).sqrt())
            .collect(),
        ProjectionKind::Minus => {
            let (pw, _, (cx, cy)) = projection_dims(&g);
            let mut out: Vec<f64> = spectral_pair_products(&v, g.width, g.height, true)
                .into_iter()
                .map(|x| (x.max(0.0) / n).sqrt())
                .collect();
            out[cy * pw + cx] = 0.0;
            out
        }
    };
    Ok(finish_projection(stats, kind, values))
}

/// `value / null std` bin by bin; bins with no null spread are zero.
pub fn standardized(p: &Projection, null: &Projection) -> Result<Projection> {
    if (p.width, p.height, p.center) != (null.width, null.height, null.center) {
        return Err(Error::GeometryMismatch("projection layouts differ".into()));
    }
    let values = p
        .values
        .iter()
        .zip(&null.values)
        .map(|(&x, &s)| if s > 0.0 { x / s } else { 0.0 })
        .collect();
    Ok(Projection {
        values,
        snr: None,
        ..p.clone()
    })
}

/// Ordered-pair coordinate histograms accumulated frame by frame:
/// `sum[s] = Σ_l #{(i, j) : i ≠ j, r_i + r_j = s, both lit}` and likewise
/// for `r_i − r_j`. With the marginals they give both projections without
/// the pair matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordHistograms {
    geometry: SensorGeometry,
    n_frames: u64,
    marginal: Vec<u64>,
    sum: Vec<u64>,
    minus: Vec<u64>,
}

impl CoordHistograms {
    pub fn new(geometry: SensorGeometry) -> Self {
        let (pw, ph, _) = projection_dims(&geometry);
        Self {
            geometry,
            n_frames: 0,
            marginal: vec![0; geometry.n_pixels()],
            sum: vec![0; pw * ph],
            minus: vec![0; pw * ph],
        }
    }

    pub fn n_frames(&self) -> u64 {
        self.n_frames
    }

    pub fn add_lit(&mut self, lit: &[u32]) {
        let g = self.geometry;
        let (pw, ph, (cx, cy)) = projection_dims(&g);
        self.n_frames += 1;
        for (a, &pa) in lit.iter().enumerate() {
            let (xa, ya) = g.coords(pa as usize);
            self.marginal[pa as usize] += 1;
            for &pb in &lit[a + 1..] {
                let (xb, yb) = g.coords(pb as usize);
                self.sum[(ya + yb) * pw + xa + xb] += 2;
                let bin = (ya + cy - yb) * pw + (xa + cx - xb);
                self.minus[bin] += 1;
                self.minus[pw * ph - 1 - bin] += 1;
            }
        }
    }

    pub fn add_frames(&mut self, frames: &FrameSet) -> Result<()> {
        if !self.geometry.same_grid(frames.geometry()) {
            return Err(Error::GeometryMismatch("histogram geometry differs".into()));
        }
        let mut lit = Vec::with_capacity(64);
        for f in frames.iter() {
            lit.clear();
            f.lit_pixels_into(&mut lit);
            self.add_lit(&lit);
        }
        Ok(())
    }

    /// Sum projection with the accidental term from an FFT self-convolution
    /// of the marginal image.
    pub fn sum_projection(&self) -> Result<Projection> {
        self.project(false)
    }

    /// Minus projection with the accidental term from an FFT
    /// autocorrelation of the marginal image.
    pub fn minus_projection(&self) -> Result<Projection> {
        self.project(true)
    }

    fn project(&self, minus: bool) -> Result<Projection> {
        if self.n_frames < 2 {
            return Err(Error::NotEnoughFrames {
                needed: 2,
                have: self.n_frames,
            });
        }
        let g = self.geometry;
        let (pw, ph, (cx, cy)) = projection_dims(&g);
        let marg: Vec<f64> = self.marginal.iter().map(|&s| s as f64).collect();
        let acc = spectral_pair_products(&marg, g.width, g.height, minus);
        let n = self.n_frames as f64;
        let hist = if minus { &self.minus } else { &self.sum };
        let mut values: Vec<f64> = hist
            .iter()
            .zip(&acc)
            .map(|(&h, &a)| h as f64 / n - a / (n * n))
            .collect();
        if minus {
            // remove FFT round-off asymmetry
            for bin in 0..(pw * ph) / 2 {
                let m = pw * ph - 1 - bin;
                let v = 0.5 * (values[bin] + values[m]);
                values[bin] = v;
                values[m] = v;
            }
            values[cy * pw + cx] = 0.0;
        }
        Ok(Projection {
            kind: if minus {
                ProjectionKind::Minus
            } else {
                ProjectionKind::Sum
            },
            width: pw,
            height: ph,
            values,
            center: (cx, cy),
            n_frames: self.n_frames,
            snr: None,
        })
    }
}

/// Σ over ordered pairs `i ≠ j` of `S_i S_j`, binned by `r_i + r_j`
/// (`minus = false`) or `r_i − r_j` (`minus = true`), computed in the
/// Fourier domain on the `(2W−1) × (2H−1)` grid.
pub fn spectral_pair_products(marginal: &[f64], width: usize, height: usize, minus: bool) -> Vec<f64> {
    let (pw, ph) = (2 * width - 1, 2 * height - 1);
    let mut buf = vec![Complex::new(0.0, 0.0); pw * ph];
    for y in 0..height {
        for x in 0..width {
            buf[y * pw + x].re = marginal[y * width + x];
        }
    }
    let mut planner = FftPlanner::<f64>::new();
    fft2(&mut planner, &mut buf, pw, ph, false);
    for c in buf.iter_mut() {
        *c = if minus { *c * c.conj() } else { *c * *c };
    }
    fft2(&mut planner, &mut buf, pw, ph, true);
    let scale = 1.0 / (pw * ph) as f64;
    let mut out = vec![0.0; pw * ph];
    for by in 0..ph {
        for bx in 0..pw {
            // circular index of the output bin
            let (sx, sy) = if minus {
                ((bx + pw - (width - 1)) % pw, (by + ph - (height - 1)) % ph)
            } else {
                (bx, by)
            };
            out[by * pw + bx] = buf[sy * pw + sx].re * scale;
        }
    }
    // drop the i == j terms
    for y in 0..height {
        for x in 0..width {
            let s = marginal[y * width + x];
            let bin = if minus {
                (height - 1) * pw + width - 1
            } else {
                (2 * y) * pw + 2 * x
            };
            out[bin] -= s * s;
        }
    }
    out
}

fn fft2(planner: &mut FftPlanner<f64>, data: &mut [Complex<f64>], w: usize, h: usize, inverse: bool) {
    let row = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    row.process(data);
    let col = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = data[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            data[y * w + x] = column[y];
        }
    }
}

pub const ORACLE_MAX_PIXELS: usize = 32 * 32;
pub const ORACLE_MAX_FRAMES: usize = 10_000;

/// Full Γ matrix by direct evaluation over the frames, for verification.
pub fn oracle_jpd(frames: &FrameSet) -> Result<Vec<Vec<f64>>> {
    let g = frames.geometry();
    let np = g.n_pixels();
    let nf = frames.n_frames();
    if np > ORACLE_MAX_PIXELS || nf > ORACLE_MAX_FRAMES {
        return Err(Error::OracleTooLarge(format!(
            "{np} pixels x {nf} frames exceeds {ORACLE_MAX_PIXELS} x {ORACLE_MAX_FRAMES}"
        )));
    }
    if nf == 0 {
        return Err(Error::NotEnoughFrames { needed: 1, have: 0 });
    }
    let pixels: Vec<Vec<bool>> = frames.iter().map(|f| f.to_bools()).collect();
    let mut gamma = vec![vec![0.0; np]; np];
    for i in 0..np {
        for j in 0..np {
            let mut both = 0u64;
            let mut on_i = 0u64;
            let mut on_j = 0u64;
            for f in &pixels {
                both += (f[i] && f[j]) as u64;
                on_i += f[i] as u64;
                on_j += f[j] as u64;
            }
            gamma[i][j] = linear_gamma(both, on_i, on_j, nf as u64);
        }
    }
    Ok(gamma)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_pixel(frames: &[[bool; 2]]) -> FrameSet {
        let g = SensorGeometry::new(2, 2, 1.0, 1.0).unwrap();
        let v: Vec<Vec<bool>> = frames
            .iter()
            .map(|f| vec![f[0], f[1], false, false])
            .collect();
        FrameSet::from_pixel_frames(g, &v, "").unwrap()
    }

    #[test]
    fn hand_enumerated_counts() {
        let set = two_pixel(&[[true, true], [true, false], [false, true], [true, true]]);
        let s = accumulate(&set);
        assert_eq!(s.n_frames(), 4);
        assert_eq!(&s.marginal()[..2], &[3, 3]);
        assert_eq!(s.pair_count(0, 1), 2);
        assert_eq!(s.pair_count(1, 0), 2);
        assert_eq!(s.pair_count(0, 0), 3);
    }

    #[test]
    fn all_zero_frames() {
        let set = two_pixel(&[[false, false]; 5]);
        let s = accumulate(&set);
        assert!(s.marginal().iter().all(|&v| v == 0));
        assert_eq!(s.pair_count(0, 1), 0);
        assert_eq!(jpd_element(&s, 0, 1).unwrap(), 0.0);
    }

    #[test]
    fn gamma_hand_value() {
        let set = two_pixel(&[[true, true], [false, false], [true, true], [false, false]]);
        let s = accumulate(&set);
        assert_eq!(jpd_element(&s, 0, 1).unwrap(), 0.25);
    }

    #[test]
    fn always_on_has_no_covariance() {
        let set = two_pixel(&[[true, true]; 7]);
        assert_eq!(jpd_element(&accumulate(&set), 0, 1).unwrap(), 0.0);
    }

    #[test]
    fn element_rejects_tiny_or_bad_input() {
        let s = accumulate(&two_pixel(&[[true, true]]));
        assert!(matches!(
            jpd_element(&s, 0, 1),
            Err(Error::NotEnoughFrames { .. })
        ));
        let s = accumulate(&two_pixel(&[[true, true], [false, true]]));
        assert!(matches!(
            jpd_element(&s, 0, 9),
            Err(Error::PixelOutOfBounds { .. })
        ));
        assert!(conditional_projection(&s, 4).is_err());
    }

    #[test]
    fn single_frame_oracle_is_zero() {
        let g = SensorGeometry::square(3).unwrap();
        let px = vec![true, false, true, true, false, false, true, false, true];
        let set = FrameSet::from_pixel_frames(g, &[px], "").unwrap();
        let o = oracle_jpd(&set).unwrap();
        assert!(o.iter().flatten().all(|&v| v == 0.0));
        let s = accumulate(&set);
        let view = JpdView::new(&s).unwrap();
        for i in 0..9 {
            for j in 0..9 {
                assert_eq!(view.gamma(i, j), 0.0);
            }
        }
    }

    #[test]
    fn oracle_matches_shared_fixture() {
        let set = two_pixel(&[[true, true], [true, false], [false, true], [true, true]]);
        let o = oracle_jpd(&set).unwrap();
        let s = accumulate(&set);
        assert_eq!(o[0][1], jpd_element(&s, 0, 1).unwrap());
        assert_eq!(o[0][1], 2.0 / 4.0 - 9.0 / 16.0);
    }

    #[test]
    fn oracle_size_guard() {
        let g = SensorGeometry::square(33).unwrap();
        let set = FrameSet::new(g, "");
        assert!(matches!(oracle_jpd(&set), Err(Error::OracleTooLarge(_))));
    }

    #[test]
    fn two_by_one_sum_projection() {
        // a 2x2 sensor with only the top row used stands in for 2x1
        let set = two_pixel(&[[true, true], [false, false]]);
        let s = accumulate(&set);
        assert_eq!(jpd_element(&s, 0, 1).unwrap(), 0.25);
        let p = sum_projection(&s).unwrap();
        assert_eq!(p.at(1, 0), 0.5);
        let q = projection_with(&s, ProjectionKind::Sum, Estimator::Linear).unwrap();
        assert_eq!(q.at(1, 0), 0.5);
    }

    #[test]
    fn log_estimator_reduces_to_linear_at_low_occupancy() {
        let set = two_pixel(&[[true, true], [false, false], [false, false], [false, false]]);
        let s = accumulate(&set);
        let lin = JpdView::new(&s).unwrap().gamma(0, 1);
        let log = JpdView::with_estimator(&s, Estimator::LogCorrected { scale: 1.0 })
            .unwrap()
            .gamma(0, 1);
        let expected = (lin / (0.75 * 0.75)).ln_1p();
        assert!((log - expected).abs() < 1e-15);
    }

    #[test]
    fn triangular_indexing_covers_all_pairs() {
        let g = SensorGeometry::new(5, 3, 1.0, 1.0).unwrap();
        let s = AccumStats::new(g);
        let n = g.n_pixels();
        let mut seen = vec![false; n * (n - 1) / 2];
        for i in 0..n {
            for j in i + 1..n {
                let t = s.tri(i, j);
                assert!(!seen[t]);
                seen[t] = true;
            }
        }
        assert!(seen.into_iter().all(|b| b));
    }

    #[test]
    fn merge_and_subtract_are_inverse() {
        let a = two_pixel(&[[true, true], [true, false]]);
        let b = two_pixel(&[[false, true], [true, true], [false, false]]);
        let sa = accumulate(&a);
        let sb = accumulate(&b);
        let mut total = sa.clone();
        total.merge(&sb).unwrap();
        assert_eq!(total.n_frames(), 5);
        total.subtract(&sb).unwrap();
        assert_eq!(total, sa);
        assert!(sa.clone().subtract(&total.clone().tap_merge(&sb)).is_err());
    }

    trait TapMerge {
        fn tap_merge(self, o: &AccumStats) -> AccumStats;
    }
    impl TapMerge for AccumStats {
        fn tap_merge(mut self, o: &AccumStats) -> AccumStats {
            self.merge(o).unwrap();
            self
        }
    }

    #[test]
    fn null_std_matches_direct_pair_sums() {
        let g = SensorGeometry::new(3, 2, 1.0, 1.0).unwrap();
        // pixel k fires in frames where (f * (k + 2)) % 7 < k + 1
        let frames: Vec<Vec<bool>> = (0..40)
            .map(|f| (0..6).map(|k| (f * (k + 2)) % 7 < k + 1).collect())
            .collect();
        let s = accumulate(&FrameSet::from_pixel_frames(g, &frames, "").unwrap());
        let n = s.n_frames() as f64;
        let v: Vec<f64> = s
            .marginal()
            .iter()
            .map(|&m| m as f64 / n * (1.0 - m as f64 / n))
            .collect();
        let (pw, ph, (cx, cy)) = projection_dims(&g);
        let mut sum_var = vec![0.0; pw * ph];
        let mut minus_var = vec![0.0; pw * ph];
        for i in 0..6 {
            for j in i + 1..6 {
                let ((xi, yi), (xj, yj)) = (g.coords(i), g.coords(j));
                sum_var[(yi + yj) * pw + xi + xj] += 4.0 * v[i] * v[j] / n;
                minus_var[(yi + cy - yj) * pw + xi + cx - xj] += v[i] * v[j] / n;
                minus_var[(yj + cy - yi) * pw + xj + cx - xi] += v[i] * v[j] / n;
            }
        }
        minus_var[cy * pw + cx] = 0.0;
        let ns = null_std(&s, ProjectionKind::Sum).unwrap();
        let nm = null_std(&s, ProjectionKind::Minus).unwrap();
        for b in 0..pw * ph {
            // compared as variances: FFT round-off is additive there
            assert!((ns.values[b].powi(2) - sum_var[b]).abs() < 1e-15, "sum bin {b}");
            assert!((nm.values[b].powi(2) - minus_var[b]).abs() < 1e-15, "minus bin {b}");
        }
        let nc = null_std(&s, ProjectionKind::Conditional { anchor: 4 }).unwrap();
        assert_eq!(nc.values[4], 0.0);
        assert!((nc.values[1] - (v[4] * v[1] / n).sqrt()).abs() < 1e-15);

        let p = sum_projection(&s).unwrap();
        let z = standardized(&p, &ns).unwrap();
        for b in 0..pw * ph {
            let want = if ns.values[b] > 0.0 { p.values[b] / ns.values[b] } else { 0.0 };
            assert_eq!(z.values[b], want);
        }
        assert!(standardized(&p, &nc).is_err());
    }
}
