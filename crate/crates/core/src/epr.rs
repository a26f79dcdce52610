//! EPR criterion from fitted position and momentum correlation widths.
//!
//! Any separable state obeys `Δr·Δk > 1/2`. The confidence of a violation is
//! the distance of the measured product below 1/2 in units of its
//! propagated uncertainty.

use std::fmt;

use crate::error::{Error, Result};
use crate::fit::{fit_gaussian_peak, Calibration, GaussianFitResult, Units};
use crate::frames::FrameSet;
use crate::jpd::{minus_projection, sum_projection, AccumStats};

pub const EPR_BOUND: f64 = 0.5;
/// Confidence above which a violation is called confident.
pub const CONFIDENT_C: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EprReport {
    pub delta_r: f64,
    pub delta_r_err: f64,
    pub delta_k: f64,
    pub delta_k_err: f64,
    pub product: f64,
    pub sigma_product: f64,
    pub confidence: f64,
    pub n_frames: u64,
    pub position_units: Units,
    pub momentum_units: Units,
    /// Either width is below the pixel scale and so only an upper bound.
    pub pixel_limited: bool,
}

impl EprReport {
    /// The raw inequality `Δr·Δk < 1/2`.
    pub fn violates(&self) -> bool {
        self.product < EPR_BOUND
    }

    /// Raw violation that also clears `product + 5σ < 1/2`.
    pub fn confident(&self) -> bool {
        self.violates() && self.product + CONFIDENT_C * self.sigma_product < EPR_BOUND
    }

    pub fn verdict(&self) -> &'static str {
        if self.confident() {
            "EPR-violating"
        } else if self.violates() {
            "below bound, not confident"
        } else {
            "no violation"
        }
    }
}

impl fmt::Display for EprReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "frames        {}", self.n_frames)?;
        writeln!(
            f,
            "delta_r       {:.6e} +- {:.3e} {}{}",
            self.delta_r,
            self.delta_r_err,
            self.position_units,
            if self.pixel_limited { " (pixel limited, upper bound)" } else { "" }
        )?;
        writeln!(
            f,
            "delta_k       {:.6e} +- {:.3e} {}",
            self.delta_k, self.delta_k_err, self.momentum_units
        )?;
        writeln!(f, "product       {:.6e} +- {:.3e}", self.product, self.sigma_product)?;
        writeln!(f, "confidence    {:.3}", self.confidence)?;
        write!(f, "verdict       {}", self.verdict())
    }
}

fn check_units(nf: Units, ff: Units) -> Result<()> {
    let ok = matches!(
        (nf, ff),
        (Units::Micrometres, Units::RadPerMicrometre) | (Units::Millimetres, Units::RadPerMillimetre)
    );
    if ok {
        Ok(())
    } else {
        Err(Error::UnitMismatch(format!(
            "position fit in {nf}, momentum fit in {ff}"
        )))
    }
}

pub fn epr_evaluate(
    fit_nf: &GaussianFitResult,
    fit_ff: &GaussianFitResult,
    n_frames: u64,
) -> Result<EprReport> {
    check_units(fit_nf.units, fit_ff.units)?;
    let product = fit_nf.delta * fit_ff.delta;
    let rel_r = fit_nf.delta_uncertainty / fit_nf.delta;
    let rel_k = fit_ff.delta_uncertainty / fit_ff.delta;
    let sigma_product = product * (rel_r * rel_r + rel_k * rel_k).sqrt();
    Ok(EprReport {
        delta_r: fit_nf.delta,
        delta_r_err: fit_nf.delta_uncertainty,
        delta_k: fit_ff.delta,
        delta_k_err: fit_ff.delta_uncertainty,
        product,
        sigma_product,
        confidence: (EPR_BOUND - product).abs() / sigma_product,
        n_frames,
        position_units: fit_nf.units,
        momentum_units: fit_ff.units,
        pixel_limited: fit_nf.is_pixel_limited() || fit_ff.is_pixel_limited(),
    })
}

/// Both fits plus the report they produce.
#[derive(Debug, Clone, PartialEq)]
pub struct EprAnalysis {
    pub fit_nf: GaussianFitResult,
    pub fit_ff: GaussianFitResult,
    pub report: EprReport,
}

impl EprAnalysis {
    pub fn reliable(&self) -> bool {
        !self.fit_nf.unreliable && !self.fit_ff.unreliable
    }
}

/// Fits the NF minus projection (centre excluded) and the FF sum projection.
pub fn epr_from_stats(
    nf: &AccumStats,
    ff: &AccumStats,
    cal_nf: Calibration,
    cal_ff: Calibration,
) -> Result<EprAnalysis> {
    if nf.n_frames() != ff.n_frames() {
        log::warn!(
            "NF and FF frame counts differ ({} vs {}); reporting the smaller",
            nf.n_frames(),
            ff.n_frames()
        );
    }
    let fit_nf = fit_gaussian_peak(&minus_projection(nf)?, true, cal_nf)?;
    let fit_ff = fit_gaussian_peak(&sum_projection(ff)?, false, cal_ff)?;
    let report = epr_evaluate(&fit_nf, &fit_ff, nf.n_frames().min(ff.n_frames()))?;
    Ok(EprAnalysis {
        fit_nf,
        fit_ff,
        report,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub n_frames: u64,
    pub analysis: Option<EprAnalysis>,
    /// Why the checkpoint was left out of the fit, if it was.
    pub excluded: Option<String>,
}

impl ScalingRow {
    pub fn confidence(&self) -> Option<f64> {
        match (&self.analysis, &self.excluded) {
            (Some(a), None) => Some(a.report.confidence),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingTable {
    pub rows: Vec<ScalingRow>,
    /// Coefficient of the `C = c √N` fit.
    pub coefficient: f64,
    pub r_squared: f64,
}

impl ScalingTable {
    /// First checkpoint whose confident violation holds.
    pub fn first_confident(&self) -> Option<u64> {
        self.rows
            .iter()
            .find(|r| r.analysis.as_ref().is_some_and(|a| a.report.confident()) && r.excluded.is_none())
            .map(|r| r.n_frames)
    }
}

/// Least squares `C = c √N` through the origin; returns `(c, R²)`.
pub fn fit_sqrt_law(points: &[(u64, f64)]) -> (f64, f64) {
    if points.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let sxx: f64 = points.iter().map(|&(n, _)| n as f64).sum();
    let sxy: f64 = points.iter().map(|&(n, c)| (n as f64).sqrt() * c).sum();
    let coef = sxy / sxx;
    let mean = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
    let ss_tot: f64 = points.iter().map(|p| (p.1 - mean).powi(2)).sum();
    let ss_res: f64 = points
        .iter()
        .map(|&(n, c)| (c - coef * (n as f64).sqrt()).powi(2))
        .sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { f64::NAN };
    (coef, r2)
}

fn check_checkpoints(checkpoints: &[u64]) -> Result<()> {
    if checkpoints.is_empty() {
        return Err(Error::InvalidParam("no checkpoints given".into()));
    }
    if checkpoints.windows(2).any(|w| w[0] >= w[1]) || checkpoints[0] < 2 {
        return Err(Error::InvalidParam(
            "checkpoints must be strictly ascending and at least 2".into(),
        ));
    }
    Ok(())
}

/// Runs the fit pipeline on growing prefixes of a paired NF/FF frame stream.
///
/// The streams are consumed chunk by chunk; statistics are snapshotted at
/// each checkpoint, so the cost is one pass over the frames plus one
/// analysis per checkpoint. Checkpoints beyond the shorter stream are
/// reported as excluded.
pub fn confidence_scaling<I, J>(
    nf: I,
    ff: J,
    checkpoints: &[u64],
    cal_nf: Calibration,
    cal_ff: Calibration,
) -> Result<ScalingTable>
where
    I: IntoIterator<Item = Result<FrameSet>>,
    J: IntoIterator<Item = Result<FrameSet>>,
{
    check_checkpoints(checkpoints)?;
    let mut nf = PrefixFeeder::new(nf.into_iter());
    let mut ff = PrefixFeeder::new(ff.into_iter());
    let mut rows = Vec::with_capacity(checkpoints.len());
    for &n in checkpoints {
        let got_nf = nf.advance_to(n)?;
        let got_ff = ff.advance_to(n)?;
        let row = match (&nf.stats, &ff.stats) {
            (Some(s_nf), Some(s_ff)) if got_nf && got_ff => analyse_checkpoint(n, s_nf, s_ff, cal_nf, cal_ff),
            _ => ScalingRow {
                n_frames: n,
                analysis: None,
                excluded: Some("stream shorter than checkpoint".into()),
            },
        };
        rows.push(row);
    }
    Ok(finish_table(rows))
}

/// Same as [`confidence_scaling`] over in-memory frame sets.
pub fn confidence_scaling_sets(
    nf: &FrameSet,
    ff: &FrameSet,
    checkpoints: &[u64],
    cal_nf: Calibration,
    cal_ff: Calibration,
) -> Result<ScalingTable> {
    confidence_scaling(
        std::iter::once(Ok(nf.clone())),
        std::iter::once(Ok(ff.clone())),
        checkpoints,
        cal_nf,
        cal_ff,
    )
}

fn analyse_checkpoint(
    n: u64,
    nf: &AccumStats,
    ff: &AccumStats,
    cal_nf: Calibration,
    cal_ff: Calibration,
) -> ScalingRow {
    match epr_from_stats(nf, ff, cal_nf, cal_ff) {
        Ok(a) => {
            let excluded = (!a.reliable()).then(|| "peak below 3 sigma".to_string());
            ScalingRow {
                n_frames: n,
                analysis: Some(a),
                excluded,
            }
        }
        Err(e) => ScalingRow {
            n_frames: n,
            analysis: None,
            excluded: Some(e.to_string()),
        },
    }
}

pub(crate) fn finish_table(rows: Vec<ScalingRow>) -> ScalingTable {
    let pts: Vec<(u64, f64)> = rows
        .iter()
        .filter_map(|r| r.confidence().map(|c| (r.n_frames, c)))
        .collect();
    let (coefficient, r_squared) = fit_sqrt_law(&pts);
    ScalingTable {
        rows,
        coefficient,
        r_squared,
    }
}

/// Pulls chunks from a frame stream, accumulating exactly up to a target
/// frame count and holding back the remainder.
struct PrefixFeeder<I> {
    source: I,
    pending: Option<FrameSet>,
    stats: Option<AccumStats>,
}

impl<I: Iterator<Item = Result<FrameSet>>> PrefixFeeder<I> {
    fn new(source: I) -> Self {
        Self {
            source,
            pending: None,
            stats: None,
        }
    }

    /// Returns false when the stream ends first.
    fn advance_to(&mut self, target: u64) -> Result<bool> {
        loop {
            let have = self.stats.as_ref().map_or(0, |s| s.n_frames());
            if have >= target {
                return Ok(true);
            }
            let chunk = match self.pending.take() {
                Some(c) => c,
                None => match self.source.next() {
                    Some(c) => c?,
                    None => return Ok(false),
                },
            };
            let need = (target - have) as usize;
            let (use_now, rest) = if chunk.n_frames() > need {
                (chunk.slice(0..need), Some(chunk.slice(need..chunk.n_frames())))
            } else {
                (chunk, None)
            };
            self.pending = rest;
            let part = crate::jpd::accumulate(&use_now);
            match &mut self.stats {
                Some(s) => s.merge(&part)?,
                None => self.stats = Some(part),
            }
        }
    }
}
