//! Isotropic Gaussian fit of a projection peak.
//!
//! Model: `f(r) = a exp(−r² / 2Δ²)`, centred on the projection's central bin
//! and fitted by damped Gauss–Newton over a square window, with the amplitude
//! solved in closed form at each width. The width
//! uncertainty uses the closed form `δΔ = Σ √e Δ / a`, where `Σ` is the
//! background noise measured around the window.

use std::fmt;

use crate::error::{Error, Result};
use crate::jpd::{std_dev, Projection};

/// Half-width of the fit window (21×21 bins).
pub const FIT_HALF_WINDOW: usize = 10;
/// Side of the noise region around the peak.
pub const NOISE_REGION: usize = 40;
pub const DELTA_MIN_PX: f64 = 0.05;
pub const DELTA_MAX_PX: f64 = 20.0;
pub const MAX_ITERATIONS: usize = 200;
/// Convergence: an accepted step gaining less than this fraction of `Σ y²`.
pub const COST_TOLERANCE: f64 = 1e-15;
/// Convergence: an accepted step moving both parameters by less than this
/// relative amount.
pub const STEP_TOLERANCE: f64 = 1e-10;
/// Widths whose profiled cost lies within this fraction of `Σ y²` of the
/// optimum are indistinguishable; the widest of them is reported.
pub const FLAT_TOLERANCE: f64 = 1e-13;
/// Fitted widths below this many pixels only bound the true width from above.
pub const PIXEL_LIMIT_PX: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Units {
    Pixels,
    Micrometres,
    RadPerMicrometre,
    Millimetres,
    RadPerMillimetre,
}

impl fmt::Display for Units {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Units::Pixels => "px",
            Units::Micrometres => "um",
            Units::RadPerMicrometre => "rad/um",
            Units::Millimetres => "mm",
            Units::RadPerMillimetre => "rad/mm",
        })
    }
}

impl Units {
    /// Position-like units pair with momentum-like units in the EPR product.
    pub fn is_position(self) -> bool {
        matches!(self, Units::Micrometres | Units::Millimetres)
    }

    pub fn is_momentum(self) -> bool {
        matches!(self, Units::RadPerMicrometre | Units::RadPerMillimetre)
    }
}

/// Physical size of one projection bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub per_pixel: f64,
    pub units: Units,
}

impl Calibration {
    pub fn pixels() -> Self {
        Self {
            per_pixel: 1.0,
            units: Units::Pixels,
        }
    }

    pub fn new(per_pixel: f64, units: Units) -> Result<Self> {
        if !(per_pixel > 0.0 && per_pixel.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "calibration must be positive, got {per_pixel}"
            )));
        }
        Ok(Self { per_pixel, units })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFitResult {
    pub a: f64,
    /// Width in calibrated units.
    pub delta: f64,
    /// Width in bins, before calibration.
    pub delta_px: f64,
    /// Least-squares optimum in bins. Differs from `delta_px` only for
    /// pixel-limited peaks, where `delta_px` is the one-sigma upper bound.
    pub best_fit_px: f64,
    pub sigma_noise: f64,
    pub delta_uncertainty: f64,
    pub r_squared: f64,
    pub units: Units,
    pub iterations: usize,
    /// Amplitude below three times the background noise.
    pub unreliable: bool,
}

impl GaussianFitResult {
    /// The width is at or below the pixel scale, so it is only an upper bound.
    pub fn is_pixel_limited(&self) -> bool {
        self.delta_px < PIXEL_LIMIT_PX
    }

    /// Model value at a bin offset from the centre.
    pub fn model(&self, dx: f64, dy: f64) -> f64 {
        gauss(self.a, self.delta_px, dx * dx + dy * dy)
    }
}

#[inline]
fn gauss(a: f64, delta: f64, r2: f64) -> f64 {
    a * (-r2 / (2.0 * delta * delta)).exp()
}

struct Sample {
    r2: f64,
    y: f64,
}

/// Fits the central peak of `proj`.
///
/// `exclude_center` drops the central bin from the fit data, as required for
/// minus projections where that bin is unmeasurable.
pub fn fit_gaussian_peak(
    proj: &Projection,
    exclude_center: bool,
    calibration: Calibration,
) -> Result<GaussianFitResult> {
    let hw = FIT_HALF_WINDOW as isize;
    let mut samples = Vec::with_capacity((2 * FIT_HALF_WINDOW + 1).pow(2));
    for dy in -hw..=hw {
        for dx in -hw..=hw {
            if exclude_center && dx == 0 && dy == 0 {
                continue;
            }
            if let Some(y) = proj.at_offset(dx, dy) {
                samples.push(Sample {
                    r2: (dx * dx + dy * dy) as f64,
                    y,
                });
            }
        }
    }
    if samples.len() < 3 {
        return Err(Error::InvalidParam("fit window holds fewer than 3 bins".into()));
    }

    let sigma_noise = background_noise(proj, exclude_center);
    let (a, delta_px, iterations) = levenberg_marquardt(&samples, 1.0)?;
    let best_fit_px = delta_px;
    let scale: f64 = samples.iter().map(|s| s.y * s.y).sum();
    // An unresolved peak only bounds the width: report the widest width the
    // data allow at one standard deviation of the background.
    let slack = if delta_px < PIXEL_LIMIT_PX {
        (sigma_noise * sigma_noise).max(FLAT_TOLERANCE * scale)
    } else {
        FLAT_TOLERANCE * scale
    };
    let (a, delta_px) = widest_width(&samples, a, delta_px, slack);

    let mean = samples.iter().map(|s| s.y).sum::<f64>() / samples.len() as f64;
    let ss_tot: f64 = samples.iter().map(|s| (s.y - mean).powi(2)).sum();
    let ss_res: f64 = samples.iter().map(|s| (s.y - gauss(a, delta_px, s.r2)).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };

    let delta = delta_px * calibration.per_pixel;
    let delta_uncertainty = if a > 0.0 {
        sigma_noise * std::f64::consts::E.sqrt() * delta / a
    } else {
        f64::INFINITY
    };
    Ok(GaussianFitResult {
        a,
        delta,
        delta_px,
        best_fit_px,
        sigma_noise,
        delta_uncertainty,
        r_squared,
        units: calibration.units,
        iterations,
        unreliable: a.is_nan() || a <= 0.0 || a < 3.0 * sigma_noise,
    })
}

/// Standard deviation over the `NOISE_REGION²` bins around the centre with the
/// fit window masked out.
pub fn background_noise(proj: &Projection, exclude_center: bool) -> f64 {
    let half = (NOISE_REGION / 2) as isize;
    let hw = FIT_HALF_WINDOW as isize;
    let mut vals = Vec::new();
    for dy in -half..half {
        for dx in -half..half {
            if dx.abs() <= hw && dy.abs() <= hw {
                continue;
            }
            if exclude_center && dx == 0 && dy == 0 {
                continue;
            }
            if let Some(v) = proj.at_offset(dx, dy) {
                vals.push(v);
            }
        }
    }
    std_dev(&vals)
}

fn cost(samples: &[Sample], a: f64, d: f64) -> f64 {
    samples.iter().map(|s| (s.y - gauss(a, d, s.r2)).powi(2)).sum()
}

/// Best amplitude and cost at a fixed width (the model is linear in `a`).
fn profile(samples: &[Sample], d: f64) -> (f64, f64) {
    let (mut sye, mut see) = (0.0, 0.0);
    for s in samples {
        let e = (-s.r2 / (2.0 * d * d)).exp();
        sye += s.y * e;
        see += e * e;
    }
    let a = if see > 0.0 { sye / see } else { 0.0 };
    (a, cost(samples, a, d))
}

/// Moves a converged width up to the widest width whose profiled cost is
/// within `slack` of the optimum.
///
/// When the peak is narrower than a bin the cost flattens out towards small
/// widths and the optimum itself is arbitrary; the widest consistent width
/// is a well-defined upper bound.
fn widest_width(samples: &[Sample], a: f64, d: f64, slack: f64) -> (f64, f64) {
    if slack == 0.0 || a.is_nan() || a <= 0.0 {
        return (a, d);
    }
    let threshold = cost(samples, a, d) + slack;
    let within = |w: f64| profile(samples, w).1 <= threshold;
    let (mut lo, mut hi) = (d, d);
    loop {
        if hi >= DELTA_MAX_PX {
            hi = DELTA_MAX_PX;
            if within(hi) {
                lo = hi;
            }
            break;
        }
        hi = (hi * 1.25).min(DELTA_MAX_PX);
        if !within(hi) {
            break;
        }
        lo = hi;
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if within(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (profile(samples, lo).0, lo)
}

/// Damped Gauss–Newton on the width with the amplitude projected out
/// (variable projection). Profiling `a` removes the valley along which a
/// centre-excluded fit can trade amplitude against width indefinitely.
fn levenberg_marquardt(samples: &[Sample], d0: f64) -> Result<(f64, f64, usize)> {
    let scale: f64 = samples.iter().map(|s| s.y * s.y).sum::<f64>();
    if scale == 0.0 {
        return Ok((0.0, d0, 0));
    }
    let mut d = d0;
    let (mut a, mut c) = profile(samples, d);
    let mut lambda = 1e-3;
    for it in 1..=MAX_ITERATIONS {
        // Jacobian of the model in Δ at fixed a, projected orthogonal to
        // the amplitude direction.
        let (mut ee, mut ge) = (0.0, 0.0);
        let mut g = Vec::with_capacity(samples.len());
        let mut e = Vec::with_capacity(samples.len());
        for s in samples {
            let ei = (-s.r2 / (2.0 * d * d)).exp();
            let gi = a * ei * s.r2 / (d * d * d);
            ee += ei * ei;
            ge += gi * ei;
            e.push(ei);
            g.push(gi);
        }
        let k = if ee > 0.0 { ge / ee } else { 0.0 };
        let (mut jj, mut jr) = (0.0, 0.0);
        for ((s, ei), gi) in samples.iter().zip(&e).zip(&g) {
            let j = gi - k * ei;
            jj += j * j;
            jr += j * (s.y - a * ei);
        }
        if jj == 0.0 || !jj.is_finite() {
            return Ok((a, d, it));
        }
        loop {
            // at most a factor of two per step: the Jacobian vanishes far
            // below one bin, so an overshoot there would stall the search
            let nd = (d + jr / (jj * (1.0 + lambda)))
                .clamp(0.5 * d, 2.0 * d)
                .clamp(DELTA_MIN_PX, DELTA_MAX_PX);
            let (na, nc) = profile(samples, nd);
            if nc <= c {
                let gain = c - nc;
                let small_step = (nd - d).abs() <= STEP_TOLERANCE * d;
                a = na;
                d = nd;
                c = nc;
                lambda = (lambda * 0.3).max(1e-12);
                if gain < COST_TOLERANCE * scale || small_step {
                    return Ok((a, d, it));
                }
                break;
            }
            lambda *= 10.0;
            if lambda > 1e12 {
                // no downhill step exists at this precision
                return Ok((a, d, it));
            }
        }
    }
    Err(Error::NoConvergence {
        iterations: MAX_ITERATIONS,
    })
}

/// Data minus the fitted model on every bin of `proj`. With `exclude_center`
/// the centre bin, which took no part in the fit, is zero.
pub fn residual_map(proj: &Projection, fit: &GaussianFitResult, exclude_center: bool) -> Projection {
    let (cx, cy) = proj.center;
    let mut values = Vec::with_capacity(proj.values.len());
    for y in 0..proj.height {
        for x in 0..proj.width {
            let dx = x as f64 - cx as f64;
            let dy = y as f64 - cy as f64;
            values.push(if exclude_center && (x, y) == (cx, cy) {
                0.0
            } else {
                proj.at(x, y) - fit.model(dx, dy)
            });
        }
    }
    Projection {
        values,
        snr: None,
        ..proj.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jpd::ProjectionKind;

    pub(crate) fn render(w: usize, h: usize, f: impl Fn(f64, f64) -> f64) -> Projection {
        let center = (w / 2, h / 2);
        let mut values = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                values[y * w + x] = f(x as f64 - center.0 as f64, y as f64 - center.1 as f64);
            }
        }
        Projection {
            kind: ProjectionKind::Sum,
            width: w,
            height: h,
            values,
            center,
            n_frames: 1,
            snr: None,
        }
    }

    #[test]
    fn recovers_noiseless_gaussian() {
        let p = render(61, 61, |x, y| (-(x * x + y * y) / 8.0).exp());
        let r = fit_gaussian_peak(&p, false, Calibration::pixels()).unwrap();
        assert!((r.delta - 2.0).abs() < 1e-3, "{r:?}");
        assert!((r.a - 1.0).abs() < 1e-3);
        assert!(r.delta_uncertainty < 1e-6);
        assert!(!r.unreliable);
    }

    #[test]
    fn single_pixel_peak_fits_a_fifth_of_a_pixel() {
        let p = render(61, 61, |x, y| if x == 0.0 && y == 0.0 { 1.0 } else { 0.0 });
        let r = fit_gaussian_peak(&p, false, Calibration::pixels()).unwrap();
        assert!((r.delta - 0.2).abs() <= 0.05, "{r:?}");
        assert!(r.is_pixel_limited());
    }

    #[test]
    fn excluded_center_is_ignored() {
        let p = render(41, 41, |x, y| {
            if x == 0.0 && y == 0.0 {
                1e6
            } else {
                3.0 * (-(x * x + y * y) / 18.0).exp()
            }
        });
        let r = fit_gaussian_peak(&p, true, Calibration::pixels()).unwrap();
        assert!((r.delta_px - 3.0).abs() < 1e-3);
        assert!((r.a - 3.0).abs() < 1e-3);
    }

    #[test]
    fn uncertainty_identity() {
        let p = render(61, 61, |x, y| {
            let n = ((x * 7.3 + y * 3.1).sin() * 1e4).fract() * 0.02;
            (-(x * x + y * y) / 4.5).exp() + n
        });
        let r = fit_gaussian_peak(&p, false, Calibration::new(17.5, Units::Micrometres).unwrap())
            .unwrap();
        let lhs = r.delta_uncertainty * r.a;
        let rhs = r.sigma_noise * std::f64::consts::E.sqrt() * r.delta;
        assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs());
        assert!((r.delta / r.delta_px - 17.5).abs() < 1e-12);
    }

    #[test]
    fn absent_peak_is_flagged() {
        let p = render(61, 61, |x, y| ((x * 12.9898 + y * 78.233).sin() * 43758.5).fract() - 0.5);
        match fit_gaussian_peak(&p, false, Calibration::pixels()) {
            Ok(r) => assert!(r.unreliable),
            Err(Error::NoConvergence { .. }) => {}
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn flat_zero_projection() {
        let p = render(41, 41, |_, _| 0.0);
        let r = fit_gaussian_peak(&p, false, Calibration::pixels()).unwrap();
        assert!(r.unreliable);
    }
}
