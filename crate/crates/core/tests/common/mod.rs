//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spadcorr::jpd::{
    null_std, spectral_pair_products, standardized, Projection, ProjectionKind,
    SNR_EXCLUSION_RADIUS,
};
use spadcorr::{AccumStats, FrameSet, SensorGeometry};

/// Frames whose pixels fire independently at the given per-pixel rates.
pub fn bernoulli_frames(geometry: SensorGeometry, rates: &[f64], n: usize, seed: u64) -> FrameSet {
    assert_eq!(rates.len(), geometry.n_pixels());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = FrameSet::new(geometry, format!("bernoulli seed={seed}"));
    let mut px = vec![false; rates.len()];
    for _ in 0..n {
        for (b, &p) in px.iter_mut().zip(rates) {
            *b = rng.random::<f64>() < p;
        }
        set.push_pixels(&px).unwrap();
    }
    set
}

/// Random sensor of `w × h` pixels with `n` frames at a random occupancy.
pub fn random_frames(w: usize, h: usize, n: usize, seed: u64) -> FrameSet {
    let g = SensorGeometry::new(w, h, 1.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p: f64 = rng.random_range(0.01..0.5);
    bernoulli_frames(g, &vec![p; w * h], n, rng.random())
}

/// Bins must expect at least this many coincidences under independence
/// before a 5-sigma statement about them means anything: below it the count
/// is visibly Poisson-skewed and a single chance coincidence reads as a
/// many-sigma excess.
pub const GAUSSIAN_REGIME_COUNTS: f64 = 1000.0;

/// Expected coincidence count per bin if pixels fired independently.
fn null_counts(stats: &AccumStats, proj: &Projection) -> Vec<f64> {
    let g = stats.geometry();
    let n = stats.n_frames() as f64;
    let p: Vec<f64> = stats.marginal().iter().map(|&s| s as f64 / n).collect();
    match proj.kind {
        ProjectionKind::Sum => spectral_pair_products(&p, g.width, g.height, false)
            .into_iter()
            .map(|x| x * n / 2.0)
            .collect(),
        ProjectionKind::Minus => {
            let mut v: Vec<f64> = spectral_pair_products(&p, g.width, g.height, true)
                .into_iter()
                .map(|x| x * n)
                .collect();
            v[proj.center.1 * proj.width + proj.center.0] = 0.0;
            v
        }
        ProjectionKind::Conditional { anchor } => {
            let mut v: Vec<f64> = p.iter().map(|&q| q * p[anchor] * n).collect();
            v[anchor] = 0.0;
            v
        }
    }
}

/// Largest bin of the standardised projection divided by the standard
/// deviation of the standardised background, over the bins in the Gaussian
/// regime. Background is every such bin farther than the SNR exclusion
/// radius from the largest one.
pub fn null_excess(stats: &AccumStats, proj: &Projection) -> f64 {
    let z = standardized(proj, &null_std(stats, proj.kind).unwrap()).unwrap();
    let counts = null_counts(stats, proj);
    let keep: Vec<usize> = (0..z.values.len())
        .filter(|&b| counts[b] >= GAUSSIAN_REGIME_COUNTS)
        .collect();
    assert!(keep.len() > 100, "only {} bins in the Gaussian regime", keep.len());
    let peak = *keep
        .iter()
        .max_by(|&&a, &&b| z.values[a].total_cmp(&z.values[b]))
        .unwrap();
    let (px, py) = ((peak % z.width) as f64, (peak / z.width) as f64);
    let r2 = SNR_EXCLUSION_RADIUS * SNR_EXCLUSION_RADIUS;
    let bg: Vec<f64> = keep
        .iter()
        .filter(|&&b| {
            let dx = (b % z.width) as f64 - px;
            let dy = (b / z.width) as f64 - py;
            dx * dx + dy * dy > r2
        })
        .map(|&b| z.values[b])
        .collect();
    let mean = bg.iter().sum::<f64>() / bg.len() as f64;
    let var = bg.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (bg.len() - 1) as f64;
    z.values[peak] / var.sqrt()
}
