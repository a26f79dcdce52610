mod common;

use std::sync::OnceLock;

use proptest::prelude::*;
use spadcorr::fit::{fit_gaussian_peak, Calibration, Units};
use spadcorr::jpd::{
    accumulate_stream, conditional_projection, jpd_element, minus_projection, oracle_jpd, projection_with,
    sum_projection, CoordHistograms, Estimator, JpdView, Projection, ProjectionKind,
};
use spadcorr::sim::RunLedger;
use spadcorr::{accumulate, AccumStats, DetectorParams, FrameSet, Mode, SensorGeometry, Simulator, SourceParams};

fn frame_sets(max_side: usize, max_frames: usize) -> impl Strategy<Value = FrameSet> {
    (2..=max_side, 2..=max_side, 2..=max_frames, 0.02f64..0.6).prop_flat_map(|(w, h, n, p)| {
        proptest::collection::vec(proptest::bool::weighted(p), w * h * n).prop_map(move |bits| {
            let g = SensorGeometry::new(w, h, 1.0, 1.0).unwrap();
            let frames: Vec<Vec<bool>> = bits.chunks(w * h).map(<[bool]>::to_vec).collect();
            FrameSet::from_pixel_frames(g, &frames, "prop").unwrap()
        })
    })
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Largest absolute difference relative to the largest magnitude of `a`.
fn rel_diff(a: &Projection, b: &Projection) -> f64 {
    assert_eq!((a.width, a.height, a.center), (b.width, b.height, b.center));
    let d = a.values.iter().zip(&b.values).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    d / max_abs(&a.values).max(1e-300)
}

fn coord_histograms(set: &FrameSet) -> CoordHistograms {
    let mut h = CoordHistograms::new(*set.geometry());
    h.add_frames(set).unwrap();
    h
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn chunked_accumulation_equals_single_pass(set in frame_sets(8, 60), chunk in 1usize..20) {
        let chunks: Vec<_> = (0..set.n_frames())
            .step_by(chunk)
            .map(|s| Ok(set.slice(s..(s + chunk).min(set.n_frames()))))
            .collect();
        prop_assert_eq!(accumulate_stream(*set.geometry(), chunks).unwrap(), accumulate(&set));
    }

    #[test]
    fn merge_is_associative(set in frame_sets(6, 60), a in 0usize..30, b in 0usize..30) {
        let n = set.n_frames();
        let (a, b) = (a.min(n), b.min(n));
        let (a, b) = (a.min(b), a.max(b));
        let parts: Vec<AccumStats> = [0..a, a..b, b..n].into_iter().map(|r| accumulate(&set.slice(r))).collect();
        let mut left = parts[0].clone();
        left.merge(&parts[1]).unwrap();
        left.merge(&parts[2]).unwrap();
        let mut inner = parts[1].clone();
        inner.merge(&parts[2]).unwrap();
        let mut right = parts[0].clone();
        right.merge(&inner).unwrap();
        prop_assert_eq!(&left, &right);
        prop_assert_eq!(&left, &accumulate(&set));
    }

    #[test]
    fn counts_are_consistent(set in frame_sets(7, 40)) {
        let s = accumulate(&set);
        let np = set.geometry().n_pixels();
        let mut pairs_per_frame = 0u64;
        for f in set.iter() {
            let k = f.lit_count() as u64;
            pairs_per_frame += k * k.saturating_sub(1) / 2;
        }
        let mut pair_total = 0u64;
        for i in 0..np {
            prop_assert_eq!(s.pair_count(i, i), s.marginal()[i]);
            prop_assert!(s.marginal()[i] <= s.n_frames());
            for j in i + 1..np {
                let c = s.pair_count(i, j);
                prop_assert_eq!(c, s.pair_count(j, i));
                prop_assert!(c <= s.marginal()[i].min(s.marginal()[j]));
                pair_total += c;
            }
        }
        prop_assert_eq!(pair_total, pairs_per_frame);
    }

    #[test]
    fn production_gamma_equals_oracle_bitwise(set in frame_sets(8, 100)) {
        let s = accumulate(&set);
        let view = JpdView::new(&s).unwrap();
        let oracle = oracle_jpd(&set).unwrap();
        for (i, row) in oracle.iter().enumerate() {
            for (j, g) in row.iter().enumerate() {
                prop_assert_eq!(view.gamma(i, j).to_bits(), g.to_bits());
                prop_assert_eq!(view.gamma(i, j).to_bits(), view.gamma(j, i).to_bits());
            }
        }
    }

    #[test]
    fn minus_projection_is_point_symmetric(set in frame_sets(8, 60)) {
        let s = accumulate(&set);
        for p in [minus_projection(&s).unwrap(), coord_histograms(&set).minus_projection().unwrap()] {
            let n = p.values.len();
            for b in 0..n {
                prop_assert_eq!(p.values[b].to_bits(), p.values[n - 1 - b].to_bits());
            }
            prop_assert_eq!(p.at(p.center.0, p.center.1), 0.0);
        }
    }

    #[test]
    fn sum_corners_need_one_pixel_twice(set in frame_sets(8, 60)) {
        // the four corner sums are reachable only with i == j
        let p = sum_projection(&accumulate(&set)).unwrap();
        let (w, h) = (p.width - 1, p.height - 1);
        for (x, y) in [(0, 0), (w, 0), (0, h), (w, h)] {
            prop_assert_eq!(p.at(x, y), 0.0);
        }
    }

    #[test]
    fn spectral_route_matches_pair_route(set in frame_sets(10, 80)) {
        let s = accumulate(&set);
        let h = coord_histograms(&set);
        prop_assert!(rel_diff(&sum_projection(&s).unwrap(), &h.sum_projection().unwrap()) <= 1e-9);
        prop_assert!(rel_diff(&minus_projection(&s).unwrap(), &h.minus_projection().unwrap()) <= 1e-9);
    }

    #[test]
    fn generic_linear_projection_matches_integer_route(set in frame_sets(8, 60)) {
        let s = accumulate(&set);
        for (kind, fast) in [
            (ProjectionKind::Sum, sum_projection(&s).unwrap()),
            (ProjectionKind::Minus, minus_projection(&s).unwrap()),
        ] {
            let slow = projection_with(&s, kind, Estimator::Linear).unwrap();
            prop_assert!(rel_diff(&fast, &slow) <= 1e-12);
        }
    }
}

#[test]
fn independent_pixels_have_vanishing_gamma() {
    let g = SensorGeometry::square(4).unwrap();
    let set = common::bernoulli_frames(g, &[0.1; 16], 100_000, 31);
    let s = accumulate(&set);
    let mut gammas = Vec::new();
    for i in 0..16 {
        for j in i + 1..16 {
            gammas.push(jpd_element(&s, i, j).unwrap());
        }
    }
    assert!(gammas[0].abs() < 5e-4, "{}", gammas[0]);
    // each estimate has std 0.1 * 0.9 / sqrt(1e5) = 2.8e-4
    let rms = (gammas.iter().map(|x| x * x).sum::<f64>() / gammas.len() as f64).sqrt();
    assert!(rms < 5e-4 && rms > 1.5e-4, "rms {rms}");
}

#[test]
fn independent_pixels_rarely_exceed_four_sigma() {
    let g = SensorGeometry::square(8).unwrap();
    let rates: Vec<f64> = (0..64).map(|i| 0.05 + 0.25 * (i as f64 / 63.0)).collect();
    let n = 100_000;
    let s = accumulate(&common::bernoulli_frames(g, &rates, n, 32));
    let p: Vec<f64> = s.marginal().iter().map(|&m| m as f64 / n as f64).collect();
    let (mut tested, mut outliers) = (0usize, 0usize);
    for i in 0..64 {
        for j in i + 1..64 {
            let se = (p[i] * (1.0 - p[i]) * p[j] * (1.0 - p[j]) / n as f64).sqrt();
            tested += 1;
            if jpd_element(&s, i, j).unwrap().abs() > 4.0 * se {
                outliers += 1;
            }
        }
    }
    assert!(outliers as f64 <= 1e-3 * tested as f64, "{outliers} of {tested}");
}

#[test]
fn conditional_peak_sits_at_the_point_reflection() {
    let mut src = SourceParams::paper();
    src.delta_k = 1e-6;
    src.mean_pairs_per_frame = 20.0;
    let det = DetectorParams::ideal(src.wavelength);
    let g = SensorGeometry::paper();
    let sim = Simulator::new(src, det, g, Mode::Ff, 41).unwrap();
    let s = accumulate(&sim.run(200_000).0);
    let anchor = g.index(35, 18);
    let p = conditional_projection(&s, anchor).unwrap();
    let peak = p.argmax_excluding(Some((35, 18)));
    assert_eq!(peak, (64 - 1 - 35, 32 - 1 - 18));
    let mut rest: Vec<f64> = p.values.clone();
    rest[peak.1 * p.width + peak.0] = f64::NEG_INFINITY;
    let second = rest.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(p.at(peak.0, peak.1) > 5.0 * second, "peak {} second {second}", p.at(peak.0, peak.1));
    assert!(p.snr.unwrap() > 100.0);
}

#[test]
fn separable_source_shows_no_correlation_peak() {
    let src = SourceParams::separable();
    let sim = Simulator::new(src, DetectorParams::paper(src.wavelength), SensorGeometry::paper(), Mode::Ff, 43).unwrap();
    let g = sim.geometry;
    let s = accumulate_stream(g, sim.chunks(1_000_000, 1 << 16)).unwrap();
    let anchor = g.index(g.width / 2, g.height / 2);
    for p in [
        sum_projection(&s).unwrap(),
        minus_projection(&s).unwrap(),
        conditional_projection(&s, anchor).unwrap(),
    ] {
        let r = common::null_excess(&s, &p);
        assert!(r < 5.0, "{:?}: peak {r} background std", p.kind);
    }
}

/// One paper-scale far-field run shared by the tests below.
struct FarField {
    stats: AccumStats,
    ledger: RunLedger,
    sim: Simulator,
}

fn paper_far_field() -> &'static FarField {
    static RUN: OnceLock<FarField> = OnceLock::new();
    RUN.get_or_init(|| {
        let src = SourceParams::paper();
        let g = SensorGeometry::paper();
        let sim = Simulator::new(src, DetectorParams::paper(src.wavelength), g, Mode::Ff, 47).unwrap();
        let (n, chunk) = (10_000_000usize, 1usize << 17);
        let mut stats = AccumStats::new(g);
        let mut ledger = RunLedger::default();
        for first in (0..n).step_by(chunk) {
            let (set, l) = sim.frames(first as u64, chunk.min(n - first));
            stats.merge(&accumulate(&set)).unwrap();
            ledger += l;
        }
        FarField { stats, ledger, sim }
    })
}

#[test]
fn paper_scale_conditional_snr_reaches_hundreds() {
    let ff = paper_far_field();
    let g = ff.stats.geometry();
    let p = conditional_projection(&ff.stats, g.index(g.width / 2, g.height / 2)).unwrap();
    let snr = p.snr.unwrap();
    assert!(snr >= 100.0, "snr {snr}");
}

#[test]
fn paper_scale_momentum_width_is_pixel_limited() {
    let ff = paper_far_field();
    let per_px = ff.sim.detector.calibration(Mode::Ff, &ff.sim.geometry);
    let cal = Calibration::new(per_px, Units::RadPerMicrometre).unwrap();
    let fit = fit_gaussian_peak(&sum_projection(&ff.stats).unwrap(), false, cal).unwrap();
    let injected = ff.sim.source.delta_k;
    assert!(!fit.unreliable);
    assert!(fit.delta <= injected + per_px, "{} vs {injected}", fit.delta);
    assert!(fit.delta_px >= 0.15, "{} px", fit.delta_px);
}

/// Γ that inverts pixel saturation: an independent background fires pixel
/// `i` with probability `p_i`, which hides a genuine pair with probability
/// `1 − (1 − p_i)(1 − p_j)`, and the logarithm undoes exactly that.
const UNSATURATED: Estimator = Estimator::LogCorrected { scale: 1.0 };

#[test]
fn sum_projection_integral_counts_genuine_pairs() {
    let ff = paper_far_field();
    let expected = ff.ledger.genuine_coincidences as f64 / ff.stats.n_frames() as f64;
    // ordered pairs count each coincidence twice
    let integral = |p: Projection| p.values.iter().sum::<f64>() / 2.0;
    let corrected = integral(projection_with(&ff.stats, ProjectionKind::Sum, UNSATURATED).unwrap());
    assert!((corrected / expected - 1.0).abs() < 0.05, "{corrected} vs {expected}");
    // the linear estimator keeps only the pairs no background photon masks
    let linear = integral(sum_projection(&ff.stats).unwrap());
    assert!(linear < corrected && linear > 0.8 * expected, "{linear}");
}

/// Normalised P₊ peak per generated pair, with its standard error over blocks.
fn normalised_peak(mu: f64, bin: Option<(usize, usize)>) -> (f64, f64, (usize, usize)) {
    let mut src = SourceParams::paper();
    src.mean_pairs_per_frame = mu;
    let sim = Simulator::new(src, DetectorParams::paper(src.wavelength), SensorGeometry::paper(), Mode::Ff, 53).unwrap();
    let (blocks, per) = (20usize, 25_000usize);
    let mut total = AccumStats::new(sim.geometry);
    let mut heights = Vec::new();
    let mut projections = Vec::new();
    for b in 0..blocks {
        let (set, _) = sim.frames((b * per) as u64, per);
        let s = accumulate(&set);
        projections.push(projection_with(&s, ProjectionKind::Sum, UNSATURATED).unwrap());
        total.merge(&s).unwrap();
    }
    let bin = bin.unwrap_or_else(|| {
        projection_with(&total, ProjectionKind::Sum, UNSATURATED)
            .unwrap()
            .argmax_excluding(None)
    });
    for p in &projections {
        heights.push(p.at(bin.0, bin.1) / mu);
    }
    let k = heights.len() as f64;
    let mean = heights.iter().sum::<f64>() / k;
    let sd = (heights.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
    (mean, sd / k.sqrt(), bin)
}

#[test]
fn doubling_the_pair_rate_leaves_normalised_peak_unchanged() {
    let (h1, se1, bin) = normalised_peak(50.0, None);
    let (h2, se2, _) = normalised_peak(100.0, Some(bin));
    let z = (h1 - h2).abs() / (se1 * se1 + se2 * se2).sqrt();
    assert!(z < 3.0, "peak/pair {h1} +- {se1} vs {h2} +- {se2}");
}
