//! Monte-Carlo source of photon pairs imaged onto a binary SPAD array.
//!
//! The two-photon state is modelled as a product of two Gaussians: one over
//! the sum coordinate and one over the difference coordinate. In the near
//! field the pair is born at `r0` (pump envelope) and split by `dr`; in the far
//! field the momentum sum `k1 + k2` is narrow (`delta_k`) and the momentum
//! difference is broad (`delta_k_diff`).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frames::{FrameSet, SensorGeometry};

/// Which plane of the crystal is imaged onto the sensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Near field: pixels sample transverse position.
    Nf,
    /// Far field: pixels sample transverse momentum.
    Ff,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Nf => "nf",
            Mode::Ff => "ff",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nf" | "near" | "near-field" => Ok(Mode::Nf),
            "ff" | "far" | "far-field" => Ok(Mode::Ff),
            other => Err(Error::InvalidParam(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceParams {
    /// Pump 1/e² intensity radius at the crystal, µm.
    pub sigma_pump: f64,
    /// Std of the position difference `r1 - r2` per axis, µm.
    pub delta_r: f64,
    /// Std of the momentum sum `k1 + k2` per axis, rad/µm.
    pub delta_k: f64,
    /// Std of the momentum difference `k1 - k2` per axis, rad/µm.
    pub delta_k_diff: f64,
    pub mean_pairs_per_frame: f64,
    /// Degenerate wavelength, nm.
    pub wavelength: f64,
    /// When false, the two photons of a "pair" are drawn independently.
    pub entangled: bool,
}

impl SourceParams {
    /// 0.7 mm pump diameter, 4.3 µm / 1.0666e-2 rad/µm correlation widths,
    /// 694 nm pairs, 234 pairs per exposure.
    pub fn paper() -> Self {
        let delta_r = 4.3;
        Self {
            sigma_pump: 350.0,
            delta_r,
            delta_k: 1.0666e-2,
            delta_k_diff: 1.0 / delta_r,
            mean_pairs_per_frame: 234.0,
            wavelength: 694.0,
            entangled: true,
        }
    }

    pub fn separable() -> Self {
        Self {
            entangled: false,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("sigma_pump", self.sigma_pump),
            ("delta_r", self.delta_r),
            ("delta_k", self.delta_k),
            ("delta_k_diff", self.delta_k_diff),
            ("wavelength", self.wavelength),
        ];
        for (name, v) in widths {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParam(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.mean_pairs_per_frame >= 0.0 && self.mean_pairs_per_frame.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "mean_pairs_per_frame must be >= 0, got {}",
                self.mean_pairs_per_frame
            )));
        }
        if self.entangled && self.delta_r * self.delta_k >= 0.5 {
            return Err(Error::InvalidParam(format!(
                "entangled source needs delta_r * delta_k < 1/2, got {}",
                self.delta_r * self.delta_k
            )));
        }
        Ok(())
    }

    /// Per-axis std of a single photon's position.
    pub fn position_marginal_std(&self) -> f64 {
        (0.25 * self.sigma_pump * self.sigma_pump + 0.25 * self.delta_r * self.delta_r).sqrt()
    }

    /// Per-axis std of a single photon's momentum.
    pub fn momentum_marginal_std(&self) -> f64 {
        0.5 * (self.delta_k * self.delta_k + self.delta_k_diff * self.delta_k_diff).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorParams {
    pub quantum_efficiency: f64,
    /// Active fraction of each pixel's area, modelled as a centred square.
    pub fill_factor: f64,
    /// Probability that a pixel fires on its own during one exposure.
    pub dark_count_prob: f64,
    /// Near-field image magnification.
    pub magnification_nf: f64,
    /// Far-field mapping, rad/µm of transverse momentum per µm on the sensor.
    pub fourier_scale_ff: f64,
}

impl DetectorParams {
    /// 9% QE, 80% fill factor, 0.14 counts/pixel/s over a 10 ns gate,
    /// NF magnification f4/f1 = 300/35 and FF mapping through f1*f3/f2 = 70 mm.
    pub fn paper(wavelength_nm: f64) -> Self {
        let k0 = 2.0 * std::f64::consts::PI / (wavelength_nm * 1e-3);
        let focal_um = 35.0 * 200.0 / 100.0 * 1e3;
        Self {
            quantum_efficiency: 0.09,
            fill_factor: 0.80,
            dark_count_prob: 0.14 * 10e-9,
            magnification_nf: 300.0 / 35.0,
            fourier_scale_ff: k0 / focal_um,
        }
    }

    /// Unit efficiency, full fill factor, no dark counts.
    pub fn ideal(wavelength_nm: f64) -> Self {
        Self {
            quantum_efficiency: 1.0,
            fill_factor: 1.0,
            dark_count_prob: 0.0,
            ..Self::paper(wavelength_nm)
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("quantum_efficiency", self.quantum_efficiency),
            ("fill_factor", self.fill_factor),
            ("dark_count_prob", self.dark_count_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidParam(format!("{name} must be in [0,1], got {p}")));
            }
        }
        for (name, s) in [
            ("magnification_nf", self.magnification_nf),
            ("fourier_scale_ff", self.fourier_scale_ff),
        ] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidParam(format!("{name} must be > 0, got {s}")));
            }
        }
        Ok(())
    }

    /// Physical size of one pixel at the crystal: µm (NF) or rad/µm (FF).
    pub fn calibration(&self, mode: Mode, geometry: &SensorGeometry) -> f64 {
        match mode {
            Mode::Nf => geometry.pixel_pitch / self.magnification_nf,
            Mode::Ff => geometry.pixel_pitch * self.fourier_scale_ff,
        }
    }
}

/// One generated pair: positions `r0 ± dr/2` and momenta `k1`, `k2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotonPair {
    pub r0: [f64; 2],
    pub dr: [f64; 2],
    pub k1: [f64; 2],
    pub k2: [f64; 2],
}

impl PhotonPair {
    pub fn positions(&self) -> [[f64; 2]; 2] {
        [
            [self.r0[0] + 0.5 * self.dr[0], self.r0[1] + 0.5 * self.dr[1]],
            [self.r0[0] - 0.5 * self.dr[0], self.r0[1] - 0.5 * self.dr[1]],
        ]
    }

    pub fn momenta(&self) -> [[f64; 2]; 2] {
        [self.k1, self.k2]
    }

    fn coords(&self, mode: Mode) -> [[f64; 2]; 2] {
        match mode {
            Mode::Nf => self.positions(),
            Mode::Ff => self.momenta(),
        }
    }
}

#[inline]
fn normal2<R: Rng>(rng: &mut R, std: f64) -> [f64; 2] {
    let x: f64 = rng.sample(StandardNormal);
    let y: f64 = rng.sample(StandardNormal);
    [x * std, y * std]
}

fn draw_pair<R: Rng>(src: &SourceParams, rng: &mut R) -> PhotonPair {
    if src.entangled {
        let r0 = normal2(rng, 0.5 * src.sigma_pump);
        let dr = normal2(rng, src.delta_r);
        let s = normal2(rng, src.delta_k);
        let d = normal2(rng, src.delta_k_diff);
        PhotonPair {
            r0,
            dr,
            k1: [0.5 * (s[0] + d[0]), 0.5 * (s[1] + d[1])],
            k2: [0.5 * (s[0] - d[0]), 0.5 * (s[1] - d[1])],
        }
    } else {
        let ps = src.position_marginal_std();
        let ks = src.momentum_marginal_std();
        let p1 = normal2(rng, ps);
        let p2 = normal2(rng, ps);
        PhotonPair {
            r0: [0.5 * (p1[0] + p2[0]), 0.5 * (p1[1] + p2[1])],
            dr: [p1[0] - p2[0], p1[1] - p2[1]],
            k1: normal2(rng, ks),
            k2: normal2(rng, ks),
        }
    }
}

/// Draws only the coordinate of one photon used by `mode`; `which` picks the
/// photon. Same marginal as [`draw_pair`].
fn draw_pair_coords<R: Rng>(src: &SourceParams, mode: Mode, rng: &mut R) -> [[f64; 2]; 2] {
    match (src.entangled, mode) {
        (true, Mode::Nf) => {
            let r0 = normal2(rng, 0.5 * src.sigma_pump);
            let dr = normal2(rng, src.delta_r);
            [
                [r0[0] + 0.5 * dr[0], r0[1] + 0.5 * dr[1]],
                [r0[0] - 0.5 * dr[0], r0[1] - 0.5 * dr[1]],
            ]
        }
        (true, Mode::Ff) => {
            let s = normal2(rng, src.delta_k);
            let d = normal2(rng, src.delta_k_diff);
            [
                [0.5 * (s[0] + d[0]), 0.5 * (s[1] + d[1])],
                [0.5 * (s[0] - d[0]), 0.5 * (s[1] - d[1])],
            ]
        }
        (false, Mode::Nf) => {
            let s = src.position_marginal_std();
            [normal2(rng, s), normal2(rng, s)]
        }
        (false, Mode::Ff) => {
            let s = src.momentum_marginal_std();
            [normal2(rng, s), normal2(rng, s)]
        }
    }
}

pub fn sample_pairs(src: &SourceParams, n_pairs: usize, rng_seed: u64) -> Result<Vec<PhotonPair>> {
    src.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok((0..n_pairs).map(|_| draw_pair(src, &mut rng)).collect())
}

/// Maps crystal-plane coordinates onto the sensor.
#[derive(Debug, Clone, Copy)]
struct PixelMapper {
    width: usize,
    height: usize,
    /// Crystal units per pixel.
    scale: f64,
    /// Side of the active square as a fraction of the pitch.
    active: f64,
}

impl PixelMapper {
    fn new(det: &DetectorParams, geom: &SensorGeometry, mode: Mode) -> Self {
        Self {
            width: geom.width,
            height: geom.height,
            scale: det.calibration(mode, geom),
            active: det.fill_factor.sqrt(),
        }
    }

    /// Pixel index hit by a photon at `c`, or `None` when it falls outside
    /// the array or on the insensitive border of a pixel.
    #[inline]
    fn map(&self, c: [f64; 2]) -> Option<usize> {
        let fx = c[0] / self.scale + 0.5 * self.width as f64;
        let fy = c[1] / self.scale + 0.5 * self.height as f64;
        if !(fx >= 0.0 && fy >= 0.0) {
            return None;
        }
        let (ix, iy) = (fx.floor(), fy.floor());
        if ix as usize >= self.width || iy as usize >= self.height {
            return None;
        }
        if self.active < 1.0 {
            let half = 0.5 * self.active;
            if (fx - ix - 0.5).abs() >= half || (fy - iy - 0.5).abs() >= half {
                return None;
            }
        }
        Some(iy as usize * self.width + ix as usize)
    }
}

#[inline]
fn set_bit(frame: &mut [u8], pixel: usize) {
    frame[pixel >> 3] |= 1 << (pixel & 7);
}

fn add_dark_counts<R: Rng>(frame: &mut [u8], n_pixels: usize, p: f64, rng: &mut R) {
    if p <= 0.0 {
        return;
    }
    let n_dark = Binomial::new(n_pixels as u64, p)
        .expect("dark count probability validated")
        .sample(rng) as usize;
    for px in rand::seq::index::sample(rng, n_pixels, n_dark) {
        set_bit(frame, px);
    }
}

/// Renders one exposure of the given pairs. Every photon survives with
/// probability `quantum_efficiency` and must land on the active area of a
/// pixel (area fraction `fill_factor`); pixels read the OR of all events.
pub fn detect_frame(
    pairs: &[PhotonPair],
    det: &DetectorParams,
    geom: &SensorGeometry,
    mode: Mode,
    rng_seed: u64,
) -> Result<Vec<bool>> {
    det.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mapper = PixelMapper::new(det, geom, mode);
    let mut frame = vec![0u8; geom.frame_bytes()];
    for pair in pairs {
        for c in pair.coords(mode) {
            if rng.random::<f64>() < det.quantum_efficiency {
                if let Some(px) = mapper.map(c) {
                    set_bit(&mut frame, px);
                }
            }
        }
    }
    add_dark_counts(&mut frame, geom.n_pixels(), det.dark_count_prob, &mut rng);
    Ok((0..geom.n_pixels())
        .map(|p| (frame[p >> 3] >> (p & 7)) & 1 == 1)
        .collect())
}

/// Bookkeeping of what the simulator generated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunLedger {
    pub pairs_generated: u64,
    /// Photons that reached an active pixel area.
    pub photons_detected: u64,
    /// Pairs with both photons detected, on two distinct pixels.
    pub genuine_coincidences: u64,
}

impl std::ops::AddAssign for RunLedger {
    fn add_assign(&mut self, o: Self) {
        self.pairs_generated += o.pairs_generated;
        self.photons_detected += o.photons_detected;
        self.genuine_coincidences += o.genuine_coincidences;
    }
}

/// Full simulation configuration for one imaging mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Simulator {
    pub source: SourceParams,
    pub detector: DetectorParams,
    pub geometry: SensorGeometry,
    pub mode: Mode,
    pub seed: u64,
}

impl Simulator {
    pub fn new(
        source: SourceParams,
        detector: DetectorParams,
        geometry: SensorGeometry,
        mode: Mode,
        seed: u64,
    ) -> Result<Self> {
        source.validate()?;
        detector.validate()?;
        Ok(Self {
            source,
            detector,
            geometry,
            mode,
            seed,
        })
    }

    pub fn source_tag(&self) -> String {
        let s = &self.source;
        let d = &self.detector;
        format!(
            "spdc-sim mode={} seed={} entangled={} sigma_pump={} delta_r={} delta_k={} \
             delta_k_diff={} mean_pairs={} wavelength={} qe={} fill_factor={} dark_prob={} \
             magnification_nf={} fourier_scale_ff={}",
            self.mode,
            self.seed,
            s.entangled,
            s.sigma_pump,
            s.delta_r,
            s.delta_k,
            s.delta_k_diff,
            s.mean_pairs_per_frame,
            s.wavelength,
            d.quantum_efficiency,
            d.fill_factor,
            d.dark_count_prob,
            d.magnification_nf,
            d.fourier_scale_ff,
        )
    }

    /// Independent stream for each frame, so output does not depend on
    /// scheduling or chunking.
    fn frame_rng(&self, frame_index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(frame_index);
        rng
    }

    fn render_frame(&self, frame_index: u64, out: &mut [u8], mapper: &PixelMapper) -> RunLedger {
        let mut rng = self.frame_rng(frame_index);
        let q = self.detector.quantum_efficiency;
        let mu = self.source.mean_pairs_per_frame;
        // Poisson thinning: pairs with two, one or zero photons passing the
        // QE test are independent Poisson counts.
        let both = poisson(&mut rng, mu * q * q);
        let single = poisson(&mut rng, 2.0 * mu * q * (1.0 - q));
        let pairs_generated = poisson(&mut rng, mu * (1.0 - q) * (1.0 - q)) + both + single;

        let mut ledger = RunLedger {
            pairs_generated,
            ..RunLedger::default()
        };
        for _ in 0..both {
            let [c1, c2] = draw_pair_coords(&self.source, self.mode, &mut rng);
            let p1 = mapper.map(c1);
            let p2 = mapper.map(c2);
            for p in [p1, p2].into_iter().flatten() {
                set_bit(out, p);
                ledger.photons_detected += 1;
            }
            if let (Some(a), Some(b)) = (p1, p2) {
                if a != b {
                    ledger.genuine_coincidences += 1;
                }
            }
        }
        for _ in 0..single {
            let cs = draw_pair_coords(&self.source, self.mode, &mut rng);
            let c = cs[rng.random_range(0..2usize)];
            if let Some(p) = mapper.map(c) {
                set_bit(out, p);
                ledger.photons_detected += 1;
            }
        }
        add_dark_counts(
            out,
            self.geometry.n_pixels(),
            self.detector.dark_count_prob,
            &mut rng,
        );
        ledger
    }

    /// Frames `first .. first + n` of the run.
    pub fn frames(&self, first: u64, n: usize) -> (FrameSet, RunLedger) {
        let fb = self.geometry.frame_bytes();
        let mapper = PixelMapper::new(&self.detector, &self.geometry, self.mode);
        let mut payload = vec![0u8; n * fb];
        let ledger = payload
            .par_chunks_mut(fb.max(1))
            .enumerate()
            .with_min_len(256)
            .map(|(i, out)| self.render_frame(first + i as u64, out, &mapper))
            .reduce(RunLedger::default, |mut a, b| {
                a += b;
                a
            });
        let set = FrameSet::from_payload(self.geometry, n, payload, self.source_tag())
            .expect("payload sized from geometry");
        (set, ledger)
    }

    pub fn run(&self, n_frames: usize) -> (FrameSet, RunLedger) {
        self.frames(0, n_frames)
    }

    /// The first `n_frames` frames as a lazy sequence of chunks.
    pub fn chunks(
        &self,
        n_frames: usize,
        chunk_size: usize,
    ) -> impl Iterator<Item = Result<FrameSet>> + '_ {
        let chunk_size = chunk_size.max(1);
        (0..n_frames.div_ceil(chunk_size)).map(move |c| {
            let first = c * chunk_size;
            Ok(self.frames(first as u64, chunk_size.min(n_frames - first)).0)
        })
    }
}

fn poisson<R: Rng>(rng: &mut R, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("finite positive mean").sample(rng) as u64
}

pub fn simulate_run(
    src: &SourceParams,
    det: &DetectorParams,
    geom: &SensorGeometry,
    mode: Mode,
    n_frames: usize,
    rng_seed: u64,
) -> Result<FrameSet> {
    let sim = Simulator::new(*src, *det, *geom, mode, rng_seed)?;
    Ok(sim.run(n_frames).0)
}
