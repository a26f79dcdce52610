//! Flat `key = value` run configuration and the bundled presets.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use spadcorr::{DetectorParams, Mode, SensorGeometry, SourceParams};

use crate::ValidationError;

pub const PRESETS: &[(&str, &str)] = &[
    ("paper", include_str!("../presets/paper.cfg")),
    ("paper-ff", include_str!("../presets/paper-ff.cfg")),
    ("paper-nf", include_str!("../presets/paper-nf.cfg")),
    ("separable", include_str!("../presets/separable.cfg")),
];

/// Which imaging modes a run covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modes {
    Nf,
    Ff,
    Both,
}

impl Modes {
    pub fn list(self) -> &'static [Mode] {
        match self {
            Modes::Nf => &[Mode::Nf],
            Modes::Ff => &[Mode::Ff],
            Modes::Both => &[Mode::Nf, Mode::Ff],
        }
    }
}

impl FromStr for Modes {
    type Err = ValidationError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "nf" => Ok(Modes::Nf),
            "ff" => Ok(Modes::Ff),
            "both" => Ok(Modes::Both),
            other => Err(ValidationError(format!("mode must be nf, ff or both, got {other:?}"))),
        }
    }
}

impl fmt::Display for Modes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modes::Nf => "nf",
            Modes::Ff => "ff",
            Modes::Both => "both",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub side: usize,
    pub spacing: usize,
    pub origin: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Modes,
    pub source: SourceParams,
    pub detector: DetectorParams,
    pub geometry: SensorGeometry,
    pub n_frames: usize,
    pub checkpoints: Vec<u64>,
    pub grid: GridSpec,
    pub blocks: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// Seed of the simulator for one mode; the two modes never share a stream.
    pub fn mode_seed(&self, mode: Mode) -> u64 {
        match mode {
            Mode::Nf => self.seed,
            Mode::Ff => self.seed.wrapping_add(1),
        }
    }

    /// Canonical text form. It leaves out `output_dir`, so reruns into
    /// another directory produce an identical file; parsing it back gives
    /// the same configuration apart from that field.
    pub fn to_text(&self) -> String {
        let s = &self.source;
        let d = &self.detector;
        let g = &self.geometry;
        let cps: Vec<String> = self.checkpoints.iter().map(|c| c.to_string()).collect();
        let mut out = format!(
            "mode = {}\n\
             n_frames = {}\n\
             seed = {}\n\
             checkpoints = {}\n\
             grid.side = {}\n\
             grid.spacing = {}\n",
            self.mode,
            self.n_frames,
            self.seed,
            cps.join(","),
            self.grid.side,
            self.grid.spacing,
        );
        if let Some((x, y)) = self.grid.origin {
            out.push_str(&format!("grid.origin = {x},{y}\n"));
        }
        out.push_str(&format!(
            "blocks = {}\n\
             source.sigma_pump = {}\n\
             source.delta_r = {}\n\
             source.delta_k = {}\n\
             source.delta_k_diff = {}\n\
             source.mean_pairs_per_frame = {}\n\
             source.wavelength = {}\n\
             source.entangled = {}\n\
             detector.quantum_efficiency = {}\n\
             detector.fill_factor = {}\n\
             detector.dark_count_prob = {}\n\
             detector.magnification_nf = {}\n\
             detector.fourier_scale_ff = {}\n\
             geometry.width = {}\n\
             geometry.height = {}\n\
             geometry.pixel_pitch = {}\n\
             geometry.exposure = {}\n",
            self.blocks,
            s.sigma_pump,
            s.delta_r,
            s.delta_k,
            s.delta_k_diff,
            s.mean_pairs_per_frame,
            s.wavelength,
            s.entangled,
            d.quantum_efficiency,
            d.fill_factor,
            d.dark_count_prob,
            d.magnification_nf,
            d.fourier_scale_ff,
            g.width,
            g.height,
            g.pixel_pitch,
            g.exposure,
        ));
        out
    }
}

/// Key/value pairs in file order of precedence: later entries win.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                ValidationError(format!("{origin}:{}: expected key = value", no + 1))
            })?;
            raw.set(k.trim(), v.trim());
        }
        Ok(raw)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            ValidationError(format!("unknown preset {name:?}; available: {}", names.join(", ")))
        })?;
        Self::parse(text, name)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn merge(&mut self, other: RawConfig) {
        // the two ways of giving the far-field mapping replace each other
        const FF_KEYS: [&str; 2] = ["detector.fourier_scale_ff", "detector.ff_focal_length"];
        if FF_KEYS.iter().any(|k| other.entries.contains_key(*k)) {
            for k in FF_KEYS {
                self.entries.remove(k);
            }
        }
        self.entries.extend(other.entries);
    }

    pub fn resolve(mut self) -> Result<RunConfig> {
        let paper_src = SourceParams::paper();
        let wavelength = self.take_f64("source.wavelength")?.unwrap_or(paper_src.wavelength);
        let delta_r = self.take_f64("source.delta_r")?.unwrap_or(paper_src.delta_r);
        let source = SourceParams {
            sigma_pump: self.take_f64("source.sigma_pump")?.unwrap_or(paper_src.sigma_pump),
            delta_r,
            delta_k: self.take_f64("source.delta_k")?.unwrap_or(paper_src.delta_k),
            delta_k_diff: self.take_f64("source.delta_k_diff")?.unwrap_or(1.0 / delta_r),
            mean_pairs_per_frame: self
                .take_f64("source.mean_pairs_per_frame")?
                .unwrap_or(paper_src.mean_pairs_per_frame),
            wavelength,
            entangled: self.take_parsed("source.entangled")?.unwrap_or(true),
        };

        let paper_det = DetectorParams::paper(wavelength);
        let fourier_scale_ff = match (
            self.take_f64("detector.fourier_scale_ff")?,
            self.take_f64("detector.ff_focal_length")?,
        ) {
            (Some(_), Some(_)) => bail!(ValidationError(
                "give either detector.fourier_scale_ff or detector.ff_focal_length, not both".into()
            )),
            (Some(s), None) => s,
            (None, Some(f)) => 2.0 * std::f64::consts::PI / (wavelength * 1e-3) / f,
            (None, None) => paper_det.fourier_scale_ff,
        };
        let detector = DetectorParams {
            quantum_efficiency: self
                .take_f64("detector.quantum_efficiency")?
                .unwrap_or(paper_det.quantum_efficiency),
            fill_factor: self.take_f64("detector.fill_factor")?.unwrap_or(paper_det.fill_factor),
            dark_count_prob: self
                .take_f64("detector.dark_count_prob")?
                .unwrap_or(paper_det.dark_count_prob),
            magnification_nf: self
                .take_f64("detector.magnification_nf")?
                .unwrap_or(paper_det.magnification_nf),
            fourier_scale_ff,
        };

        let paper_geom = SensorGeometry::paper();
        let geometry = SensorGeometry::new(
            self.take_parsed("geometry.width")?.unwrap_or(paper_geom.width),
            self.take_parsed("geometry.height")?.unwrap_or(paper_geom.height),
            self.take_f64("geometry.pixel_pitch")?.unwrap_or(paper_geom.pixel_pitch),
            self.take_f64("geometry.exposure")?.unwrap_or(paper_geom.exposure),
        )
        .map_err(|e| ValidationError(e.to_string()))?;

        let checkpoints = match self.entries.remove("checkpoints") {
            Some(v) => parse_count_list(&v)?,
            None => Vec::new(),
        };
        let origin = match self.entries.remove("grid.origin") {
            Some(v) => Some(parse_pair(&v)?),
            None => None,
        };
        let config = RunConfig {
            mode: self.take_parsed("mode")?.unwrap_or(Modes::Both),
            source,
            detector,
            geometry,
            n_frames: match self.entries.remove("n_frames") {
                Some(v) => parse_count(&v)? as usize,
                None => 100_000,
            },
            checkpoints,
            grid: GridSpec {
                side: self.take_parsed("grid.side")?.unwrap_or(4),
                spacing: self.take_parsed("grid.spacing")?.unwrap_or(1),
                origin,
            },
            blocks: self
                .take_parsed("blocks")?
                .unwrap_or(spadcorr::witness::DEFAULT_BLOCKS),
            seed: self.take_parsed("seed")?.unwrap_or(0),
            output_dir: self
                .entries
                .remove("output_dir")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("out")),
        };
        if let Some(k) = self.entries.keys().next() {
            bail!(ValidationError(format!("unknown config key {k:?}")));
        }
        config
            .source
            .validate()
            .and_then(|_| config.detector.validate())
            .map_err(|e| ValidationError(e.to_string()))?;
        if config.blocks == 0 {
            bail!(ValidationError("blocks must be at least 1".into()));
        }
        Ok(config)
    }

    fn take_parsed<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| anyhow!(ValidationError(format!("{key}: {e} ({v:?})")))),
        }
    }

    fn take_f64(&mut self, key: &str) -> Result<Option<f64>> {
        self.take_parsed::<f64>(key)
    }
}

/// A non-negative integer count, also accepted in `1e6` notation.
pub fn parse_count(s: &str) -> Result<u64> {
    let s = s.trim().replace('_', "");
    if let Ok(v) = s.parse::<u64>() {
        return Ok(v);
    }
    let v: f64 = s
        .parse()
        .map_err(|_| ValidationError(format!("not a count: {s:?}")))?;
    // exact integers up to 2^53 only
    if !(v >= 0.0 && v.fract() == 0.0 && v <= 9_007_199_254_740_992.0) {
        bail!(ValidationError(format!("not a non-negative integer: {s:?}")));
    }
    Ok(v as u64)
}

pub fn parse_count_list(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(parse_count)
        .collect()
}

pub fn parse_pair(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| ValidationError(format!("expected x,y, got {s:?}")))?;
    let num = |t: &str| {
        t.trim()
            .parse::<usize>()
            .map_err(|_| anyhow!(ValidationError(format!("bad coordinate {t:?}"))))
    };
    Ok((num(a)?, num(b)?))
}
