//! The five subcommands. Each writes into one output directory and closes
//! with `manifest.txt` and `summary.txt`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use log::info;
use spadcorr::epr::{confidence_scaling, epr_from_stats, EprAnalysis, ScalingTable};
use spadcorr::export::{
    bounds_csv, epr_csv, scaling_csv, write_matrix_csv, write_projection_csv, write_projection_pgm,
};
use spadcorr::fit::{residual_map, Calibration, GaussianFitResult, Units};
use spadcorr::frames::{read_frames, stream_frames, write_frames, FrameWriter};
use spadcorr::jpd::{
    accumulate_stream, conditional_projection, minus_projection, sum_projection, Projection,
};
use spadcorr::sim::RunLedger;
use spadcorr::witness::{coincidence_matrix, select_grid, witness_from_frames, Basis, ModeGrid, WitnessReport};
use spadcorr::{AccumStats, FrameSet, Mode, SensorGeometry, Simulator};

use crate::config::RunConfig;
use crate::manifest;
use crate::ValidationError;

/// Frames per chunk when streaming to or from disk.
const CHUNK: usize = 1 << 16;

/// Collects the summary of one command and the time spent in each stage.
struct Report {
    dir: PathBuf,
    body: String,
    timings: Vec<(String, Duration)>,
}

impl Report {
    fn new(dir: &Path, title: &str) -> Result<Self> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            body: format!("spadcorr {title}\n"),
            timings: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn set(&mut self, key: &str, value: impl std::fmt::Display) {
        let _ = writeln!(self.body, "{key} = {value}");
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }

    fn time<T>(&mut self, label: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        let elapsed = start.elapsed();
        info!("{label}: {:.3} s", elapsed.as_secs_f64());
        self.timings.push((label.to_string(), elapsed));
        Ok(out)
    }

    fn finish(self) -> Result<String> {
        let entries = manifest::collect(&self.dir)?;
        let listing = manifest::render(&entries);
        self.write("manifest.txt", &listing)?;
        let mut s = self.body;
        s.push_str("\n# wall clock, seconds\n");
        let total: Duration = self.timings.iter().map(|(_, d)| *d).sum();
        for (label, d) in &self.timings {
            let _ = writeln!(s, "time.{label} = {:.3}", d.as_secs_f64());
        }
        let _ = writeln!(s, "time.total = {:.3}", total.as_secs_f64());
        s.push_str("\n# manifest: sha256  bytes  name\n");
        s.push_str(&listing);
        let p = self.dir.join("summary.txt");
        std::fs::write(&p, &s).with_context(|| format!("writing {}", p.display()))?;
        Ok(s)
    }
}

fn simulator(cfg: &RunConfig, mode: Mode) -> Result<Simulator> {
    Simulator::new(cfg.source, cfg.detector, cfg.geometry, mode, cfg.mode_seed(mode))
        .map_err(|e| ValidationError(e.to_string()).into())
}

fn ledger_line(frames: usize, l: &RunLedger) -> String {
    format!(
        "{frames} frames, {} pairs, {} photons detected, {} genuine coincidences",
        l.pairs_generated, l.photons_detected, l.genuine_coincidences
    )
}

pub fn simulate(cfg: &RunConfig) -> Result<String> {
    let mut rep = Report::new(&cfg.output_dir, "simulate")?;
    rep.write("config.cfg", &cfg.to_text())?;
    for &mode in cfg.mode.list() {
        let sim = simulator(cfg, mode)?;
        let path = rep.path(&format!("{mode}.spf"));
        let n = cfg.n_frames;
        let ledger = rep.time(&format!("simulate_{mode}"), || {
            let mut w = FrameWriter::create(&path, cfg.geometry, &sim.source_tag())?;
            let mut ledger = RunLedger::default();
            for first in (0..n).step_by(CHUNK) {
                let (set, l) = sim.frames(first as u64, CHUNK.min(n - first));
                w.write_set(&set)?;
                ledger += l;
            }
            w.finish()?;
            Ok(ledger)
        })?;
        rep.set(&format!("{mode}.seed"), cfg.mode_seed(mode));
        rep.set(&format!("{mode}.frames"), ledger_line(n, &ledger));
    }
    rep.finish()
}

fn check_anchor(g: &SensorGeometry, anchor: Option<(usize, usize)>) -> Result<(usize, usize)> {
    let (x, y) = anchor.unwrap_or((g.width / 2, g.height / 2));
    if x >= g.width || y >= g.height {
        bail!(ValidationError(format!(
            "anchor ({x}, {y}) is outside the {}x{} sensor",
            g.width, g.height
        )));
    }
    Ok((x, y))
}

fn write_map(rep: &Report, name: &str, p: &Projection) -> Result<()> {
    write_projection_csv(p, &rep.path(&format!("{name}.csv")))?;
    write_projection_pgm(p, &rep.path(&format!("{name}.pgm")))?;
    Ok(())
}

/// Marginal, sum, minus and conditional maps of one data set.
fn write_jpd_outputs(
    rep: &mut Report,
    stem: &str,
    stats: &AccumStats,
    anchor: Option<(usize, usize)>,
) -> Result<()> {
    let g = *stats.geometry();
    let (ax, ay) = check_anchor(&g, anchor)?;
    let n = stats.n_frames();
    let mut marg = String::from("row,col,count\n");
    for y in 0..g.height {
        for x in 0..g.width {
            let _ = writeln!(marg, "{y},{x},{}", stats.marginal()[g.index(x, y)]);
        }
    }
    rep.write(&format!("{stem}_marginal.csv"), &marg)?;
    let lit: u64 = stats.marginal().iter().sum();
    rep.set(&format!("{stem}.frames"), n);
    rep.set(
        &format!("{stem}.mean_lit_per_frame"),
        format!("{:.4}", lit as f64 / n.max(1) as f64),
    );
    if n < 2 {
        rep.set(&format!("{stem}.projections"), "skipped (fewer than 2 frames)");
        return Ok(());
    }
    let (sum, minus, cond) = rep.time(&format!("project_{stem}"), || {
        Ok((
            sum_projection(stats)?,
            minus_projection(stats)?,
            conditional_projection(stats, g.index(ax, ay))?,
        ))
    })?;
    write_map(rep, &format!("{stem}_sum"), &sum)?;
    write_map(rep, &format!("{stem}_minus"), &minus)?;
    write_map(rep, &format!("{stem}_cond"), &cond)?;
    rep.set(&format!("{stem}.conditional_anchor"), format!("{ax},{ay}"));
    rep.set(
        &format!("{stem}.conditional_snr"),
        format!("{:.3}", cond.snr.unwrap_or(f64::NAN)),
    );
    Ok(())
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "frames".into())
}

fn accumulate_file(rep: &mut Report, label: &str, path: &Path) -> Result<AccumStats> {
    rep.time(&format!("accumulate_{label}"), || {
        let chunks = stream_frames(path, CHUNK)?;
        let g = *chunks.geometry();
        Ok(accumulate_stream(g, chunks)?)
    })
}

pub fn jpd(files: &[PathBuf], anchor: Option<(usize, usize)>, out: &Path) -> Result<String> {
    if files.is_empty() {
        bail!(ValidationError("no frame files given".into()));
    }
    let mut rep = Report::new(out, "jpd")?;
    let mut stems: Vec<String> = Vec::new();
    for f in files {
        let mut stem = file_stem(f);
        while stems.contains(&stem) {
            stem.push('_');
        }
        stems.push(stem.clone());
        let stats = accumulate_file(&mut rep, &stem, f)?;
        rep.set(&format!("{stem}.source"), f.display());
        write_jpd_outputs(&mut rep, &stem, &stats, anchor)?;
    }
    rep.finish()
}

pub struct Calibrations {
    pub nf: Calibration,
    pub ff: Calibration,
}

/// Physical size of a pixel at the crystal in each plane.
pub fn calibrations(cfg: &RunConfig, nf: &SensorGeometry, ff: &SensorGeometry) -> Result<Calibrations> {
    let make = |mode, g: &SensorGeometry, units| {
        Calibration::new(cfg.detector.calibration(mode, g), units)
            .map_err(|e| anyhow::Error::new(ValidationError(e.to_string())))
    };
    Ok(Calibrations {
        nf: make(Mode::Nf, nf, Units::Micrometres)?,
        ff: make(Mode::Ff, ff, Units::RadPerMicrometre)?,
    })
}

fn fit_line(f: &GaussianFitResult) -> String {
    format!(
        "{:.6e} +- {:.3e} {} ({:.4} px, best fit {:.4} px, r2 {:.4}{}{})",
        f.delta,
        f.delta_uncertainty,
        f.units,
        f.delta_px,
        f.best_fit_px,
        f.r_squared,
        if f.is_pixel_limited() { ", pixel limited" } else { "" },
        if f.unreliable { ", unreliable" } else { "" },
    )
}

/// The claim the summary makes; a violation needs a significant peak in
/// both planes.
pub fn epr_verdict(a: &spadcorr::Result<EprAnalysis>) -> String {
    match a {
        Err(e) => format!("no violation (fit failed: {e})"),
        Ok(a) if !a.reliable() => "no violation (correlation peak not significant)".into(),
        Ok(a) => a.report.verdict().into(),
    }
}

fn record_epr(
    rep: &mut Report,
    analysis: &spadcorr::Result<EprAnalysis>,
    nf: &AccumStats,
    ff: &AccumStats,
) -> Result<()> {
    match analysis {
        Ok(a) => {
            let nf_res = residual_map(&minus_projection(nf)?, &a.fit_nf, true);
            let ff_res = residual_map(&sum_projection(ff)?, &a.fit_ff, false);
            write_map(rep, "nf_fit_residual", &nf_res)?;
            write_map(rep, "ff_fit_residual", &ff_res)?;
            let r = &a.report;
            rep.set("epr.delta_r", fit_line(&a.fit_nf));
            rep.set("epr.delta_k", fit_line(&a.fit_ff));
            rep.set("epr.product", format!("{:.6e} +- {:.3e}", r.product, r.sigma_product));
            rep.set("epr.confidence", format!("{:.4}", r.confidence));
            rep.write("epr.csv", &epr_csv(r))?;
        }
        Err(e) => rep.set("epr.error", e),
    }
    rep.set("epr.verdict", epr_verdict(analysis));
    Ok(())
}

fn record_scaling(rep: &mut Report, table: &ScalingTable) -> Result<()> {
    rep.write("scaling.csv", &scaling_csv(table))?;
    rep.set("scaling.coefficient", format!("{:.6}", table.coefficient));
    rep.set("scaling.r_squared", format!("{:.6}", table.r_squared));
    match table.first_confident() {
        Some(n) => rep.set("scaling.first_confident_frames", n),
        None => rep.set("scaling.first_confident_frames", "none"),
    }
    Ok(())
}

pub fn epr(cfg: &RunConfig, nf: &Path, ff: &Path) -> Result<String> {
    let mut rep = Report::new(&cfg.output_dir, "epr")?;
    let nf_stats = accumulate_file(&mut rep, "nf", nf)?;
    let ff_stats = accumulate_file(&mut rep, "ff", ff)?;
    let cal = calibrations(cfg, nf_stats.geometry(), ff_stats.geometry())?;
    rep.set("calibration.nf", format!("{} um/px", cal.nf.per_pixel));
    rep.set("calibration.ff", format!("{} rad/um/px", cal.ff.per_pixel));
    let analysis = rep.time("fit", || Ok(epr_from_stats(&nf_stats, &ff_stats, cal.nf, cal.ff)))?;
    record_epr(&mut rep, &analysis, &nf_stats, &ff_stats)?;
    if !cfg.checkpoints.is_empty() {
        let table = rep.time("scaling", || {
            Ok(confidence_scaling(
                stream_frames(nf, CHUNK)?,
                stream_frames(ff, CHUNK)?,
                &cfg.checkpoints,
                cal.nf,
                cal.ff,
            )?)
        })?;
        record_scaling(&mut rep, &table)?;
    }
    rep.finish()
}

fn grid_for(cfg: &RunConfig, g: &SensorGeometry) -> Result<ModeGrid> {
    select_grid(g, cfg.grid.side, cfg.grid.spacing, cfg.grid.origin)
        .map_err(|e| ValidationError(e.to_string()).into())
}

fn record_witness(
    rep: &mut Report,
    grid: &ModeGrid,
    report: &WitnessReport,
    nf_stats: &AccumStats,
    ff_stats: &AccumStats,
) -> Result<()> {
    let pos = coincidence_matrix(nf_stats, grid, Basis::Position)?;
    let mom = coincidence_matrix(ff_stats, grid, Basis::Momentum)?;
    write_matrix_csv(&pos, grid, &rep.path("matrix_position.csv"))?;
    write_matrix_csv(&mom, grid, &rep.path("matrix_momentum.csv"))?;
    rep.write("bounds.csv", &bounds_csv(report))?;
    rep.write("witness.txt", &format!("{report}\n"))?;
    rep.set(
        "witness.grid",
        format!(
            "side {} spacing {} origin {},{}",
            grid.side, grid.spacing, grid.origin.0, grid.origin.1
        ),
    );
    rep.set("witness.d", report.d);
    rep.set("witness.f1", format!("{:.6} +- {:.6}", report.f1, report.f1_uncertainty));
    rep.set(
        "witness.f2_tilde",
        format!("{:.6} +- {:.6}", report.f2_tilde, report.f2_uncertainty),
    );
    rep.set("witness.f_tilde", format!("{:.6} +- {:.6}", report.f_tilde, report.uncertainty));
    rep.set("witness.d_ent", report.d_ent);
    Ok(())
}

fn same_length(nf: &FrameSet, ff: &FrameSet) -> Result<()> {
    if nf.n_frames() != ff.n_frames() {
        bail!(ValidationError(format!(
            "NF and FF hold different frame counts ({} vs {})",
            nf.n_frames(),
            ff.n_frames()
        )));
    }
    if !nf.geometry().same_grid(ff.geometry()) {
        bail!(ValidationError("NF and FF sensors differ".into()));
    }
    Ok(())
}

pub fn certify(cfg: &RunConfig, nf: &Path, ff: &Path) -> Result<String> {
    let mut rep = Report::new(&cfg.output_dir, "certify")?;
    let (nf_set, ff_set) = rep.time("read", || Ok((read_frames(nf)?, read_frames(ff)?)))?;
    same_length(&nf_set, &ff_set)?;
    let grid = grid_for(cfg, nf_set.geometry())?;
    let (timed, nf_stats, ff_stats) = rep.time("witness", || {
        Ok(witness_from_frames(&nf_set, &ff_set, &grid, cfg.blocks)?)
    })?;
    record_witness(&mut rep, &grid, &timed.value, &nf_stats, &ff_stats)?;
    rep.finish()
}

/// Consecutive chunks of an in-memory set, copied one at a time.
fn slices(set: &FrameSet) -> impl Iterator<Item = spadcorr::Result<FrameSet>> + '_ {
    let total = set.n_frames();
    (0..total)
        .step_by(CHUNK)
        .map(move |s| Ok(set.slice(s..(s + CHUNK).min(total))))
}

/// Simulates both planes in memory and runs every analysis on them.
pub fn pipeline(cfg: &RunConfig, save_frames: bool) -> Result<String> {
    let mut rep = Report::new(&cfg.output_dir, "pipeline")?;
    rep.write("config.cfg", &cfg.to_text())?;
    let n = cfg.n_frames;
    let mut sets = Vec::with_capacity(2);
    for mode in [Mode::Nf, Mode::Ff] {
        let sim = simulator(cfg, mode)?;
        let (set, ledger) = rep.time(&format!("simulate_{mode}"), || Ok(sim.run(n)))?;
        rep.set(&format!("{mode}.seed"), cfg.mode_seed(mode));
        rep.set(&format!("{mode}.simulated"), ledger_line(n, &ledger));
        if save_frames {
            let path = rep.path(&format!("{mode}.spf"));
            rep.time(&format!("write_{mode}"), || Ok(write_frames(&path, &set)?))?;
        }
        sets.push(set);
    }
    let ff_set = sets.pop().expect("two sets");
    let nf_set = sets.pop().expect("two sets");

    let grid = grid_for(cfg, &cfg.geometry)?;
    // the blocked accumulation also yields the full statistics for every
    // other stage
    let (timed, nf_stats, ff_stats) = rep.time("accumulate_and_witness", || {
        Ok(witness_from_frames(&nf_set, &ff_set, &grid, cfg.blocks)?)
    })?;
    write_jpd_outputs(&mut rep, "nf", &nf_stats, None)?;
    write_jpd_outputs(&mut rep, "ff", &ff_stats, None)?;

    let cal = calibrations(cfg, &cfg.geometry, &cfg.geometry)?;
    let analysis = rep.time("fit", || Ok(epr_from_stats(&nf_stats, &ff_stats, cal.nf, cal.ff)))?;
    record_epr(&mut rep, &analysis, &nf_stats, &ff_stats)?;
    if !cfg.checkpoints.is_empty() {
        let table = rep.time("scaling", || {
            Ok(confidence_scaling(
                slices(&nf_set),
                slices(&ff_set),
                &cfg.checkpoints,
                cal.nf,
                cal.ff,
            )?)
        })?;
        record_scaling(&mut rep, &table)?;
    }
    record_witness(&mut rep, &grid, &timed.value, &nf_stats, &ff_stats)?;
    rep.finish()
}
