use std::path::Path;
use std::process::{Command, Output};

use spadcorr::export::read_matrix_csv;
use spadcorr::frames::read_frames;
use spadcorr::witness::Basis;

fn spadcorr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spadcorr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = spadcorr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    spadcorr(args).status.code().expect("exit code")
}

/// Value of a `key = value` summary line.
fn field<'a>(summary: &'a str, key: &str) -> &'a str {
    summary
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(" = ")))
        .unwrap_or_else(|| panic!("no {key} in summary:\n{summary}"))
}

/// Leading number of a value like `1.0e-1 +- 2e-4`.
fn number(value: &str) -> f64 {
    value.split_whitespace().next().unwrap().parse().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn paper_pipeline_violates_and_certifies() {
    let dir = tempfile::tempdir().unwrap();
    let summary = ok(&["pipeline", "--preset", "paper", "--frames", "1e6", "--out", s(dir.path())]);
    let product = number(field(&summary, "epr.product"));
    let c = number(field(&summary, "epr.confidence"));
    let d_ent: usize = field(&summary, "witness.d_ent").parse().unwrap();
    assert!(product < 0.5, "product {product}");
    assert!(c > 5.0, "C {c}");
    assert!(d_ent >= 2, "d_ent {d_ent}");
    assert_eq!(field(&summary, "epr.verdict"), "EPR-violating");
    for name in ["nf_sum.csv", "ff_sum.pgm", "nf_minus.csv", "matrix_position.csv", "scaling.csv"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    // wall-clock numbers live in the summary only
    assert!(summary.contains("time.total = "));
    let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert!(!manifest.contains("summary.txt"));
    assert!(manifest.lines().all(|l| l.split_whitespace().count() == 3));
}

#[test]
fn separable_pipeline_finds_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let summary = ok(&["pipeline", "--preset", "separable", "--frames", "2e5", "--out", s(dir.path())]);
    assert!(field(&summary, "epr.verdict").starts_with("no violation"), "{summary}");
    assert_eq!(field(&summary, "witness.d_ent"), "1");
}

#[test]
fn rerun_with_same_config_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "n_frames = 20000\nseed = 3\ncheckpoints = 1e3,1e4\n").unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["pipeline", "--preset", "paper", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["pipeline", "--preset", "paper", "--config", s(&cfg), "--out", s(&b)]);
    let ma = std::fs::read_to_string(a.join("manifest.txt")).unwrap();
    let mb = std::fs::read_to_string(b.join("manifest.txt")).unwrap();
    assert_eq!(ma, mb);
    assert!(ma.lines().filter(|l| l.ends_with(".csv")).count() >= 10);
    for line in ma.lines() {
        let name = line.split_whitespace().last().unwrap();
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap());
    }
}

#[test]
fn simulate_is_reproducible_and_allows_empty_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, e) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("e"));
    for out in [&a, &b] {
        ok(&["simulate", "--preset", "paper-ff", "--frames", "3000", "--seed", "7", "--out", s(out)]);
    }
    assert!(!a.join("nf.spf").exists());
    assert_eq!(std::fs::read(a.join("ff.spf")).unwrap(), std::fs::read(b.join("ff.spf")).unwrap());
    assert_eq!(read_frames(&a.join("ff.spf")).unwrap().n_frames(), 3000);

    ok(&["simulate", "--frames", "0", "--mode", "nf", "--out", s(&e)]);
    let empty = read_frames(&e.join("nf.spf")).unwrap();
    assert_eq!(empty.n_frames(), 0);
    assert_eq!(empty.geometry().width, 64);
}

#[test]
fn file_based_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames");
    ok(&["simulate", "--preset", "paper", "--frames", "50000", "--out", s(&frames)]);
    let (nf, ff) = (frames.join("nf.spf"), frames.join("ff.spf"));

    let maps = dir.path().join("maps");
    let summary = ok(&["jpd", s(&nf), s(&ff), "--anchor", "10,5", "--out", s(&maps)]);
    assert_eq!(field(&summary, "ff.conditional_anchor"), "10,5");
    for stem in ["nf", "ff"] {
        for kind in ["marginal.csv", "sum.csv", "sum.pgm", "minus.pgm", "cond.csv", "cond.pgm.scale"] {
            assert!(maps.join(format!("{stem}_{kind}")).is_file(), "{stem}_{kind}");
        }
    }
    let sum_csv = std::fs::read_to_string(maps.join("ff_sum.csv")).unwrap();
    assert_eq!(sum_csv.lines().count(), 1 + 127 * 63);

    let epr = dir.path().join("epr");
    let summary = ok(&["epr", "--nf", s(&nf), "--ff", s(&ff), "--checkpoints", "1e4,5e4,1e5", "--out", s(&epr)]);
    assert!(number(field(&summary, "epr.product")) < 0.5);
    let scaling = std::fs::read_to_string(epr.join("scaling.csv")).unwrap();
    assert!(scaling.contains("stream shorter than checkpoint"), "{scaling}");

    let cert = dir.path().join("cert");
    let summary = ok(&[
        "certify", "--nf", s(&nf), "--ff", s(&ff), "--grid-side", "3", "--grid-spacing", "2", "--out", s(&cert),
    ]);
    assert_eq!(field(&summary, "witness.d"), "9");
    let (m, h) = read_matrix_csv(&cert.join("matrix_momentum.csv")).unwrap();
    assert_eq!((m.basis, m.d, h.side, h.spacing), (Basis::Momentum, 9, 3, 2));
    let bounds = std::fs::read_to_string(cert.join("bounds.csv")).unwrap();
    assert_eq!(bounds.lines().count(), 1 + 9);
}

#[test]
fn exit_codes_separate_validation_from_io() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    assert_eq!(code(&["simulate", "--preset", "nope", "--out", out]), 2);
    assert_eq!(code(&["simulate", "--frames", "2.5", "--out", out]), 2);
    assert_eq!(code(&["simulate", "--mode", "sideways", "--out", out]), 2);
    assert_eq!(code(&["pipeline", "--frames", "100", "--grid-side", "40", "--out", out]), 2);
    assert_eq!(code(&["simulate", "--bogus-flag"]), 2);
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "source.delta_r = -4\n").unwrap();
    assert_eq!(code(&["simulate", "--config", s(&cfg), "--out", out]), 2);

    assert_eq!(code(&["jpd", "/definitely/not/here.spf", "--out", out]), 3);
    let short = dir.path().join("short.spf");
    std::fs::write(&short, b"SPF1").unwrap();
    assert_eq!(code(&["jpd", s(&short), "--out", out]), 3);
    assert_eq!(code(&["simulate", "--config", "/no/such.cfg", "--out", out]), 3);
    // output directory under a regular file
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    assert_eq!(code(&["simulate", "--frames", "10", "--out", s(&blocker.join("sub"))]), 3);
}
