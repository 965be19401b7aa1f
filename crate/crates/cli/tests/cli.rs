//! End-to-end tests of the `vsfusion` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use vsfusion::nnet::{read_model_file, FusionKind, ModelFile};
use vsfusion::scenegen::{read_dataset, write_dataset};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vsfusion"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn vsfusion")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = run(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    run(dir, args).status.code().expect("exit code")
}

fn gen(dir: &Path, name: &str, n: usize, seed: u64) -> PathBuf {
    ok(dir, &["gen", "--out", name, "--n", &n.to_string(), "--seed", &seed.to_string()]);
    dir.join(name)
}

/// Tiny train/val/test splits plus a trained mlp_branch model.
fn trained() -> (TempDir, PathBuf) {
    let t = TempDir::new().unwrap();
    let d = t.path();
    gen(d, "tr.vsf", 96, 1);
    gen(d, "va.vsf", 32, 2);
    gen(d, "te.vsf", 48, 3);
    ok(
        d,
        &["train", "--data", "tr.vsf", "--val", "va.vsf", "--out", "m.vsfm", "--variant", "mlp_branch", "--epochs", "3",
          "--train.patience", "3", "--qat", "--train.qat_epochs", "1"],
    );
    let m = d.join("m.vsfm");
    (t, m)
}

#[test]
fn gen_is_reproducible_and_echoes_config() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    gen(d, "a.vsf", 30, 5);
    gen(d, "b.vsf", 30, 5);
    let a = std::fs::read(d.join("a.vsf")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.vsf")).unwrap());
    assert_eq!(read_dataset(&d.join("a.vsf")).unwrap().len(), 30);
    // re-running from the echoed configuration reproduces the file
    ok(d, &["gen", "--config", "a.vsf.config", "--out", "c.vsf"]);
    assert_eq!(a, std::fs::read(d.join("c.vsf")).unwrap());
    let echo = std::fs::read_to_string(d.join("a.vsf.config")).unwrap();
    assert!(echo.contains("scene.n = 30") && echo.contains("scene.seed = 5"));
}

#[test]
fn usage_errors_exit_1() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    assert_eq!(code(d, &["gen", "--out", "x.vsf", "--n", "0"]), 1);
    assert!(!d.join("x.vsf").exists());
    assert_eq!(code(d, &["gen", "--out", "x.vsf", "--scene.bogus", "1"]), 1);
    assert_eq!(code(d, &["gen", "--out", "x.vsf", "--train.epochs", "many"]), 1);
    assert_eq!(code(d, &["costs", "--arch", "resnet"]), 1);
    assert_eq!(code(d, &["frobnicate"]), 1);
    std::fs::write(d.join("bad.conf"), "train.epocs = 3\n").unwrap();
    assert_eq!(code(d, &["--config", "bad.conf", "costs", "--arch", "desknet"]), 1);
    assert_eq!(code(d, &["--help"]), 0);
}

#[test]
fn data_errors_exit_2() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    gen(d, "ok.vsf", 8, 1);
    let mut bytes = std::fs::read(d.join("ok.vsf")).unwrap();
    bytes[0] = b'X';
    std::fs::write(d.join("badmagic.vsf"), &bytes).unwrap();
    assert_eq!(code(d, &["augment", "--input", "badmagic.vsf", "--out", "o.vsf"]), 2);
    let full = std::fs::read(d.join("ok.vsf")).unwrap();
    std::fs::write(d.join("short.vsf"), &full[..full.len() - 5]).unwrap();
    assert_eq!(code(d, &["augment", "--input", "short.vsf", "--out", "o.vsf"]), 2);
    assert_eq!(code(d, &["augment", "--input", "missing.vsf", "--out", "o.vsf"]), 2);
    // a dataset without a pitch channel cannot be pitch-warped
    let mut data = read_dataset(&d.join("ok.vsf")).unwrap();
    data.state_dim = 0;
    for s in &mut data.samples {
        s.state.clear();
    }
    write_dataset(&d.join("nostate.vsf"), &data).unwrap();
    assert_eq!(code(d, &["augment", "--input", "nostate.vsf", "--out", "o.vsf"]), 2);
    // a model file that is not one
    assert_eq!(code(d, &["eval", "--model", "ok.vsf", "--data", "ok.vsf", "--out", "r.csv"]), 2);
}

#[test]
fn diverging_training_exits_3() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    gen(d, "tr.vsf", 64, 1);
    gen(d, "va.vsf", 16, 2);
    let o = run(
        d,
        &["train", "--data", "tr.vsf", "--val", "va.vsf", "--out", "m.vsfm", "--epochs", "3", "--train.patience", "3",
          "--train.learning_rate", "1e30"],
    );
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epoch"));
}

#[test]
fn augment_contracts() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    gen(d, "in.vsf", 100, 1);
    ok(d, &["augment", "--input", "in.vsf", "--out", "a.vsf", "--copies", "10", "--seed", "3"]);
    ok(d, &["augment", "--input", "in.vsf", "--out", "b.vsf", "--copies", "10", "--seed", "3"]);
    let a = std::fs::read(d.join("a.vsf")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.vsf")).unwrap());
    assert!(read_dataset(&d.join("a.vsf")).unwrap().len() <= 1000);

    let identity = "augment.exposure = 1,1\naugment.gamma = 1,1\naugment.range_lo = 0,0\naugment.range_hi = 255,255\n\
                    augment.noise_sigma = 0,0\naugment.blur_sigma = 0,0\naugment.vignette = 0,0\n\
                    augment.flip_probability = 0\naugment.pitch_warp = false\naugment.copies = 1\n";
    std::fs::write(d.join("id.conf"), identity).unwrap();
    ok(d, &["--config", "id.conf", "augment", "--input", "in.vsf", "--out", "id.vsf"]);
    let (src, out) = (read_dataset(&d.join("in.vsf")).unwrap(), read_dataset(&d.join("id.vsf")).unwrap());
    assert_eq!(src.len(), out.len());
    for (s, o) in src.samples.iter().zip(&out.samples) {
        assert_eq!(s.label, o.label);
    }
}

#[test]
fn train_eval_chain() {
    let (t, m) = trained();
    let d = t.path();
    match read_model_file(&m).unwrap() {
        ModelFile::Float(model) => assert_eq!(model.variant.kind, FusionKind::MlpBranch),
        _ => panic!("float model expected"),
    }
    assert!(matches!(read_model_file(&d.join("m.vsfm.qat")).unwrap(), ModelFile::Quant(_)));
    let hist = std::fs::read_to_string(d.join("m.vsfm.history.csv")).unwrap();
    let rows = hist.lines().count() - 1;
    assert!((1..=3).contains(&rows));

    for model in ["m.vsfm", "m.vsfm.qat"] {
        ok(d, &["eval", "--model", model, "--data", "te.vsf", "--out", "r.csv"]);
        let csv = std::fs::read_to_string(d.join("r.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 4);
        for l in &lines[1..] {
            let f: Vec<&str> = l.split(',').collect();
            let (r2, mse, dummy): (f64, f64, f64) = (f[3].parse().unwrap(), f[4].parse().unwrap(), f[6].parse().unwrap());
            assert!((r2 - (1.0 - mse / dummy)).abs() < 1e-9);
        }
        assert!(d.join("r.csv.config").exists());
    }
}

#[test]
fn eval_rejects_mismatched_data() {
    let (t, _) = trained();
    let d = t.path();
    let mut data = read_dataset(&d.join("te.vsf")).unwrap();
    data.label_dim = 3;
    for s in &mut data.samples {
        s.label.truncate(3);
    }
    write_dataset(&d.join("odd.vsf"), &data).unwrap();
    assert_eq!(code(d, &["eval", "--model", "m.vsfm", "--data", "odd.vsf", "--out", "r.csv"]), 2);
}

#[test]
fn costs_tables() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    let out = ok(d, &["costs", "--arch", "frontnet_sym", "--variant", "all", "--out", "f.csv"]);
    for (v, db, dm) in [("single_neuron", "+4", "+4"), ("double_input", "+800", "+3072000"), ("mlp_branch", "+120", "+104")] {
        let line = out.lines().find(|l| l.starts_with(v)).unwrap();
        assert!(line.ends_with("MATCH"), "{line}");
        let f: Vec<&str> = line.split_whitespace().collect();
        assert_eq!((f[3], f[4]), (db, dm));
    }
    let fc = out.lines().find(|l| l.starts_with("fully_connected")).unwrap();
    assert!(fc.contains("+53952") && fc.contains("~+54k") && !fc.ends_with(" MATCH"));

    // hand count: conv 8*1*25 + BN 16 + conv 16*8*9 + BN 32 + conv 32*16*9 + BN 64
    // + FC 2048*4+4 = 14268 params; MACs 32*32*8*25 + 16*16*16*72 + 8*8*32*144 + 2048*4 = 802816
    ok(d, &["costs", "--arch", "desknet", "--variant", "stateless", "--out", "k.csv"]);
    let golden = include_str!("golden/desknet_stateless_costs.csv");
    assert_eq!(std::fs::read_to_string(d.join("k.csv")).unwrap(), golden);
    assert_eq!(200 + 16 + 1152 + 32 + 4608 + 64 + 8196, 14268);
    assert_eq!(32 * 32 * 8 * 25 + 16 * 16 * 16 * 72 + 8 * 8 * 32 * 144 + 2048 * 4, 802816);
}

#[test]
fn crossval_and_report() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    gen(d, "tr.vsf", 64, 1);
    gen(d, "va.vsf", 16, 2);
    gen(d, "te.vsf", 40, 3);
    let quick = ["--train.epochs", "1", "--train.patience", "1", "--train.batch_size", "32"];
    let mut args = vec!["crossval", "--train", "tr.vsf", "--val", "va.vsf", "--test", "te.vsf", "--out-dir", "cv",
                        "--mode", "seeds:3", "--jobs", "2"];
    args.extend(quick);
    ok(d, &args);
    let pairs = std::fs::read_to_string(d.join("cv/pairs.csv")).unwrap();
    assert_eq!(pairs.lines().count(), 1 + 4 * 3);
    let summary = std::fs::read_to_string(d.join("cv/summary.csv")).unwrap();
    for l in summary.lines().skip(1) {
        let f: Vec<&str> = l.split(',').collect();
        for p in [f[7], f[8]] {
            if !p.is_empty() {
                let p: f64 = p.parse().unwrap();
                assert!(p > 0.0 && p <= 1.0);
            }
        }
    }
    assert!(d.join("cv").join("config.txt").exists());

    ok(d, &["report", "--input", "cv/pairs.csv", "--out", "plot.svg"]);
    let svg = std::fs::read_to_string(d.join("plot.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).expect("well-formed SVG");
    let pts: Vec<_> = doc.descendants().filter(|n| n.attribute("class") == Some("pt")).collect();
    assert_eq!(pts.len(), 12);
    for p in pts {
        let f = |a: &str| p.attribute(a).unwrap().parse::<f64>().unwrap();
        let (b, c) = (f("data-baseline"), f("data-candidate"));
        // the diagonal runs bottom-left to top-right; find where it sits at this x
        let diag = doc
            .descendants()
            .filter(|n| n.attribute("class") == Some("diag"))
            .find(|n| {
                let x1: f64 = n.attribute("x1").unwrap().parse().unwrap();
                let x2: f64 = n.attribute("x2").unwrap().parse().unwrap();
                (x1..=x2).contains(&f("cx"))
            })
            .unwrap();
        let g = |a: &str| diag.attribute(a).unwrap().parse::<f64>().unwrap();
        let t = (f("cx") - g("x1")) / (g("x2") - g("x1"));
        let y_diag = g("y1") + t * (g("y2") - g("y1"));
        // SVG y grows downward
        assert_eq!(f("cy") < y_diag - 1e-9, c > b, "point ({b}, {c})");
    }

    std::fs::write(d.join("empty.csv"), "").unwrap();
    assert_eq!(code(d, &["report", "--input", "empty.csv", "--out", "e.svg"]), 1);
    assert!(!d.join("e.svg").exists());
    std::fs::write(d.join("junk.csv"), "a,b\n1,2\n").unwrap();
    assert_eq!(code(d, &["report", "--input", "junk.csv", "--out", "e.svg"]), 2);
    assert!(!d.join("e.svg").exists());
}

#[test]
fn crossval_loo_rows_per_group() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    ok(d, &["gen", "--out", "g.vsf", "--n", "80", "--groups", "4"]);
    ok(
        d,
        &["crossval", "--data", "g.vsf", "--out-dir", "loo", "--mode", "loo", "--train.epochs", "1",
          "--train.patience", "1"],
    );
    let reports = std::fs::read_to_string(d.join("loo/reports.csv")).unwrap();
    // 4 groups x 2 variants x 4 outputs
    assert_eq!(reports.lines().count() - 1, 32);
    let pairs = std::fs::read_to_string(d.join("loo/pairs.csv")).unwrap();
    assert_eq!(pairs.lines().count() - 1, 16);
    assert_eq!(code(d, &["crossval", "--out-dir", "x", "--mode", "loo"]), 1);
}
