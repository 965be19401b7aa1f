//! Subcommand definitions and their implementations.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use vsfusion::augment::augment_dataset;
use vsfusion::eval::{
    evaluate, loo_crossval, paired_experiment, pairs_csv, reports_csv, summary_csv, EvalReport, Experiment,
    ExperimentPlan, PairedComparison, RunRecord, Split,
};
use vsfusion::nnet::{read_model_file, ArchSpec, FusionKind, FusionVariant, Model, ModelFile};
use vsfusion::scenegen::{generate_dataset, read_dataset, write_dataset, CameraIntrinsics, Dataset};
use vsfusion::train::{qat_finetune, train};

use crate::config::{Config, CrossvalMode, ECHO_NAME};
use crate::costs::{cost_rows, rows_csv, rows_table};
use crate::report::{parse_pairs, render_svg};
use crate::{CliError, Result};

/// Vision-state fusion benchmark kit.
///
/// Any configuration key can be overridden with `--<namespace>.<key> <value>`,
/// e.g. `--train.epochs 30`.
#[derive(Debug, Parser)]
#[command(name = "vsfusion", version)]
pub struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    Gen(GenArgs),
    /// Write augmented copies of a dataset.
    Augment(AugmentArgs),
    /// Train one model, optionally followed by quantization-aware fine-tuning.
    Train(TrainArgs),
    /// Evaluate a float or quantized model on a dataset.
    Eval(EvalArgs),
    /// Print parameter-memory and MAC costs per fusion variant.
    Costs(CostsArgs),
    /// Paired multi-seed or leave-one-group-out comparison.
    Crossval(CrossvalArgs),
    /// Plot a paired-scores CSV as SVG.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Sample count (scene.n).
    #[arg(long)]
    pub n: Option<usize>,
    /// Scene seed (scene.seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of subject groups (scene.groups).
    #[arg(long)]
    pub groups: Option<u16>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Copies per sample (augment.copies).
    #[arg(long)]
    pub copies: Option<usize>,
    /// Augmentation seed (augment.seed).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset.
    #[arg(long)]
    pub data: PathBuf,
    /// Validation dataset.
    #[arg(long)]
    pub val: PathBuf,
    /// Float model output; the history goes to `<out>.history.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Fusion variant (train.variant).
    #[arg(long)]
    pub variant: Option<String>,
    /// Maximum epochs (train.epochs).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Initialization and shuffling seed (train.seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also run quantization-aware fine-tuning and write the int8 model.
    #[arg(long)]
    pub qat: bool,
    /// Quantized model output (default `<out>.qat`).
    #[arg(long)]
    pub qat_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Report CSV, one row per output.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CostsArgs {
    /// desknet or frontnet_sym.
    #[arg(long)]
    pub arch: String,
    /// A variant name or `all`.
    #[arg(long, default_value = "all")]
    pub variant: String,
    /// Optional CSV output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CrossvalArgs {
    /// Training split (seeds mode).
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Validation split (seeds mode).
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Test split (seeds mode).
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Grouped dataset (loo mode).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for CSVs and the configuration echo.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// `seeds:N` or `loo` (eval.mode).
    #[arg(long)]
    pub mode: Option<String>,
    /// Comma-separated variants or `all` (eval.variants).
    #[arg(long)]
    pub variants: Option<String>,
    /// Worker threads (eval.jobs).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Paired-scores CSV written by `crossval` (pairs.csv).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn set_opt<T: ToString>(c: &mut Config, key: &str, v: &Option<T>) -> Result<()> {
    match v {
        Some(v) => c.set(key, &v.to_string()),
        None => Ok(()),
    }
}

/// `<path>.<suffix>`, next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn load(path: &Path) -> Result<Dataset> {
    read_dataset(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn variant_for(kind: FusionKind, data: &Dataset) -> Result<FusionVariant> {
    let sd = if kind == FusionKind::Stateless { 0 } else { data.state_dim };
    FusionVariant::new(kind, sd).map_err(|e| CliError::Data(format!("{e} (dataset has no state channels)")))
}

/// Resolves configuration and runs one subcommand.
pub fn run(cli: Cli, overrides: &[(String, String)]) -> Result<()> {
    let mut c = Config::load(cli.config.as_deref(), overrides)?;
    match cli.command {
        Command::Gen(a) => {
            set_opt(&mut c, "scene.n", &a.n)?;
            set_opt(&mut c, "scene.seed", &a.seed)?;
            set_opt(&mut c, "scene.groups", &a.groups)?;
            c.validate()?;
            gen(&c, &a)
        }
        Command::Augment(a) => {
            set_opt(&mut c, "augment.copies", &a.copies)?;
            set_opt(&mut c, "augment.seed", &a.seed)?;
            c.validate()?;
            augment(&c, &a)
        }
        Command::Train(a) => {
            set_opt(&mut c, "train.variant", &a.variant)?;
            set_opt(&mut c, "train.epochs", &a.epochs)?;
            set_opt(&mut c, "train.seed", &a.seed)?;
            c.validate()?;
            train_cmd(&c, &a)
        }
        Command::Eval(a) => eval_cmd(&c, &a),
        Command::Costs(a) => costs(&a),
        Command::Crossval(a) => {
            set_opt(&mut c, "eval.mode", &a.mode)?;
            set_opt(&mut c, "eval.variants", &a.variants)?;
            set_opt(&mut c, "eval.jobs", &a.jobs)?;
            c.validate()?;
            crossval(&c, &a)
        }
        Command::Report(a) => report(&a),
    }
}

fn gen(c: &Config, a: &GenArgs) -> Result<()> {
    let scene = c.scene()?;
    let n = c.usize("scene.n")?;
    let (data, stats) = generate_dataset(&scene, &CameraIntrinsics::desk(), n)?;
    write_dataset(&a.out, &data)?;
    c.write_echo(&sibling(&a.out, "config"))?;
    println!(
        "wrote {} samples ({} placements discarded, {} groups) to {}",
        stats.emitted,
        stats.discarded,
        scene.n_groups,
        a.out.display()
    );
    Ok(())
}

fn augment(c: &Config, a: &AugmentArgs) -> Result<()> {
    let data = load(&a.input)?;
    let intr = CameraIntrinsics::desk();
    if (data.width, data.height) != (intr.width, intr.height) {
        return Err(CliError::Data(format!(
            "augmentation supports {}x{} images, dataset has {}x{}",
            intr.width, intr.height, data.width, data.height
        )));
    }
    let (out, stats) = augment_dataset(&data, &c.augment()?, &intr)?;
    write_dataset(&a.out, &out)?;
    c.write_echo(&sibling(&a.out, "config"))?;
    println!(
        "wrote {} augmented samples from {} inputs ({} copies discarded) to {}",
        stats.emitted,
        data.len(),
        stats.discarded,
        a.out.display()
    );
    Ok(())
}

fn train_cmd(c: &Config, a: &TrainArgs) -> Result<()> {
    let (tr, va) = (load(&a.data)?, load(&a.val)?);
    let cfg = c.train()?;
    let variant = variant_for(c.variant_kind("train.variant")?, &tr)?;
    let model = Model::<f32>::new(&c.arch()?, &variant, cfg.seed)?;
    let (model, hist) = train(model, &tr, &va, &cfg)?;
    ModelFile::Float(model.clone()).write(&a.out)?;
    write(&sibling(&a.out, "history.csv"), &hist.to_csv())?;
    c.write_echo(&sibling(&a.out, "config"))?;
    println!(
        "{} {}: {} epochs, best epoch {} (val L1 {:.5}) -> {}",
        model.arch.name,
        variant.kind,
        hist.epochs.len(),
        hist.best_epoch,
        hist.best_val_loss(),
        a.out.display()
    );
    if a.qat {
        let (q, rep) = qat_finetune(&model, &tr, &va, &cfg)?;
        let out = a.qat_out.clone().unwrap_or_else(|| sibling(&a.out, "qat"));
        ModelFile::Quant(q).write(&out)?;
        write(&sibling(&out, "history.csv"), &rep.history.to_csv())?;
        println!(
            "int8: post-training val L1 {:.5}, after {} fine-tuning epochs {:.5} -> {}",
            rep.ptq_val_loss,
            rep.history.epochs.len(),
            rep.final_val_loss(),
            out.display()
        );
    }
    Ok(())
}

fn print_report(r: &EvalReport) {
    println!("{:<8} {:>10} {:>12} {:>12} {:>12}", "output", "R2", "MSE", "MAE", "dummy MSE");
    for (name, m) in r.output_names.iter().zip(&r.outputs) {
        println!("{name:<8} {:>10.4} {:>12.6} {:>12.6} {:>12.6}", m.r2, m.mse, m.mae, m.dummy_mse);
    }
    if let Some(d) = r.rotation_error_deg {
        println!("mean rotation error {d:.3} deg");
    }
}

fn eval_cmd(c: &Config, a: &EvalArgs) -> Result<()> {
    let data = load(&a.data)?;
    let report = match read_model_file(&a.model)? {
        ModelFile::Float(m) => evaluate(&m, &data, None)?,
        ModelFile::Quant(q) => evaluate(&q, &data, None)?,
    };
    write(&a.out, &reports_csv([&report]))?;
    c.write_echo(&sibling(&a.out, "config"))?;
    println!("{} {} on {} samples:", report.arch, report.variant, report.n_samples);
    print_report(&report);
    Ok(())
}

fn costs(a: &CostsArgs) -> Result<()> {
    let arch = ArchSpec::by_name(&a.arch)
        .ok_or_else(|| CliError::Usage(format!("unknown arch '{}': desknet or frontnet_sym", a.arch)))?;
    let kinds: Vec<FusionKind> = if a.variant == "all" {
        FusionKind::ALL.to_vec()
    } else {
        vec![a.variant.parse()?]
    };
    let rows = cost_rows(&arch, &kinds)?;
    print!("{}", rows_table(&arch.name, &rows));
    if let Some(out) = &a.out {
        write(out, &rows_csv(&arch.name, &rows))?;
    }
    Ok(())
}

fn progress(r: &RunRecord) {
    let r2: Vec<String> =
        r.report.output_names.iter().zip(r.report.r2()).map(|(n, v)| format!("{n} {v:.3}")).collect();
    eprintln!(
        "  {} key {}: best epoch {}, R2 {}",
        r.report.variant,
        r.key,
        r.history.best_epoch,
        r2.join(", ")
    );
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str, mode: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| CliError::Usage(format!("{mode} mode needs --{flag}")))
}

fn crossval(c: &Config, a: &CrossvalArgs) -> Result<()> {
    let kinds = c.eval_variants()?;
    let seed = c.u64("eval.seed")?;
    let mut plan =
        ExperimentPlan { arch: c.arch()?, variants: Vec::new(), train: c.train()?, jobs: c.usize("eval.jobs")? };
    let exp: Experiment = match c.crossval_mode()? {
        CrossvalMode::Seeds(n) => {
            let tr = load(need(&a.train, "train", "seeds")?)?;
            let va = load(need(&a.val, "val", "seeds")?)?;
            let te = load(need(&a.test, "test", "seeds")?)?;
            plan.variants = kinds.iter().map(|&k| variant_for(k, &tr)).collect::<Result<_>>()?;
            let seeds: Vec<u64> = (0..n as u64).map(|i| seed + i).collect();
            eprintln!("training {} variants x {} seeds", kinds.len(), n);
            paired_experiment(&plan, &Split { train: &tr, val: &va, test: &te }, &seeds, &progress)?
        }
        CrossvalMode::Loo => {
            let data = load(need(&a.data, "data", "loo")?)?;
            plan.variants = kinds.iter().map(|&k| variant_for(k, &data)).collect::<Result<_>>()?;
            eprintln!("training {} variants x {} left-out groups", kinds.len(), data.n_groups);
            loo_crossval(&plan, &data, seed, &progress)?
        }
    };
    let comparisons: Vec<PairedComparison> =
        kinds[1..].iter().map(|&k| exp.compare(kinds[0], k)).collect::<std::result::Result<_, _>>()?;

    std::fs::create_dir_all(&a.out_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", a.out_dir.display())))?;
    write(&a.out_dir.join("reports.csv"), &reports_csv(exp.records.values().map(|r| &r.report)))?;
    write(&a.out_dir.join("pairs.csv"), &pairs_csv(&comparisons))?;
    write(&a.out_dir.join("summary.csv"), &summary_csv(&comparisons))?;
    c.write_echo(&a.out_dir.join(ECHO_NAME))?;

    println!("{:<16} {:<7} {:>4} {:>12} {:>10} {:>10}", "candidate", "output", "n", "median dR2", "p(>)", "p(two)");
    let p = |v: Option<f64>| v.map(|x| format!("{x:.5}")).unwrap_or_else(|| "-".into());
    for cmp in &comparisons {
        for o in &cmp.outputs {
            println!(
                "{:<16} {:<7} {:>4} {:>+12.4} {:>10} {:>10}",
                cmp.candidate.name(),
                o.name,
                cmp.keys.len(),
                o.median_delta(),
                p(o.p_greater),
                p(o.p_two_sided)
            );
        }
    }
    println!("wrote reports.csv, pairs.csv, summary.csv to {}", a.out_dir.display());
    Ok(())
}

fn report(a: &ReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.input)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", a.input.display())))?;
    let rows = parse_pairs(&text)?;
    write(&a.out, &render_svg(&rows))?;
    println!("wrote {} paired points to {}", rows.len(), a.out.display());
    Ok(())
}
