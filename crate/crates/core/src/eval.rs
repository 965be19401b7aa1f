//! Evaluation: per-output regression metrics, quaternion rotation error,
//! the exact Wilcoxon signed-rank test, and the multi-seed and
//! leave-one-group-out experiment protocols.
//!
//! Sums over samples are taken in sorted order so every metric is
//! independent of sample order, bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Mutex;

use thiserror::Error;

use crate::nnet::{predict_samples, ArchSpec, FusionKind, FusionVariant, Model, NnetError, Regressor};
use crate::poses::{rotation_distance_deg, Quaternion};
use crate::scenegen::Dataset;
use crate::train::{train, TrainConfig, TrainError, TrainHistory};

/// Largest sample size for which [`wilcoxon_exact`] enumerates.
pub const WILCOXON_MAX_N: usize = 25;

const PREDICT_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} targets vs {1} predictions")]
    LengthMismatch(usize, usize),
    #[error("targets have zero variance; R2 is undefined")]
    ZeroVariance,
    #[error("prediction {0} is a zero-norm quaternion")]
    ZeroNormQuaternion(usize),
    #[error("all differences are zero")]
    AllZero,
    #[error("{0} non-zero differences; exact test supports 1..={WILCOXON_MAX_N}")]
    TooManyPairs(usize),
    #[error("invalid experiment: {0}")]
    Protocol(String),
    #[error("dataset does not fit the model: {0}")]
    Incompatible(String),
    #[error("group {0} has no samples")]
    EmptyGroup(u16),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] NnetError),
}

/// Sum in ascending order: deterministic regardless of input order.
fn ordered_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

fn check_pair(y: &[f64], yhat: &[f64]) -> Result<(), EvalError> {
    if y.len() != yhat.len() {
        return Err(EvalError::LengthMismatch(y.len(), yhat.len()));
    }
    if y.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

pub fn mse(y: &[f64], yhat: &[f64]) -> Result<f64, EvalError> {
    check_pair(y, yhat)?;
    Ok(ordered_sum(y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).collect()) / y.len() as f64)
}

pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64, EvalError> {
    check_pair(y, yhat)?;
    Ok(ordered_sum(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).collect()) / y.len() as f64)
}

/// MSE of always predicting the mean: the population variance of `y`.
pub fn dummy_mse(y: &[f64]) -> Result<f64, EvalError> {
    if y.is_empty() {
        return Err(EvalError::Empty);
    }
    let mean = ordered_sum(y.to_vec()) / y.len() as f64;
    Ok(ordered_sum(y.iter().map(|v| (v - mean) * (v - mean)).collect()) / y.len() as f64)
}

/// Coefficient of determination, `1 - SSE / SST`. Unbounded below.
pub fn r2_score(y: &[f64], yhat: &[f64]) -> Result<f64, EvalError> {
    check_pair(y, yhat)?;
    if y.len() < 2 {
        return Err(EvalError::ZeroVariance);
    }
    let var = dummy_mse(y)?;
    if var <= 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    Ok(1.0 - mse(y, yhat)? / var)
}

/// Mean orientation distance in degrees. Predictions are raw scalar-last
/// 4-vectors and are normalized first.
pub fn mean_rotation_error_deg(truth: &[Quaternion], pred: &[[f64; 4]]) -> Result<f64, EvalError> {
    if truth.len() != pred.len() {
        return Err(EvalError::LengthMismatch(truth.len(), pred.len()));
    }
    if truth.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut d = Vec::with_capacity(truth.len());
    for (i, (t, p)) in truth.iter().zip(pred).enumerate() {
        let q = Quaternion::new(p[0], p[1], p[2], p[3]).ok_or(EvalError::ZeroNormQuaternion(i))?;
        d.push(rotation_distance_deg(t, &q));
    }
    Ok(ordered_sum(d) / truth.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alternative {
    /// Differences tend to be positive.
    Greater,
    Less,
    TwoSided,
}

/// Average ranks of `|d|`, doubled so ties stay integral.
fn doubled_ranks(d: &[f64]) -> Vec<u32> {
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.sort_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()));
    let mut ranks = vec![0; d.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && d[idx[j + 1]].abs() == d[idx[i]].abs() {
            j += 1;
        }
        // positions i..=j share rank (i+1 + j+1)/2
        for &k in &idx[i..=j] {
            ranks[k] = (i + j + 2) as u32;
        }
        i = j + 1;
    }
    ranks
}

/// Exact signed-rank test on paired differences. Zero differences are
/// dropped; ties in `|d|` get average ranks and the null distribution is
/// enumerated over all `2^n` sign assignments (conditionally exact).
pub fn wilcoxon_exact(differences: &[f64], alternative: Alternative) -> Result<f64, EvalError> {
    let d: Vec<f64> = differences.iter().copied().filter(|&v| v != 0.0).collect();
    if d.is_empty() {
        return Err(EvalError::AllZero);
    }
    if d.len() > WILCOXON_MAX_N {
        return Err(EvalError::TooManyPairs(d.len()));
    }
    let ranks = doubled_ranks(&d);
    let observed: u32 = ranks.iter().zip(&d).filter(|(_, &v)| v > 0.0).map(|(r, _)| r).sum();
    let total: u32 = ranks.iter().sum();
    // counts[s] = number of sign assignments whose doubled W+ equals s
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    for &r in &ranks {
        for s in (r as usize..=total as usize).rev() {
            counts[s] += counts[s - r as usize];
        }
    }
    let all = (1u64 << d.len()) as f64;
    let upper = counts[observed as usize..].iter().sum::<u64>() as f64 / all;
    let lower = counts[..=observed as usize].iter().sum::<u64>() as f64 / all;
    Ok(match alternative {
        Alternative::Greater => upper,
        Alternative::Less => lower,
        Alternative::TwoSided => (2.0 * upper.min(lower)).min(1.0),
    })
}

/// Median with the midpoint convention for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Names of the regression outputs for a label width.
pub fn output_names(label_dim: usize) -> Vec<String> {
    let names: &[&str] = match label_dim {
        4 => &["x", "y", "z", "phi"],
        7 => &["x", "y", "z", "qx", "qy", "qz", "qw"],
        _ => &[],
    };
    if names.is_empty() {
        (0..label_dim).map(|i| format!("out{i}")).collect()
    } else {
        names.iter().map(|s| s.to_string()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutputMetrics {
    pub r2: f64,
    pub mse: f64,
    pub mae: f64,
    pub dummy_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub arch: String,
    pub variant: FusionKind,
    /// Seed or left-out group, when part of an experiment.
    pub key: Option<u64>,
    pub n_samples: usize,
    pub output_names: Vec<String>,
    pub outputs: Vec<OutputMetrics>,
    /// Only for 7-value pose labels (position + scalar-last quaternion).
    pub rotation_error_deg: Option<f64>,
}

impl EvalReport {
    pub fn r2(&self) -> Vec<f64> {
        self.outputs.iter().map(|o| o.r2).collect()
    }
}

/// Metrics from flat row-major predictions against the dataset labels.
pub fn report_from_predictions(
    arch: &str,
    variant: FusionKind,
    key: Option<u64>,
    data: &Dataset,
    pred: &[f32],
) -> Result<EvalReport, EvalError> {
    let k = data.label_dim;
    if data.is_empty() {
        return Err(EvalError::Empty);
    }
    if pred.len() != data.len() * k {
        return Err(EvalError::LengthMismatch(data.len() * k, pred.len()));
    }
    let mut outputs = Vec::with_capacity(k);
    for o in 0..k {
        let y: Vec<f64> = data.samples.iter().map(|s| s.label[o] as f64).collect();
        let p: Vec<f64> = pred.chunks(k).map(|c| c[o] as f64).collect();
        outputs.push(OutputMetrics { r2: r2_score(&y, &p)?, mse: mse(&y, &p)?, mae: mae(&y, &p)?, dummy_mse: dummy_mse(&y)? });
    }
    let rotation_error_deg = if k == 7 {
        let truth: Vec<Quaternion> = data
            .samples
            .iter()
            .map(|s| {
                let l = &s.label;
                Quaternion::new(l[3] as f64, l[4] as f64, l[5] as f64, l[6] as f64)
                    .ok_or_else(|| EvalError::Protocol("zero-norm label quaternion".into()))
            })
            .collect::<Result<_, _>>()?;
        let q: Vec<[f64; 4]> = pred.chunks(k).map(|c| [c[3] as f64, c[4] as f64, c[5] as f64, c[6] as f64]).collect();
        Some(mean_rotation_error_deg(&truth, &q)?)
    } else {
        None
    };
    Ok(EvalReport {
        arch: arch.to_string(),
        variant,
        key,
        n_samples: data.len(),
        output_names: output_names(k),
        outputs,
        rotation_error_deg,
    })
}

/// Runs inference over `data` and computes every per-output metric.
pub fn evaluate<R: Regressor + ?Sized>(model: &R, data: &Dataset, key: Option<u64>) -> Result<EvalReport, EvalError> {
    if data.label_dim != model.arch().outputs() {
        return Err(EvalError::Incompatible(format!(
            "dataset has {} outputs, model {}",
            data.label_dim,
            model.arch().outputs()
        )));
    }
    let pred = predict_samples(model, &data.samples, PREDICT_CHUNK)?;
    report_from_predictions(&model.arch().name, model.variant().kind, key, data, &pred)
}

/// One trained member of an experiment.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub key: u64,
    pub report: EvalReport,
    pub history: TrainHistory,
    pub model: Model<f32>,
}

/// Train/validation/test split for one member.
#[derive(Debug, Clone)]
pub struct Split<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub test: &'a Dataset,
}

/// Trains `variant` from `seed` (initialization and shuffling) and
/// evaluates the selected snapshot on the test split.
pub fn run_member(
    arch: &ArchSpec,
    variant: &FusionVariant,
    key: u64,
    seed: u64,
    split: &Split<'_>,
    cfg: &TrainConfig,
) -> Result<RunRecord, EvalError> {
    let model = Model::<f32>::new(arch, variant, seed)?;
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let (model, history) = train(model, split.train, split.val, &cfg)?;
    let report = evaluate(&model, split.test, Some(key))?;
    Ok(RunRecord { key, report, history, model })
}

/// What to train in one experiment.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub arch: ArchSpec,
    pub variants: Vec<FusionVariant>,
    pub train: TrainConfig,
    /// Worker threads; results do not depend on this.
    pub jobs: usize,
}

/// Results of all members, addressable by (variant, key).
#[derive(Debug, Clone, Default)]
pub struct Experiment {
    pub records: BTreeMap<(u8, u64), RunRecord>,
}

impl Experiment {
    pub fn insert(&mut self, r: RunRecord) {
        self.records.insert((r.report.variant.id(), r.key), r);
    }

    pub fn get(&self, kind: FusionKind, key: u64) -> Option<&RunRecord> {
        self.records.get(&(kind.id(), key))
    }

    pub fn variants(&self) -> Vec<FusionKind> {
        let mut v: Vec<FusionKind> = self.records.values().map(|r| r.report.variant).collect();
        v.dedup();
        v
    }

    /// Pairs `candidate` against `baseline` by key.
    pub fn compare(&self, baseline: FusionKind, candidate: FusionKind) -> Result<PairedComparison, EvalError> {
        let side = |k: FusionKind| -> BTreeMap<u64, &EvalReport> {
            self.records.values().filter(|r| r.report.variant == k).map(|r| (r.key, &r.report)).collect()
        };
        let (base, cand) = (side(baseline), side(candidate));
        if base.is_empty() || base.keys().ne(cand.keys()) {
            return Err(EvalError::Protocol(format!("{baseline} and {candidate} runs do not pair up by key")));
        }
        let first = base.values().next().expect("nonempty");
        let names = first.output_names.clone();
        let keys: Vec<u64> = base.keys().copied().collect();
        let column = |m: &BTreeMap<u64, &EvalReport>, o: usize| keys.iter().map(|k| m[k].outputs[o].r2).collect();
        let mut outputs = Vec::with_capacity(names.len());
        for (o, name) in names.iter().enumerate() {
            let b: Vec<f64> = column(&base, o);
            let c: Vec<f64> = column(&cand, o);
            let d: Vec<f64> = c.iter().zip(&b).map(|(c, b)| c - b).collect();
            outputs.push(PairedOutput {
                name: name.clone(),
                p_greater: wilcoxon_exact(&d, Alternative::Greater).ok(),
                p_two_sided: wilcoxon_exact(&d, Alternative::TwoSided).ok(),
                baseline: b,
                candidate: c,
            });
        }
        Ok(PairedComparison { baseline, candidate, keys, outputs })
    }
}

/// Paired R² scores for one output.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedOutput {
    pub name: String,
    pub baseline: Vec<f64>,
    pub candidate: Vec<f64>,
    /// `None` when every difference is zero.
    pub p_greater: Option<f64>,
    pub p_two_sided: Option<f64>,
}

impl PairedOutput {
    /// `candidate - baseline` per key.
    pub fn deltas(&self) -> Vec<f64> {
        self.candidate.iter().zip(&self.baseline).map(|(c, b)| c - b).collect()
    }

    pub fn median_delta(&self) -> f64 {
        median(&self.deltas()).expect("paired outputs are nonempty")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedComparison {
    pub baseline: FusionKind,
    pub candidate: FusionKind,
    /// Seeds or left-out groups, ascending; shared by both sides.
    pub keys: Vec<u64>,
    pub outputs: Vec<PairedOutput>,
}

impl PairedComparison {
    pub fn output(&self, name: &str) -> Option<&PairedOutput> {
        self.outputs.iter().find(|o| o.name == name)
    }
}

/// Runs `tasks` on up to `jobs` threads. Results are keyed, so arrival
/// order is irrelevant.
fn run_tasks<T, F>(tasks: Vec<T>, jobs: usize, on_done: &(dyn Fn(&RunRecord) + Sync), f: F) -> Result<Experiment, EvalError>
where
    T: Send,
    F: Fn(T) -> Result<RunRecord, EvalError> + Sync,
{
    let queue = Mutex::new(tasks.into_iter().rev().collect::<Vec<T>>());
    let results = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1) {
            s.spawn(|| loop {
                let Some(t) = queue.lock().expect("queue").pop() else { break };
                let r = f(t);
                if let Ok(rec) = &r {
                    on_done(rec);
                }
                let failed = r.is_err();
                results.lock().expect("results").push(r);
                if failed {
                    queue.lock().expect("queue").clear();
                }
            });
        }
    });
    let mut exp = Experiment::default();
    for r in results.into_inner().expect("results") {
        exp.insert(r?);
    }
    Ok(exp)
}

/// Multi-seed protocol: for each seed, every variant is trained from the
/// same seed, so shared parameters start identical, and all are evaluated
/// on the shared test split.
pub fn paired_experiment(
    plan: &ExperimentPlan,
    split: &Split<'_>,
    seeds: &[u64],
    on_done: &(dyn Fn(&RunRecord) + Sync),
) -> Result<Experiment, EvalError> {
    if seeds.len() < 2 {
        return Err(EvalError::Protocol("at least two seeds are required".into()));
    }
    if plan.variants.is_empty() {
        return Err(EvalError::Protocol("no variants".into()));
    }
    let tasks: Vec<(FusionVariant, u64)> =
        seeds.iter().flat_map(|&s| plan.variants.iter().map(move |v| (*v, s))).collect();
    run_tasks(tasks, plan.jobs, on_done, |(v, s)| run_member(&plan.arch, &v, s, s, split, &plan.train))
}

/// Index partition for one left-out group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LooSplit {
    pub group: u16,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// One split per group: the group is the test set; the remaining samples,
/// in index order, go to validation every tenth position (90/10).
pub fn loo_splits(data: &Dataset) -> Result<Vec<LooSplit>, EvalError> {
    if data.n_groups < 3 {
        return Err(EvalError::Protocol(format!("{} groups; at least 3 are required", data.n_groups)));
    }
    let mut splits = Vec::with_capacity(data.n_groups as usize);
    for g in 0..data.n_groups {
        let test: Vec<usize> = (0..data.len()).filter(|&i| data.samples[i].group_id == g).collect();
        if test.is_empty() {
            return Err(EvalError::EmptyGroup(g));
        }
        let rest = (0..data.len()).filter(|&i| data.samples[i].group_id != g);
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (pos, i) in rest.enumerate() {
            if pos % 10 == 9 {
                val.push(i);
            } else {
                train.push(i);
            }
        }
        splits.push(LooSplit { group: g, train, val, test });
    }
    Ok(splits)
}

/// Leave-one-group-out protocol: one model per (group, variant), all
/// trained from `seed`, keyed by the left-out group.
pub fn loo_crossval(
    plan: &ExperimentPlan,
    data: &Dataset,
    seed: u64,
    on_done: &(dyn Fn(&RunRecord) + Sync),
) -> Result<Experiment, EvalError> {
    if plan.variants.is_empty() {
        return Err(EvalError::Protocol("no variants".into()));
    }
    let splits = loo_splits(data)?;
    let parts: Vec<(Dataset, Dataset, Dataset)> =
        splits.iter().map(|s| (data.subset(&s.train), data.subset(&s.val), data.subset(&s.test))).collect();
    let tasks: Vec<(FusionVariant, usize)> =
        (0..splits.len()).flat_map(|g| plan.variants.iter().map(move |v| (*v, g))).collect();
    run_tasks(tasks, plan.jobs, on_done, |(v, g)| {
        let (tr, va, te) = &parts[g];
        let split = Split { train: tr, val: va, test: te };
        run_member(&plan.arch, &v, splits[g].group as u64, seed, &split, &plan.train)
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// One row per (variant, key, output).
pub fn reports_csv<'a>(reports: impl IntoIterator<Item = &'a EvalReport>) -> String {
    let mut s = String::from("variant,key,output,r2,mse,mae,dummy_mse,rotation_error_deg\n");
    for r in reports {
        for (name, m) in r.output_names.iter().zip(&r.outputs) {
            let key = r.key.map(|k| k.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{key},{name},{},{},{},{},{}",
                r.variant,
                m.r2,
                m.mse,
                m.mae,
                m.dummy_mse,
                fmt_opt(r.rotation_error_deg)
            );
        }
    }
    s
}

/// Per-key paired scores: one row per (comparison, output, key).
pub fn pairs_csv<'a>(comparisons: impl IntoIterator<Item = &'a PairedComparison>) -> String {
    let mut s = String::from("baseline,candidate,output,key,baseline_r2,candidate_r2\n");
    for c in comparisons {
        for o in &c.outputs {
            for (i, k) in c.keys.iter().enumerate() {
                let _ = writeln!(s, "{},{},{},{k},{},{}", c.baseline, c.candidate, o.name, o.baseline[i], o.candidate[i]);
            }
        }
    }
    s
}

/// Medians, median deltas and p-values per (comparison, output).
pub fn summary_csv<'a>(comparisons: impl IntoIterator<Item = &'a PairedComparison>) -> String {
    let mut s = String::from(
        "baseline,candidate,output,n,median_baseline,median_candidate,median_delta,p_greater,p_two_sided\n",
    );
    for c in comparisons {
        for o in &c.outputs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                c.baseline,
                c.candidate,
                o.name,
                c.keys.len(),
                median(&o.baseline).unwrap_or(f64::NAN),
                median(&o.candidate).unwrap_or(f64::NAN),
                o.median_delta(),
                fmt_opt(o.p_greater),
                fmt_opt(o.p_two_sided)
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Enumerates all 2^n sign flips directly, with average ranks computed
    /// by counting (no sorting).
    fn brute_force(d: &[f64], alt: Alternative) -> f64 {
        let d: Vec<f64> = d.iter().copied().filter(|&v| v != 0.0).collect();
        let n = d.len();
        let rank = |i: usize| -> f64 {
            let a = d[i].abs();
            let below = d.iter().filter(|v| v.abs() < a).count() as f64;
            let equal = d.iter().filter(|v| v.abs() == a).count() as f64;
            below + (equal + 1.0) / 2.0
        };
        let r: Vec<f64> = (0..n).map(rank).collect();
        let obs: f64 = (0..n).filter(|&i| d[i] > 0.0).map(|i| r[i]).sum();
        let (mut ge, mut le) = (0u64, 0u64);
        for mask in 0u64..(1 << n) {
            let w: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| r[i]).sum();
            if w >= obs - 1e-9 {
                ge += 1;
            }
            if w <= obs + 1e-9 {
                le += 1;
            }
        }
        let all = (1u64 << n) as f64;
        match alt {
            Alternative::Greater => ge as f64 / all,
            Alternative::Less => le as f64 / all,
            Alternative::TwoSided => (2.0 * (ge as f64 / all).min(le as f64 / all)).min(1.0),
        }
    }

    #[test]
    fn r2_examples() {
        let y = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(r2_score(&y, &y).unwrap(), 1.0);
        assert_eq!(r2_score(&y, &[1.5; 4]).unwrap(), 0.0);
        assert!((r2_score(&y, &[0.0; 4]).unwrap() - (1.0 - 14.0 / 5.0)).abs() < 1e-12);
        assert!(matches!(r2_score(&[2.0, 2.0], &[1.0, 2.0]), Err(EvalError::ZeroVariance)));
        assert!(matches!(r2_score(&[1.0], &[1.0]), Err(EvalError::ZeroVariance)));
    }

    #[test]
    fn basic_metrics() {
        assert_eq!(dummy_mse(&[0.0, 2.0]).unwrap(), 1.0);
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 1.5);
        assert_eq!(mse(&[1.0, 2.0], &[2.0, 4.0]).unwrap(), 2.5);
        assert!(matches!(mse(&[], &[]), Err(EvalError::Empty)));
        assert!(matches!(mae(&[1.0], &[]), Err(EvalError::LengthMismatch(1, 0))));
    }

    #[test]
    fn rotation_error_examples() {
        let a = Quaternion::from_euler(0.1, 0.2, 0.3);
        let b = Quaternion::from_axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2).unwrap();
        let raw = |q: &Quaternion| [q.x, q.y, q.z, q.w];
        let neg = |q: &Quaternion| [-q.x, -q.y, -q.z, -q.w];
        assert_eq!(mean_rotation_error_deg(&[a, b], &[raw(&a), raw(&b)]).unwrap(), 0.0);
        assert!(mean_rotation_error_deg(&[a, b], &[neg(&a), neg(&b)]).unwrap() < 1e-12);
        let id = Quaternion::IDENTITY;
        let e = mean_rotation_error_deg(&[id, id], &[raw(&id), raw(&b)]).unwrap();
        assert!((e - 45.0).abs() < 1e-9);
        // unnormalized predictions are scaled first
        assert!(mean_rotation_error_deg(&[a], &[raw(&a).map(|v| 3.0 * v)]).unwrap() < 1e-6);
        assert!(matches!(
            mean_rotation_error_deg(&[a], &[[0.0; 4]]),
            Err(EvalError::ZeroNormQuaternion(0))
        ));
    }

    #[test]
    fn wilcoxon_examples() {
        let p = wilcoxon_exact(&[0.1, 0.2, 0.3, 0.4, 0.5], Alternative::Greater).unwrap();
        assert_eq!(p, 1.0 / 32.0);
        assert_eq!(wilcoxon_exact(&[1.0], Alternative::Greater).unwrap(), 0.5);
        assert_eq!(wilcoxon_exact(&[0.1, 0.2, 0.3, 0.4, 0.5], Alternative::TwoSided).unwrap(), 1.0 / 16.0);
        assert!(matches!(wilcoxon_exact(&[0.0, 0.0], Alternative::Greater), Err(EvalError::AllZero)));
        assert!(matches!(wilcoxon_exact(&[1.0; 26], Alternative::Greater), Err(EvalError::TooManyPairs(26))));
        // zeros are dropped before ranking
        assert_eq!(wilcoxon_exact(&[0.0, 1.0], Alternative::Greater).unwrap(), 0.5);
    }

    #[test]
    fn wilcoxon_matches_enumeration_with_ties() {
        let cases: [&[f64]; 4] = [
            &[1.0, -1.0, 2.0, 2.0, -3.0, 4.0],
            &[0.5, 0.5, 0.5, -0.5],
            &[-2.0, -1.0, 3.0, 3.0, 3.0, 0.0, 5.0],
            &[1.0, 2.0, -2.0, 3.0, -4.0, 4.0, 4.0, 6.0, -7.0, 8.0],
        ];
        for d in cases {
            for alt in [Alternative::Greater, Alternative::Less, Alternative::TwoSided] {
                assert_eq!(wilcoxon_exact(d, alt).unwrap(), brute_force(d, alt), "{d:?} {alt:?}");
            }
        }
    }

    #[test]
    fn median_midpoint() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    proptest! {
        #[test]
        fn wilcoxon_exact_equals_brute_force(d in prop::collection::vec(-5i32..=5, 1..=10)) {
            let d: Vec<f64> = d.into_iter().map(f64::from).collect();
            prop_assume!(d.iter().any(|&v| v != 0.0));
            for alt in [Alternative::Greater, Alternative::Less, Alternative::TwoSided] {
                prop_assert_eq!(wilcoxon_exact(&d, alt).unwrap(), brute_force(&d, alt));
            }
        }

        #[test]
        fn wilcoxon_sign_symmetry(d in prop::collection::vec(-1e3f64..1e3, 1..=12)) {
            prop_assume!(d.iter().any(|&v| v != 0.0));
            let neg: Vec<f64> = d.iter().map(|v| -v).collect();
            let g = wilcoxon_exact(&neg, Alternative::Greater).unwrap();
            prop_assert_eq!(g, wilcoxon_exact(&d, Alternative::Less).unwrap());
            let p = wilcoxon_exact(&d, Alternative::TwoSided).unwrap();
            prop_assert!(p > 0.0 && p <= 1.0);
        }

        #[test]
        fn r2_identity(y in prop::collection::vec(-10f64..10.0, 2..50), seed in 0u64..1000) {
            let var = dummy_mse(&y).unwrap();
            prop_assume!(var > 1e-9);
            let yhat: Vec<f64> = y.iter().enumerate().map(|(i, v)| v + ((i as u64 * 31 + seed) % 7) as f64 - 3.0).collect();
            let lhs = r2_score(&y, &yhat).unwrap();
            prop_assert!((lhs - (1.0 - mse(&y, &yhat).unwrap() / var)).abs() < 1e-9);
        }

        #[test]
        fn metrics_ignore_sample_order(y in prop::collection::vec(-10f64..10.0, 2..40), rot in 0usize..40) {
            let yhat: Vec<f64> = y.iter().map(|v| 0.7 * v + 0.1).collect();
            let mut ys = y.clone();
            let mut ps = yhat.clone();
            let r = rot % y.len();
            ys.rotate_left(r);
            ps.rotate_left(r);
            prop_assert_eq!(mse(&y, &yhat).unwrap(), mse(&ys, &ps).unwrap());
            prop_assert_eq!(mae(&y, &yhat).unwrap(), mae(&ys, &ps).unwrap());
            prop_assert_eq!(dummy_mse(&y).unwrap(), dummy_mse(&ys).unwrap());
        }

        #[test]
        fn rotation_error_ignores_negation(
            angles in prop::collection::vec((-3.0f64..3.0, -1.5f64..1.5, -3.0f64..3.0), 1..8),
            flips in prop::collection::vec(any::<bool>(), 8),
        ) {
            let truth: Vec<Quaternion> = angles.iter().map(|&(r, p, y)| Quaternion::from_euler(r, p, y)).collect();
            let pred: Vec<[f64; 4]> = angles.iter().map(|&(r, p, y)| {
                let q = Quaternion::from_euler(r + 0.1, p, y - 0.2);
                [q.x, q.y, q.z, q.w]
            }).collect();
            let flipped: Vec<[f64; 4]> = pred.iter().zip(&flips)
                .map(|(q, &f)| if f { q.map(|v| -v) } else { *q }).collect();
            let a = mean_rotation_error_deg(&truth, &pred).unwrap();
            let b = mean_rotation_error_deg(&truth, &flipped).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn compare_requires_matching_keys() {
        let exp = Experiment::default();
        assert!(exp.compare(FusionKind::Stateless, FusionKind::MlpBranch).is_err());
    }

    #[test]
    fn csv_headers() {
        assert!(reports_csv([]).starts_with("variant,key,output,r2,mse,mae,dummy_mse,rotation_error_deg\n"));
        assert!(summary_csv([]).starts_with("baseline,candidate,output,n,"));
        assert_eq!(pairs_csv([]), "baseline,candidate,output,key,baseline_r2,candidate_r2\n");
    }
}
