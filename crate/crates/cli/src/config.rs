//! Flat `key = value` configuration.
//!
//! Keys are namespaced (`scene.*`, `augment.*`, `train.*`, `eval.*`), every
//! key has a default taken from the library's own defaults, and unknown keys
//! are rejected. Resolution order: defaults, then the config file, then
//! `--ns.key value` overrides, then dedicated subcommand flags.

use std::collections::BTreeMap;
use std::path::Path;

use vsfusion::augment::AugmentConfig;
use vsfusion::nnet::{ArchSpec, FusionKind};
use vsfusion::poses::StateSchema;
use vsfusion::scenegen::SceneConfig;
use vsfusion::train::{QatConfig, TrainConfig};

use crate::{CliError, Result};

/// Name of the echo written into directory outputs.
pub const ECHO_NAME: &str = "config.txt";

/// Rounds away float noise from degree conversions before display.
fn num(v: f64) -> String {
    let r = (v * 1e9).round() / 1e9;
    format!("{}", if r == 0.0 { 0.0 } else { r })
}

fn pair(p: (f64, f64)) -> String {
    format!("{},{}", num(p.0), num(p.1))
}

fn deg_pair(p: (f64, f64)) -> String {
    pair((p.0.to_degrees(), p.1.to_degrees()))
}

/// `(key, default, description)` for every recognized key.
pub fn registry() -> Vec<(&'static str, String, &'static str)> {
    let s = SceneConfig::default();
    let a = AugmentConfig::default();
    let t = TrainConfig::default();
    vec![
        ("scene.n", "4000".into(), "samples to generate"),
        ("scene.seed", s.seed.to_string(), "scene sampling seed"),
        ("scene.groups", s.n_groups.to_string(), "number of subject groups"),
        ("scene.state", "pitch".into(), "state channels: pitch | pitch_roll"),
        ("scene.x_range", pair(s.x_range), "target forward distance range, m"),
        ("scene.y_range", pair(s.y_range), "target lateral offset range, m"),
        ("scene.z_range", pair(s.z_range), "target height offset range, m"),
        ("scene.phi_range_deg", deg_pair(s.phi_range), "relative target yaw range, degrees"),
        ("scene.pitch_range_deg", deg_pair(s.pitch_range), "observer pitch range, degrees"),
        ("scene.roll_range_deg", deg_pair(s.roll_range), "observer roll range, degrees"),
        ("augment.copies", a.copies.to_string(), "augmented copies per input sample"),
        ("augment.seed", a.seed.to_string(), "augmentation seed"),
        ("augment.exposure", pair(a.exposure), "exposure gain range"),
        ("augment.gamma", pair(a.gamma), "gamma range"),
        ("augment.range_lo", pair(a.range_lo), "output black level range"),
        ("augment.range_hi", pair(a.range_hi), "output white level range"),
        ("augment.noise_sigma", pair(a.noise_sigma), "Gaussian noise sigma range, intensity levels"),
        ("augment.blur_sigma", pair(a.blur_sigma), "blur sigma range, pixels"),
        ("augment.vignette", pair(a.vignette), "vignetting strength range"),
        ("augment.flip_probability", num(a.flip_probability), "horizontal flip probability"),
        ("augment.pitch_warp", a.pitch_warp.to_string(), "enable virtual re-pitching"),
        ("augment.pitch_range_deg", deg_pair(a.pitch_range), "virtual pitch offset range, degrees"),
        ("train.arch", "desknet".into(), "backbone: desknet | frontnet_sym"),
        ("train.variant", "stateless".into(), "fusion variant"),
        ("train.learning_rate", num(t.learning_rate), "Adam learning rate"),
        ("train.epochs", t.epochs.to_string(), "maximum epochs"),
        ("train.batch_size", t.batch_size.to_string(), "minibatch size"),
        ("train.patience", t.patience.to_string(), "early-stopping patience, epochs"),
        ("train.seed", t.seed.to_string(), "initialization and shuffling seed"),
        ("train.halt_on_plateau", t.halt_on_plateau.to_string(), "stop when patience runs out"),
        ("train.qat_epochs", t.qat.epochs.to_string(), "quantization-aware fine-tuning epochs"),
        ("train.qat_learning_rate", num(t.qat.learning_rate), "fine-tuning learning rate"),
        ("train.qat_weight_decay", num(t.qat.weight_decay), "fine-tuning decoupled weight decay"),
        ("train.qat_calibration_samples", t.qat.calibration_samples.to_string(), "samples used to fix activation ranges"),
        ("eval.mode", "seeds:5".into(), "seeds:N (multi-seed) | loo (leave one group out)"),
        ("eval.variants", "stateless,mlp_branch".into(), "comma-separated variants, or all"),
        ("eval.baseline", "stateless".into(), "variant the others are compared against"),
        ("eval.seed", "1".into(), "first seed (seeds mode) or shared seed (loo)"),
        ("eval.jobs", "1".into(), "worker threads"),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self { values: registry().into_iter().map(|(k, v, _)| (k.to_string(), v)).collect() }
    }
}

/// How `eval.mode` splits the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossvalMode {
    Seeds(usize),
    Loo,
}

fn usage(key: &str, value: &str, what: &str) -> CliError {
    CliError::Usage(format!("{key} = '{value}': expected {what}"))
}

impl Config {
    /// Defaults, then `path`, then `overrides`; the result is validated.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut c = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            c.merge_text(&text)?;
        }
        for (k, v) in overrides {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected 'key = value'", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(CliError::Usage(format!("unknown config key '{key}'"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<T> {
        let v = self.get(key);
        v.parse().map_err(|_| usage(key, v, what))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let x: f64 = self.parse(key, "a number")?;
        if x.is_finite() {
            Ok(x)
        } else {
            Err(usage(key, self.get(key), "a finite number"))
        }
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parse(key, "a non-negative integer")
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parse(key, "a non-negative integer")
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.parse(key, "true or false")
    }

    /// `lo,hi` with `lo <= hi`.
    pub fn range(&self, key: &str) -> Result<(f64, f64)> {
        let v = self.get(key);
        let bad = || usage(key, v, "'lo,hi' with lo <= hi");
        let (a, b) = v.split_once(',').ok_or_else(bad)?;
        let lo: f64 = a.trim().parse().map_err(|_| bad())?;
        let hi: f64 = b.trim().parse().map_err(|_| bad())?;
        if lo.is_finite() && hi.is_finite() && lo <= hi {
            Ok((lo, hi))
        } else {
            Err(bad())
        }
    }

    fn deg_range(&self, key: &str) -> Result<(f64, f64)> {
        let (lo, hi) = self.range(key)?;
        Ok((lo.to_radians(), hi.to_radians()))
    }

    pub fn scene(&self) -> Result<SceneConfig> {
        let state_schema = match self.get("scene.state") {
            "pitch" => StateSchema::pitch(),
            "pitch_roll" => StateSchema::pitch_roll(),
            v => return Err(usage("scene.state", v, "pitch or pitch_roll")),
        };
        let groups = self.usize("scene.groups")?;
        let n_groups = u16::try_from(groups)
            .ok()
            .filter(|&g| g > 0)
            .ok_or_else(|| usage("scene.groups", self.get("scene.groups"), "1..=65535"))?;
        let c = SceneConfig {
            x_range: self.range("scene.x_range")?,
            y_range: self.range("scene.y_range")?,
            z_range: self.range("scene.z_range")?,
            phi_range: self.deg_range("scene.phi_range_deg")?,
            pitch_range: self.deg_range("scene.pitch_range_deg")?,
            roll_range: self.deg_range("scene.roll_range_deg")?,
            seed: self.u64("scene.seed")?,
            n_groups,
            state_schema,
            ..SceneConfig::default()
        };
        c.validate()?;
        Ok(c)
    }

    pub fn augment(&self) -> Result<AugmentConfig> {
        let c = AugmentConfig {
            exposure: self.range("augment.exposure")?,
            gamma: self.range("augment.gamma")?,
            range_lo: self.range("augment.range_lo")?,
            range_hi: self.range("augment.range_hi")?,
            noise_sigma: self.range("augment.noise_sigma")?,
            blur_sigma: self.range("augment.blur_sigma")?,
            vignette: self.range("augment.vignette")?,
            flip_probability: self.f64("augment.flip_probability")?,
            pitch_warp: self.bool("augment.pitch_warp")?,
            pitch_range: self.deg_range("augment.pitch_range_deg")?,
            copies: self.usize("augment.copies")?,
            seed: self.u64("augment.seed")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let c = TrainConfig {
            learning_rate: self.f64("train.learning_rate")?,
            epochs: self.usize("train.epochs")?,
            batch_size: self.usize("train.batch_size")?,
            patience: self.usize("train.patience")?,
            seed: self.u64("train.seed")?,
            halt_on_plateau: self.bool("train.halt_on_plateau")?,
            qat: QatConfig {
                epochs: self.usize("train.qat_epochs")?,
                learning_rate: self.f64("train.qat_learning_rate")?,
                weight_decay: self.f64("train.qat_weight_decay")?,
                calibration_samples: self.usize("train.qat_calibration_samples")?,
            },
        };
        c.validate()?;
        Ok(c)
    }

    pub fn arch(&self) -> Result<ArchSpec> {
        let v = self.get("train.arch");
        ArchSpec::by_name(v).ok_or_else(|| usage("train.arch", v, "desknet or frontnet_sym"))
    }

    pub fn variant_kind(&self, key: &str) -> Result<FusionKind> {
        let v = self.get(key);
        v.parse().map_err(|_| usage(key, v, "a fusion variant name"))
    }

    /// `eval.variants`, baseline first, without duplicates.
    pub fn eval_variants(&self) -> Result<Vec<FusionKind>> {
        let baseline = self.variant_kind("eval.baseline")?;
        let v = self.get("eval.variants");
        let listed: Vec<FusionKind> = if v == "all" {
            FusionKind::ALL.to_vec()
        } else {
            v.split(',')
                .map(|s| s.trim().parse().map_err(|_| usage("eval.variants", v, "variant names or all")))
                .collect::<Result<_>>()?
        };
        let mut out = vec![baseline];
        for k in listed {
            if !out.contains(&k) {
                out.push(k);
            }
        }
        if out.len() < 2 {
            return Err(usage("eval.variants", v, "at least one variant besides the baseline"));
        }
        Ok(out)
    }

    pub fn crossval_mode(&self) -> Result<CrossvalMode> {
        let v = self.get("eval.mode");
        if v == "loo" {
            return Ok(CrossvalMode::Loo);
        }
        v.strip_prefix("seeds:")
            .and_then(|n| n.parse().ok())
            .filter(|&n: &usize| n >= 2)
            .map(CrossvalMode::Seeds)
            .ok_or_else(|| usage("eval.mode", v, "seeds:N with N >= 2, or loo"))
    }

    /// Checks every key parses, including ones the current command ignores.
    pub fn validate(&self) -> Result<()> {
        self.scene()?;
        self.augment()?;
        self.train()?;
        self.arch()?;
        self.variant_kind("train.variant")?;
        self.eval_variants()?;
        self.crossval_mode()?;
        self.u64("eval.seed")?;
        if self.usize("scene.n")? == 0 {
            return Err(usage("scene.n", "0", "a positive sample count"));
        }
        if self.usize("eval.jobs")? == 0 {
            return Err(usage("eval.jobs", "0", "at least one worker"));
        }
        Ok(())
    }

    /// Resolved configuration in the same format it is read from.
    pub fn echo(&self) -> String {
        let docs: BTreeMap<&str, &str> = registry().into_iter().map(|(k, _, d)| (k, d)).collect();
        let mut s = String::from("# resolved vsfusion configuration\n");
        for (k, v) in &self.values {
            s.push_str(&format!("{k} = {v}  # {}\n", docs[k.as_str()]));
        }
        s
    }

    pub fn write_echo(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.echo())
            .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
    }
}

/// `(key, value)` pairs given on the command line.
pub type Overrides = Vec<(String, String)>;

/// Pulls `--ns.key value` and `--ns.key=value` overrides out of `args`
/// (anything whose flag name contains a dot) and returns the rest.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--").filter(|f| f.contains('.')) else {
            rest.push(a);
            continue;
        };
        if let Some((k, v)) = flag.split_once('=') {
            overrides.push((k.to_string(), v.to_string()));
        } else {
            let v = it.next().ok_or_else(|| CliError::Usage(format!("--{flag} needs a value")))?;
            overrides.push((flag.to_string(), v));
        }
    }
    Ok((rest, overrides))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_mirror_library() {
        let c = Config::default();
        c.validate().unwrap();
        assert_eq!(c.train().unwrap(), TrainConfig::default());
        assert_eq!(c.augment().unwrap().copies, 10);
        let a = c.augment().unwrap();
        let d = AugmentConfig::default();
        assert!((a.pitch_range.1 - d.pitch_range.1).abs() < 1e-12);
        assert_eq!(c.scene().unwrap().n_groups, SceneConfig::default().n_groups);
    }

    #[test]
    fn file_then_overrides() {
        let mut c = Config::default();
        c.merge_text("# comment\ntrain.epochs = 7  # trailing\n\nscene.seed=9\n").unwrap();
        c.set("train.epochs", "8").unwrap();
        assert_eq!(c.usize("train.epochs").unwrap(), 8);
        assert_eq!(c.u64("scene.seed").unwrap(), 9);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let mut c = Config::default();
        assert!(matches!(c.set("train.epoch", "3"), Err(CliError::Usage(_))));
        assert!(c.merge_text("no equals sign").is_err());
        c.set("augment.gamma", "2,1").unwrap();
        assert!(c.validate().is_err());
        let mut c = Config::default();
        c.set("train.epochs", "lots").unwrap();
        assert!(c.validate().is_err());
        let mut c = Config::default();
        c.set("eval.mode", "seeds:1").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut c = Config::default();
        c.set("train.learning_rate", "0.003").unwrap();
        c.set("eval.variants", "all").unwrap();
        let mut back = Config::default();
        back.merge_text(&c.echo()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn override_extraction() {
        let args: Vec<String> =
            ["vsfusion", "train", "--train.epochs", "3", "--out", "m", "--scene.seed=4"].map(String::from).to_vec();
        let (rest, ov) = split_overrides(args).unwrap();
        assert_eq!(rest, ["vsfusion", "train", "--out", "m"]);
        assert_eq!(ov, [("train.epochs".to_string(), "3".to_string()), ("scene.seed".into(), "4".into())]);
        assert!(split_overrides(vec!["--train.epochs".into()]).is_err());
    }

    #[test]
    fn eval_variant_list() {
        let mut c = Config::default();
        c.set("eval.variants", "mlp_branch,stateless,single_neuron").unwrap();
        assert_eq!(
            c.eval_variants().unwrap(),
            [FusionKind::Stateless, FusionKind::MlpBranch, FusionKind::SingleNeuron]
        );
        c.set("eval.mode", "loo").unwrap();
        assert_eq!(c.crossval_mode().unwrap(), CrossvalMode::Loo);
    }
}
