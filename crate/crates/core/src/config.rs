//! Flat `key=value` run configuration covering every tunable of the
//! pipeline.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::him::DecomposeMode;
use crate::mirec::{MirecConfig, DEPTH};
use crate::qtest::{LambdaSchedule, NodeConfig, MENU_LEN};
use crate::sirl::{DEFAULT_ALPHA, DEFAULT_SAMPLES_PER_CLASS, DEFAULT_TAU};

/// Floating-point type the pipeline runs in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

/// Feature space in which proxy labels are assigned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Extractor {
    /// `F_base` of the supervised flat model.
    Baseline,
    /// Pooled deepest encoder features of the reconstruction network.
    Encoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SirlConfig {
    pub tau: f64,
    pub alpha: f64,
    pub samples_per_class: usize,
    pub extractor: Extractor,
}

impl Default for SirlConfig {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU, alpha: DEFAULT_ALPHA, samples_per_class: DEFAULT_SAMPLES_PER_CLASS, extractor: Extractor::Baseline }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    /// Existing dataset directory; `None` synthesizes one from `synth`.
    pub data_dir: Option<PathBuf>,
    pub synth: SyntheticSpec,
    pub label_fraction: f64,
    pub mirec: MirecConfig,
    pub sirl: SirlConfig,
    /// Node settings; the flat model shares its extractor, optimizer and
    /// early-stopping settings.
    pub node: NodeConfig,
    pub baseline_steps: usize,
    pub baseline_batch: usize,
    pub mode: DecomposeMode,
    /// Whether accepted reconstructions join the node training sets.
    pub use_reconstructions: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let node = NodeConfig::default();
        Self {
            seed: 42,
            precision: Precision::F32,
            data_dir: None,
            synth: SyntheticSpec::default(),
            label_fraction: 0.2,
            mirec: MirecConfig { steps: 600, optimizer: crate::nn::AdamConfig::with_lr(1e-3), ..MirecConfig::default() },
            sirl: SirlConfig::default(),
            baseline_steps: node.steps,
            baseline_batch: node.labeled_per_step + node.unlabeled_per_step,
            node,
            mode: DecomposeMode::KoaFixed,
            use_reconstructions: true,
        }
    }
}

fn bad(key: &str, value: &str, why: impl Display) -> Error {
    Error::Config(format!("{key}={value}: {why}"))
}

fn num<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: Display,
{
    value.parse().map_err(|e| bad(key, value, e))
}

fn list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>>
where
    V::Err: Display,
{
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn array<const N: usize>(key: &str, value: &str) -> Result<[usize; N]> {
    let v: Vec<usize> = list(key, value)?;
    v.try_into().map_err(|v: Vec<usize>| bad(key, value, format!("expected {N} values, got {}", v.len())))
}

fn join<V: Display>(v: &[V]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

fn check(ok: bool, key: &str, value: impl Display, range: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{key}={value} outside {range}")))
    }
}

impl RunConfig {
    /// Parses `key=value` lines over the defaults. `#` starts a comment;
    /// blank lines are ignored; unknown and repeated keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: key {key} repeated", n + 1)));
            }
            config.set(key, value)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one key without validating cross-key ranges.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let n = &mut self.node;
        let m = &mut self.mirec;
        let s = &mut self.synth;
        match key {
            "seed" => self.seed = num(key, value)?,
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(bad(key, value, "expected f32 or f64")),
                }
            }
            "data.dir" => self.data_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "data.image_size" => s.image_size = num(key, value)?,
            "data.class_counts" => s.class_counts = list(key, value)?,
            "data.gap" => s.gap = list(key, value)?,
            "data.gap_jitter" => s.gap_jitter = num(key, value)?,
            "data.blobs" => s.blobs = list(key, value)?,
            "data.noise" => s.noise = list(key, value)?,
            "data.band" => s.band = num(key, value)?,
            "data.background" => s.background = num(key, value)?,
            "data.intensity" => s.intensity = num(key, value)?,
            "split.label_fraction" => self.label_fraction = num(key, value)?,
            "mirec.patch" => m.patch = num(key, value)?,
            "mirec.mask_ratio" => m.mask_ratio = num(key, value)?,
            "mirec.alpha" => m.alpha = num(key, value)?,
            "mirec.steps" => m.steps = num(key, value)?,
            "mirec.batch" => m.batch = num(key, value)?,
            "mirec.gen_widths" => m.gen_widths = array::<DEPTH>(key, value)?,
            "mirec.dis_widths" => m.dis_widths = array::<DEPTH>(key, value)?,
            "mirec.lr" => m.optimizer.lr = num(key, value)?,
            "mirec.weight_decay" => m.optimizer.weight_decay = num(key, value)?,
            "mirec.probe" => m.probe = num(key, value)?,
            "sirl.tau" => self.sirl.tau = num(key, value)?,
            "sirl.alpha" => self.sirl.alpha = num(key, value)?,
            "sirl.samples_per_class" => self.sirl.samples_per_class = num(key, value)?,
            "sirl.extractor" => {
                self.sirl.extractor = match value {
                    "baseline" => Extractor::Baseline,
                    "encoder" => Extractor::Encoder,
                    _ => return Err(bad(key, value, "expected baseline or encoder")),
                }
            }
            "qtest.mu" => n.mu = num(key, value)?,
            "qtest.omega" => n.omega = num(key, value)?,
            "qtest.lambda" => {
                n.lambda = match value {
                    "ramp" => LambdaSchedule::Ramp { max: 1.0, fraction: 0.2 },
                    v => LambdaSchedule::Constant(num(key, v).map_err(|_| bad(key, value, "expected ramp or a number"))?),
                }
            }
            "qtest.lambda_max" | "qtest.ramp_fraction" => match &mut n.lambda {
                LambdaSchedule::Ramp { max, fraction } => {
                    *if key == "qtest.lambda_max" { max } else { fraction } = num(key, value)?;
                }
                LambdaSchedule::Constant(_) => return Err(bad(key, value, "only meaningful with qtest.lambda=ramp")),
            },
            "qtest.steps" => n.steps = num(key, value)?,
            "qtest.labeled_per_step" => n.labeled_per_step = num(key, value)?,
            "qtest.unlabeled_per_step" => n.unlabeled_per_step = num(key, value)?,
            "qtest.lr" => n.optimizer.lr = num(key, value)?,
            "qtest.weight_decay" => n.optimizer.weight_decay = num(key, value)?,
            "qtest.eval_every" => n.eval_every = num(key, value)?,
            "qtest.patience" => n.patience = num(key, value)?,
            "qtest.val_fraction" => n.val_fraction = num(key, value)?,
            "qtest.ops_per_sample" => n.ops_per_sample = num(key, value)?,
            "qtest.filters" => n.base.filters = array::<5>(key, value)?,
            "qtest.fc1" => n.base.fc1 = num(key, value)?,
            "qtest.fc2" => n.base.fc2 = num(key, value)?,
            "qcn.qubits" => {
                n.qcn.qubits = num(key, value)?;
                n.base.proj = 1usize.checked_shl(n.qcn.qubits as u32).unwrap_or(0);
            }
            "qcn.layers" => n.qcn.layers = num(key, value)?,
            "qcn.wire" => n.qcn.wire = if value == "last" { None } else { Some(num(key, value)?) },
            "qcn.lr" => n.qcn_optimizer.lr = num(key, value)?,
            "qcn.batch" => n.eval_batch = num(key, value)?,
            "baseline.steps" => self.baseline_steps = num(key, value)?,
            "baseline.batch" => self.baseline_batch = num(key, value)?,
            "him.mode" => {
                self.mode = match value {
                    "koa-fixed" => DecomposeMode::KoaFixed,
                    "count-balanced" => DecomposeMode::CountBalanced,
                    _ => return Err(bad(key, value, "expected koa-fixed or count-balanced")),
                }
            }
            "him.reconstructions" => self.use_reconstructions = flag(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order; parsing the
    /// rendered text reproduces the configuration.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (n, m, s) = (&self.node, &self.mirec, &self.synth);
        let mut e = vec![
            ("seed", self.seed.to_string()),
            ("precision", if self.precision == Precision::F32 { "f32" } else { "f64" }.to_string()),
            ("data.dir", self.data_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("data.image_size", s.image_size.to_string()),
            ("data.class_counts", join(&s.class_counts)),
            ("data.gap", join(&s.gap)),
            ("data.gap_jitter", s.gap_jitter.to_string()),
            ("data.blobs", join(&s.blobs)),
            ("data.noise", join(&s.noise)),
            ("data.band", s.band.to_string()),
            ("data.background", s.background.to_string()),
            ("data.intensity", s.intensity.to_string()),
            ("split.label_fraction", self.label_fraction.to_string()),
            ("mirec.patch", m.patch.to_string()),
            ("mirec.mask_ratio", m.mask_ratio.to_string()),
            ("mirec.alpha", m.alpha.to_string()),
            ("mirec.steps", m.steps.to_string()),
            ("mirec.batch", m.batch.to_string()),
            ("mirec.gen_widths", join(&m.gen_widths)),
            ("mirec.dis_widths", join(&m.dis_widths)),
            ("mirec.lr", m.optimizer.lr.to_string()),
            ("mirec.weight_decay", m.optimizer.weight_decay.to_string()),
            ("mirec.probe", m.probe.to_string()),
            ("sirl.tau", self.sirl.tau.to_string()),
            ("sirl.alpha", self.sirl.alpha.to_string()),
            ("sirl.samples_per_class", self.sirl.samples_per_class.to_string()),
            ("sirl.extractor", if self.sirl.extractor == Extractor::Baseline { "baseline" } else { "encoder" }.to_string()),
            ("qtest.mu", n.mu.to_string()),
            ("qtest.omega", n.omega.to_string()),
        ];
        match n.lambda {
            LambdaSchedule::Ramp { max, fraction } => {
                e.push(("qtest.lambda", "ramp".to_string()));
                e.push(("qtest.lambda_max", max.to_string()));
                e.push(("qtest.ramp_fraction", fraction.to_string()));
            }
            LambdaSchedule::Constant(v) => e.push(("qtest.lambda", v.to_string())),
        }
        e.extend([
            ("qtest.steps", n.steps.to_string()),
            ("qtest.labeled_per_step", n.labeled_per_step.to_string()),
            ("qtest.unlabeled_per_step", n.unlabeled_per_step.to_string()),
            ("qtest.lr", n.optimizer.lr.to_string()),
            ("qtest.weight_decay", n.optimizer.weight_decay.to_string()),
            ("qtest.eval_every", n.eval_every.to_string()),
            ("qtest.patience", n.patience.to_string()),
            ("qtest.val_fraction", n.val_fraction.to_string()),
            ("qtest.ops_per_sample", n.ops_per_sample.to_string()),
            ("qtest.filters", join(&n.base.filters)),
            ("qtest.fc1", n.base.fc1.to_string()),
            ("qtest.fc2", n.base.fc2.to_string()),
            ("qcn.qubits", n.qcn.qubits.to_string()),
            ("qcn.layers", n.qcn.layers.to_string()),
            ("qcn.wire", n.qcn.wire.map_or_else(|| "last".to_string(), |w| w.to_string())),
            ("qcn.lr", n.qcn_optimizer.lr.to_string()),
            ("qcn.batch", n.eval_batch.to_string()),
            ("baseline.steps", self.baseline_steps.to_string()),
            ("baseline.batch", self.baseline_batch.to_string()),
            ("him.mode", if self.mode == DecomposeMode::KoaFixed { "koa-fixed" } else { "count-balanced" }.to_string()),
            ("him.reconstructions", self.use_reconstructions.to_string()),
        ]);
        e
    }

    /// The configuration as parseable text.
    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Range checks for every key.
    pub fn validate(&self) -> Result<()> {
        let (n, m) = (&self.node, &self.mirec);
        let open01 = |v: f64| v > 0.0 && v < 1.0;
        check(open01(self.label_fraction), "split.label_fraction", self.label_fraction, "(0, 1)")?;
        check(m.patch.is_power_of_two() && m.patch <= 32, "mirec.patch", m.patch, "powers of two up to 32")?;
        check(open01(m.mask_ratio), "mirec.mask_ratio", m.mask_ratio, "(0, 1)")?;
        check(m.alpha.is_finite() && m.alpha >= 0.0, "mirec.alpha", m.alpha, "[0, inf)")?;
        check(m.steps >= 1, "mirec.steps", m.steps, "[1, inf)")?;
        check(m.batch >= 1, "mirec.batch", m.batch, "[1, inf)")?;
        check(m.probe >= 1, "mirec.probe", m.probe, "[1, inf)")?;
        check(!m.gen_widths.contains(&0), "mirec.gen_widths", join(&m.gen_widths), "positive widths")?;
        check(!m.dis_widths.contains(&0), "mirec.dis_widths", join(&m.dis_widths), "positive widths")?;
        for (key, lr) in [("mirec.lr", m.optimizer.lr), ("qtest.lr", n.optimizer.lr), ("qcn.lr", n.qcn_optimizer.lr)] {
            check(lr.is_finite() && lr > 0.0, key, lr, "(0, inf)")?;
        }
        for (key, wd) in [("mirec.weight_decay", m.optimizer.weight_decay), ("qtest.weight_decay", n.optimizer.weight_decay)] {
            check(wd.is_finite() && wd >= 0.0, key, wd, "[0, inf)")?;
        }
        let tau = self.sirl.tau;
        check(tau.is_finite() && tau > 0.0, "sirl.tau", tau, "(0, inf)")?;
        check((0.0..=1.0).contains(&self.sirl.alpha), "sirl.alpha", self.sirl.alpha, "[0, 1]")?;
        check(self.sirl.samples_per_class >= 1, "sirl.samples_per_class", self.sirl.samples_per_class, "[1, inf)")?;
        check(open01(n.mu), "qtest.mu", n.mu, "(0, 1)")?;
        check(n.omega.is_finite() && n.omega > 0.0, "qtest.omega", n.omega, "(0, inf)")?;
        match n.lambda {
            LambdaSchedule::Constant(v) => check(v.is_finite() && v >= 0.0, "qtest.lambda", v, "[0, inf)")?,
            LambdaSchedule::Ramp { max, fraction } => {
                check(max.is_finite() && max >= 0.0, "qtest.lambda_max", max, "[0, inf)")?;
                check((0.0..=1.0).contains(&fraction), "qtest.ramp_fraction", fraction, "[0, 1]")?;
            }
        }
        for (key, v) in [
            ("qtest.steps", n.steps),
            ("qtest.labeled_per_step", n.labeled_per_step),
            ("qtest.eval_every", n.eval_every),
            ("qtest.patience", n.patience),
            ("qtest.fc1", n.base.fc1),
            ("qtest.fc2", n.base.fc2),
            ("qcn.batch", n.eval_batch),
            ("baseline.steps", self.baseline_steps),
            ("baseline.batch", self.baseline_batch),
        ] {
            check(v >= 1, key, v, "[1, inf)")?;
        }
        check((0.0..1.0).contains(&n.val_fraction), "qtest.val_fraction", n.val_fraction, "[0, 1)")?;
        check((1..=MENU_LEN).contains(&n.ops_per_sample), "qtest.ops_per_sample", n.ops_per_sample, &format!("[1, {MENU_LEN}]"))?;
        check(!n.base.filters.contains(&0), "qtest.filters", join(&n.base.filters), "positive widths")?;
        check((2..=crate::qcn::MAX_QUBITS).contains(&n.qcn.qubits), "qcn.qubits", n.qcn.qubits, "[2, 12]")?;
        // Remaining circuit constraints (layer count, wire) come from the
        // circuit builder.
        crate::qcn::QcnCircuit::new(n.qcn).map_err(|e| Error::Config(format!("qcn settings: {e}")))?;
        self.synth.validate().map_err(|e| Error::Config(format!("data settings: {e}")))?;
        Ok(())
    }
}
