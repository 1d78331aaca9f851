//! Flat `key = value` configuration: built-in defaults, overridden by a file, overridden by
//! command-line pairs. Unknown keys and bad values are collected and reported together.

use std::path::{Path, PathBuf};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::network::ModelSpec;
use crate::optim::{LrSchedule, Rule};
use crate::ranking::Metric;
use crate::scheduler::{ReprSchedule, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
    Idx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrKind {
    Fixed,
    Step,
    Cyclic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub train_size: usize,
    pub probe_size: usize,
    pub test_size: usize,
    pub augment: bool,
    pub synthetic: SyntheticSpec,
    pub task_seed: u64,
    pub data_seed: u64,

    pub layers: usize,
    pub filters: usize,
    pub kernel: usize,
    pub batch_norm: bool,
    pub conv_bias: bool,
    pub dropout: f64,

    pub optimizer: String,
    pub lr: f64,
    pub lr_schedule: LrKind,
    pub lr_milestones: Vec<(f64, f64)>,
    pub lr_period: f64,
    pub lr_amplitude: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_chunk: usize,
    pub seed: u64,

    pub s1: usize,
    pub s2: usize,
    pub n: usize,
    pub p_percent: f64,
    pub metric: Metric,
    pub reinit_scale: f64,
    pub reinit_next_layer_kernels: bool,
    pub staged_prune_batches: usize,
    pub ortho_loss_lambda: f64,

    pub output_dir: PathBuf,
    pub checkpoint_every: usize,
    pub resume: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub arms: Vec<String>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        let s = ReprSchedule::default();
        Config {
            dataset: DatasetKind::Synthetic,
            data_dir: PathBuf::from("data"),
            train_size: 10_000,
            probe_size: 500,
            test_size: 2_000,
            augment: false,
            synthetic: SyntheticSpec::default(),
            task_seed: 7,
            data_seed: 1,
            layers: 3,
            filters: 8,
            kernel: 3,
            batch_norm: false,
            conv_bias: true,
            dropout: 0.0,
            optimizer: "adam".into(),
            lr: 0.003,
            lr_schedule: LrKind::Fixed,
            lr_milestones: Vec::new(),
            lr_period: 10.0,
            lr_amplitude: 0.0,
            epochs: 100,
            batch_size: 32,
            eval_chunk: 500,
            seed: 1,
            s1: s.s1,
            s2: s.s2,
            n: s.n,
            p_percent: s.p_percent,
            metric: s.metric,
            reinit_scale: s.reinit_scale,
            reinit_next_layer_kernels: s.reinit_next_layer_kernels,
            staged_prune_batches: s.staged_prune_batches,
            ortho_loss_lambda: s.ortho_loss_lambda,
            output_dir: PathBuf::from("runs"),
            checkpoint_every: 0,
            resume: None,
            seeds: vec![1, 2, 3, 4, 5],
            arms: vec!["standard".into(), "repr:ortho".into(), "repr:random".into()],
            checkpoint: None,
        }
    }
}

/// Every key [`Config::set`] accepts.
pub const KEYS: &[&str] = &[
    "dataset", "data_dir", "train_size", "probe_size", "test_size", "augment", "image_size",
    "synth_noise", "synth_label_noise", "synth_distractors", "synth_motif_keep", "task_seed", "data_seed",
    "layers", "filters", "kernel", "batch_norm", "conv_bias", "dropout", "optimizer", "lr",
    "lr_schedule", "lr_milestones", "lr_period", "lr_amplitude", "epochs", "batch_size",
    "eval_chunk", "seed", "s1", "s2", "n", "p_percent", "metric", "reinit_scale",
    "reinit_next_layer_kernels", "staged_prune_batches", "ortho_loss_lambda", "output_dir",
    "checkpoint_every", "resume", "seeds", "arms", "checkpoint",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse '{v}'"))
}

fn flag(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("{key}: expected a boolean, got '{v}'")),
    }
}

impl Config {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let v = v.trim();
        match key {
            "dataset" => {
                self.dataset = match v {
                    "synthetic" => DatasetKind::Synthetic,
                    "cifar10" => DatasetKind::Cifar10,
                    "idx" => DatasetKind::Idx,
                    _ => return Err(format!("dataset: unknown kind '{v}' (synthetic, cifar10, idx)")),
                }
            }
            "data_dir" => self.data_dir = PathBuf::from(v),
            "train_size" => self.train_size = num(key, v)?,
            "probe_size" => self.probe_size = num(key, v)?,
            "test_size" => self.test_size = num(key, v)?,
            "augment" => self.augment = flag(key, v)?,
            "image_size" => {
                let s: usize = num(key, v)?;
                self.synthetic.height = s;
                self.synthetic.width = s;
            }
            "synth_noise" => self.synthetic.noise = num(key, v)?,
            "synth_label_noise" => self.synthetic.label_noise = num(key, v)?,
            "synth_distractors" => self.synthetic.distractors = num(key, v)?,
            "synth_motif_keep" => self.synthetic.motif_keep = num(key, v)?,
            "task_seed" => self.task_seed = num(key, v)?,
            "data_seed" => self.data_seed = num(key, v)?,
            "layers" => self.layers = num(key, v)?,
            "filters" => self.filters = num(key, v)?,
            "kernel" => self.kernel = num(key, v)?,
            "batch_norm" => self.batch_norm = flag(key, v)?,
            "conv_bias" => self.conv_bias = flag(key, v)?,
            "dropout" => self.dropout = num(key, v)?,
            "optimizer" => {
                if !["sgd", "momentum", "adam"].contains(&v) {
                    return Err(format!("optimizer: unknown rule '{v}' (sgd, momentum, adam)"));
                }
                self.optimizer = v.into();
            }
            "lr" => self.lr = num(key, v)?,
            "lr_schedule" => {
                self.lr_schedule = match v {
                    "fixed" => LrKind::Fixed,
                    "step" => LrKind::Step,
                    "cyclic" => LrKind::Cyclic,
                    _ => return Err(format!("lr_schedule: unknown kind '{v}' (fixed, step, cyclic)")),
                }
            }
            "lr_milestones" => {
                self.lr_milestones = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|pair| {
                        let (e, lr) = pair
                            .split_once(':')
                            .ok_or_else(|| format!("lr_milestones: expected epoch:lr, got '{pair}'"))?;
                        Ok((num(key, e.trim())?, num(key, lr.trim())?))
                    })
                    .collect::<std::result::Result<_, String>>()?
            }
            "lr_period" => self.lr_period = num(key, v)?,
            "lr_amplitude" => self.lr_amplitude = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "eval_chunk" => self.eval_chunk = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "s1" => self.s1 = num(key, v)?,
            "s2" => self.s2 = num(key, v)?,
            "n" => self.n = num(key, v)?,
            "p_percent" => self.p_percent = num(key, v)?,
            "metric" => self.metric = v.parse().map_err(|e: Error| format!("metric: {e}"))?,
            "reinit_scale" => self.reinit_scale = num(key, v)?,
            "reinit_next_layer_kernels" => self.reinit_next_layer_kernels = flag(key, v)?,
            "staged_prune_batches" => self.staged_prune_batches = num(key, v)?,
            "ortho_loss_lambda" => self.ortho_loss_lambda = num(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "resume" => self.resume = (!v.is_empty()).then(|| PathBuf::from(v)),
            "checkpoint" => self.checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "seeds" => {
                self.seeds = v
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<std::result::Result<_, String>>()?
            }
            "arms" => {
                self.arms = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                for a in &self.arms {
                    parse_arm(a)?;
                }
            }
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Parses `key = value` lines; blank lines and lines starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str, problems: &mut Vec<String>) {
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = self.set(k.trim(), v) {
                        problems.push(format!("{origin}:{}: {e}", no + 1));
                    }
                }
                None => problems.push(format!("{origin}:{}: expected key = value, got '{line}'", no + 1)),
            }
        }
    }

    /// Defaults, then the file at `path` (if any), then `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Config> {
        let mut cfg = Config::default();
        let mut problems = Vec::new();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            cfg.apply_text(&text, &p.display().to_string(), &mut problems);
        }
        for (k, v) in overrides {
            if let Err(e) = cfg.set(k, v) {
                problems.push(format!("--{k}: {e}"));
            }
        }
        problems.extend(cfg.problems());
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// Cross-field checks on the final values.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.train_size == 0 {
            p.push("train_size must be >= 1".into());
        }
        if self.test_size == 0 {
            p.push("test_size must be >= 1".into());
        }
        if self.metric.needs_probe() && self.n > 0 && self.probe_size == 0 {
            p.push(format!("metric '{}' needs probe_size >= 1", self.metric));
        }
        if self.seeds.is_empty() {
            p.push("seeds must list at least one seed".into());
        }
        if !(0.0..=1.0).contains(&self.synthetic.label_noise) {
            p.push("synth_label_noise must be in [0, 1]".into());
        }
        if self.lr_schedule == LrKind::Step && self.lr_milestones.is_empty() {
            p.push("lr_schedule = step needs lr_milestones".into());
        }
        if let Err(Error::Validation(v)) = self.train_config_unchecked().validate() {
            p.extend(v);
        }
        p
    }

    pub fn image_shape(&self) -> [usize; 3] {
        match self.dataset {
            DatasetKind::Synthetic => [self.synthetic.channels, self.synthetic.height, self.synthetic.width],
            DatasetKind::Cifar10 => [3, 32, 32],
            DatasetKind::Idx => [1, 28, 28],
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.dataset {
            DatasetKind::Synthetic => self.synthetic.classes,
            _ => 10,
        }
    }

    fn rule(&self) -> Rule {
        match self.optimizer.as_str() {
            "sgd" => Rule::Sgd,
            "momentum" => Rule::momentum(),
            _ => Rule::adam(),
        }
    }

    fn train_config_unchecked(&self) -> TrainConfig {
        let [c, h, w] = self.image_shape();
        TrainConfig {
            model: ModelSpec {
                input_channels: c,
                height: h,
                width: w,
                layers: self.layers,
                filters: self.filters,
                kernel: self.kernel,
                num_classes: self.num_classes(),
                batch_norm: self.batch_norm,
                conv_bias: self.conv_bias,
                dropout: self.dropout,
            },
            rule: self.rule(),
            lr: match self.lr_schedule {
                LrKind::Fixed => LrSchedule::Fixed(self.lr),
                LrKind::Step => LrSchedule::Step {
                    base: self.lr,
                    milestones: self.lr_milestones.clone(),
                },
                LrKind::Cyclic => LrSchedule::Cyclic {
                    period: self.lr_period,
                    amplitude: self.lr_amplitude,
                    start: self.lr,
                },
            },
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            augment: self.augment,
            eval_chunk: self.eval_chunk.max(1),
            schedule: ReprSchedule {
                s1: self.s1,
                s2: self.s2,
                n: self.n,
                p_percent: self.p_percent,
                metric: self.metric,
                reinit_scale: self.reinit_scale,
                reinit_next_layer_kernels: self.reinit_next_layer_kernels,
                staged_prune_batches: self.staged_prune_batches,
                ortho_loss_lambda: self.ortho_loss_lambda,
            },
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = self.train_config_unchecked();
        t.validate()?;
        Ok(t)
    }

    /// The configuration of one comparison arm (see [`parse_arm`]) with the given seed.
    pub fn for_arm(&self, arm: &str, seed: u64) -> Result<Config> {
        let mut c = self.clone();
        c.seed = seed;
        match parse_arm(arm).map_err(Error::Config)? {
            None => c.n = 0,
            Some(m) => c.metric = m,
        }
        Ok(c)
    }
}

/// `standard` is plain training; `repr:<metric>` is the cyclic schedule ranked by `metric`.
pub fn parse_arm(arm: &str) -> std::result::Result<Option<Metric>, String> {
    if arm == "standard" {
        return Ok(None);
    }
    match arm.strip_prefix("repr:") {
        Some(m) => m.parse().map(Some).map_err(|e: Error| format!("arm '{arm}': {e}")),
        None => Err(format!("unknown arm '{arm}' (standard or repr:<metric>)")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = Config::default();
        assert!(c.problems().is_empty(), "{:?}", c.problems());
        assert_eq!((c.s1, c.s2, c.n, c.p_percent), (20, 10, 3, 30.0));
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "# comment\nepochs = 40\nmetric = taylor\n\ns1=5\n").unwrap();
        let c = Config::load(Some(&p), &[("epochs".into(), "50".into())]).unwrap();
        assert_eq!(c.epochs, 50);
        assert_eq!(c.metric, Metric::Taylor);
        assert_eq!(c.s1, 5);
    }

    #[test]
    fn all_problems_reported_at_once() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.cfg");
        std::fs::write(&p, "epochz = 3\nlr = fast\nno equals sign\np_percent = 0\n").unwrap();
        match Config::load(Some(&p), &[("bogus".into(), "1".into())]) {
            Err(Error::Validation(v)) => {
                assert_eq!(v.len(), 5, "{v:?}");
                assert!(v[0].contains(":1: unknown key 'epochz'"));
                assert!(v[1].contains("lr: cannot parse 'fast'"));
                assert!(v[3].contains("--bogus"));
                assert!(v[4].contains("p_percent"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn every_listed_key_is_accepted() {
        for k in KEYS {
            let mut c = Config::default();
            let r = c.set(k, "1");
            assert!(r.as_ref().map_or_else(|e| !e.contains("unknown key"), |_| true), "{k}: {r:?}");
        }
    }

    #[test]
    fn arms() {
        assert_eq!(parse_arm("standard").unwrap(), None);
        assert_eq!(parse_arm("repr:ortho").unwrap(), Some(Metric::Ortho));
        assert!(parse_arm("repr:nope").is_err());
        let c = Config::default().for_arm("standard", 9).unwrap();
        assert_eq!((c.n, c.seed), (0, 9));
    }
}
