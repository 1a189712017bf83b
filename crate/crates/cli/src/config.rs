//! Line-oriented experiment configuration: `key = value` per line, dotted
//! keys for nesting, `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fedfusion_core::data::SynthConfig;
use fedfusion_core::federation::{CodecMode, FederationConfig, Keep, OptimizerConfig, OptimizerKind};
use fedfusion_core::model::ModelConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Path(PathBuf),
    Synth(SynthConfig),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: usize,
    pub clients: usize,
    pub selected: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_interval: usize,
    pub l2_coeff: f64,
    /// `None` sends raw f32 features.
    pub svd_k: Option<usize>,
    pub tau: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub beta2: f64,
    pub eps: f64,
    pub branch_channels: usize,
    pub upsample_channels: usize,
    pub keep: Keep,
    pub label_skew: f64,
    pub gradient_report: bool,
    pub single_thread: bool,
    pub palette_seed: u64,
    pub k_list: Vec<usize>,
    pub dataset: DatasetSource,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            rounds: 300,
            clients: 16,
            selected: 16,
            local_epochs: 1,
            batch_size: 64,
            lr: 1e-3,
            lr_decay_factor: 0.5,
            lr_decay_interval: 60,
            l2_coeff: 1e-4,
            svd_k: Some(2),
            tau: 0.5,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            branch_channels: 32,
            upsample_channels: 64,
            keep: Keep::Both,
            label_skew: 0.0,
            gradient_report: false,
            single_thread: false,
            palette_seed: 0,
            k_list: vec![1, 2, 3, 4],
            dataset: DatasetSource::Synth(SynthConfig::default()),
            output_dir: PathBuf::from("out"),
        }
    }
}

fn err(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {msg}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| err(key, format!("cannot parse {v:?}: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, CliError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(err(key, format!("expected true or false, got {v:?}"))),
    }
}

fn synth_mut(c: &mut ExperimentConfig) -> &mut SynthConfig {
    if !matches!(c.dataset, DatasetSource::Synth(_)) {
        c.dataset = DatasetSource::Synth(SynthConfig::default());
    }
    match &mut c.dataset {
        DatasetSource::Synth(s) => s,
        DatasetSource::Path(_) => unreachable!(),
    }
}

impl ExperimentConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "rounds" => self.rounds = parse_num(key, v)?,
            "clients" => self.clients = parse_num(key, v)?,
            "selected" => self.selected = parse_num(key, v)?,
            "local_epochs" => self.local_epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "lr_decay.factor" => self.lr_decay_factor = parse_num(key, v)?,
            "lr_decay.interval" => self.lr_decay_interval = parse_num(key, v)?,
            "l2_coeff" => self.l2_coeff = parse_num(key, v)?,
            "svd_k" => self.svd_k = if v == "raw" { None } else { Some(parse_num(key, v)?) },
            "tau" => self.tau = parse_num(key, v)?,
            "optimizer.kind" => {
                self.optimizer = match v {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    _ => return Err(err(key, format!("expected adam or sgd, got {v:?}"))),
                }
            }
            "optimizer.momentum" => self.momentum = parse_num(key, v)?,
            "optimizer.beta2" => self.beta2 = parse_num(key, v)?,
            "optimizer.eps" => self.eps = parse_num(key, v)?,
            "model.branch_channels" => self.branch_channels = parse_num(key, v)?,
            "model.upsample_channels" => self.upsample_channels = parse_num(key, v)?,
            "keep" => {
                self.keep = match v {
                    "m1" => Keep::M1,
                    "m2" => Keep::M2,
                    "both" => Keep::Both,
                    _ => return Err(err(key, format!("expected m1, m2 or both, got {v:?}"))),
                }
            }
            "label_skew" => self.label_skew = parse_num(key, v)?,
            "gradient_report" => self.gradient_report = parse_bool(key, v)?,
            "single_thread" => self.single_thread = parse_bool(key, v)?,
            "palette_seed" => self.palette_seed = parse_num(key, v)?,
            "k_list" => {
                self.k_list = v
                    .split(',')
                    .map(|s| parse_num(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "dataset.path" => self.dataset = DatasetSource::Path(PathBuf::from(v)),
            "dataset.synth.seed" => synth_mut(self).seed = parse_num(key, v)?,
            "dataset.synth.height" => synth_mut(self).height = parse_num(key, v)?,
            "dataset.synth.width" => synth_mut(self).width = parse_num(key, v)?,
            "dataset.synth.classes" => synth_mut(self).classes = parse_num(key, v)?,
            "dataset.synth.bands1" => synth_mut(self).bands1 = parse_num(key, v)?,
            "dataset.synth.bands2" => synth_mut(self).bands2 = parse_num(key, v)?,
            "dataset.synth.noise" => synth_mut(self).noise = parse_num(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(CliError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self, CliError> {
        let mut c = ExperimentConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            c.set(k.trim(), v)?;
        }
        Ok(c)
    }

    /// Reads `path` (when given), applies `overrides` in order and checks
    /// every range.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut c = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                ExperimentConfig::parse_str(&text)?
            }
            None => ExperimentConfig::default(),
        };
        for (k, v) in overrides {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Canonical text form; parsing it yields the same configuration.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("rounds", self.rounds.to_string());
        kv("clients", self.clients.to_string());
        kv("selected", self.selected.to_string());
        kv("local_epochs", self.local_epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("lr_decay.factor", self.lr_decay_factor.to_string());
        kv("lr_decay.interval", self.lr_decay_interval.to_string());
        kv("l2_coeff", self.l2_coeff.to_string());
        kv("svd_k", self.svd_k.map_or("raw".into(), |k| k.to_string()));
        kv("tau", self.tau.to_string());
        kv(
            "optimizer.kind",
            match self.optimizer {
                OptimizerKind::Adam => "adam",
                OptimizerKind::Sgd => "sgd",
            }
            .into(),
        );
        kv("optimizer.momentum", self.momentum.to_string());
        kv("optimizer.beta2", self.beta2.to_string());
        kv("optimizer.eps", self.eps.to_string());
        kv("model.branch_channels", self.branch_channels.to_string());
        kv("model.upsample_channels", self.upsample_channels.to_string());
        kv(
            "keep",
            match self.keep {
                Keep::M1 => "m1",
                Keep::M2 => "m2",
                Keep::Both => "both",
            }
            .into(),
        );
        kv("label_skew", self.label_skew.to_string());
        kv("gradient_report", self.gradient_report.to_string());
        kv("single_thread", self.single_thread.to_string());
        kv("palette_seed", self.palette_seed.to_string());
        kv(
            "k_list",
            self.k_list.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","),
        );
        match &self.dataset {
            DatasetSource::Path(p) => kv("dataset.path", p.display().to_string()),
            DatasetSource::Synth(sc) => {
                kv("dataset.synth.seed", sc.seed.to_string());
                kv("dataset.synth.height", sc.height.to_string());
                kv("dataset.synth.width", sc.width.to_string());
                kv("dataset.synth.classes", sc.classes.to_string());
                kv("dataset.synth.bands1", sc.bands1.to_string());
                kv("dataset.synth.bands2", sc.bands2.to_string());
                kv("dataset.synth.noise", sc.noise.to_string());
            }
        }
        kv("output_dir", self.output_dir.display().to_string());
        s
    }

    /// Architecture for a dataset with the given channel counts.
    pub fn model_config(&self, in_channels: [usize; 2], classes: usize) -> ModelConfig {
        ModelConfig {
            branch_channels: self.branch_channels,
            upsample_channels: self.upsample_channels,
            l2_coeff: self.l2_coeff,
            ..ModelConfig::new(in_channels, classes)
        }
    }

    pub fn codec(&self) -> CodecMode {
        self.svd_k.map_or(CodecMode::Raw, |k| CodecMode::Svd { k })
    }

    pub fn federation(&self) -> FederationConfig {
        FederationConfig {
            seed: self.seed,
            rounds: self.rounds,
            clients: self.clients,
            selected: self.selected,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_decay_factor: self.lr_decay_factor,
            lr_decay_interval: self.lr_decay_interval,
            optimizer: OptimizerConfig {
                kind: self.optimizer,
                momentum: self.momentum,
                beta2: self.beta2,
                eps: self.eps,
            },
            codec: self.codec(),
            keep: self.keep,
            label_skew: self.label_skew,
            gradient_report: self.gradient_report,
            parallel: !self.single_thread,
            capture_wire: false,
        }
    }

    /// Range checks that do not need the dataset.
    pub fn validate(&self) -> Result<(), CliError> {
        let positive = |k: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(err(k, format!("must be positive, got {v}")))
            }
        };
        positive("lr", self.lr)?;
        positive("optimizer.eps", self.eps)?;
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(err("lr_decay.factor", format!("must lie in (0, 1], got {}", self.lr_decay_factor)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(err("tau", format!("must lie in (0, 1), got {}", self.tau)));
        }
        if !(self.l2_coeff >= 0.0 && self.l2_coeff.is_finite()) {
            return Err(err("l2_coeff", "must be finite and nonnegative"));
        }
        for (k, v) in [("optimizer.momentum", self.momentum), ("optimizer.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(err(k, format!("must lie in [0, 1), got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.label_skew) {
            return Err(err("label_skew", format!("must lie in [0, 1], got {}", self.label_skew)));
        }
        if self.clients < 2 || !self.clients.is_multiple_of(2) {
            return Err(err("clients", format!("must be even and at least 2, got {}", self.clients)));
        }
        if self.selected == 0 || self.selected > self.clients {
            return Err(err("selected", format!("must lie in [1, {}], got {}", self.clients, self.selected)));
        }
        if self.batch_size == 0 {
            return Err(err("batch_size", "must be positive"));
        }
        if self.rounds > u16::MAX as usize + 1 {
            return Err(err("rounds", "must fit the 16-bit round field"));
        }
        if self.branch_channels == 0 || self.upsample_channels == 0 {
            return Err(err("model", "channel counts must be positive"));
        }
        let max_rank = ModelConfig {
            upsample_channels: self.upsample_channels,
            ..ModelConfig::new([1, 1], 2)
        }
        .max_rank();
        if let Some(k) = self.svd_k {
            check_k("svd_k", k, max_rank)?;
        }
        for &k in &self.k_list {
            check_k("k_list", k, max_rank)?;
        }
        if let DatasetSource::Synth(s) = &self.dataset {
            if s.classes < 2 || s.height < 7 || s.width < 7 || s.bands1 == 0 || s.bands2 == 0 {
                return Err(err("dataset.synth", "needs classes >= 2, sides >= 7 and positive band counts"));
            }
            if !(s.noise >= 0.0 && s.noise.is_finite()) {
                return Err(err("dataset.synth.noise", "must be finite and nonnegative"));
            }
        }
        Ok(())
    }
}

fn check_k(key: &str, k: usize, max_rank: usize) -> Result<(), CliError> {
    if k == 0 || k > max_rank {
        return Err(err(key, format!("{k} out of range, need 1 ≤ K ≤ min(P,Q)={max_rank}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::parse_str("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!((c.lr, c.lr_decay_factor, c.lr_decay_interval), (1e-3, 0.5, 60));
        assert_eq!((c.rounds, c.batch_size, c.momentum, c.clients, c.svd_k), (300, 64, 0.9, 16, Some(2)));
    }

    #[test]
    fn overrides_beat_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("exp.cfg");
        std::fs::write(&p, "# comment\nlr = 0.01\ndataset.synth.height = 32\n").unwrap();
        let c = ExperimentConfig::load(Some(&p), &[("lr".into(), "0.002".into())]).unwrap();
        assert_eq!(c.lr, 0.002);
        match c.dataset {
            DatasetSource::Synth(s) => assert_eq!(s.height, 32),
            DatasetSource::Path(_) => panic!("expected synthetic dataset"),
        }
    }

    #[test]
    fn svd_k_nine_cites_the_bound() {
        let e = ExperimentConfig::load(None, &[("svd_k".into(), "9".into())]).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("svd_k") && msg.contains("K ≤ min(P,Q)=4"), "{msg}");
    }

    #[test]
    fn unknown_key_and_missing_file() {
        let e = ExperimentConfig::parse_str("learning_rate = 1").unwrap_err();
        assert!(e.to_string().contains("learning_rate"));
        assert!(ExperimentConfig::load(Some(Path::new("/nonexistent/x.cfg")), &[]).is_err());
        assert!(ExperimentConfig::parse_str("lr = fast").unwrap_err().to_string().contains("lr"));
    }

    #[test]
    fn dump_round_trips() {
        let mut c = ExperimentConfig::default();
        c.lr = 0.1 + 0.2;
        c.svd_k = None;
        c.keep = Keep::M2;
        c.k_list = vec![1, 3];
        c.eps = 1e-12;
        assert_eq!(ExperimentConfig::parse_str(&c.dump()).unwrap(), c);
        c.dataset = DatasetSource::Path("data/scene.mmrs".into());
        assert_eq!(ExperimentConfig::parse_str(&c.dump()).unwrap(), c);
    }
}
