use std::fs;
use std::path::{Path, PathBuf};

use feddcg_core::inference::Aggregator;
use feddcg_core::prompt::DEFAULT_STUB_SEED;
use feddcg_core::protocol::{BankShape, BetaSchedule, LocalConfig, ProtocolConfig, StageSchedule};
use feddcg_core::NetShape;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a training run depends on. Together with the input stores it
/// determines every output byte.
///
/// Missing keys take their defaults, so a config file only needs the store
/// path. Relative paths are resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub rounds: usize,
    pub clients_per_domain: usize,
    pub classes_per_client: usize,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub tau: f64,
    pub tau_w: f64,
    pub mix: f64,
    pub participation: f64,
    pub sampling_rate: f64,
    pub beta_a: f64,
    pub beta_b: f64,
    pub normalized_momentum: bool,
    /// Consecutive stage-A rounds before switching to stage B.
    pub class_rounds: usize,
    pub domain_rounds: usize,
    pub prompt_len: usize,
    pub global_len: usize,
    pub domain_len: usize,
    pub hidden: usize,
    pub heads: usize,
    pub seed: u64,
    pub stub_seed: u64,
    pub aggregator: Aggregator,
    /// Overrides the global path's weight at inference; domain weights are
    /// rescaled to fill the rest.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_global_weight: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_store: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_store: Option<PathBuf>,
    /// Domain names to train on; empty means all.
    pub train_domains: Vec<String>,
    /// Class names to train on; empty means all.
    pub train_classes: Vec<String>,
    pub eval_domains: Vec<String>,
    pub eval_classes: Vec<String>,
    pub output_dir: PathBuf,
    /// Save a checkpoint every this many rounds; 0 keeps only the first and
    /// last.
    pub checkpoint_every: usize,
    pub log_timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            rounds: 250,
            clients_per_domain: 6,
            classes_per_client: 10,
            batch_size: 128,
            local_epochs: 1,
            base_lr: 1e-3,
            min_lr: 0.0,
            tau: 0.07,
            tau_w: 0.07,
            mix: 0.5,
            participation: 1.0,
            sampling_rate: 1.0,
            beta_a: 2.0,
            beta_b: 2.0,
            normalized_momentum: false,
            class_rounds: 1,
            domain_rounds: 1,
            prompt_len: 4,
            global_len: 4,
            domain_len: 4,
            hidden: 512,
            heads: 4,
            seed: 0,
            stub_seed: DEFAULT_STUB_SEED,
            aggregator: Aggregator::DomainGuided,
            fixed_global_weight: None,
            train_store: None,
            eval_store: None,
            train_domains: Vec::new(),
            train_classes: Vec::new(),
            eval_domains: Vec::new(),
            eval_classes: Vec::new(),
            output_dir: PathBuf::from("feddcg-run"),
            checkpoint_every: 0,
            log_timing: false,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| CliError::Usage(format!("bad config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file, resolving relative store and output paths
    /// against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_paths(base);
        Ok(config)
    }

    /// Canonical text form: every key, in declaration order.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.train_store.as_mut() {
            fix(p);
        }
        if let Some(p) = self.eval_store.as_mut() {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let positive = [
            ("clients_per_domain", self.clients_per_domain),
            ("classes_per_client", self.classes_per_client),
            ("batch_size", self.batch_size),
            ("prompt_len", self.prompt_len),
            ("global_len", self.global_len),
            ("domain_len", self.domain_len),
            ("hidden", self.hidden),
            ("heads", self.heads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CliError::Usage(format!("{name} must be positive")));
            }
        }
        if self.class_rounds + self.domain_rounds == 0 {
            return Err(CliError::Usage(
                "class_rounds and domain_rounds cannot both be 0".into(),
            ));
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("tau", self.tau),
            ("tau_w", self.tau_w),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(CliError::Usage(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.min_lr.is_finite() && (0.0..=self.base_lr).contains(&self.min_lr)) {
            return Err(CliError::Usage(format!(
                "min_lr must lie in [0, base_lr], got {}",
                self.min_lr
            )));
        }
        for (name, v) in [
            ("participation", self.participation),
            ("sampling_rate", self.sampling_rate),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(CliError::Usage(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.mix) {
            return Err(CliError::Usage(format!(
                "mix must lie in [0, 1], got {}",
                self.mix
            )));
        }
        if let Some(w) = self.fixed_global_weight {
            if !(0.0..=1.0).contains(&w) {
                return Err(CliError::Usage(format!(
                    "fixed_global_weight must lie in [0, 1], got {w}"
                )));
            }
        }
        self.beta().validate()?;
        Ok(())
    }

    pub fn beta(&self) -> BetaSchedule {
        BetaSchedule {
            a: self.beta_a,
            b: self.beta_b,
        }
    }

    pub fn net_shape(&self, token_dim: usize) -> NetShape {
        NetShape {
            prompt_len: self.prompt_len,
            hidden: self.hidden,
            heads: self.heads,
            token_dim,
        }
    }

    pub fn bank_shape(&self) -> BankShape {
        BankShape {
            global_len: self.global_len,
            domain_len: self.domain_len,
        }
    }

    pub fn schedule(&self) -> StageSchedule {
        StageSchedule {
            class_rounds: self.class_rounds,
            domain_rounds: self.domain_rounds,
        }
    }

    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            participation: self.participation,
            local: LocalConfig {
                epochs: self.local_epochs,
                batch_size: self.batch_size,
                tau: self.tau,
                mix: self.mix,
            },
            base_lr: self.base_lr,
            min_lr: self.min_lr,
            total_rounds: self.rounds,
            beta: self.beta(),
            normalized_momentum: self.normalized_momentum,
            schedule: self.schedule(),
            log_timing: self.log_timing,
        }
    }
}
