//! Run configuration files.
//!
//! A run is described by one TOML file with these sections, every key
//! optional:
//!
//! ```toml
//! output_dir = "runs/adamct"   # where reports and checkpoints go
//! deterministic = false        # pin the worker pool to one thread
//!
//! [data]        # exactly one of `path` or `[data.synthetic]`
//! path = "ratings.csv"         # relative to the config file
//! delimiter = ","
//! has_header = false
//! columns = [0, 1, 2]          # user, item, timestamp field positions
//! max_malformed_fraction = 0.01
//! seed = 0                     # synthetic generator seed
//!
//! [data.synthetic]
//! num_users = 200
//! num_items = 50
//! pattern = "cyclic"           # cyclic | markov | uniform
//! min_len = 8
//! max_len = 20
//!
//! [model]       # num_items = 0 takes the catalog size from the data
//! d_model = 32
//! num_layers = 2
//! num_heads = 4
//! kernel_size = 3
//! reduction_ratio = 2
//! conv_activation = "gelu"
//! max_len = 50
//! hidden_dropout = 0.5
//! attn_dropout = 0.5
//! seatt_global = "sigmoid"
//! seatt_local = "sigmoid"
//! mixture = "adaptive"         # adaptive | sum | fixed:<weight of local branch>
//!
//! [train]
//! lr = 0.001
//! max_epochs = 200
//! patience = 20
//! batch_size = 128
//! seed = 42
//!
//! [eval]
//! num_negatives = 100
//! ks = [1, 5, 10]
//! seed = 2024
//!
//! [gradcheck]
//! batch_size = 4
//! tolerance = 1e-5
//!
//! [ablate]
//! grid = "mixture"             # mixture | seatt | components
//! seeds = [42]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use adamct::data::{IngestOptions, Pattern, SyntheticSpec};
use adamct::evaluate::EvalConfig;
use adamct::model::ModelConfig;
use adamct::train::TrainConfig;
use adamct::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::ablation::GridKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub delimiter: char,
    pub has_header: bool,
    pub columns: [usize; 3],
    pub max_malformed_fraction: f64,
    pub seed: u64,
    pub synthetic: Option<SyntheticSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let ingest = IngestOptions::default();
        Self {
            path: None,
            delimiter: ingest.delimiter,
            has_header: ingest.has_header,
            columns: ingest.columns,
            max_malformed_fraction: ingest.max_malformed_fraction,
            seed: 0,
            synthetic: None,
        }
    }
}

impl DataConfig {
    pub fn ingest_options(&self) -> IngestOptions {
        IngestOptions {
            delimiter: self.delimiter,
            has_header: self.has_header,
            max_malformed_fraction: self.max_malformed_fraction,
            columns: self.columns,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub batch_size: usize,
    pub tolerance: f64,
    pub seed: u64,
    /// Coordinates sampled per tensor; larger tensors are subsampled.
    pub max_coords: usize,
    /// Standard deviation of the noise that moves the check off the
    /// initialization point.
    pub noise_scale: f64,
    /// Minimum distance of every ReLU input from its kink.
    pub relu_margin: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            tolerance: 1e-5,
            seed: 0,
            max_coords: 100,
            noise_scale: 0.3,
            relu_margin: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub grid: GridKind,
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            grid: GridKind::Mixture,
            seeds: vec![42],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub deterministic: bool,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/adamct"),
            deterministic: false,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            gradcheck: GradcheckConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

fn prefixed(section: &str, r: Result<()>, out: &mut Vec<String>) {
    if let Err(Error::Config(msg)) = r {
        out.extend(msg.split("; ").map(|m| {
            let m = m.strip_prefix(&format!("{section}.")).unwrap_or(m);
            format!("{section}.{m}")
        }));
    }
}

impl RunConfig {
    /// Checks every section and reports all violations together.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let model = ModelConfig {
            num_items: self.model.num_items.max(1),
            ..self.model.clone()
        };
        prefixed("model", model.validate(), &mut bad);
        prefixed("train", self.train.validate(), &mut bad);
        prefixed("eval", self.eval.validate(), &mut bad);
        match (&self.data.path, &self.data.synthetic) {
            (Some(_), Some(_)) => bad.push("data: set either path or [data.synthetic], not both".into()),
            (None, None) => bad.push("data: set path or [data.synthetic]".into()),
            _ => {}
        }
        if !self.data.delimiter.is_ascii() {
            bad.push(format!("data.delimiter {:?} must be ASCII", self.data.delimiter));
        }
        if !(0.0..=1.0).contains(&self.data.max_malformed_fraction) {
            bad.push("data.max_malformed_fraction must lie in [0, 1]".into());
        }
        if let Some(s) = &self.data.synthetic {
            if s.num_items < 5 {
                bad.push(format!("data.synthetic.num_items ({}) must be at least 5", s.num_items));
            }
            if s.num_users == 0 {
                bad.push("data.synthetic.num_users must be positive".into());
            }
            if s.min_len < 5 || s.min_len > s.max_len {
                bad.push(format!(
                    "data.synthetic.min_len ({}) must be at least 5 and at most max_len ({})",
                    s.min_len, s.max_len
                ));
            }
            if s.pattern == Pattern::Markov && s.transition.is_none() {
                bad.push("data.synthetic.transition is required for the markov pattern".into());
            }
        }
        if self.gradcheck.batch_size == 0 {
            bad.push("gradcheck.batch_size must be positive".into());
        }
        if !(self.gradcheck.tolerance > 0.0) {
            bad.push("gradcheck.tolerance must be positive".into());
        }
        if self.gradcheck.max_coords == 0 {
            bad.push("gradcheck.max_coords must be positive".into());
        }
        if self.ablate.seeds.is_empty() {
            bad.push("ablate.seeds must list at least one seed".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Parses TOML text; errors name the offending key path.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(e.to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at `{path}`: {}", e.into_inner().message()))
        })
    }
}

/// Reads, defaults and validates a config file. A relative `data.path` is
/// resolved against the file's directory.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = RunConfig::from_toml(&text)?;
    if let Some(p) = &cfg.data.path {
        if p.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.data.path = Some(base.join(p));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::from_toml("[data]\npath = \"x.csv\"\n").unwrap();
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.eval, EvalConfig::default());
        assert_eq!(cfg.data.path, Some(PathBuf::from("x.csv")));
        cfg.validate().unwrap();
    }

    #[test]
    fn errors_carry_key_paths() {
        let Err(Error::Config(msg)) = RunConfig::from_toml("[model]\nd_modle = 3\n") else {
            panic!("unknown key accepted")
        };
        assert!(msg.contains("model") && msg.contains("d_modle"), "{msg}");
        let Err(Error::Config(msg)) = RunConfig::from_toml("[train]\nlr = \"fast\"\n") else {
            panic!("type error accepted")
        };
        assert!(msg.contains("train.lr"), "{msg}");
    }

    #[test]
    fn divisibility_is_reported_with_all_other_violations() {
        let cfg = RunConfig::from_toml("[data]\npath = \"x\"\n[model]\nd_model = 30\nnum_heads = 4\n[train]\nlr = -1.0\n")
            .unwrap();
        let Err(Error::Config(msg)) = cfg.validate() else {
            panic!("invalid config accepted")
        };
        assert!(msg.contains("model.d_model (30) must be divisible by num_heads (4)"), "{msg}");
        assert!(msg.contains("train.lr"), "{msg}");
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::default();
        cfg.data.synthetic = Some(SyntheticSpec::default());
        cfg.model.mixture = adamct::blocks::MixtureMode::Fixed(0.2);
        cfg.train.clip_norm = Some(5.0);
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
    }
}
