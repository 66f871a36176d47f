//! JSON experiment configuration, CLI overrides, and config hashing.

use mvocc_core::alignment::AlignKind;
use mvocc_core::autodiff::SimKind;
use mvocc_core::data::SynthSpec;
use mvocc_core::eval::LateFusion;
use mvocc_core::fusion::FusionKind;
use mvocc_core::methods::{MethodConfig, MethodId, ALL_METHODS};
use mvocc_core::rng::hash_seed;
use mvocc_core::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Protocol {
    /// Each qualified class in turn is the positive class.
    OneVsAll,
    /// The dataset's own +1/-1 labels (and split, if present) are used as-is.
    Direct,
}

/// One dataset to benchmark: either a directory with a manifest or an
/// inline synthetic generator spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
}

/// Optional hyperparameter overrides applied on top of each method's
/// defaults. Fusion and alignment fields only affect methods that have the
/// matching sub-spec; e.g. `rank` is ignored for everything but TF.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Overrides {
    pub bottleneck: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub dsv_pretrain_epochs: Option<usize>,
    /// TF fusion rank R.
    pub rank: Option<usize>,
    /// NN fusion hidden widths.
    pub nn_hidden: Option<Vec<usize>>,
    /// Alignment weight.
    pub alpha: Option<f64>,
    /// SIM margin m.
    pub margin: Option<f64>,
    /// SIM similarity: "dot" or "cosine".
    pub sim: Option<String>,
    /// DIS norm order (1 or 2).
    pub p: Option<u32>,
    /// DCCA covariance regularization.
    pub reg: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut MethodConfig) -> Result<()> {
        if let Some(x) = self.bottleneck {
            cfg.bottleneck = x;
        }
        if let Some(h) = &self.hidden {
            cfg.hidden = Some(h.clone());
        }
        if let Some(x) = self.lr {
            cfg.lr = x;
        }
        if let Some(x) = self.weight_decay {
            cfg.weight_decay = x;
        }
        if let Some(x) = self.epochs {
            cfg.epochs = x;
        }
        if let Some(x) = self.batch {
            cfg.batch = x;
        }
        if let Some(x) = self.dsv_pretrain_epochs {
            cfg.dsv_pretrain_epochs = x;
        }
        if let Some(f) = &mut cfg.fusion {
            if f.kind == FusionKind::Tf {
                if let Some(r) = self.rank {
                    f.rank = r;
                }
            }
            if f.kind == FusionKind::Nn {
                if let Some(h) = &self.nn_hidden {
                    f.nn_hidden = h.clone();
                }
            }
        }
        if let Some(a) = &mut cfg.align {
            if let Some(x) = self.alpha {
                a.alpha = x;
            }
            if let Some(x) = self.reg {
                a.reg = x;
            }
            if a.kind == AlignKind::Dis {
                if let Some(x) = self.p {
                    a.p = x;
                }
            }
            if a.kind == AlignKind::Sim {
                if let Some(x) = self.margin {
                    a.margin = x;
                }
                if let Some(s) = &self.sim {
                    a.sim = match s.to_ascii_lowercase().as_str() {
                        "dot" => SimKind::Dot,
                        "cosine" => SimKind::Cosine,
                        other => {
                            return Err(Error::Config(format!(
                                "unknown similarity '{other}' (choose dot or cosine)"
                            )))
                        }
                    };
                }
            }
        }
        cfg.validate()
    }
}

fn default_protocol() -> String {
    "one-vs-all".into()
}
fn default_min_train() -> usize {
    300
}
fn default_max_classes() -> usize {
    10
}
fn default_ratio() -> f64 {
    0.7
}
fn default_repeats() -> usize {
    10
}
fn default_late_fusion() -> String {
    "AVG".into()
}

/// Raw experiment file. Either `dataset`/`synth` (single source) or
/// `datasets` (benchmark list) must be present.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub datasets: Vec<DatasetEntry>,
    /// Method names; empty means all eleven.
    #[serde(default)]
    pub methods: Vec<String>,
    /// "one-vs-all" or "direct".
    #[serde(default = "default_protocol")]
    pub protocol: String,
    /// Positive-class override for one-vs-all (else qualified classes).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<i64>>,
    /// One-vs-all qualification: require more than this many training rows.
    #[serde(default = "default_min_train")]
    pub min_train: usize,
    /// One-vs-all: at most this many qualified classes.
    #[serde(default = "default_max_classes")]
    pub max_classes: usize,
    /// Fraction of the positive class drawn for training.
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// "AVG", "MIN", or "MAX".
    #[serde(default = "default_late_fusion")]
    pub late_fusion: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub overrides: Overrides,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Validated configuration with every default filled in. Serialized form is
/// the hashing canonical form.
#[derive(Debug, Clone, Serialize)]
pub struct Resolved {
    pub datasets: Vec<DatasetEntry>,
    pub methods: Vec<MethodId>,
    pub protocol: Protocol,
    pub classes: Option<Vec<i64>>,
    pub min_train: usize,
    pub max_classes: usize,
    pub ratio: f64,
    pub repeats: usize,
    pub late_fusion: LateFusion,
    pub seed: u64,
    pub out: PathBuf,
    pub overrides: Overrides,
}

pub fn parse_method(s: &str) -> Result<MethodId> {
    MethodId::parse(s).map_err(|_| {
        let names: Vec<&str> = ALL_METHODS.iter().map(|m| m.name()).collect();
        Error::Config(format!(
            "unknown method '{s}' (choose from {})",
            names.join(", ")
        ))
    })
}

pub fn resolve(cfg: &ExperimentConfig) -> Result<Resolved> {
    let mut datasets = cfg.datasets.clone();
    if cfg.dataset.is_some() || cfg.synth.is_some() {
        if !datasets.is_empty() {
            return Err(Error::Config(
                "give either dataset/synth or a datasets list, not both".into(),
            ));
        }
        datasets.push(DatasetEntry {
            name: None,
            path: cfg.dataset.clone(),
            synth: cfg.synth.clone(),
        });
    }
    if datasets.is_empty() {
        return Err(Error::Config(
            "no data source: set dataset, synth, or datasets".into(),
        ));
    }
    for (i, d) in datasets.iter().enumerate() {
        match (&d.path, &d.synth) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(format!(
                    "dataset entry {i}: path and synth are mutually exclusive"
                )))
            }
            (None, None) => {
                return Err(Error::Config(format!(
                    "dataset entry {i}: needs path or synth"
                )))
            }
            _ => {}
        }
    }
    let methods = if cfg.methods.is_empty() {
        ALL_METHODS.to_vec()
    } else {
        let mut out = Vec::with_capacity(cfg.methods.len());
        for name in &cfg.methods {
            let m = parse_method(name)?;
            if out.contains(&m) {
                return Err(Error::Config(format!("method {m} listed twice")));
            }
            out.push(m);
        }
        out
    };
    let protocol = match cfg.protocol.as_str() {
        "one-vs-all" => Protocol::OneVsAll,
        "direct" => Protocol::Direct,
        other => {
            return Err(Error::Config(format!(
                "unknown protocol '{other}' (choose one-vs-all or direct)"
            )))
        }
    };
    if cfg.repeats == 0 {
        return Err(Error::Config("repeats must be >= 1".into()));
    }
    if !(cfg.ratio > 0.0 && cfg.ratio < 1.0) {
        return Err(Error::Config(format!(
            "ratio must be in (0, 1), got {}",
            cfg.ratio
        )));
    }
    if let Some(cs) = &cfg.classes {
        if cs.is_empty() {
            return Err(Error::Config("classes override must be non-empty".into()));
        }
    }
    let late_fusion = LateFusion::parse(&cfg.late_fusion)?;
    Ok(Resolved {
        datasets,
        methods,
        protocol,
        classes: cfg.classes.clone(),
        min_train: cfg.min_train,
        max_classes: cfg.max_classes,
        ratio: cfg.ratio,
        repeats: cfg.repeats,
        late_fusion,
        seed: cfg.seed,
        out: cfg.out.clone().unwrap_or_else(|| PathBuf::from("out")),
        overrides: cfg.overrides.clone(),
    })
}

/// Stable hash of the canonical serialized form; identical configs hash
/// identically on any machine.
pub fn config_hash(resolved: &Resolved) -> String {
    let json = serde_json::to_string(resolved).expect("config serializes");
    format!("{:016x}", hash_seed(&[json.as_bytes()]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> ExperimentConfig {
        serde_json::from_str(r#"{"dataset": "some/dir"}"#).unwrap()
    }

    #[test]
    fn defaults_fill_in() {
        let r = resolve(&minimal()).unwrap();
        assert_eq!(r.methods.len(), 11);
        assert_eq!(r.repeats, 10);
        assert_eq!(r.ratio, 0.7);
        assert_eq!(r.min_train, 300);
        assert_eq!(r.max_classes, 10);
        assert_eq!(r.late_fusion, LateFusion::Avg);
        assert_eq!(r.protocol, Protocol::OneVsAll);
    }

    #[test]
    fn method_errors_enumerate_choices() {
        let mut cfg = minimal();
        cfg.methods = vec!["BOGUS".into()];
        let err = resolve(&cfg).unwrap_err().to_string();
        assert!(err.contains("SUM") && err.contains("SPRD"), "{err}");
    }

    #[test]
    fn source_exclusivity() {
        let mut cfg = minimal();
        cfg.datasets = vec![DatasetEntry {
            name: None,
            path: Some("x".into()),
            synth: None,
        }];
        assert!(resolve(&cfg).is_err());
        cfg.dataset = None;
        assert!(resolve(&cfg).is_ok());
        cfg.datasets[0].path = None;
        assert!(resolve(&cfg).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let r: std::result::Result<ExperimentConfig, _> =
            serde_json::from_str(r#"{"dataset": "d", "reppeats": 3}"#);
        assert!(r.is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = resolve(&minimal()).unwrap();
        let b = resolve(&minimal()).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        let mut cfg = minimal();
        cfg.repeats = 3;
        let c = resolve(&cfg).unwrap();
        assert_ne!(config_hash(&a), config_hash(&c));
    }

    #[test]
    fn overrides_respect_method_kind() {
        let ov = Overrides {
            rank: Some(8),
            alpha: Some(0.5),
            margin: Some(3.0),
            ..Overrides::default()
        };
        let mut tf = MethodConfig::new(MethodId::Tf, vec![4, 4]);
        ov.apply(&mut tf).unwrap();
        assert_eq!(tf.fusion.as_ref().unwrap().rank, 8);
        let mut dis = MethodConfig::new(MethodId::Dis, vec![4, 4]);
        ov.apply(&mut dis).unwrap();
        assert_eq!(dis.align.as_ref().unwrap().alpha, 0.5);
        assert_eq!(dis.align.as_ref().unwrap().margin, 1.0);
        let mut sim = MethodConfig::new(MethodId::Sim, vec![4, 4]);
        ov.apply(&mut sim).unwrap();
        assert_eq!(sim.align.as_ref().unwrap().margin, 3.0);
        let ov = Overrides {
            sim: Some("banana".into()),
            ..Overrides::default()
        };
        let mut sim = MethodConfig::new(MethodId::Sim, vec![4, 4]);
        assert!(ov.apply(&mut sim).is_err());
    }
}
