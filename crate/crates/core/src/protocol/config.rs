use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::HierarchySpec;
use crate::error::{Error, Result};
use crate::text::EncoderSpec;
use crate::vision::{Activation, ArchitectureSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Fedtsp,
    Fedproto,
    Fedtgp,
    Alignfed,
    Local,
    Fedavg,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Fedtsp,
        Method::Fedproto,
        Method::Fedtgp,
        Method::Alignfed,
        Method::Local,
        Method::Fedavg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Fedtsp => "fedtsp",
            Method::Fedproto => "fedproto",
            Method::Fedtgp => "fedtgp",
            Method::Alignfed => "alignfed",
            Method::Local => "local",
            Method::Fedavg => "fedavg",
        }
    }

    /// Whether clients upload class prototypes each round.
    pub fn shares_prototypes(self) -> bool {
        !matches!(self, Method::Local | Method::Fedavg)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = Method::ALL.iter().map(|m| m.as_str()).collect();
                Error::Config(format!(
                    "unknown method {s:?}; valid methods: {}",
                    valid.join(", ")
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One model per client, architectures may differ.
    #[default]
    Htfl,
    /// Participant models are averaged into a single global model every round.
    Gfl,
    /// `Gfl` followed by classifier-only fine-tuning on every client.
    Pfl,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Htfl => "htfl",
            Mode::Gfl => "gfl",
            Mode::Pfl => "pfl",
        }
    }

    pub fn averages_models(self) -> bool {
        !matches!(self, Mode::Htfl)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Hidden layout of one member of the client architecture family. The
/// output width is the shared `feature_dim`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HiddenLayout {
    pub hidden_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

fn default_family() -> Vec<HiddenLayout> {
    [vec![64], vec![32, 32], vec![128]]
        .into_iter()
        .map(|hidden_widths| HiddenLayout {
            hidden_widths,
            activation: Activation::Relu,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub method: Method,
    pub mode: Mode,
    pub seed: u64,
    pub num_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub server_epochs: usize,
    /// Weight of the FedTSP alignment term.
    pub lambda: f64,
    pub tau: f64,
    pub prefix_len: usize,
    pub prompts_per_class: usize,
    pub alpha: f64,
    pub participation_rate: f64,
    pub client_lr: f64,
    pub prompt_lr: f64,
    pub batch_size: usize,
    pub feature_dim: usize,
    pub architectures: Vec<HiddenLayout>,

    /// JSON dataset to load instead of generating the synthetic benchmark.
    pub dataset_path: Option<String>,
    pub synthetic: HierarchySpec,
    /// Pre-computed token embeddings replacing the toy tokenizer.
    pub embedding_path: Option<String>,
    pub encoder: EncoderSpec,
    pub global_test_per_class: usize,

    pub fedproto_lambda: f64,
    pub fedtgp_lambda: f64,
    pub fedtgp_margin: f64,
    pub fedtgp_server_lr: f64,
    pub alignfed_lambda_start: f64,
    pub alignfed_lambda_end: f64,

    pub pfl_finetune_epochs: usize,
    pub pfl_lr: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::Fedtsp,
            mode: Mode::Htfl,
            seed: 0,
            num_clients: 20,
            rounds: 50,
            local_epochs: 5,
            server_epochs: 20,
            lambda: 7.0,
            tau: 0.07,
            prefix_len: 10,
            prompts_per_class: 3,
            alpha: 0.5,
            participation_rate: 1.0,
            client_lr: 0.01,
            prompt_lr: 0.01,
            batch_size: 32,
            feature_dim: 32,
            architectures: default_family(),
            dataset_path: None,
            synthetic: HierarchySpec::default(),
            embedding_path: None,
            encoder: EncoderSpec::default(),
            global_test_per_class: 10,
            fedproto_lambda: 1.0,
            fedtgp_lambda: 1.0,
            fedtgp_margin: 100.0,
            fedtgp_server_lr: 0.01,
            alignfed_lambda_start: 20.0,
            alignfed_lambda_end: 2.0,
            pfl_finetune_epochs: 20,
            pfl_lr: 0.001,
        }
    }
}

fn require(ok: bool, message: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(message()))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let non_negative = |v: f64| v >= 0.0 && v.is_finite();

        require(self.num_clients >= 1, || "num_clients must be at least 1".into())?;
        require(
            self.participation_rate > 0.0 && self.participation_rate <= 1.0,
            || format!("participation_rate must lie in (0, 1], got {}", self.participation_rate),
        )?;
        require(
            self.participation_rate * self.num_clients as f64 >= 1.0,
            || {
                format!(
                    "participation_rate * num_clients must be at least 1 (got {} * {})",
                    self.participation_rate, self.num_clients
                )
            },
        )?;
        for (name, v) in [
            ("lambda", self.lambda),
            ("fedproto_lambda", self.fedproto_lambda),
            ("fedtgp_lambda", self.fedtgp_lambda),
            ("alignfed_lambda_start", self.alignfed_lambda_start),
            ("alignfed_lambda_end", self.alignfed_lambda_end),
            ("prompt_lr", self.prompt_lr),
            ("fedtgp_server_lr", self.fedtgp_server_lr),
        ] {
            require(non_negative(v), || format!("{name} must be non-negative, got {v}"))?;
        }
        for (name, v) in [
            ("tau", self.tau),
            ("alpha", self.alpha),
            ("client_lr", self.client_lr),
            ("fedtgp_margin", self.fedtgp_margin),
            ("pfl_lr", self.pfl_lr),
        ] {
            require(positive(v), || format!("{name} must be positive, got {v}"))?;
        }
        require(self.batch_size >= 1, || "batch_size must be at least 1".into())?;
        require(self.feature_dim >= 1, || "feature_dim must be at least 1".into())?;
        require(self.prompts_per_class >= 1, || {
            "prompts_per_class must be at least 1".into()
        })?;
        require(!self.architectures.is_empty(), || {
            "architectures must list at least one layout".into()
        })?;
        require(
            self.architectures.iter().all(|a| !a.hidden_widths.contains(&0)),
            || "hidden widths must be positive".into(),
        )?;
        if self.mode.averages_models() || self.method == Method::Fedavg {
            require(self.architectures.len() == 1, || {
                format!(
                    "mode {} with method {} averages models and needs a single architecture, got {}",
                    self.mode,
                    self.method,
                    self.architectures.len()
                )
            })?;
        }
        require(
            !(self.method == Method::Local && self.mode.averages_models()),
            || format!("method local cannot run in mode {}", self.mode),
        )?;
        Ok(())
    }

    /// The architecture family with the shared feature width filled in.
    pub fn architecture_family(&self) -> Vec<ArchitectureSpec> {
        self.architectures
            .iter()
            .map(|a| ArchitectureSpec {
                hidden_widths: a.hidden_widths.clone(),
                activation: a.activation,
                output_dim: self.feature_dim,
            })
            .collect()
    }

    /// Number of clients sampled per round.
    pub fn participants_per_round(&self) -> usize {
        participant_count(self.num_clients, self.participation_rate)
    }
}

pub(crate) fn participant_count(n: usize, rate: f64) -> usize {
    // Guard against 0.2 * 50 = 10.000000000000002 rounding up to 11.
    let raw = rate * n as f64;
    let nearest = raw.round();
    let k = if (raw - nearest).abs() < 1e-9 { nearest } else { raw.ceil() };
    (k as usize).clamp(1, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        cfg.validate().unwrap();
        assert_eq!(cfg.lambda, 7.0);
        assert_eq!((cfg.server_epochs, cfg.prefix_len, cfg.prompts_per_class), (20, 10, 3));
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"lamda": 1}"#).unwrap_err();
        assert!(err.to_string().contains("lamda"));
    }

    #[test]
    fn invariants() {
        let bad = |f: fn(&mut ExperimentConfig)| {
            let mut c = ExperimentConfig::default();
            f(&mut c);
            assert!(c.validate().unwrap_err().is_config());
        };
        bad(|c| c.participation_rate = 0.0);
        bad(|c| c.participation_rate = 1.5);
        bad(|c| {
            c.num_clients = 4;
            c.participation_rate = 0.2;
        });
        bad(|c| c.lambda = -1.0);
        bad(|c| c.tau = 0.0);
        bad(|c| c.mode = Mode::Gfl);
        bad(|c| {
            c.method = Method::Local;
            c.mode = Mode::Pfl;
            c.architectures.truncate(1);
        });
    }

    #[test]
    fn method_names() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        let err = "fedbogus".parse::<Method>().unwrap_err();
        assert!(err.to_string().contains("fedtsp, fedproto, fedtgp, alignfed, local, fedavg"));
    }

    #[test]
    fn participant_counts() {
        assert_eq!(participant_count(50, 0.2), 10);
        assert_eq!(participant_count(100, 0.2), 20);
        assert_eq!(participant_count(200, 0.2), 40);
        assert_eq!(participant_count(7, 1.0), 7);
        assert_eq!(participant_count(7, 0.5), 4);
    }
}
