//! Experiment configuration (JSON, schema `lp2s-config/1`) and CLI overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lp2s::lp_model::LpInstance;
use lp2s::{Prior, Weight};
use serde::{Deserialize, Serialize};

pub const SCHEMA: &str = "lp2s-config/1";

/// `delta0` as a number or `"auto"` (tightest feasible value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "serde_json::Value", into = "serde_json::Value")]
pub enum Delta0 {
    Auto,
    Value(f64),
}

impl TryFrom<serde_json::Value> for Delta0 {
    type Error = String;

    fn try_from(v: serde_json::Value) -> std::result::Result<Self, String> {
        match v {
            serde_json::Value::String(s) if s == "auto" => Ok(Delta0::Auto),
            serde_json::Value::Number(n) => n.as_f64().map(Delta0::Value).ok_or_else(|| "delta0 is not a float".into()),
            other => Err(format!("delta0 must be a number or \"auto\", got {other}")),
        }
    }
}

impl From<Delta0> for serde_json::Value {
    fn from(d: Delta0) -> Self {
        match d {
            Delta0::Auto => "auto".into(),
            Delta0::Value(x) => x.into(),
        }
    }
}

impl std::str::FromStr for Delta0 {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Delta0::Auto);
        }
        Ok(Delta0::Value(s.parse().with_context(|| format!("delta0 must be a number or auto, got {s:?}"))?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Variant {
    Pac { mu0: f64 },
    Srm,
    Fc,
}

impl Variant {
    pub fn label(&self) -> &'static str {
        match self {
            Variant::Pac { .. } => "pac",
            Variant::Srm => "srm",
            Variant::Fc => "fc",
        }
    }
}

/// A policy to run. Budgets left out are filled in from the instance, or from
/// the LP2S mean cost when `budget_match` is set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyConfig {
    Lp2s,
    Uniform {
        #[serde(default)]
        rounds: Option<usize>,
    },
    BatchRacing {
        #[serde(default = "default_racing_delta")]
        delta: f64,
        #[serde(default)]
        max_batches: Option<usize>,
    },
    Tse {
        #[serde(default = "default_tse_q")]
        q: f64,
        #[serde(default)]
        budget: Option<u64>,
    },
    BatchedThompson {
        #[serde(default = "default_ts_alpha")]
        alpha: f64,
        #[serde(default)]
        budget: Option<u64>,
    },
}

impl PolicyConfig {
    pub fn label(&self) -> &'static str {
        match self {
            PolicyConfig::Lp2s => "lp2s",
            PolicyConfig::Uniform { .. } => "uniform",
            PolicyConfig::BatchRacing { .. } => "batch_racing",
            PolicyConfig::Tse { .. } => "tse",
            PolicyConfig::BatchedThompson { .. } => "batched_thompson",
        }
    }
}

fn default_racing_delta() -> f64 {
    0.05
}
fn default_tse_q() -> f64 {
    0.5
}
fn default_ts_alpha() -> f64 {
    2.0
}

/// Optional bound rows for `simulate`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checks {
    /// SRM regret bound against the LP2S mean simple regret.
    #[serde(default)]
    pub thm4: bool,
    /// Expected total cost at the LP cost bound against the LP2S mean pulls.
    #[serde(default)]
    pub cost: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema")]
    pub schema: String,
    #[serde(default = "default_prior")]
    pub prior: Prior,
    #[serde(rename = "K", default = "default_k")]
    pub arms: usize,
    #[serde(rename = "R", default = "default_r")]
    pub rounds: usize,
    #[serde(rename = "L", default = "default_l")]
    pub survivors: f64,
    #[serde(default = "default_delta0")]
    pub delta0: Delta0,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_policies")]
    pub policies: Vec<PolicyConfig>,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_true")]
    pub budget_match: bool,
    #[serde(default)]
    pub checks: Checks,
    /// Tail exponent for the prior regularity diagnostic.
    #[serde(default = "default_tail_alpha")]
    pub tail_alpha: f64,
    #[serde(default)]
    pub outputs: Outputs,
}

fn default_schema() -> String {
    SCHEMA.into()
}
fn default_prior() -> Prior {
    Prior::Beta { a: 1.0, b: 1.0 }
}
fn default_k() -> usize {
    200
}
fn default_r() -> usize {
    40
}
fn default_l() -> f64 {
    9.0
}
fn default_delta0() -> Delta0 {
    Delta0::Auto
}
fn default_variant() -> Variant {
    Variant::Pac { mu0: 0.7 }
}
fn default_policies() -> Vec<PolicyConfig> {
    vec![PolicyConfig::Lp2s, PolicyConfig::Uniform { rounds: None }]
}
fn default_episodes() -> usize {
    1000
}
fn default_true() -> bool {
    true
}
fn default_tail_alpha() -> f64 {
    1.0
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

/// Field overrides from the command line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub arms: Option<usize>,
    pub rounds: Option<usize>,
    pub survivors: Option<f64>,
    pub delta0: Option<Delta0>,
    pub mu0: Option<f64>,
    pub variant: Option<String>,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub seed: Option<u64>,
    pub episodes: Option<usize>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        if cfg.schema != SCHEMA {
            bail!("unsupported config schema {:?} (expected {SCHEMA:?})", cfg.schema);
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(k) = o.arms {
            self.arms = k;
        }
        if let Some(r) = o.rounds {
            self.rounds = r;
        }
        if let Some(l) = o.survivors {
            self.survivors = l;
        }
        if let Some(d) = o.delta0 {
            self.delta0 = d;
        }
        if let Some(v) = &o.variant {
            let mu0 = match self.variant {
                Variant::Pac { mu0 } => mu0,
                _ => 0.7,
            };
            self.variant = match v.as_str() {
                "pac" => Variant::Pac { mu0 },
                "srm" => Variant::Srm,
                "fc" => Variant::Fc,
                other => bail!("unknown variant {other:?} (pac, srm, fc)"),
            };
        }
        if let Some(mu0) = o.mu0 {
            match &mut self.variant {
                Variant::Pac { mu0: m } => *m = mu0,
                _ => bail!("--mu0 applies to the pac variant only"),
            }
        }
        if o.a.is_some() || o.b.is_some() {
            let (a0, b0) = match self.prior {
                Prior::Beta { a, b } => (a, b),
                _ => (1.0, 1.0),
            };
            self.prior = Prior::Beta { a: o.a.unwrap_or(a0), b: o.b.unwrap_or(b0) };
        }
        if let Some(s) = o.seed {
            self.master_seed = s;
        }
        if let Some(n) = o.episodes {
            self.episodes = n;
        }
        if let Some(dir) = &o.out {
            self.outputs.dir = Some(dir.clone());
        }
        Ok(())
    }

    pub fn weight(&self) -> Weight {
        match self.variant {
            Variant::Pac { mu0 } => Weight::Pac { mu0, rounds: self.rounds },
            Variant::Srm => Weight::Srm { arms: self.arms, rounds: self.rounds },
            Variant::Fc => Weight::Fc { arms: self.arms, rounds: self.rounds },
        }
    }

    /// The LP instance with a placeholder `delta0` of 1 when it is `auto`.
    pub fn instance(&self) -> Result<LpInstance> {
        let d = match self.delta0 {
            Delta0::Value(d) => d,
            Delta0::Auto => 1.0,
        };
        Ok(LpInstance::new(self.weight(), self.prior.clone(), self.arms, self.survivors, d)?)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.outputs.dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_desk_preset() {
        let c = ExperimentConfig::default();
        assert_eq!((c.arms, c.rounds, c.survivors), (200, 40, 9.0));
        assert_eq!(c.delta0, Delta0::Auto);
        assert!(c.instance().is_ok());
    }

    #[test]
    fn parses_full_config() {
        let c = ExperimentConfig::parse(
            r#"{"schema":"lp2s-config/1","prior":{"kind":"beta","a":5,"b":1},"K":50,"R":10,"L":3,
                "delta0":0.2,"variant":{"kind":"pac","mu0":0.8},
                "policies":[{"kind":"lp2s"},{"kind":"tse"},{"kind":"batch_racing","delta":0.1}],
                "episodes":7,"master_seed":9,"budget_match":false}"#,
        )
        .unwrap();
        assert_eq!(c.delta0, Delta0::Value(0.2));
        assert_eq!(c.policies[1], PolicyConfig::Tse { q: 0.5, budget: None });
        assert_eq!(c.policies[2], PolicyConfig::BatchRacing { delta: 0.1, max_batches: None });
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ExperimentConfig::parse("{").is_err());
        assert!(ExperimentConfig::parse(r#"{"delta0":"sometimes"}"#).is_err());
        assert!(ExperimentConfig::parse(r#"{"schema":"other"}"#).is_err());
        assert!(ExperimentConfig::parse(r#"{"K":10,"bogus":1}"#).is_err());
    }

    #[test]
    fn overrides_apply() {
        let mut c = ExperimentConfig::default();
        let o = Overrides { variant: Some("srm".into()), a: Some(1.0), b: Some(3.0), delta0: Some("0.5".parse().unwrap()), ..Default::default() };
        c.apply(&o).unwrap();
        assert_eq!(c.variant, Variant::Srm);
        assert_eq!(c.prior, Prior::Beta { a: 1.0, b: 3.0 });
        assert_eq!(c.delta0, Delta0::Value(0.5));
        assert!(c.apply(&Overrides { mu0: Some(0.6), ..Default::default() }).is_err());
    }
}
