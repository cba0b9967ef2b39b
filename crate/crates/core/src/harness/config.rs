//! Flat `key=value` configuration files and the run configuration they
//! describe.

use std::fmt::Display;
use std::str::FromStr;

use crate::adversarial::GenLoss;
use crate::error::{Error, Result};
use crate::evaluation::{DEFAULT_FD_SAMPLES, DEFAULT_SUBSET};
use crate::importance::Estimator;
use crate::scheduler::{parse_method, PruneRule, RickConfig};

/// Ordered `key=value` pairs. Blank lines and `#` comments are skipped on
/// parse; duplicate keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    pub fn push(&mut self, key: &str, value: impl Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1))
            })?;
            let k = k.trim();
            if kv.entries.iter().any(|(e, _)| e == k) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{k}`",
                    n + 1
                )));
            }
            kv.push(k, v.trim());
        }
        Ok(kv)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn take_opt(&mut self, key: &str) -> Option<String> {
        let i = self.entries.iter().position(|(k, _)| k == key)?;
        Some(self.entries.remove(i).1)
    }

    pub fn take(&mut self, key: &str) -> Result<String> {
        self.take_opt(key)
            .ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }

    pub fn take_parsed<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.take(key)?;
        v.parse()
            .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
    }

    pub fn take_parsed_opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take_opt(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`"))),
        }
    }

    /// Fails if any key was never taken.
    pub fn finish(self) -> Result<()> {
        match self.entries.first() {
            None => Ok(()),
            Some(_) => {
                let keys: Vec<&str> = self.entries.iter().map(|(k, _)| k.as_str()).collect();
                Err(Error::Config(format!(
                    "unknown key(s): {}",
                    keys.join(", ")
                )))
            }
        }
    }
}

pub fn gen_loss_str(g: GenLoss) -> &'static str {
    match g {
        GenLoss::NonSaturating => "non-saturating",
        GenLoss::Saturating => "saturating",
    }
}

pub fn parse_gen_loss(s: &str) -> Result<GenLoss> {
    match s {
        "non-saturating" => Ok(GenLoss::NonSaturating),
        "saturating" => Ok(GenLoss::Saturating),
        _ => Err(Error::Config(format!("unknown generator loss `{s}`"))),
    }
}

fn prune_rule_str(r: PruneRule) -> String {
    match r {
        PruneRule::Cumulative => "cumulative".into(),
        PruneRule::QuantileBelow(t) => format!("quantile:{t}"),
    }
}

pub fn parse_prune_rule(s: &str) -> Result<PruneRule> {
    if s == "cumulative" {
        return Ok(PruneRule::Cumulative);
    }
    s.strip_prefix("quantile:")
        .and_then(|t| t.parse().ok())
        .map(PruneRule::QuantileBelow)
        .ok_or_else(|| Error::Config(format!("unknown prune rule `{s}`")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalConfig {
    /// Generated samples for the Fréchet distance and incompatible mass.
    pub fd_samples: usize,
    /// Generated-sample subset for KID and intra-diversity.
    pub subset: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            fd_samples: DEFAULT_FD_SAMPLES,
            subset: DEFAULT_SUBSET,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub rick: RickConfig,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            rick: RickConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn echo(&self) -> KeyValues {
        let r = &self.rick;
        let mut kv = KeyValues::default();
        kv.push("method", r.policy);
        kv.push("estimator", r.estimator);
        kv.push("iters", r.total_iters);
        kv.push("warmup", r.warmup);
        kv.push("interval", r.interval);
        kv.push("t_high", r.t_high);
        kv.push("prune_rate_g", r.prune_rate_g);
        kv.push("prune_rate_d", r.prune_rate_d);
        kv.push("prune_rule", prune_rule_str(r.prune_rule));
        kv.push("batch", r.batch);
        kv.push("lr", r.base_lr);
        kv.push("checkpoint_interval", r.checkpoint_interval);
        kv.push("gen_loss", gen_loss_str(r.gen_loss));
        kv.push("ewc_lambda", r.ewc_lambda);
        kv.push("ewc_batches", r.ewc_batches);
        kv.push("probe_iters", r.probe_iters);
        kv.push("fd_samples", self.eval.fd_samples);
        kv.push("subset", self.eval.subset);
        kv.push("seed", self.seed);
        kv
    }

    /// Applies every key present in `text` on top of `self`. Unknown keys
    /// are errors. `prune_rate` sets both networks' rates.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        let mut kv = KeyValues::parse(text)?;
        let r = &mut self.rick;
        if let Some(m) = kv.take_opt("method") {
            let (policy, est) = parse_method(&m)?;
            r.policy = policy;
            if let Some(e) = est {
                r.estimator = e;
            }
        }
        if let Some(e) = kv.take_parsed_opt::<Estimator>("estimator")? {
            r.estimator = e;
        }
        macro_rules! opt {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.take_parsed_opt($key)? {
                    $field = v;
                }
            };
        }
        opt!("iters", r.total_iters);
        opt!("warmup", r.warmup);
        opt!("interval", r.interval);
        opt!("t_high", r.t_high);
        if let Some(p) = kv.take_parsed_opt::<f64>("prune_rate")? {
            r.prune_rate_g = p;
            r.prune_rate_d = p;
        }
        opt!("prune_rate_g", r.prune_rate_g);
        opt!("prune_rate_d", r.prune_rate_d);
        if let Some(s) = kv.take_opt("prune_rule") {
            r.prune_rule = parse_prune_rule(&s)?;
        }
        opt!("batch", r.batch);
        opt!("lr", r.base_lr);
        opt!("checkpoint_interval", r.checkpoint_interval);
        if let Some(s) = kv.take_opt("gen_loss") {
            r.gen_loss = parse_gen_loss(&s)?;
        }
        opt!("ewc_lambda", r.ewc_lambda);
        opt!("ewc_batches", r.ewc_batches);
        opt!("probe_iters", r.probe_iters);
        opt!("fd_samples", self.eval.fd_samples);
        opt!("subset", self.eval.subset);
        opt!("seed", self.seed);
        kv.finish()?;
        self.rick.validate()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply(text)?;
        Ok(c)
    }
}
