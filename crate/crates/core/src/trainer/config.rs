//! Training configuration: TOML text with `section.key=value` overrides.

use serde::{Deserialize, Serialize};

use crate::data::AugmentPolicy;
use crate::encoder::{EncoderConfig, DEFAULT_MOMENTUM};
use crate::error::{Error, Result};
use crate::losses::{default_c_o, PriorConfig, PriorKind, DEFAULT_MARGIN, DEFAULT_SIGMA2, DEFAULT_TAU};
use crate::queue::DEFAULT_CAPACITY;

/// Which batch objective the trainer minimises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    /// Mean of per-instance losses, one prior per instance.
    Instance,
    /// One prior on the batch-wide centred view matrix.
    BatchShared,
}

/// `(start_epoch, beta)`; `beta = inf` switches the prior off.
pub type BetaStep = (u64, f64);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    pub kind: PriorKind,
    pub tau: f64,
    pub sigma2: f64,
    pub c_o: f64,
    pub c: f64,
    pub beta_schedule: Vec<BetaStep>,
}

impl Default for PriorSection {
    fn default() -> Self {
        Self {
            kind: PriorKind::Laplace,
            tau: DEFAULT_TAU,
            sigma2: DEFAULT_SIGMA2,
            c_o: default_c_o(),
            c: DEFAULT_MARGIN,
            beta_schedule: vec![(0, f64::INFINITY), (50, 2.0)],
        }
    }
}

impl PriorSection {
    /// The loss configuration in force during `epoch`.
    pub fn at_epoch(&self, epoch: u64) -> PriorConfig {
        PriorConfig {
            kind: self.kind,
            beta: beta_at(&self.beta_schedule, epoch),
            sigma2: self.sigma2,
            c_o: self.c_o,
            c: self.c,
            tau: self.tau,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_base: f64,
    pub lr_final: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub momentum_encoder: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_base: 0.5,
            lr_final: 0.0,
            sgd_momentum: 0.9,
            weight_decay: 0.0,
            momentum_encoder: DEFAULT_MOMENTUM,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub hidden: Vec<usize>,
    pub d_out: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self {
            hidden: e.hidden,
            d_out: e.d_out,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: u64,
    /// `M`: views per instance, `M − 1` queries plus one key.
    pub views: usize,
    /// `N`.
    pub batch_size: usize,
    /// `K`.
    pub queue_size: usize,
    pub loss: LossForm,
    /// Save a checkpoint every this many epochs; 0 saves only the final state.
    pub checkpoint_every: u64,
    /// Query views that enter `Q`; empty means all of them.
    pub q_view_subset: Vec<usize>,
    pub prior: PriorSection,
    pub optim: OptimConfig,
    pub encoder: EncoderSection,
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 100,
            views: 6,
            batch_size: 32,
            queue_size: DEFAULT_CAPACITY,
            loss: LossForm::Instance,
            checkpoint_every: 0,
            q_view_subset: Vec::new(),
            prior: PriorSection::default(),
            optim: OptimConfig::default(),
            encoder: EncoderSection::default(),
            augment: AugmentPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views < 2 {
            return Err(Error::config("views", "need at least 2 views per instance"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.queue_size < self.batch_size {
            return Err(Error::config("queue_size", "must be at least batch_size"));
        }
        validate_schedule(&self.prior.beta_schedule)?;
        for &(_, beta) in &self.prior.beta_schedule {
            self.prior.at_epoch(0).with_beta(beta).validate().map_err(|e| match e {
                Error::Config { field, reason } if field == "prior.beta" => {
                    Error::config("prior.beta_schedule", reason)
                }
                other => other,
            })?;
        }
        let o = &self.optim;
        if !(o.lr_final >= 0.0 && o.lr_base >= o.lr_final && o.lr_base.is_finite()) {
            return Err(Error::config("optim.lr_base", "need lr_base ≥ lr_final ≥ 0"));
        }
        if !(0.0..1.0).contains(&o.sgd_momentum) {
            return Err(Error::config("optim.sgd_momentum", "must lie in [0, 1)"));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(Error::config("optim.weight_decay", "must be ≥ 0"));
        }
        if !(0.0..=1.0).contains(&o.momentum_encoder) {
            return Err(Error::config("optim.momentum_encoder", "must lie in [0, 1]"));
        }
        if !self.q_view_subset.is_empty() {
            let mut s = self.q_view_subset.clone();
            s.sort_unstable();
            s.dedup();
            if s.len() != self.q_view_subset.len() || s.iter().any(|&i| i >= self.views - 1) {
                return Err(Error::config(
                    "q_view_subset",
                    format!("need distinct query view indices below {}", self.views - 1),
                ));
            }
            if self.loss == LossForm::BatchShared {
                return Err(Error::config("q_view_subset", "only supported with loss = \"instance\""));
            }
        }
        self.encoder_config(1).validate()?;
        self.augment.validate()
    }

    pub fn encoder_config(&self, d_in: usize) -> EncoderConfig {
        EncoderConfig {
            d_in,
            hidden: self.encoder.hidden.clone(),
            d_out: self.encoder.d_out,
            init_seed: self.seed,
        }
    }

    /// Parses TOML text, applies `section.key=value` overrides in order, and
    /// validates the result.
    pub fn from_toml_with_overrides<S: AsRef<str>>(text: &str, overrides: &[S]) -> Result<Self> {
        let mut table = parse_table(text)?;
        for o in overrides {
            apply_override(&mut table, o.as_ref())?;
        }
        Self::from_table(table)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides::<&str>(text, &[])
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: TrainConfig = table.try_into().map_err(de_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical TOML rendering; parsing it back yields an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }
}

/// The `beta` of the last step whose start epoch is at most `epoch`.
pub fn beta_at(schedule: &[BetaStep], epoch: u64) -> f64 {
    schedule
        .iter()
        .take_while(|(start, _)| *start <= epoch)
        .last()
        .map_or(f64::INFINITY, |&(_, b)| b)
}

pub fn validate_schedule(schedule: &[BetaStep]) -> Result<()> {
    match schedule.first() {
        None => return Err(Error::config("prior.beta_schedule", "must not be empty")),
        Some((start, _)) if *start != 0 => {
            return Err(Error::config("prior.beta_schedule", "first step must start at epoch 0"))
        }
        _ => {}
    }
    if schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::config("prior.beta_schedule", "start epochs must be strictly increasing"));
    }
    Ok(())
}

/// `lr_final + ½(lr_base − lr_final)(1 + cos(π·step/total_steps))`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_base: f64, lr_final: f64) -> f64 {
    if total_steps == 0 {
        return lr_base;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr_final + 0.5 * (lr_base - lr_final) * (1.0 + (std::f64::consts::PI * t).cos())
}

pub fn parse_table(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| Error::config("<file>", e.to_string().trim_end().to_string()))
}

/// Applies `a.b.c=value`. The value is read as a TOML value when it parses
/// as one (`3`, `inf`, `[1, 2]`, `"x"`) and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like section.key=value"))?;
    let path = path.trim();
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(path, "empty key in override path"));
    }
    let value = parse_value(raw.trim());
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut cur = table;
    for k in parents {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(path, format!("`{k}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn de_error(e: toml::de::Error) -> Error {
    let msg = e.message().trim_end().to_string();
    let field = e
        .message()
        .split('`')
        .nth(1)
        .filter(|_| msg.starts_with("unknown field"))
        .map_or_else(|| "<config>".to_string(), str::to_string);
    Error::config(field, msg)
}
