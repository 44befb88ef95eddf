use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::vit::VitConfig;

/// Optimization and variant settings for one fine-tuning run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the diversity regularizer, applied as `alpha / d²`.
    pub alpha: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Shared base spaces.
    pub p: usize,
    /// Rank of each base space.
    pub r: usize,
    pub sade_on: bool,
    pub insert_mha: bool,
    pub insert_ffn: bool,
    /// Update `W_q`/`W_v` instead of pre-block insertion.
    pub qv_mode: bool,
    /// Plain LoRA factors with `ΔW = Σ_i A_i B_i` for every module.
    pub naive_sum_mode: bool,
    /// Token-level cosine similarity in place of the weight-space term.
    pub sample_dependent_sr: bool,
    /// Also train the layer-norm gains and shifts.
    pub tune_layer_norm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lr: 0.01,
            weight_decay: 0.01,
            batch: 32,
            epochs: 100,
            warmup_epochs: 10,
            seed: 0,
            p: 4,
            r: 8,
            sade_on: true,
            insert_mha: true,
            insert_ffn: true,
            qv_mode: false,
            naive_sum_mode: false,
            sample_dependent_sr: false,
            tune_layer_norm: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return bad(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if self.batch == 0 {
            return bad("batch must be >= 1".into());
        }
        if self.warmup_epochs > self.epochs {
            return bad(format!(
                "warmup_epochs={} exceeds epochs={}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.qv_mode && !(self.insert_mha && self.insert_ffn) {
            return bad(
                "qv_mode adapts both W_q and W_v; leave insert_mha and insert_ffn on".into(),
            );
        }
        if self.sample_dependent_sr && !self.sade_on {
            return bad("sample_dependent_sr replaces the diversity term and needs sade_on".into());
        }
        if self.naive_sum_mode && self.sade_on {
            return bad("the naive sum has no experts to regularize; set sade_on=false".into());
        }
        Ok(())
    }

    /// True when no adapters are inserted and only the head trains.
    pub fn head_only(&self) -> bool {
        !self.insert_mha && !self.insert_ffn
    }

    /// Sets one field from its key; returns `Ok(false)` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "alpha" => self.alpha = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "batch" | "b" => self.batch = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "p" => self.p = parse(key, value)?,
            "r" => self.r = parse(key, value)?,
            "schedule" => {
                if value != "cosine" {
                    return Err(Error::Config(format!(
                        "only the cosine schedule is supported, got {value:?}"
                    )));
                }
            }
            "sade_on" => self.sade_on = parse_bool(key, value)?,
            "insert_mha" => self.insert_mha = parse_bool(key, value)?,
            "insert_ffn" => self.insert_ffn = parse_bool(key, value)?,
            "qv_mode" => self.qv_mode = parse_bool(key, value)?,
            "naive_sum_mode" => self.naive_sum_mode = parse_bool(key, value)?,
            "sample_dependent_sr" => self.sample_dependent_sr = parse_bool(key, value)?,
            "tune_layer_norm" => self.tune_layer_norm = parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Sets a [`VitConfig`] field from its key; returns `Ok(false)` for unknown keys.
pub fn set_vit_field(config: &mut VitConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "d" => config.d = parse(key, value)?,
        "layers" | "L" => config.layers = parse(key, value)?,
        "heads" => config.heads = parse(key, value)?,
        "n" => config.n = parse(key, value)?,
        "patch_dim" => config.patch_dim = parse(key, value)?,
        "ffn_hidden" => config.ffn_hidden = parse(key, value)?,
        "classes" => config.classes = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {value:?} for `{key}`"))),
    }
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// repeated keys are an error.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key=value, got {raw:?}", i + 1))
        })?;
        let key = key.trim().to_string();
        if out.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::Config(format!(
                "line {}: duplicate key `{key}`",
                i + 1
            )));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn parses_file() {
        let kv =
            parse_key_values("# run\nalpha = 0.1\nlr=0.003 # peak\n\nsade_on=false\n").unwrap();
        let mut c = TrainConfig::default();
        for (k, v) in &kv {
            assert!(c.set(k, v).unwrap());
        }
        assert_eq!((c.alpha, c.lr, c.sade_on), (0.1, 0.003, false));
        assert!(!c.set("nonsense", "1").unwrap());
        assert!(c.set("batch", "x").is_err());
        assert!(parse_key_values("a=1\na=2").is_err());
        assert!(parse_key_values("novalue").is_err());
    }

    #[test]
    fn rejects_bad_configs() {
        let base = TrainConfig::default();
        for c in [
            TrainConfig {
                alpha: -1.0,
                ..base.clone()
            },
            TrainConfig {
                batch: 0,
                ..base.clone()
            },
            TrainConfig {
                warmup_epochs: 101,
                ..base.clone()
            },
            TrainConfig {
                qv_mode: true,
                insert_ffn: false,
                ..base.clone()
            },
            TrainConfig {
                sade_on: false,
                sample_dependent_sr: true,
                ..base.clone()
            },
        ] {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }
}
