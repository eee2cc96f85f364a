use std::path::Path;

use serde_json::Value;
use sleepnet::config::ModelConfig;
use sleepnet::sequence::MaskMode;
use sleepnet::training::{Stage, TrainConfig};
use sleepnet::{Error, Result};

use crate::args::{MaskArgs, MaskModeArg, Scale, TrainArgs};

pub fn base(stage: Stage, scale: Scale) -> TrainConfig {
    match scale {
        Scale::Desk => TrainConfig::desk(stage),
        Scale::Paper => TrainConfig { stage, model: ModelConfig::paper(), ..TrainConfig::default() },
    }
}

/// Overlays `patch` on `target`; nested objects merge key by key and keys
/// absent from `target` are rejected.
fn overlay(target: &mut Value, patch: &Value, path: &str) -> Result<()> {
    let (Value::Object(t), Value::Object(p)) = (&mut *target, patch) else {
        *target = patch.clone();
        return Ok(());
    };
    for (k, v) in p {
        let full = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match t.get_mut(k) {
            Some(slot) if slot.is_object() && v.is_object() => overlay(slot, v, &full)?,
            Some(slot) => *slot = v.clone(),
            None => return Err(Error::Input(format!("unknown configuration key `{full}`"))),
        }
    }
    Ok(())
}

/// Base configuration for `stage`, overlaid with the JSON file and then
/// the command-line flags.
pub fn resolve(stage: Stage, train: &TrainArgs, mask: Option<&MaskArgs>, file: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut value = serde_json::to_value(base(stage, train.scale)).map_err(|e| Error::Format(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if !patch.is_object() {
            return Err(Error::Format(format!("{}: expected a JSON object", path.display())));
        }
        overlay(&mut value, &patch, "")?;
    }
    let mut cfg: TrainConfig = serde_json::from_value(value).map_err(|e| Error::Format(format!("configuration: {e}")))?;
    cfg.stage = stage;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(v) = train.steps {
        cfg.steps = v;
    }
    if let Some(v) = train.lr {
        cfg.lr = v;
    }
    if let Some(v) = train.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = train.validate_every {
        cfg.validate_every = v;
    }
    if let Some(v) = train.patience {
        cfg.patience = v;
    }
    if train.no_augment {
        cfg.augment = false;
    }
    if let Some(m) = mask {
        if let Some(r) = m.mask_ratio {
            cfg.mask_ratio = r;
        }
        if let Some(mode) = m.mask_mode {
            cfg.mask_mode = match mode {
                MaskModeArg::Independent => MaskMode::Independent,
                MaskModeArg::Complementary => MaskMode::Complementary,
            };
        }
        if m.no_contrastive {
            cfg.contrastive = false;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn flags() -> TrainArgs {
        TrainArgs { scale: Scale::Desk, steps: None, lr: None, batch_size: None, validate_every: None, patience: None, no_augment: false }
    }

    #[test]
    fn flags_override_file_which_overrides_base() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"lr": 0.01, "steps": 7, "model": {"dropout": 0.2}}"#).unwrap();
        let mut f = flags();
        f.steps = Some(9);
        let cfg = resolve(Stage::Pretrain, &f, None, Some(&p), Some(3)).unwrap();
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.steps, 9);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.model.dropout, 0.2);
        assert_eq!(cfg.model.d_model, ModelConfig::desk().d_model);
    }

    #[test]
    fn unknown_keys_are_input_errors() {
        let mut v = json!({"a": 1, "m": {"b": 2}});
        assert!(overlay(&mut v, &json!({"m": {"c": 1}}), "").unwrap_err().to_string().contains("m.c"));
        assert_eq!(overlay(&mut v, &json!({"z": 1}), "").unwrap_err().category(), "input");
    }
}
