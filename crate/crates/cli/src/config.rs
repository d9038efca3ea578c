//! Plain `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;

use r2mf::data::augment::AugmentationConfig;
use r2mf::model::ModelConfig;
use r2mf::trainer::TrainConfig;
use r2mf::{Error, Result};

/// Model, training, augmentation and path settings of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// `augmentation` is ignored here; see [`RunConfig::augment`].
    pub train: TrainConfig,
    pub augment: bool,
    pub augmentation: AugmentationConfig,
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub run_name: Option<String>,
    pub postprocess: bool,
}

impl RunConfig {
    pub fn from_model(model: ModelConfig) -> Self {
        Self {
            model,
            train: TrainConfig { augmentation: None, ..TrainConfig::default() },
            augment: true,
            augmentation: AugmentationConfig::default(),
            data: None,
            out: PathBuf::from("runs"),
            run_name: None,
            postprocess: true,
        }
    }

    /// The trainer settings with the seed and augmentation resolved.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.model.seed,
            augmentation: self.augment.then(|| self.augmentation.clone()),
            ..self.train.clone()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? {
            return Ok(());
        }
        let bad = |e: &dyn std::fmt::Display| Error::Config(format!("{key} = `{value}`: {e}"));
        let f = || value.parse::<f64>().map_err(|e| bad(&e));
        let u = || value.parse::<usize>().map_err(|e| bad(&e));
        let b = || value.parse::<bool>().map_err(|e| bad(&e));
        let t = &mut self.train;
        let a = &mut self.augmentation;
        match key {
            "lr0" => t.lr0 = f()?,
            "lr_patience" => t.plateau.patience = u()?,
            "lr_factor" => t.plateau.factor = f()?,
            "lr_floor" => t.plateau.floor = f()?,
            "min_delta" => t.plateau.min_delta = f()?,
            "early_stop_patience" => t.plateau.early_stop_patience = u()?,
            "max_epochs" => t.max_epochs = u()?,
            "lambda_c" => t.weights.lambda_c = f()?,
            "lambda_f" => t.weights.lambda_f = f()?,
            "augment" => self.augment = b()?,
            "flip_prob" => a.flip_prob = f()?,
            "rotation_deg" => a.rotation_deg = f()?,
            "scale_min" => a.scale.0 = f()?,
            "scale_max" => a.scale.1 = f()?,
            "translate_frac" => a.translate_frac = f()?,
            "gamma_min" => a.gamma.0 = f()?,
            "gamma_max" => a.gamma.1 = f()?,
            "noise_sigma" => a.noise_sigma = f()?,
            "data" => self.data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "run_name" => self.run_name = (!value.is_empty()).then(|| value.to_string()),
            "postprocess" => self.postprocess = b()?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`. Blank lines and `#`
    /// comments are skipped; unknown keys are errors.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train_config().validate()?;
        self.augmentation.validate()
    }

    pub fn to_text(&self) -> String {
        let t = &self.train;
        let a = &self.augmentation;
        let mut s = String::from("# model\n");
        for (k, v) in self.model.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s.push_str("# training\n");
        let pairs: [(&str, String); 9] = [
            ("lr0", t.lr0.to_string()),
            ("lr_patience", t.plateau.patience.to_string()),
            ("lr_factor", t.plateau.factor.to_string()),
            ("lr_floor", t.plateau.floor.to_string()),
            ("min_delta", t.plateau.min_delta.to_string()),
            ("early_stop_patience", t.plateau.early_stop_patience.to_string()),
            ("max_epochs", t.max_epochs.to_string()),
            ("lambda_c", t.weights.lambda_c.to_string()),
            ("lambda_f", t.weights.lambda_f.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s.push_str("# augmentation\n");
        let pairs: [(&str, String); 9] = [
            ("augment", self.augment.to_string()),
            ("flip_prob", a.flip_prob.to_string()),
            ("rotation_deg", a.rotation_deg.to_string()),
            ("scale_min", a.scale.0.to_string()),
            ("scale_max", a.scale.1.to_string()),
            ("translate_frac", a.translate_frac.to_string()),
            ("gamma_min", a.gamma.0.to_string()),
            ("gamma_max", a.gamma.1.to_string()),
            ("noise_sigma", a.noise_sigma.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s.push_str("# paths and evaluation\n");
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let _ = writeln!(s, "data = {}", path(&self.data));
        let _ = writeln!(s, "out = {}", self.out.display());
        let _ = writeln!(s, "run_name = {}", self.run_name.clone().unwrap_or_default());
        let _ = writeln!(s, "postprocess = {}", self.postprocess);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::from_model(ModelConfig::desk());
        cfg.apply_text("recurrence = 2,2,1,1\nlambda_c = 0.3\naugment = false\n# note\n\ndata = /tmp/d\n").unwrap();
        assert_eq!(cfg.model.recurrence, vec![2, 2, 1, 1]);
        assert_eq!(cfg.train.weights.lambda_c, 0.3);
        let mut back = RunConfig::from_model(ModelConfig::paper());
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_and_malformed_keys_fail() {
        let mut cfg = RunConfig::from_model(ModelConfig::desk());
        assert!(matches!(cfg.apply_text("learning_rate = 1"), Err(Error::Config(_))));
        assert!(matches!(cfg.apply_text("lr0"), Err(Error::Config(_))));
        assert!(matches!(cfg.apply_text("max_epochs = many"), Err(Error::Config(_))));
    }

    #[test]
    fn seed_and_augmentation_resolve_into_trainer_settings() {
        let mut cfg = RunConfig::from_model(ModelConfig::desk());
        cfg.model.seed = 9;
        assert_eq!(cfg.train_config().seed, 9);
        assert!(cfg.train_config().augmentation.is_some());
        cfg.augment = false;
        assert!(cfg.train_config().augmentation.is_none());
    }
}
