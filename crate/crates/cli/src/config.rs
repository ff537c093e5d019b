//! Flat key-value experiment configuration with schema validation.
//!
//! Precedence: command-line flags > config file > defaults. Every run writes
//! the fully resolved configuration next to its outputs.

use anyhow::{bail, Context, Result};
use std::collections::BTreeMap;
use std::path::Path;
use tvae::generator::OutputMode;
use tvae::training::{Monitor, TemperatureSchedule};
use tvae::{ModelConfig, PriorSettings, ThetaPrior, TrainConfig, VariantId};

/// Every supported key with a short description (the schema).
pub const SCHEMA: &[(&str, &str)] = &[
    ("seed", "rng seed (u64)"),
    ("group", "rotation group: p4, p8 or p16"),
    ("variant", "model variant: v1, v2, v3, p4, p8, p16"),
    ("z_dim", "semantic latent dimension"),
    ("kernel_size", "lifting-layer kernel size (odd recommended)"),
    ("channels", "lifting/pointwise channels"),
    ("n_pointwise_layers", "1x1 group-conv layers incl. the head"),
    ("generator_layers", "generator hidden layers"),
    ("hidden_units", "generator hidden units"),
    ("n_freq", "random Fourier frequencies"),
    ("fourier_scale", "Fourier frequency sampling std"),
    ("output_mode", "bernoulli, gaussian or rgb"),
    ("per_pixel_sigma", "true/false: per-pixel sigma in gaussian modes"),
    ("batch_size", "images per optimizer step"),
    ("micro_batch", "gradient-accumulation chunk (0 = whole batch)"),
    ("learning_rate", "Adam learning rate"),
    ("lr_decay_factor", "plateau decay multiplier"),
    ("lr_patience", "epochs without improvement before decay"),
    ("early_stop_patience", "epochs without improvement before stopping"),
    ("max_epochs", "epoch budget"),
    ("temperature_start", "initial Gumbel temperature"),
    ("temperature_end", "final Gumbel temperature"),
    ("temperature_fraction", "fraction of training spent annealing"),
    ("monitor", "train or val: loss driving the schedulers"),
    ("val_fraction", "held-out fraction when monitor=val"),
    ("checkpoint_interval", "epochs between last.tvae saves"),
    ("log_every", "steps between train-log records"),
    ("theta_prior", "uniform, or normal:<std-radians>"),
    ("translation_std_px", "translation prior std in pixels"),
];

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut values = BTreeMap::new();
        let defaults: &[(&str, &str)] = &[
            ("seed", "0"),
            ("group", "p4"),
            ("variant", ""),
            ("z_dim", "2"),
            ("kernel_size", "29"),
            ("channels", "128"),
            ("n_pointwise_layers", "3"),
            ("generator_layers", "3"),
            ("hidden_units", "512"),
            ("n_freq", "64"),
            ("fourier_scale", "1.0"),
            ("output_mode", "bernoulli"),
            ("per_pixel_sigma", "false"),
            ("batch_size", "100"),
            ("micro_batch", "25"),
            ("learning_rate", "2e-4"),
            ("lr_decay_factor", "0.5"),
            ("lr_patience", "10"),
            ("early_stop_patience", "20"),
            ("max_epochs", "500"),
            ("temperature_start", "1.0"),
            ("temperature_end", "0.1"),
            ("temperature_fraction", "0.5"),
            ("monitor", "train"),
            ("val_fraction", "0.1"),
            ("checkpoint_interval", "10"),
            ("log_every", "1"),
            ("theta_prior", "uniform"),
            ("translation_std_px", "5.0"),
        ];
        for (k, v) in defaults {
            values.insert(k.to_string(), v.to_string());
        }
        ExperimentConfig { values }
    }
}

impl ExperimentConfig {
    /// Loads `key = value` lines; unknown keys are rejected by name.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("config line {} is not key = value: {raw}", lineno + 1);
            };
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !SCHEMA.iter().any(|(k, _)| *k == key) {
            bail!("unknown config key: {key}");
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key);
        raw.parse::<T>()
            .map_err(|e| anyhow::anyhow!("config key {key}={raw}: {e}"))
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn variant(&self) -> Result<VariantId> {
        let explicit = self.get("variant");
        if !explicit.is_empty() {
            return explicit
                .parse::<VariantId>()
                .map_err(|e| anyhow::anyhow!("{e}"));
        }
        self.get("group")
            .parse::<VariantId>()
            .map_err(|e| anyhow::anyhow!("config key group: {e}"))
    }

    pub fn model_config(&self, image_h: usize, image_w: usize) -> Result<ModelConfig> {
        let mut mc = ModelConfig::new(self.variant()?, self.parse("z_dim")?, image_h, image_w);
        mc.first_kernel_size = self.parse("kernel_size")?;
        mc.channels = self.parse("channels")?;
        mc.n_pointwise_layers = self.parse("n_pointwise_layers")?;
        mc.generator.n_layers = self.parse("generator_layers")?;
        mc.generator.hidden_units = self.parse("hidden_units")?;
        mc.generator.n_freq = self.parse("n_freq")?;
        mc.generator.fourier_scale = self.parse("fourier_scale")?;
        mc.generator.per_pixel_sigma = self.parse::<bool>("per_pixel_sigma")?;
        mc.generator.output_mode = match self.get("output_mode") {
            "bernoulli" => OutputMode::Bernoulli,
            "gaussian" => OutputMode::Gaussian,
            "rgb" => OutputMode::Rgb,
            other => bail!("config key output_mode: unknown mode {other}"),
        };
        Ok(mc)
    }

    pub fn prior_settings(&self) -> Result<PriorSettings> {
        let theta_prior = match self.get("theta_prior") {
            "uniform" => ThetaPrior::Uniform,
            other => match other.strip_prefix("normal:") {
                Some(std) => ThetaPrior::Normal {
                    std: std
                        .parse::<f64>()
                        .map_err(|_| anyhow::anyhow!("config key theta_prior: bad std {std}"))?,
                },
                None => bail!("config key theta_prior: expected uniform or normal:<std>, got {other}"),
            },
        };
        Ok(PriorSettings {
            theta_prior,
            translation_std_pixels: self.parse("translation_std_px")?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let micro: usize = self.parse("micro_batch")?;
        let monitor = match self.get("monitor") {
            "train" => Monitor::TrainLoss,
            "val" => Monitor::ValidationLoss {
                fraction: self.parse("val_fraction")?,
            },
            other => bail!("config key monitor: expected train or val, got {other}"),
        };
        Ok(TrainConfig {
            batch_size: self.parse("batch_size")?,
            micro_batch: if micro == 0 { None } else { Some(micro) },
            learning_rate: self.parse("learning_rate")?,
            lr_decay_factor: self.parse("lr_decay_factor")?,
            lr_patience: self.parse("lr_patience")?,
            early_stop_patience: self.parse("early_stop_patience")?,
            max_epochs: self.parse("max_epochs")?,
            seed: self.seed()?,
            temperature: TemperatureSchedule {
                start: self.parse("temperature_start")?,
                end: self.parse("temperature_end")?,
                anneal_fraction: self.parse("temperature_fraction")?,
            },
            monitor,
            checkpoint_interval: self.parse("checkpoint_interval")?,
            log_every: self.parse("log_every")?,
        })
    }

    /// Writes the fully resolved configuration for provenance.
    pub fn write_resolved(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k}={v}\n"));
        }
        std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
