//! Flat key=value configuration with CLI overrides.
//!
//! Precedence: CLI flag > config file > built-in default. The same text
//! serialization is embedded in checkpoints so a run is reproducible from
//! its artifacts alone.

use crate::cgt::{FusionConfig, FusionStrategy};
use crate::episodes::{SynthConfig, Topology};
use crate::error::Error;
use crate::model::{GraphMode, ModelConfig};
use crate::objective::LossWeights;
use crate::Result;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    // Optimization.
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    // Model.
    pub m: usize,
    pub d: usize,
    pub d_z: usize,
    pub hidden: usize,
    pub l_d: usize,
    pub n_s: usize,
    pub beta: f64,
    pub gamma: f64,
    pub lambda_heatmap: f64,
    pub sample_strategy: FusionStrategy,
    pub layer_strategy: FusionStrategy,
    pub graph_mode: GraphMode,
    // Episodes.
    pub shots: usize,
    pub topology: Topology,
    pub grid_h: usize,
    pub grid_w: usize,
    pub noise_std: f64,
    pub occlusion_prob: f64,
    pub n_distractors: usize,
    pub n_categories: usize,
    pub jitter_std: f64,
    pub rot_range_deg: f64,
    pub scale_range: f64,
    pub trans_range: f64,
    pub fade_prob: f64,
    pub fade_keep: f64,
    pub fade_noise: f64,
    pub feature_sigma: f64,
    pub pos_scale: f64,
    pub deform_std: f64,
    pub deform_len: f64,
    // Harness.
    pub train_episodes: usize,
    pub eval_episodes: usize,
    pub out: String,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        let synth = SynthConfig::default();
        TrainConfig {
            steps: 2000,
            batch_size: 16,
            lr: 1e-5,
            seed: 0,
            m: synth.m,
            d: synth.d,
            d_z: 32,
            hidden: 256,
            l_d: 3,
            n_s: 3,
            beta: 0.1,
            gamma: 1e-3,
            lambda_heatmap: 1.0,
            sample_strategy: FusionStrategy::Bayesian,
            layer_strategy: FusionStrategy::QueryWeighting,
            graph_mode: GraphMode::Learned,
            shots: synth.shots,
            topology: synth.topology,
            grid_h: synth.grid_h,
            grid_w: synth.grid_w,
            noise_std: synth.noise_std,
            occlusion_prob: synth.occlusion_prob,
            n_distractors: synth.n_distractors,
            n_categories: synth.n_categories,
            jitter_std: synth.jitter_std,
            rot_range_deg: synth.rot_range_deg,
            scale_range: synth.scale_range,
            trans_range: synth.trans_range,
            fade_prob: synth.fade_prob,
            fade_keep: synth.fade_keep,
            fade_noise: synth.fade_noise,
            feature_sigma: synth.feature_sigma,
            pos_scale: synth.pos_scale,
            deform_std: synth.deform_std,
            deform_len: synth.deform_len,
            train_episodes: 2000,
            eval_episodes: 200,
            out: "out".into(),
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            m: self.m,
            d: self.d,
            d_z: self.d_z,
            hidden: self.hidden,
            l_d: self.l_d,
            fusion: FusionConfig {
                n_samples: self.n_s,
                eps: crate::cgt::CONFIDENCE_EPS,
                sample_strategy: self.sample_strategy,
                layer_strategy: self.layer_strategy,
            },
            graph_mode: self.graph_mode,
            loss: LossWeights {
                beta: self.beta,
                gamma: self.gamma,
                lambda_heatmap: self.lambda_heatmap,
            },
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            m: self.m,
            topology: self.topology,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            noise_std: self.noise_std,
            occlusion_prob: self.occlusion_prob,
            n_distractors: self.n_distractors,
            shots: self.shots,
            d: self.d,
            n_categories: self.n_categories,
            jitter_std: self.jitter_std,
            rot_range_deg: self.rot_range_deg,
            scale_range: self.scale_range,
            trans_range: self.trans_range,
            fade_prob: self.fade_prob,
            fade_keep: self.fade_keep,
            fade_noise: self.fade_noise,
            feature_sigma: self.feature_sigma,
            pos_scale: self.pos_scale,
            deform_std: self.deform_std,
            deform_len: self.deform_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 {
            return Err(Error::config("lr must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.train_episodes == 0 {
            return Err(Error::config("train_episodes must be >= 1"));
        }
        self.model_config().validate()?;
        self.synth_config().validate()
    }

    /// Applies one key=value assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::usage(format!("invalid value '{value}' for key '{key}'")))
        }
        match key {
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "m" => self.m = parse(key, value)?,
            "d" => self.d = parse(key, value)?,
            "d_z" => self.d_z = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "l_d" => self.l_d = parse(key, value)?,
            "n_s" => self.n_s = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "lambda_heatmap" => self.lambda_heatmap = parse(key, value)?,
            "sample_strategy" => self.sample_strategy = value.parse()?,
            "layer_strategy" => self.layer_strategy = value.parse()?,
            "graph_mode" => self.graph_mode = value.parse()?,
            "shots" => self.shots = parse(key, value)?,
            "topology" => self.topology = value.parse()?,
            "grid_h" => self.grid_h = parse(key, value)?,
            "grid_w" => self.grid_w = parse(key, value)?,
            "noise_std" => self.noise_std = parse(key, value)?,
            "occlusion_prob" => self.occlusion_prob = parse(key, value)?,
            "n_distractors" => self.n_distractors = parse(key, value)?,
            "n_categories" => self.n_categories = parse(key, value)?,
            "jitter_std" => self.jitter_std = parse(key, value)?,
            "rot_range_deg" => self.rot_range_deg = parse(key, value)?,
            "scale_range" => self.scale_range = parse(key, value)?,
            "trans_range" => self.trans_range = parse(key, value)?,
            "fade_prob" => self.fade_prob = parse(key, value)?,
            "fade_keep" => self.fade_keep = parse(key, value)?,
            "fade_noise" => self.fade_noise = parse(key, value)?,
            "feature_sigma" => self.feature_sigma = parse(key, value)?,
            "pos_scale" => self.pos_scale = parse(key, value)?,
            "deform_std" => self.deform_std = parse(key, value)?,
            "deform_len" => self.deform_len = parse(key, value)?,
            "train_episodes" => self.train_episodes = parse(key, value)?,
            "eval_episodes" => self.eval_episodes = parse(key, value)?,
            "out" => self.out = value.to_string(),
            other => return Err(Error::usage(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parses a flat key=value file; '#' starts a comment.
    pub fn from_text(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::usage(format!("config line {}: expected key=value", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path)?;
        TrainConfig::from_text(&text)
    }

    /// Serializes every key; `from_text` of the output reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv("steps", self.steps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", format!("{:e}", self.lr));
        kv("seed", self.seed.to_string());
        kv("m", self.m.to_string());
        kv("d", self.d.to_string());
        kv("d_z", self.d_z.to_string());
        kv("hidden", self.hidden.to_string());
        kv("l_d", self.l_d.to_string());
        kv("n_s", self.n_s.to_string());
        kv("beta", format!("{:e}", self.beta));
        kv("gamma", format!("{:e}", self.gamma));
        kv("lambda_heatmap", format!("{:e}", self.lambda_heatmap));
        kv("sample_strategy", self.sample_strategy.to_string());
        kv("layer_strategy", self.layer_strategy.to_string());
        kv("graph_mode", self.graph_mode.to_string());
        kv("shots", self.shots.to_string());
        kv("topology", self.topology.to_string());
        kv("grid_h", self.grid_h.to_string());
        kv("grid_w", self.grid_w.to_string());
        kv("noise_std", format!("{:e}", self.noise_std));
        kv("occlusion_prob", format!("{:e}", self.occlusion_prob));
        kv("n_distractors", self.n_distractors.to_string());
        kv("n_categories", self.n_categories.to_string());
        kv("jitter_std", format!("{:e}", self.jitter_std));
        kv("rot_range_deg", format!("{:e}", self.rot_range_deg));
        kv("scale_range", format!("{:e}", self.scale_range));
        kv("trans_range", format!("{:e}", self.trans_range));
        kv("fade_prob", format!("{:e}", self.fade_prob));
        kv("fade_keep", format!("{:e}", self.fade_keep));
        kv("fade_noise", format!("{:e}", self.fade_noise));
        kv("feature_sigma", format!("{:e}", self.feature_sigma));
        kv("pos_scale", format!("{:e}", self.pos_scale));
        kv("deform_std", format!("{:e}", self.deform_std));
        kv("deform_len", format!("{:e}", self.deform_len));
        kv("train_episodes", self.train_episodes.to_string());
        kv("eval_episodes", self.eval_episodes.to_string());
        kv("out", self.out.clone());
        s
    }
}
