//! Run configuration: a flat key=value file with command-line overrides.
//!
//! Unknown keys are rejected. Every command that produces artifacts writes
//! its resolved configuration next to them. `CMN_OUTPUT_DIR` overrides the
//! output directory; it is the only environment knob.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cmn_core::model::{ModelConfig, Variant};
use cmn_core::trainer::Schedule;
use cmn_core::{Error, Result};

pub const OUTPUT_DIR_ENV: &str = "CMN_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // model
    pub variant: Variant,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub memory_slots: usize,
    pub memory_topk: usize,
    pub dropout: f64,
    pub residual_response: bool,
    pub max_positions: usize,
    pub init_std: f64,
    /// 0 means "build the vocabulary from the manifest's train split".
    pub vocab_size: usize,
    pub min_count: usize,
    // data
    pub manifest: Option<PathBuf>,
    pub patch_size: usize,
    // training
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_visual: f64,
    pub lr_other: f64,
    pub lr_decay: f64,
    /// 0 disables gradient clipping.
    pub grad_clip: f64,
    pub seed: u64,
    // decoding
    pub beam_size: usize,
    pub max_len: usize,
    pub length_alpha: f64,
    // output
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        RunConfig {
            variant: Variant::Cmn,
            dim: 32,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            memory_slots: 64,
            memory_topk: 8,
            dropout: 0.1,
            residual_response: false,
            max_positions: 128,
            init_std: 0.02,
            vocab_size: 0,
            min_count: 1,
            manifest: None,
            patch_size: 4,
            batch_size: 8,
            epochs: 10,
            lr_visual: 5e-5,
            lr_other: 1e-4,
            lr_decay: 0.8,
            grad_clip: 0.0,
            seed: 0,
            beam_size: 3,
            max_len: 80,
            length_alpha: 0.0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// Named model presets: `desk` (default) or `full` (the full-size
    /// shape: 3 layers, 8 heads, d=512, N=2048, K=32).
    pub fn apply_preset(&mut self, preset: &str) -> Result<()> {
        match preset {
            "desk" => {
                let d = RunConfig::default();
                self.variant = d.variant;
                self.dim = d.dim;
                self.layers = d.layers;
                self.heads = d.heads;
                self.ffn_dim = d.ffn_dim;
                self.memory_slots = d.memory_slots;
                self.memory_topk = d.memory_topk;
                self.max_positions = d.max_positions;
            }
            "full" => {
                self.dim = 512;
                self.layers = 3;
                self.heads = 8;
                self.ffn_dim = 2048;
                self.memory_slots = 2048;
                self.memory_topk = 32;
                self.max_positions = 512;
            }
            other => {
                return Err(Error::Argument(format!(
                    "unknown preset `{other}` (expected desk|full)"
                )))
            }
        }
        Ok(())
    }

    /// Apply one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                Error::Argument(format!("config key `{key}`: cannot parse value `{value}`"))
            })
        }
        match key {
            "variant" => self.variant = Variant::parse(value)?,
            "dim" => self.dim = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "ffn_dim" => self.ffn_dim = parse(key, value)?,
            "memory_slots" => self.memory_slots = parse(key, value)?,
            "memory_topk" => self.memory_topk = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "residual_response" => self.residual_response = parse(key, value)?,
            "max_positions" => self.max_positions = parse(key, value)?,
            "init_std" => self.init_std = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "min_count" => self.min_count = parse(key, value)?,
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "patch_size" => self.patch_size = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr_visual" => self.lr_visual = parse(key, value)?,
            "lr_other" => self.lr_other = parse(key, value)?,
            "lr_decay" => self.lr_decay = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "beam_size" => self.beam_size = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "length_alpha" => self.length_alpha = parse(key, value)?,
            "preset" => self.apply_preset(value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            other => {
                return Err(Error::Argument(format!("unknown config key `{other}`")));
            }
        }
        Ok(())
    }

    /// Parse a key=value file (blank lines and `#` comments allowed).
    pub fn load(path: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.merge_file(path)?;
        Ok(cfg)
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Argument(format!(
                    "{}:{}: expected key=value, got `{line}`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Apply `--set key=value` overrides, then the output-dir env override.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<()> {
        for s in sets {
            let (key, value) = s.split_once('=').ok_or_else(|| {
                Error::Argument(format!("--set expects key=value, got `{s}`"))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                self.output_dir = PathBuf::from(dir);
            }
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize, patch_dim: Option<usize>) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            layers: self.layers,
            heads: self.heads,
            dim: self.dim,
            ffn_dim: self.ffn_dim,
            vocab_size,
            max_positions: self.max_positions,
            memory_slots: self.memory_slots,
            memory_topk: self.memory_topk,
            dropout: self.dropout,
            residual_response: self.residual_response,
            patch_dim,
            init_std: self.init_std,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            lr_visual: self.lr_visual,
            lr_other: self.lr_other,
            decay: self.lr_decay,
        }
    }

    pub fn manifest_path(&self) -> Result<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| Error::Argument("config key `manifest` is required".into()))
    }

    /// Serialize every key back out.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variant = {}", self.variant.name());
        let _ = writeln!(s, "dim = {}", self.dim);
        let _ = writeln!(s, "layers = {}", self.layers);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "ffn_dim = {}", self.ffn_dim);
        let _ = writeln!(s, "memory_slots = {}", self.memory_slots);
        let _ = writeln!(s, "memory_topk = {}", self.memory_topk);
        let _ = writeln!(s, "dropout = {}", self.dropout);
        let _ = writeln!(s, "residual_response = {}", self.residual_response);
        let _ = writeln!(s, "max_positions = {}", self.max_positions);
        let _ = writeln!(s, "init_std = {}", self.init_std);
        let _ = writeln!(s, "vocab_size = {}", self.vocab_size);
        let _ = writeln!(s, "min_count = {}", self.min_count);
        if let Some(m) = &self.manifest {
            let _ = writeln!(s, "manifest = {}", m.display());
        }
        let _ = writeln!(s, "patch_size = {}", self.patch_size);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "lr_visual = {}", self.lr_visual);
        let _ = writeln!(s, "lr_other = {}", self.lr_other);
        let _ = writeln!(s, "lr_decay = {}", self.lr_decay);
        let _ = writeln!(s, "grad_clip = {}", self.grad_clip);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "beam_size = {}", self.beam_size);
        let _ = writeln!(s, "max_len = {}", self.max_len);
        let _ = writeln!(s, "length_alpha = {}", self.length_alpha);
        let _ = writeln!(s, "output_dir = {}", self.output_dir.display());
        s
    }

    /// Write the resolved configuration next to a run's outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.resolved"), self.to_key_values())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.set("no_such_key", "1").unwrap_err();
        assert!(err.to_string().contains("no_such_key"));
    }

    #[test]
    fn resolved_round_trips_through_the_parser() {
        let mut cfg = RunConfig::default();
        cfg.set("variant", "mem").unwrap();
        cfg.set("dim", "16").unwrap();
        cfg.set("manifest", "corpus/manifest.json").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg");
        fs::write(&path, cfg.to_key_values()).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn preset_full_changes_model_shape() {
        let mut cfg = RunConfig::default();
        cfg.apply_preset("full").unwrap();
        assert_eq!(cfg.dim, 512);
        assert_eq!(cfg.memory_slots, 2048);
        assert_eq!(cfg.layers, 3);
    }
}
