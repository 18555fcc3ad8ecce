//! Flat, serializable run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{GeneratorArch, GeneratorConfig, ModelKind, OptimConfig, SearchConfig};
use crate::classifier::{Augmentation, TrainConfig};
use crate::dataset::SyntheticParams;
use crate::error::{Error, Result};
use crate::losses::ReconWeights;
use crate::spectral::LaplacianKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    Model1,
    Model2,
    Opt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset_seed: u64,
    /// Directory of meshes; the synthetic dataset is used when absent.
    pub dataset_path: Option<PathBuf>,
    pub class_amplitude: f64,
    pub out_dir: PathBuf,
    pub classifier: Option<PathBuf>,

    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub rotate: bool,
    pub full_rotation: bool,
    pub translation: f64,
    pub center: bool,
    pub select_best_val: bool,

    pub model: ModelVariant,
    pub k: usize,
    pub c: f64,
    pub l2: f64,
    pub edge: f64,
    pub local_euclidean: f64,
    pub chamfer: f64,
    pub laplacian_smoothing: f64,
    pub laplacian: LaplacianKind,
    pub target_seed: u64,
    pub resume: Option<PathBuf>,

    pub attack_lr: f64,
    pub max_iters: usize,
    pub patience: usize,
    pub tol: f64,
    pub c0: f64,
    pub c_growth: f64,
    pub c_rounds: usize,
    pub c_bisect: usize,
    /// Shape name or index for single-shape attacks; all test shapes when absent.
    pub shape: Option<String>,
    pub target: Option<usize>,
    pub k_sweep: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let o = OptimConfig::default();
        let s = SearchConfig::default();
        let r = ReconWeights::default();
        Self {
            seed: 0,
            dataset_seed: 0,
            dataset_path: None,
            class_amplitude: SyntheticParams::default().class_amplitude,
            out_dir: PathBuf::from("runs"),
            classifier: None,
            epochs: t.epochs,
            lr: t.lr,
            batch_size: t.batch_size,
            dropout: 0.3,
            rotate: t.augmentation.rotate,
            full_rotation: t.augmentation.full_rotation,
            translation: t.augmentation.translation,
            center: false,
            select_best_val: t.select_best_val,
            model: ModelVariant::Model1,
            k: 40,
            c: 1.0,
            l2: r.l2,
            edge: r.edge,
            local_euclidean: r.local_euclidean,
            chamfer: r.chamfer,
            laplacian_smoothing: 0.0,
            laplacian: LaplacianKind::default(),
            target_seed: 0,
            resume: None,
            attack_lr: o.lr,
            max_iters: o.max_iters,
            patience: o.patience,
            tol: o.tol,
            c0: s.c0,
            c_growth: s.growth,
            c_rounds: s.rounds,
            c_bisect: s.bisect_steps,
            shape: None,
            target: None,
            k_sweep: vec![5, 10, 20, 40, 80],
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    /// Applies `key=value`; the value is read as a TOML literal, falling back
    /// to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{assignment}`")))?;
        let key = key.trim().replace('-', "_");
        let raw = raw.trim();
        let mut table = toml::Table::try_from(&*self).expect("config serializes to a table");
        let probe: toml::Table = toml::Table::try_from(Self::default()).expect("config serializes to a table");
        let optional = ["dataset_path", "classifier", "resume", "shape", "target"];
        if !probe.contains_key(&key) && !optional.contains(&key.as_str()) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        table.insert(key.clone(), value);
        let next: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("`{key}`: {}", e.message())))?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.k == 0 {
            return bad("k must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.attack_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.c0 > 0.0 && self.c_growth > 1.0) {
            return bad("c search needs c0 > 0 and c_growth > 1");
        }
        let w = [self.l2, self.edge, self.local_euclidean, self.chamfer, self.laplacian_smoothing, self.c];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("loss weights and c must be finite and non-negative");
        }
        Ok(())
    }

    pub fn recon_weights(&self) -> ReconWeights {
        ReconWeights {
            l2: self.l2,
            edge: self.edge,
            local_euclidean: self.local_euclidean,
            chamfer: self.chamfer,
        }
    }

    pub fn synthetic_params(&self) -> SyntheticParams {
        SyntheticParams {
            class_amplitude: self.class_amplitude,
            ..SyntheticParams::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed: self.seed,
            augmentation: Augmentation {
                rotate: self.rotate,
                full_rotation: self.full_rotation,
                translation: self.translation,
            },
            center: self.center,
            select_best_val: self.select_best_val,
        }
    }

    pub fn optim_config(&self) -> OptimConfig {
        OptimConfig {
            lr: self.attack_lr,
            max_iters: self.max_iters,
            patience: self.patience,
            tol: self.tol,
            recon: self.recon_weights(),
            smoothing_weight: self.laplacian_smoothing,
            laplacian: self.laplacian,
            center: self.center,
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            c0: self.c0,
            growth: self.c_growth,
            rounds: self.c_rounds,
            bisect_steps: self.c_bisect,
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            c: self.c,
            recon: self.recon_weights(),
            smoothing_weight: self.laplacian_smoothing,
            laplacian: self.laplacian,
            center: self.center,
            seed: self.seed,
        }
    }

    pub fn generator_arch(&self) -> Result<GeneratorArch> {
        match self.model {
            ModelVariant::Model1 => Ok(GeneratorArch::model1(self.k)),
            ModelVariant::Model2 => Ok(GeneratorArch::model2()),
            ModelVariant::Opt => Err(Error::Config("model `opt` has no generator".into())),
        }
    }

    pub fn model_kind(&self) -> Option<ModelKind> {
        match self.model {
            ModelVariant::Model1 => Some(ModelKind::Model1),
            ModelVariant::Model2 => Some(ModelKind::Model2),
            ModelVariant::Opt => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.set("target=3").unwrap();
        cfg.set("shape=tr_reg_001").unwrap();
        cfg.set("model=model2").unwrap();
        cfg.set("k_sweep=[5, 80]").unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.target, Some(3));
        assert_eq!(back.shape.as_deref(), Some("tr_reg_001"));
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = RunConfig::from_toml("bogus_key = 1").unwrap_err().to_string();
        assert!(e.contains("bogus_key"), "{e}");
        let e = RunConfig::default().set("another=2").unwrap_err().to_string();
        assert!(e.contains("another"), "{e}");
    }

    #[test]
    fn bad_values_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("k=0").is_err());
        assert!(cfg.set("k=abc").is_err());
        assert!(cfg.set("lr").is_err());
        assert_eq!(cfg, RunConfig::default());
    }
}
