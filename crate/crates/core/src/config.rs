//! `key = value` configuration files.
//!
//! One entry per line; `#` starts a comment; lists are comma separated.
//! Every key must be known to the component the file is applied to.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::preprocess::AugmentParams;
use crate::scene::{GeneratorConfig, ShapeKind};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfigFile {
    pub path: PathBuf,
    pub entries: Vec<Entry>,
}

impl ConfigFile {
    pub fn parse(text: &str, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let mut entries: Vec<Entry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(&path, format!("line {}: expected `key = value`", i + 1)))?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::parse(&path, format!("line {}: empty key", i + 1)));
            }
            if entries.iter().any(|e| e.key == key) {
                return Err(Error::parse(&path, format!("line {}: duplicate key `{key}`", i + 1)));
            }
            entries.push(Entry {
                key,
                value: value.trim().to_string(),
                line: i + 1,
            });
        }
        Ok(ConfigFile { path, entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    fn err(&self, e: &Entry, msg: impl Display) -> Error {
        Error::parse(&self.path, format!("line {}: `{}`: {msg}", e.line, e.key))
    }

    fn scalar<T: FromStr>(&self, e: &Entry) -> Result<T>
    where
        T::Err: Display,
    {
        e.value.parse().map_err(|err| self.err(e, err))
    }

    fn list<T: FromStr>(&self, e: &Entry) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        e.value
            .split(',')
            .map(|v| v.trim().parse().map_err(|err| self.err(e, err)))
            .collect()
    }

    fn array<T: FromStr + Copy + Default, const N: usize>(&self, e: &Entry) -> Result<[T; N]>
    where
        T::Err: Display,
    {
        let v = self.list::<T>(e)?;
        if v.len() != N {
            return Err(self.err(e, format!("expected {N} comma-separated values")));
        }
        let mut out = [T::default(); N];
        out.copy_from_slice(&v);
        Ok(out)
    }

    fn boolean(&self, e: &Entry) -> Result<bool> {
        match e.value.as_str() {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(self.err(e, "expected true or false")),
        }
    }

    /// Applies every entry to a generator configuration.
    pub fn apply_generator(&self, cfg: &mut GeneratorConfig) -> Result<()> {
        for e in &self.entries {
            match e.key.as_str() {
                "canvas_size" => cfg.canvas_size = self.scalar(e)?,
                "object_count_range" => cfg.object_count_range = self.array(e)?,
                "shape_set" => cfg.shape_set = self.list::<ShapeKind>(e)?,
                "object_depth_range" => cfg.object_depth_range = self.array(e)?,
                "background_depth" => cfg.background_depth = self.scalar(e)?,
                "foam_cover_fraction_range" => cfg.foam_cover_fraction_range = self.array(e)?,
                "foam_disc_radius_range" => cfg.foam_disc_radius_range = self.array(e)?,
                "color_noise_std" => cfg.color_noise_std = self.scalar(e)?,
                "major_extent_range" => cfg.major_extent_range = self.array(e)?,
                "minor_extent_range" => cfg.minor_extent_range = self.array(e)?,
                "seed" => cfg.seed = self.scalar(e)?,
                _ => return Err(Error::UnknownKey(e.key.clone())),
            }
        }
        cfg.validate()
    }

    /// Applies every entry to the model and training configurations. A
    /// `preset` entry is applied first; `seed` sets both seeds.
    pub fn apply_training(&self, model: &mut ModelConfig, train: &mut TrainConfig) -> Result<()> {
        if let Some(e) = self.entries.iter().find(|e| e.key == "preset") {
            let seed = model.seed;
            *model = ModelConfig::preset(&e.value)?;
            model.seed = seed;
        }
        for e in &self.entries {
            if apply_augment(self, e, &mut train.augment)? {
                continue;
            }
            match e.key.as_str() {
                "preset" => {}
                "input_size" => model.input_size = self.scalar(e)?,
                "stem_channels" => model.stem_channels = self.scalar(e)?,
                "stage_channels" => model.stage_channels = self.array(e)?,
                "blocks_per_stage" => model.blocks_per_stage = self.array(e)?,
                "block" => model.block = self.scalar(e)?,
                "decoder_channels" => model.decoder_channels = self.array(e)?,
                "fusion" | "fusion_strategy" => model.fusion = self.scalar(e)?,
                "depth_as_3ch" => model.depth_as_3ch = self.boolean(e)?,
                "norm_groups" => model.norm_groups = self.scalar(e)?,
                "learning_rate" => train.learning_rate = self.scalar(e)?,
                "weight_decay" => train.weight_decay = self.scalar(e)?,
                "beta1" => train.beta1 = self.scalar(e)?,
                "beta2" => train.beta2 = self.scalar(e)?,
                "betas" => [train.beta1, train.beta2] = self.array(e)?,
                "epsilon" => train.epsilon = self.scalar(e)?,
                "batch_size" => train.batch_size = self.scalar(e)?,
                "micro_batch" => train.micro_batch = self.scalar(e)?,
                "total_iterations" | "iterations" => train.total_iterations = self.scalar(e)?,
                "eval_every" => train.eval_every = self.scalar(e)?,
                "seed" => {
                    train.seed = self.scalar(e)?;
                    model.seed = train.seed;
                }
                _ => return Err(Error::UnknownKey(e.key.clone())),
            }
        }
        model.validate()?;
        train.validate()
    }
}

fn apply_augment(file: &ConfigFile, e: &Entry, a: &mut AugmentParams) -> Result<bool> {
    match e.key.as_str() {
        "dilate_radius_range" => a.dilate_radius_range = file.array(e)?,
        "erode_radius_range" => a.erode_radius_range = file.array(e)?,
        "blur_sigma_range" => a.blur_sigma_range = file.array(e)?,
        "dilate_probability" => a.dilate_probability = file.scalar(e)?,
        "erode_probability" => a.erode_probability = file.scalar(e)?,
        "blur_probability" => a.blur_probability = file.scalar(e)?,
        _ => return Ok(false),
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FusionStrategy;

    #[test]
    fn parses_generator_keys() {
        let text = "# scenes\ncanvas_size = 96\nobject_count_range = 3, 3  # fixed\nshape_set = rectangle,ellipse\nseed=7\n";
        let f = ConfigFile::parse(text, "g.cfg").unwrap();
        let mut g = GeneratorConfig::default();
        f.apply_generator(&mut g).unwrap();
        assert_eq!(g.canvas_size, 96);
        assert_eq!(g.object_count_range, [3, 3]);
        assert_eq!(g.shape_set, vec![ShapeKind::Rectangle, ShapeKind::Ellipse]);
        assert_eq!(g.seed, 7);
    }

    #[test]
    fn unknown_key_is_named() {
        let f = ConfigFile::parse("canvas = 3\n", "g.cfg").unwrap();
        let err = f.apply_generator(&mut GeneratorConfig::default()).unwrap_err();
        assert!(matches!(&err, Error::UnknownKey(k) if k == "canvas"));
        assert!(err.to_string().contains("canvas"));
    }

    #[test]
    fn bad_values_and_lines() {
        assert!(ConfigFile::parse("novalue\n", "x").is_err());
        assert!(ConfigFile::parse("a = 1\na = 2\n", "x").is_err());
        let f = ConfigFile::parse("object_count_range = 3\n", "x").unwrap();
        assert!(f.apply_generator(&mut GeneratorConfig::default()).is_err());
        let f = ConfigFile::parse("canvas_size = big\n", "x").unwrap();
        let msg = f.apply_generator(&mut GeneratorConfig::default()).unwrap_err().to_string();
        assert!(msg.contains("line 1") && msg.contains("canvas_size"));
    }

    #[test]
    fn training_keys() {
        let text = "preset = tiny\nfusion = stacked6ch\nlearning_rate = 0.001\nbetas = 0.8, 0.99\ntotal_iterations = 20\neval_every = 10\nseed = 3\nblur_probability = 0\n";
        let f = ConfigFile::parse(text, "t.cfg").unwrap();
        let mut m = ModelConfig::desk();
        let mut t = TrainConfig::default();
        f.apply_training(&mut m, &mut t).unwrap();
        assert_eq!(m.stage_channels, ModelConfig::tiny().stage_channels);
        assert_eq!(m.fusion, FusionStrategy::Stacked);
        assert_eq!((t.beta1, t.beta2), (0.8, 0.99));
        assert_eq!(t.learning_rate, 0.001);
        assert_eq!((t.seed, m.seed), (3, 3));
        assert_eq!(t.augment.blur_probability, 0.0);
        let f = ConfigFile::parse("lr = 1\n", "t.cfg").unwrap();
        assert!(matches!(f.apply_training(&mut m, &mut t), Err(Error::UnknownKey(_))));
    }
}
