//! Run configuration: a TOML file whose sections overlay the typed library
//! configs, followed by command-line overrides.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use smash::model::ModelConfig;
use smash::objectives::Mode;
use smash::sampler::SamplerConfig;
use smash::trainer::{default_num_samples, TrainConfig};
use smash::uq::LevelGrid;

/// A level grid written either as `"start:stop:step"` or as a list.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    Range(String),
    List(Vec<f64>),
}

impl GridSpec {
    pub fn resolve(&self) -> Result<LevelGrid> {
        Ok(match self {
            GridSpec::Range(s) => LevelGrid::parse(s)?,
            GridSpec::List(v) => LevelGrid::new(v.clone())?,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelsSection {
    pub time: Option<GridSpec>,
    pub space: Option<GridSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Seed of the 80/10/10 train/valid/test split.
    #[serde(default)]
    pub split_seed: u64,
}

/// The config file as written. Sections are kept as raw tables until the
/// data shape is known.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub model: toml::Table,
    #[serde(default)]
    pub train: toml::Table,
    #[serde(default)]
    pub sampler: toml::Table,
    #[serde(default)]
    pub levels: LevelsSection,
    #[serde(default)]
    pub data: DataSection,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Mode named in `[train]`, if any.
    pub fn mode(&self) -> Result<Option<Mode>> {
        match self.train.get("mode") {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s.parse()?)),
            Some(other) => bail!("train.mode must be a string, got {other}"),
        }
    }
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: u64,
    pub mode: Option<Mode>,
    pub levels: Option<String>,
    pub num_samples: Option<usize>,
}

/// Fully resolved configuration; echoed into every artifact.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub time_levels: LevelGrid,
    pub space_levels: LevelGrid,
    pub data: DataSection,
}

fn overlay<T: Serialize + DeserializeOwned>(section: &str, base: &T, patch: &toml::Table) -> Result<T> {
    let mut table = match toml::Value::try_from(base)? {
        toml::Value::Table(t) => t,
        _ => unreachable!("configs serialize to tables"),
    };
    for (k, v) in patch {
        table.insert(k.clone(), v.clone());
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| anyhow::anyhow!("[{section}] {}", e.message()))
}

impl RunConfig {
    /// Resolves the file against data with `num_marks` marks and dimension
    /// `spatial_dim` (after any mode projection).
    pub fn resolve(file: &ConfigFile, num_marks: usize, spatial_dim: usize, ov: &Overrides) -> Result<Self> {
        let mode = match ov.mode {
            Some(m) => m,
            None => file.mode()?.unwrap_or_default(),
        };
        let mut train_base = TrainConfig::earthquake(0);
        train_base.sigma_x = vec![0.25; spatial_dim];
        train_base.mode = mode;
        let mut train = overlay("train", &train_base, &file.train)?;
        train.seed = ov.seed;
        train.mode = mode;
        train.validate(spatial_dim)?;

        let model = overlay("model", &ModelConfig::earthquake(num_marks, spatial_dim), &file.model)?;
        model.validate()?;

        let mut sampler_base = SamplerConfig::earthquake();
        sampler_base.sigma_t = train.sigma_t;
        sampler_base.sigma_x = train.sigma_x.clone();
        sampler_base.num_samples = default_num_samples(mode);
        let mut sampler = overlay("sampler", &sampler_base, &file.sampler)?;
        if let Some(q) = ov.num_samples {
            sampler.num_samples = q;
        }
        sampler.validate(spatial_dim)?;

        let default_time = match mode {
            Mode::Stpp => LevelGrid::stpp(),
            Mode::Tpp => LevelGrid::tpp(),
        };
        let mut time_levels = match &file.levels.time {
            Some(g) => g.resolve().context("[levels] time")?,
            None => default_time,
        };
        let mut space_levels = match &file.levels.space {
            Some(g) => g.resolve().context("[levels] space")?,
            None => LevelGrid::stpp(),
        };
        if let Some(spec) = &ov.levels {
            let g = LevelGrid::parse(spec).context("--levels")?;
            time_levels = g.clone();
            space_levels = g;
        }
        Ok(RunConfig {
            model,
            train,
            sampler,
            time_levels,
            space_levels,
            data: file.data.clone(),
        })
    }

    pub fn mode(&self) -> Mode {
        self.train.mode
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(seed: u64) -> Overrides {
        Overrides { seed, ..Default::default() }
    }

    #[test]
    fn empty_file_gives_reference_defaults() {
        let rc = RunConfig::resolve(&ConfigFile::default(), 2, 2, &ov(3)).unwrap();
        assert_eq!(rc.model, ModelConfig::earthquake(2, 2));
        assert_eq!(rc.train.seed, 3);
        assert_eq!(rc.train.alpha, 0.5);
        assert_eq!(rc.sampler.epsilon, 0.005);
        assert_eq!(rc.sampler.steps, 2000);
        assert_eq!(rc.sampler.num_samples, 300);
        assert_eq!(rc.time_levels, LevelGrid::stpp());
    }

    #[test]
    fn sections_overlay_and_flags_win() {
        let f = ConfigFile::parse(
            r#"
            [model]
            d_model = 8
            [train]
            lr = 0.01
            mode = "tpp"
            sigma_t = 0.3
            [sampler]
            steps = 10
            [levels]
            time = "0.8:1.0:0.05"
            "#,
        )
        .unwrap();
        let rc = RunConfig::resolve(&f, 2, 0, &ov(1)).unwrap();
        assert_eq!(rc.model.d_model, 8);
        assert_eq!(rc.train.lr, 0.01);
        assert_eq!(rc.mode(), Mode::Tpp);
        assert_eq!(rc.sampler.sigma_t, 0.3);
        assert_eq!(rc.sampler.steps, 10);
        assert_eq!(rc.sampler.num_samples, 100);
        assert_eq!(rc.time_levels.levels().len(), 5);

        let o = Overrides {
            seed: 1,
            mode: Some(Mode::Tpp),
            levels: Some("0.5:1.0:0.1".into()),
            num_samples: Some(7),
        };
        let rc = RunConfig::resolve(&f, 2, 0, &o).unwrap();
        assert_eq!(rc.time_levels, LevelGrid::stpp());
        assert_eq!(rc.sampler.num_samples, 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ConfigFile::parse("[bogus]\nx = 1").is_err());
        let f = ConfigFile::parse("[train]\nlearning_rate = 0.1").unwrap();
        let err = RunConfig::resolve(&f, 1, 0, &ov(0)).unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");
        assert!(ConfigFile::parse("[levels]\ntimes = [0.5]").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let f = ConfigFile::parse("[train]\nlr = -1.0").unwrap();
        assert!(RunConfig::resolve(&f, 1, 0, &ov(0)).is_err());
        let f = ConfigFile::parse("[levels]\ntime = \"1.0:0.5:0.1\"").unwrap();
        assert!(RunConfig::resolve(&f, 1, 0, &ov(0)).is_err());
    }
}
