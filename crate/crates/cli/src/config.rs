//! Run configuration files. A file holds up to four TOML tables, each
//! overriding the defaults of one component:
//!
//! ```toml
//! [scene]   # synthetic scene generator (gen-data)
//! [model]   # model architecture, on top of the preset
//! [train]   # optimizer and schedule, on top of the preset
//! [eval]    # metric selection
//! ```

use crate::error::CliError;
use bootplace_core::data::SyntheticSceneConfig;
use bootplace_core::eval::EvalSpec;
use bootplace_core::model::ModelConfig;
use bootplace_core::train::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::Path;
use toml::{Table, Value};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub scene: Table,
    #[serde(default)]
    pub model: Table,
    #[serde(default)]
    pub train: Table,
    #[serde(default)]
    pub eval: Table,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let de = toml::Deserializer::new(&text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            CliError::Config(format!(
                "{}: {}",
                path.display(),
                e.inner().message().trim()
            ))
        })
    }

    pub fn scene(&self) -> Result<SyntheticSceneConfig, CliError> {
        let c: SyntheticSceneConfig =
            overlay("scene", SyntheticSceneConfig::default(), &self.scene)?;
        c.validate()?;
        Ok(c)
    }

    pub fn model(&self, preset: ModelConfig) -> Result<ModelConfig, CliError> {
        let c: ModelConfig = overlay("model", preset, &self.model)?;
        c.validate()?;
        Ok(c)
    }

    pub fn train(&self, preset: TrainConfig) -> Result<TrainConfig, CliError> {
        let c: TrainConfig = overlay("train", preset, &self.train)?;
        c.validate()?;
        Ok(c)
    }

    pub fn eval(&self) -> Result<EvalSpec, CliError> {
        overlay("eval", EvalSpec::default(), &self.eval)
    }
}

/// Replaces the fields of `base` named in `table`, recursing into nested
/// tables, and reports the dotted path of the first offending field.
fn overlay<T: Serialize + DeserializeOwned>(
    section: &str,
    base: T,
    table: &Table,
) -> Result<T, CliError> {
    let mut value = Value::try_from(base).expect("defaults serialize to TOML");
    merge(&mut value, table);
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let at = if path == "." {
            section.to_string()
        } else {
            format!("{section}.{path}")
        };
        CliError::Config(format!("field `{at}`: {}", e.inner()))
    })
}

fn merge(base: &mut Value, table: &Table) {
    let Value::Table(dst) = base else {
        *base = Value::Table(table.clone());
        return;
    };
    for (k, v) in table {
        match (dst.get_mut(k), v) {
            (Some(existing @ Value::Table(_)), Value::Table(t)) => merge(existing, t),
            _ => {
                dst.insert(k.clone(), v.clone());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> ConfigFile {
        toml::from_str(text).unwrap()
    }

    #[test]
    fn overrides_keep_unnamed_fields() {
        let c = parse("[model]\nheads = 2\n[train]\nlr = 1e-3\n[train.box_loss]\nl1 = 2.0\n");
        let m = c.model(ModelConfig::desk()).unwrap();
        assert_eq!(m.heads, 2);
        assert_eq!(m.d_model, ModelConfig::desk().d_model);
        let t = c.train(TrainConfig::desk()).unwrap();
        assert_eq!(t.lr, 1e-3);
        assert_eq!(t.box_loss.l1, 2.0);
        assert_eq!(t.box_loss.giou, TrainConfig::desk().box_loss.giou);
        assert_eq!(t.batch_size, TrainConfig::desk().batch_size);
    }

    #[test]
    fn unknown_fields_are_named() {
        let err = parse("[train]\nlearning_rate = 1.0\n")
            .train(TrainConfig::default())
            .unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let err = parse("[scene]\nimage_size = \"big\"\n")
            .scene()
            .unwrap_err();
        assert!(err.to_string().contains("scene.image_size"), "{err}");
        assert!(toml::from_str::<ConfigFile>("[optimizer]\n").is_err());
    }
}
