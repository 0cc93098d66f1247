//! Run configuration: one TOML file with `[data]`, `[model]`, `[train]` and
//! `[bins]` tables, every key optional.

use std::path::Path;

use mstr_core::model::{DecoderVariant, ModelConfig};
use mstr_core::synth::{BinConfig, Preset, SceneConfig};
use mstr_core::train::TrainConfig;
use mstr_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Scenes written by `generate`.
    pub scenes: usize,
    #[serde(flatten)]
    pub scene: SceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenes: 32,
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    #[serde(flatten)]
    pub core: TrainConfig,
    /// Write an intermediate checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            core: TrainConfig::default(),
            checkpoint_every: 500,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub bins: BinConfig,
}

/// Ablation switch names accepted on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Toggle {
    MultiScale,
    Deformable,
    DualEntity,
    EntityContext,
}

impl std::str::FromStr for Toggle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ms" | "multi_scale" => Ok(Self::MultiScale),
            "da" | "deformable" => Ok(Self::Deformable),
            "de" | "dual_entity" => Ok(Self::DualEntity),
            "ec" | "entity_context" => Ok(Self::EntityContext),
            _ => Err(Error::Config(format!("unknown toggle {s:?}; expected ms, da, de or ec"))),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub variant: Option<DecoderVariant>,
    pub disable: Vec<Toggle>,
    pub scenes: Option<usize>,
    pub preset: Option<Preset>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {}", e.message())))
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.variant {
            self.model.variant = v;
        }
        let t = &mut self.model.toggles;
        for toggle in &o.disable {
            match toggle {
                Toggle::MultiScale => t.multi_scale = false,
                Toggle::Deformable => t.deformable = false,
                Toggle::DualEntity => t.dual_entity = false,
                Toggle::EntityContext => t.entity_context = false,
            }
        }
        if let Some(n) = o.scenes {
            self.data.scenes = n;
        }
        if let Some(p) = o.preset {
            self.data.scene.preset = p;
        }
        if let Some(s) = o.steps {
            self.train.core.steps = s;
        }
        if let Some(lr) = o.lr {
            self.train.core.optimizer.lr = lr;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.scene.validate()?;
        self.model.validate()?;
        self.train.core.validate()?;
        self.bins.validate()?;
        self.check_scene_config(&self.data.scene)
    }

    /// Scenes fed to the model must match its input size and label spaces.
    pub fn check_scene_config(&self, scene: &SceneConfig) -> Result<()> {
        let m = &self.model;
        if scene.image_size != m.image_size || scene.num_classes != m.num_classes || scene.num_actions != m.num_actions {
            return Err(Error::Config(format!(
                "scenes are {}px with {} classes and {} actions, model expects {}px, {} classes, {} actions",
                scene.image_size, scene.num_classes, scene.num_actions, m.image_size, m.num_classes, m.num_actions
            )));
        }
        Ok(())
    }

    /// Binning used for reports. The distance cut defaults to the scene
    /// generator's bands so that preset contracts show up in the counts.
    pub fn bin_config(&self) -> BinConfig {
        let mut b = self.bins.clone();
        if b.distance.is_none() {
            b.distance = Some(self.data.scene.distance_thresholds);
        }
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mstr_core::model::Toggles;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.data.scene.preset = Preset::Distant;
        c.model.variant = DecoderVariant::MergeInput;
        c.train.core.steps = 17;
        c.bins.human_size = Some((0.01, 0.05));
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn reads_short_toggle_names() {
        let c = RunConfig::from_toml(
            "[data]\npreset = \"h>o\"\nscenes = 4\n[model.toggles]\nec = false\n[train]\nsteps = 3\n[train.optimizer]\nlr = 0.5\n",
        )
        .unwrap();
        assert_eq!(c.data.scenes, 4);
        assert_eq!(c.data.scene.preset, Preset::HumanLarger);
        assert!(!c.model.toggles.entity_context);
        assert_eq!(c.train.core.steps, 3);
        assert_eq!(c.train.core.optimizer.lr, 0.5);
    }

    #[test]
    fn unknown_top_level_table_is_rejected() {
        assert!(matches!(RunConfig::from_toml("[modle]\nchannels = 8\n"), Err(Error::Config(_))));
    }

    #[test]
    fn inconsistent_toggles_name_the_dependency() {
        let mut c = RunConfig::default();
        c.model.toggles = Toggles {
            dual_entity: false,
            ..Toggles::default()
        };
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("entity_context requires dual_entity"), "{msg}");

        let mut c = RunConfig::default();
        c.apply(&Overrides {
            disable: vec![Toggle::Deformable],
            ..Overrides::default()
        });
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("dual_entity requires deformable"), "{msg}");
    }

    #[test]
    fn scene_and_model_must_agree() {
        let mut c = RunConfig::default();
        c.data.scene.num_classes = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_apply() {
        let mut c = RunConfig::default();
        c.apply(&Overrides {
            variant: Some(DecoderVariant::NaiveDeformable),
            disable: vec!["de".parse().unwrap(), "EC".parse().unwrap()],
            scenes: Some(9),
            preset: Some(Preset::Distant),
            steps: Some(0),
            lr: Some(0.01),
        });
        c.validate().unwrap();
        assert_eq!(c.data.scenes, 9);
        assert_eq!(c.train.core.steps, 0);
        assert!("xx".parse::<Toggle>().is_err());
    }

    #[test]
    fn report_bins_default_to_generator_distance_bands() {
        let c = RunConfig::default();
        assert_eq!(c.bin_config().distance, Some(c.data.scene.distance_thresholds));
    }
}
