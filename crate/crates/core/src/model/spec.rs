use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::distributions::DEFAULT_TEMPERATURE;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Flat,
    Hierarchical,
    MultiEntity,
    MultiEntityHierarchical,
}

impl Variant {
    pub fn is_hierarchical(self) -> bool {
        matches!(self, Variant::Hierarchical | Variant::MultiEntityHierarchical)
    }

    pub fn is_multi_entity(self) -> bool {
        matches!(self, Variant::MultiEntity | Variant::MultiEntityHierarchical)
    }
}

/// One parameter-sharing group: every entity in a group uses the same networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub name: String,
    pub dim_x: usize,
    /// Number of child label classes.
    pub dim_y: usize,
    /// Number of parent label classes (hierarchical variants only).
    pub dim_c: Option<usize>,
}

/// Architecture and hyperparameters of a model.
///
/// Entity 0 is the primary entity (the human); the remaining `N_o` entities
/// are summarized into its conditioning and receive the primary's in return.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub groups: Vec<GroupSpec>,
    /// Group index of each entity.
    pub entities: Vec<usize>,
    pub dim_z: usize,
    /// Width of the per-entity input lifting layer.
    pub lift_width: usize,
    /// Hidden width of the label and latent networks.
    pub net_width: usize,
    /// Hidden width of the observation decoder.
    pub decoder_width: usize,
    /// Width of each recurrent layer.
    pub hidden_width: usize,
    pub recurrent_layers: usize,
    pub temperature: f64,
    pub alpha: f64,
    pub dropout_rate: f64,
    /// Decode `x_{t+1} - x_t` instead of `x_{t+1}`.
    pub residual_mode: bool,
    /// Latent samples per step for the reconstruction expectation.
    pub latent_samples: usize,
}

impl ModelSpec {
    /// Single-entity model with small default widths.
    pub fn flat(dim_x: usize, dim_y: usize) -> Self {
        ModelSpec {
            variant: Variant::Flat,
            groups: vec![GroupSpec {
                name: "main".to_string(),
                dim_x,
                dim_y,
                dim_c: None,
            }],
            entities: vec![0],
            dim_z: 16,
            lift_width: 32,
            net_width: 32,
            decoder_width: 64,
            hidden_width: 32,
            recurrent_layers: 1,
            temperature: DEFAULT_TEMPERATURE,
            alpha: dim_x as f64,
            dropout_rate: 0.1,
            residual_mode: false,
            latent_samples: 1,
        }
    }

    /// Turns the spec hierarchical with `dim_c` parent classes on every group.
    pub fn with_parent(mut self, dim_c: usize) -> Self {
        for g in &mut self.groups {
            g.dim_c = Some(dim_c);
        }
        self.variant = if self.variant.is_multi_entity() {
            Variant::MultiEntityHierarchical
        } else {
            Variant::Hierarchical
        };
        self
    }

    /// Multi-entity spec: the primary group from `self` plus `n_others`
    /// entities sharing one extra group.
    pub fn with_others(mut self, other: GroupSpec, n_others: usize) -> Self {
        self.variant = if self.variant.is_hierarchical() {
            Variant::MultiEntityHierarchical
        } else {
            Variant::MultiEntity
        };
        self.groups.truncate(1);
        self.entities = vec![0];
        if n_others > 0 {
            self.groups.push(other);
            self.entities.extend(core::iter::repeat_n(1, n_others));
        }
        self.alpha = self.total_features() as f64;
        self
    }

    /// Applies one set of widths everywhere (decoder gets twice the width).
    pub fn with_width(mut self, width: usize, dim_z: usize, layers: usize) -> Self {
        self.lift_width = width;
        self.net_width = width;
        self.hidden_width = width;
        self.decoder_width = 2 * width;
        self.dim_z = dim_z;
        self.recurrent_layers = layers;
        self
    }

    /// Activity detection/anticipation preset: 256-wide networks, one recurrent
    /// layer, decoder 512.
    pub fn detection_preset(dim_x: usize, dim_y: usize) -> Self {
        let mut s = Self::flat(dim_x, dim_y).with_width(256, 256, 1);
        s.decoder_width = 512;
        s
    }

    /// Skeleton classification/motion preset: 516-wide networks, three
    /// recurrent layers, decoder 1032.
    pub fn skeleton_preset(dim_x: usize, dim_y: usize) -> Self {
        Self::flat(dim_x, dim_y).with_width(516, 516, 3)
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    /// Number of additional entities (`N_o`).
    pub fn n_others(&self) -> usize {
        self.entities.len().saturating_sub(1)
    }

    pub fn group_of(&self, entity: usize) -> &GroupSpec {
        &self.groups[self.entities[entity]]
    }

    /// Sum of observation dimensions over all entities.
    pub fn total_features(&self) -> usize {
        self.entities.iter().map(|&g| self.groups[g].dim_x).sum()
    }

    /// Lists every violated constraint.
    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        if self.groups.is_empty() {
            problems.push("no groups".into());
        }
        if self.entities.is_empty() {
            problems.push("at least one entity is required".into());
        }
        for (e, &g) in self.entities.iter().enumerate() {
            if g >= self.groups.len() {
                problems.push(format!("entity {e} refers to missing group {g}"));
            }
        }
        for g in &self.groups {
            if g.dim_x == 0 || g.dim_y == 0 {
                problems.push(format!("group `{}` needs dim_x >= 1 and dim_y >= 1", g.name));
            }
            match (self.variant.is_hierarchical(), g.dim_c) {
                (true, None) | (true, Some(0)) => {
                    problems.push(format!("hierarchical group `{}` needs dim_c >= 1", g.name))
                }
                (false, Some(_)) => {
                    problems.push(format!("non-hierarchical group `{}` must not set dim_c", g.name))
                }
                _ => {}
            }
        }
        let mut names: Vec<&str> = self.groups.iter().map(|g| g.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            problems.push("group names must be unique".into());
        }
        if !self.variant.is_multi_entity() && self.entities.len() != 1 {
            problems.push("single-entity variants take exactly one entity".into());
        }
        if self.dim_z == 0
            || self.lift_width == 0
            || self.net_width == 0
            || self.decoder_width == 0
            || self.hidden_width == 0
        {
            problems.push("all widths must be positive".into());
        }
        if self.recurrent_layers == 0 {
            problems.push("recurrent_layers must be >= 1".into());
        }
        if !(self.alpha > 0.0) {
            problems.push("alpha must be positive".into());
        }
        if !(self.temperature > 0.0) {
            problems.push("temperature must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            problems.push("dropout_rate must lie in [0, 1)".into());
        }
        if self.latent_samples == 0 {
            problems.push("latent_samples must be >= 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(problems.join("; ")))
        }
    }
}
