use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::model::{LabelChoice, ModelSpec, StepLabels};

/// Frames of one entity, plus optional labels that override the recording's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityTrack {
    pub role: String,
    /// Name of the parameter-sharing group this entity belongs to.
    pub group: String,
    /// `T` frames of `dim_x` values.
    pub frames: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<Option<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parents: Option<Vec<Option<usize>>>,
}

impl EntityTrack {
    pub fn new(role: impl Into<String>, group: impl Into<String>, frames: Vec<Vec<f64>>) -> Self {
        EntityTrack {
            role: role.into(),
            group: group.into(),
            frames,
            labels: None,
            parents: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }
}

/// One recording: aligned entity tracks and per-frame child (`labels`) and
/// parent (`parents`) annotations, `None` meaning unobserved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub id: String,
    pub entities: Vec<EntityTrack>,
    pub labels: Vec<Option<usize>>,
    /// Empty for recordings without parent annotations.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub parents: Vec<Option<usize>>,
}

impl Sequence {
    /// Single-entity recording in group `main`.
    pub fn single(id: impl Into<String>, frames: Vec<Vec<f64>>, labels: Vec<Option<usize>>) -> Self {
        Sequence {
            id: id.into(),
            entities: alloc::vec![EntityTrack::new("subject", "main", frames)],
            labels,
            parents: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn fail(&self, detail: String) -> Error {
        Error::InvalidData(format!("recording `{}`: {detail}", self.id))
    }

    /// Structural checks that do not need a model spec.
    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        if self.entities.is_empty() {
            return Err(self.fail("no entities".into()));
        }
        if !self.parents.is_empty() && self.parents.len() != t {
            return Err(self.fail(format!("parents has {} entries, expected {t}", self.parents.len())));
        }
        for (e, track) in self.entities.iter().enumerate() {
            if track.frames.len() != t {
                return Err(self.fail(format!(
                    "entities[{e}].frames has {} frames, expected {t}",
                    track.frames.len()
                )));
            }
            let dim = track.dim();
            for (i, f) in track.frames.iter().enumerate() {
                if f.len() != dim || dim == 0 {
                    return Err(self.fail(format!("entities[{e}].frames[{i}] has {} values, expected {dim}", f.len())));
                }
                if f.iter().any(|v| !v.is_finite()) {
                    return Err(self.fail(format!("entities[{e}].frames[{i}] is not finite")));
                }
            }
            for (field, own, shared) in [
                ("labels", &track.labels, &self.labels),
                ("parents", &track.parents, &self.parents),
            ] {
                let Some(own) = own else { continue };
                if own.len() != t {
                    return Err(self.fail(format!("entities[{e}].{field} has {} entries, expected {t}", own.len())));
                }
                if shared.is_empty() {
                    if own.iter().any(Option::is_some) && field == "parents" {
                        return Err(self.fail(format!("entities[{e}].parents given but the recording has none")));
                    }
                    continue;
                }
                if let Some(i) = (0..t).find(|&i| own[i].is_some() != shared[i].is_some()) {
                    return Err(self.fail(format!(
                        "entities[{e}].{field}[{i}] observed state differs from the recording's"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Checks the recording against a model: entity count, groups, widths and
    /// label ranges.
    pub fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        self.validate()?;
        if self.entities.len() != spec.n_entities() {
            return Err(self.fail(format!(
                "{} entities, model expects {}",
                self.entities.len(),
                spec.n_entities()
            )));
        }
        for (e, track) in self.entities.iter().enumerate() {
            let g = spec.group_of(e);
            if track.group != g.name {
                return Err(self.fail(format!("entities[{e}].group is `{}`, model expects `{}`", track.group, g.name)));
            }
            if !self.is_empty() && track.dim() != g.dim_x {
                return Err(self.fail(format!("entities[{e}] has dim {}, model expects {}", track.dim(), g.dim_x)));
            }
            for t in 0..self.len() {
                if let Some(y) = self.child_label(e, t) {
                    if y >= g.dim_y {
                        return Err(self.fail(format!("label {y} at frame {t} exceeds {} classes", g.dim_y)));
                    }
                }
                match (self.parent_label(e, t), g.dim_c) {
                    (Some(c), Some(n)) if c >= n => {
                        return Err(self.fail(format!("parent label {c} at frame {t} exceeds {n} classes")))
                    }
                    (Some(_), None) => {
                        return Err(self.fail("parent labels given to a flat model".into()));
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn frame(&self, entity: usize, t: usize) -> Array {
        Array::row(&self.entities[entity].frames[t])
    }

    pub fn frames_at(&self, t: usize) -> Vec<Array> {
        (0..self.entities.len()).map(|e| self.frame(e, t)).collect()
    }

    pub fn child_label(&self, entity: usize, t: usize) -> Option<usize> {
        match &self.entities[entity].labels {
            Some(own) => own[t],
            None => self.labels[t],
        }
    }

    pub fn parent_label(&self, entity: usize, t: usize) -> Option<usize> {
        match &self.entities[entity].parents {
            Some(own) => own[t],
            None => self.parents.get(t).copied().flatten(),
        }
    }

    pub fn step_labels(&self, t: usize) -> Vec<StepLabels> {
        (0..self.entities.len())
            .map(|e| StepLabels {
                y: LabelChoice::from_option(self.child_label(e, t)),
                c: LabelChoice::from_option(self.parent_label(e, t)),
            })
            .collect()
    }

    /// Copy with every label hidden.
    pub fn unlabeled(&self) -> Sequence {
        let mut s = self.clone();
        s.labels.iter_mut().for_each(|l| *l = None);
        s.parents.iter_mut().for_each(|l| *l = None);
        for track in &mut s.entities {
            for v in track.labels.iter_mut().chain(track.parents.iter_mut()) {
                v.iter_mut().for_each(|l| *l = None);
            }
        }
        s
    }

    /// First `n` frames.
    pub fn prefix(&self, n: usize) -> Sequence {
        self.window(0, n.min(self.len()))
    }

    /// Frames `start..end`.
    pub fn window(&self, start: usize, end: usize) -> Sequence {
        let cut = |v: &Vec<Option<usize>>| if v.is_empty() { Vec::new() } else { v[start..end].to_vec() };
        Sequence {
            id: self.id.clone(),
            entities: self
                .entities
                .iter()
                .map(|tr| EntityTrack {
                    role: tr.role.clone(),
                    group: tr.group.clone(),
                    frames: tr.frames[start..end].to_vec(),
                    labels: tr.labels.as_ref().map(cut),
                    parents: tr.parents.as_ref().map(cut),
                })
                .collect(),
            labels: self.labels[start..end].to_vec(),
            parents: cut(&self.parents),
        }
    }

    /// Number of observed child labels on the recording level.
    pub fn observed_labels(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count() + self.parents.iter().filter(|l| l.is_some()).count()
    }
}
