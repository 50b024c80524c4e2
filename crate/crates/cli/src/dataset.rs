//! On-disk layout of a synthetic dataset.
//!
//! ```text
//! DIR/dataset.json
//! DIR/template.smgm            DIR/template_labels.smgm
//! DIR/atlas_mean.smgm          DIR/atlas_var.smgm
//! DIR/subjects/sub-000/{features,labels,velocity,true_phi,true_inverse}.smgm
//! ```
//! Every file has a `.prov.json` sidecar.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use spherewarp_core::synth::{CohortSpec, Frame};
use spherewarp_core::{Atlas, FeatureMap, LabelMap};

use crate::error::{CliError, Result};
use crate::format::read_map;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub rows: usize,
    pub cols: usize,
    pub subjects: usize,
    pub amplitude: f64,
    pub noise: f64,
    pub regions: usize,
    pub velocity_degree: usize,
    pub template_degree: usize,
    pub polar_emphasis: bool,
    pub seed: u64,
    /// `(θ, φ)` of the north pole used to render the dataset.
    pub pole: Option<[f64; 2]>,
}

impl DatasetManifest {
    pub fn from_spec(spec: &CohortSpec, pole: Option<[f64; 2]>) -> Self {
        Self {
            rows: spec.rows,
            cols: spec.cols,
            subjects: spec.subjects,
            amplitude: spec.amplitude,
            noise: spec.noise,
            regions: spec.regions,
            velocity_degree: spec.velocity_degree,
            template_degree: spec.template_degree,
            polar_emphasis: spec.polar_emphasis,
            seed: spec.seed,
            pole,
        }
    }

    pub fn spec(&self) -> CohortSpec {
        CohortSpec {
            rows: self.rows,
            cols: self.cols,
            subjects: self.subjects,
            amplitude: self.amplitude,
            velocity_degree: self.velocity_degree,
            template_degree: self.template_degree,
            regions: self.regions,
            noise: self.noise,
            polar_emphasis: self.polar_emphasis,
            seed: self.seed,
        }
    }

    pub fn frame(&self) -> Frame {
        match self.pole {
            Some([theta, phi]) => Frame::pole_at(theta, phi),
            None => Frame::identity(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetLayout {
    root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("dataset.json")
    }

    pub fn template(&self) -> PathBuf {
        self.root.join("template.smgm")
    }

    pub fn template_labels(&self) -> PathBuf {
        self.root.join("template_labels.smgm")
    }

    pub fn atlas_mean(&self) -> PathBuf {
        self.root.join("atlas_mean.smgm")
    }

    pub fn atlas_var(&self) -> PathBuf {
        self.root.join("atlas_var.smgm")
    }

    pub fn subject_dir(&self, k: usize) -> PathBuf {
        self.root.join("subjects").join(format!("sub-{k:03}"))
    }

    pub fn features(&self, k: usize) -> PathBuf {
        self.subject_dir(k).join("features.smgm")
    }

    pub fn labels(&self, k: usize) -> PathBuf {
        self.subject_dir(k).join("labels.smgm")
    }

    pub fn velocity(&self, k: usize) -> PathBuf {
        self.subject_dir(k).join("velocity.smgm")
    }

    pub fn true_phi(&self, k: usize) -> PathBuf {
        self.subject_dir(k).join("true_phi.smgm")
    }

    pub fn true_inverse(&self, k: usize) -> PathBuf {
        self.subject_dir(k).join("true_inverse.smgm")
    }

    pub fn read_manifest(&self) -> Result<DatasetManifest> {
        let path = self.manifest();
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::from(e).context(path.display()))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    /// Atlas statistics and the atlas parcellation.
    pub fn load_atlas(&self) -> Result<(Atlas, LabelMap)> {
        let mean = load_feature(&self.atlas_mean())?;
        let var = load_variance(&self.atlas_var())?;
        let labels = load_labels(&self.template_labels())?;
        Ok((Atlas::new(mean, var, None)?, labels))
    }

    /// Features and labels of the first `count` subjects.
    pub fn load_subjects(&self, count: usize) -> Result<Vec<(FeatureMap, LabelMap)>> {
        (0..count).map(|k| Ok((load_feature(&self.features(k))?, load_labels(&self.labels(k))?))).collect()
    }
}

pub fn load_feature(path: &Path) -> Result<FeatureMap> {
    read_map(path).and_then(|m| m.into_feature()).map_err(|e| CliError::from(e).context(path.display()))
}

pub fn load_variance(path: &Path) -> Result<FeatureMap> {
    read_map(path).and_then(|m| m.into_variance()).map_err(|e| CliError::from(e).context(path.display()))
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    read_map(path).and_then(|m| m.into_labels()).map_err(|e| CliError::from(e).context(path.display()))
}
