//! On-disk dataset layout:
//!
//! ```text
//! scene.json            scene description (synthetic datasets only)
//! lidar.ply             LiDAR points with normals
//! cameras/NNN.json      reference poses
//! cameras_init/NNN.json perturbed poses to be refined by `align`
//! images/NNN.png        photographs
//! truth/NNN_depth.pfm   ground-truth depth (synthetic datasets only)
//! split.json            train/val/test view indices
//! features.csv          image_id,u,v[,x,y,z]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lgsplat_core::{io, DistortedCamera, Image};
use serde::{Deserialize, Serialize};

pub const CAMERAS: &str = "cameras";
pub const CAMERAS_INIT: &str = "cameras_init";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub struct Dataset {
    pub root: PathBuf,
}

pub fn view_name(i: usize) -> String {
    format!("{i:03}")
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            bail!("dataset directory {} does not exist", root.display());
        }
        Ok(Dataset { root: root.to_path_buf() })
    }

    pub fn lidar_path(&self) -> PathBuf {
        self.root.join("lidar.ply")
    }

    pub fn features_path(&self) -> PathBuf {
        self.root.join("features.csv")
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join("images").join(format!("{}.png", view_name(i)))
    }

    pub fn truth_depth_path(&self, i: usize) -> PathBuf {
        self.root.join("truth").join(format!("{}_depth.pfm", view_name(i)))
    }

    /// Camera directory: absolute, or relative to the dataset root.
    pub fn camera_dir(&self, name: &str) -> PathBuf {
        let p = Path::new(name);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// All `NNN.json` cameras of a directory, in index order; indices must
    /// be contiguous from 0.
    pub fn cameras(&self, dir_name: &str) -> Result<Vec<DistortedCamera>> {
        let dir = self.camera_dir(dir_name);
        let mut names: Vec<String> = fs::read_dir(&dir)
            .with_context(|| format!("reading camera directory {}", dir.display()))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.strip_suffix(".json").is_some_and(|stem| stem.bytes().all(|c| c.is_ascii_digit())))
            .collect();
        names.sort();
        if names.is_empty() {
            bail!("no cameras in {}", dir.display());
        }
        names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                if *name != format!("{}.json", view_name(i)) {
                    bail!("camera files in {} are not numbered 000.json, 001.json, ...", dir.display());
                }
                Ok(DistortedCamera::load(&dir.join(name))?)
            })
            .collect()
    }

    pub fn image(&self, i: usize) -> Result<Image> {
        Ok(io::load_png(&self.image_path(i))?)
    }

    pub fn split(&self) -> Result<Split> {
        let path = self.root.join("split.json");
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Ground-truth depth and validity, when the dataset has it.
    pub fn truth_depth(&self, i: usize) -> Result<Option<(Vec<f64>, Vec<bool>)>> {
        let path = self.truth_depth_path(i);
        if !path.exists() {
            return Ok(None);
        }
        let (_, _, _, depth) = io::load_pfm(&path)?;
        let valid = depth.iter().map(|d| *d > 0.0).collect();
        Ok(Some((depth, valid)))
    }
}

pub fn save_cameras(dir: &Path, cams: &[DistortedCamera]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (i, cam) in cams.iter().enumerate() {
        cam.save(&dir.join(format!("{}.json", view_name(i))))?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
