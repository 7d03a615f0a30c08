//! Human-readable dataset manifest.
//!
//! ```text
//! # memseg dataset manifest
//! version = 1
//! seed = 42
//! size = 64
//! num_classes = 4
//! modalities = intensity,distance,edge_event
//! scene scene_0000 scene_0000/intensity.ras scene_0000/distance.ras scene_0000/edge_event.ras scene_0000/label.ras
//! ```
//!
//! Frame paths appear in modality order; the last path is the label raster.
//! All paths are relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct SceneEntry {
    pub scene_id: String,
    pub frame_paths: Vec<PathBuf>,
    pub label_path: PathBuf,
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub seed: u64,
    pub size: usize,
    pub num_classes: usize,
    pub modalities: Vec<String>,
    pub samples: Vec<SceneEntry>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("# memseg dataset manifest\n");
        out.push_str("version = 1\n");
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("size = {}\n", self.size));
        out.push_str(&format!("num_classes = {}\n", self.num_classes));
        out.push_str(&format!("modalities = {}\n", self.modalities.join(",")));
        for s in &self.samples {
            out.push_str(&format!("scene {}", s.scene_id));
            for p in &s.frame_paths {
                out.push_str(&format!(" {}", p.display()));
            }
            out.push_str(&format!(" {}\n", s.label_path.display()));
        }
        super::raster::atomic_write(path, out.as_bytes())
    }

    /// Parse a manifest and verify that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let mut seed = None;
        let mut size = None;
        let mut num_classes = None;
        let mut modalities: Vec<String> = Vec::new();
        let mut samples = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("scene ") {
                let fields: Vec<&str> = rest.split_whitespace().collect();
                if fields.len() != modalities.len() + 2 {
                    return Err(Error::Parse(format!(
                        "manifest line {}: expected scene id + {} paths",
                        lineno + 1,
                        modalities.len() + 1
                    )));
                }
                samples.push(SceneEntry {
                    scene_id: fields[0].to_string(),
                    frame_paths: fields[1..fields.len() - 1]
                        .iter()
                        .map(PathBuf::from)
                        .collect(),
                    label_path: PathBuf::from(fields[fields.len() - 1]),
                });
            } else if let Some((key, value)) = line.split_once('=') {
                let (key, value) = (key.trim(), value.trim());
                match key {
                    "version" => {
                        if value != "1" {
                            return Err(Error::Parse(format!(
                                "unsupported manifest version {value}"
                            )));
                        }
                    }
                    "seed" => seed = Some(parse_num(value, lineno)?),
                    "size" => size = Some(parse_num(value, lineno)? as usize),
                    "num_classes" => num_classes = Some(parse_num(value, lineno)? as usize),
                    "modalities" => {
                        modalities = value.split(',').map(|s| s.trim().to_string()).collect()
                    }
                    _ => {
                        return Err(Error::Parse(format!(
                            "manifest line {}: unknown key {key}",
                            lineno + 1
                        )))
                    }
                }
            } else {
                return Err(Error::Parse(format!(
                    "manifest line {}: unparsable",
                    lineno + 1
                )));
            }
        }
        let m = DatasetManifest {
            root,
            seed: seed.ok_or_else(|| Error::Parse("manifest missing seed".into()))?,
            size: size.ok_or_else(|| Error::Parse("manifest missing size".into()))?,
            num_classes: num_classes
                .ok_or_else(|| Error::Parse("manifest missing num_classes".into()))?,
            modalities,
            samples,
        };
        for s in &m.samples {
            for p in s.frame_paths.iter().chain(std::iter::once(&s.label_path)) {
                let full = m.root.join(p);
                if !full.exists() {
                    return Err(Error::Parse(format!(
                        "manifest references missing file {}",
                        full.display()
                    )));
                }
            }
        }
        Ok(m)
    }

    pub fn frame_path(&self, scene: &SceneEntry, modality_idx: usize) -> PathBuf {
        self.root.join(&scene.frame_paths[modality_idx])
    }

    pub fn label_path(&self, scene: &SceneEntry) -> PathBuf {
        self.root.join(&scene.label_path)
    }
}

fn parse_num(v: &str, lineno: usize) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::Parse(format!("manifest line {}: bad number {v}", lineno + 1)))
}
