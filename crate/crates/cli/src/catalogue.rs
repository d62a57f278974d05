//! On-disk stimulus catalogue: `manifest.json` plus one directory per item
//! holding a WAV per condition and the two stems.

use std::fs;
use std::path::{Path, PathBuf};

use drmx_core::audio::{read_wav, write_wav, AudioBuffer, WavEncoding};
use drmx_core::session::CatalogueItem;
use drmx_core::{BackgroundClass, Condition, StimulusSet};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CatalogueError {
    #[error("io on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad manifest: {0}")]
    Manifest(String),
    #[error("unknown item: {0}")]
    UnknownItem(String),
    #[error(transparent)]
    Audio(#[from] drmx_core::AudioError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub item_id: String,
    pub class: BackgroundClass,
    pub sample_rate: u32,
    pub conditions: Vec<Condition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub items: Vec<ManifestItem>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CatalogueError + '_ {
    move |source| CatalogueError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes one item's stimuli and stems under `root/<item_id>/`.
pub fn save_item(
    root: &Path,
    set: &StimulusSet,
    speech: &AudioBuffer,
    background: &AudioBuffer,
) -> Result<ManifestItem, CatalogueError> {
    let dir = root.join(&set.item_id);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for st in &set.stimuli {
        write_wav(
            &st.audio,
            dir.join(format!("{}.wav", st.condition.name())),
            WavEncoding::Float32,
        )?;
    }
    write_wav(speech, dir.join("speech.wav"), WavEncoding::Float32)?;
    write_wav(background, dir.join("background.wav"), WavEncoding::Float32)?;
    let sample_rate = set
        .stimuli
        .first()
        .map(|s| s.audio.sample_rate())
        .unwrap_or(speech.sample_rate());
    Ok(ManifestItem {
        item_id: set.item_id.clone(),
        class: set.class,
        sample_rate,
        conditions: set.stimuli.iter().map(|s| s.condition).collect(),
    })
}

pub fn write_manifest(root: &Path, items: Vec<ManifestItem>) -> Result<(), CatalogueError> {
    let path = root.join(MANIFEST);
    let json = serde_json::to_vec_pretty(&Manifest {
        version: MANIFEST_VERSION,
        items,
    })
    .map_err(|e| CatalogueError::Manifest(e.to_string()))?;
    fs::write(&path, json).map_err(io_err(&path))
}

#[derive(Debug, Clone)]
pub struct Catalogue {
    root: PathBuf,
    manifest: Manifest,
}

impl Catalogue {
    pub fn load(root: impl Into<PathBuf>) -> Result<Self, CatalogueError> {
        let root = root.into();
        let path = root.join(MANIFEST);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes).map_err(|e| CatalogueError::Manifest(e.to_string()))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(CatalogueError::Manifest(format!(
                "unsupported manifest version {}",
                manifest.version
            )));
        }
        Ok(Self { root, manifest })
    }

    pub fn items(&self) -> &[ManifestItem] {
        &self.manifest.items
    }

    pub fn item(&self, id: &str) -> Result<&ManifestItem, CatalogueError> {
        self.manifest
            .items
            .iter()
            .find(|i| i.item_id == id)
            .ok_or_else(|| CatalogueError::UnknownItem(id.to_string()))
    }

    pub fn session_items(&self) -> Vec<CatalogueItem> {
        self.manifest
            .items
            .iter()
            .map(|i| CatalogueItem {
                item_id: i.item_id.clone(),
                conditions: i.conditions.clone(),
            })
            .collect()
    }

    pub fn stimulus_path(&self, item: &str, condition: Condition) -> PathBuf {
        self.root
            .join(item)
            .join(format!("{}.wav", condition.name()))
    }

    pub fn stimulus_bytes(
        &self,
        item: &str,
        condition: Condition,
    ) -> Result<Vec<u8>, CatalogueError> {
        self.item(item)?;
        let path = self.stimulus_path(item, condition);
        fs::read(&path).map_err(io_err(&path))
    }

    /// Speech and background stems of an item.
    pub fn stems(&self, item: &str) -> Result<(AudioBuffer, AudioBuffer), CatalogueError> {
        self.item(item)?;
        let dir = self.root.join(item);
        Ok((
            read_wav(dir.join("speech.wav"))?,
            read_wav(dir.join("background.wav"))?,
        ))
    }
}
