//! JSON checkpoints with a format tag, version and kind header.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mma::MetaLearnerState;
use crate::tms::SpecializedModel;

pub const FORMAT: &str = "transprompt-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    kind: String,
    payload: T,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: String,
}

fn save<T: Serialize>(path: &Path, kind: &str, payload: &T) -> Result<()> {
    let envelope = Envelope {
        format: FORMAT.to_owned(),
        version: VERSION,
        kind: kind.to_owned(),
        payload,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec(&envelope)?)?;
    Ok(())
}

/// Kind recorded in a checkpoint header.
pub fn kind_of(path: &Path) -> Result<String> {
    let header: Header = serde_json::from_slice(&fs::read(path)?)?;
    check_header(&header, None)?;
    Ok(header.kind)
}

fn check_header(header: &Header, kind: Option<&str>) -> Result<()> {
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!("not a checkpoint (format {:?})", header.format)));
    }
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
    }
    if let Some(kind) = kind.filter(|k| *k != header.kind) {
        return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", header.kind)));
    }
    Ok(())
}

fn load<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let bytes = fs::read(path)?;
    let header: Header = serde_json::from_slice(&bytes)?;
    check_header(&header, Some(kind))?;
    let envelope: Envelope<T> = serde_json::from_slice(&bytes)?;
    Ok(envelope.payload)
}

pub fn save_meta(path: &Path, state: &MetaLearnerState) -> Result<()> {
    save(path, "meta", state)
}

pub fn load_meta(path: &Path) -> Result<MetaLearnerState> {
    let mut state: MetaLearnerState = load(path, "meta")?;
    state.model.reindex();
    Ok(state)
}

pub fn save_specialized(path: &Path, model: &SpecializedModel) -> Result<()> {
    save(path, "specialized", model)
}

pub fn load_specialized(path: &Path) -> Result<SpecializedModel> {
    let mut model: SpecializedModel = load(path, "specialized")?;
    model.model.reindex();
    Ok(model)
}
