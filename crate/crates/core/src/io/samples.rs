//! Samples directory: `samples.json`, `source/<id>.png`, `edited/<id>.png`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::EditSample;
use crate::error::{Error, Result};
use crate::fsutil::{read_json, write_json};
use crate::image::Image;

pub const SAMPLES_FILE: &str = "samples.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub instruction: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplesIndex {
    pub samples: Vec<SampleEntry>,
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
        return Err(Error::Data(format!("sample id `{id}` cannot be used as a file name")));
    }
    Ok(())
}

pub fn source_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("source").join(format!("{id}.png"))
}

pub fn edited_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("edited").join(format!("{id}.png"))
}

/// Loads every sample listed in `samples.json`, in listed order.
pub fn load_samples_dir(dir: &Path) -> Result<Vec<(String, EditSample)>> {
    let index: SamplesIndex = read_json(&dir.join(SAMPLES_FILE))?;
    let mut out = Vec::with_capacity(index.samples.len());
    for e in index.samples {
        check_id(&e.id)?;
        let source = Image::read_png(&source_path(dir, &e.id))?;
        let edited = Image::read_png(&edited_path(dir, &e.id))?;
        out.push((
            e.id,
            EditSample {
                source,
                edited,
                instruction: e.instruction,
            },
        ));
    }
    Ok(out)
}

pub fn write_samples_dir(dir: &Path, samples: &[(String, EditSample)]) -> Result<()> {
    for sub in ["source", "edited"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for (id, s) in samples {
        check_id(id)?;
        s.source.write_png(&source_path(dir, id))?;
        s.edited.write_png(&edited_path(dir, id))?;
    }
    let index = SamplesIndex {
        samples: samples
            .iter()
            .map(|(id, s)| SampleEntry {
                id: id.clone(),
                instruction: s.instruction.clone(),
            })
            .collect(),
    };
    write_json(&dir.join(SAMPLES_FILE), &index)
}
