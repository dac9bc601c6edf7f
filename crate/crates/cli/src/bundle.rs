//! Output staging: every artifact of a command is rendered to bytes first and
//! only written once the whole command has succeeded, each file through a
//! temporary name and a rename.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use volreg::io::{channel_paths, encode_f32le, json_bytes, landmarks_csv, sidecar_bytes, write_atomic};
use volreg::{Dims, LandmarkSet, Result, Volume3};

#[derive(Default)]
pub struct Bundle {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Bundle {
    /// Raw payload plus its JSON sidecar.
    pub fn volume(&mut self, name: &str, v: &Volume3) -> Result<()> {
        let raw = PathBuf::from(format!("{name}.raw"));
        self.files.push((raw.with_extension("json"), sidecar_bytes(v)?));
        self.files.push((raw, encode_f32le(v.data())));
        Ok(())
    }

    /// Three channel volumes `{stem}_z`, `{stem}_y`, `{stem}_x`.
    pub fn channels(&mut self, stem: &str, dims: Dims, spacing: [f64; 3], channels: &[Vec<f64>; 3]) -> Result<()> {
        for (path, c) in channel_paths(Path::new(""), stem).iter().zip(channels) {
            let name = path.with_extension("");
            self.volume(&name.to_string_lossy(), &Volume3::from_vec(dims, spacing, c.clone())?)?;
        }
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.files.push((PathBuf::from(name), json_bytes(value)?));
        Ok(())
    }

    pub fn landmarks(&mut self, name: &str, set: &LandmarkSet) -> Result<()> {
        self.files.push((PathBuf::from(name), landmarks_csv(set)?));
        Ok(())
    }

    /// Relative names of the staged files, in write order.
    pub fn names(&self) -> Vec<String> {
        self.files
            .iter()
            .map(|(p, _)| p.to_string_lossy().into_owned())
            .collect()
    }

    pub fn commit(self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, bytes) in &self.files {
            write_atomic(&dir.join(name), bytes)?;
        }
        Ok(())
    }
}
