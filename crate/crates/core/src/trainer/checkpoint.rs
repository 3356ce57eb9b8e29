//! Checkpoint directory: `params.lct` and `optimizer.lct` tensor containers,
//! `model.cfg` (architecture, mode and step), `freeze.txt` (one frozen
//! parameter name per line).

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use super::{TrainError, TrainState};
use crate::autodiff::checkpoint::{read_tensors, write_tensors};
use crate::autodiff::Tensor;
use crate::config::ini::{Ini, Section};
use crate::model::{ModelConfig, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub state: TrainState,
}

fn write_container(path: &Path, tensors: &[(String, Tensor)]) -> Result<(), TrainError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensors(&mut w, tensors)?;
    w.flush()?;
    Ok(())
}

fn read_container(path: &Path) -> Result<Vec<(String, Tensor)>, TrainError> {
    let file = File::open(path).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(read_tensors(&mut BufReader::new(file))?)
}

impl Checkpoint {
    pub fn trainable_count(&self) -> usize {
        self.state.trainable_count()
    }

    pub fn total_count(&self) -> usize {
        self.state.params.num_values()
    }

    /// Writes into `dir`, replacing an existing checkpoint only once the new
    /// one is complete.
    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        let name = dir
            .file_name()
            .ok_or_else(|| TrainError::Checkpoint(format!("bad checkpoint path {}", dir.display())))?
            .to_string_lossy()
            .to_string();
        let staging = dir.with_file_name(format!("{name}.partial"));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging)?;
        write_container(&staging.join("params.lct"), &self.state.params.to_named())?;
        let mut moments = Vec::new();
        for (prefix, map) in [("m", &self.state.m), ("v", &self.state.v)] {
            for (n, data) in map {
                let shape = self.state.params.get(n).expect("moment of a stored parameter").shape().to_vec();
                moments.push((format!("{prefix}:{n}"), Tensor::new(shape, data.clone())?));
            }
        }
        write_container(&staging.join("optimizer.lct"), &moments)?;
        let mut ini = Ini::default();
        ini.push(self.model.to_section());
        let mut ck = Section::new("checkpoint");
        ck.set("step", self.state.step).set("seed", self.state.seed);
        ini.push(ck);
        fs::write(staging.join("model.cfg"), ini.render())?;
        let mut frozen = String::new();
        for n in &self.state.frozen {
            frozen.push_str(n);
            frozen.push('\n');
        }
        fs::write(staging.join("freeze.txt"), frozen)?;
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::rename(&staging, dir)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, TrainError> {
        let cfg_path = dir.join("model.cfg");
        let text = fs::read_to_string(&cfg_path)
            .map_err(|e| TrainError::Checkpoint(format!("{}: {e}", cfg_path.display())))?;
        let ini = Ini::parse(&text)?;
        let model = ModelConfig::from_section(&ini.section_or_empty("model"), &ModelConfig::desk(1, 1, 1))?;
        let ck = ini.section_or_empty("checkpoint");
        let step = ck.require("step")?;
        let seed = ck.require("seed")?;
        let params = ParamStore::from_named(read_container(&dir.join("params.lct"))?);
        params.check_against(&model)?;
        let frozen: BTreeSet<String> = fs::read_to_string(dir.join("freeze.txt"))?
            .lines()
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        if let Some(n) = frozen.iter().find(|n| params.get(n).is_none()) {
            return Err(TrainError::Checkpoint(format!("freeze list names unknown parameter `{n}`")));
        }
        let mut state = TrainState::new(params, frozen, seed);
        state.step = step;
        let mut found: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (n, t) in read_container(&dir.join("optimizer.lct"))? {
            found.insert(n, t.into_data());
        }
        for (prefix, map) in [("m", &mut state.m), ("v", &mut state.v)] {
            for (n, data) in map.iter_mut() {
                let stored = found
                    .remove(&format!("{prefix}:{n}"))
                    .ok_or_else(|| TrainError::Checkpoint(format!("optimizer state lacks `{prefix}:{n}`")))?;
                if stored.len() != data.len() {
                    return Err(TrainError::Checkpoint(format!("optimizer state `{prefix}:{n}` has the wrong size")));
                }
                *data = stored;
            }
        }
        if let Some(extra) = found.keys().next() {
            return Err(TrainError::Checkpoint(format!("unexpected optimizer entry `{extra}`")));
        }
        Ok(Self { model, state })
    }
}
