//! Every artifact-producing command records its resolved arguments here;
//! `rerun` replays them for byte-identical outputs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

#[derive(Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Manifest {
    Synth(crate::synth::SynthArgs),
    Pretrain(crate::pretrain::PretrainArgs),
    Finetune(crate::finetune::FinetuneArgs),
    Evaluate(crate::evaluate::EvaluateArgs),
    PlotEvents(crate::plots::PlotEventsArgs),
}

pub fn write(path: &Path, manifest: &Manifest) -> CliResult<()> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| CliError::Run(format!("manifest serialization failed: {e}")))?;
    fs::write(path, json + "\n")?;
    Ok(())
}

pub fn read(path: &Path) -> CliResult<Manifest> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Run(format!("manifest {} is malformed: {e}", path.display())))
}
