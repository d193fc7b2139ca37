use std::path::Path;

use prognosis_core::cohort::{apply_task_filter, build_sequences, synth_cohort, SynthConfig, Task};
use serde::{Deserialize, Serialize};

use crate::data::test_patients;
use crate::manifest::{self, Manifest};
use crate::CliResult;

#[derive(clap::Args, Clone, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Output directory for images and CSV tables.
    #[arg(long)]
    pub out: String,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub patients: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Severity-scaled per-scan amplitude growth; 0 plants no temporal signal.
    #[arg(long, default_value_t = 0.0)]
    pub trend: f64,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 1)]
    pub scans_min: usize,
    #[arg(long, default_value_t = 6)]
    pub scans_max: usize,
    /// Fraction of patients held out for testing in the summary split.
    #[arg(long, default_value_t = 0.2)]
    pub test_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

pub fn run(args: &SynthArgs) -> CliResult<()> {
    let out = Path::new(&args.out);
    let cfg = SynthConfig {
        image_size: args.image_size,
        scans_min: args.scans_min,
        scans_max: args.scans_max,
        trend: args.trend,
        ..SynthConfig::default()
    };
    let cohort = synth_cohort(out, args.patients as usize, &cfg, args.seed)?;

    println!(
        "generated {} scans across {} patients ({} events)",
        cohort.scans.len(),
        cohort.truth.len(),
        cohort.events.len()
    );
    println!("{:<6} {:<10} {:>9} {:>9}", "task", "split", "patients", "examples");
    for task in [Task::Sip, Task::Orp, Task::Mip] {
        let filtered = apply_task_filter(&cohort.scans, &cohort.events, task);
        let mut per_example_patient: Vec<String> = match task {
            Task::Mip => build_sequences(&filtered, &cohort.events, &task.layout())
                .iter()
                .map(|s| s.patient_id.clone())
                .collect(),
            _ => filtered.iter().map(|s| s.patient_id.clone()).collect(),
        };
        per_example_patient.sort();
        let mut patients = per_example_patient.clone();
        patients.dedup();
        let test = test_patients(&patients, args.split_seed, args.test_frac)?;
        for (split, keep_test) in [("train+val", false), ("test", true)] {
            let n_pat = patients.iter().filter(|p| test.contains(*p) == keep_test).count();
            let n_ex = per_example_patient
                .iter()
                .filter(|p| test.contains(*p) == keep_test)
                .count();
            println!("{:<6} {:<10} {:>9} {:>9}", task.to_string(), split, n_pat, n_ex);
        }
    }

    manifest::write(&out.join("manifest.json"), &Manifest::Synth(args.clone()))
}
