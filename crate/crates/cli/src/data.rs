//! Cohort loading: CSV tables plus PGM images into the shapes the training
//! code consumes, with the canonical patient-level test split.

use std::collections::HashSet;
use std::path::Path;

use prognosis_core::augment::sample_rng;
use prognosis_core::cohort::{
    apply_task_filter, build_sequences, ingest, patient_split, window_labels, Cohort, LabelLayout,
    Task,
};
use prognosis_core::image::read_pgm;
use prognosis_core::models::{MipSequence, SipExample};
use prognosis_core::Result;

pub fn load_cohort(dir: &Path) -> Result<Cohort> {
    ingest(&dir.join("events.csv"), &dir.join("scans.csv"))
}

/// Examples for one task, each tagged with its patient for splitting.
pub enum TaskExamples {
    Single(Vec<(String, SipExample)>),
    Sequences(Vec<(String, MipSequence)>),
}

impl TaskExamples {
    pub fn patients(&self) -> Vec<String> {
        let mut out: Vec<String> = match self {
            TaskExamples::Single(v) => v.iter().map(|(p, _)| p.clone()).collect(),
            TaskExamples::Sequences(v) => v.iter().map(|(p, _)| p.clone()).collect(),
        };
        out.sort();
        out.dedup();
        out
    }
}

pub fn load_task_examples(dir: &Path, task: Task) -> Result<(LabelLayout, TaskExamples)> {
    let cohort = load_cohort(dir)?;
    let layout = task.layout();
    let filtered = apply_task_filter(&cohort.scans, &cohort.events, task);
    match task {
        Task::Sip | Task::Orp => {
            let mut out = Vec::with_capacity(filtered.len());
            for scan in &filtered {
                let labeled = window_labels(scan, &cohort.events, &layout);
                let image = read_pgm(&dir.join(&scan.image_path))?;
                out.push((
                    scan.patient_id.clone(),
                    SipExample {
                        example_id: scan.scan_id.clone(),
                        image,
                        labels: labeled.labels,
                        mask: labeled.mask,
                    },
                ));
            }
            Ok((layout, TaskExamples::Single(out)))
        }
        Task::Mip => {
            let seqs = build_sequences(&filtered, &cohort.events, &layout);
            let mut out = Vec::with_capacity(seqs.len());
            for seq in seqs {
                let mut images = Vec::with_capacity(seq.entries.len());
                let mut hours = Vec::with_capacity(seq.entries.len());
                for entry in &seq.entries {
                    images.push(read_pgm(&dir.join(&entry.scan.image_path))?);
                    hours.push(entry.hours_before_final);
                }
                let final_id = seq.entries.last().expect("nonempty sequence").scan.scan_id.clone();
                out.push((
                    seq.patient_id.clone(),
                    MipSequence {
                        sequence_id: final_id,
                        images,
                        hours_before_final: hours,
                        labels: seq.labels,
                        mask: seq.mask,
                    },
                ));
            }
            Ok((layout, TaskExamples::Sequences(out)))
        }
    }
}

/// Patient-level held-out test membership, a pure function of the split
/// seed so every command derives the same assignment.
pub fn test_patients(patients: &[String], split_seed: u64, test_frac: f64) -> Result<HashSet<String>> {
    let mut rng = sample_rng(split_seed, 0, 0);
    let (_, test) = patient_split(patients, &mut rng, (1.0 - test_frac, test_frac))?;
    Ok(test.into_iter().collect())
}

/// RFC-4180 CSV with a header row.
pub fn write_csv<S: AsRef<[u8]>>(
    path: &Path,
    header: &[S],
    rows: &[Vec<String>],
) -> crate::CliResult<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| crate::runtime(format!("cannot write {}: {e}", path.display())))?;
    w.write_record(header).map_err(|e| crate::runtime(e.to_string()))?;
    for row in rows {
        w.write_record(row).map_err(|e| crate::runtime(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_f64_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| prognosis_core::Error::invalid(format!("bad {what} entry {v:?}")))
        })
        .collect()
}

pub fn parse_usize_list(s: &str, what: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| prognosis_core::Error::invalid(format!("bad {what} entry {v:?}")))
        })
        .collect()
}
