use std::path::Path;

use prognosis_core::cohort::{
    apply_task_filter, build_sequences, read_events, read_scans, window_labels, LabelLayout, Task,
    Window,
};
use serde::{Deserialize, Serialize};

use crate::data::write_csv;
use crate::manifest::{self, Manifest};
use crate::CliResult;

#[derive(clap::Args, Clone, Serialize, Deserialize)]
pub struct PlotEventsArgs {
    /// Events CSV.
    #[arg(long)]
    pub events: String,
    /// Scans CSV.
    #[arg(long)]
    pub scans: String,
    /// Output CSV of positive-label counts per task, event and window.
    #[arg(long)]
    pub out: String,
}

/// Positive-label counts per (event, window) over a task's examples. Rows
/// are events, columns the nested windows, so counts grow left to right.
pub fn run(args: &PlotEventsArgs) -> CliResult<()> {
    let events = read_events(Path::new(&args.events))?;
    let scans = read_scans(Path::new(&args.scans))?;
    let layout = LabelLayout::adverse();
    let n_windows = Window::ALL.len();

    let mut rows: Vec<Vec<String>> = Vec::new();
    for task in [Task::Sip, Task::Mip] {
        let filtered = apply_task_filter(&scans, &events, task);
        let mut counts = vec![0u64; layout.count()];
        match task {
            Task::Mip => {
                for seq in build_sequences(&filtered, &events, &layout) {
                    for (i, &l) in seq.labels.iter().enumerate() {
                        if l == 1.0 && seq.mask[i] == 1.0 {
                            counts[i] += 1;
                        }
                    }
                }
            }
            _ => {
                for scan in &filtered {
                    let labeled = window_labels(scan, &events, &layout);
                    for (i, &l) in labeled.labels.iter().enumerate() {
                        if l == 1.0 && labeled.mask[i] == 1.0 {
                            counts[i] += 1;
                        }
                    }
                }
            }
        }
        for (e, event) in layout.events.iter().enumerate() {
            let mut row = vec![task.to_string(), event.name().to_string()];
            row.extend((0..n_windows).map(|w| counts[e * n_windows + w].to_string()));
            rows.push(row);
        }
    }

    let mut header = vec!["task".to_string(), "event".to_string()];
    header.extend(Window::ALL.iter().map(|w| w.name().to_string()));
    write_csv(Path::new(&args.out), &header, &rows)?;

    println!("{:<6}{:<14}{}", "task", "event", Window::ALL.map(|w| format!("{:>10}", w.name())).join(""));
    for row in &rows {
        print!("{:<6}{:<14}", row[0], row[1]);
        for v in &row[2..] {
            print!("{v:>10}");
        }
        println!();
    }

    let manifest_path = format!("{}.manifest.json", args.out);
    manifest::write(Path::new(&manifest_path), &Manifest::PlotEvents(args.clone()))?;
    Ok(())
}
