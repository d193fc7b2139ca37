use std::collections::BTreeMap;
use std::path::Path;

use prognosis_core::augment::sample_rng;
use prognosis_core::checkpoint;
use prognosis_core::cohort::Task;
use prognosis_core::evalstats::{
    bootstrap_ci, bootstrap_ci_grouped, delong_test, group_scores, paired_bootstrap_diff,
    read_scores, roc_auc, write_scores, ScoreRow, ScoredSet,
};
use prognosis_core::models::{
    load_mip, load_sip, mip_eval_logits, sip_eval_logits, MIP_KIND, SIP_KIND,
};
use prognosis_core::Error;
use serde::{Deserialize, Serialize};

use crate::data::{load_task_examples, test_patients, write_csv, TaskExamples};
use crate::manifest::{self, Manifest};
use crate::{runtime, usage, CliResult};

#[derive(clap::Args, Clone, Serialize, Deserialize)]
pub struct EvaluateArgs {
    /// Fine-tuned checkpoint to score on the held-out test split.
    #[arg(long, requires = "data", conflicts_with = "scores")]
    pub model: Option<String>,
    /// Cohort directory the model is scored against.
    #[arg(long, requires = "model")]
    pub data: Option<String>,
    /// Pre-computed score files to report on instead (repeatable; two or
    /// more also get pairwise tests).
    #[arg(long)]
    pub scores: Vec<String>,
    #[arg(long, default_value_t = 1000)]
    pub n_boot: usize,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Must match the value used by finetune so test patients stay held out.
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[arg(long, default_value_t = 0.2)]
    pub test_frac: f64,
    /// Resample whole patients instead of single examples (sensitivity
    /// analysis; patients are inferred from the example id prefix).
    #[arg(long, default_value_t = false)]
    pub by_patient: bool,
    /// Output directory: scores.csv (model mode), metrics.csv, pairs.csv.
    #[arg(long)]
    pub out: String,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.6}")
    }
}

/// Compact form for the stdout table; files keep full precision.
fn fmt3(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.3}")
    }
}

/// Everything before the last '_' groups examples into patients; ids
/// without one form singleton groups.
fn patient_of(example_id: &str) -> String {
    match example_id.rfind('_') {
        Some(i) => example_id[..i].to_string(),
        None => example_id.to_string(),
    }
}

fn stem(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string())
}

/// Score a fine-tuned checkpoint on the held-out test examples of its task.
fn score_model(args: &EvaluateArgs, model_path: &Path, data_dir: &Path) -> CliResult<Vec<ScoreRow>> {
    let kind = {
        let ckpt = checkpoint::load::<f32>(model_path)?;
        ckpt.meta.get("kind").cloned().unwrap_or_default()
    };
    let mut rows = Vec::new();
    match kind.as_str() {
        SIP_KIND => {
            let (mut store, model, task_str, _mode) = load_sip::<f32>(model_path)?;
            let task = Task::parse(&task_str)?;
            let (layout, examples) = load_task_examples(data_dir, task)?;
            let names = layout.names();
            let test = test_patients(&examples.patients(), args.split_seed, args.test_frac)?;
            let TaskExamples::Single(all) = examples else {
                return Err(runtime("single-image checkpoint on a sequence task"));
            };
            let kept: Vec<_> = all
                .into_iter()
                .filter(|(p, _)| test.contains(p))
                .map(|(_, e)| e)
                .collect();
            let logits = sip_eval_logits(&model, &mut store, &kept)?;
            for (ex, row) in kept.iter().zip(&logits) {
                for (j, name) in names.iter().enumerate() {
                    if ex.mask[j] == 1.0 {
                        rows.push(ScoreRow {
                            example_id: ex.example_id.clone(),
                            label_name: name.clone(),
                            score: sigmoid(row[j]),
                            true_label: ex.labels[j] as u8,
                        });
                    }
                }
            }
        }
        MIP_KIND => {
            let (mut store, model, task_str) = load_mip::<f32>(model_path)?;
            let task = Task::parse(&task_str)?;
            let (layout, examples) = load_task_examples(data_dir, task)?;
            let names = layout.names();
            let test = test_patients(&examples.patients(), args.split_seed, args.test_frac)?;
            let TaskExamples::Sequences(all) = examples else {
                return Err(runtime("sequence checkpoint on a single-image task"));
            };
            let kept: Vec<_> = all
                .into_iter()
                .filter(|(p, _)| test.contains(p))
                .map(|(_, s)| s)
                .collect();
            let logits = mip_eval_logits(&model, &mut store, &kept)?;
            for (seq, row) in kept.iter().zip(&logits) {
                for (j, name) in names.iter().enumerate() {
                    if seq.mask[j] == 1.0 {
                        rows.push(ScoreRow {
                            example_id: seq.sequence_id.clone(),
                            label_name: name.clone(),
                            score: sigmoid(row[j]),
                            true_label: seq.labels[j] as u8,
                        });
                    }
                }
            }
        }
        other => {
            return Err(runtime(format!(
                "checkpoint kind {other:?} is not a fine-tuned prognosis model"
            )))
        }
    }
    Ok(rows)
}

struct ModelScores {
    name: String,
    sets: BTreeMap<String, ScoredSet>,
}

struct Cell {
    auc: f64,
    lo: f64,
    hi: f64,
}

const WINDOW_ORDER: [&str; 5] = ["24h", "48h", "72h", "96h", "any"];

/// Per-model table: one AUC row and one CI row per event, windows as
/// columns, falling back to a flat list for free-form label names.
fn print_table(name: &str, cells: &BTreeMap<String, Cell>) {
    println!("\n== {name} ==");
    let gridable = !cells.is_empty() && cells.keys().all(|l| {
        l.split_once('@')
            .is_some_and(|(_, w)| WINDOW_ORDER.contains(&w))
    });
    if gridable {
        let mut events: Vec<&str> = cells.keys().map(|l| l.split_once('@').unwrap().0).collect();
        events.dedup();
        print!("{:<16}", "event");
        for w in WINDOW_ORDER {
            print!("{w:>16}");
        }
        println!();
        for event in events {
            print!("{event:<16}");
            for w in WINDOW_ORDER {
                match cells.get(&format!("{event}@{w}")) {
                    Some(c) => print!("{:>16}", fmt3(c.auc)),
                    None => print!("{:>16}", "-"),
                }
            }
            println!();
            print!("{:<16}", "");
            for w in WINDOW_ORDER {
                match cells.get(&format!("{event}@{w}")) {
                    Some(c) => print!("{:>16}", format!("[{},{}]", fmt3(c.lo), fmt3(c.hi))),
                    None => print!("{:>16}", "-"),
                }
            }
            println!();
        }
    } else {
        for (label, c) in cells {
            println!("{label:<24}{:>12}", fmt3(c.auc));
            println!("{:<24}{:>12}", "", format!("[{},{}]", fmt3(c.lo), fmt3(c.hi)));
        }
    }
}

pub fn run(args: &EvaluateArgs) -> CliResult<()> {
    if args.model.is_none() && args.scores.is_empty() {
        return Err(usage("provide --model with --data, or at least one --scores file"));
    }
    let out_dir = Path::new(&args.out);
    std::fs::create_dir_all(out_dir)?;

    // Assemble one named score table per model.
    let mut models: Vec<ModelScores> = Vec::new();
    if let (Some(model), Some(data)) = (&args.model, &args.data) {
        let rows = score_model(args, Path::new(model), Path::new(data))?;
        write_scores(&out_dir.join("scores.csv"), &rows)?;
        println!("{} scores written to {}", rows.len(), out_dir.join("scores.csv").display());
        models.push(ModelScores {
            name: stem(model),
            sets: group_scores(&rows)?,
        });
    }
    for path in &args.scores {
        let rows = read_scores(Path::new(path))?;
        let mut name = stem(path);
        if models.iter().any(|m| m.name == name) {
            name = format!("{name}_{}", models.len());
        }
        models.push(ModelScores {
            name,
            sets: group_scores(&rows)?,
        });
    }

    // Per-model per-label AUC with bootstrap CI.
    let metrics_header = ["model", "label", "n", "n_pos", "auc", "ci_lo", "ci_hi"];
    let mut metrics_rows: Vec<Vec<String>> = Vec::new();
    let mut defined = 0usize;
    let mut total = 0usize;
    let mut tables: Vec<(String, BTreeMap<String, Cell>)> = Vec::new();
    for (mi, model) in models.iter().enumerate() {
        let mut cells = BTreeMap::new();
        for (li, (label, set)) in model.sets.iter().enumerate() {
            total += 1;
            let n_pos = set.labels.iter().filter(|&&l| l == 1).count();
            let cell = match roc_auc(set) {
                Ok(auc) => {
                    let mut rng = sample_rng(args.seed, mi as u64, li as u64);
                    let (lo, hi) = if args.by_patient {
                        let groups: Vec<String> =
                            set.example_ids.iter().map(|id| patient_of(id)).collect();
                        bootstrap_ci_grouped(set, &groups, args.n_boot, args.level, &mut rng)?
                    } else {
                        bootstrap_ci(set, args.n_boot, args.level, &mut rng)?
                    };
                    defined += 1;
                    Cell { auc, lo, hi }
                }
                Err(Error::UndefinedMetric(msg)) => {
                    eprintln!("undefined metric for {} on {label}: {msg}", model.name);
                    Cell { auc: f64::NAN, lo: f64::NAN, hi: f64::NAN }
                }
                Err(e) => return Err(e.into()),
            };
            metrics_rows.push(vec![
                model.name.clone(),
                label.clone(),
                set.len().to_string(),
                n_pos.to_string(),
                fmt(cell.auc),
                fmt(cell.lo),
                fmt(cell.hi),
            ]);
            cells.insert(label.clone(), cell);
        }
        tables.push((model.name.clone(), cells));
    }
    write_csv(&out_dir.join("metrics.csv"), &metrics_header, &metrics_rows)?;

    // Pairwise one-sided bootstrap and DeLong tests on shared labels.
    if models.len() >= 2 {
        let pairs_header = [
            "model_a", "model_b", "label", "auc_a", "auc_b", "diff", "p_boot", "z", "p_delong",
        ];
        let mut pairs_rows: Vec<Vec<String>> = Vec::new();
        let mut pair_idx = 0u64;
        for i in 0..models.len() {
            for j in i + 1..models.len() {
                for (li, (label, set_a)) in models[i].sets.iter().enumerate() {
                    let Some(set_b) = models[j].sets.get(label) else {
                        continue;
                    };
                    let (auc_a, auc_b) = match (roc_auc(set_a), roc_auc(set_b)) {
                        (Ok(a), Ok(b)) => (a, b),
                        (Err(Error::UndefinedMetric(_)), _) | (_, Err(Error::UndefinedMetric(_))) => {
                            pairs_rows.push(vec![
                                models[i].name.clone(),
                                models[j].name.clone(),
                                label.clone(),
                                "nan".into(), "nan".into(), "nan".into(),
                                "nan".into(), "nan".into(), "nan".into(),
                            ]);
                            continue;
                        }
                        (Err(e), _) | (_, Err(e)) => return Err(e.into()),
                    };
                    let mut rng = sample_rng(args.seed, 1000 + pair_idx, li as u64);
                    let (diff, p_boot) = paired_bootstrap_diff(set_a, set_b, args.n_boot, &mut rng)?;
                    let (z, p_delong) = match delong_test(set_a, set_b) {
                        Ok(v) => v,
                        Err(Error::UndefinedMetric(_)) => (f64::NAN, f64::NAN),
                        Err(e) => return Err(e.into()),
                    };
                    pairs_rows.push(vec![
                        models[i].name.clone(),
                        models[j].name.clone(),
                        label.clone(),
                        fmt(auc_a),
                        fmt(auc_b),
                        fmt(diff),
                        fmt(p_boot),
                        fmt(z),
                        fmt(p_delong),
                    ]);
                }
                pair_idx += 1;
            }
        }
        write_csv(&out_dir.join("pairs.csv"), &pairs_header, &pairs_rows)?;
    }

    for (name, cells) in &tables {
        print_table(name, cells);
    }

    manifest::write(&out_dir.join("manifest.json"), &Manifest::Evaluate(args.clone()))?;
    if defined == 0 {
        return Err(runtime(format!(
            "undefined metric: all {total} (model, label) cells have a single class"
        )));
    }
    Ok(())
}
