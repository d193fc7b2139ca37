use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use prognosis_core::augment::sample_rng;
use prognosis_core::cohort::{stratified_kfold, Task};
use prognosis_core::models::{
    finetune, finetune_mip, save_mip, save_sip, FinetuneConfig, FinetuneMode, MipConfig, MipModel,
    MipSequence, MipTrainConfig, OptChoice, Pooling, SipExample, SipModel,
};
use prognosis_core::nn::ParamStore;
use prognosis_core::pretrain::{load_encoder_tensors, EncoderTensors};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    load_task_examples, parse_f64_list, parse_usize_list, test_patients, write_csv, TaskExamples,
};
use crate::manifest::{self, Manifest};
use crate::{runtime, usage, CliResult};

#[derive(clap::Args, Clone, Serialize, Deserialize)]
pub struct FinetuneArgs {
    /// Cohort directory (events.csv, scans.csv, images/).
    #[arg(long)]
    pub data: String,
    #[arg(long, value_parser = ["sip", "orp", "mip"])]
    pub task: String,
    /// Fine-tuning mode; single-image tasks only.
    #[arg(long, value_parser = ["cl", "ft", "ft_ra", "scratch"])]
    pub mode: Option<String>,
    /// Pretraining checkpoint to transfer the encoder from. Required except
    /// in scratch mode, where it is rejected.
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Overrides the per-mode epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed for the patient-level test split and fold assignment. Keep it in
    /// sync with synth and evaluate so the held-out set never leaks.
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[arg(long, default_value_t = 0.2)]
    pub test_frac: f64,
    /// Output directory: grid.csv, selection.csv, fold models, final model.
    #[arg(long)]
    pub out: String,
    /// Learning-rate grid. Defaults: 1e-4,1e-3,1e-2,1e-1 (sip/orp) or
    /// 1e-3,1e-2,1e-1 (mip).
    #[arg(long)]
    pub grid_lr: Option<String>,
    /// Optimizer grid, single-image tasks.
    #[arg(long, default_value = "adam,sgd_momentum")]
    pub grid_opt: String,
    /// DropImage grid, mip only.
    #[arg(long, default_value = "0,0.1,0.2,0.5")]
    pub grid_p_drop: String,
    /// Projection-width grid, mip only.
    #[arg(long, default_value = "16,32,64,128")]
    pub grid_d_proj: String,
    /// Pooling grid, mip only.
    #[arg(long, default_value = "sum,last")]
    pub grid_pooling: String,
    /// Label whose mean validation AUC across folds picks the winner.
    /// Defaults to any_adverse@96h (oxygen_gt_6l@96h for orp).
    #[arg(long)]
    pub select_label: Option<String>,
    /// Encoder widths, scratch mode only (otherwise taken from --init).
    #[arg(long, default_value = "16,32,64,128")]
    pub widths: String,
    /// Input size, scratch mode only.
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
}

#[derive(Clone)]
enum GridCfg {
    Sip { lr: f64, opt: OptChoice },
    Mip { lr: f64, p_drop: f64, d_proj: usize, pooling: Pooling },
}

impl GridCfg {
    fn columns(task: Task) -> Vec<&'static str> {
        match task {
            Task::Mip => vec!["lr", "p_drop", "d_proj", "pooling"],
            _ => vec!["lr", "optimizer"],
        }
    }

    fn values(&self) -> Vec<String> {
        match self {
            GridCfg::Sip { lr, opt } => vec![lr.to_string(), opt_name(*opt).to_string()],
            GridCfg::Mip { lr, p_drop, d_proj, pooling } => vec![
                lr.to_string(),
                p_drop.to_string(),
                d_proj.to_string(),
                pooling.as_str().to_string(),
            ],
        }
    }

    fn describe(&self, task: Task) -> String {
        GridCfg::columns(task)
            .iter()
            .zip(self.values())
            .map(|(c, v)| format!("{c}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn opt_name(o: OptChoice) -> &'static str {
    match o {
        OptChoice::Adam => "adam",
        OptChoice::SgdMomentum => "sgd_momentum",
    }
}

fn parse_opt(s: &str) -> CliResult<OptChoice> {
    match s {
        "adam" => Ok(OptChoice::Adam),
        "sgd_momentum" => Ok(OptChoice::SgdMomentum),
        other => Err(usage(format!("unknown optimizer {other:?}"))),
    }
}

fn build_grid(args: &FinetuneArgs, task: Task) -> CliResult<Vec<GridCfg>> {
    let mut grid = Vec::new();
    match task {
        Task::Mip => {
            let lrs = parse_f64_list(args.grid_lr.as_deref().unwrap_or("1e-3,1e-2,1e-1"), "learning rate")
                .map_err(|e| usage(e.to_string()))?;
            let p_drops = parse_f64_list(&args.grid_p_drop, "p_drop").map_err(|e| usage(e.to_string()))?;
            let d_projs = parse_usize_list(&args.grid_d_proj, "d_proj").map_err(|e| usage(e.to_string()))?;
            let poolings = args
                .grid_pooling
                .split(',')
                .map(|s| Pooling::parse(s.trim()).map_err(|e| usage(e.to_string())))
                .collect::<CliResult<Vec<_>>>()?;
            for &lr in &lrs {
                for &p_drop in &p_drops {
                    for &d_proj in &d_projs {
                        for &pooling in &poolings {
                            grid.push(GridCfg::Mip { lr, p_drop, d_proj, pooling });
                        }
                    }
                }
            }
        }
        _ => {
            let lrs = parse_f64_list(
                args.grid_lr.as_deref().unwrap_or("1e-4,1e-3,1e-2,1e-1"),
                "learning rate",
            )
            .map_err(|e| usage(e.to_string()))?;
            let opts = args
                .grid_opt
                .split(',')
                .map(|s| parse_opt(s.trim()))
                .collect::<CliResult<Vec<_>>>()?;
            for &lr in &lrs {
                for &opt in &opts {
                    grid.push(GridCfg::Sip { lr, opt });
                }
            }
        }
    }
    if grid.is_empty() {
        return Err(usage("empty hyperparameter grid"));
    }
    Ok(grid)
}

fn fmt_auc(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.6}")
    }
}

fn nan_mean(vals: &[f64]) -> f64 {
    let defined: Vec<f64> = vals.iter().copied().filter(|v| !v.is_nan()).collect();
    if defined.is_empty() {
        f64::NAN
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

/// Patient ids positive on the selection label, for stratified folds.
fn patient_flags<'a>(
    rows: impl Iterator<Item = (&'a String, &'a [f32], &'a [f32])>,
    idx: usize,
) -> Vec<(String, bool)> {
    let mut map: BTreeMap<String, bool> = BTreeMap::new();
    for (pid, labels, mask) in rows {
        let pos = mask[idx] == 1.0 && labels[idx] == 1.0;
        *map.entry(pid.clone()).or_insert(false) |= pos;
    }
    map.into_iter().collect()
}

struct SipRunner<'a> {
    examples: Vec<(String, SipExample)>,
    enc: Option<EncoderTensors<f32>>,
    widths: Vec<usize>,
    image_size: usize,
    n_labels: usize,
    mode: FinetuneMode,
    epochs: Option<usize>,
    val_label: usize,
    seed: u64,
    task_name: &'a str,
}

impl SipRunner<'_> {
    fn split(&self, val_set: &HashSet<String>) -> (Vec<SipExample>, Vec<SipExample>) {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (pid, ex) in &self.examples {
            if val_set.contains(pid) {
                val.push(ex.clone());
            } else {
                train.push(ex.clone());
            }
        }
        (train, val)
    }

    /// Train one grid cell. The rng stream is keyed by (seed, config, fold)
    /// so the winner's later retrain reproduces the grid run bit for bit.
    fn train(
        &self,
        cfg: &GridCfg,
        cfg_i: u64,
        fold: u64,
        train: &[SipExample],
        val: &[SipExample],
    ) -> CliResult<(ParamStore<f32>, SipModel, f64)> {
        let GridCfg::Sip { lr, opt } = cfg else {
            return Err(runtime("sequence config in single-image grid"));
        };
        let mut rng = sample_rng(self.seed, cfg_i, fold);
        let mut store = ParamStore::<f32>::new();
        let model = SipModel::new(&mut store, &self.widths, self.n_labels, self.image_size, &mut rng);
        if let Some(enc) = &self.enc {
            model.init_from_pretrained(&mut store, enc)?;
        }
        let fcfg = FinetuneConfig {
            optimizer: *opt,
            lr: *lr,
            epochs: self.epochs,
            val_label: self.val_label,
            ..FinetuneConfig::new(self.mode)
        };
        let hist = finetune(&model, &mut store, train, val, &fcfg, rng.random::<u64>())?;
        let auc = hist.val_aucs.last().copied().unwrap_or(f64::NAN);
        Ok((store, model, auc))
    }

    fn save(&self, path: &Path, store: &ParamStore<f32>, model: &SipModel) -> CliResult<()> {
        save_sip(path, store, model, self.task_name, self.mode)?;
        Ok(())
    }
}

struct MipRunner {
    sequences: Vec<(String, MipSequence)>,
    enc: EncoderTensors<f32>,
    n_labels: usize,
    epochs: Option<usize>,
    val_label: usize,
    seed: u64,
}

impl MipRunner {
    fn split(&self, val_set: &HashSet<String>) -> (Vec<MipSequence>, Vec<MipSequence>) {
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (pid, seq) in &self.sequences {
            if val_set.contains(pid) {
                val.push(seq.clone());
            } else {
                train.push(seq.clone());
            }
        }
        (train, val)
    }

    fn model_cfg(&self, cfg: &GridCfg) -> CliResult<MipConfig> {
        let GridCfg::Mip { p_drop, d_proj, pooling, .. } = cfg else {
            return Err(runtime("single-image config in sequence grid"));
        };
        Ok(MipConfig {
            widths: self.enc.widths.clone(),
            n_labels: self.n_labels,
            d_proj: *d_proj,
            p_drop: *p_drop,
            pooling: *pooling,
            image_size: self.enc.image_size,
            ..MipConfig::default()
        })
    }

    fn train(
        &self,
        cfg: &GridCfg,
        cfg_i: u64,
        fold: u64,
        train: &[MipSequence],
        val: &[MipSequence],
    ) -> CliResult<(ParamStore<f32>, MipModel, f64)> {
        let GridCfg::Mip { lr, .. } = cfg else {
            return Err(runtime("single-image config in sequence grid"));
        };
        let mcfg = self.model_cfg(cfg)?;
        let mut rng = sample_rng(self.seed, cfg_i, fold);
        let mut store = ParamStore::<f32>::new();
        let model = MipModel::new(&mut store, &mcfg, &mut rng)?;
        model.init_from_pretrained(&mut store, &self.enc)?;
        let tcfg = MipTrainConfig {
            lr: *lr,
            epochs: self.epochs.unwrap_or(50),
            val_label: self.val_label,
            ..MipTrainConfig::default()
        };
        let hist = finetune_mip(&model, &mut store, train, val, &tcfg, rng.random::<u64>())?;
        let auc = hist.val_aucs.last().copied().unwrap_or(f64::NAN);
        Ok((store, model, auc))
    }
}

pub fn run(args: &FinetuneArgs) -> CliResult<()> {
    let task = Task::parse(&args.task).map_err(|e| usage(e.to_string()))?;
    if args.folds < 2 {
        return Err(usage(format!("{} folds, need at least 2", args.folds)));
    }
    let mode = match (task, &args.mode) {
        (Task::Mip, Some(_)) => {
            return Err(usage("--mode applies to single-image tasks only"));
        }
        (Task::Mip, None) => None,
        (_, Some(m)) => Some(FinetuneMode::parse(m).map_err(|e| usage(e.to_string()))?),
        (_, None) => return Err(usage("--mode is required for single-image tasks")),
    };
    let scratch = mode == Some(FinetuneMode::Scratch);
    if scratch && args.init.is_some() {
        return Err(usage("scratch mode rejects --init"));
    }
    if !scratch && args.init.is_none() {
        return Err(usage("--init is required except in scratch mode"));
    }

    let data_dir = Path::new(&args.data);
    let out_dir = Path::new(&args.out);
    std::fs::create_dir_all(out_dir)?;

    let (layout, examples) = load_task_examples(data_dir, task)?;
    let names = layout.names();
    let default_label = match task {
        Task::Orp => "oxygen_gt_6l@96h",
        _ => "any_adverse@96h",
    };
    let select_label = args.select_label.as_deref().unwrap_or(default_label);
    let val_label = names
        .iter()
        .position(|n| n == select_label)
        .ok_or_else(|| usage(format!("unknown selection label {select_label:?}")))?;

    // Patient-level held-out test split, shared with synth and evaluate.
    let patients = examples.patients();
    let test = test_patients(&patients, args.split_seed, args.test_frac)?;
    let grid = build_grid(args, task)?;

    let enc = match &args.init {
        Some(path) => Some(load_encoder_tensors::<f32>(Path::new(path))?),
        None => None,
    };

    enum Runner<'a> {
        Sip(SipRunner<'a>),
        Mip(MipRunner),
    }

    let runner = match examples {
        TaskExamples::Single(v) => {
            let kept: Vec<(String, SipExample)> =
                v.into_iter().filter(|(p, _)| !test.contains(p)).collect();
            let (widths, image_size) = match &enc {
                Some(e) => (e.widths.clone(), e.image_size),
                None => (
                    parse_usize_list(&args.widths, "width").map_err(|e| usage(e.to_string()))?,
                    args.image_size,
                ),
            };
            Runner::Sip(SipRunner {
                examples: kept,
                enc,
                widths,
                image_size,
                n_labels: layout.count(),
                mode: mode.expect("single-image task carries a mode"),
                epochs: args.epochs,
                val_label,
                seed: args.seed,
                task_name: &args.task,
            })
        }
        TaskExamples::Sequences(v) => {
            let kept: Vec<(String, MipSequence)> =
                v.into_iter().filter(|(p, _)| !test.contains(p)).collect();
            Runner::Mip(MipRunner {
                sequences: kept,
                enc: enc.ok_or_else(|| usage("--init is required for mip"))?,
                n_labels: layout.count(),
                epochs: args.epochs,
                val_label,
                seed: args.seed,
            })
        }
    };

    // Stratify folds on the selection label at the patient level.
    let flags = match &runner {
        Runner::Sip(r) => patient_flags(
            r.examples.iter().map(|(p, e)| (p, e.labels.as_slice(), e.mask.as_slice())),
            val_label,
        ),
        Runner::Mip(r) => patient_flags(
            r.sequences.iter().map(|(p, s)| (p, s.labels.as_slice(), s.mask.as_slice())),
            val_label,
        ),
    };
    if flags.is_empty() {
        return Err(runtime("no training patients left after the test split"));
    }
    let folds = stratified_kfold(&flags, args.folds, &mut sample_rng(args.split_seed, 1, 0))?;
    println!(
        "{} training patients, {} folds, {} grid configurations, selecting on {}",
        flags.len(),
        folds.len(),
        grid.len(),
        select_label
    );

    // Grid phase: per-config per-fold validation AUC on the selection label.
    let mut cell_aucs = vec![vec![f64::NAN; folds.len()]; grid.len()];
    for (f, fold_patients) in folds.iter().enumerate() {
        let val_set: HashSet<String> = fold_patients.iter().cloned().collect();
        for (i, cfg) in grid.iter().enumerate() {
            let auc = match &runner {
                Runner::Sip(r) => {
                    let (train, val) = r.split(&val_set);
                    r.train(cfg, i as u64, f as u64, &train, &val)?.2
                }
                Runner::Mip(r) => {
                    let (train, val) = r.split(&val_set);
                    r.train(cfg, i as u64, f as u64, &train, &val)?.2
                }
            };
            cell_aucs[i][f] = auc;
            println!("config {i} [{}] fold {f}: val AUC {}", cfg.describe(task), fmt_auc(auc));
        }
    }

    let means: Vec<f64> = cell_aucs.iter().map(|row| nan_mean(row)).collect();
    let winner = means
        .iter()
        .enumerate()
        .filter(|(_, m)| !m.is_nan())
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .ok_or_else(|| runtime("validation AUC undefined for every grid configuration"))?;

    // Grid report.
    let col_names = GridCfg::columns(task);
    let mut header: Vec<String> = vec!["config".into()];
    header.extend(col_names.iter().map(|c| c.to_string()));
    header.extend((0..folds.len()).map(|f| format!("fold_{f}")));
    header.push("mean".into());
    let rows: Vec<Vec<String>> = grid
        .iter()
        .enumerate()
        .map(|(i, cfg)| {
            let mut row = vec![i.to_string()];
            row.extend(cfg.values());
            row.extend(cell_aucs[i].iter().map(|&v| fmt_auc(v)));
            row.push(fmt_auc(means[i]));
            row
        })
        .collect();
    write_csv(&out_dir.join("grid.csv"), &header, &rows)?;

    let mut sel_header: Vec<String> = vec!["config".into()];
    sel_header.extend(col_names.iter().map(|c| c.to_string()));
    sel_header.push("mean_val_auc".into());
    let mut sel_row = vec![winner.to_string()];
    sel_row.extend(grid[winner].values());
    sel_row.push(fmt_auc(means[winner]));
    write_csv(&out_dir.join("selection.csv"), &sel_header, &[sel_row])?;
    println!(
        "selected config {winner} [{}] mean val AUC {}",
        grid[winner].describe(task),
        fmt_auc(means[winner])
    );

    // Retrain the winner per fold (identical seeds, so identical models) and
    // once more on the whole training set for the deployable checkpoint.
    for (f, fold_patients) in folds.iter().enumerate() {
        let val_set: HashSet<String> = fold_patients.iter().cloned().collect();
        let path = out_dir.join(format!("fold{f}.ckpt"));
        match &runner {
            Runner::Sip(r) => {
                let (train, val) = r.split(&val_set);
                let (store, model, _) = r.train(&grid[winner], winner as u64, f as u64, &train, &val)?;
                r.save(&path, &store, &model)?;
            }
            Runner::Mip(r) => {
                let (train, val) = r.split(&val_set);
                let (store, _, _) = r.train(&grid[winner], winner as u64, f as u64, &train, &val)?;
                save_mip(&path, &store, &r.model_cfg(&grid[winner])?, &args.task)?;
            }
        }
    }
    let final_path = out_dir.join("final.ckpt");
    match &runner {
        Runner::Sip(r) => {
            let (train, _) = r.split(&HashSet::new());
            let (store, model, _) =
                r.train(&grid[winner], winner as u64, folds.len() as u64, &train, &train)?;
            r.save(&final_path, &store, &model)?;
        }
        Runner::Mip(r) => {
            let (train, _) = r.split(&HashSet::new());
            let (store, _, _) =
                r.train(&grid[winner], winner as u64, folds.len() as u64, &train, &train)?;
            save_mip(&final_path, &store, &r.model_cfg(&grid[winner])?, &args.task)?;
        }
    }
    println!("{} fold models and final.ckpt written to {}", folds.len(), out_dir.display());

    manifest::write(&out_dir.join("manifest.json"), &Manifest::Finetune(args.clone()))?;
    Ok(())
}
