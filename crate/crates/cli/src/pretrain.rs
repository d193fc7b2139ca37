use std::collections::BTreeMap;
use std::path::Path;

use prognosis_core::cohort::{read_scans, N_FINDINGS};
use prognosis_core::image::{read_pgm, Image};
use prognosis_core::nn::ParamStore;
use prognosis_core::pretrain::{
    pretrain_moco, save_moco, save_supervised, supervised_pretrain, MoCoConfig, MoCoModel,
    SupervisedConfig, SupervisedModel,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{parse_usize_list, write_csv};
use crate::manifest::{self, Manifest};
use crate::{runtime, CliResult};

#[derive(clap::Args, Clone, Serialize, Deserialize)]
pub struct PretrainArgs {
    /// Cohort directory holding scans.csv and images/ (findings.csv for
    /// supervised mode).
    #[arg(long)]
    pub corpus: String,
    #[arg(long, value_parser = ["moco", "supervised"])]
    pub mode: String,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    /// Defaults to 1e-2 for moco, 1e-3 for supervised.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 128)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 1024)]
    pub queue_size: usize,
    #[arg(long, default_value_t = 0.2)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.999)]
    pub momentum: f64,
    /// Defaults to 32 for moco, 64 for supervised.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value = "16,32,64,128")]
    pub widths: String,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint path; the loss curve lands at <out>.loss.csv.
    #[arg(long)]
    pub out: String,
}

fn load_images(corpus: &Path) -> CliResult<Vec<(String, Image)>> {
    let scans = read_scans(&corpus.join("scans.csv"))?;
    let mut out = Vec::with_capacity(scans.len());
    for scan in &scans {
        out.push((scan.scan_id.clone(), read_pgm(&corpus.join(&scan.image_path))?));
    }
    Ok(out)
}

fn load_findings(corpus: &Path) -> CliResult<BTreeMap<String, Vec<u8>>> {
    let path = corpus.join("findings.csv");
    let mut reader = csv::Reader::from_path(&path)
        .map_err(|e| runtime(format!("cannot open {}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| runtime(format!("findings.csv: {e}")))?;
        if record.len() != N_FINDINGS + 1 {
            return Err(runtime(format!(
                "findings.csv row has {} fields, expected {}",
                record.len(),
                N_FINDINGS + 1
            )));
        }
        let mut vals = Vec::with_capacity(N_FINDINGS);
        for v in record.iter().skip(1) {
            match v {
                "0" => vals.push(0),
                "1" => vals.push(1),
                other => return Err(runtime(format!("findings.csv: non-binary value {other:?}"))),
            }
        }
        out.insert(record[0].to_string(), vals);
    }
    Ok(out)
}

pub fn run(args: &PretrainArgs) -> CliResult<()> {
    let corpus = Path::new(&args.corpus);
    let out = Path::new(&args.out);
    let widths = parse_usize_list(&args.widths, "width")?;
    let images = load_images(corpus)?;
    println!("loaded {} images from {}", images.len(), corpus.display());

    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    match args.mode.as_str() {
        "moco" => {
            let cfg = MoCoConfig {
                widths,
                feature_dim: args.feature_dim,
                queue_size: args.queue_size,
                tau: args.tau,
                momentum: args.momentum,
                batch_size: args.batch_size.unwrap_or(32),
                lr: args.lr.unwrap_or(1e-2),
                image_size: args.image_size,
                ..MoCoConfig::default()
            };
            let mut store = ParamStore::<f32>::new();
            let model = MoCoModel::new(&mut store, &cfg, &mut rng)?;
            let corpus_images: Vec<Image> = images.into_iter().map(|(_, img)| img).collect();
            let report = pretrain_moco(&model, &mut store, &corpus_images, &cfg, args.epochs, args.seed)?;
            save_moco(out, &store, &cfg)?;
            let rows: Vec<Vec<String>> = report
                .epoch_losses
                .iter()
                .zip(&report.epoch_top1)
                .enumerate()
                .map(|(e, (l, t))| vec![e.to_string(), format!("{l:.6}"), format!("{t:.6}")])
                .collect();
            write_csv(&loss_path(out), &["epoch", "loss", "top1"], &rows)?;
            for (e, (l, t)) in report.epoch_losses.iter().zip(&report.epoch_top1).enumerate() {
                println!("epoch {e:3}  loss {l:.4}  top1 {t:.3}");
            }
        }
        "supervised" => {
            let findings = load_findings(corpus)?;
            let mut corpus_pairs = Vec::with_capacity(images.len());
            for (scan_id, img) in images {
                let f = findings
                    .get(&scan_id)
                    .ok_or_else(|| runtime(format!("scan {scan_id} missing from findings.csv")))?;
                corpus_pairs.push((img, f.clone()));
            }
            let cfg = SupervisedConfig {
                widths,
                epochs: args.epochs,
                lr: args.lr.unwrap_or(1e-3),
                batch_size: args.batch_size.unwrap_or(64),
                image_size: args.image_size,
                ..SupervisedConfig::default()
            };
            let mut store = ParamStore::<f32>::new();
            let model = SupervisedModel::new(&mut store, &cfg.widths, N_FINDINGS, cfg.image_size, &mut rng);
            let losses = supervised_pretrain(&model, &mut store, &corpus_pairs, &cfg, args.seed)?;
            save_supervised(out, &store, &cfg, N_FINDINGS)?;
            let rows: Vec<Vec<String>> = losses
                .iter()
                .enumerate()
                .map(|(e, l)| vec![e.to_string(), format!("{l:.6}")])
                .collect();
            write_csv(&loss_path(out), &["epoch", "loss"], &rows)?;
            for (e, l) in losses.iter().enumerate() {
                println!("epoch {e:3}  loss {l:.4}");
            }
        }
        other => return Err(runtime(format!("unknown pretraining mode {other:?}"))),
    }

    manifest::write(&manifest_path(out), &Manifest::Pretrain(args.clone()))?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}

pub fn loss_path(out: &Path) -> std::path::PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".loss.csv");
    std::path::PathBuf::from(s)
}

pub fn manifest_path(out: &Path) -> std::path::PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    std::path::PathBuf::from(s)
}
