// Throwaway feasibility probe for the transfer-direction acceptance check.
// Run with: cargo test -p prognosis-cli --test probe9 -- --ignored --nocapture

use std::collections::HashSet;
use std::time::Instant;

use prognosis_core::augment::sample_rng;
use prognosis_core::cohort::{
    apply_task_filter, patient_split, synth_cohort, LabelLayout, SynthConfig, Task,
    window_labels,
};
use prognosis_core::evalstats::{roc_auc, ScoredSet};
use prognosis_core::image::{read_pgm, Image};
use prognosis_core::models::{finetune, sip_eval_logits, FinetuneConfig, FinetuneMode, SipExample, SipModel};
use prognosis_core::nn::ParamStore;
use prognosis_core::pretrain::{load_encoder_tensors, pretrain_moco, save_moco, MoCoConfig, MoCoModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sip_examples(dir: &std::path::Path, cohort: &prognosis_core::cohort::SynthCohort) -> Vec<(String, SipExample)> {
    let layout = LabelLayout::adverse();
    let scans = apply_task_filter(&cohort.scans, &cohort.events, Task::Sip);
    scans
        .iter()
        .map(|s| {
            let ex = window_labels(s, &cohort.events, &layout);
            let image = read_pgm(&dir.join(&s.image_path)).unwrap();
            (
                s.patient_id.clone(),
                SipExample {
                    example_id: s.scan_id.clone(),
                    image,
                    labels: ex.labels,
                    mask: ex.mask,
                },
            )
        })
        .collect()
}

fn auc_at(examples: &[SipExample], logits: &[Vec<f64>], label: usize) -> f64 {
    let mut ids = Vec::new();
    let mut s = Vec::new();
    let mut y = Vec::new();
    for (e, row) in examples.iter().zip(logits) {
        if e.mask[label] == 1.0 {
            ids.push(e.example_id.clone());
            s.push(row[label]);
            y.push(e.labels[label] as u8);
        }
    }
    roc_auc(&ScoredSet::new(ids, s, y).unwrap()).unwrap()
}

#[test]
#[ignore]
fn probe9() {
    let t_all = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let pre_dir = tmp.path().join("pre");
    let fine_dir = tmp.path().join("fine");
    let cfg = SynthConfig::default();

    let pre = synth_cohort(&pre_dir, 700, &cfg, 100).unwrap();
    let fine = synth_cohort(&fine_dir, 500, &cfg, 101).unwrap();
    println!("pretrain scans {} fine scans {}", pre.scans.len(), fine.scans.len());

    let corpus: Vec<Image> = pre
        .scans
        .iter()
        .take(2000)
        .map(|s| read_pgm(&pre_dir.join(&s.image_path)).unwrap())
        .collect();
    assert!(corpus.len() == 2000, "need 2000 pretraining images, got {}", corpus.len());

    let examples = sip_examples(&fine_dir, &fine);
    let patients: Vec<String> = examples.iter().map(|(p, _)| p.clone()).collect();
    let (_, test) = patient_split(&patients, &mut sample_rng(0, 0, 0), (0.8, 0.2)).unwrap();
    let test_set: HashSet<String> = test.into_iter().collect();
    let mut train: Vec<SipExample> = Vec::new();
    let mut test_ex: Vec<SipExample> = Vec::new();
    for (p, e) in examples {
        if test_set.contains(&p) {
            test_ex.push(e);
        } else {
            train.push(e);
        }
    }
    let layout = LabelLayout::adverse();
    let label = layout.names().iter().position(|n| n == "any_adverse@any").unwrap();
    let n_pos: usize = test_ex.iter().filter(|e| e.labels[label] == 1.0).count();
    println!("train {} test {} ({} pos @any)", train.len(), test_ex.len(), n_pos);

    // MoCo pretrain, 40 epochs.
    let t = Instant::now();
    let mcfg = MoCoConfig::default();
    let mut mstore: ParamStore<f32> = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mmodel = MoCoModel::new(&mut mstore, &mcfg, &mut rng).unwrap();
    let report = pretrain_moco(&mmodel, &mut mstore, &corpus, &mcfg, 40, 201).unwrap();
    println!(
        "moco 40ep: loss {:.4} -> {:.4}, top1 {:.3} -> {:.3}  [{:?}]",
        report.epoch_losses[0],
        report.epoch_losses.last().unwrap(),
        report.epoch_top1[0],
        report.epoch_top1.last().unwrap(),
        t.elapsed()
    );
    let ckpt = tmp.path().join("moco.ckpt");
    save_moco(&ckpt, &mstore, &mcfg).unwrap();
    std::fs::copy(&ckpt, "/tmp/probe9_moco.ckpt").unwrap();
    let enc = load_encoder_tensors::<f32>(&ckpt).unwrap();

    let val: Vec<SipExample> = train[..8].to_vec();
    let n_labels = layout.count();

    for (epochs, lr) in [(8usize, 1e-3), (20, 1e-3), (8, 3e-4)] {
        let mut ft_aucs = Vec::new();
        let mut sc_aucs = Vec::new();
        let t_cell = Instant::now();
        for seed in 0..3u64 {
            for pretrained in [true, false] {
                let mut store: ParamStore<f32> = ParamStore::new();
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                let model = SipModel::new(&mut store, &enc.widths, n_labels, 64, &mut rng);
                let mode = if pretrained { FinetuneMode::Ft } else { FinetuneMode::Scratch };
                if pretrained {
                    model.init_from_pretrained(&mut store, &enc).unwrap();
                }
                let fcfg = FinetuneConfig {
                    lr,
                    epochs: Some(epochs),
                    val_label: label,
                    ..FinetuneConfig::new(mode)
                };
                finetune(&model, &mut store, &train, &val, &fcfg, 2000 + seed).unwrap();
                let logits = sip_eval_logits(&model, &mut store, &test_ex).unwrap();
                let auc = auc_at(&test_ex, &logits, label);
                if pretrained {
                    ft_aucs.push(auc);
                } else {
                    sc_aucs.push(auc);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "epochs {epochs:2} lr {lr:.0e}: FT {:.4} ({:.3?})  SCRATCH {:.4} ({:.3?})  gap {:+.4}  [{:?}]",
            mean(&ft_aucs),
            ft_aucs,
            mean(&sc_aucs),
            sc_aucs,
            mean(&ft_aucs) - mean(&sc_aucs),
            t_cell.elapsed()
        );
    }
    println!("total {:?}", t_all.elapsed());
    let _ = rng.random::<u64>();
}
