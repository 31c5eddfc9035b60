use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate_pairs, EvalReport};
use super::model::{FeatureCache, LossBundle, Model, PseudoMasks};
use super::Config;
use crate::numcore::Tape;
use crate::optim::{cosine_lr, named_grads, Adam};
use crate::params::ParamStore;
use crate::synth::{Dataset, Split};
use crate::{seed, Error, Result};

pub const LOG_HEADER: &str = "epoch,l_atc,l_res_raw,l_scl,l_inc,gate_open_frac,l_total,rec_acc,res_miou,lr";
pub const RESULTS_HEADER: &str = "seed,split,rec_acc,res_miou";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossBundle,
    pub rec_acc: f64,
    pub res_miou: f64,
    pub lr: f64,
}

impl EpochLog {
    fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            l.l_atc,
            l.l_res_raw,
            l.l_scl,
            l.l_inc,
            l.gate_open_fraction,
            l.l_total,
            self.rec_acc,
            self.res_miou,
            self.lr
        )
    }
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for e in log {
        s.push_str(&e.csv_row());
        s.push('\n');
    }
    s
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
    /// Recorded in `dataset.json` when the dataset came from a file.
    pub dataset_path: Option<PathBuf>,
    pub checkpoints: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub test: EvalReport,
}

/// Consecutive batches over `order`; a trailing single pair joins the batch
/// before it, since the contrastive term needs two.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().map_or(false, |b| b.len() < 2) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

fn mean_bundle(acc: &[(LossBundle, usize)]) -> LossBundle {
    let n: usize = acc.iter().map(|(_, k)| k).sum();
    let mut m = LossBundle::default();
    for (b, k) in acc {
        let w = *k as f64 / n.max(1) as f64;
        m.l_atc += w * b.l_atc;
        m.l_res_raw += w * b.l_res_raw;
        m.l_scl += w * b.l_scl;
        m.l_inc += w * b.l_inc;
        m.gate_open_fraction += w * b.gate_open_fraction;
        m.l_total += w * b.l_total;
    }
    m
}

fn results_csv(seed: u64, split: Split, r: &EvalReport) -> String {
    let split = serde_json::to_value(split).unwrap();
    format!(
        "{RESULTS_HEADER}\n{seed},{},{},{}\n",
        split.as_str().unwrap(),
        r.rec_acc,
        r.res_miou
    )
}

fn write_dataset_ref(dir: &Path, dataset: &Dataset, path: Option<&Path>) -> Result<()> {
    let v = serde_json::json!({
        "path": path.map(|p| p.display().to_string()),
        "config": dataset.config,
        "counts": { "train": dataset.train.len(), "val": dataset.val.len(), "test": dataset.test.len() },
    });
    std::fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&v).unwrap())?;
    Ok(())
}

/// Weak-phase training on the train split from a frozen detector. Metrics
/// per epoch come from the val split, or the test split when val is empty.
pub fn train(
    config: &Config,
    dataset: &Dataset,
    cache: &FeatureCache,
    detector: &ParamStore,
    output: &RunOutput,
) -> Result<TrainOutcome> {
    let mut model = Model::new(config, detector)?;
    if [cache.train.len(), cache.val.len(), cache.test.len()] != [dataset.train.len(), dataset.val.len(), dataset.test.len()] {
        return Err(Error::InvalidArgument("feature cache does not match the dataset".into()));
    }
    if dataset.train.len() < 2 {
        return Err(Error::InvalidArgument("contrastive loss requires negatives".into()));
    }
    if let Some(dir) = &output.dir {
        std::fs::create_dir_all(dir)?;
        config.save(&dir.join("config.json"))?;
        write_dataset_ref(dir, dataset, output.dataset_path.as_deref())?;
        if output.checkpoints {
            std::fs::create_dir_all(dir.join("checkpoints"))?;
        }
    }
    let monitor = if dataset.val.is_empty() { Split::Test } else { Split::Val };
    let batch_size = config.batch_size.min(dataset.train.len());
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let steps_per_epoch = batches(&order, batch_size).len();
    let total_steps = steps_per_epoch * config.epochs;
    let mut adam = Adam::default();
    let mut pseudo = PseudoMasks::new(config);
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0usize;

    for epoch in 1..=config.epochs {
        pseudo.frozen = config.freeze_pseudo_after.map_or(false, |k| epoch > k);
        order.sort_unstable();
        order.shuffle(&mut seed::rng(seed::derive(config.seed, &[0x7a1, epoch as u64])));
        let mut bundles = Vec::with_capacity(steps_per_epoch);
        let mut lr = config.lr;
        for batch in batches(&order, batch_size) {
            let items: Vec<_> = batch.iter().map(|&i| (&dataset.train[i], &cache.train[i])).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let (loss, bundle, _) = model.total_loss(&mut tape, &bound, &items, &mut pseudo)?;
            let diverged = |detail: String| Error::Divergence {
                seed: config.seed,
                step,
                detail,
            };
            if !bundle.l_total.is_finite() {
                return Err(diverged(format!("non-finite loss, last bundle {bundle:?}")));
            }
            let grads = tape
                .backward(loss)
                .map_err(|e| diverged(format!("{e}; last bundle {bundle:?}")))?;
            let grads: BTreeMap<_, _> = named_grads(&bound, &grads);
            lr = cosine_lr(config.lr, step, total_steps);
            adam.step(&mut model.params, &grads, lr);
            bundles.push((bundle, batch.len()));
            step += 1;
        }
        let report = evaluate_pairs(&model, dataset.split(monitor), cache.split(monitor), monitor)?;
        log.push(EpochLog {
            epoch,
            losses: mean_bundle(&bundles),
            rec_acc: report.rec_acc,
            res_miou: report.res_miou,
            lr,
        });
        if let (Some(dir), true) = (&output.dir, output.checkpoints) {
            model.params.save(&dir.join("checkpoints").join(format!("epoch{epoch}.ckpt")))?;
        }
    }

    let test = if dataset.test.is_empty() {
        evaluate_pairs(&model, &dataset.val, &cache.val, Split::Val)?
    } else {
        evaluate_pairs(&model, &dataset.test, &cache.test, Split::Test)?
    };
    if let Some(dir) = &output.dir {
        std::fs::write(dir.join("log.csv"), log_csv(&log))?;
        let split = if dataset.test.is_empty() { Split::Val } else { Split::Test };
        std::fs::write(dir.join("results.csv"), results_csv(config.seed, split, &test))?;
    }
    Ok(TrainOutcome { model, log, test })
}

/// Human-readable one-line summary of an epoch.
pub fn describe(e: &EpochLog) -> String {
    format!(
        "epoch {:>3}  l_total {:.4}  l_atc {:.4}  l_inc {:.4}  l_scl {:.4}  gate {:.2}  rec {:.3}  res {:.3}",
        e.epoch,
        e.losses.l_total,
        e.losses.l_atc,
        e.losses.l_inc,
        e.losses.l_scl,
        e.losses.gate_open_fraction,
        e.rec_acc,
        e.res_miou
    )
}
