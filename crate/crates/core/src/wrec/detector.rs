use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::boxes::{decode_box, encode_box};
use crate::featbank::{encode_dark, image_tensor, init_dark, DARK_CHANNELS};
use crate::geom::{BBox, Mask};
use crate::numcore::{Tape, Tensor, Var};
use crate::optim::{accumulate, cosine_lr, named_grads, Adam};
use crate::params::{init_linear, linear_map, Bound, ParamStore};
use crate::synth::{Image, Pair, Scene};
use crate::wres::res_loss;
use crate::{seed, Error, Result};

/// Parameter name prefixes owned by the detector.
pub const DETECTOR_PREFIXES: [&str; 2] = ["dark.", "det."];
const STRIDES: [usize; 3] = [8, 16, 32];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-2,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_loss: Vec<f64>,
}

/// Encoder plus one 1×1 head `det.h{i}` (objectness and four offsets) per level.
pub fn init_detector(store: &mut ParamStore, seed: u64) {
    let mut rng = seed::rng(seed::derive(seed, &[0xde7]));
    init_dark(store, &mut rng);
    for (i, &c) in DARK_CHANNELS.iter().enumerate() {
        init_linear(store, &mut rng, &format!("det.h{}", i + 1), c, 5);
    }
}

fn prior(level: usize) -> (f64, f64) {
    let p = STRIDES[level] as f64 / 2.0;
    (p, p)
}

/// Head outputs `[5, h, w]` per level for an image var `[3, H, W]`.
pub fn detector_forward(tape: &mut Tape, bound: &Bound, x: Var) -> Result<[Var; 3]> {
    let levels = encode_dark(tape, bound, x)?;
    let mut out = Vec::with_capacity(3);
    for (i, &l) in levels.iter().enumerate() {
        out.push(linear_map(tape, bound, &format!("det.h{}", i + 1), l)?);
    }
    Ok([out[0], out[1], out[2]])
}

/// Object owning each cell of a level: the largest object whose box center
/// falls in that cell.
fn cell_owners(scene: &Scene, level: usize) -> (usize, usize, Vec<Option<usize>>) {
    let s = STRIDES[level];
    let (gh, gw) = (scene.image.height / s, scene.image.width / s);
    let mut owners: Vec<Option<usize>> = vec![None; gh * gw];
    for (k, o) in scene.objects.iter().enumerate() {
        let (cx, cy) = o.gt_box.center();
        let (r, c) = (((cy / s as f64) as usize).min(gh - 1), ((cx / s as f64) as usize).min(gw - 1));
        let slot = &mut owners[r * gw + c];
        let bigger = slot.map_or(true, |j| o.gt_mask.count() > scene.objects[j].gt_mask.count());
        if bigger {
            *slot = Some(k);
        }
    }
    (gh, gw, owners)
}

fn scene_loss(tape: &mut Tape, bound: &Bound, scene: &Scene) -> Result<Var> {
    let x = tape.constant(image_tensor(&scene.image));
    let heads = detector_forward(tape, bound, x)?;
    let mut total: Option<Var> = None;
    for (level, &head) in heads.iter().enumerate() {
        let (gh, gw, owners) = cell_owners(scene, level);
        let flat = tape.reshape(head, &[5, gh * gw])?;
        let obj = tape.index_select(flat, 0, &[0])?;
        let obj = tape.reshape(obj, &[gh, gw])?;
        let prob = tape.sigmoid(obj)?;
        let target = Mask::from_vec(gh, gw, owners.iter().map(Option::is_some).collect());
        let mut loss = res_loss(tape, prob, &target)?;

        let pos: Vec<usize> = (0..gh * gw).filter(|&c| owners[c].is_some()).collect();
        if !pos.is_empty() {
            let mut tgt = vec![0.0; 4 * pos.len()];
            for (n, &c) in pos.iter().enumerate() {
                let b = scene.objects[owners[c].unwrap()].gt_box;
                let t = encode_box(&b, (c / gw, c % gw), prior(level), STRIDES[level] as f64);
                let s = STRIDES[level] as f64;
                let (cx, cy) = b.center();
                let vals = [cx / s - (c % gw) as f64, cy / s - (c / gw) as f64, t[2], t[3]];
                for k in 0..4 {
                    tgt[k * pos.len() + n] = vals[k];
                }
            }
            let sel = tape.index_select(flat, 1, &pos)?;
            let xy = tape.index_select(sel, 0, &[1, 2])?;
            let xy = tape.sigmoid(xy)?;
            let wh = tape.index_select(sel, 0, &[3, 4])?;
            let pred = tape.concat(&[xy, wh], 0)?;
            let tgt = tape.constant(Tensor::new(vec![4, pos.len()], tgt)?);
            let diff = tape.sub(pred, tgt)?;
            let sl = tape.smooth_l1(diff)?;
            let reg = tape.sum_all(sl)?;
            let reg = tape.scale(reg, 1.0 / pos.len() as f64)?;
            loss = tape.add(loss, reg)?;
        }
        total = Some(match total {
            Some(t) => tape.add(t, loss)?,
            None => loss,
        });
    }
    Ok(total.expect("three levels"))
}

/// Trains encoder and heads on boxes only. Zero epochs returns the
/// initialization untouched.
pub fn pretrain_detector(train: &[Pair], config: &PretrainConfig) -> Result<(ParamStore, PretrainReport)> {
    if config.batch_size == 0 {
        return Err(Error::Config("pretrain batch size must be positive".into()));
    }
    let mut params = ParamStore::new();
    init_detector(&mut params, config.seed);
    let mut report = PretrainReport::default();
    if train.is_empty() || config.epochs == 0 {
        return Ok((params, report));
    }
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total = steps_per_epoch * config.epochs;
    let mut adam = Adam::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut seed::rng(seed::derive(config.seed, &[0x5fe, epoch as u64])));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = Default::default();
            let mut batch_loss = 0.0;
            for &i in batch {
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape, |_| true);
                let l = scene_loss(&mut tape, &bound, &train[i].scene)?;
                let l = tape.scale(l, 1.0 / batch.len() as f64)?;
                let v = tape.value(l).item();
                if !v.is_finite() {
                    return Err(Error::Divergence {
                        seed: config.seed,
                        step,
                        detail: format!("detector loss {v}"),
                    });
                }
                batch_loss += v;
                let g = tape.backward(l).map_err(|e| Error::Divergence {
                    seed: config.seed,
                    step,
                    detail: e.to_string(),
                })?;
                accumulate(&mut grads, named_grads(&bound, &g));
            }
            adam.step(&mut params, &grads, cosine_lr(config.lr, step, total));
            epoch_loss += batch_loss * batch.len() as f64;
            step += 1;
        }
        report.epoch_loss.push(epoch_loss / train.len() as f64);
    }
    Ok((params, report))
}

fn head_values(params: &ParamStore, image: &Image) -> Result<[Tensor; 3]> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let x = tape.constant(image_tensor(image));
    let heads = detector_forward(&mut tape, &bound, x)?;
    Ok(heads.map(|h| tape.value(h).clone()))
}

fn decode_level(head: &Tensor, level: usize, image: (usize, usize)) -> Vec<BBox> {
    let (gh, gw) = (head.shape()[1], head.shape()[2]);
    (0..gh * gw)
        .map(|c| {
            let off = [1, 2, 3, 4].map(|k| head.data()[k * gh * gw + c]);
            decode_box((c / gw, c % gw), off, prior(level), STRIDES[level] as f64, image)
        })
        .collect()
}

/// Decoded box of every stride-32 cell, row-major.
pub fn cell_boxes(params: &ParamStore, image: &Image) -> Result<Vec<BBox>> {
    let heads = head_values(params, image)?;
    Ok(decode_level(&heads[2], 2, (image.height, image.width)))
}

/// Mean IoU, over every object that owns its stride-32 center cell, between
/// that cell's decoded box and the object's box.
pub fn detector_center_iou(params: &ParamStore, pairs: &[Pair]) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for p in pairs {
        let boxes = cell_boxes(params, &p.scene.image)?;
        let (_, _, owners) = cell_owners(&p.scene, 2);
        for (c, o) in owners.iter().enumerate() {
            if let Some(k) = o {
                sum += boxes[c].iou(&p.scene.objects[*k].gt_box);
                n += 1;
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}
