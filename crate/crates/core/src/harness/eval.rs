use serde::{Deserialize, Serialize};

use super::model::{FeatureCache, Model, PseudoMasks};
use crate::ccm::{self, GateState};
use crate::numcore::Tape;
use crate::synth::{Dataset, Pair, Split};
use crate::wrec::BoxPred;
use crate::{Error, Result};

/// Strictly above this box IoU counts as a grounding hit.
pub const REC_IOU_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: u32,
    pub pred: BoxPred,
    pub box_iou: f64,
    pub hit: bool,
    pub mask_iou: f64,
    pub gate: GateState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rec_acc: f64,
    pub res_miou: f64,
    pub records: Vec<PairRecord>,
}

impl EvalReport {
    pub fn from_records(records: Vec<PairRecord>) -> Self {
        let n = records.len().max(1) as f64;
        Self {
            rec_acc: records.iter().filter(|r| r.hit).count() as f64 / n,
            res_miou: records.iter().map(|r| r.mask_iou).sum::<f64>() / n,
            records,
        }
    }
}

/// Box hit: raster IoU with the ground-truth box strictly above 0.5.
pub fn rec_hit(pred: &crate::BBox, gt: &crate::BBox, h: usize, w: usize) -> Result<(f64, bool)> {
    let v = ccm::iou(&ccm::rasterize(pred, h, w), &ccm::rasterize(gt, h, w))?;
    Ok((v, v > REC_IOU_THRESHOLD))
}

/// Scores the model on one split. Pure in (model, split).
pub fn evaluate(model: &Model, dataset: &Dataset, cache: &FeatureCache, split: Split) -> Result<EvalReport> {
    evaluate_pairs(model, dataset.split(split), cache.split(split), split)
}

pub(crate) fn evaluate_pairs(
    model: &Model,
    pairs: &[Pair],
    feats: &[crate::harness::PairFeatures],
    split: Split,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(format!("split {split:?} is absent from the dataset")));
    }
    let mut pseudo = PseudoMasks::new(&model.config);
    let mut records = Vec::with_capacity(pairs.len());
    for (pair, f) in pairs.iter().zip(feats) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let fwd = model.forward(&mut tape, &bound, pair, f)?;
        let pred = model.predicted_box(&tape, &fwd, f)?;
        let (h, w) = (pair.scene.image.height, pair.scene.image.width);
        let target = &pair.scene.objects[pair.expression.target_index];
        let (box_iou, hit) = rec_hit(&pred.bbox, &target.gt_box, h, w)?;
        let o = tape.value(fwd.mask);
        let mask_iou = ccm::iou(&ccm::binarize(o), &target.gt_mask)?;
        let m_hat = pseudo.get(pair, &pred.bbox);
        let gate = ccm::gate(o, &pred.bbox, &m_hat, model.config.alpha, model.config.gate_source)?;
        records.push(PairRecord {
            id: pair.id,
            pred,
            box_iou,
            hit,
            mask_iou,
            gate,
        });
    }
    Ok(EvalReport::from_records(records))
}
