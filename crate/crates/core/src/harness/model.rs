use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Config;
use crate::ccm::{self, GateState};
use crate::featbank::{
    dvfe_combine, dvfe_weights, encode_dino, encode_sam, fpn_fuse, init_dvfe, init_fpn, Source, Task, DARK_CHANNELS,
    DINO_CHANNELS, SAM_CHANNELS,
};
use crate::geom::{BBox, Mask};
use crate::numcore::{self, Tape, Tensor, Var};
use crate::params::{Bound, ParamStore};
use crate::synth::{Dataset, Pair, Split, VOCAB_SIZE};
use crate::wrec::{self, BoxPred, DETECTOR_PREFIXES};
use crate::wres::{self, oracle_mask, OracleConfig};
use crate::{seed, Error, Result};

/// Frozen per-scene inputs: detector feature maps, the fixed encoders
/// resampled to both task grids, and the decoded box of every anchor cell.
#[derive(Clone, Debug)]
pub struct PairFeatures {
    pub dark: [Tensor; 3],
    pub rec_fixed: BTreeMap<Source, Tensor>,
    pub res_fixed: BTreeMap<Source, Tensor>,
    pub boxes: Vec<BBox>,
}

impl PairFeatures {
    pub fn compute(pair: &Pair, detector: &ParamStore) -> Result<Self> {
        let image = &pair.scene.image;
        let mut tape = Tape::new();
        let bound = detector.bind(&mut tape, |_| false);
        let x = tape.constant(crate::featbank::image_tensor(image));
        let levels = crate::featbank::encode_dark(&mut tape, &bound, x)?;
        let dark = levels.map(|v| tape.value(v).clone());
        let (h, w) = (image.height, image.width);
        let fixed = [(Source::Dino, encode_dino(image)), (Source::Sam, encode_sam(image))];
        let mut rec_fixed = BTreeMap::new();
        let mut res_fixed = BTreeMap::new();
        for (src, t) in fixed {
            let (rh, rw) = Task::Rec.grid(h, w);
            let (sh, sw) = Task::Res.grid(h, w);
            rec_fixed.insert(src, numcore::resize(&t, rh, rw)?);
            res_fixed.insert(src, numcore::resize(&t, sh, sw)?);
        }
        Ok(Self {
            dark,
            rec_fixed,
            res_fixed,
            boxes: wrec::cell_boxes(detector, image)?,
        })
    }
}

/// Frozen features for every pair of a dataset, split by split.
#[derive(Clone, Debug, Default)]
pub struct FeatureCache {
    pub train: Vec<PairFeatures>,
    pub val: Vec<PairFeatures>,
    pub test: Vec<PairFeatures>,
}

impl FeatureCache {
    pub fn build(dataset: &Dataset, detector: &ParamStore) -> Result<Self> {
        let f = |pairs: &[Pair]| pairs.iter().map(|p| PairFeatures::compute(p, detector)).collect::<Result<Vec<_>>>();
        Ok(Self {
            train: f(&dataset.train)?,
            val: f(&dataset.val)?,
            test: f(&dataset.test)?,
        })
    }

    pub fn split(&self, split: Split) -> &[PairFeatures] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Means over one batch; `l_total` is assembled from the other fields.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_atc: f64,
    pub l_res_raw: f64,
    pub l_scl: f64,
    pub l_inc: f64,
    pub gate_open_fraction: f64,
    pub l_total: f64,
}

impl LossBundle {
    /// `l_total` recomputed from the parts under `config`'s weights.
    pub fn recompute_total(&self, config: &Config) -> f64 {
        config.lambda_atc * self.l_atc
            + config.lambda_inc * self.l_inc
            + config.lambda_scl * self.l_scl
            + config.lambda_res * self.l_res_raw
    }
}

/// What one pair produced during a forward pass.
#[derive(Clone, Debug)]
pub struct PairStep {
    pub pred: BoxPred,
    pub pseudo: Mask,
    pub gate: GateState,
}

/// Graph outputs for one pair.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub anchors: Var,
    pub text: Var,
    pub sims: Var,
    pub mask: Var,
}

/// Pseudo masks from the box-prompted oracle, optionally frozen per pair.
#[derive(Clone, Debug)]
pub struct PseudoMasks {
    oracle: OracleConfig,
    cache: BTreeMap<u32, Mask>,
    pub frozen: bool,
}

impl PseudoMasks {
    /// The oracle stream is keyed on both the configured oracle seed and the run seed.
    pub fn new(config: &Config) -> Self {
        Self {
            oracle: OracleConfig {
                seed: seed::derive(config.oracle.seed, &[config.seed]),
                ..config.oracle.clone()
            },
            cache: BTreeMap::new(),
            frozen: false,
        }
    }

    pub fn get(&mut self, pair: &Pair, prompt: &BBox) -> Mask {
        if self.frozen {
            if let Some(m) = self.cache.get(&pair.id) {
                return m.clone();
            }
        }
        let m = oracle_mask(&pair.scene, prompt, &self.oracle).mask;
        self.cache.insert(pair.id, m.clone());
        m
    }
}

/// Trainable weak-phase parameters plus the frozen detector.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: Config,
    pub params: ParamStore,
}

pub fn is_trainable(name: &str) -> bool {
    !DETECTOR_PREFIXES.iter().any(|p| name.starts_with(p))
}

fn bank_channels(src: Source, d: usize) -> usize {
    match src {
        Source::Dark => d,
        Source::Dino => DINO_CHANNELS,
        Source::Sam => SAM_CHANNELS,
    }
}

impl Model {
    /// Fresh weak-phase parameters (seeded by `config.seed`) on top of a
    /// pretrained detector.
    pub fn new(config: &Config, detector: &ParamStore) -> Result<Self> {
        config.validate()?;
        for i in 1..=DARK_CHANNELS.len() {
            detector.get(&format!("dark.c{i}.w"))?;
        }
        let mut params = detector.subset("dark.");
        params.extend(&detector.subset("det."));
        let mut rng = seed::rng(seed::derive(config.seed, &[0x1417]));
        init_fpn(&mut params, &mut rng, config.d);
        wrec::init_text(&mut params, &mut rng, VOCAB_SIZE, config.d_t);
        wrec::init_projections(&mut params, &mut rng, config.d, config.d_t, config.contrastive_dim);
        let bank: Vec<(Source, usize)> = config.bank.iter().map(|&s| (s, bank_channels(s, config.d))).collect();
        for task in [Task::Rec, Task::Res] {
            init_dvfe(&mut params, &mut rng, task, &bank, config.d);
        }
        wres::init_decoder(&mut params, &mut rng, config.d, config.d_t, config.aspp_width);
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn bind(&self, tape: &mut Tape, train: bool) -> Bound {
        self.params.bind(tape, |n| train && is_trainable(n))
    }

    fn task_feature(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        task: Task,
        base: Var,
        fixed: &BTreeMap<Source, Tensor>,
    ) -> Result<Var> {
        if !self.config.use_dvfe {
            return Ok(base);
        }
        let s = tape.shape(base).to_vec();
        let mut bank = Vec::with_capacity(self.config.bank.len());
        for &src in &self.config.bank {
            let v = match src {
                Source::Dark => base,
                other => tape.constant(fixed[&other].clone()),
            };
            bank.push((src, v));
        }
        let w = dvfe_weights(tape, bound, task, base)?;
        let residual = self.config.dvfe_residual.then_some(base);
        dvfe_combine(tape, bound, task, &bank, w, (s[1], s[2]), residual)
    }

    /// Full forward for one pair on `tape`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, pair: &Pair, feats: &PairFeatures) -> Result<Forward> {
        let c = &self.config;
        let levels = feats.dark.clone().map(|t| tape.constant(t));
        let fused = fpn_fuse(tape, bound, levels)?;
        let f_t = wrec::encode_text(tape, bound, &pair.expression.token_ids())?;

        let f_rec = self.task_feature(tape, bound, Task::Rec, fused[2], &feats.rec_fixed)?;
        let a = wrec::anchor_features(tape, f_rec)?;
        let anchors = wrec::project_anchors(tape, bound, a, c.cosine_sim)?;
        let text = wrec::project_text(tape, bound, f_t, c.cosine_sim)?;
        let sims = wrec::similarities(tape, anchors, text)?;

        let f_res = self.task_feature(tape, bound, Task::Res, fused[0], &feats.res_fixed)?;
        let (h, w) = (pair.scene.image.height, pair.scene.image.width);
        let mask = wres::aspp_decode(tape, bound, f_res, f_t, h, w)?;
        Ok(Forward {
            anchors,
            text,
            sims,
            mask,
        })
    }

    /// Box at the best-scoring anchor cell.
    pub fn predicted_box(&self, tape: &Tape, fwd: &Forward, feats: &PairFeatures) -> Result<BoxPred> {
        let scores = tape.value(fwd.sims).data();
        let cell = wrec::topk_select(scores, 1)?[0];
        Ok(BoxPred {
            bbox: feats.boxes[cell],
            cell,
            score: scores[cell],
        })
    }

    fn gate_for(&self, o: &Tensor, b: &BBox, pseudo: &Mask) -> Result<GateState> {
        let g = ccm::gate(o, b, pseudo, self.config.alpha, self.config.gate_source)?;
        Ok(if self.config.use_isl {
            g
        } else {
            GateState { open: true, ..g }
        })
    }

    /// Builds the weighted objective for a batch of at least two pairs.
    pub fn total_loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &[(&Pair, &PairFeatures)],
        pseudo: &mut PseudoMasks,
    ) -> Result<(Var, LossBundle, Vec<PairStep>)> {
        if batch.len() < 2 {
            return Err(Error::InvalidArgument("contrastive loss requires negatives".into()));
        }
        let c = &self.config;
        let n = batch.len() as f64;
        let mut anchors = Vec::with_capacity(batch.len());
        let mut texts = Vec::with_capacity(batch.len());
        let mut selected = Vec::with_capacity(batch.len());
        let mut steps = Vec::with_capacity(batch.len());
        let (mut res_terms, mut inc_terms, mut scl_terms) = (Vec::new(), Vec::new(), Vec::new());
        let mut open = 0usize;
        for &(pair, feats) in batch {
            let fwd = self.forward(tape, bound, pair, feats)?;
            selected.push(wrec::topk_select(tape.value(fwd.sims).data(), c.top_k)?);
            anchors.push(fwd.anchors);
            texts.push(fwd.text);
            let pred = self.predicted_box(tape, &fwd, feats)?;
            let m_hat = pseudo.get(pair, &pred.bbox);
            let gate = self.gate_for(tape.value(fwd.mask), &pred.bbox, &m_hat)?;
            open += gate.open as usize;
            let raw = wres::res_loss(tape, fwd.mask, &m_hat)?;
            let inc = ccm::gated(tape, raw, &gate)?;
            let scl = ccm::scl_loss(tape, fwd.mask, &pred.bbox)?;
            res_terms.push(tape.reshape(raw, &[1])?);
            inc_terms.push(tape.reshape(inc, &[1])?);
            scl_terms.push(tape.reshape(scl, &[1])?);
            steps.push(PairStep {
                pred,
                pseudo: m_hat,
                gate,
            });
        }
        let items = wrec::atc_items(tape, &anchors, &texts, &selected, c.neg_pool)?;
        let l_atc = wrec::atc_loss(tape, &items, c.tau, c.atc_literal)?;
        let mut mean = |terms: &[Var]| -> Result<Var> {
            let cat = tape.concat(terms, 0)?;
            tape.mean_all(cat)
        };
        let l_res = mean(&res_terms)?;
        let l_inc = mean(&inc_terms)?;
        let l_scl = mean(&scl_terms)?;

        let mut total = tape.scale(l_atc, c.lambda_atc)?;
        for (lambda, term) in [(c.lambda_inc, l_inc), (c.lambda_scl, l_scl), (c.lambda_res, l_res)] {
            if lambda != 0.0 {
                let t = tape.scale(term, lambda)?;
                total = tape.add(total, t)?;
            }
        }
        let bundle = LossBundle {
            l_atc: tape.value(l_atc).item(),
            l_res_raw: tape.value(l_res).item(),
            l_scl: tape.value(l_scl).item(),
            l_inc: tape.value(l_inc).item(),
            gate_open_fraction: open as f64 / n,
            l_total: tape.value(total).item(),
        };
        Ok((total, bundle, steps))
    }
}
