//! Box branch: expression encoder, anchor/text matching, the anchor-text
//! contrastive loss, grid box coding and the class-agnostic detector.

mod boxes;
mod detector;

pub use boxes::{decode_box, encode_box, BoxPred};
pub use detector::{
    cell_boxes, detector_center_iou, detector_forward, init_detector, pretrain_detector, PretrainConfig,
    PretrainReport, DETECTOR_PREFIXES,
};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numcore::{Tape, Tensor, Var};
use crate::params::{init_linear, linear_rows, Bound, ParamStore};
use crate::{Error, Result};

pub const DEFAULT_TOP_K: usize = 2;
pub const DEFAULT_TAU: f64 = 0.1;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NegPool {
    #[default]
    Topk,
    Top1,
}

/// Token table `text.emb: [vocab, d_t]` and output layer `text.fc: d_t → d_t`.
pub fn init_text(store: &mut ParamStore, rng: &mut ChaCha8Rng, vocab: usize, d_t: usize) {
    store.insert(
        "text.emb",
        Tensor::from_fn(vec![vocab, d_t], |_| rng.gen_range(-1.0..1.0)),
    );
    init_linear(store, rng, "text.fc", d_t, d_t);
}

/// Linear map of the mean token embedding; `[d_t]`.
pub fn encode_text(tape: &mut Tape, bound: &Bound, ids: &[usize]) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    let emb = bound.get("text.emb")?;
    let vocab = tape.shape(emb)[0];
    if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(Error::InvalidArgument(format!("unknown token id {bad}")));
    }
    let rows = tape.index_select(emb, 0, ids)?;
    let pooled = tape.mean(rows, 0)?;
    let d = tape.value(pooled).numel();
    let pooled = tape.reshape(pooled, &[1, d])?;
    let out = linear_rows(tape, bound, "text.fc", pooled)?;
    let n = tape.value(out).numel();
    tape.reshape(out, &[n])
}

/// Projections into the shared matching space: `rec.proj_a` (`d → c`) and
/// `rec.proj_t` (`d_t → c`).
pub fn init_projections(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize, d_t: usize, c: usize) {
    init_linear(store, rng, "rec.proj_a", d, c);
    init_linear(store, rng, "rec.proj_t", d_t, c);
}

fn l2_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let sq = tape.mul(x, x)?;
    let n = tape.sum(sq, 1)?;
    let rows = tape.shape(n)[0];
    let n = tape.reshape(n, &[rows, 1])?;
    let n = tape.add_scalar(n, NORM_EPS)?;
    let n = tape.sqrt(n)?;
    tape.div(x, n)
}

/// One anchor feature per grid cell: `[D, h, w] → [h·w, D]`, row-major cells.
pub fn anchor_features(tape: &mut Tape, grid: Var) -> Result<Var> {
    let s = tape.shape(grid).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("anchor_features", &s, &[0, 0, 0]));
    }
    let flat = tape.reshape(grid, &[s[0], s[1] * s[2]])?;
    tape.transpose(flat)
}

/// Projected anchors `[cells, c]`, optionally L2-normalized per row.
pub fn project_anchors(tape: &mut Tape, bound: &Bound, anchors: Var, cosine: bool) -> Result<Var> {
    let p = linear_rows(tape, bound, "rec.proj_a", anchors)?;
    if cosine {
        l2_rows(tape, p)
    } else {
        Ok(p)
    }
}

/// Projected text `[c]`.
pub fn project_text(tape: &mut Tape, bound: &Bound, f_t: Var, cosine: bool) -> Result<Var> {
    let n = tape.value(f_t).numel();
    let row = tape.reshape(f_t, &[1, n])?;
    let p = linear_rows(tape, bound, "rec.proj_t", row)?;
    let p = if cosine { l2_rows(tape, p)? } else { p };
    let c = tape.value(p).numel();
    tape.reshape(p, &[c])
}

/// Dot products of every anchor row `[cells, c]` with the text `[c]`.
pub fn similarities(tape: &mut Tape, anchors: Var, text: Var) -> Result<Var> {
    let c = tape.value(text).numel();
    let a = tape.shape(anchors).to_vec();
    if a.len() != 2 || a[1] != c {
        return Err(Error::Config(format!(
            "anchor features {a:?} do not match text dimension {c}"
        )));
    }
    let col = tape.reshape(text, &[c, 1])?;
    let s = tape.matmul(anchors, col)?;
    tape.reshape(s, &[a[0]])
}

/// The `k` best cells by descending score, ties to the lower index.
pub fn topk_select(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside 1..={}",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// One contrastive term: positive anchor `[c]`, its text `[c]`, negatives `[n, c]`.
#[derive(Clone, Copy, Debug)]
pub struct AtcItem {
    pub positive: Var,
    pub text: Var,
    pub negatives: Var,
}

/// Mean over items of `−log softmax` of the positive logit among
/// `{positive} ∪ negatives` at temperature `tau`. With `literal`, the
/// positive is left out of the denominator.
pub fn atc_loss(tape: &mut Tape, items: &[AtcItem], tau: f64, literal: bool) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::domain("atc_loss", format!("temperature {tau} must be positive")));
    }
    if items.is_empty() {
        return Err(Error::InvalidArgument("contrastive loss requires negatives".into()));
    }
    let mut terms = Vec::with_capacity(items.len());
    for it in items {
        let ns = tape.shape(it.negatives).to_vec();
        if ns.len() != 2 || ns[0] == 0 {
            return Err(Error::InvalidArgument("contrastive loss requires negatives".into()));
        }
        let pt = tape.mul(it.positive, it.text)?;
        let pos = tape.sum_all(pt)?;
        let pos = tape.scale(pos, 1.0 / tau)?;
        let pos = tape.reshape(pos, &[1])?;
        let c = tape.value(it.text).numel();
        let col = tape.reshape(it.text, &[c, 1])?;
        let neg = tape.matmul(it.negatives, col)?;
        let neg = tape.reshape(neg, &[ns[0]])?;
        let neg = tape.scale(neg, 1.0 / tau)?;
        let pool = if literal { neg } else { tape.concat(&[pos, neg], 0)? };
        let lse = tape.logsumexp(pool, 0)?;
        let pos = tape.reshape(pos, &[])?;
        terms.push(tape.sub(lse, pos)?);
    }
    let scalars: Vec<Var> = terms
        .iter()
        .map(|&t| tape.reshape(t, &[1]))
        .collect::<Result<_>>()?;
    let all = tape.concat(&scalars, 0)?;
    tape.mean_all(all)
}

/// Contrastive items for a batch: item `i` takes its best anchor as the
/// positive and the selected anchors of every other item as negatives
/// (`top1` keeps only their best).
pub fn atc_items(
    tape: &mut Tape,
    anchors: &[Var],
    texts: &[Var],
    selected: &[Vec<usize>],
    pool: NegPool,
) -> Result<Vec<AtcItem>> {
    let b = anchors.len();
    if b < 2 {
        return Err(Error::InvalidArgument("contrastive loss requires negatives".into()));
    }
    let mut picks = Vec::with_capacity(b);
    for (i, &a) in anchors.iter().enumerate() {
        let cells: &[usize] = match pool {
            NegPool::Topk => &selected[i],
            NegPool::Top1 => &selected[i][..1],
        };
        picks.push(tape.index_select(a, 0, cells)?);
    }
    let mut items = Vec::with_capacity(b);
    for i in 0..b {
        let pos = tape.index_select(anchors[i], 0, &selected[i][..1])?;
        let c = tape.shape(pos)[1];
        let positive = tape.reshape(pos, &[c])?;
        let others: Vec<Var> = (0..b).filter(|&j| j != i).map(|j| picks[j]).collect();
        let negatives = tape.concat(&others, 0)?;
        items.push(AtcItem {
            positive,
            text: texts[i],
            negatives,
        });
    }
    Ok(items)
}
