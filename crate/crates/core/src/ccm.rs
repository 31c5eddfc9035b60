//! Box/mask consistency: rasterization, axis projections, dice, the
//! projection consistency loss and the IoU-gated segmentation loss.

use serde::{Deserialize, Serialize};

use crate::geom::{BBox, Mask};
use crate::numcore::{Tape, Tensor, Var};
use crate::wres::res_loss;
use crate::{Error, Result};

pub const DICE_EPS: f64 = 1e-6;

fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

/// Pixel rectangle covered by `b` on an `h × w` grid: `(row0, row1, col0, col1)`, half-open.
fn pixel_span(b: &BBox, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let clamp = |v: f64, hi: usize| round_half_up(v).clamp(0.0, hi as f64) as usize;
    (clamp(b.y, h), clamp(b.y + b.h, h), clamp(b.x, w), clamp(b.x + b.w, w))
}

pub fn rasterize(b: &BBox, h: usize, w: usize) -> Mask {
    let (r0, r1, c0, c1) = pixel_span(b, h, w);
    Mask::from_fn(h, w, |i, j| i >= r0 && i < r1 && j >= c0 && j < c1)
}

/// 0/1 `[h, w]` tensor of a mask.
pub fn mask_to_tensor(m: &Mask) -> Tensor {
    Tensor::new(
        vec![m.height(), m.width()],
        m.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )
    .expect("mask extents are positive")
}

/// Column maxima of an `[h, w]` map: length `w`.
pub fn project_x(tape: &mut Tape, o: Var) -> Result<Var> {
    tape.max(o, 0)
}

/// Row maxima of an `[h, w]` map: length `h`.
pub fn project_y(tape: &mut Tape, o: Var) -> Result<Var> {
    tape.max(o, 1)
}

/// `(l_x, l_y)` of a hard mask.
pub fn projections(m: &Mask) -> (Vec<bool>, Vec<bool>) {
    let lx = (0..m.width()).map(|j| (0..m.height()).any(|i| m.get(i, j))).collect();
    let ly = (0..m.height()).map(|i| (0..m.width()).any(|j| m.get(i, j))).collect();
    (lx, ly)
}

/// `1 − 2Σpq / (Σp² + Σq² + ε)` over equal-length vectors.
pub fn dice(tape: &mut Tape, p: Var, q: Var, eps: f64) -> Result<Var> {
    if tape.shape(p) != tape.shape(q) {
        return Err(Error::shape("dice", tape.shape(p), tape.shape(q)));
    }
    let pq = tape.mul(p, q)?;
    let num = tape.sum_all(pq)?;
    let pp = tape.mul(p, p)?;
    let qq = tape.mul(q, q)?;
    let sp = tape.sum_all(pp)?;
    let sq = tape.sum_all(qq)?;
    let den = tape.add(sp, sq)?;
    let den = tape.add_scalar(den, eps)?;
    let ratio = tape.div(num, den)?;
    let ratio = tape.scale(ratio, -2.0)?;
    tape.add_scalar(ratio, 1.0)
}

/// Dice between the axis projections of `o: [h, w]` and of the box mask.
/// The box enters as a constant.
pub fn scl_loss(tape: &mut Tape, o: Var, b: &BBox) -> Result<Var> {
    let s = tape.shape(o).to_vec();
    if s.len() != 2 {
        return Err(Error::shape("scl_loss", &s, &[0, 0]));
    }
    let (lx, ly) = projections(&rasterize(b, s[0], s[1]));
    let ind = |v: Vec<bool>| Tensor::vector(v.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect());
    let bx = tape.constant(ind(lx));
    let by = tape.constant(ind(ly));
    let ox = project_x(tape, o)?;
    let oy = project_y(tape, o)?;
    let dx = dice(tape, ox, bx, DICE_EPS)?;
    let dy = dice(tape, oy, by, DICE_EPS)?;
    tape.add(dx, dy)
}

/// Mask IoU; 1 when both are empty.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape(
            "iou",
            &[a.height(), a.width()],
            &[b.height(), b.width()],
        ));
    }
    let inter = a.intersection_count(b);
    let union = a.count() + b.count() - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Thresholds a probability map at 0.5.
pub fn binarize(o: &Tensor) -> Mask {
    let s = o.shape();
    Mask::from_vec(s[0], s[1], o.data().iter().map(|&v| v >= 0.5).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateSource {
    #[default]
    PredictedMask,
    PseudoMask,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateState {
    pub iou: f64,
    pub alpha: f64,
    pub open: bool,
}

impl GateState {
    pub fn new(iou: f64, alpha: f64) -> Self {
        Self {
            iou,
            alpha,
            open: iou >= alpha,
        }
    }
}

/// Gate for one pair, evaluated on current values only.
pub fn gate(o: &Tensor, b: &BBox, pseudo: &Mask, alpha: f64, source: GateSource) -> Result<GateState> {
    let s = o.shape();
    let boxed = rasterize(b, s[0], s[1]);
    let v = match source {
        GateSource::PredictedMask => iou(&binarize(o), &boxed)?,
        GateSource::PseudoMask => iou(pseudo, &boxed)?,
    };
    Ok(GateState::new(v, alpha))
}

/// Applies a precomputed gate to an already-built segmentation loss. A
/// closed gate multiplies by a constant zero, so no gradient flows.
pub fn gated(tape: &mut Tape, loss: Var, g: &GateState) -> Result<Var> {
    tape.scale(loss, if g.open { 1.0 } else { 0.0 })
}

/// `gate · res_loss(O, M̂)`, together with the gate.
pub fn isl_loss(
    tape: &mut Tape,
    o: Var,
    b: &BBox,
    pseudo: &Mask,
    alpha: f64,
    source: GateSource,
) -> Result<(Var, GateState)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::domain("isl_loss", format!("alpha {alpha} outside [0, 1]")));
    }
    let g = gate(tape.value(o), b, pseudo, alpha, source)?;
    let raw = res_loss(tape, o, pseudo)?;
    Ok((gated(tape, raw, &g)?, g))
}
