//! Segmentation branch: pseudo-mask oracle, dilated-conv mask decoder,
//! per-pixel BCE and PGM export.

mod decoder;
mod oracle;

pub use decoder::{aspp_decode, init_decoder, ASPP_DILATIONS};
pub use oracle::{dilate, erode, oracle_mask, NoiseMode, OracleConfig, PseudoMask};

use std::io::Write;
use std::path::Path;

use crate::ccm::mask_to_tensor;
use crate::geom::Mask;
use crate::numcore::{Tape, Tensor, Var};
use crate::{Error, Result};

pub const PROB_CLAMP: f64 = 1e-7;

/// Pixel-mean binary cross-entropy of probabilities `o: [h, w]` against `m`.
pub fn res_loss(tape: &mut Tape, o: Var, m: &Mask) -> Result<Var> {
    let s = tape.shape(o).to_vec();
    if s != [m.height(), m.width()] {
        return Err(Error::shape("res_loss", &s, &[m.height(), m.width()]));
    }
    let target = mask_to_tensor(m);
    let inv_target = target.map(|v| 1.0 - v);
    let p = tape.clamp(o, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let log_p = tape.log(p)?;
    let neg = tape.neg(p)?;
    let q = tape.add_scalar(neg, 1.0)?;
    let log_q = tape.log(q)?;
    let t = tape.constant(target);
    let u = tape.constant(inv_target);
    let a = tape.mul(t, log_p)?;
    let b = tape.mul(u, log_q)?;
    let ll = tape.add(a, b)?;
    let mean = tape.mean_all(ll)?;
    tape.neg(mean)
}

/// Binary 8-bit PGM (P5) of a `[h, w]` map with values in [0, 1].
pub fn write_pgm(probs: &Tensor, path: &Path) -> Result<()> {
    let s = probs.shape();
    if s.len() != 2 {
        return Err(Error::shape("write_pgm", s, &[0, 0]));
    }
    let mut out = Vec::with_capacity(s[0] * s[1] + 20);
    write!(out, "P5\n{} {}\n255\n", s[1], s[0])?;
    out.extend(probs.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_mask_pgm(m: &Mask, path: &Path) -> Result<()> {
    write_pgm(&mask_to_tensor(m), path)
}
