//! Dense tensors, a recording tape with reverse-mode gradients, and a
//! finite-difference gradient checker.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, gradcheck_coords, relative_error, GradcheckReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;


use crate::{Error, Result};

/// Resize of a `[c,h,w]` tensor outside any tape, same kernel as [`Tape::resize`].
pub fn resize(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 3 || out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize", s, &[out_h, out_w]));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (out_h, out_w) {
        return Ok(t.clone());
    }
    let rows = kernels::resize_matrix(h, out_h);
    let cols = kernels::resize_matrix(w, out_w);
    Tensor::new(
        vec![c, out_h, out_w],
        kernels::resize_forward(t.data(), c, (h, w), (out_h, out_w), &rows, &cols),
    )
}

/// Numerically stable logistic function.
pub fn sigmoid(v: f64) -> f64 {
    kernels::sigmoid(v)
}
