use rand_chacha::ChaCha8Rng;

use crate::numcore::{Tape, Var};
use crate::params::{init_conv, init_linear, linear_map, Bound, ParamStore};
use crate::{Error, Result};

pub const ASPP_DILATIONS: [usize; 3] = [1, 2, 4];

/// Decoder parameters: text gate `res.text` (`d_t → D`), one 3×3 branch
/// `res.aspp{d}` per dilation (`D → width`), and the 1×1 mix `res.mix`.
pub fn init_decoder(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize, d_t: usize, width: usize) {
    init_linear(store, rng, "res.text", d_t, d);
    for dil in ASPP_DILATIONS {
        init_conv(store, rng, &format!("res.aspp{dil}"), d, width, 3);
    }
    init_linear(store, rng, "res.mix", width * ASPP_DILATIONS.len(), 1);
}

/// Mask probabilities `[out_h, out_w]` from the segmentation feature map
/// `f: [D, h, w]` and text embedding `f_t: [d_t]`.
pub fn aspp_decode(
    tape: &mut Tape,
    bound: &Bound,
    f: Var,
    f_t: Var,
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    let fs = tape.shape(f).to_vec();
    if fs.len() != 3 {
        return Err(Error::shape("aspp_decode", &fs, &[0, 0, 0]));
    }
    let d_t = tape.value(f_t).numel();
    let t = tape.reshape(f_t, &[1, d_t])?;
    let w = bound.get("res.text.w")?;
    let b = bound.get("res.text.b")?;
    let wt = tape.transpose(w)?;
    let g = tape.matmul(t, wt)?;
    let g = tape.add(g, b)?;
    let g = tape.reshape(g, &[fs[0], 1, 1])?;
    let fused = tape.mul(f, g)?;

    let mut branches = Vec::with_capacity(ASPP_DILATIONS.len());
    for dil in ASPP_DILATIONS {
        let w = bound.get(&format!("res.aspp{dil}.w"))?;
        let b = bound.get(&format!("res.aspp{dil}.b"))?;
        let y = tape.conv2d(fused, w, Some(b), 1, dil)?;
        branches.push(tape.silu(y)?);
    }
    let cat = tape.concat(&branches, 0)?;
    let logits = linear_map(tape, bound, "res.mix", cat)?;
    let up = tape.resize(logits, out_h, out_w)?;
    let up = tape.reshape(up, &[out_h, out_w])?;
    tape.sigmoid(up)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;
    use crate::seed;

    #[test]
    fn zero_parameters_give_half_everywhere() {
        let mut store = ParamStore::new();
        init_decoder(&mut store, &mut seed::rng(0), 4, 3, 2);
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for n in names {
            let t = store.get_mut(&n).unwrap();
            *t = Tensor::zeros(t.shape().to_vec());
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |_| true);
        let f = tape.constant(Tensor::full(vec![4, 8, 8], 1.0));
        let ft = tape.constant(Tensor::vector(vec![1.0, -1.0, 2.0]));
        let o = aspp_decode(&mut tape, &bound, f, ft, 64, 64).unwrap();
        assert_eq!(tape.shape(o), &[64, 64]);
        assert!(tape.value(o).data().iter().all(|&v| v == 0.5));
    }
}
