use rand_chacha::ChaCha8Rng;

use super::DARK_CHANNELS;
use crate::numcore::{Tape, Var};
use crate::params::{init_linear, linear_map, Bound, ParamStore};
use crate::Result;

/// 1×1 lateral projections `fpn.lat{1,2,3}` to `d` channels, zero bias.
pub fn init_fpn(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize) {
    for (i, &c) in DARK_CHANNELS.iter().enumerate() {
        init_linear(store, rng, &format!("fpn.lat{}", i + 1), c, d);
    }
}

/// Top-down fusion: project every level to `d` channels, then add each
/// coarser result, bilinearly upsampled, into the next finer level.
pub fn fpn_fuse(tape: &mut Tape, bound: &Bound, levels: [Var; 3]) -> Result<[Var; 3]> {
    let p3 = linear_map(tape, bound, "fpn.lat3", levels[2])?;
    let mut out = [p3; 3];
    for i in (0..2).rev() {
        let lat = linear_map(tape, bound, &format!("fpn.lat{}", i + 1), levels[i])?;
        let s = tape.shape(lat).to_vec();
        let up = tape.resize(out[i + 1], s[1], s[2])?;
        out[i] = tape.add(lat, up)?;
    }
    Ok(out)
}
