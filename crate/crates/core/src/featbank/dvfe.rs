use rand_chacha::ChaCha8Rng;

use super::{Source, Task};
use crate::numcore::{Tape, Tensor, Var};
use crate::params::{init_linear, linear_map, Bound, ParamStore};
use crate::{Error, Result};

/// Per task: the `[d, N_b]` projection `dvfe.{task}.w` (zero, so weights
/// start uniform) and one adapter `dvfe.{task}.{source}` per bank entry.
pub fn init_dvfe(store: &mut ParamStore, rng: &mut ChaCha8Rng, task: Task, bank: &[(Source, usize)], d: usize) {
    let t = task.tag();
    store.insert(format!("dvfe.{t}.w"), Tensor::zeros(vec![d, bank.len()]));
    for &(src, channels) in bank {
        init_linear(store, rng, &format!("dvfe.{t}.{}", src.tag()), channels, d);
    }
}

/// `softmax(GAP(base) · W_t)` for a base map `[d, h, w]`; length `N_b`.
pub fn dvfe_weights(tape: &mut Tape, bound: &Bound, task: Task, base: Var) -> Result<Var> {
    let s = tape.shape(base).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("dvfe_weights", &s, &[0, 0, 0]));
    }
    let w = bound.get(&format!("dvfe.{}.w", task.tag()))?;
    let ws = tape.shape(w).to_vec();
    if ws[0] != s[0] {
        return Err(Error::Config(format!(
            "{} projection expects {} channels, base feature has {}",
            task.tag(),
            ws[0],
            s[0]
        )));
    }
    let flat = tape.reshape(base, &[s[0], s[1] * s[2]])?;
    let gap = tape.mean(flat, 1)?;
    let gap = tape.reshape(gap, &[1, s[0]])?;
    let logits = tape.matmul(gap, w)?;
    let sm = tape.softmax(logits, 1)?;
    tape.reshape(sm, &[ws[1]])
}

/// `Σ_i w[i] · T_i(V_i)` on the `grid`, where `T_i` is the source's linear
/// channel adapter and a bilinear resize. The two commute, so the resize runs
/// first on the (usually narrower) source. With `residual`, that map is
/// added to the sum.
pub fn dvfe_combine(
    tape: &mut Tape,
    bound: &Bound,
    task: Task,
    bank: &[(Source, Var)],
    weights: Var,
    grid: (usize, usize),
    residual: Option<Var>,
) -> Result<Var> {
    let n = tape.value(weights).numel();
    if n != bank.len() || bank.is_empty() {
        return Err(Error::Config(format!(
            "{} ensemble has {} weights for {} bank entries",
            task.tag(),
            n,
            bank.len()
        )));
    }
    let mut acc: Option<Var> = residual;
    for (i, &(src, v)) in bank.iter().enumerate() {
        let s = tape.shape(v).to_vec();
        let v = if (s[1], s[2]) == grid { v } else { tape.resize(v, grid.0, grid.1)? };
        let adapted = linear_map(tape, bound, &format!("dvfe.{}.{}", task.tag(), src.tag()), v)?;
        let wi = tape.index_select(weights, 0, &[i])?;
        let wi = tape.reshape(wi, &[1, 1, 1])?;
        let term = tape.mul(adapted, wi)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("bank is nonempty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn zero_projection_gives_uniform_weights() {
        let mut store = ParamStore::new();
        let bank = [(Source::Dark, 4), (Source::Dino, 3), (Source::Sam, 2)];
        init_dvfe(&mut store, &mut seed::rng(0), Task::Rec, &bank, 4);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |_| true);
        let base = tape.constant(Tensor::from_fn(vec![4, 2, 2], |k| k as f64));
        let w = dvfe_weights(&mut tape, &bound, Task::Rec, base).unwrap();
        for &v in tape.value(w).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn weight_count_mismatch_is_a_config_error() {
        let mut store = ParamStore::new();
        init_dvfe(&mut store, &mut seed::rng(0), Task::Res, &[(Source::Dino, 3)], 4);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |_| true);
        let v = tape.constant(Tensor::zeros(vec![3, 8, 8]));
        let w = tape.constant(Tensor::vector(vec![0.5, 0.5]));
        let err = dvfe_combine(&mut tape, &bound, Task::Res, &[(Source::Dino, v)], w, (8, 8), None);
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
