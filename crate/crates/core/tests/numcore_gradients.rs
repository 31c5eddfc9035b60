//! Chain-rule checks: every differentiable op against central differences
//! over 100 random 64-bit inputs, h = 1e-5, tolerance 1e-4.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weakmcn::numcore::gradcheck;
use weakmcn::{Result, Tape, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: usize = 100;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from `kink` by at least `gap`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], kink: f64, gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..2.0);
            if rng.gen_bool(0.5) {
                kink + m
            } else {
                kink - m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Contracts an op output with a fixed random weighting so every output
/// coordinate matters.
fn weighted(t: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let wv = t.constant(w.clone());
    let p = t.mul(y, wv)?;
    t.sum_all(p)
}

fn run<G, F>(name: &str, seed: u64, mut gen: G, op: F)
where
    G: FnMut(&mut ChaCha8Rng) -> Tensor,
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let x = gen(&mut rng);
        // output weights depend on the output shape, so evaluate once
        let mut probe = Tape::new();
        let pv = probe.constant(x.clone());
        let out = op(&mut probe, pv).unwrap();
        let wshape = probe.shape(out).to_vec();
        let w = rand_tensor(&mut rng, &wshape, -1.0, 1.0);
        let f = |t: &mut Tape, x: Var| {
            let y = op(t, x)?;
            weighted(t, y, &w)
        };
        let rep = gradcheck(name, f, &x, H, TOL).unwrap();
        assert!(rep.passed(), "{name} instance {i}: {}", rep.to_json());
        worst = worst.max(rep.max_rel_err);
    }
    assert!(worst < TOL);
}

#[test]
fn elementwise_binary_ops() {
    run("add", 1, |r| rand_tensor(r, &[3, 4], -2.0, 2.0), |t, x| {
        let c = t.constant(Tensor::vector(vec![0.5, -1.0, 2.0, 0.1]));
        t.add(x, c)
    });
    run("sub", 2, |r| rand_tensor(r, &[3, 4], -2.0, 2.0), |t, x| {
        let c = t.constant(Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let a = t.sub(c, x)?;
        t.sub(a, x)
    });
    run("mul", 3, |r| rand_tensor(r, &[2, 3, 2], -2.0, 2.0), |t, x| {
        let sq = t.mul(x, x)?;
        t.mul(sq, x)
    });
    run("mul_broadcast", 4, |r| rand_tensor(r, &[3, 1, 1], -2.0, 2.0), |t, x| {
        let c = t.constant(Tensor::from_fn(vec![3, 2, 2], |k| (k as f64 * 0.3).sin()));
        t.mul(c, x)
    });
    run("div", 5, |r| rand_tensor(r, &[5], 0.5, 2.0), |t, x| {
        let c = t.constant(Tensor::vector(vec![1.0, -2.0, 0.3, 4.0, 1.5]));
        let a = t.div(c, x)?;
        t.div(a, x)
    });
    run("scale_shift", 6, |r| rand_tensor(r, &[4], -2.0, 2.0), |t, x| {
        let a = t.scale(x, -3.5)?;
        t.add_scalar(a, 0.7)
    });
}

#[test]
fn linear_algebra_ops() {
    run("matmul", 10, |r| rand_tensor(r, &[3, 4], -1.0, 1.0), |t, x| {
        let b = t.constant(Tensor::from_fn(vec![4, 2], |k| (k as f64 * 0.7).cos()));
        let xt = t.transpose(x)?;
        let y = t.matmul(x, b)?;
        let z = t.matmul(xt, y)?; // x appears twice
        t.reshape(z, &[8])
    });
    for (stride, dilation) in [(1, 1), (2, 1), (1, 2), (1, 4)] {
        run("conv2d_input", 11, |r| rand_tensor(r, &[2, 6, 6], -1.0, 1.0), move |t, x| {
            let w = t.constant(Tensor::from_fn(vec![3, 2, 3, 3], |k| ((k * 7 % 11) as f64 - 5.0) * 0.1));
            let b = t.constant(Tensor::vector(vec![0.1, -0.2, 0.3]));
            t.conv2d(x, w, Some(b), stride, dilation)
        });
        run("conv2d_weight", 12, |r| rand_tensor(r, &[3, 2, 3, 3], -1.0, 1.0), move |t, w| {
            let x = t.constant(Tensor::from_fn(vec![2, 6, 6], |k| ((k * 5 % 13) as f64 - 6.0) * 0.1));
            t.conv2d(x, w, None, stride, dilation)
        });
    }
    run("conv2d_bias", 13, |r| rand_tensor(r, &[3], -1.0, 1.0), |t, b| {
        let x = t.constant(Tensor::from_fn(vec![2, 4, 4], |k| (k as f64).sin()));
        let w = t.constant(Tensor::from_fn(vec![3, 2, 1, 1], |k| k as f64 - 2.0));
        t.conv2d(x, w, Some(b), 1, 1)
    });
}

#[test]
fn nonlinearities() {
    run("relu", 20, |r| away_from(r, &[10], 0.0, 0.01), |t, x| t.relu(x));
    run("sigmoid", 21, |r| rand_tensor(r, &[10], -6.0, 6.0), |t, x| t.sigmoid(x));
    run("silu", 22, |r| rand_tensor(r, &[10], -4.0, 4.0), |t, x| t.silu(x));
    run("exp", 23, |r| rand_tensor(r, &[10], -3.0, 3.0), |t, x| t.exp(x));
    run("log", 24, |r| rand_tensor(r, &[10], 0.05, 5.0), |t, x| t.log(x));
    run("sqrt", 25, |r| rand_tensor(r, &[10], 0.05, 5.0), |t, x| t.sqrt(x));
    run("clamp", 26, |r| away_from(r, &[10], 0.5, 0.01), |t, x| t.clamp(x, -0.2, 0.5));
    run("smooth_l1", 27, |r| away_from(r, &[10], 1.0, 0.01), |t, x| {
        let n = t.neg(x)?;
        let a = t.smooth_l1(x)?;
        let b = t.smooth_l1(n)?;
        t.add(a, b)
    });
}

#[test]
fn reductions() {
    run("softmax", 30, |r| rand_tensor(r, &[3, 4], -3.0, 3.0), |t, x| t.softmax(x, 1));
    run("softmax_axis0", 31, |r| rand_tensor(r, &[3, 4], -3.0, 3.0), |t, x| t.softmax(x, 0));
    run("logsumexp", 32, |r| rand_tensor(r, &[3, 4], -3.0, 3.0), |t, x| t.logsumexp(x, 1));
    run("sum", 33, |r| rand_tensor(r, &[2, 3, 4], -1.0, 1.0), |t, x| t.sum(x, 1));
    run("mean", 34, |r| rand_tensor(r, &[2, 3, 4], -1.0, 1.0), |t, x| t.mean(x, 2));
    run("mean_all", 35, |r| rand_tensor(r, &[2, 3], -1.0, 1.0), |t, x| {
        let s = t.mul(x, x)?;
        t.mean_all(s)
    });
    // distinct values spaced well beyond h so the argmax is stable
    run(
        "max",
        36,
        |r| {
            let mut v: Vec<f64> = (0..12).map(|k| k as f64 * 0.1).collect();
            for i in (1..v.len()).rev() {
                let j = r.gen_range(0..=i);
                v.swap(i, j);
            }
            Tensor::new(vec![3, 4], v).unwrap()
        },
        |t, x| t.max(x, 0),
    );
}

#[test]
fn shape_ops() {
    run("broadcast_to", 40, |r| rand_tensor(r, &[3, 1], -1.0, 1.0), |t, x| t.broadcast_to(x, &[2, 3, 4]));
    run("concat", 41, |r| rand_tensor(r, &[2, 3], -1.0, 1.0), |t, x| {
        let sq = t.mul(x, x)?;
        t.concat(&[x, sq, x], 1)
    });
    run("resize_up", 42, |r| rand_tensor(r, &[2, 3, 4], -1.0, 1.0), |t, x| t.resize(x, 8, 7));
    run("resize_down", 43, |r| rand_tensor(r, &[2, 8, 8], -1.0, 1.0), |t, x| t.resize(x, 2, 3));
    run("index_select", 44, |r| rand_tensor(r, &[3, 5], -1.0, 1.0), |t, x| t.index_select(x, 1, &[4, 0, 4]));
    run("reshape_transpose", 45, |r| rand_tensor(r, &[2, 6], -1.0, 1.0), |t, x| {
        let y = t.reshape(x, &[3, 4])?;
        t.transpose(y)
    });
}

#[test]
fn softmax_rows_sum_to_one_and_stay_open() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..200 {
        let x = rand_tensor(&mut rng, &[4, 6], -20.0, 20.0);
        let mut t = Tape::new();
        let v = t.constant(x);
        let s = t.softmax(v, 1).unwrap();
        for row in t.value(s).data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }
}

#[test]
fn max_backward_conserves_gradient_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        // coarse values so ties are common
        let x = Tensor::from_fn(vec![5, 6], |_| rng.gen_range(0..3) as f64);
        let w = rand_tensor(&mut rng, &[6], -2.0, 2.0);
        let mut t = Tape::new();
        let xv = t.param(x.clone());
        let m = t.max(xv, 0).unwrap();
        let l = weighted(&mut t, m, &w).unwrap();
        let g = t.backward(l).unwrap();
        let gx = g.get(xv).unwrap();
        for col in 0..6 {
            let colmax = (0..5).map(|r| x.get(&[r, col])).fold(f64::MIN, f64::max);
            let first = (0..5).find(|&r| x.get(&[r, col]) == colmax).unwrap();
            let mass: f64 = (0..5).map(|r| gx.get(&[r, col])).sum();
            assert_eq!(mass, w.data()[col]);
            for r in 0..5 {
                let expect = if r == first { w.data()[col] } else { 0.0 };
                assert_eq!(gx.get(&[r, col]), expect);
            }
        }
    }
}

#[test]
fn identical_inputs_give_bit_identical_gradients() {
    let build = || {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_fn(vec![2, 5, 5], |k| (k as f64 * 0.37).sin()));
        let w = t.param(Tensor::from_fn(vec![3, 2, 3, 3], |k| (k as f64 * 0.11).cos()));
        let y = t.conv2d(x, w, None, 1, 2).unwrap();
        let s = t.sigmoid(y).unwrap();
        let r = t.resize(s, 9, 9).unwrap();
        let l = t.mean_all(r).unwrap();
        let g = t.backward(l).unwrap();
        (t.value(l).item(), g.get(w).unwrap().clone(), g.get(x).unwrap().clone())
    };
    let (a, b) = (build(), build());
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}
