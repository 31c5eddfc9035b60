use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weakmcn::featbank::{
    dvfe_combine, dvfe_weights, encode_dino, encode_sam, fpn_fuse, init_dvfe, init_fpn, Source, Task, DARK_CHANNELS,
    DINO_CHANNELS, SAM_CHANNELS,
};
use weakmcn::numcore::resize;
use weakmcn::params::ParamStore;
use weakmcn::synth::{Color, Image};
use weakmcn::{Tape, Tensor};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-scale..scale))
}

/// Per-pixel `W x + b` by loops.
fn linear_oracle(w: &Tensor, b: &Tensor, x: &Tensor) -> Tensor {
    let (cout, cin) = (w.shape()[0], w.shape()[1]);
    let (h, wd) = (x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(vec![cout, h, wd]);
    for o in 0..cout {
        for p in 0..h * wd {
            let mut s = b.data()[o];
            for i in 0..cin {
                s += w.data()[o * cin + i] * x.data()[i * h * wd + p];
            }
            out.data_mut()[o * h * wd + p] = s;
        }
    }
    out
}

fn weights_of(store: &ParamStore, base: &Tensor) -> Vec<f64> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |_| false);
    let b = tape.constant(base.clone());
    let w = dvfe_weights(&mut tape, &bound, Task::Rec, b).unwrap();
    tape.value(w).data().to_vec()
}

fn combine(store: &ParamStore, bank: &[(Source, Tensor)], w: &[f64], grid: (usize, usize)) -> Tensor {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |_| false);
    let vars: Vec<_> = bank.iter().map(|(s, t)| (*s, tape.constant(t.clone()))).collect();
    let wv = tape.constant(Tensor::vector(w.to_vec()));
    let f = dvfe_combine(&mut tape, &bound, Task::Rec, &vars, wv, grid, None).unwrap();
    tape.value(f).clone()
}

fn store_with(bank: &[(Source, usize)], d: usize, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    init_dvfe(&mut store, &mut ChaCha8Rng::seed_from_u64(seed), Task::Rec, bank, d);
    store
}

#[test]
fn weights_form_a_strictly_positive_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..500 {
        let (d, nb) = (rng.gen_range(1..10), rng.gen_range(1..4));
        let bank: Vec<_> = Source::ALL[..nb].iter().map(|&s| (s, 2)).collect();
        let mut store = store_with(&bank, d, 0);
        store.insert("dvfe.rec.w", rand_tensor(&mut rng, &[d, nb], 3.0));
        let shape = [d, rng.gen_range(1..6), rng.gen_range(1..6)];
        let base = rand_tensor(&mut rng, &shape, 2.0);
        let w = weights_of(&store, &base);
        assert_eq!(w.len(), nb);
        assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        assert!(w.iter().all(|&v| v > 0.0));
    }
}

#[test]
fn weights_match_softmax_of_logits() {
    let bank = [(Source::Dark, 2), (Source::Dino, 2), (Source::Sam, 2)];
    let mut store = store_with(&bank, 2, 0);
    // GAP of the base is (1, 0), so the logits are the first row of W
    store.insert("dvfe.rec.w", Tensor::new(vec![2, 3], vec![10.0, 0.0, 0.0, 5.0, -5.0, 7.0]).unwrap());
    let base = Tensor::from_fn(vec![2, 3, 3], |k| if k < 9 { 1.0 } else { 0.0 });
    let w = weights_of(&store, &base);
    let z = 10f64.exp() + 2.0;
    let expect = [10f64.exp() / z, 1.0 / z, 1.0 / z];
    for (a, b) in w.iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((w[0] - 0.99991).abs() < 1e-5 && (w[1] - 4.54e-5).abs() < 1e-7);
    // zero projection gives the uniform ensemble
    let fresh = store_with(&bank, 2, 0);
    assert!(weights_of(&fresh, &base).iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn combine_matches_direct_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let bank_spec = [(Source::Dark, 3), (Source::Dino, 5), (Source::Sam, 4)];
    let store = store_with(&bank_spec, 6, 9);
    for _ in 0..50 {
        let grid = (rng.gen_range(1..5), rng.gen_range(1..5));
        let bank: Vec<_> = bank_spec
            .iter()
            .map(|&(s, c)| {
                let shape = [c, rng.gen_range(1..9), rng.gen_range(1..9)];
                (s, rand_tensor(&mut rng, &shape, 1.0))
            })
            .collect();
        let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let w: Vec<f64> = raw.iter().map(|v| v / raw.iter().sum::<f64>()).collect();
        let got = combine(&store, &bank, &w, grid);
        let mut expect = Tensor::zeros(vec![6, grid.0, grid.1]);
        for ((src, v), wi) in bank.iter().zip(&w) {
            let p = format!("dvfe.rec.{}", src.tag());
            let r = resize(v, grid.0, grid.1).unwrap();
            let a = linear_oracle(store.get(&format!("{p}.w")).unwrap(), store.get(&format!("{p}.b")).unwrap(), &r);
            for (e, x) in expect.data_mut().iter_mut().zip(a.data()) {
                *e += wi * x;
            }
        }
        assert!(got.max_abs_diff(&expect) < 1e-12);
    }
}

#[test]
fn uniform_two_entry_ensemble_is_the_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let store = store_with(&[(Source::Dark, 4), (Source::Sam, 4)], 5, 4);
    let a = rand_tensor(&mut rng, &[4, 3, 3], 1.0);
    let b = rand_tensor(&mut rng, &[4, 3, 3], 1.0);
    let got = combine(&store, &[(Source::Dark, a.clone()), (Source::Sam, b.clone())], &[0.5, 0.5], (3, 3));
    let ad = |src: &str, x: &Tensor| {
        linear_oracle(
            store.get(&format!("dvfe.rec.{src}.w")).unwrap(),
            store.get(&format!("dvfe.rec.{src}.b")).unwrap(),
            x,
        )
    };
    let (ta, tb) = (ad("dark", &a), ad("sam", &b));
    let expect = Tensor::from_fn(vec![5, 3, 3], |k| 0.5 * (ta.data()[k] + tb.data()[k]));
    assert!(got.max_abs_diff(&expect) < 1e-12);
}

#[test]
fn saturated_weight_selects_one_entry() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let bank_spec = [(Source::Dark, 3), (Source::Dino, 3), (Source::Sam, 3)];
    let mut store = store_with(&bank_spec, 4, 5);
    store.insert("dvfe.rec.w", Tensor::from_fn(vec![4, 3], |k| if k == 0 { 30.0 } else { 0.0 }));
    let base = Tensor::from_fn(vec![4, 2, 2], |k| if k < 4 { 1.0 } else { 0.0 });
    let w = weights_of(&store, &base);
    let bank: Vec<_> = bank_spec.iter().map(|&(s, c)| (s, rand_tensor(&mut rng, &[c, 2, 2], 1.0))).collect();
    let got = combine(&store, &bank, &w, (2, 2));
    let only = combine(&store, &bank[..1], &[1.0], (2, 2));
    assert!(got.max_abs_diff(&only) <= 1e-6);
}

#[test]
fn identical_entries_make_weights_irrelevant() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = store_with(&[(Source::Dark, 3), (Source::Dino, 3), (Source::Sam, 3)], 4, 7);
    let (w, b) = (store.get("dvfe.rec.dark.w").unwrap().clone(), store.get("dvfe.rec.dark.b").unwrap().clone());
    let b = rand_tensor(&mut rng, b.shape(), 1.0);
    for s in ["dark", "dino", "sam"] {
        store.insert(format!("dvfe.rec.{s}.w"), w.clone());
        store.insert(format!("dvfe.rec.{s}.b"), b.clone());
    }
    let v = rand_tensor(&mut rng, &[3, 4, 4], 1.0);
    let bank: Vec<_> = Source::ALL.iter().map(|&s| (s, v.clone())).collect();
    let reference = combine(&store, &bank, &[1.0, 0.0, 0.0], (4, 4));
    for _ in 0..100 {
        let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.01..1.0)).collect();
        let w: Vec<f64> = raw.iter().map(|v| v / raw.iter().sum::<f64>()).collect();
        assert!(combine(&store, &bank, &w, (4, 4)).max_abs_diff(&reference) <= 1e-9);
    }
}

#[test]
fn resize_commutes_with_channel_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let (cin, cout) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let w = rand_tensor(&mut rng, &[cout, cin], 1.0);
        let b = rand_tensor(&mut rng, &[cout], 1.0);
        let shape = [cin, rng.gen_range(1..12), rng.gen_range(1..12)];
        let x = rand_tensor(&mut rng, &shape, 1.0);
        let (oh, ow) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let a = resize(&linear_oracle(&w, &b, &x), oh, ow).unwrap();
        let c = linear_oracle(&w, &b, &resize(&x, oh, ow).unwrap());
        assert!(a.max_abs_diff(&c) < 1e-12);
    }
}

#[test]
fn mismatched_bank_is_rejected() {
    let store = store_with(&[(Source::Dark, 2), (Source::Sam, 2)], 3, 0);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |_| false);
    let v = tape.constant(Tensor::zeros(vec![2, 2, 2]));
    let w = tape.constant(Tensor::vector(vec![1.0 / 3.0; 3]));
    assert!(dvfe_combine(&mut tape, &bound, Task::Rec, &[(Source::Dark, v), (Source::Sam, v)], w, (2, 2), None).is_err());
    let base = tape.constant(Tensor::zeros(vec![5, 2, 2]));
    assert!(dvfe_weights(&mut tape, &bound, Task::Rec, base).is_err());
}

#[test]
fn dino_red_bin_counts_rectangle_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let red = Color::Red.index();
    for _ in 0..50 {
        let (h, w) = (rng.gen_range(8..40), rng.gen_range(8..40));
        let (r0, c0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (r1, c1) = (rng.gen_range(r0 + 1..=h), rng.gen_range(c0 + 1..=w));
        let mut img = Image::filled(h, w, [0.0; 3]);
        for i in r0..r1 {
            for j in c0..c1 {
                img.set_pixel(i, j, Color::Red.rgb());
            }
        }
        let f = encode_dino(&img);
        let (gh, gw) = (h.div_ceil(8), w.div_ceil(8));
        assert_eq!(f.shape(), &[DINO_CHANNELS, gh, gw]);
        for pi in 0..gh {
            for pj in 0..gw {
                let rows = pi * 8..((pi + 1) * 8).min(h);
                let cols = pj * 8..((pj + 1) * 8).min(w);
                let n = (rows.len() * cols.len()) as f64;
                let inside = rows.filter(|i| (r0..r1).contains(i)).count() * cols.filter(|j| (c0..c1).contains(j)).count();
                let frac = inside as f64 / n;
                assert!((f.get(&[red, pi, pj]) - frac).abs() < 1e-12);
                assert!((f.get(&[8, pi, pj]) - frac).abs() < 1e-12);
                for c in (0..8).filter(|&c| c != red) {
                    assert_eq!(f.get(&[c, pi, pj]), 0.0);
                }
            }
        }
    }
}

#[test]
fn sam_gradients_vanish_on_uniform_images() {
    for rgb in [[0.0, 0.0, 0.0], [0.3, 0.7, 0.1], [1.0, 1.0, 1.0]] {
        let img = Image::filled(20, 28, rgb);
        let f = encode_sam(&img);
        assert_eq!(f.shape(), &[SAM_CHANNELS, 5, 7]);
        assert!(f.data()[..5 * 35].iter().all(|&v| v == 0.0));
        assert_eq!(f, encode_sam(&img.clone()));
    }
}

#[test]
fn fpn_widths_and_zero_response() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    init_fpn(&mut store, &mut rng, 7);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, |_| false);
    let sizes = [(8, 10), (4, 5), (2, 3)];
    let lv: Vec<_> = DARK_CHANNELS
        .iter()
        .zip(sizes)
        .map(|(&c, (h, w))| tape.constant(Tensor::zeros(vec![c, h, w])))
        .collect();
    let out = fpn_fuse(&mut tape, &bound, [lv[0], lv[1], lv[2]]).unwrap();
    for (v, (h, w)) in out.iter().zip(sizes) {
        assert_eq!(tape.shape(*v), &[7, h, w]);
        assert!(tape.value(*v).data().iter().all(|&x| x == 0.0));
    }
}
