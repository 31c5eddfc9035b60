use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weakmcn::ccm;
use weakmcn::params::ParamStore;
use weakmcn::synth::{generate, Dataset, DatasetConfig};
use weakmcn::wres::{self, aspp_decode, dilate, erode, init_decoder, oracle_mask, NoiseMode, OracleConfig};
use weakmcn::{BBox, Mask, Tape, Tensor};

fn dataset(count: usize) -> Dataset {
    generate(&DatasetConfig {
        count,
        seed: 11,
        ..Default::default()
    })
    .unwrap()
}

fn only(mode: NoiseMode) -> OracleConfig {
    let mut c = OracleConfig {
        p_clean: 0.0,
        ..OracleConfig::default()
    };
    match mode {
        NoiseMode::Clean => c.p_clean = 1.0,
        NoiseMode::Dilate => c.p_dilate = 1.0,
        NoiseMode::Erode => c.p_erode = 1.0,
        NoiseMode::Distractor => c.p_distractor = 1.0,
    }
    c
}

/// Chebyshev-ball morphology by brute force.
fn morph_oracle(m: &Mask, r: usize, grow: bool) -> Mask {
    let (h, w) = (m.height() as i64, m.width() as i64);
    let r = r as i64;
    Mask::from_fn(m.height(), m.width(), |i, j| {
        let mut any = false;
        let mut all = true;
        for a in i as i64 - r..=i as i64 + r {
            for b in j as i64 - r..=j as i64 + r {
                let v = a >= 0 && b >= 0 && a < h && b < w && m.get(a as usize, b as usize);
                any |= v;
                all &= v;
            }
        }
        if grow {
            any
        } else {
            all
        }
    })
}

#[test]
fn morphology_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let (h, w) = (rng.gen_range(4..24), rng.gen_range(4..24));
        let p = rng.gen_range(0.2..0.9);
        let m = Mask::from_fn(h, w, |_, _| rng.gen_bool(p));
        for r in [1, 2] {
            assert_eq!(dilate(&m, r), morph_oracle(&m, r, true));
            assert_eq!(erode(&m, r), morph_oracle(&m, r, false));
        }
    }
}

#[test]
fn clean_oracle_with_exact_prompts_returns_ground_truth() {
    let ds = dataset(300);
    let cfg = only(NoiseMode::Clean);
    for p in ds.pairs() {
        for (k, o) in p.scene.objects.iter().enumerate() {
            let pm = oracle_mask(&p.scene, &o.gt_box, &cfg);
            assert_eq!(pm.object, Some(k));
            assert_eq!(ccm::iou(&pm.mask, &o.gt_mask).unwrap(), 1.0);
        }
    }
}

#[test]
fn noise_modes_respect_set_inclusions() {
    let ds = dataset(200);
    for r in [1, 2] {
        for p in ds.pairs() {
            let o = &p.scene.objects[p.expression.target_index];
            let (h, w) = (p.scene.image.height, p.scene.image.width);
            let dil = oracle_mask(&p.scene, &o.gt_box, &OracleConfig { radius: r, ..only(NoiseMode::Dilate) });
            assert!(o.gt_mask.is_subset_of(&dil.mask));
            let ero = oracle_mask(&p.scene, &o.gt_box, &OracleConfig { radius: r, ..only(NoiseMode::Erode) });
            assert!(ero.mask.is_subset_of(&o.gt_mask));
            let dis = oracle_mask(&p.scene, &o.gt_box, &OracleConfig { radius: r, ..only(NoiseMode::Distractor) });
            assert!(o.gt_mask.is_subset_of(&dis.mask));
            // whatever was added lies inside the dilated prompt and on another object
            let region = dilate(&ccm::rasterize(&o.gt_box, h, w), r);
            for i in 0..h {
                for j in 0..w {
                    if dis.mask.get(i, j) && !o.gt_mask.get(i, j) {
                        assert!(region.get(i, j));
                        assert!(p.scene.objects.iter().any(|q| q.gt_mask.get(i, j)));
                    }
                }
            }
        }
    }
}

#[test]
fn oracle_is_deterministic_and_mixes_modes() {
    let ds = dataset(400);
    let cfg = OracleConfig::noisy();
    let mut clean = 0;
    for p in ds.pairs() {
        let b = p.scene.objects[p.expression.target_index].gt_box;
        let a = oracle_mask(&p.scene, &b, &cfg);
        assert_eq!(a, oracle_mask(&p.scene, &b, &cfg));
        clean += (a.mode == NoiseMode::Clean) as usize;
    }
    let frac = clean as f64 / 400.0;
    assert!((0.4..0.6).contains(&frac), "{frac}");
    let other = OracleConfig { seed: 99, ..cfg.clone() };
    let differs = ds.pairs().any(|p| {
        let b = p.scene.objects[0].gt_box;
        oracle_mask(&p.scene, &b, &cfg).mode != oracle_mask(&p.scene, &b, &other).mode
    });
    assert!(differs);
}

#[test]
fn prompt_away_from_objects_gives_empty_mask() {
    let ds = dataset(50);
    let mut tried = 0;
    for p in ds.pairs() {
        let free = (0..64).flat_map(|y| (0..64).map(move |x| (x, y))).find(|&(x, y)| {
            let b = BBox::new(x as f64, y as f64, 1.0, 1.0);
            p.scene.objects.iter().all(|o| o.gt_box.iou(&b) == 0.0)
        });
        if let Some((x, y)) = free {
            let pm = oracle_mask(&p.scene, &BBox::new(x as f64, y as f64, 1.0, 1.0), &OracleConfig::noisy());
            assert!(pm.mask.is_empty());
            assert_eq!(pm.object, None);
            tried += 1;
        }
    }
    assert!(tried > 10);
}

fn bce(o: &Tensor, m: &Mask) -> f64 {
    let mut tape = Tape::new();
    let v = tape.constant(o.clone());
    let l = wres::res_loss(&mut tape, v, m).unwrap();
    tape.value(l).item()
}

#[test]
fn bce_examples() {
    let m = Mask::from_fn(6, 5, |i, j| (i * j) % 2 == 0);
    assert!((bce(&Tensor::full(vec![6, 5], 0.5), &m) - std::f64::consts::LN_2).abs() < 1e-12);
    let one = Mask::from_vec(1, 1, vec![true]);
    assert!((bce(&Tensor::full(vec![1, 1], 0.25), &one) - 1.3862943611198906).abs() < 1e-12);
    let exact = ccm::mask_to_tensor(&m);
    let v = bce(&exact, &m);
    assert!(v > 0.0 && v < 2e-7, "{v}");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let o = Tensor::from_fn(vec![6, 5], |_| rng.gen_range(0.0..=1.0));
        assert!(bce(&o, &m) >= 0.0);
    }
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::full(vec![5, 6], 0.5));
    assert!(wres::res_loss(&mut tape, v, &m).is_err());
}

#[test]
fn decoder_shape_and_zero_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    init_decoder(&mut store, &mut rng, 16, 8, 4);
    let f = Tensor::from_fn(vec![16, 8, 8], |_| rng.gen_range(-1.0..1.0));
    let ft = Tensor::from_fn(vec![8], |_| rng.gen_range(-1.0..1.0));
    let run = |store: &ParamStore| {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |_| false);
        let fv = tape.constant(f.clone());
        let tv = tape.constant(ft.clone());
        let o = aspp_decode(&mut tape, &bound, fv, tv, 64, 64).unwrap();
        tape.value(o).clone()
    };
    let o = run(&store);
    assert_eq!(o.shape(), &[64, 64]);
    assert!(o.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    let names: Vec<String> = store.names().map(String::from).collect();
    for n in names {
        store.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    assert!(run(&store).data().iter().all(|&v| v == 0.5));
}

#[test]
fn pgm_export() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pgm");
    let m = Mask::from_fn(2, 3, |i, j| i == j);
    wres::write_mask_pgm(&m, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
    assert_eq!(&bytes[bytes.len() - 6..], &[255, 0, 0, 0, 255, 0]);
}
