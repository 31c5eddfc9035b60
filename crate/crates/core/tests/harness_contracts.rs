use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weakmcn::ccm::GateState;
use weakmcn::harness::{
    evaluate, grid_cells, rec_hit, run_ablation, suite_model_config, train, Cell, Config, EvalReport, FeatureCache,
    Grid, Model, PairRecord, PseudoMasks, RunOutput,
};
use weakmcn::optim::{cosine_lr, Adam};
use weakmcn::params::ParamStore;
use weakmcn::synth::{generate, Dataset, DatasetConfig, Split};
use weakmcn::wrec::{init_detector, BoxPred};
use weakmcn::{BBox, Tape, Tensor};

struct Fixture {
    dataset: Dataset,
    cache: FeatureCache,
    detector: ParamStore,
}

fn fixture(count: usize) -> Fixture {
    let dataset = generate(&DatasetConfig {
        seed: 5,
        count,
        split: [0.5, 0.0, 0.5],
        ..Default::default()
    })
    .unwrap();
    let mut detector = ParamStore::new();
    init_detector(&mut detector, 3);
    let cache = FeatureCache::build(&dataset, &detector).unwrap();
    Fixture { dataset, cache, detector }
}

fn small(overrides: &[&str]) -> Config {
    suite_model_config().with_overrides(overrides).unwrap()
}

/// Loss bundle and gate states for the first `n` training pairs.
fn batch_loss(f: &Fixture, config: &Config, n: usize) -> (weakmcn::harness::LossBundle, Vec<bool>) {
    let model = Model::new(config, &f.detector).unwrap();
    let items: Vec<_> = f.dataset.train.iter().zip(&f.cache.train).take(n).collect();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let mut pseudo = PseudoMasks::new(config);
    let (_, bundle, steps) = model.total_loss(&mut tape, &bound, &items, &mut pseudo).unwrap();
    (bundle, steps.iter().map(|s| s.gate.open).collect())
}

#[test]
fn total_reduces_to_contrastive_term() {
    let f = fixture(16);
    for lambda in [1.0, 0.5, 3.0] {
        let c = small(&["lambda_inc=0", "lambda_scl=0", "lambda_res=0", &format!("lambda_atc={lambda}")]);
        let (b, _) = batch_loss(&f, &c, 6);
        assert_eq!(b.l_total, lambda * b.l_atc);
    }
}

#[test]
fn bundle_total_matches_recomputation() {
    let f = fixture(16);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let lam: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..60.0)).collect();
        let c = small(&[
            &format!("lambda_atc={}", lam[0]),
            &format!("lambda_inc={}", lam[1]),
            &format!("lambda_scl={}", lam[2]),
            &format!("lambda_res={}", lam[3]),
        ]);
        let (b, _) = batch_loss(&f, &c, rng.gen_range(2..8));
        assert!((b.l_total - b.recompute_total(&c)).abs() <= 1e-9);
    }
}

#[test]
fn gate_fraction_counts_open_gates() {
    let f = fixture(16);
    for alpha in [0.0, 0.05, 0.2, 0.5, 1.0] {
        for n in [2, 5, 8] {
            let c = small(&[&format!("alpha={alpha}"), "gate_source=pseudo_mask"]);
            let (b, open) = batch_loss(&f, &c, n);
            let k = open.iter().filter(|&&o| o).count();
            assert_eq!(b.gate_open_fraction, k as f64 / n as f64);
            if k == 0 {
                assert_eq!(b.l_inc, 0.0);
            }
        }
    }
    // an untrained decoder never matches its pseudo mask perfectly
    let (b, open) = batch_loss(&f, &small(&["alpha=1"]), 6);
    assert!(open.iter().all(|&o| !o));
    assert_eq!((b.l_inc, b.gate_open_fraction), (0.0, 0.0));
}

#[test]
fn single_pair_batch_is_rejected() {
    let f = fixture(8);
    let c = small(&[]);
    let model = Model::new(&c, &f.detector).unwrap();
    let items: Vec<_> = f.dataset.train.iter().zip(&f.cache.train).take(1).collect();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let err = model.total_loss(&mut tape, &bound, &items, &mut PseudoMasks::new(&c)).unwrap_err();
    assert!(err.to_string().contains("contrastive loss requires negatives"));
}

#[test]
fn evaluation_is_pure() {
    let f = fixture(24);
    let model = Model::new(&small(&[]), &f.detector).unwrap();
    let a = evaluate(&model, &f.dataset, &f.cache, Split::Test).unwrap();
    let b = evaluate(&model, &f.dataset, &f.cache, Split::Test).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a.rec_acc) && (0.0..=1.0).contains(&a.res_miou));
    let mean = a.records.iter().map(|r| r.mask_iou).sum::<f64>() / a.records.len() as f64;
    assert!((a.res_miou - mean).abs() <= 1e-9);
    assert!(evaluate(&model, &f.dataset, &f.cache, Split::Val).is_err());
}

#[test]
fn box_hits_need_iou_strictly_above_half() {
    let gt = BBox::new(0.0, 0.0, 4.0, 4.0);
    assert_eq!(rec_hit(&BBox::new(0.0, 0.0, 2.0, 4.0), &gt, 8, 8).unwrap(), (0.5, false));
    assert_eq!(rec_hit(&gt, &gt, 8, 8).unwrap(), (1.0, true));
    assert!(rec_hit(&BBox::new(0.0, 0.0, 3.0, 4.0), &gt, 8, 8).unwrap().1);
}

fn record(iou: f64, hit: bool) -> PairRecord {
    PairRecord {
        id: 0,
        pred: BoxPred {
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0),
            cell: 0,
            score: 0.0,
        },
        box_iou: if hit { 1.0 } else { 0.0 },
        hit,
        mask_iou: iou,
        gate: GateState::new(iou, 0.3),
    }
}

#[test]
fn report_aggregates_are_means() {
    let r = EvalReport::from_records(vec![record(0.2, true), record(0.8, false)]);
    assert!((r.res_miou - 0.5).abs() < 1e-15);
    assert_eq!(r.rec_acc, 0.5);
    let all = EvalReport::from_records((0..7).map(|_| record(1.0, true)).collect());
    assert_eq!((all.rec_acc, all.res_miou), (1.0, 1.0));
}

#[test]
fn zero_gradients_leave_parameters_unchanged() {
    let f = fixture(8);
    let model = Model::new(&small(&[]), &f.detector).unwrap();
    let mut params = model.params.clone();
    let grads: BTreeMap<String, Tensor> = params
        .names()
        .map(|n| (n.to_string(), Tensor::zeros(params.get(n).unwrap().shape().to_vec())))
        .collect();
    let mut adam = Adam::default();
    for t in 0..5 {
        adam.step(&mut params, &grads, cosine_lr(1e-3, t, 10));
    }
    assert_eq!(params, model.params);
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(2e-3, 0, 40), 2e-3);
    assert!((cosine_lr(2e-3, 20, 40) - 1e-3).abs() < 1e-18);
    assert!(cosine_lr(2e-3, 40, 40).abs() < 1e-18);
}

#[test]
fn identical_runs_write_identical_results() {
    let f = fixture(24);
    let c = small(&["epochs=2", "batch_size=4", "oracle.p_clean=0.5", "oracle.p_distractor=0.5"]);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut outs = Vec::new();
    for d in &dirs {
        let out = RunOutput {
            dir: Some(d.path().to_path_buf()),
            ..Default::default()
        };
        outs.push(train(&c, &f.dataset, &f.cache, &f.detector, &out).unwrap());
    }
    assert_eq!(outs[0].log, outs[1].log);
    assert_eq!(outs[0].model, outs[1].model);
    for file in ["results.csv", "log.csv", "config.json", "dataset.json"] {
        let a = std::fs::read(dirs[0].path().join(file)).unwrap();
        let b = std::fs::read(dirs[1].path().join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
    let log = std::fs::read_to_string(dirs[0].path().join("log.csv")).unwrap();
    assert!(log.starts_with("epoch,l_atc,l_res_raw,l_scl,l_inc,gate_open_frac,l_total,rec_acc,res_miou,lr\n"));
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn single_cell_ablation_has_one_row() {
    let f = fixture(12);
    let base = small(&["epochs=1", "batch_size=4"]);
    let cells = vec![Cell::new("only", true, true, true, 0.3)];
    let table = run_ablation(&base, &cells, &[1], &f.dataset, &f.cache, &f.detector, |_| {});
    assert_eq!(table.runs.len(), 1);
    let csv = table.results_csv();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("cell_id,dvfe,scl,isl,alpha,seed,rec_acc,res_miou\n"));
    assert_eq!(table.summaries().len(), 1);
    let baseline = grid_cells(Grid::Components, &base)[0].apply(&base);
    assert!(!baseline.use_dvfe && !baseline.use_isl && baseline.lambda_scl == 0.0);
}

fn config_strategy() -> impl Strategy<Value = Config> {
    (
        (1usize..128, 1usize..128, 1usize..5),
        (0.001f64..10.0, 0.0f64..=1.0),
        prop::array::uniform4(0.0f64..100.0),
        (1e-6f64..1.0, 2usize..64, 0usize..40),
        (any::<bool>(), any::<bool>(), any::<bool>(), any::<bool>()),
        any::<u64>(),
    )
        .prop_map(|((d, d_t, k), (tau, alpha), lam, (lr, batch, epochs), flags, seed)| Config {
            d,
            d_t,
            top_k: k,
            tau,
            alpha,
            lambda_atc: lam[0],
            lambda_inc: lam[1],
            lambda_scl: lam[2],
            lambda_res: lam[3],
            lr,
            batch_size: batch,
            epochs,
            use_dvfe: flags.0,
            use_isl: flags.1,
            cosine_sim: flags.2,
            atc_literal: flags.3,
            seed,
            ..Config::default()
        })
}

proptest! {
    #[test]
    fn config_round_trip_is_byte_identical(c in config_strategy()) {
        let text = c.to_json();
        let back = Config::from_json(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_json(), text);
    }

    #[test]
    fn invalid_weights_are_rejected(v in -100.0f64..-1e-9) {
        for key in ["lambda_atc", "lambda_inc", "lambda_scl", "lambda_res"] {
            let bad = Config::default().with_overrides(&[format!("{key}={v}")]);
            prop_assert!(bad.is_err());
        }
        let tau = Config::default().with_overrides(&[format!("tau={v}")]);
        prop_assert!(tau.is_err());
        let alpha = Config::default().with_overrides(&[format!("alpha={}", 1.0 - v)]);
        prop_assert!(alpha.is_err());
    }
}
