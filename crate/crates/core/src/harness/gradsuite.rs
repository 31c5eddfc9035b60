use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::model::{is_trainable, Model, PairFeatures, PseudoMasks};
use super::Config;
use crate::geom::{BBox, Mask};
use crate::numcore::{gradcheck_coords, relative_error, GradcheckReport, Tape, Tensor, Var};
use crate::params::ParamStore;
use crate::synth::{generate, DatasetConfig, Pair};
use crate::wrec::{self, init_detector, NegPool};
use crate::{ccm, seed, wres, Result};

/// Knobs for [`gradient_suite`].
#[derive(Clone, Debug)]
pub struct SuiteConfig {
    /// Randomized instances per loss and per parameter group.
    pub instances: usize,
    /// Coordinates probed per instance.
    pub coords: usize,
    pub h: f64,
    pub tol: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            coords: 3,
            h: 1e-5,
            tol: 1e-4,
            seed: 0,
        }
    }
}

/// Worst-case report for one loss or parameter group.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub report: GradcheckReport,
    pub instances: usize,
    /// Probes skipped because x ± h crossed a branch of the loss.
    pub straddled: usize,
}

fn new_report(op: &str) -> GradcheckReport {
    GradcheckReport {
        op: op.into(),
        max_rel_err: 0.0,
        failing_coords: Vec::new(),
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

fn sample(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.truncate(k);
    idx
}

fn random_box(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BBox {
    let bw = rng.gen_range(1.0..w as f64);
    let bh = rng.gen_range(1.0..h as f64);
    BBox::new(rng.gen_range(0.0..w as f64 - bw), rng.gen_range(0.0..h as f64 - bh), bw, bh)
}

fn check_atc(rng: &mut ChaCha8Rng, cfg: &SuiteConfig) -> Result<GradcheckReport> {
    let b = rng.gen_range(2..5);
    let (cells, c) = (4, rng.gen_range(2..9));
    // rows 0..cells are anchors, the last row is the text
    let x = uniform(rng, &[b, cells + 1, c], -1.0, 1.0);
    let tau = rng.gen_range(0.05..1.0);
    let literal = rng.gen_bool(0.3);
    let pool = if rng.gen_bool(0.5) { NegPool::Topk } else { NegPool::Top1 };
    let selected: Vec<Vec<usize>> = (0..b)
        .map(|i| {
            let row = |r: usize| &x.data()[(i * (cells + 1) + r) * c..(i * (cells + 1) + r + 1) * c];
            let text = row(cells);
            let sims: Vec<f64> = (0..cells).map(|a| row(a).iter().zip(text).map(|(p, q)| p * q).sum()).collect();
            wrec::topk_select(&sims, 2)
        })
        .collect::<Result<_>>()?;
    let f = |t: &mut Tape, x: Var| {
        let mut anchors = Vec::with_capacity(b);
        let mut texts = Vec::with_capacity(b);
        for i in 0..b {
            let xi = t.index_select(x, 0, &[i])?;
            let xi = t.reshape(xi, &[cells + 1, c])?;
            anchors.push(t.index_select(xi, 0, &(0..cells).collect::<Vec<_>>())?);
            let ti = t.index_select(xi, 0, &[cells])?;
            texts.push(t.reshape(ti, &[c])?);
        }
        let items = wrec::atc_items(t, &anchors, &texts, &selected, pool)?;
        wrec::atc_loss(t, &items, tau, literal)
    };
    let coords = sample(rng, x.numel(), cfg.coords);
    gradcheck_coords("l_atc", f, &x, cfg.h, cfg.tol, &coords)
}

fn check_res(rng: &mut ChaCha8Rng, cfg: &SuiteConfig) -> Result<GradcheckReport> {
    let (h, w) = (rng.gen_range(8..33), rng.gen_range(8..33));
    let x = uniform(rng, &[h, w], -4.0, 4.0);
    let p = rng.gen_range(0.1..0.9);
    let target = Mask::from_fn(h, w, |_, _| rng.gen_bool(p));
    let f = |t: &mut Tape, x: Var| {
        let o = t.sigmoid(x)?;
        wres::res_loss(t, o, &target)
    };
    let coords = sample(rng, x.numel(), cfg.coords);
    gradcheck_coords("l_res", f, &x, cfg.h, cfg.tol, &coords)
}

fn check_scl(rng: &mut ChaCha8Rng, cfg: &SuiteConfig) -> Result<GradcheckReport> {
    let (h, w) = (rng.gen_range(8..33), rng.gen_range(8..33));
    let x = uniform(rng, &[h, w], -4.0, 4.0);
    let b = random_box(rng, h, w);
    let f = |t: &mut Tape, x: Var| {
        let o = t.sigmoid(x)?;
        ccm::scl_loss(t, o, &b)
    };
    // probe the coordinates that carry a projection maximum, where the
    // gradient is nonzero, alongside random ones
    let mut coords = sample(rng, x.numel(), cfg.coords);
    let j = rng.gen_range(0..w);
    if let Some(i) = (0..h).max_by(|&a, &b| x.data()[a * w + j].total_cmp(&x.data()[b * w + j]).then(b.cmp(&a))) {
        coords.push(i * w + j);
    }
    coords.sort_unstable();
    coords.dedup();
    gradcheck_coords("l_scl", f, &x, cfg.h, cfg.tol, &coords)
}

/// Small model used for the total-objective checks.
pub fn suite_model_config() -> Config {
    Config {
        d: 8,
        d_t: 8,
        contrastive_dim: 8,
        aspp_width: 4,
        lambda_res: 1.0,
        ..Config::default()
    }
}

struct TotalFixture {
    pairs: Vec<Pair>,
    feats: Vec<PairFeatures>,
    detector: ParamStore,
}

impl TotalFixture {
    fn new(seed: u64) -> Result<Self> {
        let ds = generate(&DatasetConfig {
            seed,
            count: 24,
            split: [1.0, 0.0, 0.0],
            ..Default::default()
        })?;
        let mut detector = ParamStore::new();
        init_detector(&mut detector, seed);
        let feats = ds
            .train
            .iter()
            .map(|p| PairFeatures::compute(p, &detector))
            .collect::<Result<_>>()?;
        Ok(Self {
            pairs: ds.train,
            feats,
            detector,
        })
    }
}

/// Smallest analytic gradient magnitude worth probing at h = 1e-5.
const GRAD_FLOOR: f64 = 1e-4;

/// Parameter group of a tensor name: the module prefix without `.w` / `.b`.
fn group_of(name: &str) -> &str {
    match name.rsplit_once('.') {
        Some((head, "w" | "b")) => head,
        _ => name,
    }
}

/// L_total and its branch signature with parameter `name` replaced by `x`.
fn total_probe(model: &Model, batch: &[(&Pair, &PairFeatures)], name: &str, x: &Tensor) -> Result<(f64, u64)> {
    let mut t = Tape::new();
    let mut bound = model.bind(&mut t, false);
    let v = t.constant(x.clone());
    bound.set(name, v);
    let mut pseudo = PseudoMasks::new(&model.config);
    let (loss, _, steps) = model.total_loss(&mut t, &bound, batch, &mut pseudo)?;
    let mut h = DefaultHasher::new();
    t.branch_signature().hash(&mut h);
    for s in &steps {
        (s.pred.cell, s.gate.open, s.pseudo.data()).hash(&mut h);
    }
    Ok((t.value(loss).item(), h.finish()))
}

/// One randomized instance of the total objective. Probes whose ±h points
/// take a different branch (argmax, top-k, gate, clamp) than the base point
/// straddle a kink where the central difference is meaningless; they are
/// counted and replaced by another coordinate.
fn check_total(
    rng: &mut ChaCha8Rng,
    cfg: &SuiteConfig,
    fixture: &TotalFixture,
    reports: &mut Vec<SuiteEntry>,
) -> Result<()> {
    let mut config = suite_model_config();
    config.seed = rng.gen();
    config.use_isl = rng.gen_bool(0.5);
    config.cosine_sim = rng.gen_bool(0.5);
    config.alpha = rng.gen_range(0.0..0.5);
    let mut model = Model::new(&config, &fixture.detector)?;
    // move every trainable tensor off its initialization so no group sits at zero
    let names: Vec<String> = model.params.names().filter(|n| is_trainable(n)).map(String::from).collect();
    for n in &names {
        if let Some(t) = model.params.get_mut(n) {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
        }
    }
    let n = rng.gen_range(2..4);
    let idx = sample(rng, fixture.pairs.len(), n);
    let batch: Vec<(&Pair, &PairFeatures)> = idx.iter().map(|&i| (&fixture.pairs[i], &fixture.feats[i])).collect();

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let mut pseudo = PseudoMasks::new(&config);
    let (loss, _, _) = model.total_loss(&mut tape, &bound, &batch, &mut pseudo)?;
    let grads = tape.backward(loss)?;
    let (_, base_sig) = total_probe(&model, &batch, &names[0], model.params.get(&names[0])?)?;

    let mut groups: Vec<(&str, Vec<&String>)> = Vec::new();
    for n in &names {
        let g = group_of(n);
        match groups.iter_mut().find(|(k, _)| *k == g) {
            Some((_, v)) => v.push(n),
            None => groups.push((g, vec![n])),
        }
    }
    for (group, members) in groups {
        // (member, coordinate) candidates; tiny gradients sit under the
        // finite-difference noise floor and say nothing about the chain rule
        let mut all = Vec::new();
        let mut live = Vec::new();
        for (m, &name) in members.iter().enumerate() {
            let g = grads.get(bound.get(name)?);
            for c in 0..model.params.get(name)?.numel() {
                all.push((m, c));
                if g.map_or(false, |g| g.data()[c].abs() >= GRAD_FLOOR) {
                    live.push((m, c));
                }
            }
        }
        let mut pool = if live.is_empty() { all } else { live };
        pool.shuffle(rng);
        let mut report = new_report(&format!("l_total:{group}"));
        let (mut checked, mut straddled) = (0, 0);
        for (m, c) in pool {
            if checked == cfg.coords {
                break;
            }
            let name = members[m];
            let mut x = model.params.get(name)?.clone();
            let orig = x.data()[c];
            x.data_mut()[c] = orig + cfg.h;
            let (up, s_up) = total_probe(&model, &batch, name, &x)?;
            x.data_mut()[c] = orig - cfg.h;
            let (down, s_down) = total_probe(&model, &batch, name, &x)?;
            if s_up != base_sig || s_down != base_sig {
                straddled += 1;
                continue;
            }
            checked += 1;
            let analytic = grads.get(bound.get(name)?).map_or(0.0, |g| g.data()[c]);
            let err = relative_error(analytic, (up - down) / (2.0 * cfg.h));
            if !(err < cfg.tol) {
                report.failing_coords.push(vec![m, c]);
            }
            if err.is_nan() || err > report.max_rel_err {
                report.max_rel_err = err;
            }
        }
        match reports.iter_mut().find(|e| e.report.op == report.op) {
            Some(e) => {
                e.report.merge(report);
                e.instances += 1;
                e.straddled += straddled;
            }
            None => reports.push(SuiteEntry {
                report,
                instances: 1,
                straddled,
            }),
        }
    }
    Ok(())
}

/// Central-difference checks of the contrastive, segmentation, projection
/// and total objectives. The total is checked against every trainable
/// parameter group of a small model.
pub fn gradient_suite(cfg: &SuiteConfig) -> Result<Vec<SuiteEntry>> {
    let mut rng = seed::rng(seed::derive(cfg.seed, &[0x9c]));
    let mut out = Vec::new();
    type Check = fn(&mut ChaCha8Rng, &SuiteConfig) -> Result<GradcheckReport>;
    for (name, check) in [("l_atc", check_atc as Check), ("l_res", check_res), ("l_scl", check_scl)] {
        let mut report = new_report(name);
        for _ in 0..cfg.instances {
            report.merge(check(&mut rng, cfg)?);
        }
        out.push(SuiteEntry {
            report,
            instances: cfg.instances,
            straddled: 0,
        });
    }
    let fixture = TotalFixture::new(cfg.seed)?;
    let mut totals = Vec::new();
    for _ in 0..cfg.instances {
        check_total(&mut rng, cfg, &fixture, &mut totals)?;
    }
    out.extend(totals);
    Ok(out)
}
