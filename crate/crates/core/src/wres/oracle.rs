use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ccm::rasterize;
use crate::geom::{BBox, Mask};
use crate::synth::Scene;
use crate::{seed, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Clean,
    Dilate,
    Erode,
    Distractor,
}

/// Noise model of the box-prompted segmenter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub p_clean: f64,
    pub p_dilate: f64,
    pub p_erode: f64,
    pub p_distractor: f64,
    pub radius: usize,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            p_clean: 1.0,
            p_dilate: 0.0,
            p_erode: 0.0,
            p_distractor: 0.0,
            radius: 2,
            seed: 0,
        }
    }
}

impl OracleConfig {
    /// The noisy setting used for the ablations.
    pub fn noisy() -> Self {
        Self {
            p_clean: 0.5,
            p_dilate: 0.15,
            p_erode: 0.15,
            p_distractor: 0.2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_clean, self.p_dilate, self.p_erode, self.p_distractor];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("oracle probabilities must lie in [0, 1]".into()));
        }
        let sum: f64 = ps.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("oracle probabilities sum to {sum}, expected 1")));
        }
        if !(1..=2).contains(&self.radius) {
            return Err(Error::Config(format!("oracle radius {} not in {{1, 2}}", self.radius)));
        }
        Ok(())
    }

    fn sample_mode(&self, u: f64) -> NoiseMode {
        let modes = [
            (self.p_clean, NoiseMode::Clean),
            (self.p_dilate, NoiseMode::Dilate),
            (self.p_erode, NoiseMode::Erode),
        ];
        let mut acc = 0.0;
        for (p, mode) in modes {
            acc += p;
            if u < acc {
                return mode;
            }
        }
        NoiseMode::Distractor
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoMask {
    pub mask: Mask,
    pub mode: NoiseMode,
    pub prompt: BBox,
    pub object: Option<usize>,
}

/// Morphological dilation with a `(2r+1)²` square.
pub fn dilate(m: &Mask, r: usize) -> Mask {
    let (h, w) = (m.height(), m.width());
    Mask::from_fn(h, w, |i, j| {
        let (i0, i1) = (i.saturating_sub(r), (i + r).min(h - 1));
        let (j0, j1) = (j.saturating_sub(r), (j + r).min(w - 1));
        (i0..=i1).any(|a| (j0..=j1).any(|b| m.get(a, b)))
    })
}

/// Morphological erosion with a `(2r+1)²` square; outside the image counts as unset.
pub fn erode(m: &Mask, r: usize) -> Mask {
    let (h, w) = (m.height(), m.width());
    Mask::from_fn(h, w, |i, j| {
        if i < r || j < r || i + r >= h || j + r >= w {
            return false;
        }
        (i - r..=i + r).all(|a| (j - r..=j + r).all(|b| m.get(a, b)))
    })
}

/// Box-prompted pseudo mask. The prompt picks the object whose box overlaps
/// it most; the noise mode is drawn from `config` with a stream keyed on the
/// scene, so repeated calls agree.
pub fn oracle_mask(scene: &Scene, prompt: &BBox, config: &OracleConfig) -> PseudoMask {
    let (h, w) = (scene.image.height, scene.image.width);
    let mut rng = seed::rng(seed::derive(config.seed, &[scene.seed]));
    let mode = config.sample_mode(rng.gen::<f64>());
    let mut best: Option<(usize, f64)> = None;
    for (i, o) in scene.objects.iter().enumerate() {
        let v = o.gt_box.iou(prompt);
        if v > 0.0 && best.map_or(true, |(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    let Some((target, _)) = best else {
        return PseudoMask {
            mask: Mask::empty(h, w),
            mode,
            prompt: *prompt,
            object: None,
        };
    };
    let gt = &scene.objects[target].gt_mask;
    let r = config.radius;
    let mask = match mode {
        NoiseMode::Clean => gt.clone(),
        NoiseMode::Dilate => dilate(gt, r),
        NoiseMode::Erode => erode(gt, r),
        NoiseMode::Distractor => {
            let region = dilate(&rasterize(prompt, h, w), r);
            let neighbor = scene
                .objects
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != target)
                .map(|(i, o)| (i, o.gt_mask.intersection_count(&region)))
                .filter(|&(_, n)| n > 0)
                .fold(None, |acc: Option<(usize, usize)>, (i, n)| match acc {
                    Some((_, bn)) if bn >= n => acc,
                    _ => Some((i, n)),
                });
            match neighbor {
                Some((i, _)) => {
                    let clipped = Mask::from_fn(h, w, |a, b| scene.objects[i].gt_mask.get(a, b) && region.get(a, b));
                    gt.union(&clipped)
                }
                None => gt.clone(),
            }
        }
    };
    PseudoMask {
        mask,
        mode,
        prompt: *prompt,
        object: Some(target),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn morphology_inclusions() {
        let m = Mask::from_fn(10, 10, |i, j| (2..7).contains(&i) && (3..8).contains(&j));
        assert!(m.is_subset_of(&dilate(&m, 1)));
        assert!(erode(&m, 1).is_subset_of(&m));
        assert_eq!(dilate(&m, 1).count(), 49);
        assert_eq!(erode(&m, 1).count(), 9);
        assert!(erode(&Mask::from_fn(4, 4, |_, _| true), 1).count() == 4);
    }

    #[test]
    fn mode_sampling_follows_cumulative_probabilities() {
        let c = OracleConfig::noisy();
        assert_eq!(c.sample_mode(0.0), NoiseMode::Clean);
        assert_eq!(c.sample_mode(0.55), NoiseMode::Dilate);
        assert_eq!(c.sample_mode(0.7), NoiseMode::Erode);
        assert_eq!(c.sample_mode(0.99), NoiseMode::Distractor);
    }

    #[test]
    fn validation() {
        assert!(OracleConfig::default().validate().is_ok());
        assert!(OracleConfig::noisy().validate().is_ok());
        let bad = OracleConfig {
            p_clean: 0.9,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = OracleConfig {
            radius: 3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
