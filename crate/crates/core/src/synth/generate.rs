use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::resolve::resolve_index;
use super::{
    Color, Dataset, DatasetConfig, Expression, Image, ObjectRecord, Pair, Position, Scene, ShapeKind, SizeClass,
    Token,
};
use crate::geom::Mask;
use crate::seed;
use crate::Result;

const MAX_ATTEMPTS: usize = 1000;
const MAX_OVERLAP: f64 = 0.2;

/// Area fractions actually sampled, strictly inside each size band.
fn sample_band(size: SizeClass) -> (f64, f64) {
    match size {
        SizeClass::Small => (0.025, 0.055),
        SizeClass::Medium => (0.07, 0.14),
        SizeClass::Large => (0.16, 0.24),
    }
}

fn shape_mask(kind: ShapeKind, x: usize, y: usize, bw: usize, bh: usize, size: usize) -> Mask {
    let (fx, fy, fw, fh) = (x as f64, y as f64, bw as f64, bh as f64);
    let (cx, cy) = (fx + fw / 2.0, fy + fh / 2.0);
    Mask::from_fn(size, size, |i, j| {
        if i < y || i >= y + bh || j < x || j >= x + bw {
            return false;
        }
        let (px, py) = (j as f64 + 0.5, i as f64 + 0.5);
        match kind {
            ShapeKind::Rectangle => true,
            ShapeKind::Ellipse => {
                let dx = (px - cx) / (fw / 2.0);
                let dy = (py - cy) / (fh / 2.0);
                dx * dx + dy * dy <= 1.0
            }
            ShapeKind::Triangle => {
                // apex at top center, base along the bottom edge
                let t = (py - fy) / fh;
                (px - cx).abs() <= t * fw / 2.0
            }
        }
    })
}

fn sample_object(rng: &mut ChaCha8Rng, size: usize) -> Option<ObjectRecord> {
    let shape_kind = *ShapeKind::ALL.choose(rng).unwrap();
    let color = *Color::ALL.choose(rng).unwrap();
    let size_class = *SizeClass::ALL.choose(rng).unwrap();
    let (lo, hi) = sample_band(size_class);
    let frac = rng.gen_range(lo..hi);
    let fill = match shape_kind {
        ShapeKind::Rectangle => 1.0,
        ShapeKind::Ellipse => std::f64::consts::FRAC_PI_4,
        ShapeKind::Triangle => 0.5,
    };
    let aspect = rng.gen_range(0.6..1.6);
    let area = frac * (size * size) as f64 / fill;
    let bh = (area / aspect).sqrt().round() as usize;
    let bw = (aspect * bh as f64).round() as usize;
    if bw < 3 || bh < 3 || bw > size || bh > size {
        return None;
    }
    let x = rng.gen_range(0..=size - bw);
    let y = rng.gen_range(0..=size - bh);
    let gt_mask = shape_mask(shape_kind, x, y, bw, bh, size);
    let actual = gt_mask.count() as f64 / (size * size) as f64;
    if SizeClass::of_fraction(actual) != size_class || !gt_mask.is_connected() {
        return None;
    }
    let gt_box = gt_mask.bounding_box()?;
    Some(ObjectRecord {
        shape_kind,
        color,
        size_class,
        gt_box,
        gt_mask,
    })
}

fn overlap_ok(a: &Mask, b: &Mask) -> bool {
    let inter = a.intersection_count(b) as f64;
    inter <= MAX_OVERLAP * a.count().min(b.count()) as f64
}

fn sample_expression(rng: &mut ChaCha8Rng, objects: &[ObjectRecord], target: usize) -> Vec<Token> {
    let obj = &objects[target];
    let mut tokens = Vec::new();
    if rng.gen_bool(0.5) {
        tokens.push(Token::Size(obj.size_class));
    }
    if rng.gen_bool(0.6) {
        tokens.push(Token::Color(obj.color));
    }
    if rng.gen_bool(0.5) {
        tokens.push(Token::Shape(obj.shape_kind));
    }
    if tokens.is_empty() || rng.gen_bool(0.3) {
        tokens.push(Token::Position(*Position::ALL.choose(rng).unwrap()));
    }
    tokens
}

/// Generates one scene and its expression; `None` once the attempt budget is spent.
fn try_scene(seed: u64, config: &DatasetConfig) -> Option<(Scene, Expression)> {
    let mut rng = seed::rng(seed);
    let size = config.image_size;
    let n = rng.gen_range(config.min_objects..=config.max_objects);
    let mut attempts = 0;
    let mut objects: Vec<ObjectRecord> = Vec::with_capacity(n);
    while objects.len() < n {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return None;
        }
        let Some(obj) = sample_object(&mut rng, size) else {
            continue;
        };
        if objects.iter().all(|o| overlap_ok(&o.gt_mask, &obj.gt_mask)) {
            objects.push(obj);
        }
    }

    let mut image = Image::filled(size, size, [0.0, 0.0, 0.0]);
    for obj in &objects {
        let rgb = obj.color.rgb();
        for i in 0..size {
            for j in 0..size {
                if obj.gt_mask.get(i, j) {
                    image.set_pixel(i, j, rgb);
                }
            }
        }
    }
    let scene = Scene { image, objects, seed };

    while attempts < MAX_ATTEMPTS {
        attempts += 1;
        let target = rng.gen_range(0..scene.objects.len());
        let tokens = sample_expression(&mut rng, &scene.objects, target);
        if resolve_index(&tokens, &scene) == Some(target) {
            return Some((
                scene,
                Expression {
                    tokens,
                    target_index: target,
                },
            ));
        }
    }
    None
}

/// Scene and expression for pair `index`, retrying with successive sub-seeds.
pub fn generate_scene_pair(config: &DatasetConfig, index: usize) -> (Scene, Expression) {
    (0u64..)
        .find_map(|retry| try_scene(seed::derive(config.seed, &[index as u64, retry]), config))
        .expect("scene generation retries are unbounded")
}

/// Builds the train/val/test splits for `config`. Pure in `config`.
pub fn generate(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let [n_train, n_val, _] = config.split_counts();
    let mut all: Vec<Pair> = (0..config.count)
        .map(|i| {
            let (scene, expression) = generate_scene_pair(config, i);
            Pair {
                id: i as u32,
                scene,
                expression,
            }
        })
        .collect();
    let test = all.split_off(n_train + n_val);
    let val = all.split_off(n_train);
    Ok(Dataset {
        config: config.clone(),
        train: all,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangle_and_ellipse_masks_stay_in_their_box() {
        for kind in ShapeKind::ALL {
            let m = shape_mask(kind, 10, 12, 20, 16, 64);
            let b = m.bounding_box().unwrap();
            assert!(b.x >= 10.0 && b.y >= 12.0);
            assert!(b.x + b.w <= 30.0 && b.y + b.h <= 28.0);
            assert!(m.is_connected());
        }
    }
}
