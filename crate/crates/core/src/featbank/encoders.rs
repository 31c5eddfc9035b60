use rand_chacha::ChaCha8Rng;

use crate::numcore::{Tape, Tensor, Var};
use crate::params::{init_conv, Bound, ParamStore};
use crate::synth::{Color, Image};
use crate::{Error, Result};

/// `(in, out)` channels of the five stride-2 convolutions.
const DARK_LAYERS: [(usize, usize); 5] = [(3, 8), (8, 16), (16, 16), (16, 32), (32, 64)];
/// Channels of the three returned levels (strides 8, 16, 32).
pub const DARK_CHANNELS: [usize; 3] = [16, 32, 64];
pub const DINO_CHANNELS: usize = 11;
pub const SAM_CHANNELS: usize = 8;

const DINO_PATCH: usize = 8;
const SAM_STRIDE: usize = 4;

/// `[3, H, W]` channel-major copy of an image.
pub fn image_tensor(image: &Image) -> Tensor {
    let (h, w) = (image.height, image.width);
    Tensor::from_fn(vec![3, h, w], |k| {
        let (c, p) = (k / (h * w), k % (h * w));
        image.data[p * 3 + c] as f64
    })
}

pub fn init_dark(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for (i, &(cin, cout)) in DARK_LAYERS.iter().enumerate() {
        init_conv(store, rng, &format!("dark.c{}", i + 1), cin, cout, 3);
    }
}

/// Strided conv stack over `x: [3, H, W]`; returns the stride-8, 16 and 32 maps.
pub fn encode_dark(tape: &mut Tape, bound: &Bound, x: Var) -> Result<[Var; 3]> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("encode_dark", &s, &[3, 0, 0]));
    }
    if s[1] % 32 != 0 || s[2] % 32 != 0 {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} requires divisibility by 32",
            s[1], s[2]
        )));
    }
    let mut h = x;
    let mut levels = Vec::with_capacity(3);
    for i in 1..=DARK_LAYERS.len() {
        let w = bound.get(&format!("dark.c{i}.w"))?;
        let b = bound.get(&format!("dark.c{i}.b"))?;
        let y = tape.conv2d(h, w, Some(b), 2, 1)?;
        h = tape.relu(y)?;
        if i >= 3 {
            levels.push(h);
        }
    }
    Ok([levels[0], levels[1], levels[2]])
}

/// Palette bin of a pixel, `None` for background (nearest to black).
fn palette_bin(p: [f32; 3]) -> Option<usize> {
    let d2 = |c: [f32; 3]| (0..3).map(|k| (p[k] - c[k]).powi(2)).sum::<f32>();
    let mut best = (None, d2([0.0; 3]));
    for c in Color::ALL {
        let d = d2(c.rgb());
        if d < best.1 {
            best = (Some(c.index()), d);
        }
    }
    best.0
}

/// Per-patch color histogram (fraction of patch pixels in each of the 8
/// palette bins) followed by the patch's mean RGB: `[11, ⌈H/8⌉, ⌈W/8⌉]`.
pub fn encode_dino(image: &Image) -> Tensor {
    let (h, w) = (image.height, image.width);
    let (gh, gw) = (h.div_ceil(DINO_PATCH), w.div_ceil(DINO_PATCH));
    let mut out = Tensor::zeros(vec![DINO_CHANNELS, gh, gw]);
    let data = out.data_mut();
    for pi in 0..gh {
        for pj in 0..gw {
            let rows = pi * DINO_PATCH..((pi + 1) * DINO_PATCH).min(h);
            let cols = pj * DINO_PATCH..((pj + 1) * DINO_PATCH).min(w);
            let n = (rows.len() * cols.len()) as f64;
            let at = |c: usize| (c * gh + pi) * gw + pj;
            for i in rows {
                for j in cols.clone() {
                    let p = image.pixel(i, j);
                    if let Some(bin) = palette_bin(p) {
                        data[at(bin)] += 1.0 / n;
                    }
                    for k in 0..3 {
                        data[at(8 + k)] += p[k] as f64 / n;
                    }
                }
            }
        }
    }
    out
}

/// 4-connected components of equal color, labelled in raster order.
fn region_labels(image: &Image) -> Vec<usize> {
    let (h, w) = (image.height, image.width);
    let mut label = vec![usize::MAX; h * w];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if label[start] != usize::MAX {
            continue;
        }
        let color = image.pixel(start / w, start % w);
        label[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (i, j) = (p / w, p % w);
            let neighbors = [
                (i > 0).then(|| p - w),
                (i + 1 < h).then(|| p + w),
                (j > 0).then(|| p - 1),
                (j + 1 < w).then(|| p + 1),
            ];
            for q in neighbors.into_iter().flatten() {
                if label[q] == usize::MAX && image.pixel(q / w, q % w) == color {
                    label[q] = next;
                    stack.push(q);
                }
            }
        }
        next += 1;
    }
    label
}

/// Deterministic pseudo-random embedding in [-1, 1]³ of a region label.
fn region_embedding(label: usize) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (k, v) in out.iter_mut().enumerate() {
        let z = crate::seed::derive(label as u64, &[k as u64]);
        *v = (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0;
    }
    out
}

/// Edge and region descriptors pooled over 4×4 cells: gradient magnitude,
/// absolute differences toward the right, down, down-right and down-left
/// neighbors, then the mean region-id embedding. `[8, ⌈H/4⌉, ⌈W/4⌉]`.
pub fn encode_sam(image: &Image) -> Tensor {
    let (h, w) = (image.height, image.width);
    let (gh, gw) = (h.div_ceil(SAM_STRIDE), w.div_ceil(SAM_STRIDE));
    let labels = region_labels(image);
    let diff = |i: usize, j: usize, di: isize, dj: isize| -> f64 {
        let (ni, nj) = (i as isize + di, j as isize + dj);
        if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
            return 0.0;
        }
        let (a, b) = (image.pixel(i, j), image.pixel(ni as usize, nj as usize));
        (0..3).map(|k| (a[k] - b[k]).abs() as f64).sum()
    };
    let mut out = Tensor::zeros(vec![SAM_CHANNELS, gh, gw]);
    let data = out.data_mut();
    for i in 0..h {
        for j in 0..w {
            let (gi, gj) = (i / SAM_STRIDE, j / SAM_STRIDE);
            let rows = (gi * SAM_STRIDE..((gi + 1) * SAM_STRIDE).min(h)).len();
            let cols = (gj * SAM_STRIDE..((gj + 1) * SAM_STRIDE).min(w)).len();
            let n = (rows * cols) as f64;
            let at = |c: usize| (c * gh + gi) * gw + gj;
            let dirs = [diff(i, j, 0, 1), diff(i, j, 1, 0), diff(i, j, 1, 1), diff(i, j, 1, -1)];
            data[at(0)] += (dirs[0] * dirs[0] + dirs[1] * dirs[1]).sqrt() / n;
            for (k, d) in dirs.iter().enumerate() {
                data[at(1 + k)] += d / n;
            }
            let e = region_embedding(labels[i * w + j]);
            for k in 0..3 {
                data[at(5 + k)] += e[k] / n;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn dark_params() -> ParamStore {
        let mut s = ParamStore::new();
        init_dark(&mut s, &mut seed::rng(3));
        s
    }

    #[test]
    fn dark_level_sizes() {
        let store = dark_params();
        for (size, expect) in [(64, [8, 4, 2]), (416, [52, 26, 13])] {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, |_| false);
            let x = tape.constant(Tensor::zeros(vec![3, size, size]));
            let levels = encode_dark(&mut tape, &bound, x).unwrap();
            for (l, (&e, &c)) in levels.iter().zip(expect.iter().zip(DARK_CHANNELS.iter())) {
                assert_eq!(tape.shape(*l), &[c, e, e]);
            }
        }
    }

    #[test]
    fn dark_rejects_indivisible_sizes() {
        let store = dark_params();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, |_| false);
        let x = tape.constant(Tensor::zeros(vec![3, 50, 50]));
        let err = encode_dark(&mut tape, &bound, x).unwrap_err();
        assert!(err.to_string().contains("requires divisibility by 32"));
    }

    #[test]
    fn uniform_image_has_no_edges() {
        let f = encode_sam(&Image::filled(16, 16, [0.2, 0.4, 0.6]));
        assert_eq!(f.shape(), &[8, 4, 4]);
        assert!(f.data()[..5 * 16].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dino_channels_sum_to_foreground_fraction() {
        let mut img = Image::filled(16, 16, [0.0; 3]);
        for j in 0..16 {
            img.set_pixel(3, j, Color::Orange.rgb());
        }
        let f = encode_dino(&img);
        assert_eq!(f.shape(), &[11, 2, 2]);
        let orange = Color::Orange.index();
        assert_eq!(f.get(&[orange, 0, 0]), 1.0 / 8.0);
        assert_eq!(f.get(&[orange, 1, 0]), 0.0);
        assert_eq!(f.get(&[8, 0, 1]), 1.0 / 8.0);
        assert_eq!(f.get(&[9, 0, 1]), 0.5 / 8.0);
    }
}
