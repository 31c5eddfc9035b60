use serde::{Deserialize, Serialize};

use crate::geom::BBox;
use crate::numcore::sigmoid;

/// A decoded box with the grid cell it came from and that cell's score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxPred {
    pub bbox: BBox,
    pub cell: usize,
    pub score: f64,
}

/// Grid box decoding: center `((col + σ(tx))·s, (row + σ(ty))·s)`, size
/// `(pw·e^tw, ph·e^th)`, clipped to the `height × width` image.
pub fn decode_box(
    cell: (usize, usize),
    offsets: [f64; 4],
    prior: (f64, f64),
    stride: f64,
    image: (usize, usize),
) -> BBox {
    let (row, col) = cell;
    let [tx, ty, tw, th] = offsets;
    let cx = (col as f64 + sigmoid(tx)) * stride;
    let cy = (row as f64 + sigmoid(ty)) * stride;
    let w = prior.0 * tw.clamp(-30.0, 30.0).exp();
    let h = prior.1 * th.clamp(-30.0, 30.0).exp();
    BBox::from_center(cx, cy, w, h).clamped(image.1 as f64, image.0 as f64)
}

/// Inverse of [`decode_box`] (before clipping) for a box whose center lies in `cell`.
pub fn encode_box(b: &BBox, cell: (usize, usize), prior: (f64, f64), stride: f64) -> [f64; 4] {
    let logit = |p: f64| {
        let p = p.clamp(1e-6, 1.0 - 1e-6);
        (p / (1.0 - p)).ln()
    };
    let (cx, cy) = b.center();
    [
        logit(cx / stride - cell.1 as f64),
        logit(cy / stride - cell.0 as f64),
        (b.w / prior.0).ln(),
        (b.h / prior.1).ln(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_examples() {
        let b = decode_box((0, 0), [0.0; 4], (16.0, 16.0), 32.0, (64, 64));
        assert_eq!(b, BBox::new(8.0, 8.0, 16.0, 16.0));
        let b = decode_box((0, 0), [0.0, 0.0, 2f64.ln(), 0.0], (16.0, 16.0), 32.0, (64, 64));
        assert!((b.w - 32.0).abs() < 1e-12);
    }

    #[test]
    fn round_trip() {
        let gt = BBox::new(35.0, 6.0, 20.0, 13.0);
        let cell = (0, 1);
        let t = encode_box(&gt, cell, (16.0, 16.0), 32.0);
        let back = decode_box(cell, t, (16.0, 16.0), 32.0, (64, 64));
        for (a, b) in [(back.x, gt.x), (back.y, gt.y), (back.w, gt.w), (back.h, gt.h)] {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
