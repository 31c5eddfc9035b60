//! Visual feature bank: a learned strided encoder, two fixed handcrafted
//! encoders, top-down pyramid fusion, and the per-task dynamic ensemble.

mod dvfe;
mod encoders;
mod fpn;

pub use dvfe::{dvfe_combine, dvfe_weights, init_dvfe};
pub use encoders::{
    encode_dark, encode_dino, encode_sam, image_tensor, init_dark, DARK_CHANNELS, DINO_CHANNELS, SAM_CHANNELS,
};
pub use fpn::{fpn_fuse, init_fpn};

use serde::{Deserialize, Serialize};

/// One bank entry's origin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Dark,
    Dino,
    Sam,
}

impl Source {
    pub const ALL: [Source; 3] = [Source::Dark, Source::Dino, Source::Sam];

    pub fn tag(self) -> &'static str {
        match self {
            Source::Dark => "dark",
            Source::Dino => "dino",
            Source::Sam => "sam",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Rec,
    Res,
}

impl Task {
    pub fn tag(self) -> &'static str {
        match self {
            Task::Rec => "rec",
            Task::Res => "res",
        }
    }

    /// Task grid for an `h × w` image: the stride-32 grid for boxes, stride 8 for masks.
    pub fn grid(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Task::Rec => (h / 32, w / 32),
            Task::Res => (h / 8, w / 8),
        }
    }
}
