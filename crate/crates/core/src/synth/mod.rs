//! Procedural scenes of colored shapes with uniquely referring attribute
//! expressions.
//!
//! A dataset pairs each scene with one expression. The trainer only ever sees
//! the image and the expression tokens; boxes, masks and the target index are
//! kept for detector pretraining, the pseudo-mask oracle and evaluation.

mod generate;
mod io;
mod resolve;

use serde::{Deserialize, Serialize};

use crate::geom::{BBox, Mask};

pub use generate::{generate, generate_scene_pair};
pub use io::{load, save, vocab_sidecar_path, vocabulary_json, FORMAT_VERSION};
pub use resolve::{resolve, satisfies};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Orange,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Position {
    Leftmost,
    Rightmost,
    Topmost,
    Bottommost,
    Center,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Rectangle, ShapeKind::Ellipse, ShapeKind::Triangle];
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
        Color::White,
        Color::Orange,
    ];

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Cyan => [0.0, 1.0, 1.0],
            Color::Magenta => [1.0, 0.0, 1.0],
            Color::White => [1.0, 1.0, 1.0],
            Color::Orange => [1.0, 0.5, 0.0],
        }
    }

    pub fn index(self) -> usize {
        Color::ALL.iter().position(|&c| c == self).expect("palette entry")
    }
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Small, SizeClass::Medium, SizeClass::Large];

    /// Inclusive-exclusive band of mask area as a fraction of the image.
    pub fn area_band(self) -> (f64, f64) {
        match self {
            SizeClass::Small => (0.0, 0.06),
            SizeClass::Medium => (0.06, 0.15),
            SizeClass::Large => (0.15, 1.0),
        }
    }

    pub fn of_fraction(frac: f64) -> SizeClass {
        if frac < 0.06 {
            SizeClass::Small
        } else if frac <= 0.15 {
            SizeClass::Medium
        } else {
            SizeClass::Large
        }
    }
}

impl Position {
    pub const ALL: [Position; 5] = [
        Position::Leftmost,
        Position::Rightmost,
        Position::Topmost,
        Position::Bottommost,
        Position::Center,
    ];
}

/// One vocabulary entry. Ids are stable: colors, shapes, sizes, positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    Color(Color),
    Shape(ShapeKind),
    Size(SizeClass),
    Position(Position),
}

pub const VOCAB_SIZE: usize = 19;
pub const MAX_EXPRESSION_LEN: usize = 8;

impl Token {
    pub fn id(self) -> u8 {
        match self {
            Token::Color(c) => c.index() as u8,
            Token::Shape(s) => 8 + ShapeKind::ALL.iter().position(|&x| x == s).unwrap() as u8,
            Token::Size(s) => 11 + SizeClass::ALL.iter().position(|&x| x == s).unwrap() as u8,
            Token::Position(p) => 14 + Position::ALL.iter().position(|&x| x == p).unwrap() as u8,
        }
    }

    pub fn from_id(id: u8) -> Option<Token> {
        let i = id as usize;
        Some(match i {
            0..=7 => Token::Color(Color::ALL[i]),
            8..=10 => Token::Shape(ShapeKind::ALL[i - 8]),
            11..=13 => Token::Size(SizeClass::ALL[i - 11]),
            14..=18 => Token::Position(Position::ALL[i - 14]),
            _ => return None,
        })
    }

    pub fn all() -> impl Iterator<Item = Token> {
        (0..VOCAB_SIZE as u8).filter_map(Token::from_id)
    }

    pub fn word(self) -> &'static str {
        match self {
            Token::Color(Color::Red) => "red",
            Token::Color(Color::Green) => "green",
            Token::Color(Color::Blue) => "blue",
            Token::Color(Color::Yellow) => "yellow",
            Token::Color(Color::Cyan) => "cyan",
            Token::Color(Color::Magenta) => "magenta",
            Token::Color(Color::White) => "white",
            Token::Color(Color::Orange) => "orange",
            Token::Shape(ShapeKind::Rectangle) => "rectangle",
            Token::Shape(ShapeKind::Ellipse) => "ellipse",
            Token::Shape(ShapeKind::Triangle) => "triangle",
            Token::Size(SizeClass::Small) => "small",
            Token::Size(SizeClass::Medium) => "medium",
            Token::Size(SizeClass::Large) => "large",
            Token::Position(Position::Leftmost) => "leftmost",
            Token::Position(Position::Rightmost) => "rightmost",
            Token::Position(Position::Topmost) => "topmost",
            Token::Position(Position::Bottommost) => "bottommost",
            Token::Position(Position::Center) => "center",
        }
    }

    pub fn kind(self) -> &'static str {
        match self {
            Token::Color(_) => "color",
            Token::Shape(_) => "shape",
            Token::Size(_) => "size",
            Token::Position(_) => "position",
        }
    }
}

/// `H×W×3` image, channel-last, values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let k = (row * self.width + col) * 3;
        [self.data[k], self.data[k + 1], self.data[k + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let k = (row * self.width + col) * 3;
        self.data[k..k + 3].copy_from_slice(&rgb);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectRecord {
    pub shape_kind: ShapeKind,
    pub color: Color,
    pub size_class: SizeClass,
    pub gt_box: BBox,
    pub gt_mask: Mask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub objects: Vec<ObjectRecord>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Expression {
    pub tokens: Vec<Token>,
    pub target_index: usize,
}

impl Expression {
    pub fn token_ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.id() as usize).collect()
    }

    pub fn text(&self) -> String {
        self.tokens.iter().map(|t| t.word()).collect::<Vec<_>>().join(" ")
    }
}

/// One weakly supervised training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub id: u32,
    pub scene: Scene,
    pub expression: Expression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub count: usize,
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Fractions of `count` assigned to train / val / test.
    pub split: [f64; 3],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            count: 2500,
            image_size: 64,
            min_objects: 2,
            max_objects: 5,
            split: [0.8, 0.0, 0.2],
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> crate::Result<()> {
        use crate::Error;
        if self.count == 0 {
            return Err(Error::Config("dataset count must be ≥ 1".into()));
        }
        if self.min_objects < 2 || self.max_objects > 5 || self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "object count range must satisfy 2 ≤ min ≤ max ≤ 5, got {}..={}",
                self.min_objects, self.max_objects
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Config("image_size must be ≥ 16".into()));
        }
        let total: f64 = self.split.iter().sum();
        if self.split.iter().any(|f| !(0.0..=1.0).contains(f)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must be in [0,1] and sum to 1, got {:?}", self.split)));
        }
        Ok(())
    }

    /// Pair counts per split; rounding slack goes to the test split.
    pub fn split_counts(&self) -> [usize; 3] {
        let train = ((self.count as f64 * self.split[0]).round() as usize).min(self.count);
        let val = ((self.count as f64 * self.split[1]).round() as usize).min(self.count - train);
        [train, val, self.count - train - val]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<Pair>,
    pub val: Vec<Pair>,
    pub test: Vec<Pair>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Pair] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn pairs(&self) -> impl Iterator<Item = &Pair> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
