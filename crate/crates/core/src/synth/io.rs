//! Dataset container: magic, version tag, JSON header, then one binary record
//! per pair in train/val/test order. All integers and floats little-endian.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Color, Dataset, DatasetConfig, Expression, Image, ObjectRecord, Pair, Scene, ShapeKind, SizeClass, Token};
use crate::geom::{BBox, Mask};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"WGLD";
pub const FORMAT_VERSION: &str = "wgl1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    seed: u64,
    config: DatasetConfig,
    counts: Counts,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Counts {
    train: usize,
    val: usize,
    test: usize,
}

pub fn vocab_sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("vocab.json")
}

pub fn vocabulary_json() -> String {
    let entries: Vec<serde_json::Value> = Token::all()
        .map(|t| serde_json::json!({ "id": t.id(), "word": t.word(), "kind": t.kind() }))
        .collect();
    serde_json::to_string_pretty(&serde_json::json!({ "version": FORMAT_VERSION, "tokens": entries }))
        .expect("vocabulary serializes")
}

fn shape_code(s: ShapeKind) -> u8 {
    ShapeKind::ALL.iter().position(|&x| x == s).unwrap() as u8
}

fn size_code(s: SizeClass) -> u8 {
    SizeClass::ALL.iter().position(|&x| x == s).unwrap() as u8
}

pub(crate) fn encode(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION.len() as u8);
    out.extend_from_slice(FORMAT_VERSION.as_bytes());
    let header = Header {
        seed: ds.config.seed,
        config: ds.config.clone(),
        counts: Counts {
            train: ds.train.len(),
            val: ds.val.len(),
            test: ds.test.len(),
        },
    };
    let hjson = serde_json::to_vec(&header).expect("header serializes");
    out.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
    out.extend_from_slice(&hjson);
    for pair in ds.pairs() {
        encode_pair(&mut out, pair);
    }
    out
}

fn encode_pair(out: &mut Vec<u8>, pair: &Pair) {
    let scene = &pair.scene;
    out.extend_from_slice(&pair.id.to_le_bytes());
    out.extend_from_slice(&scene.seed.to_le_bytes());
    out.extend_from_slice(&(scene.image.height as u16).to_le_bytes());
    out.extend_from_slice(&(scene.image.width as u16).to_le_bytes());
    for v in &scene.image.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(scene.objects.len() as u8);
    for obj in &scene.objects {
        out.push(shape_code(obj.shape_kind));
        out.push(obj.color.index() as u8);
        out.push(size_code(obj.size_class));
        for v in [obj.gt_box.x, obj.gt_box.y, obj.gt_box.w, obj.gt_box.h] {
            out.extend_from_slice(&(v as u16).to_le_bytes());
        }
        let mut byte = 0u8;
        for (k, &b) in obj.gt_mask.data().iter().enumerate() {
            if b {
                byte |= 1 << (k % 8);
            }
            if k % 8 == 7 {
                out.push(byte);
                byte = 0;
            }
        }
        if obj.gt_mask.data().len() % 8 != 0 {
            out.push(byte);
        }
    }
    out.push(pair.expression.tokens.len() as u8);
    out.extend(pair.expression.tokens.iter().map(|t| t.id()));
    out.push(pair.expression.target_index as u8);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("unexpected end of file reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub(crate) fn decode(buf: &[u8]) -> Result<Dataset> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: "not a dataset file (bad magic)".into(),
        });
    }
    let tag_len = r.u8("version tag length")? as usize;
    let tag = r.take(tag_len, "version tag")?;
    let tag = String::from_utf8_lossy(tag).into_owned();
    if tag != FORMAT_VERSION {
        return Err(Error::Version {
            found: tag,
            expected: FORMAT_VERSION.into(),
        });
    }
    let hlen = r.u32("header length")? as usize;
    let hstart = r.pos;
    let header: Header = serde_json::from_slice(r.take(hlen, "header")?).map_err(|e| Error::Parse {
        offset: hstart,
        msg: format!("bad header: {e}"),
    })?;
    let split = |n: usize, r: &mut Reader| (0..n).map(|_| decode_pair(r)).collect::<Result<Vec<_>>>();
    let train = split(header.counts.train, &mut r)?;
    let val = split(header.counts.val, &mut r)?;
    let test = split(header.counts.test, &mut r)?;
    if r.pos != buf.len() {
        return Err(r.err("trailing bytes after last record"));
    }
    Ok(Dataset {
        config: header.config,
        train,
        val,
        test,
    })
}

fn decode_pair(r: &mut Reader) -> Result<Pair> {
    let id = r.u32("pair id")?;
    let seed = r.u64("scene seed")?;
    let height = r.u16("image height")? as usize;
    let width = r.u16("image width")? as usize;
    if height == 0 || width == 0 {
        return Err(r.err("zero image extent"));
    }
    let raw = r.take(height * width * 3 * 4, "image")?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let image = Image { height, width, data };
    let n_obj = r.u8("object count")? as usize;
    let mut objects = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let at = r.pos;
        let shape_kind = *ShapeKind::ALL.get(r.u8("shape")? as usize).ok_or_else(|| bad(at, "shape code"))?;
        let color = *Color::ALL.get(r.u8("color")? as usize).ok_or_else(|| bad(at + 1, "color code"))?;
        let size_class = *SizeClass::ALL.get(r.u8("size")? as usize).ok_or_else(|| bad(at + 2, "size code"))?;
        let mut b = [0f64; 4];
        for v in &mut b {
            *v = r.u16("box")? as f64;
        }
        let bytes = r.take((height * width).div_ceil(8), "mask")?;
        let bits = (0..height * width).map(|k| bytes[k / 8] & (1 << (k % 8)) != 0).collect();
        objects.push(ObjectRecord {
            shape_kind,
            color,
            size_class,
            gt_box: BBox::new(b[0], b[1], b[2], b[3]),
            gt_mask: Mask::from_vec(height, width, bits),
        });
    }
    let n_tok = r.u8("token count")? as usize;
    let at = r.pos;
    let tokens = r
        .take(n_tok, "tokens")?
        .iter()
        .map(|&id| Token::from_id(id).ok_or_else(|| bad(at, format!("unknown token id {id}"))))
        .collect::<Result<Vec<_>>>()?;
    let at = r.pos;
    let target_index = r.u8("target index")? as usize;
    if target_index >= objects.len() {
        return Err(bad(at, "target index out of range"));
    }
    Ok(Pair {
        id,
        scene: Scene { image, objects, seed },
        expression: Expression { tokens, target_index },
    })
}

fn bad(offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        msg: msg.into(),
    }
}

/// Writes the dataset file and its vocabulary sidecar.
pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode(ds))?;
    std::fs::write(vocab_sidecar_path(path), vocabulary_json())?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset> {
    decode(&std::fs::read(path)?)
}
