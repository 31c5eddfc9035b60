use super::{Expression, ObjectRecord, Position, Scene, Token};
use crate::{Error, Result};

/// Whether `obj` carries every attribute token (positional words ignored).
pub fn satisfies(tokens: &[Token], obj: &ObjectRecord) -> bool {
    tokens.iter().all(|t| match *t {
        Token::Color(c) => obj.color == c,
        Token::Shape(s) => obj.shape_kind == s,
        Token::Size(s) => obj.size_class == s,
        Token::Position(_) => true,
    })
}

/// Sort key where smaller is "more extreme" for the positional word.
fn extremeness(pos: Position, obj: &ObjectRecord, image_size: (usize, usize)) -> f64 {
    let (cx, cy) = obj.gt_box.center();
    match pos {
        Position::Leftmost => cx,
        Position::Rightmost => -cx,
        Position::Topmost => cy,
        Position::Bottommost => -cy,
        Position::Center => {
            let (h, w) = image_size;
            let (dx, dy) = (cx - w as f64 / 2.0, cy - h as f64 / 2.0);
            dx * dx + dy * dy
        }
    }
}

/// Attribute filter, then each positional word keeps the single most extreme
/// candidate (ties to the lower index). `None` unless exactly one survives.
pub(crate) fn resolve_index(tokens: &[Token], scene: &Scene) -> Option<usize> {
    let size = (scene.image.height, scene.image.width);
    let mut candidates: Vec<usize> = (0..scene.objects.len())
        .filter(|&i| satisfies(tokens, &scene.objects[i]))
        .collect();
    for t in tokens {
        if let Token::Position(p) = *t {
            let best = candidates.iter().copied().min_by(|&a, &b| {
                let ka = extremeness(p, &scene.objects[a], size);
                let kb = extremeness(p, &scene.objects[b], size);
                ka.total_cmp(&kb).then(a.cmp(&b))
            });
            candidates = best.into_iter().collect();
        }
    }
    (candidates.len() == 1).then(|| candidates[0])
}

/// The unique object the expression refers to.
pub fn resolve(expression: &Expression, scene: &Scene) -> Result<usize> {
    resolve_index(&expression.tokens, scene).ok_or_else(|| {
        Error::Integrity(format!(
            "expression {:?} does not identify exactly one object in scene {}",
            expression.text(),
            scene.seed
        ))
    })
}
