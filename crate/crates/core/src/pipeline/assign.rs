//! Center-cell sample assignment for classification and point regression.

use crate::scene::GtScene;
use crate::targets::{quantize, LevelSpec};

/// A positive cell and the object it regresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub object: usize,
}

/// At every level, the cell containing an object's center is positive for
/// that object. When centers collide the smaller-area object wins, then the
/// lower index. Output is ordered by level, then row-major cell.
pub fn assign_training_samples(scene: &GtScene, levels: &[LevelSpec]) -> Vec<Assignment> {
    let mut out = Vec::new();
    for (li, level) in levels.iter().enumerate() {
        let mut owner: Vec<Option<usize>> = vec![None; level.cells()];
        for (oi, obj) in scene.objects.iter().enumerate() {
            let (col, row) = quantize(obj.bbox.center(), level.stride);
            let k = row.min(level.height - 1) * level.width + col.min(level.width - 1);
            let wins = owner[k].is_none_or(|cur| obj.bbox.area() < scene.objects[cur].bbox.area());
            if wins {
                owner[k] = Some(oi);
            }
        }
        out.extend(owner.iter().enumerate().filter_map(|(k, o)| {
            o.map(|object| Assignment {
                level: li,
                row: k / level.width,
                col: k % level.width,
                object,
            })
        }));
    }
    out
}
