//! Synthetic electroluminescence-style cell images and defect stamping.
//!
//! Cells are a mid-gray noisy field with two dark vertical busbars and
//! faint horizontal finger lines. Defects are regions that went dark:
//!
//! | kind                  | shape                                   | area (px) | level |
//! |-----------------------|-----------------------------------------|-----------|-------|
//! | crack                 | 2-px wide jagged 4-connected walk       | 30..=80   | 0.15  |
//! | microcrack            | 1-px jagged walk                        | 8..=25    | 0.22  |
//! | finger interruption   | 1-px tall dash on a finger line         | 4..=12    | 0.30  |
//! | black spot            | filled disk, radius 2..=5               | 13..=81   | 0.12  |
//! | bad soldering         | mottled blotch grown from a cell corner | 100..=400 | 0.10  |
//!
//! Levels are for a defect on the plain field. Darkening is a ratio against
//! the field level, so a defect on a busbar keeps its contrast.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::catalog::DefectKind;
use super::DataError;
use crate::mask::Mask;
use crate::tensor::Tensor;

pub const MIN_SIDE: usize = 32;
const FIELD_LEVEL: f32 = 0.55;
const FIELD_NOISE: f32 = 0.08;
const BUSBAR_FACTOR: f32 = 0.55;
const FINGER_FACTOR: f32 = 0.9;
/// Finger lines sit on rows with `y % FINGER_PITCH == FINGER_PHASE`.
pub const FINGER_PITCH: usize = 4;
pub const FINGER_PHASE: usize = 2;
const PLACEMENT_ATTEMPTS: usize = 100;

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Columns covered by the two busbars of a `width`-wide cell.
pub fn busbar_columns(width: usize) -> Vec<usize> {
    let bar = (width / 24).max(2);
    [width * 3 / 10, width * 7 / 10]
        .into_iter()
        .flat_map(|c| c..c + bar)
        .collect()
}

/// Defect-free cell of size `height x width` as a `[1, H, W]` tensor in `[0, 1]`.
pub fn gen_background(seed: u64, height: usize, width: usize) -> Result<Tensor, DataError> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(DataError::Config(format!(
            "cell must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}"
        )));
    }
    let mut rng = rng_from(seed);
    let bars = busbar_columns(width);
    let mut img = Tensor::zeros(&[1, height, width]);
    let data = img.data_mut();
    for y in 0..height {
        for x in 0..width {
            let mut v = FIELD_LEVEL + rng.gen_range(-FIELD_NOISE..FIELD_NOISE);
            if y % FINGER_PITCH == FINGER_PHASE {
                v *= FINGER_FACTOR;
            }
            if bars.contains(&x) {
                v *= BUSBAR_FACTOR;
            }
            data[y * width + x] = v.clamp(0.05, 1.0);
        }
    }
    Ok(img)
}

/// A defect that was stamped into a sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StampedDefect {
    pub kind: DefectKind,
    /// Flat pixel indices, in generation order.
    pub pixels: Vec<usize>,
}

fn dark_level(kind: DefectKind) -> f32 {
    match kind {
        DefectKind::Crack => 0.15,
        DefectKind::Microcrack => 0.22,
        DefectKind::FingerInterruption => 0.30,
        DefectKind::BlackSpot => 0.12,
        DefectKind::BadSoldering => 0.10,
    }
}

/// Half-width of the per-pixel darkness jitter. Bad soldering is mottled
/// rather than flat.
fn jitter(kind: DefectKind) -> f32 {
    match kind {
        DefectKind::BadSoldering => 0.05,
        _ => 0.03,
    }
}

/// Area range for each defect kind.
pub fn area_range(kind: DefectKind) -> (usize, usize) {
    match kind {
        DefectKind::Crack => (30, 80),
        DefectKind::Microcrack => (8, 25),
        DefectKind::FingerInterruption => (4, 12),
        DefectKind::BlackSpot => (13, 81),
        DefectKind::BadSoldering => (100, 400),
    }
}

/// Jagged 4-connected walk of exactly `area` pixels; `None` if it leaves
/// the image.
fn walk(rng: &mut ChaCha8Rng, h: usize, w: usize, area: usize, thick: bool) -> Option<Vec<(usize, usize)>> {
    let mut y = rng.gen_range(2..h - 2) as isize;
    let mut x = rng.gen_range(2..w - 2) as isize;
    let vertical = rng.gen_bool(0.5);
    let main = if rng.gen_bool(0.5) { 1 } else { -1 };
    let drift = if rng.gen_bool(0.5) { 1 } else { -1 };
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(area + 2);
    let in_bounds = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
    while out.len() < area {
        if !in_bounds(y, x) {
            return None;
        }
        if seen.insert((y, x)) {
            out.push((y as usize, x as usize));
        }
        if thick {
            let (ty, tx) = if vertical { (y, x + 1) } else { (y + 1, x) };
            if !in_bounds(ty, tx) {
                return None;
            }
            if seen.insert((ty, tx)) {
                out.push((ty as usize, tx as usize));
            }
        }
        let along = rng.gen_bool(0.65);
        let side = if rng.gen_bool(0.75) { drift } else { -drift };
        match (vertical, along) {
            (true, true) => y += main,
            (true, false) => x += side,
            (false, true) => x += main,
            (false, false) => y += side,
        }
    }
    out.truncate(area);
    Some(out)
}

fn disk(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<(usize, usize)> {
    let r = rng.gen_range(2..=5usize);
    let cy = rng.gen_range(r..h - r) as isize;
    let cx = rng.gen_range(r..w - r) as isize;
    let r = r as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push(((cy + dy) as usize, (cx + dx) as usize));
            }
        }
    }
    out
}

fn dash(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<(usize, usize)> {
    let len = rng.gen_range(4..=12usize);
    let lines: Vec<usize> = (0..h).filter(|y| y % FINGER_PITCH == FINGER_PHASE).collect();
    let y = lines[rng.gen_range(0..lines.len())];
    let x0 = rng.gen_range(0..=w - len);
    (x0..x0 + len).map(|x| (y, x)).collect()
}

/// Eden growth from a point near a random corner, confined to that corner's
/// quadrant.
fn corner_blotch(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<(usize, usize)> {
    let (lo, hi) = area_range(DefectKind::BadSoldering);
    let area = rng.gen_range(lo..=hi);
    let (top, left) = (rng.gen_bool(0.5), rng.gen_bool(0.5));
    let ay = rng.gen_range(0..6usize);
    let ax = rng.gen_range(0..6usize);
    let start = (if top { ay } else { h - 1 - ay }, if left { ax } else { w - 1 - ax });
    let in_quadrant = |(y, x): (usize, usize)| (y < h / 2) == top && (x < w / 2) == left;
    let mut seen = HashSet::from([start]);
    let mut out = vec![start];
    let mut frontier = Vec::new();
    let push_neighbours = |p: (usize, usize), frontier: &mut Vec<(usize, usize)>| {
        let (y, x) = p;
        if y > 0 {
            frontier.push((y - 1, x));
        }
        if y + 1 < h {
            frontier.push((y + 1, x));
        }
        if x > 0 {
            frontier.push((y, x - 1));
        }
        if x + 1 < w {
            frontier.push((y, x + 1));
        }
    };
    push_neighbours(start, &mut frontier);
    while out.len() < area && !frontier.is_empty() {
        let p = frontier.swap_remove(rng.gen_range(0..frontier.len()));
        if !in_quadrant(p) || !seen.insert(p) {
            continue;
        }
        out.push(p);
        push_neighbours(p, &mut frontier);
    }
    out
}

fn candidate(rng: &mut ChaCha8Rng, kind: DefectKind, h: usize, w: usize) -> Option<Vec<(usize, usize)>> {
    match kind {
        DefectKind::Crack | DefectKind::Microcrack => {
            let (lo, hi) = area_range(kind);
            let area = rng.gen_range(lo..=hi);
            walk(rng, h, w, area, kind == DefectKind::Crack)
        }
        DefectKind::FingerInterruption => Some(dash(rng, h, w)),
        DefectKind::BlackSpot => Some(disk(rng, h, w)),
        DefectKind::BadSoldering => Some(corner_blotch(rng, h, w)),
    }
}

/// `true` if no candidate pixel is foreground or 4-adjacent to foreground.
fn fits(mask: &Mask, pixels: &[(usize, usize)]) -> bool {
    let (h, w) = mask.dims();
    pixels.iter().all(|&(y, x)| {
        let mut neighbourhood = vec![(y, x)];
        if y > 0 {
            neighbourhood.push((y - 1, x));
        }
        if y + 1 < h {
            neighbourhood.push((y + 1, x));
        }
        if x > 0 {
            neighbourhood.push((y, x - 1));
        }
        if x + 1 < w {
            neighbourhood.push((y, x + 1));
        }
        neighbourhood.into_iter().all(|(yy, xx)| mask.get(yy, xx) == 0)
    })
}

/// Stamps one defect of `kind` using a generator already in flight.
pub fn stamp_with(
    rng: &mut ChaCha8Rng,
    image: &mut Tensor,
    mask: &mut Mask,
    kind: DefectKind,
) -> Result<StampedDefect, DataError> {
    let (_, h, w) = image.chw()?;
    if mask.dims() != (h, w) {
        return Err(DataError::DimMismatch {
            image: (h, w),
            mask: mask.dims(),
        });
    }
    for _ in 0..PLACEMENT_ATTEMPTS {
        let Some(pixels) = candidate(rng, kind, h, w) else {
            continue;
        };
        if !fits(mask, &pixels) {
            continue;
        }
        let level = dark_level(kind);
        let data = image.data_mut();
        let mut flat = Vec::with_capacity(pixels.len());
        for (y, x) in pixels {
            let p = y * w + x;
            let old = data[p];
            let target = level + rng.gen_range(-1.0f32..1.0) * jitter(kind);
            data[p] = (old * target / FIELD_LEVEL).min(old * 0.9);
            mask.set(y, x, kind.index());
            flat.push(p);
        }
        return Ok(StampedDefect { kind, pixels: flat });
    }
    Err(DataError::Placement {
        kind,
        attempts: PLACEMENT_ATTEMPTS,
    })
}

/// Stamps one defect of `kind` into `image`/`mask`, darkening exactly the
/// pixels it labels.
pub fn stamp_defect(image: &mut Tensor, mask: &mut Mask, kind: DefectKind, seed: u64) -> Result<StampedDefect, DataError> {
    stamp_with(&mut rng_from(seed), image, mask, kind)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn background_is_deterministic_and_bounded() {
        let a = gen_background(5, 64, 64).unwrap();
        assert_eq!(a, gen_background(5, 64, 64).unwrap());
        assert_ne!(a, gen_background(6, 64, 64).unwrap());
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn busbars_are_darker_than_field() {
        let img = gen_background(11, 64, 64).unwrap();
        let col_mean = |x: usize| (0..64).map(|y| img.data()[y * 64 + x] as f64).sum::<f64>() / 64.0;
        let field: f64 = img.data().iter().map(|&v| v as f64).sum::<f64>() / (64.0 * 64.0);
        for x in busbar_columns(64) {
            assert!(col_mean(x) < field, "column {x}");
        }
    }

    #[test]
    fn rejects_tiny_cells() {
        assert!(matches!(gen_background(0, 16, 64), Err(DataError::Config(_))));
    }

    #[test]
    fn stamp_marks_exactly_darkened_pixels() {
        for kind in DefectKind::ALL {
            for seed in 0..20 {
                let mut img = gen_background(seed, 64, 64).unwrap();
                let before = img.clone();
                let mut mask = Mask::background(64, 64);
                let d = stamp_defect(&mut img, &mut mask, kind, seed + 100).unwrap();
                let (lo, hi) = area_range(kind);
                assert!((lo..=hi).contains(&d.pixels.len()), "{kind:?} area {}", d.pixels.len());
                for p in 0..64 * 64 {
                    let stamped = d.pixels.contains(&p);
                    assert_eq!(mask.data()[p] == kind.index(), stamped);
                    assert_eq!(mask.data()[p] == 0, !stamped);
                    if stamped {
                        assert!(img.data()[p] < before.data()[p]);
                    } else {
                        assert_eq!(img.data()[p], before.data()[p]);
                    }
                }
            }
        }
    }

    #[test]
    fn finger_interruptions_sit_on_finger_lines() {
        let mut img = gen_background(1, 64, 64).unwrap();
        let mut mask = Mask::background(64, 64);
        let d = stamp_defect(&mut img, &mut mask, DefectKind::FingerInterruption, 9).unwrap();
        assert!(d.pixels.iter().all(|p| (p / 64) % FINGER_PITCH == FINGER_PHASE));
    }

    #[test]
    fn crowded_cell_fails_placement() {
        let mut img = gen_background(1, 32, 32).unwrap();
        let mut mask = Mask::new(32, 32, vec![1; 32 * 32]).unwrap();
        let err = stamp_defect(&mut img, &mut mask, DefectKind::BlackSpot, 3).unwrap_err();
        assert!(matches!(err, DataError::Placement { .. }));
    }
}
