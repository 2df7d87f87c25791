//! FAST-9 corner detection with 3x3 non-maximum suppression.
//!
//! A pixel with intensity `I` is a corner when at least nine contiguous
//! pixels of the 16-pixel Bresenham circle of radius 3 are all brighter than
//! `I + t` or all darker than `I - t`. The score is the largest `t` for which
//! this still holds, i.e. the best nine-pixel arc's smallest margin.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

use super::image::{to_gray, GrayImage};

/// Circle offsets, clockwise from the top.
pub const CIRCLE: [(isize, isize); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

/// Minimum contiguous arc length.
pub const ARC_LENGTH: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: usize,
    pub y: usize,
    pub score: f64,
}

/// Best arc margin at `(x, y)`; the pixel must be at least 3 from the border.
pub fn corner_score(img: &GrayImage, x: usize, y: usize) -> f64 {
    let center = img.get(x, y);
    let mut diffs = [0.0; 16];
    for (d, &(dx, dy)) in diffs.iter_mut().zip(&CIRCLE) {
        *d = img.get(x.wrapping_add_signed(dx), y.wrapping_add_signed(dy)) - center;
    }
    let mut best = f64::NEG_INFINITY;
    for start in 0..16 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for k in 0..ARC_LENGTH {
            let d = diffs[(start + k) % 16];
            lo = lo.min(d);
            hi = hi.max(d);
        }
        // brighter arc: every d > t  <=> min d > t
        // darker arc:   every -d > t <=> -max d > t
        best = best.max(lo).max(-hi);
    }
    best
}

/// Detects FAST-9 corners on the luma of an RGB image.
pub fn fast_detect(image: &Tensor, threshold: f64, max_keypoints: usize) -> Result<Vec<Keypoint>> {
    fast_detect_gray(&to_gray(image)?, threshold, max_keypoints)
}

/// Detects FAST-9 corners, suppresses non-maxima in 3x3 neighbourhoods and
/// returns the strongest `max_keypoints` (ties in row-major order).
pub fn fast_detect_gray(img: &GrayImage, threshold: f64, max_keypoints: usize) -> Result<Vec<Keypoint>> {
    let (w, h) = (img.width, img.height);
    if w < 7 || h < 7 {
        return shape_err(format!("FAST needs at least a 7x7 image, got {w}x{h}"));
    }
    let mut scores = vec![f64::NEG_INFINITY; w * h];
    for y in 3..h - 3 {
        for x in 3..w - 3 {
            let s = corner_score(img, x, y);
            if s > threshold {
                scores[y * w + x] = s;
            }
        }
    }
    let mut keypoints = Vec::new();
    for y in 3..h - 3 {
        for x in 3..w - 3 {
            let s = scores[y * w + x];
            if s == f64::NEG_INFINITY {
                continue;
            }
            let dominated = (y - 1..=y + 1)
                .flat_map(|ny| (x - 1..=x + 1).map(move |nx| (nx, ny)))
                .any(|(nx, ny)| scores[ny * w + nx] > s);
            if !dominated {
                keypoints.push(Keypoint { x, y, score: s });
            }
        }
    }
    // stable sort keeps row-major order among equal scores
    keypoints.sort_by(|a, b| b.score.total_cmp(&a.score));
    keypoints.truncate(max_keypoints);
    Ok(keypoints)
}
