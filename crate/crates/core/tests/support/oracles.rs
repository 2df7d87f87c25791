//! Direct loop implementations of the layers and an exhaustive segment
//! test, for comparison with the optimized code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wlrn::data::{fast_detect_gray, GrayImage, Keypoint};
use wlrn::tensor::{affine, conv2d, maxpool2x2, Tensor};

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Vec<f64> {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h - k) / stride + 1;
    let ow = (wd - k) / stride + 1;
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.data()[o];
                for c in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let xv = x.data()[(c * h + oy * stride + ky) * wd + ox * stride + kx];
                            let wv = w.data()[((o * c_in + c) * k + ky) * k + kx];
                            acc += xv * wv;
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Worst absolute difference of conv, pool and affine against loops.
pub fn layer_worst() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    // the four layer geometries of the network, at reduced width
    let cases = [
        (3, 32, 8, 3, 1),
        (8, 30, 6, 4, 2),
        (6, 14, 5, 3, 1),
        (5, 6, 4, 1, 1),
        (2, 9, 3, 2, 3),
    ];
    for (c_in, side, c_out, k, stride) in cases {
        let x = random_tensor(&[c_in, side, side], &mut rng);
        let w = random_tensor(&[c_out, c_in, k, k], &mut rng);
        let b = random_tensor(&[c_out], &mut rng);
        let got = conv2d(&x, &w, &b, stride).unwrap();
        worst = worst.max(max_abs_diff(got.data(), &naive_conv(&x, &w, &b, stride)));
    }

    let x = random_tensor(&[7, 12, 12], &mut rng);
    let got = maxpool2x2(&x).unwrap();
    assert_eq!(got.shape(), &[7, 6, 6]);
    worst = worst.max(max_abs_diff(got.data(), &naive_maxpool(&x)));

    let x = random_tensor(&[4, 6, 6], &mut rng);
    let w = random_tensor(&[10, 144], &mut rng);
    let b = random_tensor(&[10], &mut rng);
    let got = affine(&x, &w, &b).unwrap();
    let expected: Vec<f64> = (0..10)
        .map(|o| b.data()[o] + (0..144).map(|i| w.data()[o * 144 + i] * x.data()[i]).sum::<f64>())
        .collect();
    worst.max(max_abs_diff(got.data(), &expected))
}

fn naive_maxpool(x: &Tensor) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::new();
    for ch in 0..c {
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.data()[(ch * h + 2 * y + dy) * w + 2 * xx + dx]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

/// Runs the detector and the oracle on `count` random images. Returns the
/// indices of images where they disagree and the number of corners seen.
pub fn fast_disagreements(count: usize) -> (Vec<usize>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut total = 0;
    let mut bad = Vec::new();
    for i in 0..count {
        let img = random_image(&mut rng, if i % 2 == 0 { Some(4) } else { None });
        let t = [0.05, 0.2, 0.4][i % 3];
        let max = if i % 5 == 0 { 10 } else { usize::MAX };
        let got = fast_detect_gray(&img, t, max).unwrap();
        if got != oracle_detect(&img, t, max) {
            bad.push(i);
        }
        total += got.len();
    }
    (bad, total)
}

// Segment-test oracle: evaluates the corner test literally, threshold by
// threshold, counting runs on the doubled circle.

const RING: [(i64, i64); 16] = [
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

fn has_run(flags: &[bool; 16]) -> bool {
    let mut run = 0;
    for i in 0..32 {
        if flags[i % 16] {
            run += 1;
            if run >= 9 {
                return true;
            }
        } else {
            run = 0;
        }
    }
    false
}

/// Largest `c` among the candidate margins such that nine contiguous ring
/// pixels are all at least `c` brighter, or all at least `c` darker.
fn oracle_score(img: &GrayImage, x: usize, y: usize) -> f64 {
    let centre = img.get(x, y);
    let diffs: Vec<f64> = RING
        .iter()
        .map(|&(dx, dy)| img.get((x as i64 + dx) as usize, (y as i64 + dy) as usize) - centre)
        .collect();
    let mut best = f64::NEG_INFINITY;
    for &c in diffs.iter().chain(diffs.iter().map(|d| -d).collect::<Vec<_>>().iter()) {
        let mut brighter = [false; 16];
        let mut darker = [false; 16];
        for k in 0..16 {
            brighter[k] = diffs[k] >= c;
            darker[k] = -diffs[k] >= c;
        }
        if (has_run(&brighter) || has_run(&darker)) && c > best {
            best = c;
        }
    }
    best
}

pub fn oracle_detect(img: &GrayImage, t: f64, max: usize) -> Vec<Keypoint> {
    let (w, h) = (img.width, img.height);
    let score = |x: usize, y: usize| -> Option<f64> {
        if x < 3 || y < 3 || x + 3 >= w || y + 3 >= h {
            return None;
        }
        let s = oracle_score(img, x, y);
        (s > t).then_some(s)
    };
    let mut found = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let Some(s) = score(x, y) else { continue };
            let mut is_max = true;
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    if let Some(o) = score(nx, ny) {
                        if o > s {
                            is_max = false;
                        }
                    }
                }
            }
            if is_max {
                found.push(Keypoint { x, y, score: s });
            }
        }
    }
    // selection by repeated extraction of the best remaining candidate
    let mut out = Vec::new();
    while out.len() < max && !found.is_empty() {
        let mut pick = 0;
        for (i, k) in found.iter().enumerate() {
            let p = &found[pick];
            if k.score > p.score || (k.score == p.score && (k.y, k.x) < (p.y, p.x)) {
                pick = i;
            }
        }
        out.push(found.remove(pick));
    }
    out
}

pub fn random_image(rng: &mut ChaCha8Rng, levels: Option<u32>) -> GrayImage {
    let (w, h) = (rng.random_range(7..=64), rng.random_range(7..=64));
    let data = (0..w * h)
        .map(|_| match levels {
            // few grey levels produce many equal scores
            Some(l) => f64::from(rng.random_range(0..l)) / f64::from(l - 1),
            None => rng.random::<f64>(),
        })
        .collect();
    GrayImage::new(w, h, data).unwrap()
}
