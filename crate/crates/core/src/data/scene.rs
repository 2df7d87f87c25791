//! Procedural multi-view scenes: a random reference rendering plus
//! perspective-warped, photometrically jittered views with known homographies.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::image::bilinear;

/// Rendering and view-synthesis parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    /// Square image side in pixels (at least 256).
    pub size: usize,
    /// Number of textured shapes drawn over the background.
    pub primitives: usize,
    /// Maximum displacement of each image corner, as a fraction of the side.
    pub max_corner_jitter: f64,
    /// Additive brightness offset bound and relative contrast jitter.
    pub photometric_jitter: f64,
    /// Upper bound of the per-view Gaussian noise standard deviation.
    pub max_noise_sigma: f64,
    /// Keep every view geometrically identical to the reference.
    pub identity_warp: bool,
    /// Number of colours shared by every object; 0 draws free colours.
    pub palette_size: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: 512,
            primitives: 24,
            max_corner_jitter: 0.15,
            photometric_jitter: 0.2,
            max_noise_sigma: 0.02,
            identity_warp: false,
            palette_size: 4,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.size < 256 {
            return bad(format!("scene size must be at least 256, got {}", self.size));
        }
        if !(0.0..=0.15).contains(&self.max_corner_jitter) {
            return bad(format!(
                "corner jitter must lie in [0, 0.15], got {}",
                self.max_corner_jitter
            ));
        }
        if !(0.0..=0.2).contains(&self.photometric_jitter) {
            return bad(format!(
                "photometric jitter must lie in [0, 0.2], got {}",
                self.photometric_jitter
            ));
        }
        if !(0.0..=0.02).contains(&self.max_noise_sigma) {
            return bad(format!(
                "noise sigma must lie in [0, 0.02], got {}",
                self.max_noise_sigma
            ));
        }
        Ok(())
    }
}

/// One rendered view of one object.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneImage {
    pub pixels: Tensor,
    pub object_id: u32,
    pub view_id: u32,
    /// Maps reference-view pixel coordinates to this view.
    pub homography: Matrix3<f64>,
}

impl SceneImage {
    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }
}

/// Applies a homography to a point.
pub fn project(h: &Matrix3<f64>, x: f64, y: f64) -> (f64, f64) {
    let p = h * Vector3::new(x, y, 1.0);
    (p.x / p.z, p.y / p.z)
}

/// Homography taking each `src[i]` to `dst[i]` (direct linear transform
/// with `h33 = 1`). `None` for degenerate configurations.
pub fn homography_from_points(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Option<Matrix3<f64>> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for (i, (&(x, y), &(u, v))) in src.iter().zip(dst).enumerate() {
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a.lu().solve(&b)?;
    let m = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0);
    (m.determinant().abs() > 1e-9).then_some(m)
}

type Rgb = [f64; 3];

/// Seed of the shared palette; fixed so that every object and split draws
/// from the same colours.
const PALETTE_SEED: u64 = 0x5eed_c010;

struct Colors(Vec<Rgb>);

impl Colors {
    fn new(palette_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(PALETTE_SEED);
        Self(
            (0..palette_size)
                .map(|_| [rng.random(), rng.random(), rng.random()])
                .collect(),
        )
    }

    fn pick(&self, rng: &mut ChaCha8Rng) -> Rgb {
        if self.0.is_empty() {
            [rng.random(), rng.random(), rng.random()]
        } else {
            self.0[rng.random_range(0..self.0.len())]
        }
    }
}

enum Fill {
    Solid(Rgb),
    Stripes {
        a: Rgb,
        b: Rgb,
        dir: (f64, f64),
        period: f64,
    },
    Checker {
        a: Rgb,
        b: Rgb,
        cell: f64,
    },
}

impl Fill {
    fn random(rng: &mut ChaCha8Rng, colors: &Colors) -> Self {
        let random_color = |rng: &mut ChaCha8Rng| colors.pick(rng);
        match rng.random_range(0..3) {
            0 => Fill::Solid(random_color(rng)),
            1 => {
                let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
                Fill::Stripes {
                    a: random_color(rng),
                    b: random_color(rng),
                    dir: (angle.cos(), angle.sin()),
                    period: rng.random_range(8.0..24.0),
                }
            }
            _ => Fill::Checker {
                a: random_color(rng),
                b: random_color(rng),
                cell: rng.random_range(6.0..16.0),
            },
        }
    }

    fn color(&self, x: f64, y: f64) -> Rgb {
        match self {
            Fill::Solid(c) => *c,
            Fill::Stripes { a, b, dir, period } => {
                let t = (x * dir.0 + y * dir.1) / period;
                if t.rem_euclid(1.0) < 0.5 {
                    *a
                } else {
                    *b
                }
            }
            Fill::Checker { a, b, cell } => {
                let parity = ((x / cell).floor() + (y / cell).floor()) as i64;
                if parity.rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
        }
    }
}

enum Shape {
    Polygon(Vec<(f64, f64)>),
    Ellipse {
        cx: f64,
        cy: f64,
        a: f64,
        b: f64,
        cos: f64,
        sin: f64,
    },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, size: f64) -> Self {
        let cx = rng.random_range(0.0..size);
        let cy = rng.random_range(0.0..size);
        let r = rng.random_range(0.03 * size..0.12 * size);
        if rng.random_bool(0.7) {
            let k = rng.random_range(3..=6);
            let mut angles: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
            angles.sort_by(f64::total_cmp);
            let pts = angles
                .into_iter()
                .map(|t| {
                    let rr = r * rng.random_range(0.5..1.0);
                    (cx + rr * t.cos(), cy + rr * t.sin())
                })
                .collect();
            Shape::Polygon(pts)
        } else {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            Shape::Ellipse {
                cx,
                cy,
                a: r,
                b: r * rng.random_range(0.3..1.0),
                cos: theta.cos(),
                sin: theta.sin(),
            }
        }
    }

    fn bbox(&self) -> (f64, f64, f64, f64) {
        match self {
            Shape::Polygon(pts) => pts.iter().fold(
                (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
                |(x0, y0, x1, y1), &(x, y)| (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
            ),
            Shape::Ellipse { cx, cy, a, .. } => (cx - a, cy - a, cx + a, cy + a),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Polygon(pts) => {
                let mut inside = false;
                let mut j = pts.len() - 1;
                for i in 0..pts.len() {
                    let (xi, yi) = pts[i];
                    let (xj, yj) = pts[j];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
            Shape::Ellipse { cx, cy, a, b, cos, sin } => {
                let dx = x - cx;
                let dy = y - cy;
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
        }
    }
}

fn add_noise(pixels: &mut Tensor, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("positive sigma");
        for v in pixels.data_mut() {
            *v += normal.sample(rng);
        }
    }
    for v in pixels.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

fn render_reference(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let n = cfg.size;
    let size = n as f64;
    let plane = n * n;
    let mut img = vec![0.0; 3 * plane];

    let colors = Colors::new(cfg.palette_size);
    let c0 = colors.pick(rng);
    let c1 = colors.pick(rng);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (gx, gy) = (angle.cos(), angle.sin());
    for y in 0..n {
        for x in 0..n {
            let t = ((x as f64 - size / 2.0) * gx + (y as f64 - size / 2.0) * gy) / size + 0.5;
            let t = t.clamp(0.0, 1.0);
            for c in 0..3 {
                img[c * plane + y * n + x] = c0[c] + (c1[c] - c0[c]) * t;
            }
        }
    }

    for _ in 0..cfg.primitives {
        let shape = Shape::random(rng, size);
        let fill = Fill::random(rng, &colors);
        let (x0, y0, x1, y1) = shape.bbox();
        let xs = x0.floor().max(0.0) as usize..(x1.ceil().max(0.0) as usize + 1).min(n);
        let ys = y0.floor().max(0.0) as usize..(y1.ceil().max(0.0) as usize + 1).min(n);
        for y in ys {
            for x in xs.clone() {
                let (fx, fy) = (x as f64, y as f64);
                if shape.contains(fx, fy) {
                    let col = fill.color(fx, fy);
                    for c in 0..3 {
                        img[c * plane + y * n + x] = col[c];
                    }
                }
            }
        }
    }
    let mut t = Tensor::new(&[3, n, n], img).expect("square rgb");
    let sigma = rng.random_range(0.0..=cfg.max_noise_sigma);
    add_noise(&mut t, sigma, rng);
    t
}

fn random_homography(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    if cfg.identity_warp || cfg.max_corner_jitter == 0.0 {
        return Matrix3::identity();
    }
    let s = (cfg.size - 1) as f64;
    let j = cfg.max_corner_jitter * cfg.size as f64;
    let src = [(0.0, 0.0), (s, 0.0), (s, s), (0.0, s)];
    loop {
        let mut dst = src;
        for p in &mut dst {
            p.0 += rng.random_range(-j..=j);
            p.1 += rng.random_range(-j..=j);
        }
        if let Some(h) = homography_from_points(&src, &dst) {
            return h;
        }
    }
}

fn render_view(reference: &Tensor, h: &Matrix3<f64>, cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let inv = h
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("view homography is singular".into()))?;
    let n = cfg.size;
    let plane = n * n;
    let pj = cfg.photometric_jitter;
    let contrast = 1.0 + rng.random_range(-pj..=pj);
    let brightness = rng.random_range(-pj..=pj);
    let mut out = vec![0.0; 3 * plane];
    for y in 0..n {
        for x in 0..n {
            let (sx, sy) = project(&inv, x as f64, y as f64);
            for c in 0..3 {
                let v = bilinear(reference, c, sx, sy);
                out[c * plane + y * n + x] = (v - 0.5) * contrast + 0.5 + brightness;
            }
        }
    }
    let mut t = Tensor::new(&[3, n, n], out)?;
    let sigma = rng.random_range(0.0..=cfg.max_noise_sigma);
    add_noise(&mut t, sigma, rng);
    Ok(t)
}

/// Renders `num_views` views of one procedurally generated object. View 0 is
/// the reference (identity homography); every further view is a random
/// perspective warp of it with brightness, contrast and noise jitter.
pub fn generate_scene(seed: u64, object_id: u32, num_views: usize, cfg: &SceneConfig) -> Result<Vec<SceneImage>> {
    if num_views < 2 {
        return Err(Error::InvalidArgument(format!(
            "a scene needs at least 2 views, got {num_views}"
        )));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reference = render_reference(cfg, &mut rng);
    let mut views = Vec::with_capacity(num_views);
    views.push(SceneImage {
        pixels: reference.clone(),
        object_id,
        view_id: 0,
        homography: Matrix3::identity(),
    });
    for v in 1..num_views {
        let h = random_homography(cfg, &mut rng);
        let pixels = render_view(&reference, &h, cfg, &mut rng)?;
        views.push(SceneImage {
            pixels,
            object_id,
            view_id: v as u32,
            homography: h,
        });
    }
    Ok(views)
}
