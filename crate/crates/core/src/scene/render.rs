//! Scene description and a z-buffer triangle rasterizer.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::camera::CameraPose;
use crate::error::{Error, Result};

pub const CLASS_NAMES: [&str; 6] = ["road", "building", "car", "tree", "person", "terrain"];
pub const NUM_CLASSES: usize = CLASS_NAMES.len();

pub const ROAD: u8 = 0;
pub const BUILDING: u8 = 1;
pub const CAR: u8 = 2;
pub const TREE: u8 = 3;
pub const PERSON: u8 = 4;
pub const TERRAIN: u8 = 5;

pub const DEFAULT_PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [96, 96, 104],
    [176, 124, 92],
    [196, 48, 52],
    [52, 132, 60],
    [224, 184, 72],
    [124, 156, 84],
];

const NEAR: f64 = 0.05;
const SUN: [f64; 3] = [0.35, 0.25, 0.9];
const AMBIENT: f64 = 0.45;
const DIFFUSE: f64 = 0.55;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    /// Axis-aligned box resting on the ground.
    Box,
    /// Vertical rectangle that turns to face the camera.
    Billboard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub class: u8,
    /// Center of the footprint on the ground.
    pub position: [f64; 3],
    /// Extent along x, y and z. Billboards use x as width and z as height.
    pub size: [f64; 3],
    pub color: [u8; 3],
}

impl SceneObject {
    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let [x, y, z] = self.position;
        let [sx, sy, sz] = self.size;
        ([x - sx / 2.0, y - sy / 2.0, z], [x + sx / 2.0, y + sy / 2.0, z + sz])
    }

    fn contains(&self, p: &Vector3<f64>) -> bool {
        if self.shape != Shape::Box {
            return false;
        }
        let (lo, hi) = self.bounds();
        (0..3).all(|k| p[k] > lo[k] && p[k] < hi[k])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Appearance {
    /// Lambertian shading from a fixed sun; off gives flat object colors.
    pub shading: bool,
    /// Distance at which haze reaches 1 − 1/e; zero disables haze.
    pub haze_distance: f64,
    pub haze_color: [u8; 3],
    /// Standard deviation of per-pixel Gaussian color noise, in 0..255 units.
    pub noise_sigma: f64,
}

impl Default for Appearance {
    fn default() -> Self {
        Self {
            shading: true,
            haze_distance: 0.0,
            haze_color: [200, 208, 220],
            noise_sigma: 0.0,
        }
    }
}

impl Appearance {
    pub fn flat() -> Self {
        Self {
            shading: false,
            haze_distance: 0.0,
            haze_color: [0, 0, 0],
            noise_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Half-size of the populated square; objects lie in [−extent, extent]².
    pub extent: f64,
    /// The road is the strip |y| < road_half_width; the rest of the ground is terrain.
    pub road_half_width: f64,
    /// Half-size of the ground plane and of the terrain walls that enclose it.
    pub world_half_size: f64,
    pub wall_height: f64,
    pub objects: Vec<SceneObject>,
    pub class_palette: Vec<[u8; 3]>,
    pub seed: u64,
    /// (width, height) in pixels.
    pub resolution: (usize, usize),
    pub appearance: Appearance,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_palette.len() != NUM_CLASSES {
            return Err(Error::InvalidConfig(format!(
                "palette has {} colors, expected {NUM_CLASSES}",
                self.class_palette.len()
            )));
        }
        let (w, h) = self.resolution;
        if w == 0 || h == 0 {
            return Err(Error::InvalidConfig("resolution must be positive".into()));
        }
        for o in &self.objects {
            if o.class as usize >= NUM_CLASSES {
                return Err(Error::InvalidConfig(format!("unknown class {}", o.class)));
            }
            let (lo, hi) = o.bounds();
            if lo[0] < -self.extent || lo[1] < -self.extent || hi[0] > self.extent || hi[1] > self.extent {
                return Err(Error::InvalidConfig(format!("object outside scene extent: {o:?}")));
            }
        }
        Ok(())
    }

    /// Classes that appear in the scene: every object class plus road and terrain.
    pub fn declared_classes(&self) -> [bool; NUM_CLASSES] {
        let mut out = [false; NUM_CLASSES];
        out[ROAD as usize] = true;
        out[TERRAIN as usize] = true;
        for o in &self.objects {
            out[o.class as usize] = true;
        }
        out
    }
}

/// A rendered view: interleaved RGB bytes and one class index per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct View {
    pub width: usize,
    pub height: usize,
    pub image: Vec<u8>,
    pub mask: Vec<u8>,
}

struct Triangle {
    v: [Vector3<f64>; 3],
    class: u8,
    /// Base color after shading, before haze and noise.
    color: [f64; 3],
}

fn shade(color: [u8; 3], normal: Vector3<f64>, appearance: &Appearance) -> [f64; 3] {
    let factor = if appearance.shading {
        let sun = Vector3::from(SUN).normalize();
        AMBIENT + DIFFUSE * normal.dot(&sun).max(0.0)
    } else {
        1.0
    };
    color.map(|c| c as f64 * factor)
}

fn push_quad(
    out: &mut Vec<Triangle>,
    q: [Vector3<f64>; 4],
    normal: Vector3<f64>,
    class: u8,
    color: [u8; 3],
    app: &Appearance,
) {
    let color = shade(color, normal, app);
    out.push(Triangle {
        v: [q[0], q[1], q[2]],
        class,
        color,
    });
    out.push(Triangle {
        v: [q[0], q[2], q[3]],
        class,
        color,
    });
}

fn push_box(out: &mut Vec<Triangle>, lo: [f64; 3], hi: [f64; 3], class: u8, color: [u8; 3], app: &Appearance) {
    let p = |x: f64, y: f64, z: f64| Vector3::new(x, y, z);
    let [x0, y0, z0] = lo;
    let [x1, y1, z1] = hi;
    let faces = [
        (
            [p(x0, y0, z1), p(x1, y0, z1), p(x1, y1, z1), p(x0, y1, z1)],
            p(0.0, 0.0, 1.0),
        ),
        (
            [p(x1, y0, z0), p(x1, y1, z0), p(x1, y1, z1), p(x1, y0, z1)],
            p(1.0, 0.0, 0.0),
        ),
        (
            [p(x0, y0, z0), p(x0, y1, z0), p(x0, y1, z1), p(x0, y0, z1)],
            p(-1.0, 0.0, 0.0),
        ),
        (
            [p(x0, y1, z0), p(x1, y1, z0), p(x1, y1, z1), p(x0, y1, z1)],
            p(0.0, 1.0, 0.0),
        ),
        (
            [p(x0, y0, z0), p(x1, y0, z0), p(x1, y0, z1), p(x0, y0, z1)],
            p(0.0, -1.0, 0.0),
        ),
    ];
    for (quad, normal) in faces {
        push_quad(out, quad, normal, class, color, app);
    }
}

fn scene_triangles(scene: &SceneConfig, camera_center: &Vector3<f64>) -> Vec<Triangle> {
    let app = &scene.appearance;
    let pal = &scene.class_palette;
    let mut tris = Vec::new();
    let up = Vector3::new(0.0, 0.0, 1.0);
    let (l, w) = (scene.world_half_size, scene.road_half_width);
    let g = |x: f64, y: f64| Vector3::new(x, y, 0.0);

    // Ground partitioned into road and two terrain strips so nothing is coplanar.
    push_quad(
        &mut tris,
        [g(-l, -w), g(l, -w), g(l, w), g(-l, w)],
        up,
        ROAD,
        pal[ROAD as usize],
        app,
    );
    push_quad(
        &mut tris,
        [g(-l, w), g(l, w), g(l, l), g(-l, l)],
        up,
        TERRAIN,
        pal[TERRAIN as usize],
        app,
    );
    push_quad(
        &mut tris,
        [g(-l, -l), g(l, -l), g(l, -w), g(-l, -w)],
        up,
        TERRAIN,
        pal[TERRAIN as usize],
        app,
    );

    // Terrain walls around the world stand in for distant hills; they are lit
    // like the ground so that terrain keeps one appearance.
    let h = scene.wall_height;
    let t = |x: f64, y: f64, z: f64| Vector3::new(x, y, z);
    let terrain = pal[TERRAIN as usize];
    push_quad(
        &mut tris,
        [t(l, -l, 0.0), t(l, l, 0.0), t(l, l, h), t(l, -l, h)],
        up,
        TERRAIN,
        terrain,
        app,
    );
    push_quad(
        &mut tris,
        [t(-l, -l, 0.0), t(-l, l, 0.0), t(-l, l, h), t(-l, -l, h)],
        up,
        TERRAIN,
        terrain,
        app,
    );
    push_quad(
        &mut tris,
        [t(-l, l, 0.0), t(l, l, 0.0), t(l, l, h), t(-l, l, h)],
        up,
        TERRAIN,
        terrain,
        app,
    );
    push_quad(
        &mut tris,
        [t(-l, -l, 0.0), t(l, -l, 0.0), t(l, -l, h), t(-l, -l, h)],
        up,
        TERRAIN,
        terrain,
        app,
    );

    for o in &scene.objects {
        match o.shape {
            Shape::Box => {
                let (lo, hi) = o.bounds();
                push_box(&mut tris, lo, hi, o.class, o.color, app);
            }
            Shape::Billboard => {
                let base = Vector3::from(o.position);
                let mut normal = camera_center - base;
                normal[2] = 0.0;
                let normal = if normal.norm() < 1e-9 {
                    Vector3::x()
                } else {
                    normal.normalize()
                };
                let side = Vector3::new(-normal[1], normal[0], 0.0) * (o.size[0] / 2.0);
                let top = Vector3::new(0.0, 0.0, o.size[2]);
                // Sprites are unlit: shading them with a view-dependent normal
                // would tie their color to the camera rather than the scene.
                push_quad(
                    &mut tris,
                    [base - side, base + side, base + side + top, base - side + top],
                    up,
                    o.class,
                    o.color,
                    app,
                );
            }
        }
    }
    tris
}

/// Sutherland–Hodgman clip of a camera-space polygon against z ≥ NEAR.
fn clip_near(poly: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let (ina, inb) = (a[2] >= NEAR, b[2] >= NEAR);
        if ina {
            out.push(a);
        }
        if ina != inb {
            let s = (NEAR - a[2]) / (b[2] - a[2]);
            out.push(a + (b - a) * s);
        }
    }
    out
}

fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// Renders `scene` from `pose`. The mask holds the class of the nearest
/// surface; pixels that hit nothing fall back to terrain.
pub fn render(scene: &SceneConfig, pose: &CameraPose) -> Result<View> {
    scene.validate()?;
    pose.validate()?;
    let center = pose.center();
    if center[2] <= 0.0 || scene.objects.iter().any(|o| o.contains(&center)) {
        return Err(Error::CameraInsideGeometry);
    }
    let (width, height) = scene.resolution;
    let k = &pose.intrinsics;
    let app = &scene.appearance;

    let n = width * height;
    let mut inv_depth = vec![0.0_f64; n];
    let mut color = vec![[0.0_f64; 3]; n];
    let mut mask = vec![TERRAIN; n];
    let bg = scene.class_palette[TERRAIN as usize].map(f64::from);
    color.fill(bg);

    for tri in scene_triangles(scene, &center) {
        let cam: Vec<Vector3<f64>> = tri.v.iter().map(|p| pose.to_camera(p)).collect();
        let poly = clip_near(&cam);
        if poly.len() < 3 {
            continue;
        }
        let proj: Vec<((f64, f64), f64)> = poly
            .iter()
            .map(|p| {
                let u = k[(0, 0)] * p[0] / p[2] + k[(0, 1)] * p[1] / p[2] + k[(0, 2)];
                let v = k[(1, 1)] * p[1] / p[2] + k[(1, 2)];
                ((u, v), 1.0 / p[2])
            })
            .collect();
        for f in 1..proj.len() - 1 {
            let (a, b, c) = (proj[0], proj[f], proj[f + 1]);
            let area = edge(a.0, b.0, c.0);
            if area.abs() < 1e-12 {
                continue;
            }
            let xs = [a.0 .0, b.0 .0, c.0 .0];
            let ys = [a.0 .1, b.0 .1, c.0 .1];
            let x_lo = xs.iter().copied().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
            let y_lo = ys.iter().copied().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
            let x_hi = (xs
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
                .ceil()
                .min(width as f64))
            .max(0.0) as usize;
            let y_hi = (ys
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
                .ceil()
                .min(height as f64))
            .max(0.0) as usize;
            for py in y_lo..y_hi {
                for px in x_lo..x_hi {
                    let p = (px as f64 + 0.5, py as f64 + 0.5);
                    let w0 = edge(b.0, c.0, p) / area;
                    let w1 = edge(c.0, a.0, p) / area;
                    let w2 = edge(a.0, b.0, p) / area;
                    if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                        continue;
                    }
                    let iz = w0 * a.1 + w1 * b.1 + w2 * c.1;
                    let at = py * width + px;
                    if iz > inv_depth[at] {
                        inv_depth[at] = iz;
                        mask[at] = tri.class;
                        color[at] = tri.color;
                    }
                }
            }
        }
    }

    let mut noise_rng = ChaCha8Rng::seed_from_u64(view_seed(scene.seed, pose));
    let noise = Normal::new(0.0, app.noise_sigma.max(0.0)).expect("finite sigma");
    let haze = app.haze_color.map(f64::from);
    let mut image = Vec::with_capacity(3 * n);
    for at in 0..n {
        let mut c = color[at];
        if app.haze_distance > 0.0 {
            let depth = if inv_depth[at] > 0.0 {
                1.0 / inv_depth[at]
            } else {
                f64::INFINITY
            };
            let h = 1.0 - (-depth / app.haze_distance).exp();
            for ch in 0..3 {
                c[ch] = c[ch] * (1.0 - h) + haze[ch] * h;
            }
        }
        for value in c {
            let jitter = if app.noise_sigma > 0.0 {
                noise.sample(&mut noise_rng)
            } else {
                0.0
            };
            image.push((value + jitter).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(View {
        width,
        height,
        image,
        mask,
    })
}

/// Noise stream for one (scene, pose) pair.
fn view_seed(scene_seed: u64, pose: &CameraPose) -> u64 {
    let mut h = scene_seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in pose.translation.iter().chain(pose.rotation.iter()) {
        h = (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01B3).rotate_left(17);
    }
    h
}
