//! Procedural RGB-D scenes with exact depth and analytic normals.
//!
//! Scenes are ray cast with an orthographic camera tilted down towards a
//! ground plane at z = 0. Normals are reported in the world frame (ground is
//! `(0, 0, 1)`); [`Camera::to_grid_normal`] converts them into the image-grid
//! convention used by [`normals_from_depth`].

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::Tensor;
use crate::error::{invalid, Error, Result};

pub const NUM_CLASSES: usize = 8;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "spheres", "boxes", "pillars", "steps", "corridor", "mixed", "stacked", "towers",
];

type V3 = [f64; 3];

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}
fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
fn mul(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}
fn normalize(a: V3) -> V3 {
    mul(a, 1.0 / dot(a, a).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    Sphere {
        center: V3,
        radius: f64,
    },
    /// Axis-aligned box.
    Cuboid {
        min: V3,
        max: V3,
    },
    /// Vertical cylinder standing on `z0`.
    Cylinder {
        base: V3,
        radius: f64,
        height: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Hit {
    t: f64,
    normal: V3,
}

impl Primitive {
    fn intersect(&self, o: V3, d: V3) -> Option<Hit> {
        match *self {
            Primitive::Sphere { center, radius } => {
                let oc = sub(o, center);
                let b = dot(oc, d);
                let c = dot(oc, oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                (t > 0.0).then(|| Hit {
                    t,
                    normal: mul(sub(add(o, mul(d, t)), center), 1.0 / radius),
                })
            }
            Primitive::Cuboid { min, max } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis = 0;
                let mut sign = 0.0;
                for a in 0..3 {
                    if d[a].abs() < 1e-12 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = ((min[a] - o[a]) / d[a], (max[a] - o[a]) / d[a]);
                    let mut s = -1.0;
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                        s = 1.0;
                    }
                    if ta > t0 {
                        t0 = ta;
                        axis = a;
                        sign = s;
                    }
                    t1 = t1.min(tb);
                }
                if t0 > t1 || t0 <= 0.0 {
                    return None;
                }
                let mut normal = [0.0; 3];
                normal[axis] = sign;
                Some(Hit { t: t0, normal })
            }
            Primitive::Cylinder {
                base,
                radius,
                height,
            } => {
                let mut best: Option<Hit> = None;
                // side
                let (ox, oy) = (o[0] - base[0], o[1] - base[1]);
                let a = d[0] * d[0] + d[1] * d[1];
                if a > 1e-12 {
                    let b = ox * d[0] + oy * d[1];
                    let c = ox * ox + oy * oy - radius * radius;
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        let t = (-b - disc.sqrt()) / a;
                        let z = o[2] + t * d[2];
                        if t > 0.0 && z >= base[2] && z <= base[2] + height {
                            let p = add(o, mul(d, t));
                            let n = [(p[0] - base[0]) / radius, (p[1] - base[1]) / radius, 0.0];
                            best = Some(Hit { t, normal: n });
                        }
                    }
                }
                // top cap
                if d[2].abs() > 1e-12 {
                    let t = (base[2] + height - o[2]) / d[2];
                    let p = add(o, mul(d, t));
                    let (px, py) = (p[0] - base[0], p[1] - base[1]);
                    if t > 0.0
                        && px * px + py * py <= radius * radius
                        && best.is_none_or(|h| t < h.t)
                    {
                        best = Some(Hit {
                            t,
                            normal: [0.0, 0.0, -d[2].signum()],
                        });
                    }
                }
                best
            }
        }
    }
}

/// Orthographic camera looking at the world origin from above at `tilt` radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub tilt: f64,
    /// World units per pixel.
    pub pixel_size: f64,
    pub size: usize,
    /// Distance from the image plane to the look-at point.
    pub distance: f64,
}

impl Camera {
    pub fn new(tilt: f64, size: usize) -> Self {
        Self {
            tilt,
            pixel_size: 8.0 / size as f64,
            size,
            distance: 10.0,
        }
    }

    pub fn forward(&self) -> V3 {
        [0.0, self.tilt.cos(), -self.tilt.sin()]
    }

    fn right(&self) -> V3 {
        [1.0, 0.0, 0.0]
    }

    /// Image "up" direction in the world.
    fn up(&self) -> V3 {
        [0.0, self.tilt.sin(), self.tilt.cos()]
    }

    /// Ray origin for the centre of pixel `(u, v)` (column, row).
    pub fn ray_origin(&self, u: f64, v: f64) -> V3 {
        let half = self.size as f64 / 2.0;
        let c = mul(self.forward(), -self.distance);
        let c = add(c, mul(self.right(), (u + 0.5 - half) * self.pixel_size));
        add(c, mul(self.up(), (half - v - 0.5) * self.pixel_size))
    }

    /// `(u, v, depth)` of a world point, with `u`, `v` in pixel-centre units.
    pub fn project(&self, p: V3) -> (f64, f64, f64) {
        let half = self.size as f64 / 2.0;
        let rel = sub(p, mul(self.forward(), -self.distance));
        let u = dot(rel, self.right()) / self.pixel_size + half - 0.5;
        let v = half - 0.5 - dot(rel, self.up()) / self.pixel_size;
        (u, v, dot(rel, self.forward()))
    }

    /// World normal → the `(-dz/dx, -dz/dy, 1)` convention of [`normals_from_depth`],
    /// where x runs along columns, y along rows and z is depth.
    pub fn to_grid_normal(&self, n: V3) -> V3 {
        [
            -dot(n, self.right()),
            dot(n, self.up()),
            -dot(n, self.forward()),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub camera: Camera,
    pub light: V3,
    pub ground_color: V3,
    pub fog_color: V3,
    pub fog_density: f64,
    pub objects: Vec<(Primitive, V3)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `[3, h, w]` in [-1, 1].
    pub rgb: Tensor<f32>,
    /// `[1, h, w]` metric depth.
    pub depth: Tensor<f32>,
    /// `[1, h, w]` inverse depth mapped per image to [-1, 1].
    pub disparity: Tensor<f32>,
    /// `[3, h, w]` unit world-frame normals.
    pub normal: Tensor<f32>,
    pub class_id: usize,
    /// `[1, h, w]`, 1 where depth is valid.
    pub valid_mask: Tensor<f32>,
}

/// A rendered sample plus per-pixel object ids (0 = ground, i + 1 = object i).
#[derive(Clone, Debug)]
pub struct Render {
    pub sample: SceneSample,
    pub object_ids: Vec<u16>,
}

/// Class drawn for a dataset seed; uniform over the categories.
pub fn class_for_seed(seed: u64) -> usize {
    ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15).gen_range(0..NUM_CLASSES)
}

fn color(rng: &mut ChaCha8Rng) -> V3 {
    [
        rng.gen_range(0.15..1.0),
        rng.gen_range(0.15..1.0),
        rng.gen_range(0.15..1.0),
    ]
}

/// Random scene layout for a class.
pub fn make_scene(seed: u64, class_id: usize, size: usize) -> Result<Scene> {
    if class_id >= NUM_CLASSES {
        return Err(invalid!("class id {class_id} outside 0..{NUM_CLASSES}"));
    }
    if size != 32 && size != 64 {
        return Err(invalid!("scene size must be 32 or 64, got {size}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tilt = rng.gen_range(35f64..60.0).to_radians();
    let az = rng.gen_range(-2.5..2.5f64);
    let el = rng.gen_range(0.5..1.3f64);
    let light = normalize([az.sin() * el.cos(), -az.cos() * el.cos(), el.sin()]);
    let g = rng.gen_range(0.35..0.65);
    let ground_color = [
        g,
        g * rng.gen_range(0.85..1.1),
        g * rng.gen_range(0.8..1.05),
    ];
    let f = rng.gen_range(0.7..0.95);
    let fog_color = [f, f, f * rng.gen_range(0.95..1.05)];
    let count = rng.gen_range(2..=6usize);
    let mut objects = Vec::with_capacity(count);
    let xy = |rng: &mut ChaCha8Rng| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
    for i in 0..count {
        let c = color(&mut rng);
        let p = xy(&mut rng);
        let kind = match class_id {
            5 => rng.gen_range(0..3),
            0 => 0,
            1 => 1,
            2 => 2,
            _ => 9,
        };
        let prim = match (class_id, kind) {
            (_, 0) => {
                let r = rng.gen_range(0.5..1.3);
                Primitive::Sphere {
                    center: [p[0], p[1], r],
                    radius: r,
                }
            }
            (_, 1) => {
                let (w, d, h) = (
                    rng.gen_range(0.5..1.5),
                    rng.gen_range(0.5..1.5),
                    rng.gen_range(0.4..1.6),
                );
                Primitive::Cuboid {
                    min: [p[0] - w, p[1] - d, 0.0],
                    max: [p[0] + w, p[1] + d, h],
                }
            }
            (_, 2) => Primitive::Cylinder {
                base: [p[0], p[1], 0.0],
                radius: rng.gen_range(0.3..0.7),
                height: rng.gen_range(1.5..3.5),
            },
            (3, _) => {
                // staircase rising away from the camera
                let step = 6.0 / count as f64;
                let y0 = -3.0 + i as f64 * step;
                Primitive::Cuboid {
                    min: [-3.5, y0, 0.0],
                    max: [3.5, y0 + step, 0.35 * (i + 1) as f64],
                }
            }
            (4, _) => {
                // walls on both sides, obstacles in between
                let h = rng.gen_range(1.5..2.5);
                match i {
                    0 => Primitive::Cuboid {
                        min: [-4.5, -6.0, 0.0],
                        max: [-2.5, 6.0, h],
                    },
                    1 => Primitive::Cuboid {
                        min: [2.5, -6.0, 0.0],
                        max: [4.5, 6.0, h],
                    },
                    _ => {
                        let x = rng.gen_range(-1.8..1.8);
                        Primitive::Cuboid {
                            min: [x - 0.4, p[1] - 0.4, 0.0],
                            max: [x + 0.4, p[1] + 0.4, 0.8],
                        }
                    }
                }
            }
            (6, _) => {
                // spheres resting on boxes
                let w = rng.gen_range(0.6..1.2);
                let h = rng.gen_range(0.4..1.2);
                if i % 2 == 0 {
                    Primitive::Cuboid {
                        min: [p[0] - w, p[1] - w, 0.0],
                        max: [p[0] + w, p[1] + w, h],
                    }
                } else {
                    let (prev, _) = objects[i - 1];
                    let Primitive::Cuboid { min, max } = prev else {
                        unreachable!()
                    };
                    let r = 0.5 * (max[0] - min[0]).min(max[1] - min[1]);
                    let cx = 0.5 * (min[0] + max[0]);
                    let cy = 0.5 * (min[1] + max[1]);
                    Primitive::Sphere {
                        center: [cx, cy, max[2] + r],
                        radius: r,
                    }
                }
            }
            (7, _) => {
                // a tower of shrinking boxes
                let base = [0.0, 0.0];
                let w = 1.6 - 0.2 * i as f64;
                let lvl = 0.8;
                Primitive::Cuboid {
                    min: [base[0] - w, base[1] - w, lvl * i as f64],
                    max: [base[0] + w, base[1] + w, lvl * (i + 1) as f64],
                }
            }
            _ => unreachable!(),
        };
        objects.push((prim, c));
    }
    Ok(Scene {
        camera: Camera::new(tilt, size),
        light,
        ground_color,
        fog_color,
        fog_density: rng.gen_range(0.08..0.15),
        objects,
    })
}

/// Ray casts a scene.
pub fn render(scene: &Scene, class_id: usize) -> Render {
    let cam = scene.camera;
    let n = cam.size;
    let hw = n * n;
    let d = cam.forward();
    let mut rgb = vec![0f32; 3 * hw];
    let mut depth = vec![0f32; hw];
    let mut normal = vec![0f32; 3 * hw];
    let mut ids = vec![0u16; hw];
    let base_depth = cam.distance - 4.0;
    for v in 0..n {
        for u in 0..n {
            let o = cam.ray_origin(u as f64, v as f64);
            // ground plane z = 0
            let mut hit = Hit {
                t: o[2] / -d[2],
                normal: [0.0, 0.0, 1.0],
            };
            let mut albedo = scene.ground_color;
            let mut id = 0u16;
            for (k, (prim, c)) in scene.objects.iter().enumerate() {
                if let Some(h) = prim.intersect(o, d) {
                    if h.t < hit.t {
                        hit = h;
                        albedo = *c;
                        id = k as u16 + 1;
                    }
                }
            }
            let i = v * n + u;
            let shade = 0.35 + 0.65 * dot(hit.normal, scene.light).max(0.0);
            let fog = 1.0 - (-scene.fog_density * (hit.t - base_depth).max(0.0)).exp();
            for ch in 0..3 {
                let lit = albedo[ch] * shade;
                let c = lit * (1.0 - fog) + scene.fog_color[ch] * fog;
                rgb[ch * hw + i] = (2.0 * c.clamp(0.0, 1.0) - 1.0) as f32;
                normal[ch * hw + i] = hit.normal[ch] as f32;
            }
            depth[i] = hit.t as f32;
            ids[i] = id;
        }
    }
    let depth = Tensor::new([1, n, n], depth).expect("depth shape");
    Render {
        sample: SceneSample {
            rgb: Tensor::new([3, n, n], rgb).expect("rgb shape"),
            disparity: depth_to_disparity(&depth),
            depth,
            normal: Tensor::new([3, n, n], normal).expect("normal shape"),
            class_id,
            valid_mask: Tensor::ones([1, n, n]),
        },
        object_ids: ids,
    }
}

/// Renders the scene for `(seed, class_id)` at `size` (32 or 64).
pub fn render_scene(seed: u64, class_id: usize, size: usize) -> Result<SceneSample> {
    Ok(render(&make_scene(seed, class_id, size)?, class_id).sample)
}

/// `1/depth`, affinely mapped so the image minimum is -1 and maximum +1.
pub fn depth_to_disparity(depth: &Tensor<f32>) -> Tensor<f32> {
    let inv: Vec<f64> = depth.data().iter().map(|&d| 1.0 / d as f64).collect();
    let lo = inv.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = inv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Tensor::from_fn(depth.shape().to_vec(), |i| {
        if span > 0.0 {
            (2.0 * (inv[i] - lo) / span - 1.0) as f32
        } else {
            0.0
        }
    })
}

/// Unit normals `(-dz/dx, -dz/dy, 1)` from a `[1, h, w]` depth map by central
/// differences, one-sided where a neighbour is outside the image or invalid.
/// `spacing` is the world size of a pixel; pixels with no valid neighbour on
/// either side of an axis get a zero derivative along it.
pub fn normals_from_depth(
    depth: &Tensor<f32>,
    valid: &Tensor<f32>,
    spacing: f64,
) -> Result<Tensor<f32>> {
    let s = depth.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(invalid!("depth must be [1, h, w], got {s:?}"));
    }
    depth.expect_same_shape(valid, "normals_from_depth")?;
    if !(spacing > 0.0) {
        return Err(invalid!("spacing must be positive"));
    }
    let (h, w) = (s[1], s[2]);
    let ok = |r: isize, c: isize| {
        r >= 0
            && c >= 0
            && (r as usize) < h
            && (c as usize) < w
            && valid.data()[r as usize * w + c as usize] > 0.0
    };
    let z = |r: isize, c: isize| depth.data()[r as usize * w + c as usize] as f64;
    // one-sided second-order stencil towards direction `k` when two neighbours are usable
    let one_sided = |r: isize, c: isize, dr: isize, dc: isize| -> f64 {
        if ok(r + 2 * dr, c + 2 * dc) {
            (-3.0 * z(r, c) + 4.0 * z(r + dr, c + dc) - z(r + 2 * dr, c + 2 * dc)) / (2.0 * spacing)
        } else {
            (z(r + dr, c + dc) - z(r, c)) / spacing
        }
    };
    let deriv = |r: isize, c: isize, dr: isize, dc: isize| -> f64 {
        match (ok(r - dr, c - dc), ok(r + dr, c + dc)) {
            (true, true) => (z(r + dr, c + dc) - z(r - dr, c - dc)) / (2.0 * spacing),
            (false, true) => one_sided(r, c, dr, dc),
            (true, false) => -one_sided(r, c, -dr, -dc),
            (false, false) => 0.0,
        }
    };
    let mut out = vec![0f32; 3 * h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let i = r as usize * w + c as usize;
            if !ok(r, c) {
                out[2 * h * w + i] = 1.0;
                continue;
            }
            let n = normalize([-deriv(r, c, 0, 1), -deriv(r, c, 1, 0), 1.0]);
            for ch in 0..3 {
                out[ch * h * w + i] = n[ch] as f32;
            }
        }
    }
    Tensor::new([3, h, w], out)
}

/// Samples for seeds `first_seed..first_seed + n`, classes from [`class_for_seed`].
pub fn generate(n: usize, size: usize, first_seed: u64) -> Result<Vec<SceneSample>> {
    (0..n as u64)
        .map(|i| {
            let seed = first_seed + i;
            render_scene(seed, class_for_seed(seed), size)
        })
        .collect()
}

const MAGIC: &[u8; 5] = b"JDSET";
const VERSION: u32 = 1;

fn planes(s: &SceneSample) -> [&Tensor<f32>; 5] {
    [&s.rgb, &s.depth, &s.disparity, &s.normal, &s.valid_mask]
}

fn encode_sample(s: &SceneSample) -> Result<Vec<u8>> {
    let (h, w) = (s.depth.dim(1), s.depth.dim(2));
    if h > u16::MAX as usize || w > u16::MAX as usize || s.class_id > u16::MAX as usize {
        return Err(invalid!("sample too large for the dataset format"));
    }
    let mut buf = Vec::with_capacity(6 + 9 * h * w * 4);
    buf.extend_from_slice(&(s.class_id as u16).to_le_bytes());
    buf.extend_from_slice(&(h as u16).to_le_bytes());
    buf.extend_from_slice(&(w as u16).to_le_bytes());
    for (t, c) in planes(s).into_iter().zip([3, 1, 1, 3, 1]) {
        if t.shape() != [c, h, w] {
            return Err(invalid!(
                "plane shape {:?}, expected [{c}, {h}, {w}]",
                t.shape()
            ));
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

/// Writes samples atomically (temp file + rename).
pub fn write_dataset(samples: &[SceneSample], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(samples.len()).map_err(|_| invalid!("too many samples"))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for s in samples {
        let rec = encode_sample(s)?;
        buf.extend_from_slice(&rec);
        buf.extend_from_slice(&crc32fast::hash(&rec).to_le_bytes());
    }
    crate::io::write_atomic(path, &buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt(format!(
                "truncated at byte {} (needed {n} more, {} left)",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<SceneSample>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(5)? != MAGIC {
        return Err(Error::Corrupt("bad magic, not a JDSET file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Corrupt(format!(
            "unsupported dataset version {version}"
        )));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for record in 0..count {
        let start = r.pos;
        let class_id = r.u16()? as usize;
        let (h, w) = (r.u16()? as usize, r.u16()? as usize);
        let mut read_plane = |c: usize| -> Result<Tensor<f32>> {
            let raw = r.take(c * h * w * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            Tensor::new([c, h, w], data)
        };
        let rgb = read_plane(3)?;
        let depth = read_plane(1)?;
        let disparity = read_plane(1)?;
        let normal = read_plane(3)?;
        let valid_mask = read_plane(1)?;
        let found = crc32fast::hash(&bytes[start..r.pos]);
        let expected = r.u32()?;
        if found != expected {
            return Err(Error::Checksum {
                record,
                expected,
                found,
            });
        }
        out.push(SceneSample {
            rgb,
            depth,
            disparity,
            normal,
            class_id,
            valid_mask,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after {count} records",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn read_dataset(path: &Path) -> Result<Vec<SceneSample>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_class_and_size() {
        assert!(render_scene(0, 8, 32).is_err());
        assert!(render_scene(0, 0, 48).is_err());
    }

    #[test]
    fn camera_projection_round_trips_ray_origin() {
        let cam = Camera::new(0.7, 32);
        let o = cam.ray_origin(3.0, 20.0);
        let p = add(o, mul(cam.forward(), 7.5));
        let (u, v, d) = cam.project(p);
        assert!((u - 3.0).abs() < 1e-9 && (v - 20.0).abs() < 1e-9 && (d - 7.5).abs() < 1e-9);
    }

    #[test]
    fn cuboid_hit_reports_face_normal() {
        let b = Primitive::Cuboid {
            min: [-1.0, -1.0, 0.0],
            max: [1.0, 1.0, 1.0],
        };
        let h = b.intersect([0.0, 0.0, 5.0], [0.0, 0.0, -1.0]).unwrap();
        assert_eq!(h.normal, [0.0, 0.0, 1.0]);
        assert!((h.t - 4.0).abs() < 1e-12);
        let h = b.intersect([-5.0, 0.0, 0.5], [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(h.normal, [-1.0, 0.0, 0.0]);
    }

    #[test]
    fn cylinder_cap_and_side() {
        let c = Primitive::Cylinder {
            base: [0.0, 0.0, 0.0],
            radius: 1.0,
            height: 2.0,
        };
        let h = c.intersect([0.0, 0.0, 5.0], [0.0, 0.0, -1.0]).unwrap();
        assert_eq!(h.normal, [0.0, 0.0, 1.0]);
        let h = c.intersect([-5.0, 0.0, 1.0], [1.0, 0.0, 0.0]).unwrap();
        assert!((h.t - 4.0).abs() < 1e-12 && (h.normal[0] + 1.0).abs() < 1e-12);
    }
}
