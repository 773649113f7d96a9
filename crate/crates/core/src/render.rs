//! Analytic scenes lit by an environment map, baked into a sparse linear
//! operator from environment texels to rendered pixels.
//!
//! Only the upper half of a lat-long map is addressed: directions below the
//! horizon contribute nothing. Because geometry and materials are fixed,
//! rendering is a sparse matrix product and its adjoint is the transpose.
//!
//! Light paths:
//! * diffuse surfaces send cosine-distributed shadow rays; unoccluded rays
//!   splat bilinearly onto the map, occluded rays contribute nothing;
//! * `mirror` surfaces send the single reflected ray;
//! * `specular` surfaces with roughness `r` blend a Phong lobe of exponent
//!   `max(0, 2/r^2 - 2)` (weight `1 - r`) with a Lambertian term (weight `r`).
//!
//! Specular rays that hit a diffuse surface are shaded there (one secondary
//! bounce). Primary rays that miss all geometry are black.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hdr::HdrImage;
use crate::real::Real;

type Vec3 = Vector3<f64>;

const RAY_OFFSET: f64 = 1e-6;
const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaterialKind {
    Diffuse,
    Specular,
    Mirror,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Material {
    pub kind: MaterialKind,
    pub albedo: [f64; 3],
    #[serde(default)]
    pub roughness: f64,
}

impl Material {
    pub fn diffuse(albedo: f64) -> Self {
        Self {
            kind: MaterialKind::Diffuse,
            albedo: [albedo; 3],
            roughness: 1.0,
        }
    }

    pub fn mirror(albedo: f64) -> Self {
        Self {
            kind: MaterialKind::Mirror,
            albedo: [albedo; 3],
            roughness: 0.0,
        }
    }

    /// A specular surface; roughness 0 is treated as a mirror.
    pub fn specular(albedo: f64, roughness: f64) -> Self {
        Self {
            kind: MaterialKind::Specular,
            albedo: [albedo; 3],
            roughness,
        }
    }

    /// Fraction of the reflectance that is Lambertian.
    pub fn diffuse_fraction(&self) -> f64 {
        match self.kind {
            MaterialKind::Diffuse => 1.0,
            MaterialKind::Mirror => 0.0,
            MaterialKind::Specular => self.roughness,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.roughness) {
            return Err(Error::Config(format!(
                "roughness {} outside [0, 1]",
                self.roughness
            )));
        }
        if self.albedo.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(Error::Config(format!(
                "albedo {:?} must be finite and >= 0",
                self.albedo
            )));
        }
        Ok(())
    }
}

/// Phong exponent for a roughness in `(0, 1]`.
pub fn phong_exponent(roughness: f64) -> f64 {
    (2.0 / (roughness * roughness) - 2.0).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    /// Vertical field of view in degrees.
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
    pub material: Material,
}

/// The infinite plane `y = height` facing up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ground {
    pub height: f64,
    pub material: Material,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub camera: Camera,
    #[serde(default, rename = "sphere")]
    pub spheres: Vec<Sphere>,
    #[serde(default)]
    pub ground: Option<Ground>,
}

impl Scene {
    /// Sphere of radius 1 resting on a diffuse floor, seen from slightly
    /// above. Roughness 0 gives a mirror sphere.
    pub fn desk(roughness: f64) -> Self {
        let material = if roughness == 0.0 {
            Material::mirror(0.9)
        } else {
            Material::specular(0.9, roughness)
        };
        Self {
            camera: Camera {
                position: [0.0, 1.2, 4.0],
                look_at: [0.0, 1.0, 0.0],
                up: [0.0, 1.0, 0.0],
                fov_deg: 45.0,
                width: 64,
                height: 64,
            },
            spheres: vec![Sphere {
                center: [0.0, 1.0, 0.0],
                radius: 1.0,
                material,
            }],
            ground: Some(Ground {
                height: 0.0,
                material: Material::diffuse(0.8),
            }),
        }
    }

    pub fn with_resolution(mut self, width: usize, height: usize) -> Self {
        self.camera.width = width;
        self.camera.height = height;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.camera;
        if !(c.fov_deg > 0.0 && c.fov_deg < 180.0) {
            return Err(Error::Config(format!(
                "field of view {} outside (0, 180)",
                c.fov_deg
            )));
        }
        if c.width == 0 || c.height == 0 {
            return Err(Error::Config(format!(
                "render size {}x{}",
                c.width, c.height
            )));
        }
        let forward = Vec3::from(c.look_at) - Vec3::from(c.position);
        if forward.norm() == 0.0 || forward.cross(&Vec3::from(c.up)).norm() == 0.0 {
            return Err(Error::Config(
                "camera look-at and up vectors are degenerate".into(),
            ));
        }
        for s in &self.spheres {
            if !(s.radius > 0.0) {
                return Err(Error::Config(format!(
                    "sphere radius {} must be > 0",
                    s.radius
                )));
            }
            s.material.validate()?;
        }
        if let Some(g) = &self.ground {
            g.material.validate()?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let scene: Scene =
            toml::from_str(text).map_err(|e| Error::Config(format!("scene: {e}")))?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene serialises")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    fn primary_ray(&self, pixel: usize) -> (Vec3, Vec3) {
        let c = &self.camera;
        let origin = Vec3::from(c.position);
        let forward = (Vec3::from(c.look_at) - origin).normalize();
        let right = forward.cross(&Vec3::from(c.up)).normalize();
        let up = right.cross(&forward);
        let half = (c.fov_deg.to_radians() / 2.0).tan();
        let aspect = c.width as f64 / c.height as f64;
        let (px, py) = ((pixel % c.width) as f64, (pixel / c.width) as f64);
        let sx = (2.0 * (px + 0.5) / c.width as f64 - 1.0) * half * aspect;
        let sy = (1.0 - 2.0 * (py + 0.5) / c.height as f64) * half;
        (origin, (forward + right * sx + up * sy).normalize())
    }

    fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for s in &self.spheres {
            let center = Vec3::from(s.center);
            let oc = origin - center;
            let b = oc.dot(dir);
            let c = oc.norm_squared() - s.radius * s.radius;
            let disc = b * b - c;
            if disc < 0.0 {
                continue;
            }
            let root = disc.sqrt();
            let t = if -b - root > RAY_OFFSET {
                -b - root
            } else {
                -b + root
            };
            if t > RAY_OFFSET && best.as_ref().is_none_or(|h| t < h.t) {
                let point = origin + dir * t;
                best = Some(Hit {
                    t,
                    point,
                    normal: (point - center) / s.radius,
                    material: s.material,
                });
            }
        }
        if let Some(g) = &self.ground {
            if dir.y != 0.0 {
                let t = (g.height - origin.y) / dir.y;
                if t > RAY_OFFSET && best.as_ref().is_none_or(|h| t < h.t) {
                    best = Some(Hit {
                        t,
                        point: origin + dir * t,
                        normal: Vec3::y(),
                        material: g.material,
                    });
                }
            }
        }
        best
    }
}

struct Hit {
    t: f64,
    point: Vec3,
    normal: Vec3,
    material: Material,
}

/// Lat-long coordinates of a unit direction. `v <= 0.5` is the upper
/// hemisphere.
pub fn dir_to_uv(dir: [f64; 3]) -> Result<(f64, f64)> {
    let d = Vec3::from(dir);
    if !((d.norm() - 1.0).abs() <= UNIT_TOLERANCE) {
        return Err(Error::Config(format!(
            "direction {dir:?} is not unit length"
        )));
    }
    Ok(uv_of(&d))
}

fn uv_of(d: &Vec3) -> (f64, f64) {
    let u = 0.5 + d.x.atan2(-d.z) / (2.0 * PI);
    let v = d.y.clamp(-1.0, 1.0).acos() / PI;
    (u, v)
}

/// Inverse of [`dir_to_uv`].
pub fn uv_to_dir(u: f64, v: f64) -> [f64; 3] {
    let phi = (u - 0.5) * 2.0 * PI;
    let theta = v * PI;
    [
        theta.sin() * phi.sin(),
        theta.cos(),
        -theta.sin() * phi.cos(),
    ]
}

/// Bilinear footprint of a direction on a `width x height` upper crop:
/// up to four `(texel, weight)` pairs whose weights sum to 1, or nothing
/// below the horizon.
pub fn splat_footprint(dir: [f64; 3], width: usize, height: usize) -> Vec<(usize, f64)> {
    let (u, v) = uv_of(&Vec3::from(dir));
    footprint(u, v, width, height)
}

fn footprint(u: f64, v: f64, width: usize, height: usize) -> Vec<(usize, f64)> {
    if v > 0.5 {
        return Vec::new();
    }
    let x = u * width as f64 - 0.5;
    let y = (v * 2.0 * height as f64 - 0.5).clamp(0.0, (height - 1) as f64);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let xa = (x0 as i64).rem_euclid(width as i64) as usize;
    let xb = (xa + 1) % width;
    let ya = y0 as usize;
    let yb = (ya + 1).min(height - 1);
    let mut out = Vec::with_capacity(4);
    for (tx, wx) in [(xa, 1.0 - fx), (xb, fx)] {
        for (ty, wy) in [(ya, 1.0 - fy), (yb, fy)] {
            let w = wx * wy;
            if w > 0.0 {
                out.push((ty * width + tx, w));
            }
        }
    }
    out
}

/// Orthonormal basis with `n` as the third axis.
fn frame(n: &Vec3) -> (Vec3, Vec3) {
    let sign = 1f64.copysign(n.z);
    let a = -1.0 / (sign + n.z);
    let b = n.x * n.y * a;
    (
        Vec3::new(1.0 + sign * n.x * n.x * a, sign * b, -sign * n.x),
        Vec3::new(b, sign + n.y * n.y * a, -n.y),
    )
}

fn reflect(d: &Vec3, n: &Vec3) -> Vec3 {
    (d - n * (2.0 * d.dot(n))).normalize()
}

/// `count` stratified points in the unit square.
fn stratified(count: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let side = (count as f64).sqrt().floor() as usize;
    if side * side == count {
        let mut out = Vec::with_capacity(count);
        for i in 0..side {
            for j in 0..side {
                let (a, b): (f64, f64) = (rng.random(), rng.random());
                out.push(((i as f64 + a) / side as f64, (j as f64 + b) / side as f64));
            }
        }
        out
    } else {
        (0..count)
            .map(|k| {
                let (a, b): (f64, f64) = (rng.random(), rng.random());
                ((k as f64 + a) / count as f64, b)
            })
            .collect()
    }
}

fn cosine_dir(n: &Vec3, (s1, s2): (f64, f64)) -> Vec3 {
    let (t, b) = frame(n);
    let r = s1.sqrt();
    let phi = 2.0 * PI * s2;
    (t * (r * phi.cos()) + b * (r * phi.sin()) + n * (1.0 - s1).max(0.0).sqrt()).normalize()
}

fn lobe_dir(axis: &Vec3, exponent: f64, (s1, s2): (f64, f64)) -> Vec3 {
    let (t, b) = frame(axis);
    let cos_a = s1.powf(1.0 / (exponent + 1.0));
    let sin_a = (1.0 - cos_a * cos_a).max(0.0).sqrt();
    let phi = 2.0 * PI * s2;
    (t * (sin_a * phi.cos()) + b * (sin_a * phi.sin()) + axis * cos_a).normalize()
}

fn mul(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] * b[0], a[1] * b[1], a[2] * b[2]]
}

struct RowBuilder<'a> {
    scene: &'a Scene,
    env_width: usize,
    env_height: usize,
    spp: usize,
    rng: ChaCha8Rng,
    acc: BTreeMap<(u32, [u32; 3]), f64>,
}

impl RowBuilder<'_> {
    fn deposit(&mut self, dir: &Vec3, weight: f64, tint: [f64; 3]) {
        if weight == 0.0 {
            return;
        }
        let (u, v) = uv_of(dir);
        let key_tint = tint.map(|c| (c as f32).to_bits());
        for (texel, w) in footprint(u, v, self.env_width, self.env_height) {
            *self.acc.entry((texel as u32, key_tint)).or_insert(0.0) += weight * w;
        }
    }

    /// Diffuse shadow rays from a surface point.
    fn shade_diffuse(&mut self, hit: &Hit, weight: f64, tint: [f64; 3], samples: usize) {
        let origin = hit.point + hit.normal * RAY_OFFSET;
        for s in stratified(samples, &mut self.rng) {
            let dir = cosine_dir(&hit.normal, s);
            if self.scene.intersect(&origin, &dir).is_none() {
                self.deposit(&dir, weight / samples as f64, tint);
            }
        }
    }

    /// A specular ray leaving a surface: escapes to the map or is shaded
    /// diffusely at the next surface.
    fn follow_specular(
        &mut self,
        origin: &Vec3,
        dir: &Vec3,
        weight: f64,
        tint: [f64; 3],
        samples: usize,
    ) {
        match self.scene.intersect(origin, dir) {
            None => self.deposit(dir, weight, tint),
            Some(next) => {
                let fraction = next.material.diffuse_fraction();
                if fraction > 0.0 {
                    let t = mul(tint, next.material.albedo);
                    self.shade_diffuse(&next, weight * fraction, t, samples);
                }
            }
        }
    }

    fn shade_primary(&mut self, incoming: &Vec3, hit: &Hit) {
        let m = hit.material;
        let tint = m.albedo;
        let fraction = m.diffuse_fraction();
        if fraction > 0.0 {
            self.shade_diffuse(hit, fraction, tint, self.spp);
        }
        if fraction >= 1.0 {
            return;
        }
        let origin = hit.point + hit.normal * RAY_OFFSET;
        let mirror = reflect(incoming, &hit.normal);
        if fraction == 0.0 {
            self.follow_specular(&origin, &mirror, 1.0, tint, self.spp);
            return;
        }
        let exponent = phong_exponent(m.roughness);
        let weight = (1.0 - fraction) / self.spp as f64;
        for s in stratified(self.spp, &mut self.rng) {
            let dir = lobe_dir(&mirror, exponent, s);
            if dir.dot(&hit.normal) > 0.0 {
                self.follow_specular(&origin, &dir, weight, tint, 1);
            }
        }
    }
}

/// One weighted reference from a pixel to an environment texel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransportEntry {
    pub texel: u32,
    pub weight: f32,
    pub tint: [f32; 3],
}

/// Sparse map from an upper-crop environment to a rendering, one row of
/// entries per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportOperator {
    render_width: usize,
    render_height: usize,
    env_width: usize,
    env_height: usize,
    row_ptr: Vec<usize>,
    entries: Vec<TransportEntry>,
}

pub fn build_transport(
    scene: &Scene,
    env_width: usize,
    env_height: usize,
    samples_per_pixel: usize,
    seed: u64,
) -> Result<TransportOperator> {
    scene.validate()?;
    if env_width == 0 || env_height == 0 {
        return Err(Error::Config(format!(
            "environment crop {env_width}x{env_height} has no texels"
        )));
    }
    if samples_per_pixel == 0 {
        return Err(Error::Config("samples per pixel must be >= 1".into()));
    }
    let (rw, rh) = (scene.camera.width, scene.camera.height);
    let rows: Vec<Vec<TransportEntry>> = (0..rw * rh)
        .into_par_iter()
        .map(|pixel| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(pixel as u64);
            let mut b = RowBuilder {
                scene,
                env_width,
                env_height,
                spp: samples_per_pixel,
                rng,
                acc: BTreeMap::new(),
            };
            let (origin, dir) = scene.primary_ray(pixel);
            if let Some(hit) = scene.intersect(&origin, &dir) {
                b.shade_primary(&dir, &hit);
            }
            b.acc
                .into_iter()
                .map(|((texel, tint), w)| TransportEntry {
                    texel,
                    weight: w as f32,
                    tint: tint.map(f32::from_bits),
                })
                .collect()
        })
        .collect();
    TransportOperator::from_rows(rw, rh, env_width, env_height, rows)
}

impl TransportOperator {
    pub fn from_rows(
        render_width: usize,
        render_height: usize,
        env_width: usize,
        env_height: usize,
        rows: Vec<Vec<TransportEntry>>,
    ) -> Result<Self> {
        if rows.len() != render_width * render_height {
            return Err(Error::Dimension(format!(
                "{} rows for a {render_width}x{render_height} rendering",
                rows.len()
            )));
        }
        let texels = env_width * env_height;
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        row_ptr.push(0);
        let mut entries = Vec::new();
        for row in rows {
            for e in &row {
                if e.texel as usize >= texels {
                    return Err(Error::Format {
                        what: "transport",
                        reason: format!("texel {} out of range {texels}", e.texel),
                    });
                }
                let finite = e.weight.is_finite() && e.tint.iter().all(|t| t.is_finite());
                if !finite || e.weight < 0.0 || e.tint.iter().any(|t| *t < 0.0) {
                    return Err(Error::NonFinite(format!("transport entry {e:?}")));
                }
            }
            entries.extend(row);
            row_ptr.push(entries.len());
        }
        Ok(Self {
            render_width,
            render_height,
            env_width,
            env_height,
            row_ptr,
            entries,
        })
    }

    pub fn render_dims(&self) -> (usize, usize) {
        (self.render_width, self.render_height)
    }

    pub fn env_dims(&self) -> (usize, usize) {
        (self.env_width, self.env_height)
    }

    pub fn pixel_count(&self) -> usize {
        self.render_width * self.render_height
    }

    pub fn texel_count(&self) -> usize {
        self.env_width * self.env_height
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn row(&self, pixel: usize) -> &[TransportEntry] {
        &self.entries[self.row_ptr[pixel]..self.row_ptr[pixel + 1]]
    }

    /// Interleaved-rgb rendering of an interleaved-rgb upper-crop map.
    pub fn apply<T: Real>(&self, env: &[T]) -> Result<Vec<T>> {
        if env.len() != 3 * self.texel_count() {
            return Err(Error::Dimension(format!(
                "environment has {} values, operator expects {}x{}x3",
                env.len(),
                self.env_width,
                self.env_height
            )));
        }
        let mut out = vec![T::zero(); 3 * self.pixel_count()];
        out.par_chunks_mut(3).enumerate().for_each(|(p, px)| {
            for e in self.row(p) {
                let t = 3 * e.texel as usize;
                let w = T::lit(e.weight as f64);
                for k in 0..3 {
                    px[k] += w * T::lit(e.tint[k] as f64) * env[t + k];
                }
            }
        });
        Ok(out)
    }

    /// Transpose of [`Self::apply`].
    pub fn apply_adjoint<T: Real>(&self, image_grad: &[T]) -> Result<Vec<T>> {
        if image_grad.len() != 3 * self.pixel_count() {
            return Err(Error::Dimension(format!(
                "image gradient has {} values, operator expects {}x{}x3",
                image_grad.len(),
                self.render_width,
                self.render_height
            )));
        }
        let mut out = vec![T::zero(); 3 * self.texel_count()];
        for p in 0..self.pixel_count() {
            let g = &image_grad[3 * p..3 * p + 3];
            if g.iter().all(|v| *v == T::zero()) {
                continue;
            }
            for e in self.row(p) {
                let t = 3 * e.texel as usize;
                let w = T::lit(e.weight as f64);
                for k in 0..3 {
                    out[t + k] += w * T::lit(e.tint[k] as f64) * g[k];
                }
            }
        }
        Ok(out)
    }

    pub fn render(&self, env: &HdrImage) -> Result<HdrImage> {
        self.check_env(env)?;
        HdrImage::new(
            self.render_width,
            self.render_height,
            self.apply(env.data())?,
        )
    }

    pub fn adjoint(&self, image_grad: &HdrImage) -> Result<HdrImage> {
        if image_grad.dims() != self.render_dims() {
            return Err(Error::Dimension(format!(
                "gradient {:?} vs rendering {:?}",
                image_grad.dims(),
                self.render_dims()
            )));
        }
        HdrImage::new(
            self.env_width,
            self.env_height,
            self.apply_adjoint(image_grad.data())?,
        )
    }

    fn check_env(&self, env: &HdrImage) -> Result<()> {
        if env.dims() != self.env_dims() {
            return Err(Error::Dimension(format!(
                "environment {:?} vs operator crop {:?}",
                env.dims(),
                self.env_dims()
            )));
        }
        Ok(())
    }
}

pub const TRANSPORT_MAGIC: &[u8; 8] = b"ENVTRANS";
pub const TRANSPORT_VERSION: u32 = 1;

/// Cache layout, little-endian: magic, version, render width/height, env
/// width/height (u32 each), one u32 entry count per pixel, then each entry as
/// texel (u32), weight (f32) and tint (3 x f32).
pub fn write_transport<W: Write>(op: &TransportOperator, w: &mut W) -> Result<()> {
    w.write_all(TRANSPORT_MAGIC)?;
    w.write_u32::<LE>(TRANSPORT_VERSION)?;
    for d in [
        op.render_width,
        op.render_height,
        op.env_width,
        op.env_height,
    ] {
        w.write_u32::<LE>(d as u32)?;
    }
    for p in 0..op.pixel_count() {
        w.write_u32::<LE>(op.row(p).len() as u32)?;
    }
    for e in &op.entries {
        w.write_u32::<LE>(e.texel)?;
        w.write_f32::<LE>(e.weight)?;
        for t in e.tint {
            w.write_f32::<LE>(t)?;
        }
    }
    Ok(())
}

pub fn read_transport<R: Read>(r: &mut R) -> Result<TransportOperator> {
    let bad = |reason: String| Error::Format {
        what: "transport",
        reason,
    };
    let eof = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format {
                what: "transport",
                reason: "truncated".into(),
            }
        } else {
            Error::IoStream(e)
        }
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(eof)?;
    if &magic != TRANSPORT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = r.read_u32::<LE>().map_err(eof)?;
    if version != TRANSPORT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut d = [0usize; 4];
    for v in &mut d {
        *v = r.read_u32::<LE>().map_err(eof)? as usize;
    }
    let [rw, rh, ew, eh] = d;
    if rw == 0 || rh == 0 || ew == 0 || eh == 0 {
        return Err(bad(format!("empty dimensions {d:?}")));
    }
    let mut counts = vec![0u32; rw * rh];
    r.read_u32_into::<LE>(&mut counts).map_err(eof)?;
    let mut rows = Vec::with_capacity(counts.len());
    for c in counts {
        let mut row = Vec::with_capacity(c as usize);
        for _ in 0..c {
            let texel = r.read_u32::<LE>().map_err(eof)?;
            let weight = r.read_f32::<LE>().map_err(eof)?;
            let mut tint = [0f32; 3];
            r.read_f32_into::<LE>(&mut tint).map_err(eof)?;
            row.push(TransportEntry {
                texel,
                weight,
                tint,
            });
        }
        rows.push(row);
    }
    TransportOperator::from_rows(rw, rh, ew, eh, rows)
}

pub fn save_transport(op: &TransportOperator, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    write_transport(op, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_transport(path: impl AsRef<Path>) -> Result<TransportOperator> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    read_transport(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn small_scene(roughness: f64) -> Scene {
        Scene::desk(roughness).with_resolution(8, 8)
    }

    #[test]
    fn uv_conventions() {
        let (_, v) = dir_to_uv([0.0, 1.0, 0.0]).unwrap();
        assert_eq!(v, 0.0);
        let (_, v) = dir_to_uv([0.0, -1.0, 0.0]).unwrap();
        assert_eq!(v, 1.0);
        assert_eq!(dir_to_uv([0.0, 0.0, -1.0]).unwrap(), (0.5, 0.5));
        assert!(dir_to_uv([0.0, 0.5, 0.0]).is_err());
    }

    #[test]
    fn uv_round_trip() {
        for (u, v) in [(0.1, 0.2), (0.7, 0.45), (0.5, 0.9), (0.99, 0.01)] {
            let (u2, v2) = dir_to_uv(uv_to_dir(u, v)).unwrap();
            assert_relative_eq!(u, u2, epsilon = 1e-12);
            assert_relative_eq!(v, v2, epsilon = 1e-12);
        }
    }

    #[test]
    fn footprint_sums_to_one_and_stays_in_crop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let (u, v): (f64, f64) = (rng.random(), rng.random::<f64>() * 0.5);
            let fp = footprint(u, v, 16, 4);
            assert!(fp.len() <= 4);
            assert!(fp.iter().all(|(t, _)| *t < 64));
            assert_relative_eq!(fp.iter().map(|(_, w)| w).sum::<f64>(), 1.0, epsilon = 1e-12);
        }
        assert!(footprint(0.3, 0.51, 16, 4).is_empty());
    }

    #[test]
    fn scene_validation() {
        let mut s = Scene::desk(0.0);
        s.spheres[0].radius = 0.0;
        assert!(s.validate().is_err());
        let mut s = Scene::desk(0.0);
        s.camera.fov_deg = 180.0;
        assert!(s.validate().is_err());
        assert!(Scene::desk(1.5).validate().is_err());
    }

    #[test]
    fn scene_toml_round_trip() {
        let s = Scene::desk(0.5);
        assert_eq!(Scene::from_toml(&s.to_toml()).unwrap(), s);
        let text = r#"
            [camera]
            position = [0.0, 1.2, 4.0]
            look_at = [0.0, 1.0, 0.0]
            up = [0.0, 1.0, 0.0]
            fov_deg = 45.0
            width = 4
            height = 4

            [[sphere]]
            center = [0.0, 1.0, 0.0]
            radius = 1.0
            material = { kind = "mirror", albedo = [1.0, 1.0, 1.0] }
        "#;
        let s = Scene::from_toml(text).unwrap();
        assert!(s.ground.is_none());
        assert_eq!(s.spheres[0].material.kind, MaterialKind::Mirror);
    }

    #[test]
    fn build_rejects_empty_env() {
        assert!(build_transport(&small_scene(0.0), 0, 4, 4, 0).is_err());
        assert!(build_transport(&small_scene(0.0), 16, 4, 0, 0).is_err());
    }

    #[test]
    fn black_environment_renders_black() {
        let op = build_transport(&small_scene(0.5), 16, 4, 4, 0).unwrap();
        let img = op.render(&HdrImage::zeros(16, 4)).unwrap();
        assert!(img.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn furnace_plane() {
        let scene = Scene {
            camera: Camera {
                position: [0.0, 1.0, 0.0],
                look_at: [0.0, 0.0, -0.01],
                up: [0.0, 0.0, -1.0],
                fov_deg: 30.0,
                width: 2,
                height: 2,
            },
            spheres: vec![],
            ground: Some(Ground {
                height: 0.0,
                material: Material::diffuse(0.8),
            }),
        };
        let op = build_transport(&scene, 32, 8, 1024, 3).unwrap();
        let img = op.render(&HdrImage::filled(32, 8, [1.0; 3])).unwrap();
        for v in img.data() {
            assert!((v - 0.8).abs() <= 0.02 * 0.8, "{v}");
        }
    }

    #[test]
    fn mirror_rows_are_single_footprints() {
        let scene = small_scene(0.0);
        let op = build_transport(&scene, 16, 4, 4, 0).unwrap();
        let mut checked = 0;
        for p in 0..op.pixel_count() {
            let (o, d) = scene.primary_ray(p);
            let Some(hit) = scene.intersect(&o, &d) else {
                continue;
            };
            if hit.material.kind != MaterialKind::Mirror {
                continue;
            }
            let r = reflect(&d, &hit.normal);
            if scene
                .intersect(&(hit.point + hit.normal * RAY_OFFSET), &r)
                .is_some()
            {
                continue;
            }
            let row = op.row(p);
            assert!(row.len() <= 4);
            let sum: f64 = row.iter().map(|e| e.weight as f64).sum();
            assert_relative_eq!(sum, 1.0, epsilon = 1e-6);
            assert!(row.iter().all(|e| e.tint == [0.9f32; 3]));
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn positivity_and_crop() {
        let op = build_transport(&small_scene(0.5), 16, 4, 16, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let env = HdrImage::from_fn(16, 4, |_, _| [rng.random(), rng.random(), rng.random()]);
        assert!(op.render(&env).unwrap().data().iter().all(|v| *v >= 0.0));
        assert!(op
            .entries
            .iter()
            .all(|e| (e.texel as usize) < 64 && e.weight >= 0.0));
    }

    #[test]
    fn deterministic_build() {
        let a = build_transport(&small_scene(0.5), 16, 4, 9, 7).unwrap();
        let b = build_transport(&small_scene(0.5), 16, 4, 9, 7).unwrap();
        assert_eq!(a, b);
        let c = build_transport(&small_scene(0.5), 16, 4, 9, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn dimension_mismatch() {
        let op = build_transport(&small_scene(0.0), 16, 4, 1, 0).unwrap();
        assert!(op.render(&HdrImage::zeros(8, 4)).is_err());
        assert!(op.adjoint(&HdrImage::zeros(4, 4)).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let op = build_transport(&small_scene(0.5), 16, 4, 4, 0).unwrap();
        let mut buf = Vec::new();
        write_transport(&op, &mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 4 * 5 + 4 * op.pixel_count() + 20 * op.nnz());
        assert_eq!(read_transport(&mut buf.as_slice()).unwrap(), op);
        assert!(read_transport(&mut &buf[..buf.len() - 1]).is_err());
    }
}
