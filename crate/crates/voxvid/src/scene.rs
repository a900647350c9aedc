//! Synthetic dynamic scenes: primitive soup with parametric motion, an
//! analytic density/color field, a ring camera rig and a dense ray-marched
//! ground-truth renderer that is fully independent of the learned pipeline.

use serde::{Deserialize, Serialize};

use rayon::prelude::*;
use voxvid_core::math::{Aabb, Vec3};
use voxvid_core::render::Camera;

use crate::error::{Result, VoxvidError};
use crate::image::Image;

/// Ground truth ray marching uses at least this many samples per ray.
pub const GT_STEPS: usize = 512;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Motion {
    Static,
    /// Constant world-units-per-frame velocity.
    Linear { velocity: [f64; 3] },
    /// Circle in the xy-plane around the rest center.
    Orbit { radius: f64, period: f64 },
    /// Sinusoidal displacement along `amplitude`.
    Oscillate { amplitude: [f64; 3], period: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    pub center: [f64; 3],
    pub color: [f64; 3],
    pub density: f64,
    /// Width of the linear density ramp at the surface, in world units.
    #[serde(default = "default_falloff")]
    pub falloff: f64,
    #[serde(default = "default_motion")]
    pub motion: Motion,
}

fn default_falloff() -> f64 {
    0.08
}

fn default_motion() -> Motion {
    Motion::Static
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CameraRig {
    /// Training cameras on a ring looking at the origin.
    pub train_count: u32,
    /// Held-out cameras, interleaved on the same ring at a different height.
    pub test_count: u32,
    pub ring_radius: f64,
    pub ring_height: f64,
    pub test_height: f64,
    pub focal: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneSpec {
    pub name: String,
    pub frames: u32,
    #[serde(default)]
    pub seed: u64,
    pub aabb_min: [f64; 3],
    pub aabb_max: [f64; 3],
    pub background: [f64; 3],
    pub rig: CameraRig,
    pub primitives: Vec<Primitive>,
}

impl SceneSpec {
    pub fn aabb(&self) -> Aabb {
        Aabb::new(
            Vec3::new(self.aabb_min[0], self.aabb_min[1], self.aabb_min[2]),
            Vec3::new(self.aabb_max[0], self.aabb_max[1], self.aabb_max[2]),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(VoxvidError::Config("scene needs at least one frame".into()));
        }
        if !self.aabb().is_valid() {
            return Err(VoxvidError::Config("scene aabb is degenerate".into()));
        }
        if self.rig.train_count == 0 {
            return Err(VoxvidError::Config("rig needs at least one training camera".into()));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if !(p.density >= 0.0) {
                return Err(VoxvidError::Config(format!("primitive {i} density negative")));
            }
            if !(p.falloff > 0.0) {
                return Err(VoxvidError::Config(format!("primitive {i} falloff must be > 0")));
            }
            for t in 0..self.frames {
                let c = primitive_center(p, t);
                let r = match p.shape {
                    Shape::Sphere { radius } => radius,
                    Shape::Box { half_extents } => {
                        half_extents.iter().fold(0.0f64, |a, &b| a.max(b))
                    }
                };
                let bb = self.aabb();
                for (axis, (lo, hi)) in [
                    (c.x, (bb.min.x, bb.max.x)),
                    (c.y, (bb.min.y, bb.max.y)),
                    (c.z, (bb.min.z, bb.max.z)),
                ] {
                    if axis - r < lo || axis + r > hi {
                        return Err(VoxvidError::Config(format!(
                            "primitive {i} leaves the aabb at frame {t}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Training cameras followed by test cameras; the boolean marks test
    /// views.
    pub fn cameras(&self) -> Result<Vec<(Camera, bool)>> {
        let rig = &self.rig;
        let mut out = Vec::new();
        let up = Vec3::new(0.0, 0.0, 1.0);
        for i in 0..rig.train_count {
            let phi = std::f64::consts::TAU * i as f64 / rig.train_count as f64;
            let eye =
                Vec3::new(rig.ring_radius * phi.cos(), rig.ring_radius * phi.sin(), rig.ring_height);
            out.push((
                Camera::look_at(eye, Vec3::ZERO, up, rig.focal, rig.width, rig.height)
                    .map_err(VoxvidError::Core)?,
                false,
            ));
        }
        for i in 0..rig.test_count {
            // Offset half a slot so test views never coincide with training
            // views.
            let phi = std::f64::consts::TAU * (i as f64 + 0.5) / rig.test_count.max(1) as f64;
            let eye =
                Vec3::new(rig.ring_radius * phi.cos(), rig.ring_radius * phi.sin(), rig.test_height);
            out.push((
                Camera::look_at(eye, Vec3::ZERO, up, rig.focal, rig.width, rig.height)
                    .map_err(VoxvidError::Core)?,
                true,
            ));
        }
        Ok(out)
    }

    /// The default 20-frame toy scene: a slowly orbiting ball over a static
    /// box, 8 training + 2 test cameras at 64x64.
    pub fn toy() -> SceneSpec {
        SceneSpec {
            name: "toy".into(),
            frames: 20,
            seed: 0,
            aabb_min: [-1.0; 3],
            aabb_max: [1.0; 3],
            background: [0.0; 3],
            rig: CameraRig {
                train_count: 8,
                test_count: 2,
                ring_radius: 2.4,
                ring_height: 0.55,
                test_height: 0.95,
                focal: 64.0,
                width: 64,
                height: 64,
            },
            primitives: vec![
                Primitive {
                    shape: Shape::Sphere { radius: 0.32 },
                    center: [0.1, 0.0, 0.24],
                    color: [0.85, 0.25, 0.2],
                    density: 30.0,
                    falloff: 0.1,
                    motion: Motion::Orbit { radius: 0.16, period: 80.0 },
                },
                Primitive {
                    shape: Shape::Box { half_extents: [0.42, 0.3, 0.12] },
                    center: [-0.05, 0.05, -0.38],
                    color: [0.2, 0.45, 0.85],
                    density: 30.0,
                    falloff: 0.1,
                    motion: Motion::Oscillate {
                        amplitude: [0.0, 0.12, 0.0],
                        period: 80.0,
                    },
                },
                Primitive {
                    shape: Shape::Sphere { radius: 0.17 },
                    center: [-0.38, -0.3, 0.3],
                    color: [0.95, 0.8, 0.25],
                    density: 45.0,
                    falloff: 0.06,
                    motion: Motion::Oscillate {
                        amplitude: [0.05, 0.0, 0.08],
                        period: 80.0,
                    },
                },
                Primitive {
                    shape: Shape::Box { half_extents: [0.16, 0.16, 0.3] },
                    center: [0.45, 0.42, -0.1],
                    color: [0.35, 0.75, 0.4],
                    density: 22.0,
                    falloff: 0.08,
                    motion: Motion::Static,
                },
            ],
        }
    }

    /// The toy scene with all motion removed.
    pub fn toy_static() -> SceneSpec {
        let mut s = Self::toy();
        s.name = "toy-static".into();
        for p in &mut s.primitives {
            p.motion = Motion::Static;
        }
        s
    }
}

pub fn primitive_center(p: &Primitive, frame: u32) -> Vec3 {
    let base = Vec3::new(p.center[0], p.center[1], p.center[2]);
    let t = frame as f64;
    match &p.motion {
        Motion::Static => base,
        Motion::Linear { velocity } => {
            base + Vec3::new(velocity[0], velocity[1], velocity[2]) * t
        }
        Motion::Orbit { radius, period } => {
            let th = std::f64::consts::TAU * t / period;
            base + Vec3::new(radius * th.cos(), radius * th.sin(), 0.0)
        }
        Motion::Oscillate { amplitude, period } => {
            let th = std::f64::consts::TAU * t / period;
            base + Vec3::new(amplitude[0], amplitude[1], amplitude[2]) * th.sin()
        }
    }
}

/// Analytic field at one point: total density and density-weighted color.
pub fn field_at(spec: &SceneSpec, frame: u32, p: Vec3) -> (f64, [f64; 3]) {
    let mut sigma = 0.0;
    let mut color = [0.0; 3];
    for prim in &spec.primitives {
        let c = primitive_center(prim, frame);
        let surface = match prim.shape {
            Shape::Sphere { radius } => (p - c).norm() - radius,
            Shape::Box { half_extents } => {
                let d = p - c;
                let q = [
                    d.x.abs() - half_extents[0],
                    d.y.abs() - half_extents[1],
                    d.z.abs() - half_extents[2],
                ];
                q.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
            }
        };
        // Linear ramp from the surface inward.
        let s = prim.density * (-surface / prim.falloff).clamp(0.0, 1.0);
        if s > 0.0 {
            sigma += s;
            for ch in 0..3 {
                color[ch] += s * prim.color[ch];
            }
        }
    }
    if sigma > 0.0 {
        for ch in color.iter_mut() {
            *ch /= sigma;
        }
    }
    (sigma, color)
}

/// Dense ray-marched ground truth for one view of one frame: the same
/// transmittance compositing as the codec's renderer, but against the
/// analytic field and with a step at least 4x finer than training ever uses.
pub fn render_ground_truth(spec: &SceneSpec, camera: &Camera, frame: u32) -> Result<Image> {
    let aabb = spec.aabb();
    let bg = spec.background;
    let mut img = Image::new(camera.width, camera.height);
    let rows: Vec<Vec<[f64; 3]>> = (0..camera.height)
        .into_par_iter()
        .map(|row| {
            let mut out = Vec::with_capacity(camera.width as usize);
            for col in 0..camera.width {
                let ray = camera
                    .ray_for_pixel(row, col)
                    .expect("pixel iteration stays in bounds");
                let Some((t0, t1)) = aabb.ray_range(ray.origin, ray.dir) else {
                    out.push(bg);
                    continue;
                };
                let step = (t1 - t0) / GT_STEPS as f64;
                let mut color = [0.0; 3];
                let mut transmittance = 1.0;
                for k in 0..GT_STEPS {
                    let t = t0 + (k as f64 + 0.5) * step;
                    let (sigma, rgb) = field_at(spec, frame, ray.origin + ray.dir * t);
                    if sigma <= 0.0 {
                        continue;
                    }
                    let alpha = -(-sigma * step).exp_m1();
                    let w = transmittance * alpha;
                    for c in 0..3 {
                        color[c] += w * rgb[c];
                    }
                    transmittance *= 1.0 - alpha;
                    if transmittance < 1e-8 {
                        break;
                    }
                }
                for c in 0..3 {
                    color[c] += transmittance * bg[c];
                }
                out.push(color);
            }
            out
        })
        .collect();
    for (row, data) in rows.into_iter().enumerate() {
        for (col, px) in data.into_iter().enumerate() {
            img.set(row as u32, col as u32, px);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_renders_background() {
        let mut spec = SceneSpec::toy();
        spec.primitives.clear();
        spec.background = [0.3, 0.2, 0.6];
        let cam = spec.cameras().unwrap()[0].0.clone();
        let img = render_ground_truth(&spec, &cam, 0).unwrap();
        assert!(img.pixels.iter().all(|px| *px == [0.3, 0.2, 0.6]));
    }

    #[test]
    fn opaque_sphere_center_pixel_has_sphere_color() {
        let mut spec = SceneSpec::toy();
        spec.primitives = vec![Primitive {
            shape: Shape::Sphere { radius: 0.4 },
            center: [0.0, 0.0, 0.0],
            color: [0.1, 0.8, 0.3],
            density: 120.0,
            falloff: 0.05,
            motion: Motion::Static,
        }];
        spec.rig.ring_height = 0.0;
        spec.rig.test_count = 0;
        let cam = spec.cameras().unwrap()[0].0.clone();
        let img = render_ground_truth(&spec, &cam, 0).unwrap();
        // Looking straight at the center, the sphere fills the center pixel.
        let px = img.at(cam.height / 2, cam.width / 2);
        for c in 0..3 {
            assert!(
                (px[c] - spec.primitives[0].color[c]).abs() < 1e-3,
                "channel {c}: {px:?}"
            );
        }
    }

    #[test]
    fn static_scene_repeats_identically() {
        let spec = SceneSpec::toy_static();
        let cam = spec.cameras().unwrap()[2].0.clone();
        let a = render_ground_truth(&spec, &cam, 0).unwrap();
        let b = render_ground_truth(&spec, &cam, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn toy_scene_validates_and_moves() {
        let spec = SceneSpec::toy();
        spec.validate().unwrap();
        let a = primitive_center(&spec.primitives[0], 0);
        let b = primitive_center(&spec.primitives[0], 10);
        assert!((a - b).norm() > 1e-3);

        let cams = spec.cameras().unwrap();
        assert_eq!(cams.len(), 10);
        assert_eq!(cams.iter().filter(|(_, test)| *test).count(), 2);
    }

    #[test]
    fn escaping_primitive_is_rejected() {
        let mut spec = SceneSpec::toy();
        spec.primitives[0].motion = Motion::Linear { velocity: [0.2, 0.0, 0.0] };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn spec_roundtrips_through_toml() {
        let spec = SceneSpec::toy();
        let text = toml::to_string_pretty(&spec).unwrap();
        let back: SceneSpec = toml::from_str(&text).unwrap();
        assert_eq!(spec, back);
    }
}
