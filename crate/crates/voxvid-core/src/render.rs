//! Differentiable volume renderer: pinhole cameras, occupancy-skipped ray
//! sampling, transmittance compositing and the small rendering MLP, all with
//! exact manual gradients.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::grid::{FieldFrame, FrameGrads, OccupancyGrid};
use crate::math::{axpy, dot, flt, hash3, sigmoid, softplus, symmetric_f64, Vec3};

pub const HIDDEN_WIDTH: usize = 64;
pub const DIR_FREQS: usize = 4;
pub const DIR_ENC_DIM: usize = 3 * 2 * DIR_FREQS;

/// Rays stop marching once the transmittance falls below this: everything
/// behind contributes less than the cutoff to the pixel. Both the trainer
/// and the decoder render through this same path, so the truncation is
/// identical on both sides.
pub const TRANSMITTANCE_CUTOFF: f64 = 1e-5;

/// Pinhole camera with square pixels. `rotation` columns are the camera
/// axes (x right, y down, z forward) expressed in world coordinates;
/// `translation` is the camera position, so `x_world = R x_cam + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
}

impl Camera {
    pub fn new(
        focal: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        rotation: [[f64; 3]; 3],
        translation: Vec3,
    ) -> Result<Self> {
        if !(focal > 0.0) || !focal.is_finite() {
            return Err(CoreError::InvalidConfig("camera focal must be positive".into()));
        }
        if width == 0 || height == 0 {
            return Err(CoreError::InvalidConfig("camera image must be non-empty".into()));
        }
        let cam = Camera { focal, cx, cy, width, height, rotation, translation };
        // Columns must form an orthonormal basis.
        for a in 0..3 {
            for b in 0..3 {
                let dot = cam.column(a).dot(cam.column(b));
                let expect = if a == b { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-9 {
                    return Err(CoreError::InvalidConfig(
                        "camera rotation is not orthonormal".into(),
                    ));
                }
            }
        }
        Ok(cam)
    }

    /// Camera on `eye` looking at `target`, principal point at the image
    /// center.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let forward = (target - eye).normalized();
        let right = forward.cross(up).normalized();
        let down = forward.cross(right);
        let rotation = [
            [right.x, down.x, forward.x],
            [right.y, down.y, forward.y],
            [right.z, down.z, forward.z],
        ];
        Camera::new(focal, width as f64 / 2.0, height as f64 / 2.0, width, height, rotation, eye)
    }

    #[inline]
    fn column(&self, c: usize) -> Vec3 {
        Vec3::new(self.rotation[0][c], self.rotation[1][c], self.rotation[2][c])
    }

    #[inline]
    pub fn forward_axis(&self) -> Vec3 {
        self.column(2)
    }

    /// Ray through the center of pixel `(row, col)`.
    pub fn ray_for_pixel(&self, row: u32, col: u32) -> Result<Ray> {
        if row >= self.height || col >= self.width {
            return Err(CoreError::PixelOutOfBounds { row, col });
        }
        let u = (col as f64 + 0.5 - self.cx) / self.focal;
        let v = (row as f64 + 0.5 - self.cy) / self.focal;
        let dir_cam = Vec3::new(u, v, 1.0).normalized();
        let dir = (self.column(0) * dir_cam.x
            + self.column(1) * dir_cam.y
            + self.column(2) * dir_cam.z)
            .normalized();
        Ok(Ray { origin: self.translation, dir, pixel: (row, col) })
    }
}

/// World-space ray through a pixel center. `dir` is unit length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub pixel: (u32, u32),
}

pub fn generate_rays(camera: &Camera, pixels: &[(u32, u32)]) -> Result<Vec<Ray>> {
    pixels.iter().map(|&(r, c)| camera.ray_for_pixel(r, c)).collect()
}

/// A retained sample along a ray. `delta` is the distance to the next
/// retained sample (the step size for the last one); `t` is the ray depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePoint {
    pub pos: Vec3,
    pub delta: f64,
    pub t: f64,
}

/// Uniform samples along the ray inside the occupancy box, dropping samples
/// whose containing cell is empty. A ray that misses the box yields an empty
/// list.
pub fn sample_ray(ray: &Ray, occ: &OccupancyGrid, step: f64) -> Result<Vec<SamplePoint>> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(CoreError::InvalidConfig("sampling step must be positive".into()));
    }
    let Some((t0, t1)) = occ.aabb.ray_range(ray.origin, ray.dir) else {
        return Ok(Vec::new());
    };
    let n = ((t1 - t0) / step) as usize;
    let mut kept: Vec<(Vec3, f64)> = Vec::new();
    for k in 0..n {
        let t = t0 + (k as f64 + 0.5) * step;
        let p = ray.origin + ray.dir * t;
        if occ.occupied_at(p) {
            kept.push((p, t));
        }
    }
    let mut out = Vec::with_capacity(kept.len());
    for i in 0..kept.len() {
        let delta = if i + 1 < kept.len() { kept[i + 1].1 - kept[i].1 } else { step };
        out.push(SamplePoint { pos: kept[i].0, delta, t: kept[i].1 });
    }
    Ok(out)
}

/// Feature-to-(color, density) network shared by all frames of a group.
///
/// Two hidden layers of width 64. Density is read off the first hidden layer
/// so it stays independent of the viewing direction (occupancy construction
/// queries density without one); the sinusoidal direction encoding enters at
/// the second layer and only shapes color. Softplus hidden activations keep
/// the whole network smooth, which the finite-difference gradient suite
/// relies on; outputs use softplus (density >= 0) and the logistic (color in
/// [0,1]).
#[derive(Debug, Clone, PartialEq)]
pub struct RenderMlp {
    pub channels: usize,
    pub w1: Vec<f64>,     // HIDDEN x channels
    pub b1: Vec<f64>,     // HIDDEN
    pub w_den: Vec<f64>,  // HIDDEN
    pub b_den: Vec<f64>,  // 1
    pub w2h: Vec<f64>,    // HIDDEN x HIDDEN
    pub w2d: Vec<f64>,    // HIDDEN x DIR_ENC_DIM
    pub b2: Vec<f64>,     // HIDDEN
    pub w3: Vec<f64>,     // 3 x HIDDEN
    pub b3: Vec<f64>,     // 3
}

const H: usize = HIDDEN_WIDTH;

impl RenderMlp {
    pub fn init(channels: usize, key: u64) -> Self {
        let u = |fan_in: usize, t: u64, i: usize| -> f64 {
            symmetric_f64(hash3(key, t, i as u64), 1.0 / flt::sqrt(fan_in as f64))
        };
        RenderMlp {
            channels,
            w1: (0..H * channels).map(|i| u(channels, 1, i)).collect(),
            b1: vec![0.0; H],
            w_den: (0..H).map(|i| u(H, 2, i)).collect(),
            // Start mostly transparent so empty space is cheap to carve and
            // occupancy can tighten early.
            b_den: vec![-2.5],
            w2h: (0..H * H).map(|i| u(H + DIR_ENC_DIM, 3, i)).collect(),
            w2d: (0..H * DIR_ENC_DIM).map(|i| u(H + DIR_ENC_DIM, 4, i)).collect(),
            b2: vec![0.0; H],
            w3: (0..3 * H).map(|i| u(H, 5, i)).collect(),
            b3: vec![0.0; 3],
        }
    }

    /// Fixed tensor order shared with the optimizer and the parameter coder.
    pub fn tensors(&self) -> [&[f64]; 9] {
        [
            &self.w1, &self.b1, &self.w_den, &self.b_den, &self.w2h, &self.w2d, &self.b2,
            &self.w3, &self.b3,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 9] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w_den,
            &mut self.b_den,
            &mut self.w2h,
            &mut self.w2d,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    pub fn tensor_shapes(channels: usize) -> [usize; 9] {
        [H * channels, H, H, 1, H * H, H * DIR_ENC_DIM, H, 3 * H, 3]
    }

    pub fn from_tensors(channels: usize, t: &[Vec<f64>]) -> Result<Self> {
        let shapes = Self::tensor_shapes(channels);
        if t.len() != 9 || t.iter().zip(shapes.iter()).any(|(v, &s)| v.len() != s) {
            return Err(CoreError::InvalidConfig("render mlp tensor shapes mismatch".into()));
        }
        Ok(RenderMlp {
            channels,
            w1: t[0].clone(),
            b1: t[1].clone(),
            w_den: t[2].clone(),
            b_den: t[3].clone(),
            w2h: t[4].clone(),
            w2d: t[5].clone(),
            b2: t[6].clone(),
            w3: t[7].clone(),
            b3: t[8].clone(),
        })
    }

    pub fn dir_encoding(dir: Vec3) -> [f64; DIR_ENC_DIM] {
        let mut enc = [0.0; DIR_ENC_DIM];
        let comps = [dir.x, dir.y, dir.z];
        let mut i = 0;
        for k in 0..DIR_FREQS {
            let freq = (1u32 << k) as f64 * core::f64::consts::PI;
            for &c in &comps {
                enc[i] = flt::sin(freq * c);
                enc[i + 1] = flt::cos(freq * c);
                i += 2;
            }
        }
        enc
    }

    /// Per-ray precomputation: the direction term of the second layer is
    /// constant along a ray.
    pub fn ray_context(&self, dir: Vec3) -> RayContext {
        let enc = Self::dir_encoding(dir);
        let mut w2d_dot = [0.0; H];
        for (j, d) in w2d_dot.iter_mut().enumerate() {
            *d = dot(&self.w2d[j * DIR_ENC_DIM..(j + 1) * DIR_ENC_DIM], &enc);
        }
        RayContext { dir_enc: enc, w2d_dot }
    }

    fn hidden1(&self, feat: &[f64], h1_pre: &mut [f64; H], h1: &mut [f64; H]) {
        for j in 0..H {
            let acc = self.b1[j] + dot(&self.w1[j * self.channels..(j + 1) * self.channels], feat);
            h1_pre[j] = acc;
            h1[j] = softplus(acc);
        }
    }

    /// Density only (no direction needed).
    pub fn density(&self, feat: &[f64]) -> f64 {
        let mut h1_pre = [0.0; H];
        let mut h1 = [0.0; H];
        self.hidden1(feat, &mut h1_pre, &mut h1);
        let raw = self.b_den[0] + dot(&self.w_den, &h1);
        softplus(raw)
    }

    pub fn forward(&self, feat: &[f64], ctx: &RayContext) -> MlpEval {
        let mut ev = MlpEval::default();
        self.hidden1(feat, &mut ev.h1_pre, &mut ev.h1);
        ev.sigma_raw = self.b_den[0] + dot(&self.w_den, &ev.h1);
        ev.sigma = softplus(ev.sigma_raw);
        for j in 0..H {
            let acc = self.b2[j] + ctx.w2d_dot[j] + dot(&self.w2h[j * H..(j + 1) * H], &ev.h1);
            ev.h2_pre[j] = acc;
            ev.h2[j] = softplus(acc);
        }
        for o in 0..3 {
            let acc = self.b3[o] + dot(&self.w3[o * H..(o + 1) * H], &ev.h2);
            ev.rgb_logit[o] = acc;
            ev.rgb[o] = sigmoid(acc);
        }
        ev
    }

    /// Backpropagate (d_rgb, d_sigma) through a recorded forward evaluation.
    /// Writes dL/dfeature into `d_feat`; accumulates parameter gradients when
    /// `grads` is given (P-frames keep the group MLP frozen and skip it).
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        feat: &[f64],
        ctx: &RayContext,
        ev: &MlpEval,
        d_rgb: [f64; 3],
        d_sigma: f64,
        d_feat: &mut [f64],
        mut grads: Option<&mut RenderMlpGrads>,
    ) {
        let mut d_h2 = [0.0; H];
        for o in 0..3 {
            let s = ev.rgb[o];
            let d_logit = d_rgb[o] * s * (1.0 - s);
            axpy(d_logit, &self.w3[o * H..(o + 1) * H], &mut d_h2);
            if let Some(g) = grads.as_deref_mut() {
                axpy(d_logit, &ev.h2, &mut g.w3[o * H..(o + 1) * H]);
                g.b3[o] += d_logit;
            }
        }

        let mut d_h1 = [0.0; H];
        for j in 0..H {
            let d_pre = d_h2[j] * sigmoid(ev.h2_pre[j]);
            axpy(d_pre, &self.w2h[j * H..(j + 1) * H], &mut d_h1);
            if let Some(g) = grads.as_deref_mut() {
                axpy(d_pre, &ev.h1, &mut g.w2h[j * H..(j + 1) * H]);
                axpy(d_pre, &ctx.dir_enc, &mut g.w2d[j * DIR_ENC_DIM..(j + 1) * DIR_ENC_DIM]);
                g.b2[j] += d_pre;
            }
        }

        let d_sigma_raw = d_sigma * sigmoid(ev.sigma_raw);
        axpy(d_sigma_raw, &self.w_den, &mut d_h1);
        if let Some(g) = grads.as_deref_mut() {
            axpy(d_sigma_raw, &ev.h1, &mut g.w_den);
            g.b_den[0] += d_sigma_raw;
        }

        d_feat.fill(0.0);
        for k in 0..H {
            let d_pre = d_h1[k] * sigmoid(ev.h1_pre[k]);
            axpy(d_pre, &self.w1[k * self.channels..(k + 1) * self.channels], d_feat);
            if let Some(g) = grads.as_deref_mut() {
                axpy(d_pre, feat, &mut g.w1[k * self.channels..(k + 1) * self.channels]);
                g.b1[k] += d_pre;
            }
        }
    }
}

/// Per-ray constants for MLP evaluation.
#[derive(Debug, Clone)]
pub struct RayContext {
    pub dir_enc: [f64; DIR_ENC_DIM],
    pub w2d_dot: [f64; H],
}

/// Intermediates of one MLP evaluation, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpEval {
    pub h1_pre: [f64; H],
    pub h1: [f64; H],
    pub sigma_raw: f64,
    pub sigma: f64,
    pub h2_pre: [f64; H],
    pub h2: [f64; H],
    pub rgb_logit: [f64; 3],
    pub rgb: [f64; 3],
}

impl Default for MlpEval {
    fn default() -> Self {
        MlpEval {
            h1_pre: [0.0; H],
            h1: [0.0; H],
            sigma_raw: 0.0,
            sigma: 0.0,
            h2_pre: [0.0; H],
            h2: [0.0; H],
            rgb_logit: [0.0; 3],
            rgb: [0.0; 3],
        }
    }
}

/// Gradient buffers matching [`RenderMlp::tensors`].
#[derive(Debug, Clone)]
pub struct RenderMlpGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w_den: Vec<f64>,
    pub b_den: Vec<f64>,
    pub w2h: Vec<f64>,
    pub w2d: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

impl RenderMlpGrads {
    pub fn zeros(channels: usize) -> Self {
        RenderMlpGrads {
            w1: vec![0.0; H * channels],
            b1: vec![0.0; H],
            w_den: vec![0.0; H],
            b_den: vec![0.0; 1],
            w2h: vec![0.0; H * H],
            w2d: vec![0.0; H * DIR_ENC_DIM],
            b2: vec![0.0; H],
            w3: vec![0.0; 3 * H],
            b3: vec![0.0; 3],
        }
    }

    pub fn tensors(&self) -> [&[f64]; 9] {
        [
            &self.w1, &self.b1, &self.w_den, &self.b_den, &self.w2h, &self.w2d, &self.b2,
            &self.w3, &self.b3,
        ]
    }

    pub fn clear(&mut self) {
        let RenderMlpGrads { w1, b1, w_den, b_den, w2h, w2d, b2, w3, b3 } = self;
        for t in [w1, b1, w_den, b_den, w2h, w2d, b2, w3, b3] {
            t.fill(0.0);
        }
    }

    pub fn merge(&mut self, other: &RenderMlpGrads) {
        for (a, b) in [
            (&mut self.w1, &other.w1),
            (&mut self.b1, &other.b1),
            (&mut self.w_den, &other.w_den),
            (&mut self.b_den, &other.b_den),
            (&mut self.w2h, &other.w2h),
            (&mut self.w2d, &other.w2d),
            (&mut self.b2, &other.b2),
            (&mut self.w3, &other.w3),
            (&mut self.b3, &other.b3),
        ] {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
    }
}

/// One composited sample: density, color, spacing.
#[derive(Debug, Clone, Copy)]
pub struct CompositeSample {
    pub sigma: f64,
    pub rgb: [f64; 3],
    pub delta: f64,
}

/// Transmittance compositing: `C = sum T_i alpha_i c_i + (1 - W) bg` with
/// `alpha_i = 1 - exp(-sigma_i delta_i)`, `T_i` the product of survival
/// factors of earlier samples, and `W` the accumulated weight.
pub fn composite(samples: &[CompositeSample], bg: [f64; 3]) -> ([f64; 3], f64) {
    let mut color = [0.0; 3];
    let mut weight_sum = 0.0;
    let mut transmittance = 1.0;
    for s in samples {
        let alpha = -flt::exp_m1(-s.sigma * s.delta);
        let w = transmittance * alpha;
        for c in 0..3 {
            color[c] += w * s.rgb[c];
        }
        weight_sum += w;
        transmittance *= 1.0 - alpha;
    }
    for c in 0..3 {
        color[c] += (1.0 - weight_sum) * bg[c];
    }
    (color, weight_sum)
}

/// Per-sample record of a composited forward pass.
#[derive(Debug, Clone, Copy)]
pub struct SampleRecord {
    pub pos: Vec3,
    pub delta: f64,
    pub sigma: f64,
    pub rgb: [f64; 3],
    pub alpha: f64,
    pub transmittance: f64,
}

/// A rendered ray with everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct RayRender {
    pub color: [f64; 3],
    pub weight_sum: f64,
    pub records: Vec<SampleRecord>,
}

/// Render one ray through the field. The caller decides what the frame's
/// values mean (raw, noise-dequantized for training, or hard reconstruction
/// for eval); the renderer just composites.
pub fn render_ray(
    samples: &[SamplePoint],
    frame: &FieldFrame,
    mlp: &RenderMlp,
    ray: &Ray,
    bg: [f64; 3],
) -> Result<RayRender> {
    let ctx = mlp.ray_context(ray.dir);
    let ch = frame.channels();
    let mut feat = vec![0.0; ch];
    let mut scratch = vec![0.0; ch];
    let mut records = Vec::with_capacity(samples.len());
    let mut color = [0.0; 3];
    let mut weight_sum = 0.0;
    let mut transmittance = 1.0;
    for s in samples {
        frame.fuse_into(s.pos, &mut feat, &mut scratch)?;
        let ev = mlp.forward(&feat, &ctx);
        let alpha = -flt::exp_m1(-ev.sigma * s.delta);
        let w = transmittance * alpha;
        for c in 0..3 {
            color[c] += w * ev.rgb[c];
        }
        weight_sum += w;
        records.push(SampleRecord {
            pos: s.pos,
            delta: s.delta,
            sigma: ev.sigma,
            rgb: ev.rgb,
            alpha,
            transmittance,
        });
        transmittance *= 1.0 - alpha;
        if transmittance < TRANSMITTANCE_CUTOFF {
            break;
        }
    }
    for c in 0..3 {
        color[c] += (1.0 - weight_sum) * bg[c];
    }
    Ok(RayRender { color, weight_sum, records })
}

/// Convenience: sample and render the ray of one pixel. This is the eval
/// path used for reconstruction renders on both the encoder and decoder
/// side — same inputs, same float operations, same bytes out.
pub fn render_pixel(
    frame: &FieldFrame,
    mlp: &RenderMlp,
    occ: &OccupancyGrid,
    camera: &Camera,
    row: u32,
    col: u32,
    bg: [f64; 3],
    step: f64,
) -> Result<[f64; 3]> {
    let ray = camera.ray_for_pixel(row, col)?;
    let samples = sample_ray(&ray, occ, step)?;
    Ok(render_ray(&samples, frame, mlp, &ray, bg)?.color)
}

/// dL/d(sigma_i, rgb_i) for a recorded compositing pass.
///
/// Uses the suffix color recurrence `B_i = alpha_{i+1} rgb_{i+1} +
/// (1 - alpha_{i+1}) B_{i+1}` (with `B` after the last sample equal to the
/// background), giving `dC/dalpha_i = T_i (rgb_i - B_i)` without dividing by
/// survival factors that may be zero for opaque samples.
pub fn composite_backward(
    records: &[SampleRecord],
    bg: [f64; 3],
    d_color: [f64; 3],
) -> Vec<(f64, [f64; 3])> {
    let mut out = vec![(0.0, [0.0; 3]); records.len()];
    let mut suffix = bg;
    for (i, r) in records.iter().enumerate().rev() {
        let mut d_alpha = 0.0;
        let mut d_rgb = [0.0; 3];
        let w = r.transmittance * r.alpha;
        for c in 0..3 {
            d_alpha += d_color[c] * r.transmittance * (r.rgb[c] - suffix[c]);
            d_rgb[c] = d_color[c] * w;
        }
        let d_sigma = d_alpha * r.delta * (1.0 - r.alpha);
        out[i] = (d_sigma, d_rgb);
        for c in 0..3 {
            suffix[c] = r.alpha * r.rgb[c] + (1.0 - r.alpha) * suffix[c];
        }
    }
    out
}

/// Backpropagate a pixel-color gradient through compositing, the MLP and the
/// fused trilinear sampling, accumulating into `frame_grads` (dL/d grid
/// values) and optionally `mlp_grads`. MLP intermediates are recomputed per
/// sample rather than stored.
pub fn render_ray_backward(
    render: &RayRender,
    frame: &FieldFrame,
    mlp: &RenderMlp,
    ray: &Ray,
    bg: [f64; 3],
    d_color: [f64; 3],
    frame_grads: &mut FrameGrads,
    mut mlp_grads: Option<&mut RenderMlpGrads>,
) -> Result<()> {
    if render.records.is_empty() {
        return Ok(());
    }
    let ctx = mlp.ray_context(ray.dir);
    let ch = frame.channels();
    let mut feat = vec![0.0; ch];
    let mut scratch = vec![0.0; ch];
    let mut d_feat = vec![0.0; ch];
    let per_sample = composite_backward(&render.records, bg, d_color);
    for (r, &(d_sigma, d_rgb)) in render.records.iter().zip(per_sample.iter()) {
        frame.fuse_into(r.pos, &mut feat, &mut scratch)?;
        let ev = mlp.forward(&feat, &ctx);
        mlp.backward(&feat, &ctx, &ev, d_rgb, d_sigma, &mut d_feat, mlp_grads.as_deref_mut());
        frame.fuse_backward(r.pos, &d_feat, frame_grads)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{FeatureGrid, FrameType};
    use crate::math::Aabb;

    fn unit_box() -> Aabb {
        Aabb::new(Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0))
    }

    fn test_camera() -> Camera {
        Camera::look_at(
            Vec3::new(0.0, -3.0, 0.0),
            Vec3::ZERO,
            Vec3::new(0.0, 0.0, 1.0),
            8.0,
            8,
            8,
        )
        .unwrap()
    }

    /// Independent pinhole projection: world point to pixel-center
    /// coordinates (row, col), used as the oracle for ray generation.
    fn project(cam: &Camera, p: Vec3) -> (f64, f64) {
        let rel = p - cam.translation;
        // Camera axes are the rotation columns.
        let x = rel.x * cam.rotation[0][0] + rel.y * cam.rotation[1][0] + rel.z * cam.rotation[2][0];
        let y = rel.x * cam.rotation[0][1] + rel.y * cam.rotation[1][1] + rel.z * cam.rotation[2][1];
        let z = rel.x * cam.rotation[0][2] + rel.y * cam.rotation[1][2] + rel.z * cam.rotation[2][2];
        let col = cam.focal * (x / z) + cam.cx - 0.5;
        let row = cam.focal * (y / z) + cam.cy - 0.5;
        (row, col)
    }

    #[test]
    fn principal_point_ray_is_forward() {
        // Principal point at (3.5, 3.5) = center of pixel (3, 3).
        let cam = Camera::new(
            8.0,
            3.5,
            3.5,
            8,
            8,
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            Vec3::ZERO,
        )
        .unwrap();
        let ray = cam.ray_for_pixel(3, 3).unwrap();
        assert!((ray.dir - cam.forward_axis()).norm() < 1e-12);
    }

    #[test]
    fn symmetric_pixels_mirror() {
        let cam = Camera::new(
            8.0,
            4.0,
            4.0,
            8,
            8,
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            Vec3::ZERO,
        )
        .unwrap();
        let a = cam.ray_for_pixel(3, 1).unwrap();
        let b = cam.ray_for_pixel(4, 6).unwrap();
        assert!((a.dir.x + b.dir.x).abs() < 1e-12);
        assert!((a.dir.y + b.dir.y).abs() < 1e-12);
        assert!((a.dir.z - b.dir.z).abs() < 1e-12);
    }

    #[test]
    fn corner_ray_projects_back_to_its_pixel() {
        let cam = test_camera();
        for &(row, col) in &[(0u32, 0u32), (0, 7), (7, 0), (7, 7), (2, 5)] {
            let ray = cam.ray_for_pixel(row, col).unwrap();
            assert!((ray.dir.norm() - 1.0).abs() < 1e-12);
            let p = ray.origin + ray.dir * 2.5;
            let (r, c) = project(&cam, p);
            assert!((r - row as f64).abs() < 1e-9, "row {r} vs {row}");
            assert!((c - col as f64).abs() < 1e-9, "col {c} vs {col}");
        }
    }

    #[test]
    fn out_of_bounds_pixel_is_an_error() {
        let cam = test_camera();
        assert!(matches!(
            cam.ray_for_pixel(8, 0),
            Err(CoreError::PixelOutOfBounds { .. })
        ));
        assert!(generate_rays(&cam, &[(0, 0), (0, 99)]).is_err());
    }

    #[test]
    fn sample_ray_unit_box_four_samples() {
        let occ = OccupancyGrid::new_filled([4, 4, 4], unit_box(), true);
        let ray = Ray {
            origin: Vec3::new(-1.0, 0.5, 0.5),
            dir: Vec3::new(1.0, 0.0, 0.0),
            pixel: (0, 0),
        };
        let samples = sample_ray(&ray, &occ, 0.25).unwrap();
        assert_eq!(samples.len(), 4);
        for (k, s) in samples.iter().enumerate() {
            assert!((s.t - (1.0 + (k as f64 + 0.5) * 0.25)).abs() < 1e-12);
            assert!((s.delta - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_occupancy_and_missing_rays_yield_no_samples() {
        let occ = OccupancyGrid::new_filled([4, 4, 4], unit_box(), false);
        let ray = Ray {
            origin: Vec3::new(-1.0, 0.5, 0.5),
            dir: Vec3::new(1.0, 0.0, 0.0),
            pixel: (0, 0),
        };
        assert!(sample_ray(&ray, &occ, 0.25).unwrap().is_empty());

        let occ = OccupancyGrid::new_filled([4, 4, 4], unit_box(), true);
        let miss = Ray {
            origin: Vec3::new(-1.0, 5.0, 0.5),
            dir: Vec3::new(1.0, 0.0, 0.0),
            pixel: (0, 0),
        };
        assert!(sample_ray(&miss, &occ, 0.25).unwrap().is_empty());
        assert!(sample_ray(&ray, &occ, -1.0).is_err());
    }

    #[test]
    fn composite_zero_density_gives_background_exactly() {
        let bg = [0.2, 0.4, 0.6];
        let samples: Vec<CompositeSample> = (0..10)
            .map(|i| CompositeSample { sigma: 0.0, rgb: [1.0, 0.0, 0.0], delta: 0.1 * i as f64 })
            .collect();
        let (c, w) = composite(&samples, bg);
        assert_eq!(c, bg);
        assert_eq!(w, 0.0);
    }

    #[test]
    fn composite_opaque_first_sample() {
        let samples = [
            CompositeSample { sigma: 50.0, rgb: [1.0, 0.0, 0.0], delta: 1.0 },
            CompositeSample { sigma: 3.0, rgb: [0.0, 1.0, 0.0], delta: 1.0 },
        ];
        let (c, _) = composite(&samples, [0.0; 3]);
        assert!((c[0] - 1.0).abs() < 1e-9);
        assert!(c[1].abs() < 1e-9);
    }

    #[test]
    fn composite_hand_example_half_alphas() {
        let ln2 = core::f64::consts::LN_2;
        let samples = [
            CompositeSample { sigma: ln2, rgb: [1.0, 0.0, 0.0], delta: 1.0 },
            CompositeSample { sigma: ln2 / 0.5, rgb: [0.0, 1.0, 0.0], delta: 0.5 },
        ];
        let (c, w) = composite(&samples, [0.0; 3]);
        assert!((c[0] - 0.5).abs() < 1e-12);
        assert!((c[1] - 0.25).abs() < 1e-12);
        assert!(c[2].abs() < 1e-15);
        assert!((w - 0.75).abs() < 1e-12);
    }

    #[test]
    fn weights_bounded_and_insertion_invariant() {
        for seed in 0..50u64 {
            let n = 1 + (hash3(1, seed, 0) % 20) as usize;
            let samples: Vec<CompositeSample> = (0..n)
                .map(|i| {
                    let h = hash3(2, seed, i as u64);
                    CompositeSample {
                        sigma: crate::math::unit_f64(h) * 30.0,
                        rgb: [
                            crate::math::unit_f64(hash3(3, seed, i as u64)),
                            crate::math::unit_f64(hash3(4, seed, i as u64)),
                            crate::math::unit_f64(hash3(5, seed, i as u64)),
                        ],
                        delta: 0.01 + crate::math::unit_f64(hash3(6, seed, i as u64)),
                    }
                })
                .collect();
            let bg = [0.3, 0.1, 0.9];
            let (c, w) = composite(&samples, bg);
            assert!(w <= 1.0 + 1e-9 && w >= 0.0);

            // Inserting a zero-density sample anywhere must not change the
            // output at all.
            let at = (hash3(7, seed, 0) % (n as u64 + 1)) as usize;
            let mut with_zero = samples.clone();
            with_zero.insert(at, CompositeSample { sigma: 0.0, rgb: [0.5; 3], delta: 0.21 });
            let (c2, w2) = composite(&with_zero, bg);
            assert_eq!(c, c2);
            assert_eq!(w, w2);
        }
    }

    #[test]
    fn single_sample_color_gradient_is_t_alpha() {
        let rec = [SampleRecord {
            pos: Vec3::ZERO,
            delta: 0.7,
            sigma: 1.3,
            rgb: [0.2, 0.5, 0.8],
            alpha: -flt::exp_m1(-1.3 * 0.7),
            transmittance: 1.0,
        }];
        let per = composite_backward(&rec, [0.0; 3], [1.0, 1.0, 1.0]);
        let w = rec[0].alpha;
        for c in 0..3 {
            assert!((per[0].1[c] - w).abs() < 1e-15);
        }
    }

    #[test]
    fn composite_backward_matches_finite_differences() {
        let bg = [0.25, 0.5, 0.1];
        let mut samples: Vec<CompositeSample> = (0..6)
            .map(|i| {
                let h = |t: u64| crate::math::unit_f64(hash3(t, 77, i as u64));
                CompositeSample {
                    sigma: h(1) * 4.0 + 0.1,
                    rgb: [h(2), h(3), h(4)],
                    delta: 0.05 + h(5) * 0.3,
                }
            })
            .collect();

        let forward = |s: &[CompositeSample]| -> [f64; 3] { composite(s, bg).0 };
        // Records for the analytic pass.
        let mut records = Vec::new();
        let mut t = 1.0;
        for s in &samples {
            let alpha = -flt::exp_m1(-s.sigma * s.delta);
            records.push(SampleRecord {
                pos: Vec3::ZERO,
                delta: s.delta,
                sigma: s.sigma,
                rgb: s.rgb,
                alpha,
                transmittance: t,
            });
            t *= 1.0 - alpha;
        }
        let d_color = [0.7, -0.3, 1.1];
        let per = composite_backward(&records, bg, d_color);

        let h = 1e-6;
        for i in 0..samples.len() {
            let orig = samples[i].sigma;
            samples[i].sigma = orig + h;
            let cp = forward(&samples);
            samples[i].sigma = orig - h;
            let cm = forward(&samples);
            samples[i].sigma = orig;
            let fd: f64 =
                (0..3).map(|c| d_color[c] * (cp[c] - cm[c]) / (2.0 * h)).sum();
            let an = per[i].0;
            assert!(
                (fd - an).abs() < 1e-6 * an.abs().max(1.0),
                "sigma {i}: {fd} vs {an}"
            );

            for ch in 0..3 {
                let orig = samples[i].rgb[ch];
                samples[i].rgb[ch] = orig + h;
                let cp = forward(&samples);
                samples[i].rgb[ch] = orig - h;
                let cm = forward(&samples);
                samples[i].rgb[ch] = orig;
                let fd: f64 =
                    (0..3).map(|c| d_color[c] * (cp[c] - cm[c]) / (2.0 * h)).sum();
                let an = per[i].1[ch];
                assert!((fd - an).abs() < 1e-6 * an.abs().max(1.0));
            }
        }
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut mlp = RenderMlp::init(3, 42);
        let dir = Vec3::new(0.3, -0.5, 0.9).normalized();
        let feat = [0.4, -0.2, 0.8];
        let d_rgb = [0.9, -0.4, 0.2];
        let d_sigma = 0.6;

        let ctx = mlp.ray_context(dir);
        let ev = mlp.forward(&feat, &ctx);
        let mut d_feat = vec![0.0; 3];
        let mut grads = RenderMlpGrads::zeros(3);
        mlp.backward(&feat, &ctx, &ev, d_rgb, d_sigma, &mut d_feat, Some(&mut grads));

        let loss = |m: &RenderMlp, f: &[f64]| -> f64 {
            let ctx = m.ray_context(dir);
            let ev = m.forward(f, &ctx);
            let mut l = d_sigma * ev.sigma;
            for c in 0..3 {
                l += d_rgb[c] * ev.rgb[c];
            }
            l
        };

        let h = 1e-6;
        // Feature gradient.
        for c in 0..3 {
            let mut fp = feat;
            let mut fm = feat;
            fp[c] += h;
            fm[c] -= h;
            let fd = (loss(&mlp, &fp) - loss(&mlp, &fm)) / (2.0 * h);
            assert!((fd - d_feat[c]).abs() < 1e-6 * fd.abs().max(1.0));
        }
        // A spread of weight gradients from every tensor.
        for ti in 0..9 {
            let len = mlp.tensors()[ti].len();
            let stride = (len / 7).max(1);
            for idx in (0..len).step_by(stride) {
                let orig = mlp.tensors()[ti][idx];
                mlp.tensors_mut()[ti][idx] = orig + h;
                let lp = loss(&mlp, &feat);
                mlp.tensors_mut()[ti][idx] = orig - h;
                let lm = loss(&mlp, &feat);
                mlp.tensors_mut()[ti][idx] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.tensors()[ti][idx];
                assert!(
                    (fd - an).abs() < 1e-5 * fd.abs().max(1e-3),
                    "tensor {ti} idx {idx}: {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn render_ray_full_pipeline_runs_and_is_deterministic() {
        let coeff =
            FeatureGrid::random_uniform([4, 4, 4], 2, unit_box(), 0.0, 0.5, 1).unwrap();
        let basis =
            FeatureGrid::random_uniform([3, 3, 3], 2, unit_box(), 1.0, 0.2, 2).unwrap();
        let frame =
            FieldFrame::new(coeff, vec![basis], vec![0.02; 2], FrameType::I, 0).unwrap();
        let mlp = RenderMlp::init(2, 3);
        let occ = OccupancyGrid::new_filled([4, 4, 4], unit_box(), true);
        let ray = Ray {
            origin: Vec3::new(-1.0, 0.4, 0.6),
            dir: Vec3::new(1.0, 0.02, -0.03).normalized(),
            pixel: (0, 0),
        };
        let samples = sample_ray(&ray, &occ, 0.1).unwrap();
        assert!(!samples.is_empty());
        let a = render_ray(&samples, &frame, &mlp, &ray, [0.0; 3]).unwrap();
        let b = render_ray(&samples, &frame, &mlp, &ray, [0.0; 3]).unwrap();
        assert_eq!(a.color, b.color);
        assert!(a.weight_sum <= 1.0 + 1e-9);
    }
}
