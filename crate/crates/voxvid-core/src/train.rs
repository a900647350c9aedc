//! Per-frame rate-distortion training and GOP orchestration.
//!
//! Each frame minimizes `MSE + lambda * (rate + alpha * reg)` over its grids,
//! quantization steps and per-frame entropy model (I-frames also train the
//! group-shared rendering MLP). At the end of a frame everything is
//! quantized, entropy-coded, decoded back and the decoded reconstruction is
//! what enters the decode buffer, so the trainer can never drift from the
//! decoder.

use alloc::vec;
use alloc::vec::Vec;

use crate::coder::{
    decode_grid, dequantize_tensor, encode_grid, estimate_grid_bits, quantize_tensor, GridInts,
    QuantizedTensor,
};
use crate::entropy::{
    gather_context, predict_with_eval, rate_backward, rate_bits, rate_value_grad, EntropyGrads,
    ImplicitEntropyModel, Tensor3,
};
use crate::error::{CoreError, Result};
use crate::grid::{
    build_occupancy, FeatureGrid, FieldFrame, FrameGrads, FrameType, OccupancyGrid,
};
use crate::math::{centered_f64, flt, hash2, hash5, Aabb, Vec3};
use crate::quant::quantize_hard;
use crate::render::{
    render_ray, render_ray_backward, sample_ray, Camera, RenderMlp, RenderMlpGrads,
};

/// Fixed number of gradient chunks per ray batch. Each chunk accumulates its
/// own buffers sequentially and the buffers are merged in chunk order, so
/// results do not depend on how threads are scheduled.
const GRAD_CHUNKS: usize = 8;

/// Key spaces for the counter-based randomness.
pub mod streams {
    pub const QUANT_NOISE: u64 = 1;
    pub const PIXEL_VIEW: u64 = 2;
    pub const PIXEL_INDEX: u64 = 3;
    pub const RATE_PICK: u64 = 4;
    pub const COEFF_INIT: u64 = 5;
    pub const BASIS_INIT: u64 = 6;
    pub const MLP_INIT: u64 = 7;
    pub const ENTROPY_INIT: u64 = 8;
}

/// Base key for a per-(frame, iteration, grid) noise stream.
pub fn noise_base(seed: u64, stream: u64, frame: u64, iter: u64, grid: u64) -> u64 {
    hash5(seed, stream, frame, iter, grid)
}

/// Uniform noise in [-1/2, 1/2) for one element of a stream.
#[inline]
pub fn noise_at(base: u64, elem: u64) -> f64 {
    centered_f64(hash2(base, elem))
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Rate-distortion trade-off weight.
    pub lambda: f64,
    /// Residual regularization multiplier: the reg term is weighted
    /// `lambda * alpha`.
    pub alpha: f64,
    /// Frames per group; the first frame of each group is an I-frame.
    pub group_size: usize,
    pub iters_i: usize,
    pub iters_p: usize,
    pub lr_grids: f64,
    pub lr_mlps: f64,
    /// The entropy model rides an exponential output (the Laplace scale),
    /// so it needs larger steps than the rendering MLP to converge within a
    /// frame's iteration budget.
    pub lr_entropy: f64,
    pub lr_qsteps: f64,
    /// Rays per training iteration.
    pub ray_batch: usize,
    /// Voxels per iteration for the stochastic rate term.
    pub rate_batch: usize,
    pub seed: u64,
    pub coeff_dims: [usize; 3],
    pub basis_dims: Vec<[usize; 3]>,
    pub channels: usize,
    pub aabb: Aabb,
    pub background: [f64; 3],
    pub q_init: f64,
    /// When false the quantization steps stay frozen at `q_init` (the
    /// uniform-step ablation baseline).
    pub adaptive_q: bool,
    pub occupancy_dims: [usize; 3],
    pub occupancy_threshold: f64,
    /// Sampling step is the box diagonal divided by this.
    pub step_divisor: f64,
    /// Iterations before the training occupancy is first rebuilt.
    pub occupancy_warmup: usize,
    /// Rebuild period after warmup.
    pub occupancy_refresh: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1e-3,
            alpha: 10.0,
            group_size: 20,
            iters_i: 2200,
            iters_p: 700,
            lr_grids: 0.1,
            lr_mlps: 1e-3,
            lr_entropy: 1e-2,
            lr_qsteps: 3e-3,
            ray_batch: 256,
            rate_batch: 2048,
            seed: 0,
            coeff_dims: [32; 3],
            basis_dims: vec![[32; 3], [16; 3], [8; 3]],
            channels: 4,
            aabb: Aabb::new(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0)),
            background: [0.0; 3],
            q_init: 0.02,
            adaptive_q: true,
            occupancy_dims: [32; 3],
            occupancy_threshold: 1e-2,
            step_divisor: 256.0,
            occupancy_warmup: 160,
            occupancy_refresh: 96,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(CoreError::InvalidConfig(msg.into()));
        if !(self.lambda > 0.0) {
            return bad("lambda must be > 0");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be >= 0");
        }
        if self.group_size < 1 {
            return bad("group_size must be >= 1");
        }
        if self.iters_i < 1 || self.iters_p < 1 {
            return bad("iteration counts must be >= 1");
        }
        if self.ray_batch < 1 || self.rate_batch < 1 {
            return bad("batch sizes must be >= 1");
        }
        if self.channels < 1 {
            return bad("channels must be >= 1");
        }
        if self.basis_dims.is_empty() {
            return bad("at least one basis grid required");
        }
        for d in core::iter::once(&self.coeff_dims).chain(self.basis_dims.iter()) {
            if d.iter().any(|&n| n < 2) {
                return bad("grid dims must be >= 2 per axis");
            }
        }
        if self.occupancy_dims.iter().any(|&n| n < 1) {
            return bad("occupancy dims must be >= 1");
        }
        if !(self.q_init > 0.0) {
            return bad("q_init must be > 0");
        }
        if !(self.step_divisor > 0.0) {
            return bad("step_divisor must be > 0");
        }
        if !self.aabb.is_valid() {
            return bad("training aabb is degenerate");
        }
        Ok(())
    }

    pub fn grid_count(&self) -> usize {
        1 + self.basis_dims.len()
    }

    pub fn sampling_step(&self) -> f64 {
        self.aabb.diagonal() / self.step_divisor
    }

    pub fn frame_type_for(&self, index: usize) -> FrameType {
        if index % self.group_size == 0 {
            FrameType::I
        } else {
            FrameType::P
        }
    }
}

/// One training view: a camera and its ground-truth image as row-major
/// linear RGB in [0, 1].
#[derive(Debug, Clone)]
pub struct TrainView {
    pub camera: Camera,
    pub pixels: Vec<[f64; 3]>,
}

/// Loss components of one iteration. `rate` is mean bits per voxel from the
/// sampled rate term, `reg` the mean residual magnitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub distortion: f64,
    pub rate: f64,
    pub reg: f64,
    pub total: f64,
}

fn assemble_loss(mse: f64, rate: f64, reg: f64, cfg: &TrainConfig, ftype: FrameType) -> LossReport {
    let reg = if ftype == FrameType::I { 0.0 } else { reg };
    LossReport {
        distortion: mse,
        rate,
        reg,
        total: mse + cfg.lambda * (rate + cfg.alpha * reg),
    }
}

/// Assemble the total loss from a rendered batch and its ground truth.
pub fn total_loss(
    rendered: &[[f64; 3]],
    truth: &[[f64; 3]],
    rate_mean: f64,
    reg_mean: f64,
    cfg: &TrainConfig,
    frame_type: FrameType,
) -> Result<LossReport> {
    if rendered.len() != truth.len() || rendered.is_empty() {
        return Err(CoreError::InvalidConfig("rendered/truth pixel counts differ".into()));
    }
    let mut se = 0.0;
    for (r, t) in rendered.iter().zip(truth.iter()) {
        for c in 0..3 {
            let d = r[c] - t[c];
            se += d * d;
        }
    }
    let mse = se / (rendered.len() * 3) as f64;
    let report = assemble_loss(mse, rate_mean, reg_mean, cfg, frame_type);
    if !report.total.is_finite() {
        return Err(CoreError::NonFinite("loss"));
    }
    Ok(report)
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.99;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let bc1 = 1.0 - libm_pow(ADAM_BETA1, state.t);
    let bc2 = 1.0 - libm_pow(ADAM_BETA2, state.t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (flt::sqrt(v_hat) + ADAM_EPS);
    }
}

// Integer power, enough for the bias-correction terms.
fn libm_pow(base: f64, exp: u64) -> f64 {
    // Exponentiation by squaring keeps this exact-ish and std-free.
    let mut acc = 1.0;
    let mut b = base;
    let mut e = exp;
    while e > 0 {
        if e & 1 == 1 {
            acc *= b;
        }
        b *= b;
        e >>= 1;
    }
    acc
}

/// Everything the next frame (and the decoder) knows about the previous one.
#[derive(Debug, Clone)]
pub struct DecodeBuffer {
    pub frame_index: u32,
    /// Absolute dequantized reconstruction, bit-identical to the decoder's.
    pub recon: FieldFrame,
    /// Encoded integer tensors (temporal entropy context).
    pub ints: Vec<GridInts>,
    /// Group-shared rendering MLP, already dequantized.
    pub render_mlp: RenderMlp,
    pub occupancy: OccupancyGrid,
    /// Float entropy model of the previous frame, used only as the warm
    /// start for the next P-frame's training.
    pub entropy_warm: ImplicitEntropyModel,
}

/// One grid's coded form inside a frame.
#[derive(Debug, Clone)]
pub struct CodedGrid {
    pub dims: [usize; 3],
    pub channels: usize,
    pub q: f32,
    pub ints: GridInts,
    pub payload: Vec<u8>,
    pub estimated_bits: f64,
}

/// A trained and entropy-coded frame plus its decoder-exact reconstruction.
#[derive(Debug, Clone)]
pub struct CodedFrame {
    pub frame_index: u32,
    pub frame_type: FrameType,
    pub grids: Vec<CodedGrid>,
    pub entropy_tensors: Vec<QuantizedTensor>,
    /// Present on I-frames only; P-frames inherit the group MLP.
    pub render_tensors: Option<Vec<QuantizedTensor>>,
    pub occupancy: OccupancyGrid,
    pub recon: FieldFrame,
    pub render_mlp: RenderMlp,
    pub reports: Vec<LossReport>,
}

impl CodedFrame {
    /// Total coded payload bits across grids.
    pub fn payload_bits(&self) -> f64 {
        self.grids.iter().map(|g| g.payload.len() as f64 * 8.0).sum()
    }
}

struct TrainState {
    field: FieldFrame,
    s_q: Vec<f64>,
    render_mlp: RenderMlp,
    entropy: ImplicitEntropyModel,
    occ: OccupancyGrid,
    eff: FieldFrame,
    /// Rate-path values, planar per grid/channel.
    sim: Vec<Vec<Vec<f64>>>,
    grid_adam: Vec<AdamState>,
    sq_adam: AdamState,
    mlp_adam: Vec<AdamState>,
    entropy_adam: Vec<AdamState>,
    chunk_grads: Vec<FrameGrads>,
    chunk_mlp_grads: Vec<RenderMlpGrads>,
    grid_grads: FrameGrads,
    mlp_grads: RenderMlpGrads,
    entropy_grads: EntropyGrads,
}

fn init_field(cfg: &TrainConfig, frame_type: FrameType, frame_index: u32) -> Result<FieldFrame> {
    let seed = cfg.seed;
    let f = frame_index as u64;
    let make = |dims: [usize; 3], center: f64, amp: f64, key: u64| {
        FeatureGrid::random_uniform(dims, cfg.channels, cfg.aabb, center, amp, key)
    };
    let (coeff, bases) = match frame_type {
        FrameType::I => {
            let coeff = make(
                cfg.coeff_dims,
                0.0,
                1e-2,
                hash5(seed, streams::COEFF_INIT, f, 0, 0),
            )?;
            // Basis grids start near one: with Hadamard fusion a grid pair
            // that both sit at zero is a saddle the optimizer cannot leave.
            let bases = cfg
                .basis_dims
                .iter()
                .enumerate()
                .map(|(i, &d)| {
                    make(d, 1.0, 1e-2, hash5(seed, streams::BASIS_INIT, f, i as u64, 0))
                })
                .collect::<Result<Vec<_>>>()?;
            (coeff, bases)
        }
        FrameType::P => {
            let coeff = FeatureGrid::zeros(cfg.coeff_dims, cfg.channels, cfg.aabb)?;
            let bases = cfg
                .basis_dims
                .iter()
                .map(|&d| FeatureGrid::zeros(d, cfg.channels, cfg.aabb))
                .collect::<Result<Vec<_>>>()?;
            (coeff, bases)
        }
    };
    FieldFrame::new(coeff, bases, vec![cfg.q_init; cfg.grid_count()], frame_type, frame_index)
}

fn views_ok(views: &[TrainView]) -> Result<()> {
    if views.is_empty() {
        return Err(CoreError::InvalidConfig("a frame needs at least one training view".into()));
    }
    for v in views {
        let n = (v.camera.width * v.camera.height) as usize;
        if v.pixels.len() != n {
            return Err(CoreError::InvalidConfig("view pixel count mismatches camera".into()));
        }
    }
    Ok(())
}

#[cfg(feature = "parallel")]
fn map_chunks<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_chunks<T>(n: usize, f: impl Fn(usize) -> T) -> Vec<T> {
    (0..n).map(f).collect()
}

/// Train one frame against its views and produce its coded form plus the
/// decode buffer for the next frame.
pub fn train_frame(
    views: &[TrainView],
    buffer: Option<&DecodeBuffer>,
    cfg: &TrainConfig,
    frame_type: FrameType,
    frame_index: u32,
) -> Result<(CodedFrame, DecodeBuffer)> {
    cfg.validate()?;
    views_ok(views)?;
    if frame_type == FrameType::P {
        let b = buffer.ok_or(CoreError::MissingReference)?;
        if b.frame_index + 1 != frame_index {
            return Err(CoreError::MissingReference);
        }
    }

    let seed = cfg.seed;
    let fidx = frame_index as u64;
    let n_grids = cfg.grid_count();
    let step = cfg.sampling_step();
    let iters = match frame_type {
        FrameType::I => cfg.iters_i,
        FrameType::P => cfg.iters_p,
    };

    let field = init_field(cfg, frame_type, frame_index)?;
    let render_mlp = match frame_type {
        FrameType::I => {
            RenderMlp::init(cfg.channels, hash5(seed, streams::MLP_INIT, fidx, 0, 0))
        }
        FrameType::P => buffer.unwrap().render_mlp.clone(),
    };
    let entropy = match (frame_type, buffer) {
        (FrameType::P, Some(b)) => b.entropy_warm.clone(),
        _ => ImplicitEntropyModel::init(hash5(seed, streams::ENTROPY_INIT, fidx, 0, 0)),
    };
    let occ = match (frame_type, buffer) {
        (FrameType::P, Some(b)) => b.occupancy.dilated(),
        _ => OccupancyGrid::new_filled(cfg.occupancy_dims, cfg.aabb, true),
    };

    // Previous-frame integer tensors as f64 planes for the training-time
    // temporal context.
    let prev_ctx: Option<Vec<Vec<Vec<f64>>>> = buffer.filter(|_| frame_type == FrameType::P).map(
        |b| {
            b.ints
                .iter()
                .map(|g| {
                    g.planes
                        .iter()
                        .map(|p| p.iter().map(|&i| i as f64).collect())
                        .collect()
                })
                .collect()
        },
    );

    // P-frames inherit the previous frame's learned quantization steps (and
    // entropy model) as their starting point; both stay trainable.
    let s_q_init: Vec<f64> = match (frame_type, buffer) {
        (FrameType::P, Some(b)) => b.recon.qsteps.iter().map(|&q| flt::ln(q)).collect(),
        _ => vec![flt::ln(cfg.q_init); n_grids],
    };

    let mut st = TrainState {
        eff: field.clone(),
        sim: (0..n_grids)
            .map(|g| vec![vec![0.0; field.grid(g).voxel_count()]; cfg.channels])
            .collect(),
        grid_adam: (0..n_grids).map(|g| AdamState::new(field.grid(g).values().len())).collect(),
        sq_adam: AdamState::new(n_grids),
        mlp_adam: RenderMlp::tensor_shapes(cfg.channels).iter().map(|&s| AdamState::new(s)).collect(),
        entropy_adam: ImplicitEntropyModel::tensor_shapes()
            .iter()
            .map(|&s| AdamState::new(s))
            .collect(),
        chunk_grads: (0..GRAD_CHUNKS).map(|_| FrameGrads::zeros_like(&field)).collect(),
        chunk_mlp_grads: (0..GRAD_CHUNKS).map(|_| RenderMlpGrads::zeros(cfg.channels)).collect(),
        grid_grads: FrameGrads::zeros_like(&field),
        mlp_grads: RenderMlpGrads::zeros(cfg.channels),
        entropy_grads: EntropyGrads::zeros(),
        field,
        s_q: s_q_init,
        render_mlp,
        entropy,
        occ,
    };

    let total_values: usize = (0..n_grids).map(|g| st.field.grid(g).values().len()).sum();
    let mut reports = Vec::with_capacity(iters);

    for iter in 0..iters {
        let q: Vec<f64> = st.s_q.iter().map(|&s| flt::exp(s)).collect();

        // Periodic training-occupancy refresh from the current field; the
        // one-cell dilation keeps a margin around a still-growing surface.
        if iter >= cfg.occupancy_warmup
            && (iter - cfg.occupancy_warmup) % cfg.occupancy_refresh == 0
        {
            fill_effective(&mut st.eff, &st.field, buffer, &q, None);
            st.occ = build_occupancy(
                &st.eff,
                &st.render_mlp,
                cfg.occupancy_dims,
                cfg.occupancy_threshold,
            )?
            .dilated();
        }

        // Fresh quantization noise; effective grids and rate-path tensors.
        let noise_keys: Vec<u64> = (0..n_grids)
            .map(|g| noise_base(seed, streams::QUANT_NOISE, fidx, iter as u64, g as u64))
            .collect();
        fill_effective(&mut st.eff, &st.field, buffer, &q, Some(&noise_keys));
        fill_sim(&mut st.sim, &st.field, &q, &noise_keys);

        // Ray batch, drawn independently of lambda so RD sweeps share their
        // sampling schedule.
        let pick_view = noise_base(seed, streams::PIXEL_VIEW, fidx, iter as u64, 0);
        let pick_pixel = noise_base(seed, streams::PIXEL_INDEX, fidx, iter as u64, 0);
        let mut batch: Vec<(usize, u32, u32)> = Vec::with_capacity(cfg.ray_batch);
        for k in 0..cfg.ray_batch {
            let vi = (hash2(pick_view, k as u64) % views.len() as u64) as usize;
            let cam = &views[vi].camera;
            let p = hash2(pick_pixel, k as u64) % (cam.width as u64 * cam.height as u64);
            let row = (p / cam.width as u64) as u32;
            let col = (p % cam.width as u64) as u32;
            batch.push((vi, row, col));
        }

        // Forward + backward over fixed chunks.
        for g in &mut st.chunk_grads {
            g.clear();
        }
        for g in &mut st.chunk_mlp_grads {
            g.clear();
        }
        let want_mlp = frame_type == FrameType::I;
        let chunk_size = batch.len().div_ceil(GRAD_CHUNKS);
        let eff = &st.eff;
        let mlp = &st.render_mlp;
        let occ_ref = &st.occ;
        let batch_ref = &batch;
        let bg = cfg.background;
        let denom = (batch.len() * 3) as f64;
        let outs: Vec<Result<(FrameGrads, RenderMlpGrads, f64)>> =
            map_chunks(GRAD_CHUNKS, |ci| {
                let mut fg = FrameGrads::zeros_like(eff);
                let mut mg = RenderMlpGrads::zeros(eff.channels());
                let mut se = 0.0;
                let lo = ci * chunk_size;
                let hi = ((ci + 1) * chunk_size).min(batch_ref.len());
                for &(vi, row, col) in &batch_ref[lo..hi.max(lo)] {
                    let view = &views[vi];
                    let ray = view.camera.ray_for_pixel(row, col)?;
                    let truth = view.pixels[(row * view.camera.width + col) as usize];
                    let samples = sample_ray(&ray, occ_ref, step)?;
                    let render = render_ray(&samples, eff, mlp, &ray, bg)?;
                    let mut d_color = [0.0; 3];
                    for c in 0..3 {
                        let d = render.color[c] - truth[c];
                        se += d * d;
                        d_color[c] = 2.0 * d / denom;
                    }
                    render_ray_backward(
                        &render,
                        eff,
                        mlp,
                        &ray,
                        bg,
                        d_color,
                        &mut fg,
                        want_mlp.then_some(&mut mg),
                    )?;
                }
                Ok((fg, mg, se))
            });

        st.grid_grads.clear();
        st.mlp_grads.clear();
        let mut se_total = 0.0;
        for out in outs {
            let (fg, mg, se) = out?;
            st.grid_grads.merge(&fg);
            if want_mlp {
                st.mlp_grads.merge(&mg);
            }
            se_total += se;
        }
        let mse = se_total / denom;

        // Render-path gradients for the quantization steps:
        // d eff / d q = u, summed against the grid gradients.
        let mut d_q = vec![0.0; n_grids];
        if cfg.adaptive_q {
            for g in 0..n_grids {
                let grads = &st.grid_grads.grids[g];
                let mut acc = 0.0;
                for (i, &gr) in grads.iter().enumerate() {
                    if gr != 0.0 {
                        acc += gr * noise_at(noise_keys[g], i as u64);
                    }
                }
                d_q[g] = acc;
            }
        }

        // Stochastic rate term on a voxel subsample.
        st.entropy_grads.clear();
        let rate_key = noise_base(seed, streams::RATE_PICK, fidx, iter as u64, 0);
        let mut rate_sum = 0.0;
        let cells_per_grid: Vec<usize> =
            (0..n_grids).map(|g| st.field.grid(g).voxel_count() * cfg.channels).collect();
        let total_cells: usize = cells_per_grid.iter().sum();
        let upstream = cfg.lambda / cfg.rate_batch as f64;
        for k in 0..cfg.rate_batch {
            let mut cell = (hash2(rate_key, k as u64) % total_cells as u64) as usize;
            let mut g = 0;
            while cell >= cells_per_grid[g] {
                cell -= cells_per_grid[g];
                g += 1;
            }
            let voxels = st.field.grid(g).voxel_count();
            let c = cell / voxels;
            let v = cell % voxels;
            let dims = st.field.grid(g).dims();
            let pos = [
                v % dims[0],
                (v / dims[0]) % dims[1],
                v / (dims[0] * dims[1]),
            ];
            let cur = Tensor3::new(dims, st.sim[g][c].as_slice());
            let prev_plane = prev_ctx.as_ref().map(|p| Tensor3::new(dims, p[g][c].as_slice()));
            let ctx = gather_context(&cur, prev_plane.as_ref(), pos);
            let ev = predict_with_eval(&st.entropy, &ctx)
                .map_err(|_| CoreError::Diverged { iteration: iter })?;
            // The model fits the noisy simulated values (that is also what
            // the reported rate measures)...
            let sim_v = st.sim[g][c][v];
            rate_sum += rate_bits(sim_v, &ev.params());
            rate_backward(sim_v, &st.entropy, &ctx, &ev, upstream, &mut st.entropy_grads);
            // ...while grid values and steps follow the rate slope at the
            // noise-free value: the sampled-noise slope is zero-mean at the
            // optimum and Adam would amplify it into a random walk that
            // never lets residuals settle on zero.
            let vi = v * cfg.channels + c;
            let raw = st.field.grid(g).values()[vi];
            let d_clean = upstream * rate_value_grad(raw / q[g], &ev.params());
            if d_clean != 0.0 {
                st.grid_grads.grids[g][vi] += d_clean / q[g];
                if cfg.adaptive_q {
                    d_q[g] += d_clean * (-raw / (q[g] * q[g]));
                }
            }
        }
        let rate_mean = rate_sum / cfg.rate_batch as f64;
        // The render gradients are pure distortion; scale nothing here (the
        // lambda weighting entered through `upstream` on the rate side).

        // Residual regularization (P-frames).
        let mut reg_mean = 0.0;
        if frame_type == FrameType::P {
            let w = cfg.lambda * cfg.alpha / total_values as f64;
            let mut mag = 0.0;
            for g in 0..n_grids {
                let vals = st.field.grid(g).values();
                let grads = &mut st.grid_grads.grids[g];
                for (gr, &v) in grads.iter_mut().zip(vals.iter()) {
                    mag += flt::abs(v);
                    if v > 0.0 {
                        *gr += w;
                    } else if v < 0.0 {
                        *gr -= w;
                    }
                }
            }
            reg_mean = mag / total_values as f64;
        }

        let report = assemble_loss(mse, rate_mean, reg_mean, cfg, frame_type);
        if !report.total.is_finite() {
            return Err(CoreError::Diverged { iteration: iter });
        }
        reports.push(report);

        // Optimizer steps.
        for g in 0..n_grids {
            adam_step(
                st.field.grid_mut(g).values_mut(),
                &st.grid_grads.grids[g],
                &mut st.grid_adam[g],
                cfg.lr_grids,
            );
        }
        if cfg.adaptive_q {
            let ds: Vec<f64> = d_q.iter().zip(q.iter()).map(|(&dq, &qg)| dq * qg).collect();
            adam_step(&mut st.s_q, &ds, &mut st.sq_adam, cfg.lr_qsteps);
            for s in st.s_q.iter_mut() {
                *s = s.clamp(flt::ln(1e-5), flt::ln(100.0));
            }
        }
        {
            let grads = st.entropy_grads.tensors().map(|t| t.to_vec());
            for (i, t) in st.entropy.tensors_mut().into_iter().enumerate() {
                adam_step(t, &grads[i], &mut st.entropy_adam[i], cfg.lr_entropy);
            }
        }
        if want_mlp {
            let grads = st.mlp_grads.tensors().map(|t| t.to_vec());
            for (i, t) in st.render_mlp.tensors_mut().into_iter().enumerate() {
                adam_step(t, &grads[i], &mut st.mlp_adam[i], cfg.lr_mlps);
            }
        }

        // Keep grid values finite and inside the codable range.
        for g in 0..n_grids {
            let bound = q[g] * 32000.0;
            for v in st.field.grid_mut(g).values_mut() {
                if !v.is_finite() {
                    return Err(CoreError::Diverged { iteration: iter });
                }
                *v = v.clamp(-bound, bound);
            }
        }
    }

    finalize_frame(st, buffer, cfg, frame_type, frame_index, reports)
}

/// Overwrite `eff` with the renderable values: previous reconstruction (P)
/// plus current values, plus `q*u` quantization noise when keys are given.
fn fill_effective(
    eff: &mut FieldFrame,
    field: &FieldFrame,
    buffer: Option<&DecodeBuffer>,
    q: &[f64],
    noise_keys: Option<&[u64]>,
) {
    let is_p = field.frame_type == FrameType::P;
    for g in 0..field.grid_count() {
        let src = field.grid(g).values();
        let base = if is_p { Some(buffer.unwrap().recon.grid(g).values()) } else { None };
        let dst = eff.grid_mut(g).values_mut();
        match (base, noise_keys) {
            (Some(b), Some(keys)) => {
                let qg = q[g];
                for i in 0..src.len() {
                    dst[i] = b[i] + src[i] + qg * noise_at(keys[g], i as u64);
                }
            }
            (Some(b), None) => {
                for i in 0..src.len() {
                    dst[i] = b[i] + src[i];
                }
            }
            (None, Some(keys)) => {
                let qg = q[g];
                for i in 0..src.len() {
                    dst[i] = src[i] + qg * noise_at(keys[g], i as u64);
                }
            }
            (None, None) => dst.copy_from_slice(src),
        }
    }
}

/// Rate-path tensors `v/q + u`, planar per grid and channel, sharing the
/// render path's noise stream.
fn fill_sim(sim: &mut [Vec<Vec<f64>>], field: &FieldFrame, q: &[f64], keys: &[u64]) {
    for g in 0..field.grid_count() {
        let grid = field.grid(g);
        let ch = grid.channels();
        let vals = grid.values();
        let qg = q[g];
        for c in 0..ch {
            let plane = &mut sim[g][c];
            for v in 0..plane.len() {
                let i = v * ch + c;
                plane[v] = vals[i] / qg + noise_at(keys[g], i as u64);
            }
        }
    }
}

fn finalize_frame(
    st: TrainState,
    buffer: Option<&DecodeBuffer>,
    cfg: &TrainConfig,
    frame_type: FrameType,
    frame_index: u32,
    reports: Vec<LossReport>,
) -> Result<(CodedFrame, DecodeBuffer)> {
    let n_grids = cfg.grid_count();
    let is_p = frame_type == FrameType::P;

    // Adopt dequantized MLP parameters so the encoder-side models are
    // bit-identical to what the decoder will reconstruct.
    let entropy_tensors: Vec<QuantizedTensor> =
        st.entropy.tensors().iter().map(|t| quantize_tensor(t)).collect();
    let entropy_deq = ImplicitEntropyModel::from_tensors(
        &entropy_tensors.iter().map(dequantize_tensor).collect::<Vec<_>>(),
    )?;
    let (render_tensors, render_mlp) = if is_p {
        (None, buffer.unwrap().render_mlp.clone())
    } else {
        let tensors: Vec<QuantizedTensor> =
            st.render_mlp.tensors().iter().map(|t| quantize_tensor(t)).collect();
        let deq = RenderMlp::from_tensors(
            cfg.channels,
            &tensors.iter().map(dequantize_tensor).collect::<Vec<_>>(),
        )?;
        (Some(tensors), deq)
    };

    // Hard quantization with the transmitted single-precision steps, then
    // reconstruction from exactly those integers.
    let mut recon = st.field.clone();
    recon.frame_type = frame_type;
    let mut coded_grids = Vec::with_capacity(n_grids);
    for g in 0..n_grids {
        let grid = st.field.grid(g);
        let dims = grid.dims();
        let ch = grid.channels();
        let voxels = grid.voxel_count();
        let q32 = flt::exp(st.s_q[g]) as f32;
        let qd = q32 as f64;
        let mut planes = vec![vec![0i32; voxels]; ch];
        for v in 0..voxels {
            for c in 0..ch {
                planes[c][v] = quantize_hard(grid.values()[v * ch + c], qd);
            }
        }
        let ints = GridInts { dims, planes };
        let base = is_p.then(|| buffer.unwrap().recon.grid(g).values());
        let rvals = recon.grid_mut(g).values_mut();
        for v in 0..voxels {
            for c in 0..ch {
                let deq = qd * ints.planes[c][v] as f64;
                let i = v * ch + c;
                rvals[i] = match base {
                    Some(b) => b[i] + deq,
                    None => deq,
                };
            }
        }
        coded_grids.push(CodedGrid {
            dims,
            channels: ch,
            q: q32,
            ints,
            payload: Vec::new(),
            estimated_bits: 0.0,
        });
    }
    recon.qsteps = coded_grids.iter().map(|g| g.q as f64).collect();

    // Entropy-code every grid and verify the round trip; the decoded
    // integers are what the buffer keeps.
    for (g, coded) in coded_grids.iter_mut().enumerate() {
        let prev = if is_p { Some(&buffer.unwrap().ints[g]) } else { None };
        coded.payload = encode_grid(&coded.ints, &entropy_deq, prev)?;
        coded.estimated_bits = estimate_grid_bits(&coded.ints, &entropy_deq, prev)?;
        let back = decode_grid(&coded.payload, coded.dims, coded.channels, &entropy_deq, prev)?;
        if back != coded.ints {
            return Err(CoreError::Internal("grid round trip mismatch during training"));
        }
    }

    let occupancy =
        build_occupancy(&recon, &render_mlp, cfg.occupancy_dims, cfg.occupancy_threshold)?;

    let new_buffer = DecodeBuffer {
        frame_index,
        recon: {
            let mut r = recon.clone();
            r.frame_type = FrameType::I; // buffer holds absolute values
            r
        },
        ints: coded_grids.iter().map(|g| g.ints.clone()).collect(),
        render_mlp: render_mlp.clone(),
        occupancy: occupancy.clone(),
        entropy_warm: st.entropy,
    };

    let coded = CodedFrame {
        frame_index,
        frame_type,
        grids: coded_grids,
        entropy_tensors,
        render_tensors,
        occupancy,
        recon,
        render_mlp,
        reports,
    };
    Ok((coded, new_buffer))
}

/// Train a whole sequence: frames `0, group_size, 2*group_size, ...` are
/// I-frames, the rest P-frames chained through the decode buffer.
pub fn train_sequence(
    frames: &[Vec<TrainView>],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&CodedFrame),
) -> Result<Vec<CodedFrame>> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(CoreError::InvalidConfig("empty frame sequence".into()));
    }
    let mut buffer: Option<DecodeBuffer> = None;
    let mut out = Vec::with_capacity(frames.len());
    for (t, views) in frames.iter().enumerate() {
        let ftype = cfg.frame_type_for(t);
        let (coded, next) = train_frame(views, buffer.as_ref(), cfg, ftype, t as u32)?;
        progress(&coded);
        buffer = Some(next);
        out.push(coded);
    }
    Ok(out)
}
