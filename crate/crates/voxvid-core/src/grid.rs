//! Voxel feature-field data structures: dense coefficient/basis grids with
//! trilinear sampling and exact gradients, Hadamard feature fusion, and the
//! binary occupancy grid.
//!
//! Grids are node-centered: a grid with `dims = [nx, ny, nz]` places nodes on
//! a regular lattice spanning the bounding box, `nx * ny * nz` voxels in
//! raster order (z outermost, then y, then x) with `channels` values per
//! voxel stored contiguously.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math::{flt, hash2, symmetric_f64, Aabb, Vec3};
use crate::render::RenderMlp;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameType {
    I,
    P,
}

/// Upper bound on feature channels, so per-sample paths can use stack
/// buffers.
pub const MAX_CHANNELS: usize = 16;

/// Dense feature grid over an axis-aligned box.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    dims: [usize; 3],
    channels: usize,
    aabb: Aabb,
    values: Vec<f64>,
}

impl FeatureGrid {
    pub fn filled(dims: [usize; 3], channels: usize, aabb: Aabb, value: f64) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) || channels == 0 {
            return Err(CoreError::InvalidConfig(format!(
                "grid dims {dims:?} x {channels} channels must be positive"
            )));
        }
        if !aabb.is_valid() {
            return Err(CoreError::InvalidConfig("degenerate grid aabb".into()));
        }
        let len = dims[0] * dims[1] * dims[2] * channels;
        Ok(FeatureGrid { dims, channels, aabb, values: vec![value; len] })
    }

    pub fn zeros(dims: [usize; 3], channels: usize, aabb: Aabb) -> Result<Self> {
        Self::filled(dims, channels, aabb, 0.0)
    }

    /// Values uniform in `center ± amp`, drawn from the keyed hash stream.
    pub fn random_uniform(
        dims: [usize; 3],
        channels: usize,
        aabb: Aabb,
        center: f64,
        amp: f64,
        key: u64,
    ) -> Result<Self> {
        let mut g = Self::zeros(dims, channels, aabb)?;
        for (i, v) in g.values.iter_mut().enumerate() {
            *v = center + symmetric_f64(hash2(key, i as u64), amp);
        }
        Ok(g)
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn aabb(&self) -> Aabb {
        self.aabb
    }

    #[inline]
    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Raster voxel index: z outer, y middle, x inner.
    #[inline]
    pub fn voxel_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.dims[1] + iy) * self.dims[0] + ix
    }

    #[inline]
    pub fn value_index(&self, ix: usize, iy: usize, iz: usize, c: usize) -> usize {
        self.voxel_index(ix, iy, iz) * self.channels + c
    }

    pub fn set(&mut self, ix: usize, iy: usize, iz: usize, c: usize, v: f64) {
        let i = self.value_index(ix, iy, iz, c);
        self.values[i] = v;
    }

    pub fn get(&self, ix: usize, iy: usize, iz: usize, c: usize) -> f64 {
        self.values[self.value_index(ix, iy, iz, c)]
    }

    /// World position of a lattice node.
    pub fn node_position(&self, ix: usize, iy: usize, iz: usize) -> Vec3 {
        let s = self.node_spacing();
        self.aabb.min + Vec3::new(ix as f64 * s.x, iy as f64 * s.y, iz as f64 * s.z)
    }

    fn node_spacing(&self) -> Vec3 {
        let size = self.aabb.size();
        Vec3::new(
            if self.dims[0] > 1 { size.x / (self.dims[0] - 1) as f64 } else { 0.0 },
            if self.dims[1] > 1 { size.y / (self.dims[1] - 1) as f64 } else { 0.0 },
            if self.dims[2] > 1 { size.z / (self.dims[2] - 1) as f64 } else { 0.0 },
        )
    }

    /// Continuous lattice coordinates of a world point, or an error when the
    /// point is outside the box. Never extrapolates.
    fn lattice_coords(&self, p: Vec3) -> Result<[f64; 3]> {
        if !self.aabb.contains(p) {
            return Err(CoreError::OutOfBounds);
        }
        let size = self.aabb.size();
        let rel = p - self.aabb.min;
        let coord = |r: f64, s: f64, n: usize| -> f64 {
            if n > 1 {
                (r / s) * (n - 1) as f64
            } else {
                0.0
            }
        };
        Ok([
            coord(rel.x, size.x, self.dims[0]),
            coord(rel.y, size.y, self.dims[1]),
            coord(rel.z, size.z, self.dims[2]),
        ])
    }

    /// Cell anchor and fractional weights for trilinear interpolation.
    fn corner_setup(&self, p: Vec3) -> Result<([usize; 3], [f64; 3])> {
        let u = self.lattice_coords(p)?;
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let n = self.dims[a];
            if n == 1 {
                continue;
            }
            let i = (flt::floor(u[a]) as usize).min(n - 2);
            base[a] = i;
            frac[a] = u[a] - i as f64;
        }
        Ok((base, frac))
    }

    /// Trilinear interpolation of the 8 surrounding voxel feature vectors.
    /// `out` must have length `channels`.
    pub fn sample_into(&self, p: Vec3, out: &mut [f64]) -> Result<()> {
        debug_assert_eq!(out.len(), self.channels);
        let (base, frac) = self.corner_setup(p)?;
        out.fill(0.0);
        for dz in 0..2usize {
            let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
            if wz == 0.0 && self.dims[2] > 1 {
                continue;
            }
            let iz = (base[2] + dz).min(self.dims[2] - 1);
            for dy in 0..2usize {
                let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                if wy == 0.0 && self.dims[1] > 1 {
                    continue;
                }
                let iy = (base[1] + dy).min(self.dims[1] - 1);
                for dx in 0..2usize {
                    let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                    if wx == 0.0 && self.dims[0] > 1 {
                        continue;
                    }
                    let ix = (base[0] + dx).min(self.dims[0] - 1);
                    let w = wx * wy * wz;
                    let off = self.value_index(ix, iy, iz, 0);
                    for (c, o) in out.iter_mut().enumerate() {
                        *o += w * self.values[off + c];
                    }
                }
            }
        }
        Ok(())
    }

    /// Scatter `upstream` (dL/dfeature) onto the 8 corner voxels of `grad`
    /// (same layout as [`Self::values`]) and return the gradient with respect
    /// to the query position.
    pub fn sample_backward(
        &self,
        p: Vec3,
        upstream: &[f64],
        grad: &mut [f64],
    ) -> Result<Vec3> {
        debug_assert_eq!(upstream.len(), self.channels);
        debug_assert_eq!(grad.len(), self.values.len());
        let (base, frac) = self.corner_setup(p)?;
        let spacing = self.node_spacing();
        let mut dpos = Vec3::ZERO;
        for dz in 0..2usize {
            let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
            let gz = if dz == 0 { -1.0 } else { 1.0 };
            let iz = (base[2] + dz).min(self.dims[2] - 1);
            if self.dims[2] == 1 && dz == 1 {
                continue;
            }
            for dy in 0..2usize {
                let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                let gy = if dy == 0 { -1.0 } else { 1.0 };
                let iy = (base[1] + dy).min(self.dims[1] - 1);
                if self.dims[1] == 1 && dy == 1 {
                    continue;
                }
                for dx in 0..2usize {
                    let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                    let gx = if dx == 0 { -1.0 } else { 1.0 };
                    let ix = (base[0] + dx).min(self.dims[0] - 1);
                    if self.dims[0] == 1 && dx == 1 {
                        continue;
                    }
                    let w = wx * wy * wz;
                    let off = self.value_index(ix, iy, iz, 0);
                    let mut up_dot_v = 0.0;
                    for (c, &u) in upstream.iter().enumerate() {
                        grad[off + c] += w * u;
                        up_dot_v += u * self.values[off + c];
                    }
                    // d w / d lattice coordinate, converted to world units.
                    if self.dims[0] > 1 && spacing.x > 0.0 {
                        dpos.x += gx * wy * wz * up_dot_v / spacing.x;
                    }
                    if self.dims[1] > 1 && spacing.y > 0.0 {
                        dpos.y += wx * gy * wz * up_dot_v / spacing.y;
                    }
                    if self.dims[2] > 1 && spacing.z > 0.0 {
                        dpos.z += wx * wy * gz * up_dot_v / spacing.z;
                    }
                }
            }
        }
        Ok(dpos)
    }
}

/// Free-function form of [`FeatureGrid::sample_into`].
pub fn trilinear_sample(grid: &FeatureGrid, p: Vec3) -> Result<Vec<f64>> {
    let mut out = vec![0.0; grid.channels()];
    grid.sample_into(p, &mut out)?;
    Ok(out)
}

/// Free-function form of [`FeatureGrid::sample_backward`].
pub fn trilinear_backward(
    grid: &FeatureGrid,
    p: Vec3,
    upstream: &[f64],
    grad: &mut [f64],
) -> Result<Vec3> {
    grid.sample_backward(p, upstream, grad)
}

/// One frame's explicit representation: a coefficient grid plus multi-scale
/// basis grids and one quantization step per grid. For P-frames the stored
/// values are the residual against the previous reconstruction; for I-frames
/// they are absolute.
#[derive(Debug, Clone)]
pub struct FieldFrame {
    pub coeff: FeatureGrid,
    pub bases: Vec<FeatureGrid>,
    pub qsteps: Vec<f64>,
    pub frame_type: FrameType,
    pub frame_index: u32,
}

impl FieldFrame {
    pub fn new(
        coeff: FeatureGrid,
        bases: Vec<FeatureGrid>,
        qsteps: Vec<f64>,
        frame_type: FrameType,
        frame_index: u32,
    ) -> Result<Self> {
        if bases.is_empty() {
            return Err(CoreError::InvalidConfig("at least one basis grid required".into()));
        }
        if coeff.channels() > MAX_CHANNELS {
            return Err(CoreError::InvalidConfig(format!(
                "at most {MAX_CHANNELS} feature channels supported"
            )));
        }
        for b in &bases {
            if b.channels() != coeff.channels() {
                return Err(CoreError::InvalidConfig(format!(
                    "basis channels {} != coefficient channels {}",
                    b.channels(),
                    coeff.channels()
                )));
            }
        }
        if qsteps.len() != 1 + bases.len() {
            return Err(CoreError::InvalidConfig(format!(
                "expected {} qsteps, got {}",
                1 + bases.len(),
                qsteps.len()
            )));
        }
        if qsteps.iter().any(|&q| !(q > 0.0) || !q.is_finite()) {
            return Err(CoreError::InvalidConfig("qsteps must be strictly positive".into()));
        }
        Ok(FieldFrame { coeff, bases, qsteps, frame_type, frame_index })
    }

    #[inline]
    pub fn grid_count(&self) -> usize {
        1 + self.bases.len()
    }

    /// Grid 0 is the coefficient grid, 1.. are the basis grids by scale.
    #[inline]
    pub fn grid(&self, i: usize) -> &FeatureGrid {
        if i == 0 {
            &self.coeff
        } else {
            &self.bases[i - 1]
        }
    }

    #[inline]
    pub fn grid_mut(&mut self, i: usize) -> &mut FeatureGrid {
        if i == 0 {
            &mut self.coeff
        } else {
            &mut self.bases[i - 1]
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.coeff.channels()
    }

    #[inline]
    pub fn aabb(&self) -> Aabb {
        self.coeff.aabb()
    }

    /// Coefficient feature, Hadamard-multiplied with the mean basis feature.
    /// `out` must have length `channels`; `scratch` is a caller-provided
    /// buffer of the same length. Allocation-free: this sits in the
    /// per-sample hot path.
    pub fn fuse_into(&self, p: Vec3, out: &mut [f64], scratch: &mut [f64]) -> Result<()> {
        // Mean basis feature accumulates in `out`, then the coefficient
        // feature multiplies in from `scratch`.
        out.fill(0.0);
        for b in &self.bases {
            b.sample_into(p, scratch)?;
            for (o, &s) in out.iter_mut().zip(scratch.iter()) {
                *o += s;
            }
        }
        let inv = 1.0 / self.bases.len() as f64;
        self.coeff.sample_into(p, scratch)?;
        for (o, &c) in out.iter_mut().zip(scratch.iter()) {
            *o = *o * inv * c;
        }
        Ok(())
    }

    /// Backward pass of [`Self::fuse_into`]: scatters dL/dfused into the
    /// per-grid gradient buffers of `grads`. Channel count is capped at
    /// [`MAX_CHANNELS`] so the hot path can use stack buffers.
    pub fn fuse_backward(&self, p: Vec3, upstream: &[f64], grads: &mut FrameGrads) -> Result<()> {
        let ch = self.channels();
        debug_assert!(ch <= MAX_CHANNELS);
        let mut coeff_feat = [0.0; MAX_CHANNELS];
        let mut mean = [0.0; MAX_CHANNELS];
        let mut scratch = [0.0; MAX_CHANNELS];
        self.coeff.sample_into(p, &mut coeff_feat[..ch])?;
        for b in &self.bases {
            b.sample_into(p, &mut scratch[..ch])?;
            for (m, &s) in mean[..ch].iter_mut().zip(scratch[..ch].iter()) {
                *m += s;
            }
        }
        let inv = 1.0 / self.bases.len() as f64;
        for m in mean[..ch].iter_mut() {
            *m *= inv;
        }

        // fused = coeff * mean  =>  d coeff = up * mean, d mean = up * coeff
        let mut d_coeff = [0.0; MAX_CHANNELS];
        let mut d_basis = [0.0; MAX_CHANNELS];
        for c in 0..ch {
            d_coeff[c] = upstream[c] * mean[c];
            d_basis[c] = upstream[c] * coeff_feat[c] * inv;
        }
        self.coeff.sample_backward(p, &d_coeff[..ch], &mut grads.grids[0])?;
        for (k, b) in self.bases.iter().enumerate() {
            b.sample_backward(p, &d_basis[..ch], &mut grads.grids[k + 1])?;
        }
        Ok(())
    }
}

/// Free-function form of [`FieldFrame::fuse_into`].
pub fn fuse_features(frame: &FieldFrame, p: Vec3) -> Result<Vec<f64>> {
    let ch = frame.channels();
    let mut out = vec![0.0; ch];
    let mut scratch = vec![0.0; ch];
    frame.fuse_into(p, &mut out, &mut scratch)?;
    Ok(out)
}

/// Value-gradient buffers matching a [`FieldFrame`]'s grids (0 = coefficient,
/// 1.. = bases). Accumulation is additive, so per-batch buffers merged by
/// summation equal the sequential sum.
#[derive(Debug, Clone)]
pub struct FrameGrads {
    pub grids: Vec<Vec<f64>>,
}

impl FrameGrads {
    pub fn zeros_like(frame: &FieldFrame) -> Self {
        let grids = (0..frame.grid_count())
            .map(|i| vec![0.0; frame.grid(i).values().len()])
            .collect();
        FrameGrads { grids }
    }

    pub fn clear(&mut self) {
        for g in &mut self.grids {
            g.fill(0.0);
        }
    }

    pub fn merge(&mut self, other: &FrameGrads) {
        for (a, b) in self.grids.iter_mut().zip(other.grids.iter()) {
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += y;
            }
        }
    }
}

/// Binary occupancy over a cell grid spanning the same box as the field.
/// Cells, not nodes: cell `(i, j, k)` covers a box of size `aabb/dims`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub dims: [usize; 3],
    pub aabb: Aabb,
    bits: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new_filled(dims: [usize; 3], aabb: Aabb, value: bool) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        OccupancyGrid { dims, aabb, bits: vec![value; n] }
    }

    #[inline]
    pub fn cell_count(&self) -> usize {
        self.bits.len()
    }

    #[inline]
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn cell_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.dims[1] + iy) * self.dims[0] + ix
    }

    pub fn set(&mut self, idx: usize, v: bool) {
        self.bits[idx] = v;
    }

    pub fn get(&self, idx: usize) -> bool {
        self.bits[idx]
    }

    pub fn cell_center(&self, ix: usize, iy: usize, iz: usize) -> Vec3 {
        let size = self.aabb.size();
        self.aabb.min
            + Vec3::new(
                (ix as f64 + 0.5) * size.x / self.dims[0] as f64,
                (iy as f64 + 0.5) * size.y / self.dims[1] as f64,
                (iz as f64 + 0.5) * size.z / self.dims[2] as f64,
            )
    }

    pub fn cell_diagonal(&self) -> f64 {
        let size = self.aabb.size();
        let d = Vec3::new(
            size.x / self.dims[0] as f64,
            size.y / self.dims[1] as f64,
            size.z / self.dims[2] as f64,
        );
        d.norm()
    }

    /// Whether the cell containing `p` is occupied. Points outside the box
    /// count as empty.
    #[inline]
    pub fn occupied_at(&self, p: Vec3) -> bool {
        if !self.aabb.contains(p) {
            return false;
        }
        let size = self.aabb.size();
        let rel = p - self.aabb.min;
        let ix = ((rel.x / size.x * self.dims[0] as f64) as usize).min(self.dims[0] - 1);
        let iy = ((rel.y / size.y * self.dims[1] as f64) as usize).min(self.dims[1] - 1);
        let iz = ((rel.z / size.z * self.dims[2] as f64) as usize).min(self.dims[2] - 1);
        self.bits[self.cell_index(ix, iy, iz)]
    }

    /// Pack 8 cells per byte, raster order, LSB first, zero padding in the
    /// final byte.
    pub fn pack_bits(&self) -> Vec<u8> {
        pack_bools(&self.bits)
    }

    pub fn from_packed(dims: [usize; 3], aabb: Aabb, packed: &[u8]) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        let bits = unpack_bools(packed, n)?;
        Ok(OccupancyGrid { dims, aabb, bits })
    }

    /// Grow occupancy by one cell in all 26 directions. Training-side helper
    /// so refreshed occupancy never starves a still-growing surface.
    pub fn dilated(&self) -> OccupancyGrid {
        let mut out = self.clone();
        let [nx, ny, nz] = self.dims;
        for iz in 0..nz {
            for iy in 0..ny {
                for ix in 0..nx {
                    if self.bits[self.cell_index(ix, iy, iz)] {
                        continue;
                    }
                    'scan: for dz in -1i64..=1 {
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                let (jx, jy, jz) =
                                    (ix as i64 + dx, iy as i64 + dy, iz as i64 + dz);
                                if jx < 0 || jy < 0 || jz < 0 {
                                    continue;
                                }
                                let (jx, jy, jz) = (jx as usize, jy as usize, jz as usize);
                                if jx >= nx || jy >= ny || jz >= nz {
                                    continue;
                                }
                                if self.bits[self.cell_index(jx, jy, jz)] {
                                    let idx = out.cell_index(ix, iy, iz);
                                    out.bits[idx] = true;
                                    break 'scan;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn count_occupied(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

pub fn pack_bools(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bools(bytes: &[u8], n: usize) -> Result<Vec<bool>> {
    if bytes.len() != n.div_ceil(8) {
        return Err(CoreError::CorruptStream("occupancy byte count mismatch"));
    }
    // Padding bits in the final byte must be zero.
    if n % 8 != 0 {
        let last = bytes[bytes.len() - 1];
        if last >> (n % 8) != 0 {
            return Err(CoreError::CorruptStream("nonzero occupancy padding bits"));
        }
    }
    Ok((0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}

/// Mark cells whose opacity at the cell center exceeds `threshold`, with
/// `alpha = 1 - exp(-sigma * delta)` and `delta` the cell diagonal.
pub fn build_occupancy(
    frame: &FieldFrame,
    mlp: &RenderMlp,
    dims: [usize; 3],
    threshold: f64,
) -> Result<OccupancyGrid> {
    let mut occ = OccupancyGrid::new_filled(dims, frame.aabb(), false);
    let delta = occ.cell_diagonal();
    let ch = frame.channels();
    let mut feat = vec![0.0; ch];
    let mut scratch = vec![0.0; ch];
    for iz in 0..dims[2] {
        for iy in 0..dims[1] {
            for ix in 0..dims[0] {
                let p = occ.cell_center(ix, iy, iz);
                frame.fuse_into(p, &mut feat, &mut scratch)?;
                let sigma = mlp.density(&feat);
                let alpha = -flt::exp_m1(-sigma * delta);
                let idx = occ.cell_index(ix, iy, iz);
                occ.set(idx, alpha >= threshold);
            }
        }
    }
    Ok(occ)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::hash3;

    fn unit_box() -> Aabb {
        Aabb::new(Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 1.0))
    }

    fn random_grid(dims: [usize; 3], channels: usize, key: u64) -> FeatureGrid {
        FeatureGrid::random_uniform(dims, channels, unit_box(), 0.0, 1.0, key).unwrap()
    }

    #[test]
    fn sample_at_node_returns_node_value() {
        let mut g = FeatureGrid::zeros([3, 3, 3], 2, unit_box()).unwrap();
        g.set(1, 2, 0, 0, 4.25);
        g.set(1, 2, 0, 1, -1.5);
        let p = g.node_position(1, 2, 0);
        let v = trilinear_sample(&g, p).unwrap();
        assert_eq!(v, vec![4.25, -1.5]);
    }

    #[test]
    fn constant_grid_samples_constant() {
        let g = FeatureGrid::filled([4, 3, 5], 3, unit_box(), 3.5).unwrap();
        for &p in &[
            Vec3::new(0.31, 0.77, 0.12),
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 1.0, 1.0),
            Vec3::new(0.999, 0.001, 0.5),
        ] {
            let v = trilinear_sample(&g, p).unwrap();
            for &x in &v {
                assert!((x - 3.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn midpoint_between_two_nodes_is_their_mean() {
        // Nodes (0,0,0) and (1,0,0) hold 1.0 and 3.0; midpoint must be 2.0,
        // matching the hand-expanded trilinear weights (0.5, 0.5, rest 0).
        let mut g = FeatureGrid::zeros([2, 2, 2], 1, unit_box()).unwrap();
        g.set(0, 0, 0, 0, 1.0);
        g.set(1, 0, 0, 0, 3.0);
        let v = trilinear_sample(&g, Vec3::new(0.5, 0.0, 0.0)).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn out_of_box_is_an_error() {
        let g = FeatureGrid::zeros([2, 2, 2], 1, unit_box()).unwrap();
        assert_eq!(
            trilinear_sample(&g, Vec3::new(1.0001, 0.5, 0.5)).unwrap_err(),
            CoreError::OutOfBounds
        );
        assert_eq!(
            trilinear_sample(&g, Vec3::new(0.5, -0.1, 0.5)).unwrap_err(),
            CoreError::OutOfBounds
        );
    }

    #[test]
    fn axis_sweep_matches_1d_linear_interpolation() {
        let mut g = FeatureGrid::zeros([5, 2, 2], 1, unit_box()).unwrap();
        let nodes = [0.3, -1.2, 4.0, 2.5, 0.9];
        for (i, &v) in nodes.iter().enumerate() {
            for iy in 0..2 {
                for iz in 0..2 {
                    g.set(i, iy, iz, 0, v);
                }
            }
        }
        for k in 0..=200 {
            let x = k as f64 / 200.0;
            let u = x * 4.0;
            let i = (u.floor() as usize).min(3);
            let f = u - i as f64;
            let expect = nodes[i] * (1.0 - f) + nodes[i + 1] * f;
            let got = trilinear_sample(&g, Vec3::new(x, 0.37, 0.81)).unwrap()[0];
            assert!((got - expect).abs() < 1e-12, "x={x}: {got} vs {expect}");
        }
    }

    #[test]
    fn backward_at_node_scatters_full_upstream() {
        let g = random_grid([3, 3, 3], 2, 7);
        let p = g.node_position(2, 1, 0);
        let mut grad = vec![0.0; g.values().len()];
        g.sample_backward(p, &[2.0, -3.0], &mut grad).unwrap();
        let idx = g.value_index(2, 1, 0, 0);
        assert_eq!(grad[idx], 2.0);
        assert_eq!(grad[idx + 1], -3.0);
        let nonzero = grad.iter().filter(|&&x| x != 0.0).count();
        assert_eq!(nonzero, 2);
    }

    #[test]
    fn zero_upstream_scatters_nothing() {
        let g = random_grid([3, 3, 3], 2, 8);
        let mut grad = vec![0.0; g.values().len()];
        g.sample_backward(Vec3::new(0.4, 0.6, 0.2), &[0.0, 0.0], &mut grad).unwrap();
        assert!(grad.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut g = random_grid([4, 3, 3], 2, 9);
        // Off-node points: the position derivative is one-sided at lattice
        // nodes, where central differences straddle the kink.
        let points = [
            Vec3::new(0.21, 0.55, 0.83),
            Vec3::new(0.91, 0.13, 0.41),
            Vec3::new(0.45, 0.52, 0.48),
        ];
        let upstream = [0.7, -1.3];
        for p in points {
            let mut grad = vec![0.0; g.values().len()];
            let dpos = g.sample_backward(p, &upstream, &mut grad).unwrap();

            // Corner-value gradients against central differences.
            let h = 1e-5;
            for idx in 0..g.values().len() {
                if grad[idx] == 0.0 {
                    continue;
                }
                let orig = g.values()[idx];
                g.values_mut()[idx] = orig + h;
                let vp = trilinear_sample(&g, p).unwrap();
                g.values_mut()[idx] = orig - h;
                let vm = trilinear_sample(&g, p).unwrap();
                g.values_mut()[idx] = orig;
                let fd: f64 = upstream
                    .iter()
                    .zip(vp.iter().zip(vm.iter()))
                    .map(|(&u, (&a, &b))| u * (a - b) / (2.0 * h))
                    .sum();
                let rel = (fd - grad[idx]).abs() / fd.abs().max(grad[idx].abs()).max(1e-12);
                assert!(rel < 1e-6, "idx {idx}: fd {fd} vs {}", grad[idx]);
            }

            // Position gradient against central differences.
            let h = 1e-6;
            let fd_axis = |dp: Vec3| -> f64 {
                let vp = trilinear_sample(&g, p + dp).unwrap();
                let vm = trilinear_sample(&g, p - dp).unwrap();
                upstream
                    .iter()
                    .zip(vp.iter().zip(vm.iter()))
                    .map(|(&u, (&a, &b))| u * (a - b) / (2.0 * h))
                    .sum()
            };
            let fd = Vec3::new(
                fd_axis(Vec3::new(h, 0.0, 0.0)),
                fd_axis(Vec3::new(0.0, h, 0.0)),
                fd_axis(Vec3::new(0.0, 0.0, h)),
            );
            assert!((fd - dpos).norm() < 1e-6 * dpos.norm().max(1.0), "{fd:?} vs {dpos:?}");
        }
    }

    fn small_frame(key: u64) -> FieldFrame {
        let coeff = random_grid([4, 4, 4], 2, key);
        let bases = vec![random_grid([4, 4, 4], 2, key + 1), random_grid([3, 3, 3], 2, key + 2)];
        FieldFrame::new(coeff, bases, vec![0.02; 3], FrameType::I, 0).unwrap()
    }

    #[test]
    fn fuse_identity_and_zero() {
        let coeff = random_grid([3, 3, 3], 2, 11);
        let ones = FeatureGrid::filled([3, 3, 3], 2, unit_box(), 1.0).unwrap();
        let frame =
            FieldFrame::new(coeff.clone(), vec![ones.clone(), ones], vec![0.1; 3], FrameType::I, 0)
                .unwrap();
        let p = Vec3::new(0.3, 0.8, 0.2);
        let fused = fuse_features(&frame, p).unwrap();
        let direct = trilinear_sample(&coeff, p).unwrap();
        for (a, b) in fused.iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-14);
        }

        let zero_coeff = FeatureGrid::zeros([3, 3, 3], 2, unit_box()).unwrap();
        let frame2 = FieldFrame::new(
            zero_coeff,
            vec![random_grid([3, 3, 3], 2, 13)],
            vec![0.1; 2],
            FrameType::I,
            0,
        )
        .unwrap();
        let fused2 = fuse_features(&frame2, p).unwrap();
        assert!(fused2.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fuse_elementwise_arithmetic() {
        let b = unit_box();
        let coeff = FeatureGrid::filled([2, 2, 2], 2, b, 2.0).unwrap();
        let mut b1 = FeatureGrid::filled([2, 2, 2], 2, b, 0.0).unwrap();
        let mut b2 = FeatureGrid::filled([2, 2, 2], 2, b, 0.0).unwrap();
        // Basis means per channel: (0.5, 3.0).
        for iz in 0..2 {
            for iy in 0..2 {
                for ix in 0..2 {
                    b1.set(ix, iy, iz, 0, 0.25);
                    b1.set(ix, iy, iz, 1, 2.0);
                    b2.set(ix, iy, iz, 0, 0.75);
                    b2.set(ix, iy, iz, 1, 4.0);
                }
            }
        }
        let frame = FieldFrame::new(coeff, vec![b1, b2], vec![0.1; 3], FrameType::I, 0).unwrap();
        let fused = fuse_features(&frame, Vec3::new(0.4, 0.4, 0.4)).unwrap();
        assert!((fused[0] - 1.0).abs() < 1e-12);
        assert!((fused[1] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn fuse_channel_mismatch_rejected_at_construction() {
        let coeff = random_grid([3, 3, 3], 2, 20);
        let bad = random_grid([3, 3, 3], 1, 21);
        assert!(matches!(
            FieldFrame::new(coeff, vec![bad], vec![0.1; 2], FrameType::I, 0),
            Err(CoreError::InvalidConfig(_))
        ));
    }

    #[test]
    fn fuse_backward_matches_finite_differences() {
        let frame = small_frame(31);
        let p = Vec3::new(0.37, 0.62, 0.18);
        let upstream = [1.1, -0.4];
        let mut grads = FrameGrads::zeros_like(&frame);
        frame.fuse_backward(p, &upstream, &mut grads).unwrap();

        let mut frame_fd = frame.clone();
        let h = 1e-5;
        for gi in 0..frame.grid_count() {
            for idx in 0..frame.grid(gi).values().len() {
                let analytic = grads.grids[gi][idx];
                if analytic == 0.0 {
                    continue;
                }
                let orig = frame_fd.grid(gi).values()[idx];
                frame_fd.grid_mut(gi).values_mut()[idx] = orig + h;
                let vp = fuse_features(&frame_fd, p).unwrap();
                frame_fd.grid_mut(gi).values_mut()[idx] = orig - h;
                let vm = fuse_features(&frame_fd, p).unwrap();
                frame_fd.grid_mut(gi).values_mut()[idx] = orig;
                let fd: f64 = upstream
                    .iter()
                    .zip(vp.iter().zip(vm.iter()))
                    .map(|(&u, (&a, &b))| u * (a - b) / (2.0 * h))
                    .sum();
                let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-12);
                assert!(rel < 1e-5, "grid {gi} idx {idx}: {fd} vs {analytic}");
            }
        }
    }

    #[test]
    fn pack_unpack_roundtrip() {
        for n in [1usize, 7, 8, 9, 16, 33, 4096] {
            let bits: Vec<bool> = (0..n).map(|i| hash3(99, n as u64, i as u64) & 1 == 1).collect();
            let packed = pack_bools(&bits);
            assert_eq!(packed.len(), n.div_ceil(8));
            let back = unpack_bools(&packed, n).unwrap();
            assert_eq!(bits, back);
        }
    }

    #[test]
    fn sixteen_cells_pack_into_two_bytes() {
        let bits = vec![true; 16];
        assert_eq!(pack_bools(&bits), vec![0xff, 0xff]);
    }

    #[test]
    fn padding_bits_must_be_zero() {
        assert!(unpack_bools(&[0xff], 4).is_err());
        assert!(unpack_bools(&[0x0f], 4).is_ok());
    }
}
