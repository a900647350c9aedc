//! Decoded-field dumps (`.vxf`): one self-contained file per frame with the
//! reconstructed grids, rendering MLP, occupancy and render defaults, so
//! frames can be re-rendered without touching the bitstream again.
//! Little-endian throughout.

use std::path::{Path, PathBuf};

use voxvid_core::grid::{unpack_bools, FeatureGrid, OccupancyGrid};
use voxvid_core::math::{Aabb, Vec3};
use voxvid_core::render::RenderMlp;
use voxvid_core::{FieldFrame, FrameType};

use crate::bitstream::{DecodedFrame, StreamInfo};
use crate::error::{Result, VoxvidError};

pub const FIELD_MAGIC: &[u8; 4] = b"VXFD";
pub const FIELD_VERSION: u16 = 1;
pub const EXTENSION: &str = "vxf";

/// Everything needed to render one decoded frame.
#[derive(Debug, Clone)]
pub struct FieldDump {
    pub frame_index: u32,
    pub frame_type: FrameType,
    pub background: [f64; 3],
    pub step_divisor: f64,
    pub recon: FieldFrame,
    pub render_mlp: RenderMlp,
    pub occupancy: OccupancyGrid,
}

pub fn field_path(dir: &Path, frame: u32) -> PathBuf {
    dir.join(format!("frame_{frame:03}.{EXTENSION}"))
}

impl FieldDump {
    pub fn from_decoded(frame: &DecodedFrame, info: &StreamInfo) -> Self {
        FieldDump {
            frame_index: frame.frame_index,
            frame_type: frame.frame_type,
            background: info.background,
            step_divisor: info.step_divisor,
            recon: frame.recon.clone(),
            render_mlp: frame.render_mlp.clone(),
            occupancy: frame.occupancy.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w: Vec<u8> = Vec::new();
        w.extend_from_slice(FIELD_MAGIC);
        w.extend_from_slice(&FIELD_VERSION.to_le_bytes());
        w.extend_from_slice(&self.frame_index.to_le_bytes());
        w.push(match self.frame_type {
            FrameType::I => 0,
            FrameType::P => 1,
        });
        let ch = self.recon.channels() as u16;
        w.extend_from_slice(&ch.to_le_bytes());
        w.extend_from_slice(&(self.recon.grid_count() as u16).to_le_bytes());
        let bb = self.recon.aabb();
        for v in [bb.min, bb.max] {
            for c in [v.x, v.y, v.z] {
                w.extend_from_slice(&c.to_le_bytes());
            }
        }
        for c in self.background {
            w.extend_from_slice(&c.to_le_bytes());
        }
        w.extend_from_slice(&self.step_divisor.to_le_bytes());
        for d in self.occupancy.dims {
            w.extend_from_slice(&(d as u16).to_le_bytes());
        }
        w.extend_from_slice(&self.occupancy.pack_bits());
        for g in 0..self.recon.grid_count() {
            let grid = self.recon.grid(g);
            for d in grid.dims() {
                w.extend_from_slice(&(d as u16).to_le_bytes());
            }
            w.extend_from_slice(&(self.recon.qsteps[g] as f32).to_le_bytes());
            for &v in grid.values() {
                w.extend_from_slice(&v.to_le_bytes());
            }
        }
        for t in self.render_mlp.tensors() {
            for &v in t {
                w.extend_from_slice(&v.to_le_bytes());
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| VoxvidError::Bitstream(format!("field dump: {msg}"));
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > bytes.len() {
                return Err(bad("truncated"));
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        macro_rules! rd {
            ($t:ty) => {
                <$t>::from_le_bytes(take(core::mem::size_of::<$t>())?.try_into().unwrap())
            };
        }

        if take(4)? != FIELD_MAGIC {
            return Err(bad("bad magic"));
        }
        if rd!(u16) != FIELD_VERSION {
            return Err(bad("unsupported version"));
        }
        let frame_index = rd!(u32);
        let frame_type = match rd!(u8) {
            0 => FrameType::I,
            1 => FrameType::P,
            _ => return Err(bad("bad frame type")),
        };
        let channels = rd!(u16) as usize;
        let n_grids = rd!(u16) as usize;
        if channels == 0 || n_grids < 2 {
            return Err(bad("bad geometry"));
        }
        let min = Vec3::new(rd!(f64), rd!(f64), rd!(f64));
        let max = Vec3::new(rd!(f64), rd!(f64), rd!(f64));
        let aabb = Aabb::new(min, max);
        if !aabb.is_valid() {
            return Err(bad("degenerate aabb"));
        }
        let background = [rd!(f64), rd!(f64), rd!(f64)];
        let step_divisor = rd!(f64);
        let occ_dims = [rd!(u16) as usize, rd!(u16) as usize, rd!(u16) as usize];
        let n_cells = occ_dims[0] * occ_dims[1] * occ_dims[2];
        let packed = take(n_cells.div_ceil(8))?.to_vec();
        let bits = unpack_bools(&packed, n_cells).map_err(VoxvidError::Core)?;
        let mut occupancy = OccupancyGrid::new_filled(occ_dims, aabb, false);
        for (i, b) in bits.into_iter().enumerate() {
            occupancy.set(i, b);
        }

        let mut grids = Vec::with_capacity(n_grids);
        let mut qsteps = Vec::with_capacity(n_grids);
        for _ in 0..n_grids {
            let dims = [rd!(u16) as usize, rd!(u16) as usize, rd!(u16) as usize];
            let q = rd!(f32);
            if !(q > 0.0) {
                return Err(bad("bad q step"));
            }
            qsteps.push(q as f64);
            let mut grid =
                FeatureGrid::zeros(dims, channels, aabb).map_err(VoxvidError::Core)?;
            let n = grid.values().len();
            let raw = take(n * 8)?;
            for (i, v) in grid.values_mut().iter_mut().enumerate() {
                *v = f64::from_le_bytes(raw[i * 8..i * 8 + 8].try_into().unwrap());
            }
            grids.push(grid);
        }
        let coeff = grids.remove(0);
        let recon = FieldFrame::new(coeff, grids, qsteps, frame_type, frame_index)
            .map_err(VoxvidError::Core)?;

        let shapes = RenderMlp::tensor_shapes(channels);
        let mut tensors = Vec::with_capacity(9);
        for &len in &shapes {
            let raw = take(len * 8)?;
            let t: Vec<f64> = (0..len)
                .map(|i| f64::from_le_bytes(raw[i * 8..i * 8 + 8].try_into().unwrap()))
                .collect();
            tensors.push(t);
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let render_mlp =
            RenderMlp::from_tensors(channels, &tensors).map_err(VoxvidError::Core)?;

        Ok(FieldDump {
            frame_index,
            frame_type,
            background,
            step_divisor,
            recon,
            render_mlp,
            occupancy,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = field_path(dir, self.frame_index);
        std::fs::write(&path, self.to_bytes())
            .map_err(|e| VoxvidError::io(path.display().to_string(), e))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| VoxvidError::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }
}
