//! Bitstream container (`.vxv`): a stream header followed by per-frame
//! sections. Everything is little-endian.
//!
//! Stream header: magic `VXVC`, version, frame count, group size, grid
//! geometry, occupancy dims, scene box, background, default sampling-step
//! divisor.
//!
//! Frame section: magic `VXFR`, header with per-grid dims + quantization
//! steps and all section lengths (independently skippable), followed by the
//! LZMA-compressed occupancy, the rendering-MLP parameters (I-frames only),
//! the entropy-model parameters and one range-coded payload per grid
//! (coefficient grid first, then bases by scale). Decoding a P-frame needs
//! the previous frame's decoded state.

use voxvid_core::coder::{decode_grid, decode_param_tensors, dequantize_tensor, GridInts};
use voxvid_core::entropy::ImplicitEntropyModel;
use voxvid_core::grid::{unpack_bools, FeatureGrid, OccupancyGrid};
use voxvid_core::math::{Aabb, Vec3};
use voxvid_core::render::RenderMlp;
use voxvid_core::train::CodedFrame;
use voxvid_core::{FieldFrame, FrameType};

use crate::error::{Result, VoxvidError};

pub const STREAM_MAGIC: &[u8; 4] = b"VXVC";
pub const FRAME_MAGIC: &[u8; 4] = b"VXFR";
pub const STREAM_VERSION: u16 = 1;
/// File extension used by the CLI.
pub const EXTENSION: &str = "vxv";

#[derive(Debug, Clone, PartialEq)]
pub struct StreamInfo {
    pub frame_count: u32,
    pub group_size: u32,
    pub channels: usize,
    /// Coefficient grid first, then bases by scale.
    pub grid_dims: Vec<[usize; 3]>,
    pub occupancy_dims: [usize; 3],
    pub aabb: Aabb,
    pub background: [f64; 3],
    pub step_divisor: f64,
}

/// Byte sizes of one frame's sections, header included.
#[derive(Debug, Clone, PartialEq)]
pub struct SectionSizes {
    pub header: usize,
    pub occupancy: usize,
    pub render_mlp: usize,
    pub entropy: usize,
    pub grids: Vec<usize>,
}

impl SectionSizes {
    pub fn total(&self) -> usize {
        self.header
            + self.occupancy
            + self.render_mlp
            + self.entropy
            + self.grids.iter().sum::<usize>()
    }

    pub fn grid_payload(&self) -> usize {
        self.grids.iter().sum()
    }
}

/// A decoded frame: everything needed to render it and to decode the next
/// P-frame.
#[derive(Debug, Clone)]
pub struct DecodedFrame {
    pub frame_index: u32,
    pub frame_type: FrameType,
    pub qsteps: Vec<f32>,
    pub ints: Vec<GridInts>,
    pub recon: FieldFrame,
    pub render_mlp: RenderMlp,
    pub occupancy: OccupancyGrid,
    pub sections: SectionSizes,
}

struct Writer(Vec<u8>);

impl Writer {
    fn new() -> Self {
        Writer(Vec::new())
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.0.extend_from_slice(v);
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(VoxvidError::Bitstream("unexpected end of stream".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub(crate) fn position(&self) -> usize {
        self.pos
    }
}

fn write_dims(w: &mut Writer, dims: [usize; 3]) {
    for d in dims {
        w.u16(d as u16);
    }
}

fn read_dims(r: &mut Reader) -> Result<[usize; 3]> {
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        *d = r.u16()? as usize;
        if *d == 0 {
            return Err(VoxvidError::Bitstream("zero grid dimension".into()));
        }
    }
    Ok(dims)
}

pub fn encode_stream_header(info: &StreamInfo) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(STREAM_MAGIC);
    w.u16(STREAM_VERSION);
    w.u16(0); // flags
    w.u32(info.frame_count);
    w.u32(info.group_size);
    w.u16(info.channels as u16);
    w.u16(info.grid_dims.len() as u16);
    for &d in &info.grid_dims {
        write_dims(&mut w, d);
    }
    write_dims(&mut w, info.occupancy_dims);
    for v in [info.aabb.min, info.aabb.max] {
        w.f64(v.x);
        w.f64(v.y);
        w.f64(v.z);
    }
    for c in info.background {
        w.f64(c);
    }
    w.f64(info.step_divisor);
    w.0
}

pub fn decode_stream_header(bytes: &[u8]) -> Result<(StreamInfo, usize)> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != STREAM_MAGIC {
        return Err(VoxvidError::Bitstream("bad stream magic".into()));
    }
    let version = r.u16()?;
    if version != STREAM_VERSION {
        return Err(VoxvidError::Bitstream(format!("unsupported version {version}")));
    }
    let _flags = r.u16()?;
    let frame_count = r.u32()?;
    let group_size = r.u32()?;
    let channels = r.u16()? as usize;
    let n_grids = r.u16()? as usize;
    if channels == 0 || n_grids < 2 {
        return Err(VoxvidError::Bitstream("bad grid configuration".into()));
    }
    let mut grid_dims = Vec::with_capacity(n_grids);
    for _ in 0..n_grids {
        grid_dims.push(read_dims(&mut r)?);
    }
    let occupancy_dims = read_dims(&mut r)?;
    let min = Vec3::new(r.f64()?, r.f64()?, r.f64()?);
    let max = Vec3::new(r.f64()?, r.f64()?, r.f64()?);
    let aabb = Aabb::new(min, max);
    if !aabb.is_valid() {
        return Err(VoxvidError::Bitstream("degenerate aabb".into()));
    }
    let background = [r.f64()?, r.f64()?, r.f64()?];
    let step_divisor = r.f64()?;
    if !(step_divisor > 0.0) {
        return Err(VoxvidError::Bitstream("bad step divisor".into()));
    }
    Ok((
        StreamInfo {
            frame_count,
            group_size,
            channels,
            grid_dims,
            occupancy_dims,
            aabb,
            background,
            step_divisor,
        },
        r.position(),
    ))
}

fn compress_occupancy(occ: &OccupancyGrid) -> Result<Vec<u8>> {
    let packed = occ.pack_bits();
    let mut out = Vec::new();
    lzma_rs::lzma_compress(&mut packed.as_slice(), &mut out)
        .map_err(|e| VoxvidError::Bitstream(format!("lzma compress failed: {e:?}")))?;
    Ok(out)
}

fn decompress_occupancy(
    bytes: &[u8],
    dims: [usize; 3],
    aabb: Aabb,
) -> Result<OccupancyGrid> {
    let mut packed = Vec::new();
    lzma_rs::lzma_decompress(&mut &bytes[..], &mut packed)
        .map_err(|e| VoxvidError::Bitstream(format!("lzma decompress failed: {e:?}")))?;
    let n = dims[0] * dims[1] * dims[2];
    let bits = unpack_bools(&packed, n).map_err(VoxvidError::Core)?;
    let mut occ = OccupancyGrid::new_filled(dims, aabb, false);
    for (i, b) in bits.into_iter().enumerate() {
        occ.set(i, b);
    }
    Ok(occ)
}

/// Serialize one coded frame. Grid payloads were produced during training
/// and are copied verbatim, so encoding is pure assembly.
pub fn encode_frame_section(info: &StreamInfo, frame: &CodedFrame) -> Result<Vec<u8>> {
    Ok(encode_frame_section_sized(info, frame)?.0)
}

/// Like [`encode_frame_section`] but also reports the section byte split.
pub fn encode_frame_section_sized(
    info: &StreamInfo,
    frame: &CodedFrame,
) -> Result<(Vec<u8>, SectionSizes)> {
    let occupancy = compress_occupancy(&frame.occupancy)?;
    let render = frame
        .render_tensors
        .as_ref()
        .map(|t| voxvid_core::coder::encode_param_tensors(t));
    let entropy = voxvid_core::coder::encode_param_tensors(&frame.entropy_tensors);

    let mut w = Writer::new();
    w.bytes(FRAME_MAGIC);
    let header_len_pos = w.0.len();
    w.u32(0); // patched below
    w.u32(frame.frame_index);
    w.u8(match frame.frame_type {
        FrameType::I => 0,
        FrameType::P => 1,
    });
    w.u32(frame.frame_index / info.group_size.max(1));
    w.u16(frame.grids.len() as u16);
    w.u16(info.channels as u16);
    for g in &frame.grids {
        write_dims(&mut w, g.dims);
        w.f32(g.q);
    }
    w.u8(u8::from(frame.render_tensors.is_none()));
    w.u32(occupancy.len() as u32);
    w.u32(render.as_ref().map_or(0, |r| r.len()) as u32);
    w.u32(entropy.len() as u32);
    for g in &frame.grids {
        w.u32(g.payload.len() as u32);
    }
    let header_len = w.0.len() as u32;
    w.0[header_len_pos..header_len_pos + 4].copy_from_slice(&header_len.to_le_bytes());

    let sizes = SectionSizes {
        header: header_len as usize,
        occupancy: occupancy.len(),
        render_mlp: render.as_ref().map_or(0, |r| r.len()),
        entropy: entropy.len(),
        grids: frame.grids.iter().map(|g| g.payload.len()).collect(),
    };
    w.bytes(&occupancy);
    if let Some(r) = render {
        w.bytes(&r);
    }
    w.bytes(&entropy);
    for g in &frame.grids {
        w.bytes(&g.payload);
    }
    Ok((w.0, sizes))
}

/// Decode one frame section starting at the beginning of `bytes`. Returns
/// the frame and the number of bytes consumed.
pub fn decode_frame_section(
    bytes: &[u8],
    info: &StreamInfo,
    prev: Option<&DecodedFrame>,
) -> Result<(DecodedFrame, usize)> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != FRAME_MAGIC {
        return Err(VoxvidError::Bitstream("bad frame magic".into()));
    }
    let header_len = r.u32()? as usize;
    let frame_index = r.u32()?;
    let frame_type = match r.u8()? {
        0 => FrameType::I,
        1 => FrameType::P,
        t => return Err(VoxvidError::Bitstream(format!("unknown frame type {t}"))),
    };
    let _group_id = r.u32()?;
    let n_grids = r.u16()? as usize;
    let channels = r.u16()? as usize;
    if n_grids != info.grid_dims.len() || channels != info.channels {
        return Err(VoxvidError::Bitstream("frame grid layout mismatches stream".into()));
    }
    let mut qsteps = Vec::with_capacity(n_grids);
    for g in 0..n_grids {
        let dims = read_dims(&mut r)?;
        if dims != info.grid_dims[g] {
            return Err(VoxvidError::Bitstream("frame grid dims mismatch stream header".into()));
        }
        let q = r.f32()?;
        if !(q > 0.0) || !q.is_finite() {
            return Err(VoxvidError::Bitstream("bad quantization step".into()));
        }
        qsteps.push(q);
    }
    let inherited_mlp = r.u8()? != 0;
    let occ_len = r.u32()? as usize;
    let render_len = r.u32()? as usize;
    let entropy_len = r.u32()? as usize;
    let mut payload_lens = Vec::with_capacity(n_grids);
    for _ in 0..n_grids {
        payload_lens.push(r.u32()? as usize);
    }
    if r.position() != header_len {
        return Err(VoxvidError::Bitstream("frame header length mismatch".into()));
    }
    if frame_type == FrameType::I && inherited_mlp {
        return Err(VoxvidError::Bitstream("I-frame cannot inherit the rendering MLP".into()));
    }
    if inherited_mlp != (render_len == 0) {
        return Err(VoxvidError::Bitstream("inherited flag disagrees with section length".into()));
    }

    let total = header_len + occ_len + render_len + entropy_len + payload_lens.iter().sum::<usize>();
    if total > bytes.len() {
        return Err(VoxvidError::Bitstream("frame truncated".into()));
    }

    let mut off = header_len;
    let mut section = |len: usize| -> &[u8] {
        let s = &bytes[off..off + len];
        off += len;
        s
    };

    let occupancy = decompress_occupancy(section(occ_len), info.occupancy_dims, info.aabb)?;

    let render_mlp = if inherited_mlp {
        let prev = prev.ok_or(VoxvidError::Core(voxvid_core::CoreError::MissingReference))?;
        prev.render_mlp.clone()
    } else {
        let tensors =
            decode_param_tensors(section(render_len), &RenderMlp::tensor_shapes(channels))
                .map_err(VoxvidError::Core)?;
        let deq: Vec<Vec<f64>> = tensors.iter().map(dequantize_tensor).collect();
        RenderMlp::from_tensors(channels, &deq).map_err(VoxvidError::Core)?
    };

    let entropy_tensors =
        decode_param_tensors(section(entropy_len), &ImplicitEntropyModel::tensor_shapes())
            .map_err(VoxvidError::Core)?;
    let entropy = ImplicitEntropyModel::from_tensors(
        &entropy_tensors.iter().map(dequantize_tensor).collect::<Vec<_>>(),
    )
    .map_err(VoxvidError::Core)?;

    if frame_type == FrameType::P && prev.is_none() {
        return Err(VoxvidError::Core(voxvid_core::CoreError::MissingReference));
    }

    let mut ints = Vec::with_capacity(n_grids);
    for g in 0..n_grids {
        let prev_ints = if frame_type == FrameType::P {
            Some(&prev.unwrap().ints[g])
        } else {
            None
        };
        let decoded = decode_grid(
            section(payload_lens[g]),
            info.grid_dims[g],
            channels,
            &entropy,
            prev_ints,
        )
        .map_err(VoxvidError::Core)?;
        ints.push(decoded);
    }

    // Dequantize; P-frames add onto the previous reconstruction with the
    // exact float expression the trainer used.
    let mut grids = Vec::with_capacity(n_grids);
    for g in 0..n_grids {
        let dims = info.grid_dims[g];
        let mut grid = FeatureGrid::zeros(dims, channels, info.aabb).map_err(VoxvidError::Core)?;
        let qd = qsteps[g] as f64;
        let voxels = grid.voxel_count();
        {
            let vals = grid.values_mut();
            for v in 0..voxels {
                for c in 0..channels {
                    let deq = qd * ints[g].planes[c][v] as f64;
                    let i = v * channels + c;
                    vals[i] = match frame_type {
                        FrameType::P => prev.unwrap().recon.grid(g).values()[i] + deq,
                        FrameType::I => deq,
                    };
                }
            }
        }
        grids.push(grid);
    }
    let coeff = grids.remove(0);
    let recon = FieldFrame::new(
        coeff,
        grids,
        qsteps.iter().map(|&q| q as f64).collect(),
        frame_type,
        frame_index,
    )
    .map_err(VoxvidError::Core)?;

    let sections = SectionSizes {
        header: header_len,
        occupancy: occ_len,
        render_mlp: render_len,
        entropy: entropy_len,
        grids: payload_lens,
    };
    Ok((
        DecodedFrame {
            frame_index,
            frame_type,
            qsteps,
            ints,
            recon,
            render_mlp,
            occupancy,
            sections,
        },
        total,
    ))
}

/// Serialize a whole coded sequence.
pub fn encode_stream(info: &StreamInfo, frames: &[CodedFrame]) -> Result<Vec<u8>> {
    let mut out = encode_stream_header(info);
    for f in frames {
        out.extend_from_slice(&encode_frame_section(info, f)?);
    }
    Ok(out)
}

/// Decode a whole stream, chaining P-frames through their references.
pub fn decode_stream(bytes: &[u8]) -> Result<(StreamInfo, Vec<DecodedFrame>)> {
    let (info, mut pos) = decode_stream_header(bytes)?;
    let mut frames: Vec<DecodedFrame> = Vec::with_capacity(info.frame_count as usize);
    for _ in 0..info.frame_count {
        let prev = frames.last();
        let (frame, used) = decode_frame_section(&bytes[pos..], &info, prev)?;
        pos += used;
        frames.push(frame);
    }
    if pos != bytes.len() {
        return Err(VoxvidError::Bitstream("trailing bytes after last frame".into()));
    }
    Ok((info, frames))
}

/// Stream info matching what a trainer run under `cfg` produces.
pub fn stream_info_for(cfg: &voxvid_core::TrainConfig, frame_count: u32) -> StreamInfo {
    let mut grid_dims = vec![cfg.coeff_dims];
    grid_dims.extend(cfg.basis_dims.iter().copied());
    StreamInfo {
        frame_count,
        group_size: cfg.group_size as u32,
        channels: cfg.channels,
        grid_dims,
        occupancy_dims: cfg.occupancy_dims,
        aabb: cfg.aabb,
        background: cfg.background,
        step_divisor: cfg.step_divisor,
    }
}
