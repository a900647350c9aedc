//! The CLI commands as library functions, so tests and the acceptance suite
//! drive exactly what the binary runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use voxvid_core::train::{train_sequence, CodedFrame, TrainConfig};
use voxvid_core::{CoreError, FrameType};

use crate::bitstream::{
    decode_stream, encode_frame_section_sized, encode_stream_header, stream_info_for,
    DecodedFrame, StreamInfo,
};
use crate::config::{EncodeConfig, Overrides};
use crate::dataset::{generate_dataset, image_path, load_dataset, MultiViewDataset};
use crate::error::{Result, VoxvidError};
use crate::fields::{field_path, FieldDump};
use crate::image::{load_image, save_image, Image};
use crate::manifest::{FrameRecord, RunManifest};
use crate::metrics::{bd_rate, psnr, ssim};
use crate::scene::SceneSpec;
use crate::view::render_image;

/// Build a synthetic dataset from a scene spec file.
pub fn cmd_generate(spec_path: &Path, out_dir: &Path) -> Result<()> {
    let text = fs::read_to_string(spec_path)
        .map_err(|e| VoxvidError::io(spec_path.display().to_string(), e))?;
    let spec: SceneSpec =
        toml::from_str(&text).map_err(|e| VoxvidError::Config(e.to_string()))?;
    generate_dataset(&spec, out_dir)?;
    Ok(())
}

/// Per-frame eval quality against the dataset.
fn frame_quality(
    dataset: &MultiViewDataset,
    coded: &CodedFrame,
    cfg: &TrainConfig,
) -> Result<(f64, f64, f64, f64)> {
    let step = cfg.sampling_step();
    let mut acc = [(0.0f64, 0.0f64, 0usize); 2]; // (psnr sum, ssim sum, n) for train/test
    let mut saw_inf = [false; 2];
    for (id, (camera, is_test)) in dataset.cameras.iter().enumerate() {
        let truth = dataset.load_frame_image(coded.frame_index, id)?;
        let rendered = render_image(
            &coded.recon,
            &coded.render_mlp,
            &coded.occupancy,
            camera,
            cfg.background,
            step,
        )?;
        let p = psnr(&rendered, &truth)?;
        let s = ssim(&rendered, &truth)?;
        let k = usize::from(*is_test);
        if p.is_infinite() {
            saw_inf[k] = true;
        } else {
            acc[k].0 += p;
        }
        acc[k].1 += s;
        acc[k].2 += 1;
    }
    let mean = |k: usize| -> (f64, f64) {
        if acc[k].2 == 0 {
            return (f64::NAN, f64::NAN);
        }
        let p = if saw_inf[k] { f64::INFINITY } else { acc[k].0 / acc[k].2 as f64 };
        (p, acc[k].1 / acc[k].2 as f64)
    };
    let (pt, st) = mean(0);
    let (pv, sv) = mean(1);
    Ok((pt, st, pv, sv))
}

pub struct EncodeOutcome {
    pub manifest: RunManifest,
    pub info: StreamInfo,
    pub bitstream_path: PathBuf,
}

/// Train + encode a dataset into a bitstream, verify the stream decodes back
/// to the trainer's reconstructions, and emit the run manifest.
pub fn cmd_encode(
    dataset_dir: &Path,
    config_path: Option<&Path>,
    overrides: &Overrides,
    out: &Path,
    quiet: bool,
) -> Result<EncodeOutcome> {
    let started = Instant::now();
    let dataset = load_dataset(dataset_dir)?;
    let mut econfig = match config_path {
        Some(p) => EncodeConfig::from_file(p)?,
        None => EncodeConfig::default(),
    };
    econfig.apply(overrides);
    let cfg = econfig.train_config(&dataset)?;

    let frames = dataset.training_sequence()?;
    let coded = train_sequence(&frames, &cfg, |f| {
        if !quiet {
            let r = f.reports.last().expect("at least one iteration");
            eprintln!(
                "frame {:>3} {:?}: loss {:.5} (mse {:.5}, rate {:.3} b/vox), payload {} bytes",
                f.frame_index,
                f.frame_type,
                r.total,
                r.distortion,
                r.rate,
                f.payload_bits() as usize / 8,
            );
        }
    })
    .map_err(VoxvidError::Core)?;

    let info = stream_info_for(&cfg, coded.len() as u32);
    let mut bytes = encode_stream_header(&info);
    let mut sections = Vec::with_capacity(coded.len());
    for f in &coded {
        let (fb, sz) = encode_frame_section_sized(&info, f)?;
        bytes.extend_from_slice(&fb);
        sections.push(sz);
    }
    fs::write(out, &bytes).map_err(|e| VoxvidError::io(out.display().to_string(), e))?;

    // Decode the emitted stream and require the reconstruction chain to be
    // bit-identical to what training kept in its decode buffer.
    let (_, decoded) = decode_stream(&bytes)?;
    for (c, d) in coded.iter().zip(decoded.iter()) {
        for g in 0..c.recon.grid_count() {
            let a = c.recon.grid(g).values();
            let b = d.recon.grid(g).values();
            if a.len() != b.len()
                || a.iter().zip(b.iter()).any(|(x, y)| x.to_bits() != y.to_bits())
            {
                return Err(VoxvidError::Core(CoreError::Internal(
                    "decoded reconstruction differs from the trainer's",
                )));
            }
        }
        if c.occupancy != d.occupancy {
            return Err(VoxvidError::Core(CoreError::Internal(
                "decoded occupancy differs from the trainer's",
            )));
        }
    }

    let mut records = Vec::with_capacity(coded.len());
    for (f, sz) in coded.iter().zip(sections.into_iter()) {
        let (pt, st, pv, sv) = frame_quality(&dataset, f, &cfg)?;
        records.push(FrameRecord {
            frame: f.frame_index,
            frame_type: f.frame_type,
            sections: sz,
            estimated_grid_bits: f.grids.iter().map(|g| g.estimated_bits).sum(),
            psnr_train: pt,
            ssim_train: st,
            psnr_test: pv,
            ssim_test: sv,
        });
    }

    let manifest = RunManifest {
        config_echo: econfig.echo_toml(),
        frames: records,
        elapsed_seconds: started.elapsed().as_secs_f64(),
    };
    manifest.write_files(out)?;
    if !quiet {
        eprintln!(
            "wrote {} ({} bytes), mean train PSNR {:.2} dB",
            out.display(),
            manifest.total_bytes(),
            manifest.mean_psnr_train()
        );
    }
    Ok(EncodeOutcome { manifest, info, bitstream_path: out.to_path_buf() })
}

/// Decode a bitstream into per-frame field dumps.
pub fn cmd_decode(input: &Path, out_dir: &Path) -> Result<(StreamInfo, Vec<DecodedFrame>)> {
    let bytes =
        fs::read(input).map_err(|e| VoxvidError::io(input.display().to_string(), e))?;
    let (info, frames) = decode_stream(&bytes)?;
    fs::create_dir_all(out_dir)
        .map_err(|e| VoxvidError::io(out_dir.display().to_string(), e))?;
    for f in &frames {
        FieldDump::from_decoded(f, &info).save(out_dir)?;
    }
    Ok((info, frames))
}

fn load_field(source: &Path, frame: u32) -> Result<FieldDump> {
    if source.is_dir() {
        return FieldDump::load(&field_path(source, frame));
    }
    let bytes =
        fs::read(source).map_err(|e| VoxvidError::io(source.display().to_string(), e))?;
    let (info, frames) = decode_stream(&bytes)?;
    let f = frames
        .into_iter()
        .find(|f| f.frame_index == frame)
        .ok_or_else(|| VoxvidError::Usage(format!("frame {frame} not in stream")))?;
    Ok(FieldDump::from_decoded(&f, &info))
}

fn cameras_from(source: &Path) -> Result<Vec<(voxvid_core::Camera, bool)>> {
    if source.is_dir() {
        Ok(load_dataset(source)?.cameras)
    } else {
        crate::dataset::read_cameras(source)
    }
}

/// Render one view of one frame (`out` file), or every (frame, camera) pair
/// mirroring the dataset layout (`out_dir`).
pub fn cmd_render(
    input: &Path,
    cameras_src: &Path,
    frame: Option<u32>,
    view: Option<usize>,
    out: Option<&Path>,
    out_dir: Option<&Path>,
) -> Result<()> {
    let cameras = cameras_from(cameras_src)?;
    match (frame, view, out, out_dir) {
        (Some(t), Some(v), Some(out), None) => {
            let dump = load_field(input, t)?;
            let cam = &cameras
                .get(v)
                .ok_or_else(|| VoxvidError::Usage(format!("camera {v} not in rig")))?
                .0;
            let img = render_one(&dump, cam)?;
            save_image(out, &img)
        }
        (None, None, None, Some(dir)) => {
            // All frames present in the source.
            let frames: Vec<u32> = if input.is_dir() {
                let mut out = Vec::new();
                for t in 0.. {
                    if field_path(input, t).exists() {
                        out.push(t);
                    } else {
                        break;
                    }
                }
                out
            } else {
                let bytes = fs::read(input)
                    .map_err(|e| VoxvidError::io(input.display().to_string(), e))?;
                let (info, _) = crate::bitstream::decode_stream_header(&bytes)?;
                (0..info.frame_count).collect()
            };
            if frames.is_empty() {
                return Err(VoxvidError::Usage("no frames found to render".into()));
            }
            for &t in &frames {
                let dump = load_field(input, t)?;
                let fdir = crate::dataset::frame_dir(dir, t);
                fs::create_dir_all(&fdir)
                    .map_err(|e| VoxvidError::io(fdir.display().to_string(), e))?;
                for (v, (cam, _)) in cameras.iter().enumerate() {
                    let img = render_one(&dump, cam)?;
                    save_image(&image_path(dir, t, v), &img)?;
                }
            }
            Ok(())
        }
        _ => Err(VoxvidError::Usage(
            "render needs either --frame, --view and --out, or only --out-dir".into(),
        )),
    }
}

fn render_one(dump: &FieldDump, camera: &voxvid_core::Camera) -> Result<Image> {
    let step = dump.recon.aabb().diagonal() / dump.step_divisor;
    render_image(
        &dump.recon,
        &dump.render_mlp,
        &dump.occupancy,
        camera,
        dump.background,
        step,
    )
}

pub struct MetricsRow {
    pub frame: u32,
    pub cam: usize,
    pub is_test: bool,
    pub psnr: f64,
    pub ssim: f64,
}

/// Compare a rendered directory against dataset ground truth.
pub fn cmd_metrics(
    rendered_dir: &Path,
    dataset_dir: &Path,
    csv_out: Option<&Path>,
) -> Result<Vec<MetricsRow>> {
    let dataset = load_dataset(dataset_dir)?;
    let mut rows = Vec::new();
    for t in 0..dataset.manifest.frame_count {
        for (c, (_, is_test)) in dataset.cameras.iter().enumerate() {
            let rendered_path = image_path(rendered_dir, t, c);
            if !rendered_path.exists() {
                continue;
            }
            let rendered = load_image(&rendered_path)?;
            let truth = dataset.load_frame_image(t, c)?;
            rows.push(MetricsRow {
                frame: t,
                cam: c,
                is_test: *is_test,
                psnr: psnr(&rendered, &truth)?,
                ssim: ssim(&rendered, &truth)?,
            });
        }
    }
    if rows.is_empty() {
        return Err(VoxvidError::Usage("no rendered images matched the dataset layout".into()));
    }
    if let Some(path) = csv_out {
        let mut text = String::from("frame,cam,kind,psnr,ssim\n");
        for r in &rows {
            let p = if r.psnr.is_infinite() { "inf".into() } else { format!("{:.4}", r.psnr) };
            text.push_str(&format!(
                "{},{},{},{},{:.6}\n",
                r.frame,
                r.cam,
                if r.is_test { "test" } else { "train" },
                p,
                r.ssim
            ));
        }
        fs::write(path, text).map_err(|e| VoxvidError::io(path.display().to_string(), e))?;
    }
    Ok(rows)
}

/// Read a two-column `rate,psnr` CSV (optional header line).
pub fn read_rd_curve(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text =
        fs::read_to_string(path).map_err(|e| VoxvidError::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split(',');
        let a = it.next().unwrap_or("").trim();
        let b = it.next().unwrap_or("").trim();
        match (a.parse::<f64>(), b.parse::<f64>()) {
            (Ok(rate), Ok(q)) => out.push((rate, q)),
            _ if ln == 0 => continue, // header
            _ => {
                return Err(VoxvidError::Config(format!(
                    "{}:{}: expected `rate,psnr`",
                    path.display(),
                    ln + 1
                )))
            }
        }
    }
    Ok(out)
}

pub fn cmd_bdrate(a: &Path, b: &Path) -> Result<f64> {
    let ca = read_rd_curve(a)?;
    let cb = read_rd_curve(b)?;
    bd_rate(&ca, &cb)
}

/// `generate` presets exposed by the CLI for convenience.
pub fn builtin_scene(name: &str) -> Option<SceneSpec> {
    match name {
        "toy" => Some(SceneSpec::toy()),
        "toy-static" => Some(SceneSpec::toy_static()),
        _ => None,
    }
}

/// Frame-type sanity used by tests: the stream's I/P layout for a group
/// size.
pub fn expected_frame_types(frame_count: u32, group_size: u32) -> Vec<FrameType> {
    (0..frame_count)
        .map(|t| {
            if group_size == 0 || t % group_size == 0 {
                FrameType::I
            } else {
                FrameType::P
            }
        })
        .collect()
}
