//! Run manifest: per-frame byte accounting and quality, serialized as a
//! deterministic CSV plus a human-readable report.
//!
//! Wall-clock timing is volatile, so it lives only in the report; the CSV is
//! byte-identical across runs with the same seed.

use std::fmt::Write as _;
use std::path::Path;

use voxvid_core::FrameType;

use crate::bitstream::SectionSizes;
use crate::error::{Result, VoxvidError};

#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub frame: u32,
    pub frame_type: FrameType,
    pub sections: SectionSizes,
    pub estimated_grid_bits: f64,
    pub psnr_train: f64,
    pub ssim_train: f64,
    pub psnr_test: f64,
    pub ssim_test: f64,
}

#[derive(Debug, Clone)]
pub struct RunManifest {
    pub config_echo: String,
    pub frames: Vec<FrameRecord>,
    pub elapsed_seconds: f64,
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

impl RunManifest {
    pub fn total_bytes(&self) -> usize {
        self.frames.iter().map(|f| f.sections.total()).sum()
    }

    pub fn mean_frame_bytes(&self) -> f64 {
        self.total_bytes() as f64 / self.frames.len().max(1) as f64
    }

    /// Mean total frame bytes split by frame type `(I, P)`; NaN when a type
    /// is absent.
    pub fn mean_bytes_by_type(&self) -> (f64, f64) {
        let mut sums = [0.0f64; 2];
        let mut counts = [0usize; 2];
        for f in &self.frames {
            let k = if f.frame_type == FrameType::I { 0 } else { 1 };
            sums[k] += f.sections.total() as f64;
            counts[k] += 1;
        }
        (sums[0] / counts[0].max(1) as f64, sums[1] / counts[1].max(1) as f64)
    }

    pub fn mean_psnr_train(&self) -> f64 {
        let finite: Vec<f64> =
            self.frames.iter().map(|f| f.psnr_train).filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        }
    }

    /// Deterministic machine-readable table.
    pub fn csv(&self) -> String {
        let mut out = String::from(
            "frame,type,total_bytes,header_bytes,occupancy_bytes,render_mlp_bytes,\
             entropy_bytes,grid_payload_bytes,estimated_grid_bits,psnr_train,ssim_train,\
             psnr_test,ssim_test\n",
        );
        for f in &self.frames {
            let t = match f.frame_type {
                FrameType::I => "I",
                FrameType::P => "P",
            };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{:.3},{},{:.6},{},{:.6}",
                f.frame,
                t,
                f.sections.total(),
                f.sections.header,
                f.sections.occupancy,
                f.sections.render_mlp,
                f.sections.entropy,
                f.sections.grid_payload(),
                f.estimated_grid_bits,
                fmt_db(f.psnr_train),
                f.ssim_train,
                fmt_db(f.psnr_test),
                f.ssim_test,
            )
            .expect("string write");
        }
        out
    }

    /// Human-readable summary, including wall-clock timing.
    pub fn report(&self) -> String {
        let (i_mean, p_mean) = self.mean_bytes_by_type();
        let mut out = String::new();
        writeln!(out, "encode report").unwrap();
        writeln!(out, "=============").unwrap();
        writeln!(out, "frames: {}", self.frames.len()).unwrap();
        writeln!(out, "total bytes: {}", self.total_bytes()).unwrap();
        writeln!(out, "mean bytes/frame: {:.1}", self.mean_frame_bytes()).unwrap();
        writeln!(out, "mean I-frame bytes: {i_mean:.1}").unwrap();
        writeln!(out, "mean P-frame bytes: {p_mean:.1}").unwrap();
        writeln!(out, "mean train PSNR: {} dB", fmt_db(self.mean_psnr_train())).unwrap();
        writeln!(out, "elapsed: {:.1}s", self.elapsed_seconds).unwrap();
        writeln!(out).unwrap();
        writeln!(out, "frame  type  bytes     psnr_train  psnr_test").unwrap();
        for f in &self.frames {
            writeln!(
                out,
                "{:<6} {:<5} {:<9} {:<11} {}",
                f.frame,
                match f.frame_type {
                    FrameType::I => "I",
                    FrameType::P => "P",
                },
                f.sections.total(),
                fmt_db(f.psnr_train),
                fmt_db(f.psnr_test),
            )
            .unwrap();
        }
        writeln!(out).unwrap();
        writeln!(out, "effective config:").unwrap();
        out.push_str(&self.config_echo);
        out
    }

    /// Write `<base>.manifest.csv` and `<base>.report.txt` next to the
    /// bitstream.
    pub fn write_files(&self, bitstream_path: &Path) -> Result<()> {
        let csv_path = manifest_csv_path(bitstream_path);
        std::fs::write(&csv_path, self.csv())
            .map_err(|e| VoxvidError::io(csv_path.display().to_string(), e))?;
        let report_path = report_path(bitstream_path);
        std::fs::write(&report_path, self.report())
            .map_err(|e| VoxvidError::io(report_path.display().to_string(), e))?;
        Ok(())
    }
}

pub fn manifest_csv_path(bitstream: &Path) -> std::path::PathBuf {
    bitstream.with_extension("manifest.csv")
}

pub fn report_path(bitstream: &Path) -> std::path::PathBuf {
    bitstream.with_extension("report.txt")
}

/// Parse the CSV back (used by the RD sweep tooling and tests).
pub fn parse_manifest_csv(text: &str) -> Result<Vec<FrameRecord>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 13 {
            return Err(VoxvidError::Config(format!("manifest line {}: bad field count", ln + 1)));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| VoxvidError::Config(format!("manifest line {}: bad number", ln + 1)))
        };
        let usz = |s: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| VoxvidError::Config(format!("manifest line {}: bad integer", ln + 1)))
        };
        let total = usz(f[2])?;
        let header = usz(f[3])?;
        let occupancy = usz(f[4])?;
        let render_mlp = usz(f[5])?;
        let entropy = usz(f[6])?;
        let grid_payload = usz(f[7])?;
        if header + occupancy + render_mlp + entropy + grid_payload != total {
            return Err(VoxvidError::Config(format!(
                "manifest line {}: sections do not sum to total",
                ln + 1
            )));
        }
        out.push(FrameRecord {
            frame: usz(f[0])? as u32,
            frame_type: if f[1] == "I" { FrameType::I } else { FrameType::P },
            sections: SectionSizes {
                header,
                occupancy,
                render_mlp,
                entropy,
                grids: vec![grid_payload],
            },
            estimated_grid_bits: num(f[8])?,
            psnr_train: num(f[9])?,
            ssim_train: num(f[10])?,
            psnr_test: num(f[11])?,
            ssim_test: num(f[12])?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(frame: u32, t: FrameType, bytes: usize) -> FrameRecord {
        FrameRecord {
            frame,
            frame_type: t,
            sections: SectionSizes {
                header: 64,
                occupancy: 100,
                render_mlp: if t == FrameType::I { 500 } else { 0 },
                entropy: 200,
                grids: vec![bytes],
            },
            estimated_grid_bits: bytes as f64 * 8.0 * 0.99,
            psnr_train: 31.5,
            ssim_train: 0.95,
            psnr_test: 29.0,
            ssim_test: 0.9,
        }
    }

    #[test]
    fn csv_roundtrips_and_splits_by_type() {
        let m = RunManifest {
            config_echo: "lambda = 0.001\n".into(),
            frames: vec![
                record(0, FrameType::I, 5000),
                record(1, FrameType::P, 900),
                record(2, FrameType::P, 1100),
            ],
            elapsed_seconds: 12.5,
        };
        let parsed = parse_manifest_csv(&m.csv()).unwrap();
        assert_eq!(parsed.len(), 3);
        assert_eq!(parsed[0].sections.total(), m.frames[0].sections.total());
        let (i_mean, p_mean) = m.mean_bytes_by_type();
        assert_eq!(i_mean, 5864.0);
        assert_eq!(p_mean, (1264.0 + 1464.0) / 2.0);
        // Timing never appears in the CSV.
        assert!(!m.csv().contains("12.5"));
        assert!(m.report().contains("12.5"));
    }

    #[test]
    fn infinite_psnr_uses_the_sentinel() {
        let mut r = record(0, FrameType::I, 100);
        r.psnr_train = f64::INFINITY;
        let m = RunManifest {
            config_echo: String::new(),
            frames: vec![r],
            elapsed_seconds: 0.0,
        };
        let csv = m.csv();
        assert!(csv.contains(",inf,"));
        let parsed = parse_manifest_csv(&csv).unwrap();
        assert!(parsed[0].psnr_train.is_infinite());
    }
}
