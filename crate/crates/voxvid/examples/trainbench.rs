//! Rough training-throughput probe: times a short I-frame run at production
//! scale. Not part of the test suite.

use std::time::Instant;

use voxvid::dataset::generate_dataset;
use voxvid::scene::SceneSpec;
use voxvid_core::train::{train_frame, TrainConfig};
use voxvid_core::FrameType;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let rays: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(256);

    let dir = tempfile::tempdir().unwrap();
    let mut spec = SceneSpec::toy();
    spec.frames = 2;
    let t0 = Instant::now();
    let ds = generate_dataset(&spec, dir.path()).unwrap();
    eprintln!("dataset: {:.2}s", t0.elapsed().as_secs_f64());

    let cfg = TrainConfig {
        iters_i: iters,
        iters_p: iters / 2,
        ray_batch: rays,
        aabb: ds.aabb(),
        background: ds.manifest.background,
        ..TrainConfig::default()
    };
    cfg.validate().unwrap();

    let views: Vec<_> = (0..2).map(|t| {
        let mut v = Vec::new();
        for id in ds.train_camera_ids() {
            let img = ds.load_frame_image(t, id).unwrap();
            v.push(voxvid_core::TrainView {
                camera: ds.cameras[id].0.clone(),
                pixels: img.pixels,
            });
        }
        v
    }).collect();

    fn grid_stats(f: &voxvid_core::train::CodedFrame) {
        for (g, cg) in f.grids.iter().enumerate() {
            let n: usize = cg.ints.planes.iter().map(|p| p.len()).sum();
            let nonzero: usize = cg
                .ints
                .planes
                .iter()
                .flat_map(|p| p.iter())
                .filter(|&&v| v != 0)
                .count();
            let mean_abs: f64 = cg
                .ints
                .planes
                .iter()
                .flat_map(|p| p.iter())
                .map(|&v| v.abs() as f64)
                .sum::<f64>()
                / n as f64;
            eprintln!(
                "  grid {g} dims {:?} q {:.4}: {} bytes ({:.2} bits/vox est), nonzero {:.1}%, mean|int| {:.2}",
                cg.dims,
                cg.q,
                cg.payload.len(),
                cg.estimated_bits / n as f64,
                100.0 * nonzero as f64 / n as f64,
                mean_abs
            );
        }
    }

    let t0 = Instant::now();
    let (coded, buf) = train_frame(&views[0], None, &cfg, FrameType::I, 0).unwrap();
    grid_stats(&coded);
    let occ_fill =
        coded.occupancy.count_occupied() as f64 / coded.occupancy.cell_count() as f64;
    eprintln!("occupancy fill: {:.1}%", occ_fill * 100.0);
    let i_time = t0.elapsed().as_secs_f64();
    eprintln!(
        "I-frame: {iters} iters in {:.2}s ({:.1} ms/iter), payload {} bytes, final loss {:.5}",
        i_time,
        1000.0 * i_time / iters as f64,
        coded.payload_bits() as usize / 8,
        coded.reports.last().unwrap().total
    );

    let t0 = Instant::now();
    let (coded_p, _) = train_frame(&views[1], Some(&buf), &cfg, FrameType::P, 1).unwrap();
    let p_time = t0.elapsed().as_secs_f64();
    eprintln!(
        "P-frame: {} iters in {:.2}s ({:.1} ms/iter), payload {} bytes",
        cfg.iters_p,
        p_time,
        1000.0 * p_time / cfg.iters_p as f64,
        coded_p.payload_bits() as usize / 8
    );
    grid_stats(&coded_p);

    // Quick quality probe on one training view.
    let t0 = Instant::now();
    let cam = &views[0][0].camera;
    let mut se = 0.0;
    for row in 0..cam.height {
        for col in 0..cam.width {
            let got = voxvid_core::render::render_pixel(
                &coded.recon,
                &coded.render_mlp,
                &coded.occupancy,
                cam,
                row,
                col,
                cfg.background,
                cfg.sampling_step(),
            )
            .unwrap();
            let truth = views[0][0].pixels[(row * cam.width + col) as usize];
            for c in 0..3 {
                se += (got[c] - truth[c]).powi(2);
            }
        }
    }
    let mse = se / (cam.width * cam.height * 3) as f64;
    eprintln!(
        "I-frame view-0 PSNR: {:.2} dB (eval render {:.2}s)",
        10.0 * (1.0 / mse).log10(),
        t0.elapsed().as_secs_f64()
    );
}
