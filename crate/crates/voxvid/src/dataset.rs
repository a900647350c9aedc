//! Multi-view dataset on disk: a key-value manifest, a plain-text camera
//! file and per-frame PPM images under `frame_{t:03}/cam_{c:02}.ppm`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use voxvid_core::math::{Aabb, Vec3};
use voxvid_core::render::Camera;
use voxvid_core::train::TrainView;

use crate::error::{Result, VoxvidError};
use crate::image::{load_image, save_image, Image};
use crate::scene::{render_ground_truth, SceneSpec};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const CAMERAS_FILE: &str = "cameras.txt";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub frame_count: u32,
    pub width: u32,
    pub height: u32,
    pub background: [f64; 3],
    pub aabb_min: [f64; 3],
    pub aabb_max: [f64; 3],
    pub cameras: String,
}

/// Cameras plus ground-truth images for a frame range.
#[derive(Debug, Clone)]
pub struct MultiViewDataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    /// `(camera, is_test)` in file order: training cameras first.
    pub cameras: Vec<(Camera, bool)>,
}

pub fn frame_dir(root: &Path, frame: u32) -> PathBuf {
    root.join(format!("frame_{frame:03}"))
}

pub fn image_path(root: &Path, frame: u32, cam: usize) -> PathBuf {
    frame_dir(root, frame).join(format!("cam_{cam:02}.ppm"))
}

/// Render the whole dataset from a scene spec and write it out.
pub fn generate_dataset(spec: &SceneSpec, out_dir: &Path) -> Result<MultiViewDataset> {
    spec.validate()?;
    let cameras = spec.cameras()?;
    fs::create_dir_all(out_dir).map_err(|e| VoxvidError::io(out_dir.display().to_string(), e))?;

    let manifest = DatasetManifest {
        name: spec.name.clone(),
        frame_count: spec.frames,
        width: spec.rig.width,
        height: spec.rig.height,
        background: spec.background,
        aabb_min: spec.aabb_min,
        aabb_max: spec.aabb_max,
        cameras: CAMERAS_FILE.into(),
    };
    let manifest_text =
        toml::to_string_pretty(&manifest).map_err(|e| VoxvidError::Config(e.to_string()))?;
    fs::write(out_dir.join(MANIFEST_FILE), manifest_text)
        .map_err(|e| VoxvidError::io(out_dir.display().to_string(), e))?;
    write_cameras(&out_dir.join(CAMERAS_FILE), &cameras)?;

    // (frame, camera) pairs are independent; the per-pixel math is pure, so
    // the bytes come out identical regardless of scheduling.
    let jobs: Vec<(u32, usize)> = (0..spec.frames)
        .flat_map(|t| (0..cameras.len()).map(move |c| (t, c)))
        .collect();
    for t in 0..spec.frames {
        fs::create_dir_all(frame_dir(out_dir, t))
            .map_err(|e| VoxvidError::io(out_dir.display().to_string(), e))?;
    }
    jobs.par_iter().try_for_each(|&(t, c)| -> Result<()> {
        let img = render_ground_truth(spec, &cameras[c].0, t)?;
        save_image(&image_path(out_dir, t, c), &img)
    })?;

    Ok(MultiViewDataset { dir: out_dir.to_path_buf(), manifest, cameras })
}

pub fn load_dataset(dir: &Path) -> Result<MultiViewDataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| VoxvidError::io(manifest_path.display().to_string(), e))?;
    let manifest: DatasetManifest =
        toml::from_str(&text).map_err(|e| VoxvidError::Dataset(e.to_string()))?;
    let cameras = read_cameras(&dir.join(&manifest.cameras))?;
    if cameras.is_empty() {
        return Err(VoxvidError::Dataset("camera file has no cameras".into()));
    }
    for (cam, _) in &cameras {
        if cam.width != manifest.width || cam.height != manifest.height {
            return Err(VoxvidError::Dataset("camera resolution mismatches manifest".into()));
        }
    }
    Ok(MultiViewDataset { dir: dir.to_path_buf(), manifest, cameras })
}

impl MultiViewDataset {
    pub fn aabb(&self) -> Aabb {
        Aabb::new(
            Vec3::new(self.manifest.aabb_min[0], self.manifest.aabb_min[1], self.manifest.aabb_min[2]),
            Vec3::new(self.manifest.aabb_max[0], self.manifest.aabb_max[1], self.manifest.aabb_max[2]),
        )
    }

    pub fn train_camera_ids(&self) -> Vec<usize> {
        self.cameras
            .iter()
            .enumerate()
            .filter(|(_, (_, test))| !test)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn test_camera_ids(&self) -> Vec<usize> {
        self.cameras
            .iter()
            .enumerate()
            .filter(|(_, (_, test))| *test)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn load_frame_image(&self, frame: u32, cam: usize) -> Result<Image> {
        load_image(&image_path(&self.dir, frame, cam))
    }

    /// Training views of one frame (test cameras excluded).
    pub fn training_views(&self, frame: u32) -> Result<Vec<TrainView>> {
        let mut out = Vec::new();
        for id in self.train_camera_ids() {
            let img = self.load_frame_image(frame, id)?;
            out.push(TrainView { camera: self.cameras[id].0.clone(), pixels: img.pixels });
        }
        Ok(out)
    }

    /// All frames' training views.
    pub fn training_sequence(&self) -> Result<Vec<Vec<TrainView>>> {
        (0..self.manifest.frame_count).map(|t| self.training_views(t)).collect()
    }
}

fn write_cameras(path: &Path, cameras: &[(Camera, bool)]) -> Result<()> {
    let mut text = String::from(
        "# id kind focal cx cy width height r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz\n",
    );
    for (i, (cam, test)) in cameras.iter().enumerate() {
        let kind = if *test { "test" } else { "train" };
        let r = cam.rotation;
        text.push_str(&format!(
            "{i} {kind} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {}\n",
            cam.focal,
            cam.cx,
            cam.cy,
            cam.width,
            cam.height,
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            cam.translation.x,
            cam.translation.y,
            cam.translation.z,
        ));
    }
    fs::write(path, text).map_err(|e| VoxvidError::io(path.display().to_string(), e))
}

pub fn read_cameras(path: &Path) -> Result<Vec<(Camera, bool)>> {
    let text =
        fs::read_to_string(path).map_err(|e| VoxvidError::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 19 {
            return Err(VoxvidError::Dataset(format!(
                "{}:{}: expected 19 fields, got {}",
                path.display(),
                ln + 1,
                fields.len()
            )));
        }
        let bad =
            |what: &str| VoxvidError::Dataset(format!("{}:{}: bad {what}", path.display(), ln + 1));
        let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| bad(what));
        let is_test = match fields[1] {
            "train" => false,
            "test" => true,
            _ => return Err(bad("camera kind")),
        };
        let focal = num(fields[2], "focal")?;
        let cx = num(fields[3], "cx")?;
        let cy = num(fields[4], "cy")?;
        let width: u32 = fields[5].parse().map_err(|_| bad("width"))?;
        let height: u32 = fields[6].parse().map_err(|_| bad("height"))?;
        let mut r = [[0.0; 3]; 3];
        for k in 0..9 {
            r[k / 3][k % 3] = num(fields[7 + k], "rotation")?;
        }
        let t = Vec3::new(
            num(fields[16], "tx")?,
            num(fields[17], "ty")?,
            num(fields[18], "tz")?,
        );
        let cam = Camera::new(focal, cx, cy, width, height, r, t)
            .map_err(|e| VoxvidError::Dataset(format!("{}:{}: {e}", path.display(), ln + 1)))?;
        out.push((cam, is_test));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SceneSpec {
        let mut spec = SceneSpec::toy_static();
        spec.frames = 2;
        spec.rig.width = 20;
        spec.rig.height = 20;
        spec.rig.focal = 20.0;
        spec.rig.train_count = 2;
        spec.rig.test_count = 1;
        spec
    }

    #[test]
    fn generate_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let ds = generate_dataset(&spec, dir.path()).unwrap();
        assert_eq!(ds.cameras.len(), 3);

        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.manifest, ds.manifest);
        assert_eq!(loaded.cameras.len(), 3);
        for ((a, at), (b, bt)) in ds.cameras.iter().zip(loaded.cameras.iter()) {
            assert_eq!(at, bt);
            assert!((a.translation - b.translation).norm() < 1e-12);
            assert_eq!(a.width, b.width);
        }
        assert_eq!(loaded.train_camera_ids(), vec![0, 1]);
        assert_eq!(loaded.test_camera_ids(), vec![2]);

        let views = loaded.training_views(1).unwrap();
        assert_eq!(views.len(), 2);
        assert_eq!(views[0].pixels.len(), 400);
    }

    #[test]
    fn regenerating_gives_identical_files() {
        let spec = small_spec();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_dataset(&spec, d1.path()).unwrap();
        generate_dataset(&spec, d2.path()).unwrap();
        for t in 0..2 {
            for c in 0..3 {
                let a = fs::read(image_path(d1.path(), t, c)).unwrap();
                let b = fs::read(image_path(d2.path(), t, c)).unwrap();
                assert_eq!(a, b, "frame {t} cam {c}");
            }
        }
    }

    #[test]
    fn missing_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }
}
