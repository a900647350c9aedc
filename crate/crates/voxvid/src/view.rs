//! Whole-image rendering from a reconstructed field. Rows render in
//! parallel; each pixel is a pure function, so output bytes do not depend on
//! scheduling.

use rayon::prelude::*;
use voxvid_core::render::{render_pixel, Camera, RenderMlp};
use voxvid_core::{FieldFrame, OccupancyGrid};

use crate::error::{Result, VoxvidError};
use crate::image::Image;

pub fn render_image(
    frame: &FieldFrame,
    mlp: &RenderMlp,
    occ: &OccupancyGrid,
    camera: &Camera,
    bg: [f64; 3],
    step: f64,
) -> Result<Image> {
    let rows: std::result::Result<Vec<Vec<[f64; 3]>>, voxvid_core::CoreError> = (0..camera
        .height)
        .into_par_iter()
        .map(|row| {
            (0..camera.width)
                .map(|col| render_pixel(frame, mlp, occ, camera, row, col, bg, step))
                .collect()
        })
        .collect();
    let rows = rows.map_err(VoxvidError::Core)?;
    let mut img = Image::new(camera.width, camera.height);
    for (r, data) in rows.into_iter().enumerate() {
        for (c, px) in data.into_iter().enumerate() {
            img.set(r as u32, c as u32, px);
        }
    }
    Ok(img)
}
