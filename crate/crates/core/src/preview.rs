//! Label visualizations: uv isocontours, normals as RGB, part palette,
//! instance ids and keypoint markers.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::raster::{write_color_png, LabelFrame, Visibility, BACKGROUND_INSTANCE, BACKGROUND_PART};
use crate::rig::hsv_to_rgb;

pub const PREVIEW_BACKGROUND: [u8; 3] = [0, 0, 0];
/// uv contours are drawn at multiples of 1 / `UV_LEVELS`.
pub const UV_LEVELS: usize = 10;
const U_CONTOUR: [u8; 3] = [255, 40, 40];
const V_CONTOUR: [u8; 3] = [40, 255, 40];

/// Distinct color per category via golden-ratio hue steps.
pub fn category_color(index: usize) -> [u8; 3] {
    let h = (index as f64 * 0.618_033_988_75).fract() * std::f64::consts::TAU;
    let s = if index % 2 == 0 { 0.75 } else { 0.55 };
    hsv_to_rgb(h, s, 0.95).map(|c| (c * 255.0).round() as u8)
}

pub fn part_image(frame: &LabelFrame) -> Vec<[u8; 3]> {
    frame
        .part
        .iter()
        .map(|&q| if q == BACKGROUND_PART { PREVIEW_BACKGROUND } else { category_color(q as usize) })
        .collect()
}

pub fn instance_image(frame: &LabelFrame) -> Vec<[u8; 3]> {
    frame
        .instance
        .iter()
        .map(|&i| if i == BACKGROUND_INSTANCE { PREVIEW_BACKGROUND } else { category_color(i as usize + 7) })
        .collect()
}

/// RGB = (n + 1) / 2; pixels without a normal are background.
pub fn normal_image(normals: &[[f32; 3]]) -> Vec<[u8; 3]> {
    normals
        .iter()
        .map(|n| {
            if n.iter().all(|&v| v == 0.0) {
                PREVIEW_BACKGROUND
            } else {
                n.map(|v| (((v as f64 + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8)
            }
        })
        .collect()
}

fn level(x: f32, levels: usize) -> i64 {
    ((x as f64 * levels as f64).floor() as i64).clamp(0, levels as i64 - 1)
}

/// Color image with u and v isocontours: a pixel is on a contour when its
/// right or lower neighbour on the same part lies in a different level.
pub fn uv_contour_image(frame: &LabelFrame, levels: usize) -> Vec<[u8; 3]> {
    let (w, h) = (frame.width, frame.height);
    let mut out = frame.color.clone();
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let q = frame.part[p];
            if q == BACKGROUND_PART {
                continue;
            }
            for c in 0..2 {
                let here = level(frame.uv[p][c], levels);
                let differs = [(j + 1 < w).then(|| p + 1), (i + 1 < h).then(|| p + w)]
                    .into_iter()
                    .flatten()
                    .any(|o| frame.part[o] == q && level(frame.uv[o][c], levels) != here);
                if differs {
                    out[p] = if c == 0 { U_CONTOUR } else { V_CONTOUR };
                }
            }
        }
    }
    out
}

/// Color image with a square marker per labeled keypoint: yellow when
/// visible, cyan when occluded.
pub fn keypoint_image(frame: &LabelFrame) -> Vec<[u8; 3]> {
    let (w, h) = (frame.width as i64, frame.height as i64);
    let mut out = frame.color.clone();
    for inst in &frame.instances {
        for k in &inst.keypoints {
            let color = match k.visibility {
                Visibility::Visible => [255, 230, 0],
                Visibility::Occluded => [0, 220, 255],
                Visibility::OffImage => continue,
            };
            let (cx, cy) = (k.x.round() as i64, k.y.round() as i64);
            for y in cy - 1..=cy + 1 {
                for x in cx - 1..=cx + 1 {
                    if (0..w).contains(&x) && (0..h).contains(&y) {
                        out[(y * w + x) as usize] = color;
                    }
                }
            }
        }
    }
    out
}

pub const PREVIEW_FILES: [&str; 5] = ["keypoints.png", "parts.png", "uv.png", "normals.png", "instances.png"];

/// Writes the five preview images into `out` and returns their paths.
/// Normals are shown in world coordinates.
pub fn render_previews(frame: &LabelFrame, out: &Path) -> Result<Vec<PathBuf>> {
    let n = frame.pixel_count();
    if frame.color.len() != n || frame.part.len() != n || frame.uv.len() != n || frame.normal.len() != n || frame.instance.len() != n {
        return Err(Error::ShapeMismatch("label frame planes".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::file(out, e))?;
    let images = [
        keypoint_image(frame),
        part_image(frame),
        uv_contour_image(frame, UV_LEVELS),
        normal_image(&frame.normal),
        instance_image(frame),
    ];
    let mut paths = Vec::with_capacity(images.len());
    for (name, img) in PREVIEW_FILES.iter().zip(&images) {
        let path = out.join(name);
        write_color_png(&path, frame.width, frame.height, img)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{Background, Camera, InstanceMeta, Keypoint2};

    fn blank(w: u32, h: u32) -> LabelFrame {
        let cam = Camera {
            width: w,
            height: h,
            ..Camera::default()
        };
        LabelFrame::background(&cam, &Background::Flat([30, 60, 90]))
    }

    fn uniform(img: &[[u8; 3]]) -> bool {
        img.iter().all(|c| *c == img[0])
    }

    #[test]
    fn background_frame_gives_uniform_previews() {
        let f = blank(20, 12);
        for img in [keypoint_image(&f), part_image(&f), uv_contour_image(&f, UV_LEVELS), normal_image(&f.normal), instance_image(&f)] {
            assert!(uniform(&img));
        }
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(render_previews(&f, dir.path()).unwrap().len(), 5);
    }

    #[test]
    fn constant_up_normal_maps_to_light_blue() {
        let img = normal_image(&[[0.0, 0.0, 1.0]; 4]);
        assert!(img.iter().all(|c| *c == [128, 128, 255]));
    }

    #[test]
    fn ramp_gives_nine_contour_bands() {
        let mut f = blank(200, 5);
        for i in 0..5 {
            for j in 0..200 {
                let p = i * 200 + j;
                f.part[p] = 0;
                f.instance[p] = 0;
                f.uv[p] = [j as f32 / 199.0, 0.5];
            }
        }
        let img = uv_contour_image(&f, UV_LEVELS);
        let row = &img[2 * 200..3 * 200];
        let mut bands = 0;
        for j in 0..200 {
            if row[j] == U_CONTOUR && (j == 0 || row[j - 1] != U_CONTOUR) {
                bands += 1;
            }
        }
        assert_eq!(bands, 9);
    }

    #[test]
    fn markers_follow_visibility() {
        let mut f = blank(10, 10);
        let mut kps = [Keypoint2 { x: 0.0, y: 0.0, visibility: Visibility::OffImage }; 17];
        kps[0] = Keypoint2 { x: 2.0, y: 2.0, visibility: Visibility::Visible };
        kps[1] = Keypoint2 { x: 7.0, y: 7.0, visibility: Visibility::Occluded };
        f.instances.push(InstanceMeta { figure: 0, keypoints: kps });
        let img = keypoint_image(&f);
        assert_eq!(img[2 * 10 + 2], [255, 230, 0]);
        assert_eq!(img[7 * 10 + 7], [0, 220, 255]);
        assert_eq!(img[0], [30, 60, 90]);
    }
}
