//! Pinhole rendering of depth, visibility, normal, and curvature images.
//!
//! Every pixel costs exactly one field query. Cameras outside the domain
//! query at the ray's entry point and add the distance travelled; rays that
//! miss the domain are invisible without a query.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{enter_domain, DifferentiableField, DirectedField, JetQuery};
use crate::field::{curvature_at, surface_normal_estimate};
use crate::geometry::{perpendicular_pair, BoundingBox, OrientedPoint, Vec3};

/// Visibility at or above which a pixel counts as a surface hit.
pub const DEFAULT_XI_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Camera {
    pub position: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    /// Degrees.
    pub vertical_fov: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for Camera {
    fn default() -> Self {
        Self {
            position: Vec3::new(0.0, 0.0, 3.0),
            look_at: Vec3::zeros(),
            up: Vec3::y(),
            vertical_fov: 50.0,
            width: 128,
            height: 128,
        }
    }
}

impl Camera {
    /// Orthonormal `(right, up, forward)` frame.
    pub fn frame(&self) -> Result<(Vec3, Vec3, Vec3)> {
        let ok = |v: &Vec3| v.iter().all(|x| x.is_finite());
        if !(ok(&self.position) && ok(&self.look_at) && ok(&self.up)) {
            return Err(Error::invalid("camera vectors must be finite"));
        }
        if !(self.vertical_fov > 0.0 && self.vertical_fov < 180.0) {
            return Err(Error::invalid("vertical_fov must lie in (0, 180) degrees"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        let forward = self.look_at - self.position;
        if forward.norm() < 1e-12 {
            return Err(Error::invalid("camera position coincides with look_at"));
        }
        let forward = forward.normalize();
        let right = forward.cross(&self.up);
        if right.norm() < 1e-9 * self.up.norm().max(1e-300) || right.norm() < 1e-12 {
            return Err(Error::invalid("camera up vector is parallel to the view axis"));
        }
        let right = right.normalize();
        Ok((right, right.cross(&forward), forward))
    }
}

/// One oriented point per pixel, row-major from the top-left, through pixel
/// centers.
pub fn camera_rays(camera: &Camera) -> Result<Vec<OrientedPoint>> {
    let (right, up, forward) = camera.frame()?;
    let half = (camera.vertical_fov.to_radians() / 2.0).tan();
    let (w, h) = (camera.width as f64, camera.height as f64);
    let mut rays = Vec::with_capacity(camera.width * camera.height);
    for j in 0..camera.height {
        let y = (1.0 - 2.0 * (j as f64 + 0.5) / h) * half;
        for i in 0..camera.width {
            let x = (2.0 * (i as f64 + 0.5) / w - 1.0) * half * w / h;
            let v = (forward + right * x + up * y).normalize();
            rays.push(OrientedPoint { p: camera.position, v });
        }
    }
    Ok(rays)
}

/// A `width x height` grid with `channels` values per pixel, row-major
/// from the top-left.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, fill: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![fill; width * height * channels],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let at = (y * self.width + x) * self.channels;
        &self.data[at..at + self.channels]
    }

    fn pixel_mut(&mut self, index: usize) -> &mut [f32] {
        let at = index * self.channels;
        &mut self.data[at..at + self.channels]
    }

    /// Channel `c` as a single-channel image.
    pub fn channel(&self, c: usize) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().skip(c).step_by(self.channels).copied().collect(),
        }
    }
}

/// Depth (`+inf` where not visible) and visibility images.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthVisibility {
    pub depth: Image,
    pub visibility: Image,
}

/// Queries each ray once, applying the outside-domain rule. Returns
/// `(xi, depth)` per ray, `None` for rays that miss the domain.
pub fn render_rays<F: DirectedField + ?Sized>(
    field: &F,
    domain: &BoundingBox,
    rays: &[OrientedPoint],
) -> Result<Vec<Option<(f64, f64)>>> {
    let (moved, slots) = enter_domain(domain, rays);
    let samples = field.query_batch(&moved)?;
    Ok(slots
        .iter()
        .map(|slot| slot.map(|(i, offset)| (samples[i].xi, samples[i].depth + offset)))
        .collect())
}

pub fn render_depth_visibility<F: DirectedField + ?Sized>(field: &F, camera: &Camera) -> Result<DepthVisibility> {
    let rays = camera_rays(camera)?;
    let hits = render_rays(field, &BoundingBox::default(), &rays)?;
    let mut depth = Image::new(camera.width, camera.height, 1, f32::INFINITY);
    let mut visibility = Image::new(camera.width, camera.height, 1, 0.0);
    for (k, hit) in hits.iter().enumerate() {
        if let Some((xi, d)) = *hit {
            visibility.data[k] = xi as f32;
            if xi >= DEFAULT_XI_THRESHOLD {
                depth.data[k] = d as f32;
            }
        }
    }
    Ok(DepthVisibility { depth, visibility })
}

/// Visible pixels (`xi >= threshold`) as `(pixel index, query point)`.
fn visible_pixels<F: DifferentiableField + ?Sized>(
    field: &F,
    camera: &Camera,
    xi_threshold: f64,
) -> Result<Vec<(usize, OrientedPoint)>> {
    let rays = camera_rays(camera)?;
    let (moved, slots) = enter_domain(&BoundingBox::default(), &rays);
    let samples = field.query_batch(&moved)?;
    Ok(slots
        .iter()
        .enumerate()
        .filter_map(|(k, slot)| {
            let (i, _) = (*slot)?;
            (samples[i].xi >= xi_threshold).then_some((k, moved[i]))
        })
        .collect())
}

/// Unit normals facing the camera; NaN where not visible or degenerate.
pub fn render_normals<F: DifferentiableField + ?Sized>(field: &F, camera: &Camera, xi_threshold: f64) -> Result<Image> {
    let pixels = visible_pixels(field, camera, xi_threshold)?;
    let queries: Vec<JetQuery> = pixels.iter().map(|(_, op)| JetQuery::new(*op)).collect();
    let jets = field.jet_batch(&queries)?;
    let mut image = Image::new(camera.width, camera.height, 3, f32::NAN);
    for ((k, op), jet) in pixels.iter().zip(&jets) {
        if let Some(n) = surface_normal_estimate(&jet.grad_p_depth, &op.v) {
            image
                .pixel_mut(*k)
                .copy_from_slice(&[n.x as f32, n.y as f32, n.z as f32]);
        }
    }
    Ok(image)
}

/// Mean and Gaussian curvature per pixel; NaN where not visible or
/// degenerate.
pub fn render_curvature<F: DifferentiableField + ?Sized>(
    field: &F,
    camera: &Camera,
    xi_threshold: f64,
) -> Result<Image> {
    let pixels = visible_pixels(field, camera, xi_threshold)?;
    let first: Vec<JetQuery> = pixels.iter().map(|(_, op)| JetQuery::new(*op)).collect();
    let jets = field.jet_batch(&first)?;
    let mut targets = Vec::new();
    let mut second = Vec::new();
    for ((k, op), jet) in pixels.iter().zip(&jets) {
        if let Some(n) = surface_normal_estimate(&jet.grad_p_depth, &op.v) {
            let (t_x, t_y) = perpendicular_pair(&n);
            targets.push((*k, n, op.v));
            second.push(JetQuery::new(*op).with_second_order(t_x, t_y));
        }
    }
    let jets = field.jet_batch(&second)?;
    let mut image = Image::new(camera.width, camera.height, 2, f32::NAN);
    for ((k, n, v), jet) in targets.iter().zip(&jets) {
        let s = &jet.second;
        if let Some(c) = curvature_at([[s[0], s[1]], [s[2], s[3]]], n, v) {
            image.pixel_mut(*k).copy_from_slice(&[c.mean as f32, c.gaussian as f32]);
        }
    }
    Ok(image)
}

/// Writes a 1- or 3-channel image as little-endian PFM (bottom row first).
pub fn write_pfm<W: Write>(image: &Image, mut out: W) -> Result<()> {
    let tag = match image.channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::invalid(format!("PFM holds 1 or 3 channels, not {c}"))),
    };
    write!(out, "{tag}\n{} {}\n-1.0\n", image.width, image.height)?;
    let row = image.width * image.channels;
    for y in (0..image.height).rev() {
        for x in &image.data[y * row..(y + 1) * row] {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_pfm<R: Read>(input: R) -> Result<Image> {
    let mut input = BufReader::new(input);
    let mut token_line = || -> Result<String> {
        let mut line = String::new();
        input.read_line(&mut line)?;
        if !line.ends_with('\n') {
            return Err(Error::format("pfm", "truncated header"));
        }
        Ok(line.trim().to_string())
    };
    let channels = match token_line()?.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::format("pfm", format!("bad magic {other:?}"))),
    };
    let dims = token_line()?;
    let mut it = dims.split_whitespace().map(str::parse::<usize>);
    let (width, height) = match (it.next(), it.next(), it.next()) {
        (Some(Ok(w)), Some(Ok(h)), None) => (w, h),
        _ => return Err(Error::format("pfm", format!("bad dimensions {dims:?}"))),
    };
    let scale: f64 = token_line()?.parse().map_err(|_| Error::format("pfm", "bad scale"))?;
    if scale >= 0.0 {
        return Err(Error::format("pfm", "big-endian PFM is not supported"));
    }
    let row = width * channels;
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() != row * height * 4 {
        return Err(Error::format("pfm", "payload size does not match dimensions"));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mut data = Vec::with_capacity(values.len());
    for y in (0..height).rev() {
        data.extend_from_slice(&values[y * row..(y + 1) * row]);
    }
    Ok(Image {
        width,
        height,
        channels,
        data,
    })
}

/// Maps a normal component in `[-1, 1]` to a byte, rounding half up.
pub fn normal_to_byte(x: f32) -> u8 {
    ((x.clamp(-1.0, 1.0) as f64 + 1.0) / 2.0 * 255.0 + 0.5).floor() as u8
}

/// Writes a 3-channel normal image as 8-bit RGB; undefined pixels are black.
pub fn write_normal_png<W: Write>(image: &Image, out: W) -> Result<()> {
    if image.channels != 3 {
        return Err(Error::invalid("normal images have 3 channels"));
    }
    let mut encoder = png::Encoder::new(out, image.width as u32, image.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = image
        .data
        .chunks_exact(3)
        .flat_map(|n| {
            if n.iter().all(|x| x.is_finite()) {
                [normal_to_byte(n[0]), normal_to_byte(n[1]), normal_to_byte(n[2])]
            } else {
                [0, 0, 0]
            }
        })
        .collect();
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::format("png", e.to_string()))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::format("png", e.to_string()))?;
    Ok(())
}

/// Any subset of the rendered maps.
#[derive(Clone, Debug, Default)]
pub struct RenderedImages {
    pub depth: Option<Image>,
    pub visibility: Option<Image>,
    pub normals: Option<Image>,
    pub curvature: Option<Image>,
}

/// Writes `<stem>.depth.pfm`, `<stem>.xi.pfm`, `<stem>.normals.png`,
/// `<stem>.mean_curvature.pfm` and `<stem>.gaussian_curvature.pfm` for the
/// maps present; returns the paths written.
pub fn write_images(images: &RenderedImages, stem: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let stem = stem.as_ref();
    let named = |suffix: &str| {
        let mut name = stem.file_name().unwrap_or_default().to_os_string();
        name.push(suffix);
        stem.with_file_name(name)
    };
    let mut written = Vec::new();
    let mut pfm = |image: &Image, suffix: &str| -> Result<()> {
        let path = named(suffix);
        write_pfm(image, BufWriter::new(File::create(&path)?))?;
        written.push(path);
        Ok(())
    };
    if let Some(d) = &images.depth {
        pfm(d, ".depth.pfm")?;
    }
    if let Some(v) = &images.visibility {
        pfm(v, ".xi.pfm")?;
    }
    if let Some(c) = &images.curvature {
        pfm(&c.channel(0), ".mean_curvature.pfm")?;
        pfm(&c.channel(1), ".gaussian_curvature.pfm")?;
    }
    if let Some(n) = &images.normals {
        let path = named(".normals.png");
        write_normal_png(n, BufWriter::new(File::create(&path)?))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::CountingField;
    use crate::geometry::AnalyticShape;

    fn camera(w: usize, h: usize) -> Camera {
        Camera {
            width: w,
            height: h,
            ..Camera::default()
        }
    }

    #[test]
    fn center_ray_looks_down_the_axis() {
        let rays = camera_rays(&camera(5, 3)).unwrap();
        let center = rays[5 + 2].v;
        assert!((center - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-15);
        assert!(rays.iter().all(|r| (r.v.norm() - 1.0).abs() < 1e-9));
    }

    #[test]
    fn corner_rays_are_symmetric() {
        let cam = Camera {
            vertical_fov: 90.0,
            ..camera(2, 2)
        };
        for r in camera_rays(&cam).unwrap() {
            assert!((r.v.x.abs() - r.v.y.abs()).abs() < 1e-15);
        }
        let rays = camera_rays(&cam).unwrap();
        assert!(rays[0].v.x < 0.0 && rays[0].v.y > 0.0, "top-left pixel points up-left");
    }

    #[test]
    fn degenerate_cameras_are_rejected() {
        let mut cam = Camera::default();
        cam.look_at = cam.position;
        assert!(camera_rays(&cam).is_err());
        let cam = Camera {
            up: Vec3::z(),
            ..Camera::default()
        };
        assert!(camera_rays(&cam).is_err());
        let cam = Camera {
            vertical_fov: 180.0,
            ..Camera::default()
        };
        assert!(camera_rays(&cam).is_err());
    }

    #[test]
    fn one_query_per_pixel_and_exact_center_depth() {
        let field = CountingField::new(AnalyticShape::sphere(1.0));
        let out = render_depth_visibility(&field, &camera(17, 17)).unwrap();
        assert_eq!(field.count(), 17 * 17);
        assert_eq!(out.depth.pixel(8, 8)[0], 2.0);
        assert_eq!(out.visibility.pixel(8, 8)[0], 1.0);
        assert_eq!(out.depth.pixel(0, 0)[0], f32::INFINITY);
    }

    #[test]
    fn camera_facing_away_sees_nothing() {
        let cam = Camera {
            look_at: Vec3::new(0.0, 0.0, 4.0),
            ..camera(8, 8)
        };
        let field = CountingField::new(AnalyticShape::sphere(1.0));
        let out = render_depth_visibility(&field, &cam).unwrap();
        assert!(out.visibility.data.iter().all(|&x| x == 0.0));
        assert!(out.depth.data.iter().all(|x| x.is_infinite()));
    }

    #[test]
    fn analytic_normals_and_curvature() {
        let sphere = AnalyticShape::sphere(1.0);
        let cam = camera(9, 9);
        let normals = render_normals(&sphere, &cam, DEFAULT_XI_THRESHOLD).unwrap();
        let center = normals.pixel(4, 4);
        assert!((center[2] - 1.0).abs() < 1e-6 && center[0].abs() < 1e-6);
        let rays = camera_rays(&cam).unwrap();
        for (k, r) in rays.iter().enumerate() {
            let n = &normals.data[3 * k..3 * k + 3];
            if n[0].is_finite() {
                let dot = n[0] as f64 * r.v.x + n[1] as f64 * r.v.y + n[2] as f64 * r.v.z;
                assert!(dot < 0.0);
            }
        }
        let curv = render_curvature(&sphere, &cam, DEFAULT_XI_THRESHOLD).unwrap();
        let defined: Vec<&[f32]> = curv.data.chunks(2).filter(|c| c[0].is_finite()).collect();
        assert!(!defined.is_empty());
        for c in defined {
            assert!((c[0] - 2.0).abs() < 1e-4 && (c[1] - 1.0).abs() < 1e-4, "{c:?}");
        }
    }

    #[test]
    fn pfm_round_trip_keeps_infinity() {
        let mut image = Image::new(3, 2, 1, 1.5);
        image.data[1] = f32::INFINITY;
        image.data[4] = -0.25;
        let mut buf = Vec::new();
        write_pfm(&image, &mut buf).unwrap();
        assert!(buf.starts_with(b"Pf\n3 2\n-1.0\n"));
        assert_eq!(read_pfm(&buf[..]).unwrap(), image);
    }

    #[test]
    fn normal_bytes_round_half_up() {
        assert_eq!(
            [normal_to_byte(0.0), normal_to_byte(0.0), normal_to_byte(1.0)],
            [128, 128, 255]
        );
        assert_eq!(normal_to_byte(-1.0), 0);
    }
}
