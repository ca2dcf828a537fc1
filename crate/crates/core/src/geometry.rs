//! Rasters, sliding-window plans over panoramas, coverage maps, ERP cropping
//! and resizing.
//!
//! Windows slide horizontally only and are square with side equal to the
//! image height. Rasters are row-major, channels-last.

use std::path::Path;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageGeometry {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl ImageGeometry {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dense raster. RGB images use `f32` in `[0, 1]`, label maps use `u8`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster<T> {
    pub geom: ImageGeometry,
    pub data: Vec<T>,
}

pub type Image = Raster<f32>;
pub type LabelMap = Raster<u8>;

impl<T: Copy> Raster<T> {
    pub fn new(geom: ImageGeometry, data: Vec<T>) -> Result<Self> {
        if data.len() != geom.len() {
            return Err(Error::GeometryMismatch(format!(
                "{} values for {}x{}x{}",
                data.len(),
                geom.width,
                geom.height,
                geom.channels
            )));
        }
        Ok(Self { geom, data })
    }

    pub fn filled(geom: ImageGeometry, v: T) -> Self {
        Self {
            geom,
            data: vec![v; geom.len()],
        }
    }

    pub fn width(&self) -> usize {
        self.geom.width
    }

    pub fn height(&self) -> usize {
        self.geom.height
    }

    pub fn channels(&self) -> usize {
        self.geom.channels
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[T] {
        let c = self.geom.channels;
        let o = (y * self.geom.width + x) * c;
        &self.data[o..o + c]
    }

    /// Columns `[x0, x0 + w)` over every row.
    pub fn crop_cols(&self, x0: usize, w: usize) -> Result<Self> {
        if x0 + w > self.geom.width {
            return Err(Error::GeometryMismatch(format!(
                "columns [{x0}, {}) outside width {}",
                x0 + w,
                self.geom.width
            )));
        }
        let c = self.geom.channels;
        let mut data = Vec::with_capacity(w * self.geom.height * c);
        for y in 0..self.geom.height {
            let o = (y * self.geom.width + x0) * c;
            data.extend_from_slice(&self.data[o..o + w * c]);
        }
        Ok(Self {
            geom: ImageGeometry::new(w, self.geom.height, c),
            data,
        })
    }

    /// Rows `[y0, y0 + h)`.
    pub fn crop_rows(&self, y0: usize, h: usize) -> Result<Self> {
        if y0 + h > self.geom.height {
            return Err(Error::GeometryMismatch(format!(
                "rows [{y0}, {}) outside height {}",
                y0 + h,
                self.geom.height
            )));
        }
        let row = self.geom.width * self.geom.channels;
        let data = self.data[y0 * row..(y0 + h) * row].to_vec();
        Ok(Self {
            geom: ImageGeometry::new(self.geom.width, h, self.geom.channels),
            data,
        })
    }

    /// Writes `patch` into columns starting at `x0`.
    pub fn paste_cols(&mut self, patch: &Self, x0: usize) -> Result<()> {
        let g = patch.geom;
        if g.height != self.geom.height
            || g.channels != self.geom.channels
            || x0 + g.width > self.geom.width
        {
            return Err(Error::GeometryMismatch("paste outside raster".into()));
        }
        let c = g.channels;
        for y in 0..g.height {
            let dst = (y * self.geom.width + x0) * c;
            let src = y * g.width * c;
            self.data[dst..dst + g.width * c].copy_from_slice(&patch.data[src..src + g.width * c]);
        }
        Ok(())
    }

    /// Circular horizontal shift: output column `x` is input column `(x + k) mod W`.
    pub fn roll_cols(&self, k: usize) -> Self {
        let (w, c) = (self.geom.width, self.geom.channels);
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.geom.height {
            for x in 0..w {
                let o = (y * w + (x + k) % w) * c;
                data.extend_from_slice(&self.data[o..o + c]);
            }
        }
        Self {
            geom: self.geom,
            data,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Reverse,
}

/// Horizontal sliding-window plan. `offsets` are always stored ascending;
/// [`WindowPlan::ordered`] yields them in visiting order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub width: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub offsets: Vec<usize>,
    pub direction: Direction,
}

impl WindowPlan {
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn with_direction(&self, direction: Direction) -> Self {
        Self {
            direction,
            ..self.clone()
        }
    }

    pub fn reversed(&self) -> Self {
        let d = match self.direction {
            Direction::Forward => Direction::Reverse,
            Direction::Reverse => Direction::Forward,
        };
        self.with_direction(d)
    }

    /// Offsets in visiting order.
    pub fn ordered(&self) -> Vec<usize> {
        match self.direction {
            Direction::Forward => self.offsets.clone(),
            Direction::Reverse => self.offsets.iter().rev().copied().collect(),
        }
    }
}

/// Plans `N = (width - patch_size) / stride + 1` forward windows. Requires
/// `stride` to divide `width - patch_size` and not exceed `patch_size`.
pub fn plan_windows(width: usize, patch_size: usize, stride: usize) -> Result<WindowPlan> {
    if patch_size == 0 {
        return Err(Error::DegeneratePatch("patch size 0".into()));
    }
    if patch_size > width {
        return Err(Error::DegeneratePatch(format!(
            "patch {patch_size} wider than image {width}"
        )));
    }
    let span = width - patch_size;
    if span == 0 {
        return Ok(WindowPlan {
            width,
            patch_size,
            stride,
            offsets: vec![0],
            direction: Direction::Forward,
        });
    }
    if stride == 0 {
        return Err(Error::DegeneratePatch("stride 0".into()));
    }
    // Strides wider than the patch leave uncovered columns.
    if !span.is_multiple_of(stride) || stride > patch_size {
        return Err(Error::NonTiling {
            width,
            patch: patch_size,
            stride,
        });
    }
    let offsets = (0..=span / stride).map(|i| i * stride).collect();
    Ok(WindowPlan {
        width,
        patch_size,
        stride,
        offsets,
        direction: Direction::Forward,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence<T> {
    pub plan: WindowPlan,
    /// Patch `t` is taken at `plan.ordered()[t]`.
    pub patches: Vec<Raster<T>>,
    pub source_geometry: ImageGeometry,
}

impl<T: Copy> PatchSequence<T> {
    /// Writes every patch back at its offset.
    pub fn reassemble(&self) -> Result<Raster<T>> {
        let first = self
            .patches
            .first()
            .ok_or_else(|| Error::GeometryMismatch("empty sequence".into()))?;
        let mut out = Raster::filled(self.source_geometry, first.data[0]);
        for (patch, x0) in self.patches.iter().zip(self.plan.ordered()) {
            out.paste_cols(patch, x0)?;
        }
        Ok(out)
    }
}

/// Square column slices of `image` in the plan's visiting order.
pub fn extract_sequence<T: Copy>(image: &Raster<T>, plan: &WindowPlan) -> Result<PatchSequence<T>> {
    if image.width() != plan.width {
        return Err(Error::GeometryMismatch(format!(
            "image width {} vs plan width {}",
            image.width(),
            plan.width
        )));
    }
    if image.height() != plan.patch_size {
        return Err(Error::GeometryMismatch(format!(
            "patch {} must equal image height {} (horizontal sliding only)",
            plan.patch_size,
            image.height()
        )));
    }
    let patches = plan
        .ordered()
        .into_iter()
        .map(|x0| image.crop_cols(x0, plan.patch_size))
        .collect::<Result<_>>()?;
    Ok(PatchSequence {
        plan: plan.clone(),
        patches,
        source_geometry: image.geom,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoverageMap {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<u32>,
}

impl CoverageMap {
    pub fn at(&self, x: usize, y: usize) -> u32 {
        self.counts[y * self.width + x]
    }
}

/// Per-pixel number of windows covering each pixel, summed over `plans`.
pub fn compute_coverage(plans: &[WindowPlan], geometry: ImageGeometry) -> Result<CoverageMap> {
    let mut col = vec![0u32; geometry.width];
    for plan in plans {
        if plan.width != geometry.width || plan.patch_size > geometry.width {
            return Err(Error::GeometryMismatch(format!(
                "plan width {} vs geometry width {}",
                plan.width, geometry.width
            )));
        }
        for &x0 in &plan.offsets {
            for c in &mut col[x0..x0 + plan.patch_size] {
                *c += 1;
            }
        }
    }
    let counts = (0..geometry.height)
        .flat_map(|_| col.iter().copied())
        .collect();
    Ok(CoverageMap {
        width: geometry.width,
        height: geometry.height,
        counts,
    })
}

/// Removes `round(top_frac * H)` rows from the top and `round(bottom_frac * H)`
/// from the bottom of the image and, identically, of the labels.
pub fn crop_erp_black_regions(
    image: &Image,
    labels: Option<&LabelMap>,
    top_frac: f64,
    bottom_frac: f64,
) -> Result<(Image, Option<LabelMap>)> {
    if !(top_frac >= 0.0 && bottom_frac >= 0.0 && top_frac + bottom_frac < 1.0) {
        return Err(Error::Config(format!(
            "crop fractions {top_frac} + {bottom_frac}"
        )));
    }
    let h = image.height();
    let top = (top_frac * h as f64).round() as usize;
    let bottom = (bottom_frac * h as f64).round() as usize;
    if top + bottom >= h {
        return Err(Error::EmptyResult);
    }
    let keep = h - top - bottom;
    let img = image.crop_rows(top, keep)?;
    let lab = match labels {
        Some(l) => {
            if l.width() != image.width() || l.height() != h {
                return Err(Error::GeometryMismatch("labels differ from image".into()));
            }
            Some(l.crop_rows(top, keep)?)
        }
        None => None,
    };
    Ok((img, lab))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeMode {
    Bilinear,
    Nearest,
}

/// Source coordinate of output index `o` under align-corners-false.
fn src_coord(o: usize, n_in: usize, n_out: usize) -> f64 {
    (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5
}

fn nearest_index(o: usize, n_in: usize, n_out: usize) -> usize {
    (((o as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
}

/// Nearest-neighbour resize; the only mode valid for label maps.
pub fn resize_nearest<T: Copy>(r: &Raster<T>, width: usize, height: usize) -> Result<Raster<T>> {
    if width == 0 || height == 0 {
        return Err(Error::DegeneratePatch(format!(
            "resize target {width}x{height}"
        )));
    }
    let c = r.channels();
    let xs: Vec<usize> = (0..width)
        .map(|x| nearest_index(x, r.width(), width))
        .collect();
    let mut data = Vec::with_capacity(width * height * c);
    for y in 0..height {
        let sy = nearest_index(y, r.height(), height);
        for &sx in &xs {
            data.extend_from_slice(r.pixel(sx, sy));
        }
    }
    Ok(Raster {
        geom: ImageGeometry::new(width, height, c),
        data,
    })
}

/// Bilinear resize with the align-corners-false convention.
pub fn resize_bilinear(r: &Image, width: usize, height: usize) -> Result<Image> {
    if width == 0 || height == 0 {
        return Err(Error::DegeneratePatch(format!(
            "resize target {width}x{height}"
        )));
    }
    if width == r.width() && height == r.height() {
        return Ok(r.clone());
    }
    let taps = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let s = src_coord(o, n_in, n_out).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let tx = taps(width, r.width());
    let ty = taps(height, r.height());
    let c = r.channels();
    let mut data = Vec::with_capacity(width * height * c);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            for ch in 0..c {
                let p = |x: usize, y: usize| r.pixel(x, y)[ch] as f64;
                let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                data.push((top * (1.0 - fy) + bot * fy) as f32);
            }
        }
    }
    Ok(Raster {
        geom: ImageGeometry::new(width, height, c),
        data,
    })
}

pub fn resize(r: &Image, width: usize, height: usize, mode: ResizeMode) -> Result<Image> {
    match mode {
        ResizeMode::Bilinear => resize_bilinear(r, width, height),
        ResizeMode::Nearest => resize_nearest(r, width, height),
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_rgb_png(img: &Image, path: &Path) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::GeometryMismatch(format!(
            "{} channels, expected 3",
            img.channels()
        )));
    }
    let bytes = img.data.iter().map(|&v| quantize(v)).collect();
    let buf = RgbImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .ok_or_else(|| Error::GeometryMismatch("rgb buffer".into()))?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

pub fn save_label_png(labels: &LabelMap, path: &Path) -> Result<()> {
    if labels.channels() != 1 {
        return Err(Error::GeometryMismatch(
            "label maps are single-channel".into(),
        ));
    }
    let buf = GrayImage::from_raw(
        labels.width() as u32,
        labels.height() as u32,
        labels.data.clone(),
    )
    .ok_or_else(|| Error::GeometryMismatch("label buffer".into()))?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.into()));
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

pub fn load_rgb_png(path: &Path) -> Result<Image> {
    let img = open(path)?.to_rgb8();
    let geom = ImageGeometry::new(img.width() as usize, img.height() as usize, 3);
    let data = img
        .into_raw()
        .into_iter()
        .map(|b| b as f32 / 255.0)
        .collect();
    Raster::new(geom, data)
}

pub fn load_label_png(path: &Path) -> Result<LabelMap> {
    let img = open(path)?.to_luma8();
    let geom = ImageGeometry::new(img.width() as usize, img.height() as usize, 1);
    Raster::new(geom, img.into_raw())
}
