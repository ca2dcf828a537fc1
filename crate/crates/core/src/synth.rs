//! Ray-cast synthetic rooms: pinhole views as the source domain, cropped
//! equirectangular panoramas as the target domain.
//!
//! World frame: y is up, a camera with yaw 0 looks along -z, and yaw grows
//! towards +x. The room spans `[-x/2, x/2] x [0, y] x [-z/2, z/2]`.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::geometry::{
    crop_erp_black_regions, load_label_png, load_rgb_png, save_label_png, save_rgb_png, Image,
    ImageGeometry, LabelMap, Raster,
};
use crate::IGNORE;

pub const NUM_CLASSES: usize = 6;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["floor", "ceiling", "wall", "box", "panel", "void"];

pub const FLOOR: u8 = 0;
pub const CEILING: u8 = 1;
pub const WALL: u8 = 2;
pub const BOX: u8 = 3;
pub const PANEL: u8 = 4;
/// Dark doorway openings.
pub const VOID: u8 = 5;

const BASE_ALBEDO: [[f32; 3]; NUM_CLASSES] = [
    [0.55, 0.40, 0.28],
    [0.90, 0.90, 0.88],
    [0.78, 0.74, 0.62],
    [0.30, 0.45, 0.65],
    [0.70, 0.30, 0.30],
    [0.06, 0.06, 0.08],
];
const AMBIENT: f64 = 0.55;
const DIFFUSE: f64 = 0.45;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|i| self.min[i] <= p[i] && p[i] <= self.max[i])
    }

    /// Entry distance and entry-face normal for a ray starting outside.
    fn entry(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, [f64; 3])> {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        let mut axis = 0;
        for i in 0..3 {
            if d[i] == 0.0 {
                if o[i] < self.min[i] || o[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let a = (self.min[i] - o[i]) / d[i];
            let b = (self.max[i] - o[i]) / d[i];
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            if lo > t_near {
                t_near = lo;
                axis = i;
            }
            t_far = t_far.min(hi);
        }
        if t_near > t_far || t_near <= 0.0 {
            return None;
        }
        let mut n = [0.0; 3];
        n[axis] = -d[axis].signum();
        Some((t_near, n))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub bounds: Aabb,
    pub class: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Room extent along x, y, z in meters.
    pub room: [f64; 3],
    pub objects: Vec<SceneObject>,
    pub albedo: [[f32; 3]; NUM_CLASSES],
    /// Unit direction towards the light.
    pub light: [f64; 3],
    pub rng_seed: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct Hit {
    pub t: f64,
    pub class: u8,
    pub normal: [f64; 3],
}

impl SceneSpec {
    /// An empty room with the default palette.
    pub fn empty(room: [f64; 3]) -> Self {
        Self {
            room,
            objects: Vec::new(),
            albedo: BASE_ALBEDO,
            light: normalize([0.3, 0.8, 0.5]),
            rng_seed: 0,
        }
    }

    pub fn interior(&self) -> Aabb {
        let [x, y, z] = self.room;
        Aabb {
            min: [-x / 2.0, 0.0, -z / 2.0],
            max: [x / 2.0, y, z / 2.0],
        }
    }

    /// First surface hit from a point inside the room. Always succeeds because
    /// the room is closed.
    pub fn cast(&self, o: [f64; 3], d: [f64; 3]) -> Hit {
        let room = self.interior();
        let mut best = Hit {
            t: f64::INFINITY,
            class: WALL,
            normal: [0.0; 3],
        };
        for i in 0..3 {
            if d[i] == 0.0 {
                continue;
            }
            let bound = if d[i] > 0.0 { room.max[i] } else { room.min[i] };
            let t = (bound - o[i]) / d[i];
            if t < best.t {
                let mut normal = [0.0; 3];
                normal[i] = -d[i].signum();
                let class = match (i, d[i] > 0.0) {
                    (1, false) => FLOOR,
                    (1, true) => CEILING,
                    _ => WALL,
                };
                best = Hit { t, class, normal };
            }
        }
        for obj in &self.objects {
            if let Some((t, normal)) = obj.bounds.entry(o, d) {
                if t < best.t {
                    best = Hit {
                        t,
                        class: obj.class,
                        normal,
                    };
                }
            }
        }
        best
    }

    fn shade(&self, hit: &Hit) -> [f32; 3] {
        let lambert = dot(hit.normal, self.light).max(0.0);
        let s = (AMBIENT + DIFFUSE * lambert) as f32;
        let a = self.albedo[hit.class as usize];
        [a[0] * s, a[1] * s, a[2] * s]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Projection {
    Pinhole { fov_deg: f64 },
    Equirectangular,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub position: [f64; 3],
    pub yaw: f64,
    /// Ignored for equirectangular cameras, which stay level.
    pub pitch: f64,
    pub width: usize,
    pub height: usize,
    pub projection: Projection,
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Unit direction for longitude `theta` and latitude `phi`.
pub fn sphere_direction(theta: f64, phi: f64) -> [f64; 3] {
    [theta.sin() * phi.cos(), phi.sin(), -theta.cos() * phi.cos()]
}

/// Longitude and latitude of a unit direction.
pub fn direction_angles(d: [f64; 3]) -> (f64, f64) {
    (d[0].atan2(-d[2]), d[1].clamp(-1.0, 1.0).asin())
}

/// Continuous ERP coordinates `(u, v)` of a direction.
pub fn erp_uv(d: [f64; 3], width: usize, height: usize) -> (f64, f64) {
    let (theta, phi) = direction_angles(d);
    (
        (theta + PI) / TAU * width as f64,
        (PI / 2.0 - phi) / PI * height as f64,
    )
}

fn rotate_yaw_pitch(v: [f64; 3], yaw: f64, pitch: f64) -> [f64; 3] {
    let (sp, cp) = pitch.sin_cos();
    let y = v[1] * cp - v[2] * sp;
    let z = v[2] * cp + v[1] * sp;
    let (sy, cy) = yaw.sin_cos();
    [v[0] * cy - z * sy, y, v[0] * sy + z * cy]
}

impl CameraSpec {
    pub fn focal(&self) -> Option<f64> {
        match self.projection {
            Projection::Pinhole { fov_deg } => {
                Some(self.width as f64 / 2.0 / (fov_deg.to_radians() / 2.0).tan())
            }
            Projection::Equirectangular => None,
        }
    }

    /// Unit ray direction through continuous image coordinates `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        match self.projection {
            Projection::Pinhole { .. } => {
                let f = self.focal().unwrap_or(1.0);
                let cam = [
                    (u - self.width as f64 / 2.0) / f,
                    -(v - self.height as f64 / 2.0) / f,
                    -1.0,
                ];
                normalize(rotate_yaw_pitch(cam, self.yaw, self.pitch))
            }
            Projection::Equirectangular => {
                let theta = u / self.width as f64 * TAU - PI + self.yaw;
                let phi = PI / 2.0 - v / self.height as f64 * PI;
                sphere_direction(theta, phi)
            }
        }
    }

    /// Pixel `(x, y)` of a pinhole camera whose center ray is closest to `d`,
    /// or `None` when `d` is outside the frustum.
    pub fn pinhole_pixel(&self, d: [f64; 3]) -> Option<(usize, usize)> {
        let f = self.focal()?;
        // Inverse of the yaw-then-pitch rotation.
        let (sy, cy) = self.yaw.sin_cos();
        let x = d[0] * cy + d[2] * sy;
        let z = -d[0] * sy + d[2] * cy;
        let (sp, cp) = self.pitch.sin_cos();
        let y = d[1] * cp + z * sp;
        let z = z * cp - d[1] * sp;
        if z >= 0.0 {
            return None;
        }
        let u = x / -z * f + self.width as f64 / 2.0;
        let v = -y / -z * f + self.height as f64 / 2.0;
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return None;
        }
        Some((u as usize, v as usize))
    }
}

/// Ray-casts one sample per pixel center.
///
/// Equirectangular yaws that are a whole number of columns are applied as an
/// integral column offset, so such renders are exact circular shifts of each
/// other.
pub fn render(scene: &SceneSpec, camera: &CameraSpec) -> (Image, LabelMap) {
    let (w, h) = (camera.width, camera.height);
    let mut img = Vec::with_capacity(w * h * 3);
    let mut labels = Vec::with_capacity(w * h);
    let shift = match camera.projection {
        Projection::Equirectangular => {
            let s = camera.yaw / TAU * w as f64;
            ((s - s.round()).abs() < 1e-9).then(|| s.round().rem_euclid(w as f64) as usize)
        }
        Projection::Pinhole { .. } => None,
    };
    let level = CameraSpec {
        yaw: 0.0,
        ..*camera
    };
    for y in 0..h {
        for x in 0..w {
            let d = match shift {
                Some(k) => level.ray(((x + k) % w) as f64 + 0.5, y as f64 + 0.5),
                None => camera.ray(x as f64 + 0.5, y as f64 + 0.5),
            };
            let hit = scene.cast(camera.position, d);
            img.extend_from_slice(&scene.shade(&hit));
            labels.push(hit.class);
        }
    }
    (
        Raster {
            geom: ImageGeometry::new(w, h, 3),
            data: img,
        },
        Raster {
            geom: ImageGeometry::new(w, h, 1),
            data: labels,
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub seed: u64,
    pub scene_count: usize,
    pub pinhole_size: usize,
    pub pinhole_fov_deg: f64,
    pub views_per_scene: usize,
    pub pitch_range_deg: f64,
    pub erp_width: usize,
    pub erp_height: usize,
    pub crop_top: f64,
    pub crop_bottom: f64,
    /// Systematic brightness offset and contrast gain of the target domain.
    pub target_brightness: f32,
    pub target_contrast: f32,
    /// Per-image uniform jitter added on top, target only.
    pub brightness_jitter: f32,
    pub contrast_jitter: f32,
    /// Per-scene uniform albedo perturbation, both domains.
    pub albedo_jitter: f32,
    /// Fraction of scenes held out for evaluation.
    pub val_fraction: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene_count: 40,
            pinhole_size: 64,
            pinhole_fov_deg: 70.0,
            views_per_scene: 4,
            pitch_range_deg: 15.0,
            erp_width: 256,
            erp_height: 128,
            crop_top: 0.25,
            crop_bottom: 0.25,
            target_brightness: -0.12,
            target_contrast: 0.8,
            brightness_jitter: 0.05,
            contrast_jitter: 0.05,
            albedo_jitter: 0.08,
            val_fraction: 0.25,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.pinhole_size == 0 || self.erp_width == 0 || self.erp_height == 0 {
            return bad("image sizes must be positive");
        }
        if !(self.pinhole_fov_deg > 0.0 && self.pinhole_fov_deg < 180.0) {
            return bad("pinhole fov must lie in (0, 180)");
        }
        if !(0.0..=1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    /// Geometry of the cropped panoramas.
    pub fn target_geometry(&self) -> ImageGeometry {
        let h = self.erp_height;
        let keep = h
            - (self.crop_top * h as f64).round() as usize
            - (self.crop_bottom * h as f64).round() as usize;
        ImageGeometry::new(self.erp_width, keep, 3)
    }
}

/// Random room with floor boxes, wall panels and one doorway, plus a camera
/// position near its center that no object contains.
pub fn random_scene(rng: &mut ChaCha8Rng, albedo_jitter: f32) -> (SceneSpec, [f64; 3]) {
    let room = [
        rng.random_range(4.0..8.0),
        rng.random_range(2.6..3.4),
        rng.random_range(4.0..8.0),
    ];
    let camera = random_camera_position(rng, room);
    let mut scene = SceneSpec::empty(room);
    scene.rng_seed = rng.random();
    for a in scene.albedo.iter_mut() {
        for ch in a.iter_mut() {
            *ch = (*ch + rng.random_range(-albedo_jitter..=albedo_jitter)).clamp(0.0, 1.0);
        }
    }
    scene.light = normalize([
        rng.random_range(-0.5..0.5),
        1.0,
        rng.random_range(-0.5..0.5),
    ]);
    let (hx, hz) = (room[0] / 2.0, room[2] / 2.0);

    let boxes = rng.random_range(1..=3);
    for _ in 0..boxes {
        for _ in 0..20 {
            let sx = rng.random_range(0.5..1.2);
            let sz = rng.random_range(0.5..1.2);
            let sy = rng.random_range(0.4..1.1);
            let cx = rng.random_range(-hx + sx / 2.0 + 0.1..hx - sx / 2.0 - 0.1);
            let cz = rng.random_range(-hz + sz / 2.0 + 0.1..hz - sz / 2.0 - 0.1);
            let b = Aabb {
                min: [cx - sx / 2.0, 0.0, cz - sz / 2.0],
                max: [cx + sx / 2.0, sy, cz + sz / 2.0],
            };
            let grown = Aabb {
                min: [b.min[0] - 0.6, -1.0, b.min[2] - 0.6],
                max: [b.max[0] + 0.6, room[1] + 1.0, b.max[2] + 0.6],
            };
            if !grown.contains(camera) {
                scene.objects.push(SceneObject {
                    bounds: b,
                    class: BOX,
                });
                break;
            }
        }
    }
    let mut wall_object =
        |rng: &mut ChaCha8Rng, class: u8, width: f64, y0: f64, y1: f64, depth: f64| {
            let wall = rng.random_range(0..4);
            let along = if wall < 2 { hx } else { hz };
            let c = rng.random_range(-along + width / 2.0 + 0.05..along - width / 2.0 - 0.05);
            let (lo, hi) = (c - width / 2.0, c + width / 2.0);
            let bounds = match wall {
                0 => Aabb {
                    min: [lo, y0, -hz],
                    max: [hi, y1, -hz + depth],
                },
                1 => Aabb {
                    min: [lo, y0, hz - depth],
                    max: [hi, y1, hz],
                },
                2 => Aabb {
                    min: [-hx, y0, lo],
                    max: [-hx + depth, y1, hi],
                },
                _ => Aabb {
                    min: [hx - depth, y0, lo],
                    max: [hx, y1, hi],
                },
            };
            scene.objects.push(SceneObject { bounds, class });
        };
    let door_w = rng.random_range(0.8..1.1);
    let door_h = rng.random_range(1.9..2.2);
    wall_object(rng, VOID, door_w, 0.0, door_h, 0.02);
    let panels = rng.random_range(1..=3);
    for _ in 0..panels {
        let w = rng.random_range(0.6..1.4);
        let y0 = rng.random_range(0.9..1.5);
        let h = rng.random_range(0.5..1.0);
        wall_object(rng, PANEL, w, y0, y0 + h, 0.03);
    }
    (scene, camera)
}

fn random_camera_position(rng: &mut ChaCha8Rng, room: [f64; 3]) -> [f64; 3] {
    [
        rng.random_range(-0.15..0.15) * room[0],
        rng.random_range(1.2..1.6),
        rng.random_range(-0.15..0.15) * room[2],
    ]
}

/// Brightness/contrast shift around mid-grey, clamped to `[0, 1]`.
pub fn photometric(img: &mut Image, brightness: f32, contrast: f32) {
    for v in &mut img.data {
        *v = ((*v - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Paths relative to the manifest directory.
    pub image: String,
    pub label: String,
    pub domain: Domain,
    pub scene: usize,
    /// `train` or `val`.
    pub split: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const GENERATION_FILE: &str = "generation.toml";

/// One scene's pinhole views and cropped panorama, all in memory.
pub struct RenderedScene {
    pub scene: SceneSpec,
    pub pinhole: Vec<(CameraSpec, Image, LabelMap)>,
    pub erp: (CameraSpec, Image, LabelMap),
}

/// Renders scene `index` of the dataset described by `config`.
pub fn render_scene(config: &GenerationConfig, index: usize) -> Result<RenderedScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let (scene, camera) = random_scene(&mut rng, config.albedo_jitter);

    let base_yaw = rng.random_range(0.0..TAU);
    let mut pinhole = Vec::with_capacity(config.views_per_scene);
    for v in 0..config.views_per_scene {
        let cam = CameraSpec {
            position: camera,
            yaw: base_yaw + v as f64 * TAU / config.views_per_scene as f64,
            pitch: rng
                .random_range(-config.pitch_range_deg..=config.pitch_range_deg)
                .to_radians(),
            width: config.pinhole_size,
            height: config.pinhole_size,
            projection: Projection::Pinhole {
                fov_deg: config.pinhole_fov_deg,
            },
        };
        let (img, lab) = render(&scene, &cam);
        pinhole.push((cam, img, lab));
    }

    let erp_cam = CameraSpec {
        position: camera,
        yaw: rng.random_range(0..config.erp_width) as f64 * TAU / config.erp_width as f64,
        pitch: 0.0,
        width: config.erp_width,
        height: config.erp_height,
        projection: Projection::Equirectangular,
    };
    let (img, lab) = render(&scene, &erp_cam);
    let (mut img, lab) =
        crop_erp_black_regions(&img, Some(&lab), config.crop_top, config.crop_bottom)?;
    let b = config.target_brightness
        + rng.random_range(-config.brightness_jitter..=config.brightness_jitter);
    let c =
        config.target_contrast + rng.random_range(-config.contrast_jitter..=config.contrast_jitter);
    photometric(&mut img, b, c);
    let lab = lab.ok_or_else(|| Error::GeometryMismatch("cropped labels".into()))?;
    Ok(RenderedScene {
        scene,
        pinhole,
        erp: (erp_cam, img, lab),
    })
}

/// Renders `config.scene_count` scenes into `out_dir` and writes the manifest
/// and the generation config next to them. Output bytes depend only on
/// `config`.
pub fn generate_dataset(config: &GenerationConfig, out_dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let n_val = (config.scene_count as f64 * config.val_fraction).round() as usize;
    let mut entries = Vec::new();
    if config.scene_count > 0 {
        for dir in ["source", "target"] {
            let p = out_dir.join(dir);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
    }
    for index in 0..config.scene_count {
        let split = if index >= config.scene_count - n_val {
            "val"
        } else {
            "train"
        };
        let rendered = render_scene(config, index)?;
        let mut emit = |domain: Domain, stem: String, img: &Image, lab: &LabelMap| -> Result<()> {
            let dir = match domain {
                Domain::Source => "source",
                Domain::Target => "target",
            };
            let image = format!("{dir}/{stem}_rgb.png");
            let label = format!("{dir}/{stem}_label.png");
            save_rgb_png(img, &out_dir.join(&image))?;
            save_label_png(lab, &out_dir.join(&label))?;
            entries.push(ManifestEntry {
                image,
                label,
                domain,
                scene: index,
                split: split.into(),
            });
            Ok(())
        };
        for (v, (_, img, lab)) in rendered.pinhole.iter().enumerate() {
            emit(Domain::Source, format!("scene{index:04}_view{v}"), img, lab)?;
        }
        let (_, img, lab) = &rendered.erp;
        emit(Domain::Target, format!("scene{index:04}_erp"), img, lab)?;
    }
    let manifest = DatasetManifest {
        name: "synthetic-rooms".into(),
        num_classes: NUM_CLASSES,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        entries,
    };
    let mpath = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json {
        path: mpath.clone(),
        source,
    })?;
    fs::write(&mpath, json).map_err(io_err(&mpath))?;
    let gpath = out_dir.join(GENERATION_FILE);
    let text = toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&gpath, text).map_err(io_err(&gpath))?;
    Ok(manifest)
}

/// A labeled image held in memory.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Image,
    pub labels: LabelMap,
    pub scene: usize,
}

/// Manifest plus its root directory. Files are read on demand and validated
/// when first loaded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(manifest_path.into())
        } else {
            Error::Io {
                path: manifest_path.into(),
                source: e,
            }
        }
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: manifest_path.into(),
        source,
    })?;
    if manifest.num_classes == 0 || manifest.num_classes > IGNORE as usize {
        return Err(Error::Config(format!(
            "class count {}",
            manifest.num_classes
        )));
    }
    let root = manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .to_path_buf();
    for e in &manifest.entries {
        for p in [&e.image, &e.label] {
            if !root.join(p).exists() {
                return Err(Error::MissingFile(root.join(p)));
            }
        }
    }
    Ok(Dataset { root, manifest })
}

impl Dataset {
    pub fn entries(&self, domain: Domain, split: Option<&str>) -> Vec<&ManifestEntry> {
        self.manifest
            .entries
            .iter()
            .filter(|e| e.domain == domain && split.is_none_or(|s| e.split == s))
            .collect()
    }

    pub fn load(&self, entry: &ManifestEntry) -> Result<Sample> {
        let ipath = self.root.join(&entry.image);
        let lpath = self.root.join(&entry.label);
        let image = load_rgb_png(&ipath)?;
        let labels = load_label_png(&lpath)?;
        if image.width() != labels.width() || image.height() != labels.height() {
            return Err(Error::GeometryMismatch(format!(
                "{} is {}x{} but {} is {}x{}",
                ipath.display(),
                image.width(),
                image.height(),
                lpath.display(),
                labels.width(),
                labels.height()
            )));
        }
        let k = self.manifest.num_classes as u8;
        if let Some(&value) = labels.data.iter().find(|&&v| v >= k && v != IGNORE) {
            return Err(Error::BadLabelValue { path: lpath, value });
        }
        Ok(Sample {
            image,
            labels,
            scene: entry.scene,
        })
    }

    pub fn load_all(&self, domain: Domain, split: Option<&str>) -> Result<Vec<Sample>> {
        self.entries(domain, split)
            .into_iter()
            .map(|e| self.load(e))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ImageGeometry;

    fn scene(seed: u64) -> (SceneSpec, [f64; 3]) {
        random_scene(&mut ChaCha8Rng::seed_from_u64(seed), 0.05)
    }

    fn erp(position: [f64; 3], yaw: f64, w: usize, h: usize) -> CameraSpec {
        CameraSpec {
            position,
            yaw,
            pitch: 0.0,
            width: w,
            height: h,
            projection: Projection::Equirectangular,
        }
    }

    #[test]
    fn erp_center_looks_down_negative_z() {
        let s = SceneSpec::empty([4.0, 3.0, 4.0]);
        let cam = erp([0.0, 1.5, 0.0], 0.0, 64, 32);
        let d = cam.ray(32.0, 16.0);
        assert!((d[2] + 1.0).abs() < 1e-12 && d[0].abs() < 1e-12 && d[1].abs() < 1e-12);
        let (_, labels) = render(&s, &cam);
        assert_eq!(labels.pixel(32, 16)[0], WALL);
        let hit = s.cast([0.0, 1.5, 0.0], d);
        assert!((hit.t - 2.0).abs() < 1e-12);
        assert_eq!(hit.normal, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn erp_uv_inverts_ray() {
        let cam = erp([0.0; 3], 0.0, 256, 128);
        for (u, v) in [(0.5, 0.5), (100.25, 40.0), (255.5, 127.5), (128.0, 64.0)] {
            let (u2, v2) = erp_uv(cam.ray(u, v), 256, 128);
            assert!(
                (u - u2).abs() < 1e-9 && (v - v2).abs() < 1e-9,
                "{u} {v} -> {u2} {v2}"
            );
        }
    }

    #[test]
    fn looking_down_sees_only_floor() {
        let s = SceneSpec::empty([6.0, 3.0, 6.0]);
        let cam = CameraSpec {
            position: [0.0, 1.5, 0.0],
            yaw: 0.3,
            pitch: -PI / 2.0,
            width: 32,
            height: 32,
            projection: Projection::Pinhole { fov_deg: 70.0 },
        };
        let (_, labels) = render(&s, &cam);
        assert!(labels.data.iter().all(|&l| l == FLOOR));
    }

    #[test]
    fn pinhole_pixel_inverts_ray() {
        let cam = CameraSpec {
            position: [0.0; 3],
            yaw: 1.1,
            pitch: 0.2,
            width: 64,
            height: 64,
            projection: Projection::Pinhole { fov_deg: 70.0 },
        };
        for (x, y) in [(0, 0), (10, 50), (63, 63), (32, 31)] {
            let d = cam.ray(x as f64 + 0.5, y as f64 + 0.5);
            assert_eq!(cam.pinhole_pixel(d), Some((x, y)));
        }
        assert_eq!(cam.pinhole_pixel(cam.ray(32.0, 32.0).map(|v| -v)), None);
    }

    #[test]
    fn integral_yaw_is_circular_shift() {
        let (s, cam) = scene(3);
        let (w, h) = (128, 64);
        let (img0, lab0) = render(&s, &erp(cam, 0.0, w, h));
        for k in [1usize, 17, 64, 127] {
            let yaw = k as f64 * TAU / w as f64;
            let (img, lab) = render(&s, &erp(cam, yaw, w, h));
            assert_eq!(lab, lab0.roll_cols(k));
            assert_eq!(img, img0.roll_cols(k));
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let (s, cam) = scene(5);
        let c = erp(cam, 0.37, 64, 32);
        assert_eq!(render(&s, &c), render(&s, &c));
    }

    /// Every direction hits something, objects lie inside the room and no
    /// object swallows the camera.
    #[test]
    fn scenes_are_closed_and_valid() {
        for seed in 0..20 {
            let (s, cam) = random_scene(&mut ChaCha8Rng::seed_from_u64(seed), 0.08);
            let interior = s.interior();
            for o in &s.objects {
                assert!(interior.contains(o.bounds.min) && interior.contains(o.bounds.max));
                assert!(!o.bounds.contains(cam));
                assert!((o.class as usize) < NUM_CLASSES);
            }
            for i in 0..200 {
                let d = sphere_direction(i as f64 * 0.7, (i as f64 * 0.013).sin() * 1.5);
                let hit = s.cast(cam, d);
                assert!(hit.t.is_finite() && hit.t > 0.0);
            }
        }
    }

    /// Class of each ERP pixel corner direction; a pixel is uniform when all
    /// four corners and its center agree.
    fn footprint_uniform(s: &SceneSpec, cam: &CameraSpec, x: usize, y: usize) -> bool {
        let c = s
            .cast(cam.position, cam.ray(x as f64 + 0.5, y as f64 + 0.5))
            .class;
        [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
            .iter()
            .all(|&(dx, dy)| {
                s.cast(cam.position, cam.ray(x as f64 + dx, y as f64 + dy))
                    .class
                    == c
            })
    }

    #[test]
    fn pinhole_and_erp_agree_on_shared_directions() {
        for seed in 0..3u64 {
            let (s, pos) = scene(seed);
            let erp_cam = erp(pos, 0.0, 256, 128);
            let (_, erp_labels) = render(&s, &erp_cam);
            let pin = CameraSpec {
                position: pos,
                yaw: 0.4 * seed as f64,
                pitch: 0.1,
                width: 64,
                height: 64,
                projection: Projection::Pinhole { fov_deg: 70.0 },
            };
            let (_, pin_labels) = render(&s, &pin);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let mut mismatches = 0;
            for _ in 0..1000 {
                let (px, py) = (rng.random_range(0..64), rng.random_range(0..64));
                let d = pin.ray(px as f64 + 0.5, py as f64 + 0.5);
                let (u, v) = erp_uv(d, 256, 128);
                let (ex, ey) = ((u as usize).min(255), (v as usize).min(127));
                if pin_labels.pixel(px, py)[0] != erp_labels.pixel(ex, ey)[0] {
                    mismatches += 1;
                    assert!(
                        !footprint_uniform(&s, &erp_cam, ex, ey),
                        "mismatch inside a uniform ERP pixel at ({ex}, {ey})"
                    );
                }
            }
            assert!(mismatches < 100, "{mismatches} mismatches");
        }
    }

    /// Per-class solid-angle fractions from the ERP rows against uniform
    /// sphere sampling.
    #[test]
    fn erp_solid_angle_matches_monte_carlo() {
        for seed in 0..2u64 {
            let (s, pos) = scene(seed);
            let (w, h) = (256, 128);
            let (_, labels) = render(&s, &erp(pos, 0.0, w, h));
            let mut erp_frac = [0.0f64; NUM_CLASSES];
            for y in 0..h {
                let phi = PI / 2.0 - (y as f64 + 0.5) / h as f64 * PI;
                let row_weight = phi.cos() * (TAU / w as f64) * (PI / h as f64) / (4.0 * PI);
                for x in 0..w {
                    erp_frac[labels.pixel(x, y)[0] as usize] += row_weight;
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 200_000;
            let mut mc = [0.0f64; NUM_CLASSES];
            for _ in 0..n {
                let z: f64 = rng.random_range(-1.0..1.0);
                let a: f64 = rng.random_range(0.0..TAU);
                let r = (1.0 - z * z).sqrt();
                let d = [r * a.cos(), z, r * a.sin()];
                mc[s.cast(pos, d).class as usize] += 1.0 / n as f64;
            }
            for k in 0..NUM_CLASSES {
                assert!(
                    (erp_frac[k] - mc[k]).abs() < 0.02,
                    "class {k}: {} vs {}",
                    erp_frac[k],
                    mc[k]
                );
            }
        }
    }

    fn tiny_config(seed: u64, scenes: usize) -> GenerationConfig {
        GenerationConfig {
            seed,
            scene_count: scenes,
            pinhole_size: 16,
            views_per_scene: 2,
            erp_width: 64,
            erp_height: 32,
            ..GenerationConfig::default()
        }
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = tiny_config(9, 3);
        let ma = generate_dataset(&cfg, a.path()).unwrap();
        let mb = generate_dataset(&cfg, b.path()).unwrap();
        assert_eq!(ma, mb);
        let mut files = vec![MANIFEST_FILE.to_string(), GENERATION_FILE.to_string()];
        for e in &ma.entries {
            files.push(e.image.clone());
            files.push(e.label.clone());
        }
        for f in files {
            assert_eq!(
                fs::read(a.path().join(&f)).unwrap(),
                fs::read(b.path().join(&f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn zero_scenes_writes_no_images() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&tiny_config(1, 0), dir.path()).unwrap();
        assert!(m.entries.is_empty());
        let names: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 2);
    }

    #[test]
    fn emitted_labels_are_valid_and_geometry_matches() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(4, 4);
        generate_dataset(&cfg, dir.path()).unwrap();
        let ds = load_dataset(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(ds.entries(Domain::Source, None).len(), 8);
        assert_eq!(ds.entries(Domain::Target, Some("val")).len(), 1);
        for s in ds.load_all(Domain::Source, None).unwrap() {
            assert_eq!(s.image.geom, ImageGeometry::new(16, 16, 3));
            assert!(s.labels.data.iter().all(|&l| (l as usize) < NUM_CLASSES));
        }
        let g = cfg.target_geometry();
        for s in ds.load_all(Domain::Target, None).unwrap() {
            assert_eq!(s.image.geom, g);
            assert!(s.labels.data.iter().all(|&l| (l as usize) < NUM_CLASSES));
        }
    }

    #[test]
    fn loader_rejects_bad_labels_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&tiny_config(2, 1), dir.path()).unwrap();
        let ds = load_dataset(&dir.path().join(MANIFEST_FILE)).unwrap();
        let entry = ds.manifest.entries[0].clone();
        let mut bad = ds.load(&entry).unwrap().labels;
        bad.data[3] = 9;
        save_label_png(&bad, &dir.path().join(&entry.label)).unwrap();
        assert!(matches!(
            ds.load(&entry),
            Err(Error::BadLabelValue { value: 9, .. })
        ));

        let small = Raster::filled(ImageGeometry::new(3, 3, 1), 0u8);
        save_label_png(&small, &dir.path().join(&entry.label)).unwrap();
        assert!(matches!(ds.load(&entry), Err(Error::GeometryMismatch(_))));

        fs::remove_file(dir.path().join(&entry.image)).unwrap();
        assert!(matches!(
            load_dataset(&dir.path().join(MANIFEST_FILE)),
            Err(Error::MissingFile(_))
        ));
    }
}
