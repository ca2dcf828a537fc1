//! Dense prediction, confusion matrices, IoU reports and domain-gap tables.
//!
//! Scores in reports are percentages. A class counts toward mIoU only when it
//! occurs in the ground truth.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use panoseg_numerics::write_checkpoint;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::geometry::{
    extract_sequence, save_rgb_png, Image, ImageGeometry, LabelMap, Raster, WindowPlan,
};
use crate::losses::argmax;
use crate::segnet::SegNet;
use crate::IGNORE;

/// `counts[gt * k + pred]`, ignored ground-truth pixels counted apart.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
    pub ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
            ignored: 0,
        }
    }

    pub fn at(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    /// Counted pixels, excluding ignored ones.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::GeometryMismatch(format!(
                "{} predictions for {} labels",
                pred.len(),
                gt.len()
            )));
        }
        let k = self.classes;
        for (&p, &y) in pred.iter().zip(gt) {
            if y == IGNORE {
                self.ignored += 1;
                continue;
            }
            if y as usize >= k || p as usize >= k {
                return Err(Error::GeometryMismatch(format!(
                    "label pair ({y}, {p}) outside {k} classes"
                )));
            }
            self.counts[y as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
    }

    /// Per-class IoU in `[0, 1]`, `None` for classes absent from the ground
    /// truth, and their mean. The mean is 0 when no class is present.
    pub fn iou(&self) -> (Vec<Option<f64>>, f64) {
        let k = self.classes;
        let per: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let row: u64 = (0..k).map(|j| self.at(c, j)).sum();
                if row == 0 {
                    return None;
                }
                let col: u64 = (0..k).map(|i| self.at(i, c)).sum();
                let tp = self.at(c, c);
                Some(tp as f64 / (row + col - tp) as f64)
            })
            .collect();
        let present: Vec<f64> = per.iter().flatten().copied().collect();
        let mean = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        (per, mean)
    }
}

/// How overlapping window predictions become one dense map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    /// Argmax of the mean probability over covering windows.
    #[default]
    Average,
    /// Each column takes the window whose center is nearest, lowest offset
    /// on ties.
    CenterCrop,
}

/// Class map and `[H, W, K]` fused probabilities of one image, windows
/// visited in the plan's order.
pub fn predict_dense(
    net: &SegNet<f32>,
    image: &Image,
    plan: &WindowPlan,
    memory: bool,
    fusion: Fusion,
) -> Result<(LabelMap, Vec<f32>)> {
    let (w, h, k) = (image.width(), image.height(), net.config.num_classes);
    let seq = extract_sequence(image, plan)?;
    let probs = net.predict_probs(&seq.patches, memory)?;
    let offsets = plan.ordered();
    let side = plan.patch_size;
    let mut acc = vec![0f32; w * h * k];
    let mut cover = vec![0u32; w];
    let owner: Vec<usize> = (0..w)
        .map(|x| {
            let mut sorted = offsets.clone();
            sorted.sort_unstable();
            let dist = |o: usize| (2 * x + 1).abs_diff(2 * o + side);
            sorted
                .into_iter()
                .filter(|&o| o <= x && x < o + side)
                .min_by_key(|&o| (dist(o), o))
                .unwrap_or(0)
        })
        .collect();
    for (&offset, p) in offsets.iter().zip(&probs) {
        for x in offset..offset + side {
            if fusion == Fusion::CenterCrop && owner[x] != offset {
                continue;
            }
            cover[x] += 1;
            for y in 0..h {
                let src = &p.data()[(y * side + x - offset) * k..][..k];
                let dst = &mut acc[(y * w + x) * k..][..k];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            let n = cover[x].max(1) as f32;
            acc[(y * w + x) * k..][..k].iter_mut().for_each(|v| *v /= n);
        }
    }
    let labels = acc.chunks(k).map(|px| argmax(px) as u8).collect();
    Ok((Raster::new(ImageGeometry::new(w, h, 1), labels)?, acc))
}

/// Evaluation input: name, image, ground truth.
pub type EvalItem<'a> = (String, &'a Image, &'a LabelMap);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub name: String,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    /// Percent, `None` where the class never occurs in the ground truth.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub per_image: Vec<ImageScore>,
    pub confusion: ConfusionMatrix,
    pub config_hash: String,
    pub checkpoint_id: String,
    pub fusion: Fusion,
    pub memory: bool,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// SHA-256 of the serialized parameters, equal to the hash of the saved
/// checkpoint file.
pub fn checkpoint_id(net: &SegNet<f32>) -> Result<String> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &net.params)?;
    Ok(sha256_hex(&buf))
}

/// SHA-256 over the model config and the evaluation settings.
pub fn config_hash(
    net: &SegNet<f32>,
    plan: &WindowPlan,
    memory: bool,
    fusion: Fusion,
) -> Result<String> {
    let model = toml::to_string(&net.config).map_err(|e| Error::Config(e.to_string()))?;
    let text = format!(
        "{model}\n[eval]\npatch = {}\nstride = {}\nmemory = {memory}\nfusion = {fusion:?}\n",
        plan.patch_size, plan.stride
    );
    Ok(sha256_hex(text.as_bytes()))
}

/// Dense prediction over every item with an optional colorized PNG per image.
pub fn evaluate(
    net: &SegNet<f32>,
    items: &[EvalItem],
    plan: &WindowPlan,
    memory: bool,
    fusion: Fusion,
    class_names: &[String],
    png_dir: Option<&Path>,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::EmptyDataset("nothing to evaluate".into()));
    }
    let k = net.config.num_classes;
    if class_names.len() != k {
        return Err(Error::Config(format!(
            "{} class names for {k} classes",
            class_names.len()
        )));
    }
    if let Some(dir) = png_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut total = ConfusionMatrix::new(k);
    let mut per_image = Vec::with_capacity(items.len());
    for (name, image, gt) in items {
        if image.width() != gt.width() || image.height() != gt.height() {
            return Err(Error::GeometryMismatch(format!(
                "{name}: image and labels differ in size"
            )));
        }
        let (pred, _) = predict_dense(net, image, plan, memory, fusion)?;
        let mut cm = ConfusionMatrix::new(k);
        cm.accumulate(&pred.data, &gt.data)?;
        per_image.push(ImageScore {
            name: name.clone(),
            miou: 100.0 * cm.iou().1,
        });
        total.merge(&cm);
        if let Some(dir) = png_dir {
            save_rgb_png(&colorize(&pred), &dir.join(format!("{name}_pred.png")))?;
        }
    }
    let (iou, miou) = total.iou();
    Ok(EvalReport {
        class_names: class_names.to_vec(),
        iou: iou.into_iter().map(|v| v.map(|x| 100.0 * x)).collect(),
        miou: 100.0 * miou,
        per_image,
        confusion: total,
        config_hash: config_hash(net, plan, memory, fusion)?,
        checkpoint_id: checkpoint_id(net)?,
        fusion,
        memory,
    })
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })?;
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|_| Error::MissingFile(path.into()))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })
    }

    /// `class,iou` rows ending with `mIoU`; absent classes have an empty cell.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,iou\n");
        for (name, v) in self.class_names.iter().zip(&self.iou) {
            let cell = v.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{name},{cell}");
        }
        let _ = writeln!(s, "mIoU,{}", self.miou);
        s
    }
}

/// `target - source` for mIoU and every class scored in both reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainGap {
    pub class_names: Vec<String>,
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn domain_gap(source: &EvalReport, target: &EvalReport) -> Result<DomainGap> {
    if source.class_names != target.class_names {
        return Err(Error::GeometryMismatch(
            "reports cover different classes".into(),
        ));
    }
    let iou = source
        .iou
        .iter()
        .zip(&target.iou)
        .map(|(s, t)| match (s, t) {
            (Some(s), Some(t)) => Some(t - s),
            _ => None,
        })
        .collect();
    Ok(DomainGap {
        class_names: source.class_names.clone(),
        iou,
        miou: target.miou - source.miou,
    })
}

/// Class colors by id; ids past the table wrap around.
pub const PALETTE: [[u8; 3]; 8] = [
    [128, 64, 128], // floor
    [70, 130, 180], // ceiling
    [220, 220, 0],  // wall
    [220, 20, 60],  // box
    [0, 170, 30],   // panel
    [40, 40, 40],   // void
    [255, 128, 0],
    [150, 100, 255],
];

/// [`IGNORE`] renders white.
pub fn colorize(labels: &LabelMap) -> Image {
    let data = labels
        .data
        .iter()
        .flat_map(|&l| {
            let c = if l == IGNORE {
                [255, 255, 255]
            } else {
                PALETTE[l as usize % PALETTE.len()]
            };
            c.map(|v| v as f32 / 255.0)
        })
        .collect();
    Raster::new(ImageGeometry::new(labels.width(), labels.height(), 3), data)
        .expect("colorized shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::plan_windows;
    use crate::segnet::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cm(pred: &[u8], gt: &[u8], k: usize) -> ConfusionMatrix {
        let mut m = ConfusionMatrix::new(k);
        m.accumulate(pred, gt).unwrap();
        m
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let gt = [0, 1, 1, 2, IGNORE];
        let (per, mean) = cm(&[0, 1, 1, 2, 0], &gt, 4).iou();
        assert_eq!(per, vec![Some(1.0), Some(1.0), Some(1.0), None]);
        assert_eq!(mean, 1.0);
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let (per, _) = cm(&[1, 1], &[0, 0], 2).iou();
        assert_eq!(per[0], Some(0.0));
        assert_eq!(per[1], None);
    }

    /// gt class 0 on 4 pixels, prediction hits 2 of them and adds 2 false
    /// positives: 2 / (4 + 4 - 2).
    #[test]
    fn partial_overlap_by_set_arithmetic() {
        let gt = [0, 0, 0, 0, 1, 1, 1, 1];
        let pred = [0, 0, 1, 1, 0, 0, 1, 1];
        let (per, _) = cm(&pred, &gt, 2).iou();
        assert!((per[0].unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn totals_plus_ignored_cover_every_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt: Vec<u8> = (0..500)
            .map(|_| {
                if rng.random_bool(0.2) {
                    IGNORE
                } else {
                    rng.random_range(0..5)
                }
            })
            .collect();
        let pred: Vec<u8> = (0..500).map(|_| rng.random_range(0..5)).collect();
        let m = cm(&pred, &gt, 5);
        assert_eq!(m.total() + m.ignored, 500);
        let mut halves = cm(&pred[..250], &gt[..250], 5);
        halves.merge(&cm(&pred[250..], &gt[250..], 5));
        assert_eq!(halves, m);
    }

    fn report(miou: f64, iou: Vec<Option<f64>>) -> EvalReport {
        EvalReport {
            class_names: (0..iou.len()).map(|i| format!("c{i}")).collect(),
            iou,
            miou,
            per_image: vec![],
            confusion: ConfusionMatrix::new(0),
            config_hash: String::new(),
            checkpoint_id: String::new(),
            fusion: Fusion::Average,
            memory: false,
        }
    }

    #[test]
    fn gap_cases() {
        let a = report(74.52, vec![Some(80.0), None]);
        let b = report(51.48, vec![Some(60.0), Some(10.0)]);
        let same = domain_gap(&a, &a).unwrap();
        assert_eq!(same.miou, 0.0);
        assert_eq!(same.iou, vec![Some(0.0), None]);
        let gap = domain_gap(&a, &b).unwrap();
        assert!((gap.miou - -23.04).abs() < 1e-9);
        assert_eq!(gap.iou, vec![Some(-20.0), None]);
        assert_eq!(domain_gap(&b, &a).unwrap().miou, -gap.miou);
    }

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Raster::new(
            ImageGeometry::new(w, h, 3),
            (0..w * h * 3).map(|_| rng.random::<f32>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_window_equals_direct_inference() {
        let net = SegNet::<f32>::new(ModelConfig::micro()).unwrap();
        let img = random_image(16, 16, 3);
        let plan = plan_windows(16, 16, 16).unwrap();
        for fusion in [Fusion::Average, Fusion::CenterCrop] {
            let (labels, probs) = predict_dense(&net, &img, &plan, true, fusion).unwrap();
            let direct = net
                .predict_probs(std::slice::from_ref(&img), true)
                .unwrap()
                .remove(0);
            assert_eq!(probs, direct.data());
            let expect: Vec<u8> = direct.data().chunks(3).map(|p| argmax(p) as u8).collect();
            assert_eq!(labels.data, expect);
        }
    }

    #[test]
    fn averaging_is_order_independent_without_memory() {
        let net = SegNet::<f32>::new(ModelConfig::micro()).unwrap();
        let img = random_image(48, 16, 4);
        let plan = plan_windows(48, 16, 8).unwrap();
        let (a, pa) = predict_dense(&net, &img, &plan, false, Fusion::Average).unwrap();
        let (b, pb) = predict_dense(&net, &img, &plan.reversed(), false, Fusion::Average).unwrap();
        assert_eq!(a, b);
        for (x, y) in pa.iter().zip(&pb) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn center_crop_takes_nearest_window() {
        let net = SegNet::<f32>::new(ModelConfig::micro()).unwrap();
        let img = random_image(32, 16, 5);
        let plan = plan_windows(32, 16, 8).unwrap();
        let (_, fused) = predict_dense(&net, &img, &plan, false, Fusion::CenterCrop).unwrap();
        let probs = net
            .predict_probs(&extract_sequence(&img, &plan).unwrap().patches, false)
            .unwrap();
        // Columns 12..20 lie nearest to the center of the window at 8.
        let (x, y) = (13, 5);
        let expect = &probs[1].data()[(y * 16 + x - 8) * 3..][..3];
        assert_eq!(&fused[(y * 32 + x) * 3..][..3], expect);
    }

    #[test]
    fn report_is_reproducible_and_hashes_are_stable() {
        let net = SegNet::<f32>::new(ModelConfig::micro()).unwrap();
        let img = random_image(32, 16, 6);
        let gt = Raster::new(
            ImageGeometry::new(32, 16, 1),
            (0..512).map(|i| (i % 3) as u8).collect(),
        )
        .unwrap();
        let plan = plan_windows(32, 16, 8).unwrap();
        let names: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        let items = vec![("x".to_string(), &img, &gt)];
        let dir = tempfile::tempdir().unwrap();
        let r1 = evaluate(
            &net,
            &items,
            &plan,
            true,
            Fusion::Average,
            &names,
            Some(dir.path()),
        )
        .unwrap();
        let r2 = evaluate(&net, &items, &plan, true, Fusion::Average, &names, None).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.checkpoint_id.len(), 64);
        let path = dir.path().join("net.ckpt");
        net.save(&path).unwrap();
        assert_eq!(r1.checkpoint_id, sha256_hex(&fs::read(&path).unwrap()));
        assert!(dir.path().join("x_pred.png").exists());
        let json = dir.path().join("r.json");
        r1.write_json(&json).unwrap();
        assert_eq!(EvalReport::read_json(&json).unwrap(), r1);
        assert!(r1.to_csv().starts_with("class,iou\na,"));
        assert!(evaluate(&net, &[], &plan, true, Fusion::Average, &names, None).is_err());
    }
}
