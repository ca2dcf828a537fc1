//! Pseudo-labels from bidirectional window predictions.
//!
//! Every window is predicted twice, once per sliding direction. A pixel keeps
//! class `k` only when every covering prediction voted `k` and the smallest of
//! their probabilities for `k` exceeds the threshold; otherwise it is marked
//! [`IGNORE`].

use std::fs;
use std::path::Path;

use panoseg_numerics::Tensor;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::geometry::{
    extract_sequence, save_label_png, Direction, Image, ImageGeometry, LabelMap, Raster, WindowPlan,
};
use crate::losses::argmax;
use crate::segnet::SegNet;
use crate::IGNORE;

/// Softmax output `[P, P, K]` of one window placed at column `offset`.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub offset: usize,
    pub direction: Direction,
    pub probs: Tensor<f32>,
}

impl Prediction {
    pub fn side(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.probs.shape()[2]
    }

    /// Voted class and its probability at patch pixel `(x, y)`.
    pub fn vote(&self, x: usize, y: usize) -> (usize, f32) {
        let k = self.classes();
        let o = (y * self.probs.shape()[1] + x) * k;
        let px = &self.probs.data()[o..o + k];
        let c = argmax(px);
        (c, px[c])
    }
}

/// Predicts the forward sequence, then the reverse sequence, each with a
/// fresh memory bank. Returns `2N` predictions, forward ones first.
pub fn bidirectional_predict(
    net: &SegNet<f32>,
    image: &Image,
    plan: &WindowPlan,
    memory: bool,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(2 * plan.len());
    for direction in [Direction::Forward, Direction::Reverse] {
        let p = plan.with_direction(direction);
        let seq = extract_sequence(image, &p)?;
        let probs = net.predict_probs(&seq.patches, memory)?;
        for (offset, probs) in p.ordered().into_iter().zip(probs) {
            out.push(Prediction {
                offset,
                direction,
                probs,
            });
        }
    }
    Ok(out)
}

/// Per-pixel votes, minimum confidences and coverage.
#[derive(Clone, Debug, PartialEq)]
pub struct VoteTable {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    pub votes: Vec<u32>,
    /// Meaningful only where the matching vote count is positive.
    pub min_conf: Vec<f32>,
    pub coverage: Vec<u32>,
}

impl VoteTable {
    pub fn votes_at(&self, x: usize, y: usize) -> &[u32] {
        let o = (y * self.width + x) * self.classes;
        &self.votes[o..o + self.classes]
    }

    pub fn min_conf_at(&self, x: usize, y: usize) -> &[f32] {
        let o = (y * self.width + x) * self.classes;
        &self.min_conf[o..o + self.classes]
    }

    pub fn coverage_at(&self, x: usize, y: usize) -> u32 {
        self.coverage[y * self.width + x]
    }

    /// The unanimity and confidence rule at one pixel.
    pub fn decide(&self, x: usize, y: usize, threshold: f32) -> u8 {
        let cov = self.coverage_at(x, y);
        if cov == 0 {
            return IGNORE;
        }
        let votes = self.votes_at(x, y);
        let conf = self.min_conf_at(x, y);
        (0..self.classes)
            .find(|&k| votes[k] == cov && conf[k] > threshold)
            .map_or(IGNORE, |k| k as u8)
    }
}

/// Accumulates the vote table of `predictions` over a `width x height` image.
pub fn vote_table(predictions: &[Prediction], width: usize, height: usize) -> Result<VoteTable> {
    let first = predictions.first().ok_or(Error::EmptyPredictionSet)?;
    let k = first.classes();
    let mut t = VoteTable {
        width,
        height,
        classes: k,
        votes: vec![0; width * height * k],
        min_conf: vec![f32::INFINITY; width * height * k],
        coverage: vec![0; width * height],
    };
    for p in predictions {
        let side = p.side();
        if p.classes() != k || side != height || p.offset + side > width {
            return Err(Error::GeometryMismatch(format!(
                "prediction {:?} at offset {} on {width}x{height}",
                p.probs.shape(),
                p.offset
            )));
        }
        for y in 0..side {
            for x in 0..side {
                let (c, conf) = p.vote(x, y);
                let px = y * width + p.offset + x;
                t.coverage[px] += 1;
                t.votes[px * k + c] += 1;
                let m = &mut t.min_conf[px * k + c];
                *m = m.min(conf);
            }
        }
    }
    Ok(t)
}

/// Fuses predictions into a pseudo-label map with threshold `theta` on
/// probabilities.
pub fn fuse_votes(
    predictions: &[Prediction],
    geometry: ImageGeometry,
    theta: f32,
) -> Result<(LabelMap, VoteTable)> {
    let t = vote_table(predictions, geometry.width, geometry.height)?;
    let mut data = Vec::with_capacity(geometry.width * geometry.height);
    for y in 0..geometry.height {
        for x in 0..geometry.width {
            data.push(t.decide(x, y, theta));
        }
    }
    let labels = Raster::new(ImageGeometry::new(geometry.width, geometry.height, 1), data)?;
    Ok((labels, t))
}

/// `m` distinct indices of `0..n`, uniform without replacement and
/// determined by `(seed, epoch)`. `m >= n` yields a permutation of `0..n`.
pub fn sample_epoch_subset(n: usize, m: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    if m >= n {
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        return all;
    }
    sample(&mut rng, n, m).into_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub image: String,
    pub label: String,
    pub uncertain_fraction: f64,
    pub epoch: u64,
    pub threshold: f32,
}

pub const PSEUDO_MANIFEST: &str = "pseudolabels.json";

/// Fraction of [`IGNORE`] pixels.
pub fn uncertain_fraction(labels: &LabelMap) -> f64 {
    labels.data.iter().filter(|&&v| v == IGNORE).count() as f64 / labels.data.len().max(1) as f64
}

/// Regenerates pseudo-labels for `images` (name, image). When `out_dir` is
/// given, writes one PNG per image, overwriting earlier ones, and the JSON
/// manifest.
pub fn update_pseudolabels(
    net: &SegNet<f32>,
    images: &[(String, &Image)],
    plan: &WindowPlan,
    theta: f32,
    memory: bool,
    epoch: u64,
    out_dir: Option<&Path>,
) -> Result<(Vec<LabelMap>, Vec<PseudoLabelRecord>)> {
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut labels = Vec::with_capacity(images.len());
    let mut records = Vec::with_capacity(images.len());
    for (name, img) in images {
        let preds = bidirectional_predict(net, img, plan, memory)?;
        let (lab, _) = fuse_votes(&preds, img.geom, theta)?;
        let label = format!("{name}_pseudo.png");
        if let Some(dir) = out_dir {
            save_label_png(&lab, &dir.join(&label))?;
        }
        records.push(PseudoLabelRecord {
            image: name.clone(),
            label,
            uncertain_fraction: uncertain_fraction(&lab),
            epoch,
            threshold: theta,
        });
        labels.push(lab);
    }
    if let Some(dir) = out_dir {
        let path = dir.join(PSEUDO_MANIFEST);
        let json = serde_json::to_string_pretty(&records).map_err(|source| Error::Json {
            path: path.clone(),
            source,
        })?;
        fs::write(&path, json).map_err(io_err(&path))?;
    }
    Ok((labels, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::plan_windows;
    use crate::segnet::ModelConfig;
    use proptest::prelude::*;
    use rand::Rng;

    fn pred(
        offset: usize,
        side: usize,
        k: usize,
        f: impl Fn(usize, usize) -> (usize, f32),
    ) -> Prediction {
        let mut data = vec![0.0f32; side * side * k];
        for y in 0..side {
            for x in 0..side {
                let (c, conf) = f(x, y);
                let o = (y * side + x) * k;
                let rest = (1.0 - conf) / (k - 1) as f32;
                for j in 0..k {
                    data[o + j] = if j == c { conf } else { rest };
                }
            }
        }
        Prediction {
            offset,
            direction: Direction::Forward,
            probs: Tensor::new(&[side, side, k], data).unwrap(),
        }
    }

    fn geom(w: usize, h: usize) -> ImageGeometry {
        ImageGeometry::new(w, h, 1)
    }

    #[test]
    fn unanimous_confident_votes_label_the_pixel() {
        let ps = [0.9, 0.95, 0.85].map(|c| pred(0, 1, 4, move |_, _| (2, c)));
        let (lab, table) = fuse_votes(&ps, geom(1, 1), 0.8).unwrap();
        assert_eq!(lab.data, vec![2]);
        assert_eq!(table.votes_at(0, 0), &[0, 0, 3, 0]);
        assert_eq!(table.min_conf_at(0, 0)[2], 0.85);
    }

    #[test]
    fn split_vote_is_uncertain() {
        let ps = [
            pred(0, 1, 4, |_, _| (2, 0.99)),
            pred(0, 1, 4, |_, _| (2, 0.99)),
            pred(0, 1, 4, |_, _| (3, 0.99)),
        ];
        assert_eq!(
            fuse_votes(&ps, geom(1, 1), 0.8).unwrap().0.data,
            vec![IGNORE]
        );
    }

    #[test]
    fn low_confidence_is_uncertain() {
        let ps = [
            pred(0, 1, 4, |_, _| (2, 0.9)),
            pred(0, 1, 4, |_, _| (2, 0.7)),
        ];
        assert_eq!(
            fuse_votes(&ps, geom(1, 1), 0.8).unwrap().0.data,
            vec![IGNORE]
        );
        // The comparison is strict.
        let ps = [pred(0, 1, 4, |_, _| (1, 0.8))];
        assert_eq!(
            fuse_votes(&ps, geom(1, 1), 0.8).unwrap().0.data,
            vec![IGNORE]
        );
    }

    #[test]
    fn empty_prediction_set_is_an_error() {
        assert!(matches!(
            fuse_votes(&[], geom(4, 4), 0.5),
            Err(Error::EmptyPredictionSet)
        ));
    }

    /// Direct per-pixel rescan of every prediction.
    fn oracle(preds: &[Prediction], w: usize, h: usize, theta: f32) -> Vec<u8> {
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let covering: Vec<(usize, f32)> = preds
                    .iter()
                    .filter(|p| p.offset <= x && x < p.offset + p.side())
                    .map(|p| p.vote(x - p.offset, y))
                    .collect();
                let label = match covering.first() {
                    Some(&(c, _)) if covering.iter().all(|&(cc, _)| cc == c) => {
                        let min = covering
                            .iter()
                            .map(|&(_, p)| p)
                            .fold(f32::INFINITY, f32::min);
                        if min > theta {
                            c as u8
                        } else {
                            IGNORE
                        }
                    }
                    _ => IGNORE,
                };
                out.push(label);
            }
        }
        out
    }

    /// 64x32 panorama, 3 to 5 windows at random offsets spanning the width,
    /// each predicted twice, random class counts up to 6.
    fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Prediction>, usize, usize) {
        let (w, h) = (64, 32);
        let windows = rng.random_range(3..=5);
        let mut offsets = vec![0, w - h];
        while offsets.len() < windows {
            let o = rng.random_range(1..w - h);
            if !offsets.contains(&o) {
                offsets.push(o);
            }
        }
        let k = rng.random_range(2..=6);
        let mut preds = Vec::new();
        for &offset in offsets.iter().chain(offsets.iter()) {
            let mut data: Vec<f32> = (0..h * h * k)
                .map(|_| rng.random_range(0.0f32..1.0).powi(4))
                .collect();
            for px in data.chunks_mut(k) {
                let s: f32 = px.iter().sum::<f32>() + 1e-6;
                px.iter_mut().for_each(|v| *v /= s);
            }
            preds.push(Prediction {
                offset,
                direction: Direction::Forward,
                probs: Tensor::new(&[h, h, k], data).unwrap(),
            });
        }
        (preds, w, h)
    }

    #[test]
    fn fusion_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let (preds, w, h) = random_instance(&mut rng);
            let theta = rng.random_range(0.05f32..0.9);
            let (lab, _) = fuse_votes(&preds, geom(w, h), theta).unwrap();
            assert_eq!(lab.data, oracle(&preds, w, h, theta));
        }
    }

    #[test]
    fn fusion_ignores_prediction_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut preds, w, h) = random_instance(&mut rng);
        let (a, _) = fuse_votes(&preds, geom(w, h), 0.3).unwrap();
        preds.shuffle(&mut rng);
        let (b, _) = fuse_votes(&preds, geom(w, h), 0.3).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn raising_threshold_never_adds_labels(seed in 0u64..200, lo in 0.0f32..0.9, delta in 0.0f32..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (preds, w, h) = random_instance(&mut rng);
            let (a, table) = fuse_votes(&preds, geom(w, h), lo).unwrap();
            let (b, _) = fuse_votes(&preds, geom(w, h), lo + delta).unwrap();
            for (i, (&x, &y)) in a.data.iter().zip(&b.data).enumerate() {
                prop_assert!(x != IGNORE || y == IGNORE);
                prop_assert!(y == IGNORE || y == x);
                if x != IGNORE {
                    let (px, py) = (i % w, i / w);
                    prop_assert_eq!(table.votes_at(px, py)[x as usize], table.coverage_at(px, py));
                    prop_assert!(table.min_conf_at(px, py)[x as usize] > lo);
                }
            }
        }

        #[test]
        fn votes_sum_to_coverage(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (preds, w, h) = random_instance(&mut rng);
            let t = vote_table(&preds, w, h).unwrap();
            for y in 0..h {
                for x in 0..w {
                    prop_assert_eq!(t.votes_at(x, y).iter().sum::<u32>(), t.coverage_at(x, y));
                }
            }
        }
    }

    #[test]
    fn subset_sampling() {
        let full = sample_epoch_subset(10, 10, 1, 0);
        let mut sorted = full.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(sample_epoch_subset(10, 50, 1, 0).len(), 10);
        assert_eq!(
            sample_epoch_subset(20, 5, 7, 3),
            sample_epoch_subset(20, 5, 7, 3)
        );
        let s = sample_epoch_subset(20, 5, 7, 3);
        let mut u = s.clone();
        u.sort();
        u.dedup();
        assert_eq!(u.len(), 5);
        assert!(s.iter().all(|&i| i < 20));
    }

    /// Over 100 epochs, consecutive draws of 5 from 40 coincide rarely; each
    /// index is also drawn at a rate close to 5/40.
    #[test]
    fn epochs_draw_distinct_subsets() {
        let draws: Vec<Vec<usize>> = (0..100)
            .map(|e| {
                let mut s = sample_epoch_subset(40, 5, 11, e);
                s.sort();
                s
            })
            .collect();
        let collisions = draws.windows(2).filter(|w| w[0] == w[1]).count();
        assert_eq!(collisions, 0);
        let mut hits = [0usize; 40];
        for d in &draws {
            for &i in d {
                hits[i] += 1;
            }
        }
        assert!(hits.iter().all(|&h| h <= 40), "{hits:?}");
    }

    #[test]
    fn bidirectional_predict_counts_and_symmetry() {
        let cfg = ModelConfig {
            patch_size: 16,
            ..ModelConfig::micro()
        };
        let net = SegNet::<f32>::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Raster::new(
            ImageGeometry::new(48, 16, 3),
            (0..48 * 16 * 3).map(|_| rng.random()).collect(),
        )
        .unwrap();
        let plan = plan_windows(48, 16, 4).unwrap();
        let preds = bidirectional_predict(&net, &img, &plan, false).unwrap();
        assert_eq!(preds.len(), 2 * plan.len());
        let n = plan.len();
        for t in 0..n {
            let f = &preds[t];
            let r = preds[n..].iter().find(|p| p.offset == f.offset).unwrap();
            assert!(f.probs.bit_eq(&r.probs));
        }
        let t = vote_table(&preds, 48, 16).unwrap();
        assert!(t.coverage.iter().all(|&c| c >= 2));
    }

    #[test]
    fn nine_window_plan_gives_eighteen_maps() {
        let cfg = ModelConfig {
            bank_size: 9,
            ..ModelConfig::micro()
        };
        let net = SegNet::<f32>::new(cfg).unwrap();
        let img = Raster::filled(ImageGeometry::new(48, 16, 3), 0.5f32);
        let plan = plan_windows(48, 16, 4).unwrap();
        assert_eq!(plan.len(), 9);
        assert_eq!(
            bidirectional_predict(&net, &img, &plan, true)
                .unwrap()
                .len(),
            18
        );
    }

    #[test]
    fn pseudolabel_files_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let net = SegNet::<f32>::new(ModelConfig::micro()).unwrap();
        let img = Raster::filled(ImageGeometry::new(32, 16, 3), 0.25f32);
        let plan = plan_windows(32, 16, 8).unwrap();
        let (labels, records) = update_pseudolabels(
            &net,
            &[("a".to_string(), &img)],
            &plan,
            0.0,
            true,
            2,
            Some(dir.path()),
        )
        .unwrap();
        assert_eq!(labels.len(), 1);
        assert!(dir.path().join("a_pseudo.png").exists());
        let text = fs::read_to_string(dir.path().join(PSEUDO_MANIFEST)).unwrap();
        let back: Vec<PseudoLabelRecord> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, records);
        assert_eq!(back[0].epoch, 2);
    }
}
