//! Source training and target adaptation loops.
//!
//! Randomness comes from independent ChaCha8 streams of `TrainConfig::seed`:
//! stream 1 draws source batches, stream 2 the prototype warm-up batches,
//! stream 3 target batches. Sharing stream 1 keeps an adaptation step that
//! sees only source data identical to a source-training step.

use std::fs;
use std::path::Path;

use panoseg_numerics::{Gradients, Graph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::eval::{evaluate, EvalItem, Fusion};
use crate::geometry::{
    extract_sequence, plan_windows, resize_nearest, Direction, Image, LabelMap, Raster, WindowPlan,
};
use crate::losses::{compute_prototypes, fpa_loss, seg_loss, ssl_loss, total_loss, PrototypeBank};
use crate::optim::{poly_lr, AdamW, AdamWConfig};
use crate::pseudolabel::{sample_epoch_subset, update_pseudolabels, PseudoLabelRecord};
use crate::segnet::{EncoderMode, SegNet};
use crate::synth::Sample;

const SOURCE_STREAM: u64 = 1;
const WARMUP_STREAM: u64 = 2;
const TARGET_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub power: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Images per domain per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub source_iters: usize,
    pub adapt_iters: usize,
    /// Source batches folded into the global prototypes before adaptation.
    pub warmup_iters: usize,
    /// Pseudo-label refreshes; adaptation iterations are split evenly.
    pub epochs: usize,
    /// Target images sampled per epoch.
    pub subset_size: usize,
    pub threshold: f32,
    pub lambda: f64,
    /// Window stride for images wider than the patch.
    pub stride: usize,
    pub hflip: bool,
    /// Memory attention on target sequences during adaptation.
    pub memory: bool,
    pub adapt_encoder: EncoderMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 6e-5,
            power: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            batch_size: 2,
            seed: 0,
            source_iters: 2000,
            adapt_iters: 2000,
            warmup_iters: 50,
            epochs: 4,
            subset_size: 400,
            threshold: 0.8,
            lambda: 0.1,
            stride: 64,
            hflip: true,
            memory: true,
            adapt_encoder: EncoderMode::Lora,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.power > 0.0 && self.eps > 0.0) {
            return bad("lr0, power and eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!(
                "betas ({}, {}) must lie in [0, 1)",
                self.beta1, self.beta2
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative".into());
        }
        if self.batch_size == 0 || self.stride == 0 {
            return bad("batch_size and stride must be positive".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} must lie in (0, 1)", self.threshold));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda {} must be non-negative", self.lambda));
        }
        if self.adapt_iters > 0 && (self.epochs == 0 || self.subset_size == 0) {
            return bad("adaptation needs at least one epoch and a nonempty subset".into());
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iter: usize,
    pub phase: String,
    pub lr: f64,
    pub loss_seg: f64,
    pub loss_ssl: f64,
    pub loss_fpa: f64,
    pub loss_total: f64,
}

/// State after each adaptation epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    /// Percent; absent without labeled target data.
    pub target_miou: Option<f64>,
    /// Mean over the epoch's pseudo-labels.
    pub uncertain_fraction: f64,
    pub images: usize,
}

pub fn write_csv<R: Serialize>(rows: &[R], path: &Path) -> Result<()> {
    let text = csv_string(rows)?;
    fs::write(path, text).map_err(io_err(path))
}

pub fn csv_string<R: Serialize>(rows: &[R]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|_| Error::MissingFile(path.into()))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn flip_cols<T: Copy>(r: &Raster<T>) -> Raster<T> {
    let (w, c) = (r.width(), r.channels());
    let mut data = Vec::with_capacity(r.data.len());
    for row in r.data.chunks(w * c) {
        for x in (0..w).rev() {
            data.extend_from_slice(&row[x * c..(x + 1) * c]);
        }
    }
    Raster { geom: r.geom, data }
}

/// Window plan of a `patch`-tall image; one window when it is square.
fn plan_for(width: usize, height: usize, patch: usize, stride: usize) -> Result<WindowPlan> {
    if height != patch || width < patch {
        return Err(Error::GeometryMismatch(format!(
            "{width}x{height} image for {patch}-pixel patches"
        )));
    }
    plan_windows(width, patch, stride)
}

/// Labels of every frame of a sequence at the fused-feature resolution.
fn feature_labels(labels: &[LabelMap], side: usize) -> Result<Vec<Vec<u8>>> {
    labels
        .iter()
        .map(|l| Ok(resize_nearest(l, side, side)?.data))
        .collect()
}

/// Draws a source batch and adds its `L_seg` gradient, scaled by `1/B`, to
/// `grads`. Returns the mean loss. Each draw takes an index, a flip and a
/// direction from `rng`.
fn source_batch(
    net: &SegNet<f32>,
    source: &[Sample],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    grads: &mut Gradients<f32>,
) -> Result<f64> {
    let b = cfg.batch_size;
    let patch = net.config.patch_size;
    let mut total = 0.0;
    for _ in 0..b {
        let s = &source[rng.random_range(0..source.len())];
        let flip = rng.random_bool(0.5) && cfg.hflip;
        let reverse = rng.random_bool(0.5);
        let (img, lab) = if flip {
            (flip_cols(&s.image), flip_cols(&s.labels))
        } else {
            (s.image.clone(), s.labels.clone())
        };
        let mut plan = plan_for(img.width(), img.height(), patch, cfg.stride)?;
        if reverse {
            plan = plan.with_direction(Direction::Reverse);
        }
        // Square images train without memory.
        let memory = plan.len() > 1 && cfg.memory && net.config.memory_enabled;
        let seq = extract_sequence(&img, &plan)?;
        let labs = extract_sequence(&lab, &plan)?;
        let mut g = Graph::new();
        let vars = seq
            .patches
            .iter()
            .map(|p| net.patch_input(&mut g, p))
            .collect::<Result<Vec<_>>>()?;
        let outs = net.forward_sequence(&mut g, &vars, memory)?;
        let mut losses = Vec::with_capacity(outs.len());
        for (o, l) in outs.iter().zip(&labs.patches) {
            losses.push(seg_loss(&mut g, o.logits, &l.data)?);
        }
        let stacked = g.concat(&losses, 0)?;
        let loss = g.mean_all(stacked);
        total += g.value(loss).data()[0] as f64;
        g.backward(loss)?;
        g.accumulate_param_grads(grads, 1.0 / b as f32);
    }
    Ok(total / b as f64)
}

pub struct SourceRun {
    pub net: SegNet<f32>,
    pub metrics: Vec<MetricRow>,
}

/// Minimizes `L_seg` on labeled source images for `cfg.source_iters` steps.
pub fn train_source(
    mut net: SegNet<f32>,
    source: &[Sample],
    cfg: &TrainConfig,
) -> Result<SourceRun> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::EmptyDataset("no source images".into()));
    }
    net.set_encoder_mode(EncoderMode::Full);
    let mut opt = AdamW::new(cfg.adamw(), &net.params);
    let mut rng = stream(cfg.seed, SOURCE_STREAM);
    let mut metrics = Vec::with_capacity(cfg.source_iters);
    for iter in 0..cfg.source_iters {
        let lr = poly_lr(iter, cfg.source_iters, cfg.lr0, cfg.power);
        let mut grads = Gradients::for_store(&net.params);
        let seg = source_batch(&net, source, cfg, &mut rng, &mut grads)?;
        opt.step(&mut net.params, &grads, lr);
        metrics.push(MetricRow {
            iter,
            phase: "source".into(),
            lr,
            loss_seg: seg,
            loss_ssl: 0.0,
            loss_fpa: 0.0,
            loss_total: total_loss(seg, 0.0, 0.0, 0.0),
        });
    }
    Ok(SourceRun { net, metrics })
}

/// Global source prototypes: `cfg.warmup_iters` batches through the frozen
/// source model, one bank slot per source frame.
pub fn warmup_bank(
    frozen: &SegNet<f32>,
    source: &[Sample],
    cfg: &TrainConfig,
) -> Result<PrototypeBank> {
    let patch = frozen.config.patch_size;
    let first = source
        .first()
        .ok_or_else(|| Error::EmptyDataset("no source images".into()))?;
    let frames = plan_for(first.image.width(), first.image.height(), patch, cfg.stride)?.len();
    let (k, side) = (frozen.config.num_classes, frozen.config.high_side());
    let mut bank = PrototypeBank::new(frames, k, frozen.config.fused_dim);
    let mut rng = stream(cfg.seed, WARMUP_STREAM);
    for _ in 0..cfg.warmup_iters * cfg.batch_size {
        let s = &source[rng.random_range(0..source.len())];
        let plan = plan_for(s.image.width(), s.image.height(), patch, cfg.stride)?;
        if plan.len() != frames {
            return Err(Error::GeometryMismatch(
                "source images differ in width".into(),
            ));
        }
        let memory = frames > 1 && cfg.memory && frozen.config.memory_enabled;
        let seq = extract_sequence(&s.image, &plan)?;
        let labs = feature_labels(&extract_sequence(&s.labels, &plan)?.patches, side)?;
        let mut g = Graph::inference();
        let vars = seq
            .patches
            .iter()
            .map(|p| frozen.patch_input(&mut g, p))
            .collect::<Result<Vec<_>>>()?;
        let outs = frozen.forward_sequence(&mut g, &vars, memory)?;
        for (t, (o, l)) in outs.iter().zip(&labs).enumerate() {
            let (protos, counts) = compute_prototypes(&mut g, o.fused, l, k)?;
            bank.update_frame(t, g.value(protos), &counts);
        }
    }
    Ok(bank)
}

/// Inputs of [`adapt_target`]. Target images are unlabeled; `target_eval`
/// only feeds the per-epoch mIoU log.
pub struct AdaptData<'a> {
    pub source: &'a [Sample],
    pub target: &'a [(String, &'a Image)],
    pub target_eval: &'a [EvalItem<'a>],
    pub class_names: &'a [String],
}

pub struct AdaptRun {
    pub net: SegNet<f32>,
    pub metrics: Vec<MetricRow>,
    pub epochs: Vec<EpochRow>,
    pub bank: PrototypeBank,
    /// Pseudo-label records of the last epoch.
    pub pseudo: Vec<PseudoLabelRecord>,
}

struct TargetLosses {
    ssl: f64,
    fpa: f64,
}

/// Draws a target batch from the epoch's pseudo-labeled images and adds the
/// gradient of `L_ssl + lambda L_fpa`, scaled by `1/B`. Per image, both terms
/// are means over frames; frames without shared classes skip `L_fpa`.
#[allow(clippy::too_many_arguments)]
fn target_batch(
    net: &SegNet<f32>,
    images: &[&Image],
    pseudo: &[LabelMap],
    bank: &PrototypeBank,
    cfg: &TrainConfig,
    memory: bool,
    rng: &mut ChaCha8Rng,
    grads: &mut Gradients<f32>,
) -> Result<TargetLosses> {
    let b = cfg.batch_size;
    let (patch, k, side) = (
        net.config.patch_size,
        net.config.num_classes,
        net.config.high_side(),
    );
    let mut sums = TargetLosses { ssl: 0.0, fpa: 0.0 };
    for _ in 0..b {
        let j = rng.random_range(0..images.len());
        let flip = rng.random_bool(0.5) && cfg.hflip;
        let reverse = rng.random_bool(0.5);
        let (img, lab) = if flip {
            (flip_cols(images[j]), flip_cols(&pseudo[j]))
        } else {
            (images[j].clone(), pseudo[j].clone())
        };
        let mut plan = plan_for(img.width(), img.height(), patch, cfg.stride)?;
        if reverse {
            plan = plan.with_direction(Direction::Reverse);
        }
        let seq = extract_sequence(&img, &plan)?;
        let labs = extract_sequence(&lab, &plan)?;
        let small = feature_labels(&labs.patches, side)?;
        let mut g = Graph::new();
        let vars = seq
            .patches
            .iter()
            .map(|p| net.patch_input(&mut g, p))
            .collect::<Result<Vec<_>>>()?;
        let outs = net.forward_sequence(&mut g, &vars, memory)?;
        let mut ssl = Vec::with_capacity(outs.len());
        let mut fpa = Vec::new();
        for (t, o) in outs.iter().enumerate() {
            ssl.push(ssl_loss(&mut g, o.logits, &labs.patches[t].data)?);
            let (protos, counts) = compute_prototypes(&mut g, o.fused, &small[t], k)?;
            if let Some(f) = fpa_loss(&mut g, bank, bank.slot_for(t), protos, &counts)? {
                fpa.push(f);
            }
        }
        let s = g.concat(&ssl, 0)?;
        let mut loss = g.mean_all(s);
        sums.ssl += g.value(loss).data()[0] as f64;
        if !fpa.is_empty() {
            let f = g.concat(&fpa, 0)?;
            let f = g.mean_all(f);
            sums.fpa += g.value(f).data()[0] as f64;
            if cfg.lambda > 0.0 {
                let weighted = g.scale(f, cfg.lambda as f32);
                loss = g.add(loss, weighted)?;
            }
        }
        g.backward(loss)?;
        g.accumulate_param_grads(grads, 1.0 / b as f32);
    }
    Ok(TargetLosses {
        ssl: sums.ssl / b as f64,
        fpa: sums.fpa / b as f64,
    })
}

/// Adapts a copy of `source_net` to the target domain.
///
/// Phase 1 folds `warmup_iters` source batches through the frozen source
/// model into the global prototype bank, which phase 2 only reads. Phase 2
/// runs `epochs` rounds of: sample a target subset, regenerate its
/// pseudo-labels with the current model, then optimize
/// `L_seg + L_ssl + lambda L_fpa` with one source and one target batch per
/// step. Pseudo-label PNGs and their manifest go to `pseudo_dir` when given.
pub fn adapt_target(
    source_net: &SegNet<f32>,
    data: &AdaptData,
    cfg: &TrainConfig,
    pseudo_dir: Option<&Path>,
) -> Result<AdaptRun> {
    cfg.validate()?;
    if data.source.is_empty() {
        return Err(Error::EmptyDataset("no source images".into()));
    }
    let frozen = source_net;
    let bank = warmup_bank(frozen, data.source, cfg)?;

    let mut net = source_net.clone();
    net.set_encoder_mode(cfg.adapt_encoder);
    let memory = cfg.memory && net.config.memory_enabled && net.config.bank_size > 0;
    let mut opt = AdamW::new(cfg.adamw(), &net.params);
    let mut src_rng = stream(cfg.seed, SOURCE_STREAM);
    let mut tgt_rng = stream(cfg.seed, TARGET_STREAM);
    let target_plan = match data.target.first() {
        Some((_, img)) => Some(plan_for(
            img.width(),
            img.height(),
            net.config.patch_size,
            cfg.stride,
        )?),
        None => None,
    };
    let per_epoch = cfg.adapt_iters.div_ceil(cfg.epochs.max(1));
    let mut metrics = Vec::with_capacity(cfg.adapt_iters);
    let mut epochs = Vec::new();
    let mut pseudo = Vec::new();
    let mut iter = 0;
    for epoch in 0..cfg.epochs {
        if iter >= cfg.adapt_iters {
            break;
        }
        let subset: Vec<(String, &Image)> = match &target_plan {
            Some(_) => {
                sample_epoch_subset(data.target.len(), cfg.subset_size, cfg.seed, epoch as u64)
                    .into_iter()
                    .map(|i| data.target[i].clone())
                    .collect()
            }
            None => Vec::new(),
        };
        let labels = match &target_plan {
            Some(plan) => {
                let (labels, records) = update_pseudolabels(
                    &net,
                    &subset,
                    plan,
                    cfg.threshold,
                    memory,
                    epoch as u64,
                    pseudo_dir,
                )?;
                pseudo = records;
                labels
            }
            None => Vec::new(),
        };
        let images: Vec<&Image> = subset.iter().map(|(_, img)| *img).collect();
        let end = (iter + per_epoch).min(cfg.adapt_iters);
        while iter < end {
            let lr = poly_lr(iter, cfg.adapt_iters, cfg.lr0, cfg.power);
            let mut grads = Gradients::for_store(&net.params);
            let seg = source_batch(&net, data.source, cfg, &mut src_rng, &mut grads)?;
            let tl = if images.is_empty() {
                TargetLosses { ssl: 0.0, fpa: 0.0 }
            } else {
                target_batch(
                    &net,
                    &images,
                    &labels,
                    &bank,
                    cfg,
                    memory,
                    &mut tgt_rng,
                    &mut grads,
                )?
            };
            opt.step(&mut net.params, &grads, lr);
            metrics.push(MetricRow {
                iter,
                phase: "adapt".into(),
                lr,
                loss_seg: seg,
                loss_ssl: tl.ssl,
                loss_fpa: tl.fpa,
                loss_total: total_loss(seg, tl.ssl, tl.fpa, cfg.lambda),
            });
            iter += 1;
        }
        let target_miou = match (&target_plan, data.target_eval.is_empty()) {
            (Some(plan), false) => Some(
                evaluate(
                    &net,
                    data.target_eval,
                    plan,
                    memory,
                    Fusion::Average,
                    data.class_names,
                    None,
                )?
                .miou,
            ),
            _ => None,
        };
        let uncertain = if pseudo.is_empty() {
            0.0
        } else {
            pseudo.iter().map(|r| r.uncertain_fraction).sum::<f64>() / pseudo.len() as f64
        };
        epochs.push(EpochRow {
            epoch,
            target_miou,
            uncertain_fraction: uncertain,
            images: subset.len(),
        });
    }
    Ok(AdaptRun {
        net,
        metrics,
        epochs,
        bank,
        pseudo,
    })
}
