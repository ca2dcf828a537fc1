//! Runtime self-checks: gradient checks on every primitive and on the full
//! micro-model objective, plus the prototype and fusion oracles.

use panoseg_numerics::{finite_diff_check, primitive_suite, GradCheckReport, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{Direction, ImageGeometry, Raster};
use crate::losses::{compute_prototypes, fpa_loss, seg_loss, ssl_loss, PrototypeBank};
use crate::pseudolabel::{fuse_votes, Prediction};
use crate::segnet::{ModelConfig, SegNet};
use crate::IGNORE;

/// Largest relative error accepted by the gradient checks.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn grad_result(name: &str, r: &GradCheckReport) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed: r.checked > 0 && r.max_rel_error <= GRAD_TOLERANCE,
        detail: format!(
            "max rel error {:.3e} over {} coordinates",
            r.max_rel_error, r.checked
        ),
    }
}

/// Finite differences of `L_seg + L_ssl + 0.5 L_fpa` on the micro model in
/// `f64` with every parameter trainable. Parameters are jittered first so no
/// zero-initialized factor hides a gradient.
pub fn micro_model_check(samples: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = SegNet::<f64>::new(ModelConfig {
        init_seed: seed,
        ..ModelConfig::micro()
    })?;
    net.params.set_all_trainable(true);
    for (_, p) in net.params.iter_mut() {
        p.tensor
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    let (side, k, cf) = (
        net.config.patch_size,
        net.config.num_classes,
        net.config.fused_dim,
    );
    let hs = net.config.high_side();
    let image = |rng: &mut ChaCha8Rng| Tensor::<f64>::uniform(&[side, side, 3], 0.0, 1.0, rng);
    let labels = |rng: &mut ChaCha8Rng, n: usize, ignore: f64| -> Vec<u8> {
        (0..n)
            .map(|_| {
                if rng.random_bool(ignore) {
                    IGNORE
                } else {
                    rng.random_range(0..k as u8)
                }
            })
            .collect()
    };
    let src = image(&mut rng);
    let src_lab = labels(&mut rng, side * side, 0.0);
    let tgt = [image(&mut rng), image(&mut rng)];
    let tgt_lab = [
        labels(&mut rng, side * side, 0.3),
        labels(&mut rng, side * side, 0.3),
    ];
    let tgt_small = [
        labels(&mut rng, hs * hs, 0.2),
        labels(&mut rng, hs * hs, 0.2),
    ];
    let mut bank = PrototypeBank::new(2, k, cf);
    for t in 0..2 {
        for c in 0..k {
            let v: Vec<f64> = (0..cf).map(|_| rng.random_range(-1.0..1.0)).collect();
            bank.update(t, c, &v);
        }
    }
    let lambda = 0.5;
    let base = net.clone();
    finite_diff_check(
        &mut net.params,
        |store, g: &mut Graph<f64>| {
            let mut n = base.clone();
            n.params = store.clone();
            let x = g.constant(src.clone());
            let out = n.forward_sequence(g, &[x], false)?;
            let mut loss = seg_loss(g, out[0].logits, &src_lab)?;
            let xs = [g.constant(tgt[0].clone()), g.constant(tgt[1].clone())];
            let outs = n.forward_sequence(g, &xs, true)?;
            for (t, o) in outs.iter().enumerate() {
                let ssl = ssl_loss(g, o.logits, &tgt_lab[t])?;
                let ssl = g.scale(ssl, 0.5);
                loss = g.add(loss, ssl)?;
                let (protos, counts) = compute_prototypes(g, o.fused, &tgt_small[t], k)?;
                if let Some(f) = fpa_loss(g, &bank, t, protos, &counts)? {
                    let f = g.scale(f, lambda * 0.5);
                    loss = g.add(loss, f)?;
                }
            }
            Ok(loss)
        },
        1e-4,
        samples,
        seed ^ 0xfd,
    )
}

/// Running-mean prototypes against direct means over `updates` random
/// contributions with intermittent class presence. Returns the largest
/// relative error.
pub fn prototype_mean_oracle(updates: usize, seed: u64) -> f64 {
    let (frames, classes, dim) = (3, 4, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bank = PrototypeBank::new(frames, classes, dim);
    let mut sums = vec![0.0f64; frames * classes * dim];
    let mut counts = vec![0u64; frames * classes];
    for _ in 0..updates {
        let t = rng.random_range(0..frames);
        let protos = Tensor::<f64>::uniform(&[classes, dim], -10.0, 10.0, &mut rng);
        let present: Vec<usize> = (0..classes)
            .map(|_| {
                if rng.random_bool(0.6) {
                    rng.random_range(1..50)
                } else {
                    0
                }
            })
            .collect();
        bank.update_frame(t, &protos, &present);
        for k in 0..classes {
            if present[k] > 0 {
                counts[t * classes + k] += 1;
                for d in 0..dim {
                    sums[(t * classes + k) * dim + d] += protos.data()[k * dim + d];
                }
            }
        }
    }
    let mut worst = 0.0f64;
    for t in 0..frames {
        for k in 0..classes {
            let n = counts[t * classes + k];
            if n == 0 || bank.count(t, k) != n {
                worst = worst.max(if bank.count(t, k) == n {
                    0.0
                } else {
                    f64::INFINITY
                });
                continue;
            }
            for d in 0..dim {
                let mean = sums[(t * classes + k) * dim + d] / n as f64;
                let got = bank.value(t, k)[d];
                worst = worst.max((got - mean).abs() / mean.abs().max(1e-12));
            }
        }
    }
    worst
}

/// Random window predictions over a 64x32 panorama: 3 to 5 windows whose
/// offsets span the width, each predicted twice, up to 6 classes.
pub fn random_fusion_instance(rng: &mut ChaCha8Rng) -> Vec<Prediction> {
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
    for (i, &offset) in offsets.iter().chain(offsets.iter()).enumerate() {
        let mut data: Vec<f32> = (0..h * h * k)
            .map(|_| rng.random_range(0.0f32..1.0).powi(4))
            .collect();
        for px in data.chunks_mut(k) {
            let s: f32 = px.iter().sum::<f32>() + 1e-6;
            px.iter_mut().for_each(|v| *v /= s);
        }
        let direction = if i < windows {
            Direction::Forward
        } else {
            Direction::Reverse
        };
        preds.push(Prediction {
            offset,
            direction,
            probs: Tensor::new(&[h, h, k], data).expect("prediction shape"),
        });
    }
    preds
}

fn brute_force_fusion(preds: &[Prediction], w: usize, h: usize, theta: f32) -> Vec<u8> {
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let votes: Vec<(usize, f32)> = preds
                .iter()
                .filter(|p| p.offset <= x && x < p.offset + p.side())
                .map(|p| p.vote(x - p.offset, y))
                .collect();
            let agreed = votes
                .first()
                .map(|v| v.0)
                .filter(|&c| votes.iter().all(|v| v.0 == c));
            let min = votes.iter().map(|v| v.1).fold(f32::INFINITY, f32::min);
            out.push(match agreed {
                Some(c) if min > theta => c as u8,
                _ => IGNORE,
            });
        }
    }
    out
}

/// Fusion against a brute-force rescan on `instances` random panoramas, and
/// the labeled set shrinking as the threshold rises. Returns the number of
/// failing instances.
pub fn fusion_oracle(instances: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for _ in 0..instances {
        let preds = random_fusion_instance(&mut rng);
        let geom = ImageGeometry::new(64, 32, 1);
        let thetas = [0.1f32, 0.3, 0.5, 0.7, 0.9];
        let mut previous: Option<Raster<u8>> = None;
        let mut ok = true;
        for &theta in &thetas {
            let (lab, _) = fuse_votes(&preds, geom, theta)?;
            ok &= lab.data == brute_force_fusion(&preds, 64, 32, theta);
            if let Some(prev) = &previous {
                ok &= lab
                    .data
                    .iter()
                    .zip(&prev.data)
                    .all(|(&now, &before)| now == IGNORE || now == before);
            }
            previous = Some(lab);
        }
        failures += usize::from(!ok);
    }
    Ok(failures)
}

/// Every check with its outcome.
pub fn run_all() -> Result<Vec<CheckResult>> {
    let mut out: Vec<CheckResult> = primitive_suite()?
        .iter()
        .map(|(name, r)| grad_result(&format!("gradient {name}"), r))
        .collect();
    out.push(grad_result(
        "gradient micro-model objective",
        &micro_model_check(200, 0)?,
    ));
    let err = prototype_mean_oracle(1000, 0);
    out.push(CheckResult {
        name: "running prototype mean".into(),
        passed: err <= 1e-6,
        detail: format!("max rel error {err:.3e} over 1000 updates"),
    });
    let failures = fusion_oracle(100, 0)?;
    out.push(CheckResult {
        name: "pseudo-label fusion oracle".into(),
        passed: failures == 0,
        detail: format!("{failures} of 100 instances differ"),
    });
    Ok(out)
}
