//! Cross-entropy losses, pseudo-label projection, class prototypes and the
//! prototype alignment loss.
//!
//! Pixel tensors are channels-last `[H, W, K]`; label slices are row-major
//! `H * W` with [`IGNORE`] excluded from every sum.

use panoseg_numerics::{Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::IGNORE;

/// Mean of `-ln max(p[y], 1e-12)` over non-ignored pixels, with
/// `p = softmax(logits)`. Zero, with zero gradient, when every pixel is
/// ignored.
pub fn seg_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[u8]) -> Result<Var> {
    let axis = g.shape(logits).len() - 1;
    let p = g.softmax(logits, axis)?;
    Ok(g.nll_clamped(p, labels)?)
}

/// Self-supervised loss on pseudo-labels; uncertain pixels carry [`IGNORE`].
pub fn ssl_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, pseudo: &[u8]) -> Result<Var> {
    seg_loss(g, logits, pseudo)
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-pixel argmax class over the last axis of `[.., K]` scores.
pub fn project_pseudolabel<T: Scalar>(scores: &Tensor<T>) -> Vec<u8> {
    let k = *scores.shape().last().unwrap_or(&1);
    scores.data().chunks(k).map(|px| argmax(px) as u8).collect()
}

/// One-hot encoding `[.., K]` of class indices; ignored pixels are all-zero.
pub fn one_hot<T: Scalar>(labels: &[u8], k: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        if l != IGNORE && (l as usize) < k {
            data[i * k + l as usize] = T::one();
        }
    }
    Tensor::new(&[labels.len(), k], data).expect("one-hot shape")
}

/// Per-class mean of the fused feature `f [h, w, C]` over pixels carrying
/// that class. Returns the `[K, C]` means and pixel counts `M_k`; absent
/// classes have a zero row and count 0.
pub fn compute_prototypes<T: Scalar>(
    g: &mut Graph<T>,
    fused: Var,
    labels: &[u8],
    k: usize,
) -> Result<(Var, Vec<usize>)> {
    let shape = g.shape(fused).to_vec();
    let c = *shape.last().unwrap_or(&0);
    let rows: usize = shape[..shape.len() - 1].iter().product();
    if labels.len() != rows {
        return Err(Error::GeometryMismatch(format!(
            "{} labels for {rows} feature pixels",
            labels.len()
        )));
    }
    let flat = g.reshape(fused, &[rows, c])?;
    Ok(g.class_means(flat, labels, k)?)
}

/// Running per-frame, per-class source prototypes.
///
/// Slot `(t, k)` holds the arithmetic mean of every contribution it has
/// received, kept in `f64` through the incremental update
/// `(1 - 1/n) old + (1/n) new`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    frames: usize,
    classes: usize,
    dim: usize,
    values: Vec<f64>,
    counts: Vec<u64>,
}

impl PrototypeBank {
    pub fn new(frames: usize, classes: usize, dim: usize) -> Self {
        Self {
            frames,
            classes,
            dim,
            values: vec![0.0; frames * classes * dim],
            counts: vec![0; frames * classes],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self, t: usize, k: usize) -> u64 {
        self.counts[t * self.classes + k]
    }

    pub fn present(&self, t: usize, k: usize) -> bool {
        self.count(t, k) > 0
    }

    pub fn value(&self, t: usize, k: usize) -> &[f64] {
        let o = (t * self.classes + k) * self.dim;
        &self.values[o..o + self.dim]
    }

    /// Folds one contribution into slot `(t, k)`.
    pub fn update(&mut self, t: usize, k: usize, contribution: &[f64]) {
        let slot = t * self.classes + k;
        self.counts[slot] += 1;
        let n = self.counts[slot] as f64;
        let o = slot * self.dim;
        for (v, &c) in self.values[o..o + self.dim].iter_mut().zip(contribution) {
            *v = (1.0 - 1.0 / n) * *v + (1.0 / n) * c;
        }
    }

    /// Folds a frame's batch prototypes `[K, C]`; only classes with a nonzero
    /// pixel count contribute.
    pub fn update_frame<T: Scalar>(&mut self, t: usize, protos: &Tensor<T>, counts: &[usize]) {
        for (k, &m) in counts.iter().enumerate().take(self.classes) {
            if m > 0 {
                let row: Vec<f64> = protos.data()[k * self.dim..(k + 1) * self.dim]
                    .iter()
                    .map(|v| v.as_f64())
                    .collect();
                self.update(t, k, &row);
            }
        }
    }

    /// Bank slot used for target frame `t`: a single-frame bank serves every
    /// frame.
    pub fn slot_for(&self, t: usize) -> usize {
        if self.frames == 1 {
            0
        } else {
            t.min(self.frames - 1)
        }
    }
}

/// Prototype alignment loss for one frame:
/// `||G - T||_F / (K_eff * C)` over the `K_eff` classes present both in bank
/// slot `t` and in the target prototypes. Returns `None` when `K_eff = 0`.
pub fn fpa_loss<T: Scalar>(
    g: &mut Graph<T>,
    bank: &PrototypeBank,
    t: usize,
    target: Var,
    target_counts: &[usize],
) -> Result<Option<Var>> {
    let c = bank.dim();
    let shape = g.shape(target).to_vec();
    if shape != [bank.classes(), c] || target_counts.len() != bank.classes() {
        return Err(Error::GeometryMismatch(format!(
            "target prototypes {shape:?} against bank [{}, {c}]",
            bank.classes()
        )));
    }
    let shared: Vec<usize> = (0..bank.classes())
        .filter(|&k| bank.present(t, k) && target_counts[k] > 0)
        .collect();
    if shared.is_empty() {
        return Ok(None);
    }
    let rows = g.gather_rows(target, &shared)?;
    let global: Vec<T> = shared
        .iter()
        .flat_map(|&k| bank.value(t, k).iter().map(|&v| T::from_f64_lossy(v)))
        .collect();
    let global = g.constant(Tensor::new(&[shared.len(), c], global)?);
    let d = g.sub(rows, global)?;
    let norm = g.frobenius(d);
    Ok(Some(g.scale(
        norm,
        T::from_f64_lossy(1.0 / (shared.len() * c) as f64),
    )))
}

/// `seg + ssl + lambda * fpa`
pub fn total_loss(seg: f64, ssl: f64, fpa: f64, lambda: f64) -> f64 {
    seg + ssl + lambda * fpa
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logits_of(p: &[f64], k: usize) -> Tensor<f64> {
        Tensor::new(&[p.len() / k, k], p.iter().map(|v| v.ln()).collect()).unwrap()
    }

    fn seg_value(p: &[f64], k: usize, labels: &[u8]) -> f64 {
        let mut g = Graph::<f64>::new();
        let x = g.constant(logits_of(p, k));
        let l = seg_loss(&mut g, x, labels).unwrap();
        g.value(l).data()[0]
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[2, 3], vec![0.0, 80.0, 0.0, 80.0, 0.0, 0.0]).unwrap());
        let l = seg_loss(&mut g, x, &[1, 0]).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-12);
    }

    #[test]
    fn uniform_over_four_classes_is_ln4() {
        let l = seg_value(&[0.25; 12], 4, &[0, 1, 3]);
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn fully_ignored_loss_and_gradient_vanish() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::new(&[2, 2], vec![0.3, -1.0, 2.0, 0.1]).unwrap());
        let l = ssl_loss(&mut g, x, &[IGNORE, IGNORE]).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    /// The graph loss against the explicit `-sum(y log p)` over a one-hot
    /// target, averaged over non-ignored pixels.
    #[test]
    fn matches_one_hot_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = 5;
        let raw: Vec<f64> = (0..40).map(|_| rng.random_range(0.01..1.0)).collect();
        let p: Vec<f64> = raw
            .chunks(k)
            .flat_map(|c| {
                let s: f64 = c.iter().sum();
                c.iter().map(move |v| v / s).collect::<Vec<_>>()
            })
            .collect();
        let labels = [0u8, 4, IGNORE, 2, 2, 1, IGNORE, 3];
        let y = one_hot::<f64>(&labels, k);
        let valid = labels.iter().filter(|&&l| l != IGNORE).count() as f64;
        let expected: f64 = -y
            .data()
            .iter()
            .zip(&p)
            .map(|(y, p)| y * p.max(1e-12).ln())
            .sum::<f64>()
            / valid;
        assert!((seg_value(&p, k, &labels) - expected).abs() < 1e-12);
    }

    #[test]
    fn pseudolabel_projection() {
        let t = Tensor::new(&[1, 3], vec![0.1f64, 2.0, 0.5]).unwrap();
        assert_eq!(project_pseudolabel(&t), vec![1]);
        let t = Tensor::new(&[1, 2], vec![0.5f64, 0.5]).unwrap();
        assert_eq!(project_pseudolabel(&t), vec![0]);
        let oh = one_hot::<f64>(&[2, 0, 1], 3);
        assert_eq!(project_pseudolabel(&oh), vec![2, 0, 1]);
        assert_eq!(
            one_hot::<f64>(&project_pseudolabel(&oh), 3).data(),
            oh.data()
        );
    }

    #[test]
    fn prototypes_by_hand() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::new(&[2, 2, 1], vec![1.0, 3.0, 7.0, 5.0]).unwrap());
        let (p, counts) = compute_prototypes(&mut g, f, &[1, 1, 0, IGNORE], 3).unwrap();
        assert_eq!(counts, vec![1, 2, 0]);
        assert_eq!(g.value(p).data(), &[7.0, 2.0, 0.0]);

        let f = g.constant(Tensor::full(&[2, 2, 3], 0.7));
        let (p, counts) = compute_prototypes(&mut g, f, &[2; 4], 3).unwrap();
        assert_eq!(counts, vec![0, 0, 4]);
        assert!(g.value(p).data()[6..]
            .iter()
            .all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn running_mean_by_hand() {
        let mut bank = PrototypeBank::new(1, 1, 1);
        bank.update(0, 0, &[1.0]);
        assert_eq!(bank.value(0, 0), &[1.0]);
        bank.update(0, 0, &[3.0]);
        assert_eq!(bank.value(0, 0), &[2.0]);
        assert_eq!(bank.count(0, 0), 2);
    }

    #[test]
    fn running_mean_matches_direct_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bank = PrototypeBank::new(1, 1, 1);
        let xs: Vec<f64> = (0..1000).map(|_| rng.random_range(-10.0..10.0)).collect();
        for &x in &xs {
            bank.update(0, 0, &[x]);
        }
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!((bank.value(0, 0)[0] - mean).abs() <= 1e-6 * mean.abs().max(1e-12));
    }

    #[test]
    fn frame_updates_skip_absent_classes() {
        let mut bank = PrototypeBank::new(2, 3, 2);
        let protos = Tensor::new(&[3, 2], vec![1.0f32, 2.0, 0.0, 0.0, 5.0, 6.0]).unwrap();
        bank.update_frame(1, &protos, &[3, 0, 1]);
        assert!(bank.present(1, 0) && !bank.present(1, 1) && bank.present(1, 2));
        assert!(!bank.present(0, 0));
        assert_eq!(bank.value(1, 2), &[5.0, 6.0]);
        assert_eq!(bank.slot_for(5), 1);
        assert_eq!(PrototypeBank::new(1, 3, 2).slot_for(5), 0);
    }

    fn fpa_value(
        global: &[f64],
        target: &[f64],
        k: usize,
        c: usize,
        tcounts: &[usize],
        gpresent: &[bool],
    ) -> f64 {
        let mut bank = PrototypeBank::new(1, k, c);
        for kk in 0..k {
            if gpresent[kk] {
                bank.update(0, kk, &global[kk * c..(kk + 1) * c]);
            }
        }
        let mut g = Graph::<f64>::new();
        let t = g.constant(Tensor::new(&[k, c], target.to_vec()).unwrap());
        match fpa_loss(&mut g, &bank, 0, t, tcounts).unwrap() {
            Some(v) => g.value(v).data()[0],
            None => 0.0,
        }
    }

    #[test]
    fn fpa_by_hand() {
        assert_eq!(
            fpa_value(&[1.5, 2.5], &[1.5, 2.5], 2, 1, &[1, 1], &[true, true]),
            0.0
        );
        assert_eq!(fpa_value(&[3.0], &[1.0], 1, 1, &[4], &[true]), 2.0);
        let v = fpa_value(&[0.0; 4], &[1.0; 4], 2, 2, &[1, 1], &[true, true]);
        assert!((v - 0.5).abs() < 1e-15);
        // Classes missing from either side do not participate.
        assert_eq!(
            fpa_value(&[0.0, 9.0], &[0.0, 1.0], 2, 1, &[1, 0], &[true, true]),
            0.0
        );
        assert_eq!(
            fpa_value(&[0.0, 9.0], &[0.0, 1.0], 2, 1, &[1, 1], &[true, false]),
            0.0
        );
        assert_eq!(
            fpa_value(&[0.0, 9.0], &[0.0, 1.0], 2, 1, &[0, 1], &[true, false]),
            0.0
        );
    }

    #[test]
    fn total_loss_cases() {
        assert!((total_loss(1.0, 0.5, 2.0, 0.1) - 1.7).abs() < 1e-12);
        assert_eq!(total_loss(1.0, 0.5, 2.0, 0.0), 1.5);
        assert_eq!(
            total_loss(1.0, 0.5, 0.0, 0.1),
            total_loss(1.0, 0.5, 0.0, 10.0)
        );
    }

    proptest! {
        #[test]
        fn running_mean_oracle(xs in proptest::collection::vec(-100.0f64..100.0, 1..200)) {
            let mut bank = PrototypeBank::new(1, 1, 1);
            for &x in &xs {
                bank.update(0, 0, &[x]);
            }
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let scale = xs.iter().map(|x| x.abs()).fold(1e-12, f64::max);
            prop_assert!((bank.value(0, 0)[0] - mean).abs() <= 1e-9 * scale);
        }

        #[test]
        fn fpa_nonnegative_and_zero_iff_equal(
            a in proptest::collection::vec(-3.0f64..3.0, 6),
            b in proptest::collection::vec(-3.0f64..3.0, 6),
        ) {
            let v = fpa_value(&a, &b, 3, 2, &[1, 1, 1], &[true; 3]);
            prop_assert!(v >= 0.0);
            prop_assert_eq!(v == 0.0, a == b);
            prop_assert_eq!(fpa_value(&a, &a, 3, 2, &[1, 1, 1], &[true; 3]), 0.0);
        }

        #[test]
        fn seg_loss_ignores_pixel_order(seed in 0u64..500, n in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = 4;
            let logits: Vec<f64> = (0..n * k).map(|_| rng.random_range(-3.0..3.0)).collect();
            let labels: Vec<u8> = (0..n).map(|_| if rng.random_bool(0.2) { IGNORE } else { rng.random_range(0..k as u8) }).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let eval = |order: &[usize]| {
                let mut g = Graph::<f64>::new();
                let data: Vec<f64> = order.iter().flat_map(|&i| logits[i * k..(i + 1) * k].to_vec()).collect();
                let x = g.constant(Tensor::new(&[n, k], data).unwrap());
                let l: Vec<u8> = order.iter().map(|&i| labels[i]).collect();
                let v = seg_loss(&mut g, x, &l).unwrap();
                g.value(v).data()[0]
            };
            let id: Vec<usize> = (0..n).collect();
            prop_assert!((eval(&id) - eval(&perm)).abs() <= 1e-12);
        }
    }
}
