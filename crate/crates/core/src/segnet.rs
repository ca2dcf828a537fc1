//! Memory-conditioned multi-scale segmenter.
//!
//! Per patch: a strided-convolution stem and two pooled self-attention stages
//! give features at strides 4, 8 and 16; memory attention conditions the
//! stride-16 tokens on embeddings of earlier patches in the sequence; the
//! decoder fuses all three scales into `f` and predicts class logits at patch
//! resolution; the memory encoder turns `(f_low, logits)` into the embedding
//! pushed to the bank.
//!
//! Parameter names are prefixed by module: `enc.`, `mem_attn.`, `mem_enc.`,
//! `dec.`. LoRA factors live under `enc.` with a `.lora_a` / `.lora_b` suffix.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use panoseg_numerics::{
    read_checkpoint, write_checkpoint, Graph, ParamId, ParamStore, Scalar, Tensor, Var,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::geometry::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub patch_size: usize,
    /// Channels of `f_high`, `f_med`, `f_low`.
    pub widths: [usize; 3],
    pub heads: usize,
    /// Memory-attention block count `L`.
    pub mem_blocks: usize,
    pub mem_channels: usize,
    /// Memory bank capacity `n`.
    pub bank_size: usize,
    pub num_classes: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Per-scale projection width inside the decoder.
    pub decoder_dim: usize,
    /// Channels of the fused feature `f`.
    pub fused_dim: usize,
    pub mlp_ratio: usize,
    pub memory_enabled: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 64,
            widths: [16, 32, 64],
            heads: 2,
            mem_blocks: 2,
            mem_channels: 64,
            bank_size: 9,
            num_classes: 6,
            lora_rank: 4,
            lora_alpha: 4.0,
            decoder_dim: 16,
            fused_dim: 32,
            mlp_ratio: 2,
            memory_enabled: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// The 16-pixel configuration used for whole-model gradient checks.
    pub fn micro() -> Self {
        Self {
            patch_size: 16,
            widths: [4, 8, 16],
            heads: 2,
            mem_blocks: 1,
            mem_channels: 8,
            bank_size: 2,
            num_classes: 3,
            lora_rank: 2,
            lora_alpha: 2.0,
            decoder_dim: 4,
            fused_dim: 8,
            mlp_ratio: 2,
            memory_enabled: true,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(16) {
            return bad(format!(
                "patch size {} must be a positive multiple of 16",
                self.patch_size
            ));
        }
        let dims = [
            self.widths[0],
            self.widths[1],
            self.widths[2],
            self.heads,
            self.mem_channels,
            self.num_classes,
            self.lora_rank,
            self.decoder_dim,
            self.fused_dim,
            self.mlp_ratio,
        ];
        if dims.contains(&0) {
            return bad("all widths, heads, ranks and class counts must be positive".into());
        }
        if !self.widths[1].is_multiple_of(self.heads) || !self.widths[2].is_multiple_of(self.heads)
        {
            return bad(format!(
                "widths {:?} not divisible by {} heads",
                self.widths, self.heads
            ));
        }
        if self.memory_enabled && self.mem_blocks == 0 {
            return bad("memory attention needs at least one block".into());
        }
        if self.num_classes >= crate::IGNORE as usize {
            return bad(format!(
                "{} classes collide with the ignore label",
                self.num_classes
            ));
        }
        if !(self.lora_alpha > 0.0) {
            return bad("lora_alpha must be positive".into());
        }
        Ok(())
    }

    pub fn high_side(&self) -> usize {
        self.patch_size / 4
    }

    pub fn low_side(&self) -> usize {
        self.patch_size / 16
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }
}

/// FIFO of at most `capacity` entries; pushing into a full bank evicts the
/// oldest entry.
#[derive(Clone, Debug)]
pub struct MemoryBank<E> {
    capacity: usize,
    entries: VecDeque<E>,
}

impl<E> MemoryBank<E> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, e: E) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(e);
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &E> {
        self.entries.iter()
    }
}

/// How encoder weights are trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    /// Base encoder weights train; LoRA factors stay frozen.
    Full,
    /// Base encoder weights are frozen; only LoRA factors train.
    Lora,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Lora {
    a: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct AttnBlock {
    ln1: Norm,
    q: Linear,
    q_lora: Lora,
    k: Linear,
    v: Linear,
    v_lora: Lora,
    o: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Copy, Debug)]
struct MemBlock {
    ln_q: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: Conv,
    stem_ln: Norm,
    embed1: Linear,
    stage1: AttnBlock,
    embed2: Linear,
    stage2: AttnBlock,
    mem_blocks: Vec<MemBlock>,
    mem_mask: Conv,
    mem_feat: Linear,
    mem_out: Conv,
    proj_h: Linear,
    proj_m: Linear,
    proj_l: Linear,
    fuse: Conv,
    head: Linear,
}

/// Names of the query/value projections carrying LoRA adapters.
pub const LORA_TARGETS: [&str; 4] = [
    "enc.stage1.q",
    "enc.stage1.v",
    "enc.stage2.q",
    "enc.stage2.v",
];

struct Init<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Init<'_, T> {
    fn linear(&mut self, name: &str, din: usize, dout: usize, zero: bool) -> Linear {
        let w = if zero {
            Tensor::zeros(&[dout, din])
        } else {
            Tensor::randn(&[dout, din], (1.0 / din as f64).sqrt(), &mut self.rng)
        };
        Linear {
            w: self.store.add(format!("{name}.weight"), w),
            b: self
                .store
                .add(format!("{name}.bias"), Tensor::zeros(&[dout])),
        }
    }

    fn lora(&mut self, name: &str, din: usize, dout: usize, rank: usize) -> Lora {
        let a = Tensor::randn(&[rank, din], (1.0 / din as f64).sqrt(), &mut self.rng);
        Lora {
            a: self.store.add(format!("{name}.lora_a"), a),
            b: self
                .store
                .add(format!("{name}.lora_b"), Tensor::zeros(&[dout, rank])),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            g: self.store.add(format!("{name}.gamma"), Tensor::ones(&[d])),
            b: self.store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let std = (2.0 / (k * k * cin) as f64).sqrt();
        Conv {
            w: self.store.add(
                format!("{name}.weight"),
                Tensor::randn(&[cout, k, k, cin], std, &mut self.rng),
            ),
            b: self
                .store
                .add(format!("{name}.bias"), Tensor::zeros(&[cout])),
        }
    }

    fn attn_block(&mut self, name: &str, d: usize, cfg: &ModelConfig) -> AttnBlock {
        let hidden = d * cfg.mlp_ratio;
        AttnBlock {
            ln1: self.norm(&format!("{name}.ln1"), d),
            q: self.linear(&format!("{name}.q"), d, d, false),
            q_lora: self.lora(&format!("{name}.q"), d, d, cfg.lora_rank),
            k: self.linear(&format!("{name}.k"), d, d, false),
            v: self.linear(&format!("{name}.v"), d, d, false),
            v_lora: self.lora(&format!("{name}.v"), d, d, cfg.lora_rank),
            o: self.linear(&format!("{name}.o"), d, d, false),
            ln2: self.norm(&format!("{name}.ln2"), d),
            fc1: self.linear(&format!("{name}.fc1"), d, hidden, false),
            fc2: self.linear(&format!("{name}.fc2"), hidden, d, false),
        }
    }

    /// Output projections start at zero so an untrained memory path is the
    /// identity.
    fn mem_block(&mut self, name: &str, d: usize, dm: usize, cfg: &ModelConfig) -> MemBlock {
        let hidden = d * cfg.mlp_ratio;
        MemBlock {
            ln_q: self.norm(&format!("{name}.ln_q"), d),
            q: self.linear(&format!("{name}.q"), d, d, false),
            k: self.linear(&format!("{name}.k"), dm, d, false),
            v: self.linear(&format!("{name}.v"), dm, d, false),
            o: self.linear(&format!("{name}.o"), d, d, true),
            ln2: self.norm(&format!("{name}.ln2"), d),
            fc1: self.linear(&format!("{name}.fc1"), d, hidden, false),
            fc2: self.linear(&format!("{name}.fc2"), hidden, d, true),
        }
    }
}

/// Graph handles for one patch.
#[derive(Clone, Copy, Debug)]
pub struct MultiScaleFeatures {
    /// `[P/4, P/4, C_h]`
    pub f_high: Var,
    /// `[P/8, P/8, C_m]`
    pub f_med: Var,
    /// `[P/16, P/16, C_l]`
    pub f_low: Var,
    /// Memory-conditioned `f_low`, present iff memory attention ran.
    pub f_con: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct PatchOutput {
    /// `[P, P, K]`
    pub logits: Var,
    /// Fused decoder feature `f`, `[P/4, P/4, C_f]`.
    pub fused: Var,
    /// Memory embedding `[P/16, P/16, C_mem]`, present iff memory ran.
    pub memory: Option<Var>,
    pub features: MultiScaleFeatures,
}

#[derive(Clone, Debug)]
pub struct SegNet<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    layout: Layout,
}

/// Fixed 2-D sinusoidal encoding `[h*w, c]`: the first half of the channels
/// encodes the row, the second half the column.
pub fn position_encoding<T: Scalar>(h: usize, w: usize, c: usize) -> Tensor<T> {
    let half = c / 2;
    let mut data = vec![T::zero(); h * w * c];
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * c..(y * w + x + 1) * c];
            for (pos, base, width) in [(y, 0, half), (x, half, c - half)] {
                for i in 0..width / 2 {
                    let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / width as f64);
                    let a = pos as f64 * freq;
                    row[base + 2 * i] = T::from_f64_lossy(a.sin());
                    row[base + 2 * i + 1] = T::from_f64_lossy(a.cos());
                }
            }
        }
    }
    Tensor::new(&[h * w, c], data).expect("position encoding shape")
}

fn to_tensor<T: Scalar>(img: &Image) -> Result<Tensor<T>> {
    Ok(Tensor::new(
        &[img.height(), img.width(), img.channels()],
        img.data
            .iter()
            .map(|&v| T::from_f64_lossy(v as f64))
            .collect(),
    )?)
}

impl<T: Scalar> SegNet<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let [ch, cm, cl] = config.widths;
        let (cd, cf, k, dm) = (
            config.decoder_dim,
            config.fused_dim,
            config.num_classes,
            config.mem_channels,
        );
        let layout = Layout {
            stem: init.conv("enc.stem", 3, ch, 4),
            stem_ln: init.norm("enc.stem_ln", ch),
            embed1: init.linear("enc.embed1", ch, cm, false),
            stage1: init.attn_block("enc.stage1", cm, &config),
            embed2: init.linear("enc.embed2", cm, cl, false),
            stage2: init.attn_block("enc.stage2", cl, &config),
            mem_blocks: (0..config.mem_blocks.max(1))
                .map(|i| init.mem_block(&format!("mem_attn.block{i}"), cl, dm, &config))
                .collect(),
            mem_mask: init.conv("mem_enc.mask", k, dm, 4),
            mem_feat: init.linear("mem_enc.feat", cl, dm, false),
            mem_out: init.conv("mem_enc.out", dm, dm, 3),
            proj_h: init.linear("dec.proj_high", ch, cd, false),
            proj_m: init.linear("dec.proj_med", cm, cd, false),
            proj_l: init.linear("dec.proj_low", cl, cd, false),
            fuse: init.conv("dec.fuse", 3 * cd, cf, 3),
            head: init.linear("dec.head", cf, k, false),
        };
        let mut net = Self {
            config,
            params: store,
            layout,
        };
        net.set_encoder_mode(EncoderMode::Full);
        Ok(net)
    }

    /// Freezes or unfreezes encoder base weights and LoRA factors.
    pub fn set_encoder_mode(&mut self, mode: EncoderMode) {
        for (_, p) in self.params.iter_mut() {
            if p.name.starts_with("enc.") {
                let is_lora = p.name.ends_with(".lora_a") || p.name.ends_with(".lora_b");
                p.trainable = is_lora == (mode == EncoderMode::Lora);
            }
        }
    }

    /// Freezes or unfreezes memory attention and the memory encoder.
    pub fn set_memory_trainable(&mut self, trainable: bool) {
        self.params.set_trainable_prefix("mem_attn.", trainable);
        self.params.set_trainable_prefix("mem_enc.", trainable);
    }

    pub fn cast<U: Scalar>(&self) -> SegNet<U> {
        SegNet {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    fn p(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        g.param(&self.params, id)
    }

    fn linear(&self, g: &mut Graph<T>, x: Var, l: Linear) -> Result<Var> {
        let w = self.p(g, l.w);
        let b = self.p(g, l.b);
        Ok(g.linear(x, w, Some(b))?)
    }

    /// `x W^T + b + (alpha / r) (x A^T) B^T`
    fn linear_lora(&self, g: &mut Graph<T>, x: Var, l: Linear, lora: Lora) -> Result<Var> {
        let base = self.linear(g, x, l)?;
        let a = self.p(g, lora.a);
        let b = self.p(g, lora.b);
        let down = g.matmul_nt(x, a)?;
        let up = g.matmul_nt(down, b)?;
        let up = g.scale(up, T::from_f64_lossy(self.config.lora_scale()));
        Ok(g.add(base, up)?)
    }

    fn norm(&self, g: &mut Graph<T>, x: Var, n: Norm) -> Result<Var> {
        let gamma = self.p(g, n.g);
        let beta = self.p(g, n.b);
        Ok(g.layer_norm(x, gamma, beta)?)
    }

    fn conv(&self, g: &mut Graph<T>, x: Var, c: Conv, stride: usize, pad: usize) -> Result<Var> {
        let w = self.p(g, c.w);
        let b = self.p(g, c.b);
        Ok(g.conv2d(x, w, Some(b), stride, pad)?)
    }

    fn mlp(&self, g: &mut Graph<T>, x: Var, ln: Norm, fc1: Linear, fc2: Linear) -> Result<Var> {
        let h = self.norm(g, x, ln)?;
        let h = self.linear(g, h, fc1)?;
        let h = g.gelu(h);
        let h = self.linear(g, h, fc2)?;
        Ok(g.add(x, h)?)
    }

    /// Multi-head scaled dot-product attention over token matrices.
    fn attention(&self, g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<Var> {
        let d = g.shape(q)[1];
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, scale);
            let a = g.softmax(s, 1)?;
            outs.push(g.matmul(a, vh)?);
        }
        if outs.len() == 1 {
            return Ok(outs[0]);
        }
        Ok(g.concat(&outs, 1)?)
    }

    fn self_attn_block(&self, g: &mut Graph<T>, x: Var, b: &AttnBlock) -> Result<Var> {
        let h = self.norm(g, x, b.ln1)?;
        let q = self.linear_lora(g, h, b.q, b.q_lora)?;
        let k = self.linear(g, h, b.k)?;
        let v = self.linear_lora(g, h, b.v, b.v_lora)?;
        let a = self.attention(g, q, k, v)?;
        let o = self.linear(g, a, b.o)?;
        let x = g.add(x, o)?;
        self.mlp(g, x, b.ln2, b.fc1, b.fc2)
    }

    /// Image encoder on a `[P, P, 3]` patch.
    pub fn encode(&self, g: &mut Graph<T>, patch: Var) -> Result<MultiScaleFeatures> {
        let p = self.config.patch_size;
        if g.shape(patch) != [p, p, 3] {
            return Err(Error::GeometryMismatch(format!(
                "patch {:?}, expected [{p}, {p}, 3]",
                g.shape(patch)
            )));
        }
        let [ch, cm, cl] = self.config.widths;
        let l = &self.layout;
        let s4 = p / 4;
        let x = self.conv(g, patch, l.stem, 4, 0)?;
        let f_high = self.norm(g, x, l.stem_ln)?;

        let x = g.avg_pool2x(f_high)?;
        let x = g.reshape(x, &[s4 * s4 / 4, ch])?;
        let x = self.linear(g, x, l.embed1)?;
        let x = self.self_attn_block(g, x, &l.stage1)?;
        let f_med = g.reshape(x, &[s4 / 2, s4 / 2, cm])?;

        let x = g.avg_pool2x(f_med)?;
        let x = g.reshape(x, &[s4 * s4 / 16, cm])?;
        let x = self.linear(g, x, l.embed2)?;
        let x = self.self_attn_block(g, x, &l.stage2)?;
        let f_low = g.reshape(x, &[s4 / 4, s4 / 4, cl])?;
        Ok(MultiScaleFeatures {
            f_high,
            f_med,
            f_low,
            f_con: None,
        })
    }

    /// Cross-attention of `f_low` tokens onto every bank entry. An empty bank
    /// returns `f_low` itself.
    pub fn memory_attend(
        &self,
        g: &mut Graph<T>,
        f_low: Var,
        bank: &MemoryBank<Var>,
    ) -> Result<Var> {
        if bank.is_empty() {
            return Ok(f_low);
        }
        let side = self.config.low_side();
        let (cl, dm) = (self.config.widths[2], self.config.mem_channels);
        let tokens = side * side;
        let pe_q = g.constant(position_encoding(side, side, cl));
        let pe_m = position_encoding::<T>(side, side, dm);
        let mut mem = Vec::with_capacity(bank.len());
        let mut mem_pe = Vec::with_capacity(bank.len());
        for &e in bank.iter() {
            let flat = g.reshape(e, &[tokens, dm])?;
            mem.push(flat);
            let pe = g.constant(pe_m.clone());
            mem_pe.push(g.add(flat, pe)?);
        }
        let (mem, mem_pe) = if mem.len() == 1 {
            (mem[0], mem_pe[0])
        } else {
            (g.concat(&mem, 0)?, g.concat(&mem_pe, 0)?)
        };
        let mut x = g.reshape(f_low, &[tokens, cl])?;
        for b in self.layout.mem_blocks.iter().take(self.config.mem_blocks) {
            let h = self.norm(g, x, b.ln_q)?;
            let h = g.add(h, pe_q)?;
            let q = self.linear(g, h, b.q)?;
            let k = self.linear(g, mem_pe, b.k)?;
            let v = self.linear(g, mem, b.v)?;
            let a = self.attention(g, q, k, v)?;
            let o = self.linear(g, a, b.o)?;
            x = g.add(x, o)?;
            x = self.mlp(g, x, b.ln2, b.fc1, b.fc2)?;
        }
        Ok(g.reshape(x, &[side, side, cl])?)
    }

    /// Memory embedding from `f_low` and patch-resolution logits.
    pub fn memory_encode(&self, g: &mut Graph<T>, f_low: Var, logits: Var) -> Result<Var> {
        let p = self.config.patch_size;
        let k = self.config.num_classes;
        if g.shape(logits) != [p, p, k] {
            return Err(Error::Numerics(
                panoseg_numerics::NumericsError::ShapeMismatch {
                    op: "memory_encode",
                    detail: format!("logits {:?}", g.shape(logits)),
                },
            ));
        }
        let side = self.config.low_side();
        let (cl, dm) = (self.config.widths[2], self.config.mem_channels);
        let l = &self.layout;
        let m = g.softmax(logits, 2)?;
        let m = g.avg_pool2x(m)?;
        let m = g.avg_pool2x(m)?;
        let m = self.conv(g, m, l.mem_mask, 4, 0)?;
        let f = g.reshape(f_low, &[side * side, cl])?;
        let f = self.linear(g, f, l.mem_feat)?;
        let f = g.reshape(f, &[side, side, dm])?;
        let x = g.add(m, f)?;
        let x = g.gelu(x);
        self.conv(g, x, l.mem_out, 1, 1)
    }

    /// Fuses the three scales (with `f_con` replacing `f_low` when present)
    /// into `(logits [P, P, K], f [P/4, P/4, C_f])`.
    pub fn decode(&self, g: &mut Graph<T>, feats: &MultiScaleFeatures) -> Result<(Var, Var)> {
        let [ch, cm, cl] = self.config.widths;
        let cd = self.config.decoder_dim;
        let s4 = self.config.high_side();
        let l = &self.layout;
        let low = feats.f_con.unwrap_or(feats.f_low);

        let project =
            |g: &mut Graph<T>, x: Var, side: usize, cin: usize, lin: Linear| -> Result<Var> {
                let t = g.reshape(x, &[side * side, cin])?;
                let t = self.linear(g, t, lin)?;
                Ok(g.reshape(t, &[side, side, cd])?)
            };
        let h = project(g, feats.f_high, s4, ch, l.proj_h)?;
        let m = project(g, feats.f_med, s4 / 2, cm, l.proj_m)?;
        let m = g.upsample2x(m)?;
        let lo = project(g, low, s4 / 4, cl, l.proj_l)?;
        let lo = g.upsample2x(lo)?;
        let lo = g.upsample2x(lo)?;
        let cat = g.concat(&[h, m, lo], 2)?;
        let f = self.conv(g, cat, l.fuse, 1, 1)?;
        let f = g.gelu(f);

        let k = self.config.num_classes;
        let t = g.reshape(f, &[s4 * s4, self.config.fused_dim])?;
        let t = self.linear(g, t, l.head)?;
        let t = g.reshape(t, &[s4, s4, k])?;
        let t = g.upsample2x(t)?;
        let logits = g.upsample2x(t)?;
        Ok((logits, f))
    }

    /// Runs a patch sequence in order with a fresh bank of the configured
    /// capacity. Without memory every patch is processed independently.
    pub fn forward_sequence(
        &self,
        g: &mut Graph<T>,
        patches: &[Var],
        memory: bool,
    ) -> Result<Vec<PatchOutput>> {
        let mut bank = MemoryBank::new(self.config.bank_size);
        let mut outs = Vec::with_capacity(patches.len());
        for &patch in patches {
            let mut feats = self.encode(g, patch)?;
            if memory {
                feats.f_con = Some(self.memory_attend(g, feats.f_low, &bank)?);
            }
            let (logits, fused) = self.decode(g, &feats)?;
            let low = feats.f_con.unwrap_or(feats.f_low);
            let memory_var = if memory {
                let m = self.memory_encode(g, low, logits)?;
                bank.push(m);
                Some(m)
            } else {
                None
            };
            outs.push(PatchOutput {
                logits,
                fused,
                memory: memory_var,
                features: feats,
            });
        }
        bank.clear();
        Ok(outs)
    }

    pub fn patch_input(&self, g: &mut Graph<T>, img: &Image) -> Result<Var> {
        Ok(g.constant(to_tensor(img)?))
    }

    /// Softmax probabilities `[P, P, K]` per patch, without recording
    /// gradients.
    pub fn predict_probs(&self, patches: &[Image], memory: bool) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::inference();
        let vars = patches
            .iter()
            .map(|p| self.patch_input(&mut g, p))
            .collect::<Result<Vec<_>>>()?;
        let outs = self.forward_sequence(&mut g, &vars, memory)?;
        outs.iter()
            .map(|o| {
                let p = g.softmax(o.logits, 2)?;
                Ok(g.value(p).clone())
            })
            .collect()
    }

    /// `W + (alpha / r) B A` for one adapted projection, e.g. `enc.stage1.q`.
    pub fn effective_weight(&self, target: &str) -> Result<Tensor<T>> {
        let w = self
            .params
            .tensor(self.params.id(&format!("{target}.weight"))?);
        let a = self
            .params
            .tensor(self.params.id(&format!("{target}.lora_a"))?);
        let b = self
            .params
            .tensor(self.params.id(&format!("{target}.lora_b"))?);
        let delta = b.matmul(a)?;
        let s = T::from_f64_lossy(self.config.lora_scale());
        let data = w
            .data()
            .iter()
            .zip(delta.data())
            .map(|(&w, &d)| w + s * d)
            .collect();
        Ok(Tensor::new(w.shape(), data)?)
    }

    /// Folds every adapter into its base weight and zeroes `B`.
    pub fn merge_lora(&self) -> Result<Self> {
        let mut out = self.clone();
        for target in LORA_TARGETS {
            let w = self.effective_weight(target)?;
            out.params.assign(&format!("{target}.weight"), w)?;
            let b = self
                .params
                .tensor(self.params.id(&format!("{target}.lora_b"))?);
            out.params
                .assign(&format!("{target}.lora_b"), Tensor::zeros(b.shape()))?;
        }
        Ok(out)
    }
}

/// Companion TOML path of a checkpoint.
pub fn config_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("toml")
}

impl SegNet<f32> {
    /// Writes the parameters to `path` and the model config next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(f);
        write_checkpoint(&mut w, &self.params)?;
        std::io::Write::flush(&mut w).map_err(io_err(path))?;
        let cpath = config_path(path);
        let text = toml::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&cpath, text).map_err(io_err(&cpath))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.into()));
        }
        let cpath = config_path(path);
        let text =
            std::fs::read_to_string(&cpath).map_err(|_| Error::MissingFile(cpath.clone()))?;
        let config: ModelConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", cpath.display())))?;
        let mut net = Self::new(config)?;
        let f = File::open(path).map_err(io_err(path))?;
        let records = read_checkpoint(BufReader::new(f))?;
        net.params.load_records(&records)?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ImageGeometry, Raster};
    use rand::Rng;

    fn random_image(side: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Raster::new(
            ImageGeometry::new(side, side, 3),
            (0..side * side * 3).map(|_| rng.random::<f32>()).collect(),
        )
        .unwrap()
    }

    fn micro() -> SegNet<f64> {
        SegNet::new(ModelConfig::micro()).unwrap()
    }

    /// Randomizes zero-initialized tensors so every path carries signal.
    fn perturbed<T: Scalar>(mut net: SegNet<T>, seed: u64) -> SegNet<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, p) in net.params.iter_mut() {
            if p.tensor.data().iter().all(|&v| v == T::zero()) {
                p.tensor = Tensor::randn(p.tensor.shape(), 0.2, &mut rng);
            }
        }
        net
    }

    #[test]
    fn fifo_keeps_last_n_in_order() {
        for n in 0..5usize {
            for m in 0..=3 * n + 1 {
                let mut bank = MemoryBank::new(n);
                for i in 0..m {
                    bank.push(i);
                    assert!(bank.len() <= n);
                }
                let kept: Vec<usize> = bank.iter().copied().collect();
                let expected: Vec<usize> = (m.saturating_sub(n)..m).collect();
                assert_eq!(kept, expected);
            }
        }
    }

    #[test]
    fn feature_shapes_at_default_size() {
        let net = SegNet::<f32>::new(ModelConfig::default()).unwrap();
        let mut g = Graph::inference();
        let x = net.patch_input(&mut g, &random_image(64, 1)).unwrap();
        let f = net.encode(&mut g, x).unwrap();
        assert_eq!(g.shape(f.f_high), [16, 16, 16]);
        assert_eq!(g.shape(f.f_med), [8, 8, 32]);
        assert_eq!(g.shape(f.f_low), [4, 4, 64]);
        let (logits, fused) = net.decode(&mut g, &f).unwrap();
        assert_eq!(g.shape(logits), [64, 64, 6]);
        assert_eq!(g.shape(fused), [16, 16, 32]);
        let m = net.memory_encode(&mut g, f.f_low, logits).unwrap();
        assert_eq!(g.shape(m), [4, 4, 64]);
    }

    #[test]
    fn zero_input_and_biases_give_zero_features() {
        let mut net = SegNet::<f32>::new(ModelConfig::default()).unwrap();
        for (_, p) in net.params.iter_mut() {
            if p.name.ends_with(".bias") || p.name.ends_with(".beta") {
                p.tensor = Tensor::zeros(p.tensor.shape());
            }
        }
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros(&[64, 64, 3]));
        let f = net.encode(&mut g, x).unwrap();
        for v in [f.f_high, f.f_med, f.f_low] {
            assert!(g.value(v).data().iter().all(|&x| x == 0.0));
        }
        // A nonzero LayerNorm offset shows up unchanged in f_high.
        let beta = net.params.id("enc.stem_ln.beta").unwrap();
        net.params.get_mut(beta).tensor = Tensor::full(&[16], 0.5);
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros(&[64, 64, 3]));
        let f = net.encode(&mut g, x).unwrap();
        assert!(g.value(f.f_high).data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn identical_patches_give_identical_features() {
        let net = perturbed(SegNet::<f32>::new(ModelConfig::default()).unwrap(), 3);
        let img = random_image(64, 2);
        let out = net.predict_probs(&[img.clone(), img], false).unwrap();
        assert!(out[0].bit_eq(&out[1]));
    }

    #[test]
    fn empty_bank_is_exact_bypass() {
        let net = perturbed(micro(), 1);
        let mut g = Graph::inference();
        let x = net.patch_input(&mut g, &random_image(16, 4)).unwrap();
        let f = net.encode(&mut g, x).unwrap();
        let bank = MemoryBank::new(2);
        let con = net.memory_attend(&mut g, f.f_low, &bank).unwrap();
        assert_eq!(con, f.f_low);
        assert!(g.value(con).bit_eq(g.value(f.f_low)));
    }

    #[test]
    fn single_patch_memory_on_equals_off() {
        let net = perturbed(SegNet::<f32>::new(ModelConfig::default()).unwrap(), 5);
        let img = random_image(64, 6);
        let on = net.predict_probs(std::slice::from_ref(&img), true).unwrap();
        let off = net
            .predict_probs(std::slice::from_ref(&img), false)
            .unwrap();
        assert!(on[0].bit_eq(&off[0]));
    }

    #[test]
    fn memory_off_is_order_independent() {
        let net = perturbed(micro(), 2);
        let imgs: Vec<_> = (0..3).map(|i| random_image(16, 10 + i)).collect();
        let fwd = net.predict_probs(&imgs, false).unwrap();
        let rev_imgs: Vec<_> = imgs.iter().rev().cloned().collect();
        let rev = net.predict_probs(&rev_imgs, false).unwrap();
        for (a, b) in fwd.iter().zip(rev.iter().rev()) {
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn memory_carries_information_forward() {
        let net = perturbed(micro(), 3);
        let mut imgs: Vec<_> = (0..2).map(|i| random_image(16, 20 + i)).collect();
        let before = net.predict_probs(&imgs, true).unwrap();
        imgs[0].data[0] = 1.0 - imgs[0].data[0];
        let after = net.predict_probs(&imgs, true).unwrap();
        assert!(before[1].max_abs_diff(&after[1]) > 0.0);
        let off_before = net.predict_probs(&imgs[1..], false).unwrap();
        let off_after = net.predict_probs(&imgs[1..], false).unwrap();
        assert!(off_before[0].bit_eq(&off_after[0]));
    }

    #[test]
    fn f_con_changes_decoder_output() {
        let net = perturbed(micro(), 4);
        let mut g = Graph::inference();
        let x = net.patch_input(&mut g, &random_image(16, 7)).unwrap();
        let f = net.encode(&mut g, x).unwrap();
        let shifted = {
            let c = g.constant(Tensor::full(g.shape(f.f_low), 0.3));
            g.add(f.f_low, c).unwrap()
        };
        let (a, _) = net.decode(&mut g, &f).unwrap();
        let (b, _) = net
            .decode(
                &mut g,
                &MultiScaleFeatures {
                    f_con: Some(shifted),
                    ..f
                },
            )
            .unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) > 1e-6);
    }

    /// One memory block with zero query/key weights attends uniformly, so its
    /// attention output is the mean value projection over all memory tokens.
    #[test]
    fn uniform_attention_by_hand() {
        let mut cfg = ModelConfig::micro();
        cfg.mem_blocks = 1;
        cfg.heads = 1;
        let mut net = perturbed(SegNet::<f64>::new(cfg).unwrap(), 8);
        for name in ["q", "k"] {
            for part in ["weight", "bias"] {
                let full = format!("mem_attn.block0.{name}.{part}");
                let id = net.params.id(&full).unwrap();
                net.params.get_mut(id).tensor = Tensor::zeros(net.params.tensor(id).shape());
            }
        }
        // Identity output projection and a disabled MLP expose the residual.
        let o = net.params.id("mem_attn.block0.o.weight").unwrap();
        net.params.get_mut(o).tensor = Tensor::eye(16);
        let ob = net.params.id("mem_attn.block0.o.bias").unwrap();
        net.params.get_mut(ob).tensor = Tensor::zeros(&[16]);
        for part in ["weight", "bias"] {
            let id = net
                .params
                .id(&format!("mem_attn.block0.fc2.{part}"))
                .unwrap();
            net.params.get_mut(id).tensor = Tensor::zeros(net.params.tensor(id).shape());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::inference();
        let f_low = g.constant(Tensor::randn(&[1, 1, 16], 1.0, &mut rng));
        let mem = Tensor::<f64>::randn(&[1, 1, 8], 1.0, &mut rng);
        let mut bank = MemoryBank::new(2);
        bank.push(g.constant(mem.clone()));
        let out = net.memory_attend(&mut g, f_low, &bank).unwrap();

        let wv = net
            .params
            .tensor(net.params.id("mem_attn.block0.v.weight").unwrap());
        let bv = net
            .params
            .tensor(net.params.id("mem_attn.block0.v.bias").unwrap());
        for c in 0..16 {
            let v: f64 = (0..8).map(|j| wv.at(&[c, j]) * mem.data()[j]).sum::<f64>() + bv.data()[c];
            let expected = g.value(f_low).data()[c] + v;
            assert!((g.value(out).data()[c] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn lora_with_zero_b_is_base() {
        let net = SegNet::<f32>::new(ModelConfig::default()).unwrap();
        for t in LORA_TARGETS {
            let base = net
                .params
                .tensor(net.params.id(&format!("{t}.weight")).unwrap());
            assert!(net.effective_weight(t).unwrap().bit_eq(base));
        }
    }

    #[test]
    fn full_rank_lora_represents_any_delta() {
        let mut cfg = ModelConfig::micro();
        cfg.lora_rank = 8;
        cfg.lora_alpha = 8.0;
        let mut net = SegNet::<f64>::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let delta = Tensor::<f64>::randn(&[8, 8], 1.0, &mut rng);
        let t = "enc.stage1.q";
        net.params
            .assign(&format!("{t}.lora_a"), Tensor::eye(8))
            .unwrap();
        net.params
            .assign(&format!("{t}.lora_b"), delta.clone())
            .unwrap();
        let base = net
            .params
            .tensor(net.params.id(&format!("{t}.weight")).unwrap())
            .clone();
        let eff = net.effective_weight(t).unwrap();
        for i in 0..64 {
            assert!((eff.data()[i] - base.data()[i] - delta.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn merged_weights_match_adapter_forward() {
        let net = perturbed(SegNet::<f32>::new(ModelConfig::default()).unwrap(), 11);
        let merged = net.merge_lora().unwrap();
        let imgs: Vec<_> = (0..2).map(|i| random_image(64, 30 + i)).collect();
        let a = net.predict_probs(&imgs, true).unwrap();
        let b = merged.predict_probs(&imgs, true).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.max_abs_diff(y) <= 1e-5);
        }
    }

    #[test]
    fn lora_mode_freezes_base_encoder() {
        // The micro model has a single stage-2 token, whose attention weights
        // are constant, so the default size is used here.
        let mut net = perturbed(SegNet::<f32>::new(ModelConfig::default()).unwrap(), 12);
        net.set_encoder_mode(EncoderMode::Lora);
        let mut g = Graph::new();
        let x = net.patch_input(&mut g, &random_image(64, 13)).unwrap();
        let outs = net.forward_sequence(&mut g, &[x], true).unwrap();
        let loss = g.mean_all(outs[0].logits);
        let sq = g.mul(outs[0].logits, outs[0].logits).unwrap();
        let sq = g.mean_all(sq);
        let loss = g.add(loss, sq).unwrap();
        g.backward(loss).unwrap();
        let mut grads = panoseg_numerics::Gradients::for_store(&net.params);
        g.accumulate_param_grads(&mut grads, 1.0);
        for (id, p) in net.params.iter() {
            if !p.name.starts_with("enc.") {
                continue;
            }
            let is_lora = p.name.contains(".lora_");
            match grads.get(id) {
                Some(gr) if is_lora => assert!(gr.data().iter().any(|&v| v != 0.0), "{}", p.name),
                None if !is_lora => {}
                other => panic!(
                    "{}: unexpected gradient presence {:?}",
                    p.name,
                    other.is_some()
                ),
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut cfg = ModelConfig::micro();
        cfg.init_seed = 77;
        let net = perturbed(SegNet::<f32>::new(cfg).unwrap(), 14);
        net.save(&path).unwrap();
        let back = SegNet::load(&path).unwrap();
        assert_eq!(back.config, net.config);
        assert!(back.params.bit_eq(&net.params));
        assert!(matches!(
            SegNet::load(&dir.path().join("none.ckpt")),
            Err(Error::MissingCheckpoint(_))
        ));
    }
}
