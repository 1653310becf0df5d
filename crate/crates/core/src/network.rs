//! Octree HRNet backbone.
//!
//! A stem convolution at the finest level feeds `B` parallel branches, branch
//! `b` living at octree level `D - b`. Each stage runs bottleneck residual
//! blocks on every branch and then fuses: every branch receives the sum of
//! all branches resampled to its resolution. Two heads read the result: a
//! shape head over the pooled branches and a point head over the finest
//! branch.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{AutodiffError, BatchNormIds, Graph, ParamId, ParamRole, ParamStore, Var};
use crate::batch::{OctreeBatch, UpsampleMode};
use crate::octree::MAX_DEPTH;
use crate::tensor::{Real, Tensor};

pub const INPUT_CHANNELS: usize = 4;
const HEAD_BIAS_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Full,
    OneFusion,
    NoFusion,
    Unet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub depth: u32,
    pub stem_channels: usize,
    pub branch_channels: Vec<usize>,
    pub fusion_stages: usize,
    pub blocks_per_stage: usize,
    /// Bottleneck width is `channels / bottleneck_ratio`, at least 1.
    pub bottleneck_ratio: usize,
    pub shape_dim: usize,
    pub point_dim: usize,
    pub fusion_mode: FusionMode,
    pub upsample: UpsampleMode,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            depth: 6,
            stem_channels: 16,
            branch_channels: vec![32, 64, 128],
            fusion_stages: 2,
            blocks_per_stage: 3,
            bottleneck_ratio: 4,
            shape_dim: 128,
            point_dim: 64,
            fusion_mode: FusionMode::Full,
            upsample: UpsampleMode::Trilinear,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::InvalidConfig(m.to_string()));
        if self.depth == 0 || self.depth > MAX_DEPTH {
            return bad("depth must be in 1..=16");
        }
        if self.branch_channels.is_empty() {
            return bad("at least one branch is required");
        }
        if self.branch_channels.len() as u32 > self.depth + 1 {
            return bad("more branches than octree levels");
        }
        if self.stem_channels == 0 || self.branch_channels.contains(&0) {
            return bad("channel counts must be positive");
        }
        if self.shape_dim == 0 || self.point_dim == 0 {
            return bad("feature dimensions must be positive");
        }
        if self.bottleneck_ratio == 0 {
            return bad("bottleneck ratio must be positive");
        }
        Ok(())
    }

    pub fn branches(&self) -> usize {
        self.branch_channels.len()
    }

    pub fn branch_level(&self, b: usize) -> u32 {
        self.depth - b as u32
    }

    fn fuses_at(&self, stage: usize) -> bool {
        match self.fusion_mode {
            FusionMode::Full => true,
            FusionMode::OneFusion => stage != 0,
            FusionMode::NoFusion | FusionMode::Unet => false,
        }
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("octree depth {got} does not match network depth {expected}")]
    DepthMismatch { expected: u32, got: u32 },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Convolution (3×3×3 or 1×1×1) followed by batch norm.
#[derive(Debug, Clone)]
struct ConvBn {
    w: ParamId,
    bn: BatchNormIds,
    wide: bool,
}

struct Init<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Init<'_, T> {
    fn he(&mut self, name: String, fan_in: usize, rows: usize, cols: usize) -> ParamId {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        let data: Vec<f64> = (0..rows * cols).map(|_| normal.sample(&mut self.rng)).collect();
        self.store.add(name, Tensor::from_f64(rows, cols, &data), ParamRole::Weight)
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, wide: bool) -> ConvBn {
        let taps = if wide { 27 } else { 1 };
        ConvBn {
            w: self.he(format!("{name}.w"), taps * cin, taps * cin, cout),
            bn: BatchNormIds::register(self.store, &format!("{name}.bn"), cout),
            wide,
        }
    }

    /// Head layer. The bias starts small but non-zero so that an all-zero
    /// input row (common after the last ReLU) still normalizes.
    fn fc(&mut self, name: &str, cin: usize, cout: usize) -> Fc {
        let w = self.he(format!("{name}.w"), cin, cin, cout);
        let normal = Normal::new(0.0, HEAD_BIAS_STD).expect("finite std");
        let bias: Vec<f64> = (0..cout).map(|_| normal.sample(&mut self.rng)).collect();
        Fc {
            w,
            b: self
                .store
                .add(format!("{name}.b"), Tensor::from_f64(1, cout, &bias), ParamRole::Bias),
        }
    }

    fn block(&mut self, name: &str, c: usize, ratio: usize) -> ResBlock {
        let mid = (c / ratio).max(1);
        ResBlock {
            reduce: self.conv_bn(&format!("{name}.reduce"), c, mid, false),
            conv: self.conv_bn(&format!("{name}.conv"), mid, mid, true),
            expand: self.conv_bn(&format!("{name}.expand"), mid, c, false),
        }
    }
}

#[derive(Debug, Clone)]
struct Fc {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct ResBlock {
    reduce: ConvBn,
    conv: ConvBn,
    expand: ConvBn,
}

#[derive(Debug, Clone)]
struct Fusion {
    /// `links[target][source]`; `None` on the diagonal.
    links: Vec<Vec<Option<ConvBn>>>,
}

#[derive(Debug, Clone)]
struct Stage {
    blocks: Vec<Vec<ResBlock>>,
    fusion: Option<Fusion>,
}

#[derive(Debug, Clone)]
struct UnetPlan {
    encoder_init: Vec<ConvBn>,
    encoder_blocks: Vec<Vec<ResBlock>>,
    /// Indexed by the target level `b`; the last entry is unused.
    decoder_up: Vec<Option<ConvBn>>,
    decoder_blocks: Vec<Vec<ResBlock>>,
}

#[derive(Debug, Clone)]
enum Body {
    Hr {
        branch_init: Vec<ConvBn>,
        stages: Vec<Stage>,
    },
    Unet(UnetPlan),
}

/// Parameter layout and forward plan, independent of scalar type.
#[derive(Debug, Clone)]
pub struct Architecture {
    config: NetConfig,
    stem: ConvBn,
    body: Body,
    shape_head: Fc,
    point_head: Fc,
}

/// Outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct Features {
    /// One unit row per shape.
    pub shape: Var,
    /// One unit row per point, shapes concatenated in batch order.
    pub point: Var,
    /// Final branch feature maps, finest first.
    pub branches: Vec<Var>,
    /// Concatenated per-shape averages of all branches (shape head input).
    pub pooled: Var,
}

impl Architecture {
    /// Registers every parameter in `store` with He-normal weights drawn from
    /// `seed`.
    pub fn build<T: Real>(config: &NetConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut init = Init {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let ch = &config.branch_channels;
        let nb = ch.len();
        let r = config.bottleneck_ratio;
        let stem = init.conv_bn("stem", INPUT_CHANNELS, config.stem_channels, true);
        let body = if config.fusion_mode == FusionMode::Unet {
            let mut plan = UnetPlan {
                encoder_init: Vec::new(),
                encoder_blocks: Vec::new(),
                decoder_up: Vec::new(),
                decoder_blocks: Vec::new(),
            };
            for b in 0..nb {
                let cin = if b == 0 { config.stem_channels } else { ch[b - 1] };
                plan.encoder_init.push(init.conv_bn(&format!("enc{b}.init"), cin, ch[b], false));
                plan.encoder_blocks.push(
                    (0..config.blocks_per_stage)
                        .map(|k| init.block(&format!("enc{b}.block{k}"), ch[b], r))
                        .collect(),
                );
            }
            for b in 0..nb {
                if b + 1 < nb {
                    plan.decoder_up
                        .push(Some(init.conv_bn(&format!("dec{b}.up"), ch[b + 1], ch[b], false)));
                    plan.decoder_blocks.push(
                        (0..config.blocks_per_stage)
                            .map(|k| init.block(&format!("dec{b}.block{k}"), ch[b], r))
                            .collect(),
                    );
                } else {
                    plan.decoder_up.push(None);
                    plan.decoder_blocks.push(Vec::new());
                }
            }
            Body::Unet(plan)
        } else {
            let branch_init = (0..nb)
                .map(|b| init.conv_bn(&format!("branch{b}.init"), config.stem_channels, ch[b], false))
                .collect();
            let mut stages = Vec::new();
            for s in 0..config.fusion_stages {
                let blocks = (0..nb)
                    .map(|b| {
                        (0..config.blocks_per_stage)
                            .map(|k| init.block(&format!("stage{s}.branch{b}.block{k}"), ch[b], r))
                            .collect()
                    })
                    .collect();
                let fusion = (config.fuses_at(s) && nb > 1).then(|| Fusion {
                    links: (0..nb)
                        .map(|t| {
                            (0..nb)
                                .map(|src| {
                                    (src != t).then(|| {
                                        init.conv_bn(&format!("stage{s}.fuse{src}to{t}"), ch[src], ch[t], false)
                                    })
                                })
                                .collect()
                        })
                        .collect(),
                });
                stages.push(Stage { blocks, fusion });
            }
            Body::Hr { branch_init, stages }
        };
        let pooled: usize = ch.iter().sum();
        let shape_head = init.fc("head.shape", pooled, config.shape_dim);
        let point_head = init.fc("head.point", ch[0], config.point_dim);
        Ok(Self {
            config: config.clone(),
            stem,
            body,
            shape_head,
            point_head,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// Parameters of the two output heads.
    pub fn head_params(&self) -> [ParamId; 4] {
        [self.shape_head.w, self.shape_head.b, self.point_head.w, self.point_head.b]
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        batch: &OctreeBatch,
        training: bool,
    ) -> Result<Features, NetError> {
        let cfg = &self.config;
        if batch.depth != cfg.depth {
            return Err(NetError::DepthMismatch {
                expected: cfg.depth,
                got: batch.depth,
            });
        }
        let d = cfg.depth;
        let mut ctx = Ctx { g, store, batch, training };
        let signal: Vec<f64> = batch.signal.iter().flatten().copied().collect();
        let x = ctx.g.constant(Tensor::from_f64(batch.signal.len(), INPUT_CHANNELS, &signal));
        let stem = ctx.conv_bn(&self.stem, x, d, true)?;

        let branches = match &self.body {
            Body::Hr { branch_init, stages } => {
                let mut feats = Vec::with_capacity(branch_init.len());
                let mut pooled = stem;
                for (b, init) in branch_init.iter().enumerate() {
                    if b > 0 {
                        pooled = ctx.g.octree_maxpool(pooled, batch, d - b as u32 + 1)?;
                    }
                    feats.push(ctx.conv_bn(init, pooled, d - b as u32, true)?);
                }
                for stage in stages {
                    for (b, blocks) in stage.blocks.iter().enumerate() {
                        for blk in blocks {
                            feats[b] = ctx.res_block(blk, feats[b], cfg.branch_level(b))?;
                        }
                    }
                    if let Some(f) = &stage.fusion {
                        feats = ctx.fuse(f, &feats, cfg)?;
                    }
                }
                feats
            }
            Body::Unet(plan) => {
                let mut enc = Vec::new();
                let mut h = stem;
                for b in 0..plan.encoder_init.len() {
                    let lvl = cfg.branch_level(b);
                    if b > 0 {
                        h = ctx.g.octree_maxpool(h, batch, lvl + 1)?;
                    }
                    h = ctx.conv_bn(&plan.encoder_init[b], h, lvl, true)?;
                    for blk in &plan.encoder_blocks[b] {
                        h = ctx.res_block(blk, h, lvl)?;
                    }
                    enc.push(h);
                }
                let nb = enc.len();
                let mut dec = enc.clone();
                for b in (0..nb.saturating_sub(1)).rev() {
                    let lvl = cfg.branch_level(b);
                    let up = plan.decoder_up[b].as_ref().expect("decoder link below the coarsest level");
                    let c = ctx.conv_bn(up, dec[b + 1], lvl - 1, false)?;
                    let c = ctx.g.octree_upsample(c, batch, lvl - 1, cfg.upsample)?;
                    let s = ctx.g.add(enc[b], c)?;
                    let mut h = ctx.g.relu(s);
                    for blk in &plan.decoder_blocks[b] {
                        h = ctx.res_block(blk, h, lvl)?;
                    }
                    dec[b] = h;
                }
                dec
            }
        };

        let mut pools = Vec::with_capacity(branches.len());
        for (b, &f) in branches.iter().enumerate() {
            pools.push(ctx.g.global_avg_pool(f, batch, cfg.branch_level(b))?);
        }
        let pooled = ctx.g.concat(&pools)?;
        let sw = ctx.g.param(ctx.store, self.shape_head.w);
        let sb = ctx.g.param(ctx.store, self.shape_head.b);
        let s = ctx.g.linear(pooled, sw, Some(sb))?;
        let shape = ctx.g.l2_normalize(s)?;

        let pw = ctx.g.param(ctx.store, self.point_head.w);
        let pb = ctx.g.param(ctx.store, self.point_head.b);
        let p = ctx.g.linear(branches[0], pw, Some(pb))?;
        let p = ctx.g.gather_rows(p, batch.point_rows.clone())?;
        let point = ctx.g.l2_normalize(p)?;
        Ok(Features {
            shape,
            point,
            branches,
            pooled,
        })
    }
}

struct Ctx<'a, T: Real> {
    g: &'a mut Graph<T>,
    store: &'a mut ParamStore<T>,
    batch: &'a OctreeBatch,
    training: bool,
}

impl<T: Real> Ctx<'_, T> {
    fn conv_bn(&mut self, c: &ConvBn, x: Var, level: u32, relu: bool) -> Result<Var, NetError> {
        let w = self.g.param(self.store, c.w);
        let y = if c.wide {
            self.g.octree_conv(x, w, None, self.batch, level)?
        } else {
            self.g.linear(x, w, None)?
        };
        let y = self.g.batch_norm(y, self.store, &c.bn, self.training)?;
        Ok(if relu { self.g.relu(y) } else { y })
    }

    fn res_block(&mut self, b: &ResBlock, x: Var, level: u32) -> Result<Var, NetError> {
        let h = self.conv_bn(&b.reduce, x, level, true)?;
        let h = self.conv_bn(&b.conv, h, level, true)?;
        let h = self.conv_bn(&b.expand, h, level, false)?;
        let s = self.g.add(x, h)?;
        Ok(self.g.relu(s))
    }

    fn fuse(&mut self, f: &Fusion, feats: &[Var], cfg: &NetConfig) -> Result<Vec<Var>, NetError> {
        let mut out = Vec::with_capacity(feats.len());
        for (t, links) in f.links.iter().enumerate() {
            let mut acc = feats[t];
            for (src, link) in links.iter().enumerate() {
                let Some(link) = link else { continue };
                let mut h = feats[src];
                let y = if src > t {
                    h = self.conv_bn(link, h, cfg.branch_level(src), false)?;
                    for lvl in cfg.branch_level(src)..cfg.branch_level(t) {
                        h = self.g.octree_upsample(h, self.batch, lvl, cfg.upsample)?;
                    }
                    h
                } else {
                    let mut lvl = cfg.branch_level(src);
                    while lvl > cfg.branch_level(t) {
                        h = self.g.octree_maxpool(h, self.batch, lvl)?;
                        lvl -= 1;
                    }
                    self.conv_bn(link, h, lvl, false)?
                };
                acc = self.g.add(acc, y)?;
            }
            out.push(self.g.relu(acc));
        }
        Ok(out)
    }
}

/// Architecture plus its parameters.
#[derive(Debug, Clone)]
pub struct Backbone<T: Real> {
    pub arch: Arc<Architecture>,
    pub store: ParamStore<T>,
}

impl<T: Real> Backbone<T> {
    pub fn new(config: &NetConfig, seed: u64) -> Result<Self, NetError> {
        let mut store = ParamStore::new();
        let arch = Architecture::build(config, &mut store, seed)?;
        Ok(Self {
            arch: Arc::new(arch),
            store,
        })
    }

    pub fn config(&self) -> &NetConfig {
        self.arch.config()
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn forward(&mut self, g: &mut Graph<T>, batch: &OctreeBatch, training: bool) -> Result<Features, NetError> {
        self.arch.forward(g, &mut self.store, batch, training)
    }

    /// Eval-mode features as plain tensors.
    pub fn embed(&mut self, batch: &OctreeBatch) -> Result<(Tensor<T>, Tensor<T>), NetError> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, batch, false)?;
        Ok((g.value(f.shape).clone(), g.value(f.point).clone()))
    }

    pub fn cast<U: Real>(&self) -> Backbone<U> {
        Backbone {
            arch: self.arch.clone(),
            store: self.store.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{network_check, pretrain_graph_check, random_octree, GradCheckOptions};
    use crate::octree::Octree;

    fn tiny(mode: FusionMode) -> NetConfig {
        NetConfig {
            depth: 3,
            stem_channels: 4,
            branch_channels: vec![4, 6],
            fusion_stages: 2,
            blocks_per_stage: 1,
            bottleneck_ratio: 2,
            shape_dim: 5,
            point_dim: 3,
            fusion_mode: mode,
            upsample: UpsampleMode::Trilinear,
        }
    }

    fn trees(n: usize, depth: u32) -> Vec<Octree> {
        (0..n).map(|i| random_octree(100 + i as u64, 100, depth)).collect()
    }

    fn norms_ok(t: &Tensor<f32>) -> bool {
        (0..t.rows()).all(|r| {
            let n: f32 = t.row(r).iter().map(|v| v * v).sum::<f32>().sqrt();
            (n - 1.0).abs() <= 1e-5
        })
    }

    #[test]
    fn default_config_fits_budget_and_has_expected_outputs() {
        let mut net = Backbone::<f32>::new(&NetConfig::default(), 1).unwrap();
        assert!(net.parameter_count() < 2_000_000, "{}", net.parameter_count());
        let ts = trees(2, 6);
        let batch = OctreeBatch::new(&ts.iter().collect::<Vec<_>>()).unwrap();
        let mut g = Graph::new();
        let f = net.forward(&mut g, &batch, true).unwrap();
        assert_eq!(g.value(f.shape).shape(), (2, 128));
        assert_eq!(g.value(f.point).shape(), (200, 64));
        assert!(norms_ok(g.value(f.shape)) && norms_ok(g.value(f.point)));
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let a = Backbone::<f32>::new(&NetConfig::default(), 9).unwrap();
        let b = Backbone::<f32>::new(&NetConfig::default(), 9).unwrap();
        let c = Backbone::<f32>::new(&NetConfig::default(), 10).unwrap();
        assert_eq!(a.store, b.store);
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn fusion_modes_change_the_parameter_set() {
        let names = |m| {
            Backbone::<f32>::new(&tiny(m), 0)
                .unwrap()
                .store
                .params()
                .iter()
                .map(|p| p.name.clone())
                .collect::<Vec<_>>()
        };
        let full = names(FusionMode::Full);
        let one = names(FusionMode::OneFusion);
        let none = names(FusionMode::NoFusion);
        assert!(full.iter().any(|n| n.starts_with("stage0.fuse")));
        assert!(!one.iter().any(|n| n.starts_with("stage0.fuse")));
        assert!(one.iter().any(|n| n.starts_with("stage1.fuse")));
        assert!(!none.iter().any(|n| n.contains("fuse")));
        assert!(names(FusionMode::Unet).iter().any(|n| n.starts_with("dec0.up")));
    }

    #[test]
    fn every_mode_runs_and_normalizes() {
        let ts = trees(2, 3);
        let batch = OctreeBatch::new(&ts.iter().collect::<Vec<_>>()).unwrap();
        for mode in [FusionMode::Full, FusionMode::OneFusion, FusionMode::NoFusion, FusionMode::Unet] {
            let mut net = Backbone::<f32>::new(&tiny(mode), 2).unwrap();
            let mut g = Graph::new();
            let f = net.forward(&mut g, &batch, true).unwrap();
            assert!(norms_ok(g.value(f.shape)) && norms_ok(g.value(f.point)), "{mode:?}");
            let (s, p) = net.embed(&batch).unwrap();
            assert!(norms_ok(&s) && norms_ok(&p));
        }
    }

    #[test]
    fn eval_forward_is_pure_and_permutation_equivariant() {
        let ts = trees(3, 4);
        let mut cfg = tiny(FusionMode::Full);
        cfg.depth = 4;
        cfg.branch_channels = vec![4, 6, 8];
        let mut net = Backbone::<f32>::new(&cfg, 3).unwrap();
        // Populate running statistics first.
        let fwd = OctreeBatch::new(&[&ts[0], &ts[1], &ts[2]]).unwrap();
        let mut g = Graph::new();
        net.forward(&mut g, &fwd, true).unwrap();
        let (a, _) = net.embed(&fwd).unwrap();
        let (a2, _) = net.embed(&fwd).unwrap();
        assert_eq!(a, a2);
        let rev = OctreeBatch::new(&[&ts[2], &ts[0], &ts[1]]).unwrap();
        let (b, _) = net.embed(&rev).unwrap();
        for (i, j) in [(0, 1), (1, 2), (2, 0)] {
            for (x, y) in a.row(i).iter().zip(b.row(j)) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn depth_mismatch_is_reported() {
        let ts = trees(1, 4);
        let batch = OctreeBatch::new(&[&ts[0]]).unwrap();
        let mut net = Backbone::<f32>::new(&tiny(FusionMode::Full), 0).unwrap();
        let mut g = Graph::new();
        assert!(matches!(
            net.forward(&mut g, &batch, true),
            Err(NetError::DepthMismatch { expected: 3, got: 4 })
        ));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = tiny(FusionMode::Full);
        c.branch_channels.clear();
        assert!(c.validate().is_err());
        let mut c = tiny(FusionMode::Full);
        c.depth = 1;
        c.branch_channels = vec![2, 2, 2];
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = tiny(FusionMode::OneFusion);
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<NetConfig>(&text).unwrap(), c);
        assert_eq!(c.hash(), tiny(FusionMode::OneFusion).hash());
        assert_ne!(c.hash(), tiny(FusionMode::Full).hash());
    }

    #[test]
    fn toy_network_gradients_match_finite_differences() {
        let r = network_check(&GradCheckOptions::default()).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn pretraining_graph_gradients_match_finite_differences() {
        let r = pretrain_graph_check(&GradCheckOptions::default()).unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
