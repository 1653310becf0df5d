//! Central finite-difference checks for the autodiff engine.
//!
//! Coordinates whose perturbation flips a ReLU mask or a max-pool winner are
//! skipped: the function is not differentiable across that step, so the
//! finite difference says nothing about the analytic gradient.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AutodiffError, Graph, NormStats, ParamId, ParamStore, Var};
use crate::batch::{OctreeBatch, UpsampleMode};
use crate::geometry::{PointCloud, Vec3};
use crate::octree::Octree;
use crate::midloss::{mid_loss, random_unit_rows, MidBanks, MidError, MidTargets};
use crate::network::{Backbone, FusionMode, NetConfig, NetError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Gradients below this magnitude are compared absolutely.
    pub abs_floor: f64,
    /// Coordinates sampled per tensor; smaller tensors are checked fully.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            max_coords: 40,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub seconds: f64,
    pub tolerance: f64,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn coords(len: usize, opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= opts.max_coords {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, opts.max_coords).into_vec();
        v.sort_unstable();
        v
    }
}

struct Probe {
    value: f64,
    signature: u64,
}

struct Tally {
    max_rel: f64,
    checked: usize,
    skipped: usize,
}

impl Tally {
    fn new() -> Self {
        Self {
            max_rel: 0.0,
            checked: 0,
            skipped: 0,
        }
    }

    fn record(&mut self, base: u64, plus: Probe, minus: Probe, analytic: f64, opts: &GradCheckOptions) {
        if plus.signature != base || minus.signature != base {
            self.skipped += 1;
            return;
        }
        let numeric = (plus.value - minus.value) / (2.0 * opts.step);
        self.max_rel = self.max_rel.max(relative_error(analytic, numeric, opts.abs_floor));
        self.checked += 1;
    }

    fn finish(self, name: &str, opts: &GradCheckOptions, started: Instant) -> GradCheckResult {
        GradCheckResult {
            name: name.to_string(),
            max_rel_error: self.max_rel,
            checked: self.checked,
            skipped: self.skipped,
            seconds: started.elapsed().as_secs_f64(),
            tolerance: opts.tolerance,
        }
    }
}

/// Checks the gradient of `f` with respect to every tensor in `inputs`.
pub fn check_inputs<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
    f: F,
) -> Result<GradCheckResult, AutodiffError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError>,
{
    let started = Instant::now();
    let eval = |xs: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var), AutodiffError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.variable(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok((g, vars, loss))
    };
    let (g, vars, loss) = eval(inputs)?;
    let grads = g.backward(loss)?;
    let base = g.activation_signature();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut tally = Tally::new();
    let mut xs = inputs.to_vec();
    for (t, &v) in vars.iter().enumerate() {
        let analytic = grads.of(v).cloned().unwrap_or_else(|| Tensor::zeros(xs[t].rows(), xs[t].cols()));
        for i in coords(xs[t].len(), opts, &mut rng) {
            let orig = xs[t].data()[i];
            let probe = |delta: f64, xs: &mut Vec<Tensor<f64>>| -> Result<Probe, AutodiffError> {
                xs[t].data_mut()[i] = orig + delta;
                let (g, _, l) = eval(xs)?;
                Ok(Probe {
                    value: g.value(l).item(),
                    signature: g.activation_signature(),
                })
            };
            let plus = probe(opts.step, &mut xs)?;
            let minus = probe(-opts.step, &mut xs)?;
            xs[t].data_mut()[i] = orig;
            tally.record(base, plus, minus, analytic.data()[i], opts);
        }
    }
    Ok(tally.finish(name, opts, started))
}

/// Checks the gradient of `f` with respect to the listed parameters. The
/// store is restored to its initial state afterwards.
pub fn check_params<F>(
    name: &str,
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    opts: &GradCheckOptions,
    mut f: F,
) -> Result<GradCheckResult, AutodiffError>
where
    F: FnMut(&mut Graph<f64>, &mut ParamStore<f64>) -> Result<Var, AutodiffError>,
{
    let started = Instant::now();
    let snapshot = store.clone();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    let base = g.activation_signature();
    drop(g);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut tally = Tally::new();
    let mut run = |store: &mut ParamStore<f64>| -> Result<Probe, AutodiffError> {
        let mut g = Graph::new();
        let l = f(&mut g, store)?;
        Ok(Probe {
            value: g.value(l).item(),
            signature: g.activation_signature(),
        })
    };
    for &id in ids {
        let len = store.value(id).len();
        let analytic = grads.param(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; len]);
        for i in coords(len, opts, &mut rng) {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + opts.step;
            let plus = run(store)?;
            store.value_mut(id).data_mut()[i] = orig - opts.step;
            let minus = run(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            tally.record(base, plus, minus, analytic[i], opts);
        }
    }
    *store = snapshot;
    Ok(tally.finish(name, opts, started))
}

pub(crate) fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect(),
    )
}

/// A random tree over roughly `points` points, with an input signal.
pub fn random_octree(seed: u64, points: usize, depth: u32) -> Octree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<Vec3> = (0..points)
        .map(|_| Vec3::from_fn(|_, _| rng.random_range(-0.95..0.95)))
        .collect();
    let normals: Vec<Vec3> = (0..points)
        .map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize())
        .collect();
    let cloud = PointCloud::with_normals(pts, normals).expect("matching lengths");
    Octree::with_signal(&cloud, depth).expect("points inside the cube")
}

/// A weighted reduction that keeps every output entry relevant to the loss.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, AutodiffError> {
    let (r, c) = g.value(y).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = g.constant(random_tensor(&mut rng, r, c, 1.0));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Per-op gradient checks over small random octrees.
pub fn op_suite(opts: &GradCheckOptions) -> Result<Vec<GradCheckResult>, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let tree = random_octree(opts.seed, 40, 3);
    let batch = Arc::new(OctreeBatch::new(&[&tree, &random_octree(opts.seed + 1, 25, 3)]).expect("same depth"));
    let d = batch.depth;
    let n_leaf = batch.level(d).len;
    let n_mid = batch.level(d - 1).len;
    let mut out = Vec::new();

    let x = random_tensor(&mut rng, n_leaf, 3, 1.0);
    let w = random_tensor(&mut rng, 27 * 3, 4, 0.5);
    let b = random_tensor(&mut rng, 1, 4, 0.5);
    let bt = batch.clone();
    out.push(check_inputs("octree_conv", &[x.clone(), w, b], opts, move |g, v| {
        let y = g.octree_conv(v[0], v[1], Some(v[2]), &bt, d)?;
        project(g, y, 1)
    })?);

    let bt = batch.clone();
    out.push(check_inputs("octree_maxpool", std::slice::from_ref(&x), opts, move |g, v| {
        let y = g.octree_maxpool(v[0], &bt, d)?;
        project(g, y, 2)
    })?);

    for (mode, name) in [
        (UpsampleMode::Nearest, "octree_upsample_nearest"),
        (UpsampleMode::Trilinear, "octree_upsample_trilinear"),
    ] {
        let xm = random_tensor(&mut rng, n_mid, 3, 1.0);
        let bt = batch.clone();
        out.push(check_inputs(name, &[xm], opts, move |g, v| {
            let y = g.octree_upsample(v[0], &bt, d - 1, mode)?;
            project(g, y, 3)
        })?);
    }

    let xl = random_tensor(&mut rng, 6, 5, 1.0);
    let wl = random_tensor(&mut rng, 5, 3, 1.0);
    let bl = random_tensor(&mut rng, 1, 3, 1.0);
    out.push(check_inputs("linear", &[xl.clone(), wl, bl], opts, |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]))?;
        project(g, y, 4)
    })?);

    out.push(check_inputs("relu", std::slice::from_ref(&xl), opts, |g, v| {
        let y = g.relu(v[0]);
        project(g, y, 5)
    })?);

    let gamma = random_tensor(&mut rng, 1, 5, 1.0);
    let beta = random_tensor(&mut rng, 1, 5, 1.0);
    out.push(check_inputs(
        "batchnorm_train",
        &[xl.clone(), gamma.clone(), beta.clone()],
        opts,
        |g, v| {
            let y = g.batch_norm_with(v[0], v[1], v[2], NormStats::Train { running: None })?;
            project(g, y, 6)
        },
    )?);
    let rm = random_tensor(&mut rng, 1, 5, 0.5);
    let rv = Tensor::from_vec(1, 5, (0..5).map(|i| 0.5 + 0.3 * i as f64).collect());
    out.push(check_inputs("batchnorm_eval", &[xl.clone(), gamma, beta], opts, move |g, v| {
        let y = g.batch_norm_with(v[0], v[1], v[2], NormStats::Eval { mean: &rm, var: &rv })?;
        project(g, y, 7)
    })?);

    let bt = batch.clone();
    out.push(check_inputs("global_avg_pool", std::slice::from_ref(&x), opts, move |g, v| {
        let y = g.global_avg_pool(v[0], &bt, d)?;
        project(g, y, 8)
    })?);

    out.push(check_inputs("l2_normalize", std::slice::from_ref(&xl), opts, |g, v| {
        let y = g.l2_normalize(v[0])?;
        project(g, y, 9)
    })?);

    let xl2 = random_tensor(&mut rng, 6, 5, 1.0);
    out.push(check_inputs("add_mul", &[xl.clone(), xl2.clone()], opts, |g, v| {
        let s = g.add(v[0], v[1])?;
        let m = g.mul(s, v[1])?;
        let y = g.scale(m, 0.7);
        project(g, y, 10)
    })?);

    let xc = random_tensor(&mut rng, 6, 2, 1.0);
    out.push(check_inputs("concat", &[xl.clone(), xc], opts, |g, v| {
        let y = g.concat(&[v[0], v[1]])?;
        project(g, y, 11)
    })?);

    let index = Arc::new(vec![3u32, 0, 3, 5, 1]);
    out.push(check_inputs("gather_rows", std::slice::from_ref(&xl), opts, move |g, v| {
        let y = g.gather_rows(v[0], index.clone())?;
        project(g, y, 12)
    })?);

    let bank = Arc::new(random_tensor(&mut rng, 7, 5, 1.0));
    let targets = vec![0u32, 6, 2, 2, 4, 1];
    let weights = vec![0.5, 1.0, 0.25, 0.25, 2.0, 1.0];
    out.push(check_inputs("bank_softmax_xent", std::slice::from_ref(&xl), opts, move |g, v| {
        let logits = g.matmul_const_nt(v[0], bank.clone())?;
        let logits = g.scale(logits, 1.0 / 0.1);
        g.softmax_cross_entropy(logits, &targets, &weights)
    })?);

    let mats: Vec<Arc<Tensor<f64>>> = (0..2).map(|_| Arc::new(random_tensor(&mut rng, 4, 5, 1.0))).collect();
    out.push(check_inputs("segment_bank_xent", &[xl], opts, move |g, v| {
        let logits = g.segment_matmul_const_nt(v[0], vec![0, 2, 6], mats.clone())?;
        g.softmax_cross_entropy(logits, &[0, 3, 1, 1, 2, 0], &[1.0; 6])
    })?);

    Ok(out)
}

fn net_error(e: NetError) -> AutodiffError {
    match e {
        NetError::Autodiff(a) => a,
        other => AutodiffError::ShapeMismatch {
            op: "gradcheck",
            detail: other.to_string(),
        },
    }
}

fn mid_error(e: MidError) -> AutodiffError {
    match e {
        MidError::Autodiff(a) => a,
        other => AutodiffError::ShapeMismatch {
            op: "gradcheck",
            detail: other.to_string(),
        },
    }
}

fn toy_config() -> NetConfig {
    NetConfig {
        depth: 2,
        stem_channels: 4,
        branch_channels: vec![4, 6],
        fusion_stages: 1,
        blocks_per_stage: 1,
        bottleneck_ratio: 2,
        shape_dim: 5,
        point_dim: 3,
        fusion_mode: FusionMode::Full,
        upsample: UpsampleMode::Trilinear,
    }
}

/// Every parameter of a small two-branch network, through both heads.
pub fn network_check(opts: &GradCheckOptions) -> Result<GradCheckResult, AutodiffError> {
    let ts = [random_octree(opts.seed + 1, 30, 2), random_octree(opts.seed + 2, 20, 2)];
    let batch = OctreeBatch::new(&[&ts[0], &ts[1]]).expect("same depth");
    let mut net = Backbone::<f64>::new(&toy_config(), opts.seed).map_err(net_error)?;
    let arch = net.arch.clone();
    let ids: Vec<ParamId> = net.store.ids().collect();
    let opts = GradCheckOptions {
        max_coords: opts.max_coords.min(4),
        ..*opts
    };
    check_params("network", &mut net.store, &ids, &opts, |g, store| {
        let f = arch.forward(g, store, &batch, true).map_err(net_error)?;
        let wp = g.constant(Tensor::from_vec(3, 1, vec![0.4, -0.8, 1.1]));
        let ws = g.constant(Tensor::from_vec(5, 1, vec![0.3, -1.0, 0.5, 0.2, 0.7]));
        let p = g.linear(f.point, wp, None)?;
        let s = g.linear(f.shape, ws, None)?;
        let (p, s) = (g.sum(p), g.sum(s));
        g.add(p, s)
    })
}

/// The combined shape and patch loss on normalized random features.
pub fn mid_loss_check(opts: &GradCheckOptions) -> Result<GradCheckResult, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let banks = MidBanks::<f64>::new(6, 4, 5, 3, opts.seed + 8);
    let s = random_unit_rows::<f64>(2, 5, &mut rng);
    let p = random_tensor(&mut rng, 7, 3, 1.0);
    let t = MidTargets {
        shape_index: vec![5, 2],
        point_offsets: vec![0, 3, 7],
        patch_labels: vec![0, 3, 3, 1, 2, 0, 1],
    };
    check_inputs("mid_loss", &[s, p], opts, |g, v| {
        let s = g.l2_normalize(v[0])?;
        let p = g.l2_normalize(v[1])?;
        mid_loss(g, s, p, &banks, &t).map(|l| l.total).map_err(mid_error)
    })
}

/// Network parameters through the full pretraining loss.
pub fn pretrain_graph_check(opts: &GradCheckOptions) -> Result<GradCheckResult, AutodiffError> {
    let ts = [random_octree(opts.seed + 3, 24, 2), random_octree(opts.seed + 4, 18, 2)];
    let batch = OctreeBatch::new(&[&ts[0], &ts[1]]).expect("same depth");
    let cfg = toy_config();
    let mut net = Backbone::<f64>::new(&cfg, opts.seed + 1).map_err(net_error)?;
    let arch = net.arch.clone();
    let ids: Vec<ParamId> = net.store.ids().collect();
    let banks = MidBanks::<f64>::new(4, 3, cfg.shape_dim, cfg.point_dim, opts.seed + 9);
    let rows = *batch.point_offsets.last().expect("offsets");
    let t = MidTargets {
        shape_index: vec![3, 1],
        point_offsets: batch.point_offsets.clone(),
        patch_labels: (0..rows).map(|i| (i % 3) as u32).collect(),
    };
    let opts = GradCheckOptions {
        max_coords: opts.max_coords.min(4),
        ..*opts
    };
    check_params("pretrain_graph", &mut net.store, &ids, &opts, |g, store| {
        let f = arch.forward(g, store, &batch, true).map_err(net_error)?;
        mid_loss(g, f.shape, f.point, &banks, &t).map(|l| l.total).map_err(mid_error)
    })
}

/// Per-op checks followed by the network and loss graphs.
pub fn full_suite(opts: &GradCheckOptions) -> Result<Vec<GradCheckResult>, AutodiffError> {
    let mut out = op_suite(opts)?;
    out.push(network_check(opts)?);
    out.push(mid_loss_check(opts)?);
    out.push(pretrain_graph_check(opts)?);
    Ok(out)
}
