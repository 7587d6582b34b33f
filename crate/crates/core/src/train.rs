//! Training: one step alternates a discriminator update and a generator plus
//! mapping-network update; `train` drives the steps and owns the run directory.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Container, RawTensor};
use crate::compose::{alpha_blend_graph, alpha_blend_per_sample_graph, sample_alpha};
use crate::config::{OptimConfig, RunConfig, TrainConfig, RESOLVED_CONFIG_FILE};
use crate::data::{load_labeled_split, DatasetManifest, LabeledImage, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate_psnr, write_sample_panel};
use crate::graph::{Gradients, Graph, Var};
use crate::losses::{
    balance_loss, d_adv_loss, dis_rec_loss, g_adv_loss, grad_rec_loss, r1_penalty, rec_loss, sparse_loss,
    sqr_loss, total_loss, LossParts, LossReport,
};
use crate::metrics::cap_psnr;
use crate::model::{init_models, Binding, Group, ModelSet, NetConfig};
use crate::tensor::{cast, DType, Element, Tensor};

pub const METRICS_FILE: &str = "metrics.csv";

/// Adam moments for the parameters of some groups.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Element> {
    ids: Vec<usize>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new(models: &ModelSet<T>, groups: &[Group]) -> Self {
        let p = models.params();
        let ids: Vec<usize> = (0..p.len()).filter(|&i| groups.contains(&p.group(i))).collect();
        let zeros = |i: &usize| Tensor::zeros(p.tensor(*i).shape());
        Self {
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            ids,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. Parameters without a gradient are treated as having a zero gradient.
    pub fn update(
        &mut self,
        models: &mut ModelSet<T>,
        grads: &Gradients<T>,
        binding: &Binding,
        cfg: &OptimConfig,
        lr_of: impl Fn(Group) -> f64,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1: T = cast(1.0 - b1.powi(t));
        let bc2: T = cast(1.0 - b2.powi(t));
        let (b1t, b2t, eps): (T, T, T) = (cast(b1), cast(b2), cast(cfg.eps));
        let (ob1, ob2) = (T::one() - b1t, T::one() - b2t);
        for (k, &id) in self.ids.iter().enumerate() {
            let lr: T = cast(lr_of(models.params().group(id)));
            let grad = binding.get(id).and_then(|v| grads.get(v));
            let params = models.params_mut().tensor_mut(id).data_mut();
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for j in 0..params.len() {
                let gj = grad.map_or(T::zero(), |gt| gt.data()[j]);
                m[j] = b1t * m[j] + ob1 * gj;
                v[j] = b2t * v[j] + ob2 * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                params[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    fn to_raw(&self, models: &ModelSet<T>, prefix: &str) -> Vec<RawTensor> {
        let mut out = Vec::with_capacity(2 * self.ids.len());
        for (k, &id) in self.ids.iter().enumerate() {
            let name = models.params().name(id);
            out.push(RawTensor::from_tensor(format!("{prefix}.m.{name}"), &self.m[k]));
            out.push(RawTensor::from_tensor(format!("{prefix}.v.{name}"), &self.v[k]));
        }
        out
    }

    fn load_raw(&mut self, models: &ModelSet<T>, prefix: &str, table: &[RawTensor], step: u64) -> Result<()> {
        for (k, &id) in self.ids.iter().enumerate() {
            let name = models.params().name(id);
            for (which, slot) in [("m", &mut self.m[k]), ("v", &mut self.v[k])] {
                let key = format!("{prefix}.{which}.{name}");
                let raw = table
                    .iter()
                    .find(|r| r.name == key)
                    .ok_or_else(|| Error::ConfigMismatch(format!("checkpoint lacks optimizer tensor {key}")))?;
                let t = raw.to_tensor::<T>()?;
                if t.shape() != slot.shape() {
                    return Err(Error::ConfigMismatch(format!("optimizer tensor {key} has shape {:?}", t.shape())));
                }
                *slot = t;
            }
        }
        self.step = step;
        Ok(())
    }
}

/// Position of the training random stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::ConfigMismatch("malformed random state in checkpoint".into());
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad())?
            .try_into()
            .map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub dtype: DType,
    pub net: NetConfig,
    pub train: Option<TrainConfig>,
    pub iteration: u64,
    pub rng: RngState,
    pub opt_gen_step: u64,
    pub opt_disc_step: u64,
    pub best_psnr: Option<f64>,
}

/// Model set, optimiser moments, step counter and random stream.
#[derive(Debug, Clone)]
pub struct TrainState<T: Element> {
    pub models: ModelSet<T>,
    pub opt_gen: AdamState<T>,
    pub opt_disc: AdamState<T>,
    pub iteration: u64,
    pub best_psnr: Option<f64>,
    rng: ChaCha8Rng,
}

impl<T: Element> TrainState<T> {
    pub fn new(net: &NetConfig, seed: u64) -> Result<Self> {
        let models = init_models(net, seed)?;
        Ok(Self {
            opt_gen: AdamState::new(&models, &[Group::Generator, Group::Mapping]),
            opt_disc: AdamState::new(&models, &[Group::Discriminator]),
            models,
            iteration: 0,
            best_psnr: None,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A_0F0F_F0F0),
        })
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn to_container(&self, train: Option<&TrainConfig>) -> Container<CheckpointMeta> {
        let model = self
            .models
            .params()
            .iter()
            .map(|(name, t)| RawTensor::from_tensor(name, t))
            .collect();
        let mut optimizer = self.opt_gen.to_raw(&self.models, "adam.gen");
        optimizer.extend(self.opt_disc.to_raw(&self.models, "adam.disc"));
        Container {
            meta: CheckpointMeta {
                dtype: T::DTYPE,
                net: self.models.config().clone(),
                train: train.cloned(),
                iteration: self.iteration,
                rng: RngState::capture(&self.rng),
                opt_gen_step: self.opt_gen.step,
                opt_disc_step: self.opt_disc.step,
                best_psnr: self.best_psnr.map(cap_psnr),
            },
            model,
            optimizer,
        }
    }

    pub fn save(&self, path: &Path, train: Option<&TrainConfig>) -> Result<()> {
        self.to_container(train).save(path)
    }

    /// Rebuilds a state from a container. With `expected`, the stored network
    /// configuration must match it exactly.
    pub fn from_container(c: &Container<CheckpointMeta>, expected: Option<&NetConfig>) -> Result<Self> {
        if let Some(exp) = expected {
            if exp != &c.meta.net {
                return Err(Error::ConfigMismatch(describe_net_mismatch(&c.meta.net, exp)));
            }
        }
        let mut models = init_models::<T>(&c.meta.net, 0)?;
        let named = c
            .model
            .iter()
            .map(|r| Ok((r.name.clone(), r.to_tensor::<T>()?)))
            .collect::<Result<Vec<_>>>()?;
        models.load_params(named)?;
        let mut opt_gen = AdamState::new(&models, &[Group::Generator, Group::Mapping]);
        opt_gen.load_raw(&models, "adam.gen", &c.optimizer, c.meta.opt_gen_step)?;
        let mut opt_disc = AdamState::new(&models, &[Group::Discriminator]);
        opt_disc.load_raw(&models, "adam.disc", &c.optimizer, c.meta.opt_disc_step)?;
        Ok(Self {
            models,
            opt_gen,
            opt_disc,
            iteration: c.meta.iteration,
            best_psnr: c.meta.best_psnr,
            rng: c.meta.rng.restore()?,
        })
    }

    pub fn load(path: &Path, expected: Option<&NetConfig>) -> Result<(Self, CheckpointMeta)> {
        let c = Container::<CheckpointMeta>::load(path)?;
        Ok((Self::from_container(&c, expected)?, c.meta))
    }
}

fn describe_net_mismatch(found: &NetConfig, expected: &NetConfig) -> String {
    let (f, e) = (
        serde_json::to_value(found).unwrap(),
        serde_json::to_value(expected).unwrap(),
    );
    let diffs: Vec<String> = e
        .as_object()
        .unwrap()
        .iter()
        .filter(|(k, v)| f.get(k.as_str()) != Some(v))
        .map(|(k, v)| format!("{k}: checkpoint {} vs run {v}", f[k.as_str()]))
        .collect();
    format!("checkpoint network does not match this run ({})", diffs.join(", "))
}

fn latents<T: Element>(rng: &mut ChaCha8Rng, n: usize, dim: usize, zero: bool) -> Tensor<T> {
    if zero {
        return Tensor::zeros(&[n, dim]);
    }
    Tensor::from_fn(&[n, dim], |_| {
        let v: f64 = StandardNormal.sample(rng);
        T::from_f64(v)
    })
}

fn grad_norm<T: Element>(models: &ModelSet<T>, grads: &Gradients<T>, b: &Binding, group: Group) -> f64 {
    models
        .params()
        .ids_in(group)
        .filter_map(|id| b.get(id).and_then(|v| grads.get(v)))
        .map(|g| g.data().iter().map(|x| x.as_f64().powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Intermediate values of one step, exposed for tests.
#[derive(Debug, Clone)]
pub struct StepTrace<T: Element> {
    pub fake0: Tensor<T>,
    pub fake1: Tensor<T>,
    pub alpha: Vec<f64>,
    pub disc_checksum_after_d: String,
    pub gen_checksum_after_d: String,
}

/// One full step on a batch x (B, C, H, W) with class labels y.
pub fn train_step<T: Element>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    x: &Tensor<T>,
    y: &[usize],
) -> Result<LossReport> {
    train_step_traced(state, cfg, x, y).map(|(r, _)| r)
}

pub fn train_step_traced<T: Element>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    x: &Tensor<T>,
    y: &[usize],
) -> Result<(LossReport, StepTrace<T>)> {
    let bsz = x.shape()[0];
    if y.len() != bsz {
        return Err(Error::shape(format!("{} labels for a batch of {bsz}", y.len())));
    }
    let opts = &cfg.train;
    let net = state.models.config().clone();
    let iteration = state.iteration;

    // styles and blend weights
    let z0 = latents::<T>(&mut state.rng, bsz, net.latent_dim, opts.deterministic_style);
    let z1 = latents::<T>(&mut state.rng, bsz, net.latent_dim, opts.deterministic_style);
    let alphas: Vec<Vec<f64>> = if opts.per_sample_alpha {
        (0..bsz)
            .map(|_| sample_alpha(net.num_branches, iteration, &mut state.rng).alpha)
            .collect()
    } else {
        vec![sample_alpha(net.num_branches, iteration, &mut state.rng).alpha]
    };

    // generation graph (generator and mapping parameters trainable)
    let mut ga = Graph::<T>::new();
    let mut ba = Binding::new(&state.models);
    ba.bind(&mut ga, &state.models, Group::Generator, true);
    ba.bind(&mut ga, &state.models, Group::Mapping, true);
    let xv = ga.constant(x.clone());
    let zv0 = ga.constant(z0);
    let zv1 = ga.constant(z1);
    let s0 = state.models.style_graph(&mut ga, &ba, zv0, &vec![0; bsz]);
    let s1 = state.models.style_graph(&mut ga, &ba, zv1, &vec![1; bsz]);
    let enc = state.models.encode_graph(&mut ga, &ba, xv);
    let p0 = state.models.decode_graph(&mut ga, &ba, &enc, s0);
    let p1 = state.models.decode_graph(&mut ga, &ba, &enc, s1);
    let (xh0, xh1) = if opts.per_sample_alpha {
        alpha_blend_per_sample_graph(&mut ga, &p0, &p1, &alphas)
    } else {
        alpha_blend_graph(&mut ga, &p0, &p1, &alphas[0])
    };
    let fake0 = ga.value(xh0).clone();
    let fake1 = ga.value(xh1).clone();
    if !fake0.all_finite() || !fake1.all_finite() {
        return Err(Error::NonFinite(format!("generated images at iteration {iteration}")));
    }

    // discriminator update
    let zeros = vec![0usize; bsz];
    let ones = vec![1usize; bsz];
    let (d_adv, r1) = discriminator_step(state, cfg, x, y, &fake0, &fake1)?;
    let disc_checksum_after_d = state.models.params().checksum(&[Group::Discriminator]);
    let gen_checksum_after_d = state.models.params().checksum(&[Group::Generator, Group::Mapping]);

    // generator + mapping update against the freshly updated, frozen discriminator
    ba.bind(&mut ga, &state.models, Group::Discriminator, false);
    let red = opts.reduction;
    let same_x = ga.select_rows(&[xh0, xh1], y);
    let same: Vec<Var> = p0.iter().zip(&p1).map(|(&a, &b)| ga.select_rows(&[a, b], y)).collect();
    let rec = rec_loss(&mut ga, xv, same_x, red);
    let grad_rec = grad_rec_loss(&mut ga, xv, same_x, red);
    let dis_rec = dis_rec_loss(&mut ga, xv, same_x, same[0], red);
    let mut sqr = sqr_loss(&mut ga, &same);
    let mut bal = balance_loss(&mut ga, &same);
    if opts.sqr_on_transfer {
        let other: Vec<usize> = y.iter().map(|&c| 1 - c).collect();
        let transfer: Vec<Var> = p0.iter().zip(&p1).map(|(&a, &b)| ga.select_rows(&[a, b], &other)).collect();
        let sqr_t = sqr_loss(&mut ga, &transfer);
        let bal_t = balance_loss(&mut ga, &transfer);
        let (s, b) = (ga.add(sqr, sqr_t), ga.add(bal, bal_t));
        sqr = ga.scale(s, cast(0.5));
        bal = ga.scale(b, cast(0.5));
    }
    let sp0 = sparse_loss(&mut ga, p0[0]);
    let sp1 = sparse_loss(&mut ga, p1[0]);
    let sp = ga.add(sp0, sp1);
    let sparse = ga.scale(sp, cast(0.5));
    let l0 = state.models.discriminate_graph(&mut ga, &ba, xh0, &zeros);
    let l1 = state.models.discriminate_graph(&mut ga, &ba, xh1, &ones);
    let adv = g_adv_loss(&mut ga, l0, l1);
    let parts = LossParts {
        rec,
        grad_rec,
        dis_rec,
        sqr,
        bal,
        sparse,
        adv,
    };
    let (total, mut report) = total_loss(&mut ga, &cfg.loss, &parts, iteration + 1)?;
    report.d_adv = d_adv;
    report.r1 = r1;
    let grads = ga.backward(total);
    let gnorm_g = grad_norm(&state.models, &grads, &ba, Group::Generator);
    let gnorm_m = grad_norm(&state.models, &grads, &ba, Group::Mapping);
    if !gnorm_g.is_finite() || !gnorm_m.is_finite() {
        return Err(Error::NonFinite(format!(
            "iteration {}: gradient norms generator {gnorm_g}, mapping {gnorm_m}; terms {:?}",
            iteration + 1,
            report.named_terms()
        )));
    }
    let optim = cfg.optim.clone();
    state.opt_gen.update(&mut state.models, &grads, &ba, &optim, |g| match g {
        Group::Mapping => optim.lr_map,
        _ => optim.lr_gen,
    });
    if !state.models.params().all_finite() {
        return Err(Error::NonFinite(format!("parameters after iteration {}", iteration + 1)));
    }
    state.iteration += 1;
    Ok((
        report,
        StepTrace {
            fake0,
            fake1,
            alpha: alphas[0].clone(),
            disc_checksum_after_d,
            gen_checksum_after_d,
        },
    ))
}

/// Discriminator update on real x (heads y) and detached fakes (heads 0 and 1).
/// Returns the adversarial loss and the R1 penalty (0 when skipped this step).
pub fn discriminator_step<T: Element>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    x: &Tensor<T>,
    y: &[usize],
    fake0: &Tensor<T>,
    fake1: &Tensor<T>,
) -> Result<(f64, f64)> {
    let bsz = x.shape()[0];
    let iteration = state.iteration;
    let mut g = Graph::<T>::new();
    let mut b = Binding::new(&state.models);
    b.bind(&mut g, &state.models, Group::Discriminator, true);
    let lazy = cfg.loss.r1 > 0.0 && iteration.is_multiple_of(cfg.train.r1_every);
    let (r1, real) = if lazy {
        let (r1, real) = r1_penalty(&mut g, &state.models, &b, x, y)?;
        (Some(r1), real)
    } else {
        let xv = g.constant(x.clone());
        (None, state.models.discriminate_graph(&mut g, &b, xv, y))
    };
    let f0 = g.constant(fake0.clone());
    let f1 = g.constant(fake1.clone());
    let l0 = state.models.discriminate_graph(&mut g, &b, f0, &vec![0; bsz]);
    let l1 = state.models.discriminate_graph(&mut g, &b, f1, &vec![1; bsz]);
    let adv = d_adv_loss(&mut g, real, l0, l1);
    let mut total = adv;
    let mut r1_value = 0.0;
    if let Some(r1) = r1 {
        r1_value = g.scalar(r1).as_f64();
        let scaled = g.scale(r1, cast(cfg.loss.r1 * cfg.train.r1_every as f64));
        total = g.add(total, scaled);
    }
    let adv_value = g.scalar(adv).as_f64();
    if !adv_value.is_finite() || !r1_value.is_finite() {
        return Err(Error::NonFinite(format!(
            "discriminator at iteration {}: adversarial loss {adv_value}, r1 {r1_value}",
            iteration + 1
        )));
    }
    let grads = g.backward(total);
    let norm = grad_norm(&state.models, &grads, &b, Group::Discriminator);
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!(
            "discriminator gradient norm {norm} at iteration {}",
            iteration + 1
        )));
    }
    let lr = cfg.optim.lr_disc;
    state.opt_disc.update(&mut state.models, &grads, &b, &cfg.optim, |_| lr);
    Ok((adv_value, r1_value))
}

/// Draws a batch (with replacement) from the training set.
pub fn sample_batch<T: Element>(rng: &mut ChaCha8Rng, data: &[LabeledImage<T>], size: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..data.len())).collect();
    let imgs: Vec<Tensor<T>> = idx.iter().map(|&i| data[i].image.clone()).collect();
    let labels = idx.iter().map(|&i| data[i].label as usize).collect();
    Ok((Tensor::stack(&imgs)?, labels))
}

#[derive(Debug, Serialize, Deserialize)]
struct MetricsRow {
    iteration: u64,
    rec: f64,
    grad_rec: f64,
    dis_rec: f64,
    sqr: f64,
    bal: f64,
    sparse: f64,
    adv: f64,
    total: f64,
    d_adv: f64,
    r1: f64,
    test_psnr: Option<f64>,
}

impl MetricsRow {
    fn new(r: &LossReport, test_psnr: Option<f64>) -> Self {
        Self {
            iteration: r.iteration,
            rec: r.rec,
            grad_rec: r.grad_rec,
            dis_rec: r.dis_rec,
            sqr: r.sqr,
            bal: r.bal,
            sparse: r.sparse,
            adv: r.adv,
            total: r.total,
            d_adv: r.d_adv,
            r1: r.r1,
            test_psnr,
        }
    }
}

/// Rows of a metrics CSV as loss reports plus the optional test PSNR column.
pub fn read_metrics(path: &Path) -> Result<Vec<(LossReport, Option<f64>)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    rdr.deserialize::<MetricsRow>()
        .map(|row| {
            let r = row.map_err(|e| Error::format(path, e.to_string()))?;
            Ok((
                LossReport {
                    iteration: r.iteration,
                    rec: r.rec,
                    grad_rec: r.grad_rec,
                    dis_rec: r.dis_rec,
                    sqr: r.sqr,
                    bal: r.bal,
                    sparse: r.sparse,
                    adv: r.adv,
                    total: r.total,
                    d_adv: r.d_adv,
                    r1: r.r1,
                },
                r.test_psnr,
            ))
        })
        .collect()
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn checkpoint_path(run_dir: &Path, iteration: u64) -> PathBuf {
    run_dir.join(format!("ckpt_{iteration:06}.bin"))
}

/// Latest `ckpt_*.bin` in a run directory.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    let entries = fs::read_dir(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let mut best: Option<(u64, PathBuf)> = None;
    for e in entries {
        let p = e.map_err(|e| Error::io(run_dir, e))?.path();
        let stem = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(num) = stem.strip_prefix("ckpt_").and_then(|s| s.strip_suffix(".bin")) {
            if let Ok(it) = num.parse::<u64>() {
                if best.as_ref().is_none_or(|(b, _)| it > *b) {
                    best = Some((it, p));
                }
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

#[derive(Debug, Clone, Default)]
pub struct TrainRunOptions {
    /// Continue from this checkpoint instead of initialising.
    pub resume: Option<PathBuf>,
    /// Stop after this many completed steps (defaults to the configured total).
    pub stop_at: Option<u64>,
    /// Print progress through the `log` crate.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Element> {
    pub state: TrainState<T>,
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub last_report: Option<LossReport>,
    pub last_test_psnr: Option<f64>,
}

/// Full training run into `run_dir`.
pub fn train<T: Element>(run: &RunConfig, run_dir: &Path, opts: &TrainRunOptions) -> Result<TrainOutcome<T>> {
    let cfg = run.train_config()?;
    let manifest = DatasetManifest::load(&cfg.data_root)?;
    if manifest.convention != cfg.convention {
        return Err(Error::ConfigMismatch(format!(
            "dataset at {} uses {:?}, run asks for {:?}",
            cfg.data_root.display(),
            manifest.convention,
            cfg.convention
        )));
    }
    if manifest.params.image_size != cfg.net.image_size {
        return Err(Error::ConfigMismatch(format!(
            "dataset images are {0}x{0}, network expects {1}x{1}",
            manifest.params.image_size, cfg.net.image_size
        )));
    }
    let train_set: Vec<LabeledImage<T>> = load_labeled_split(&cfg.data_root, Split::Train)?;
    let mut test_set: Vec<LabeledImage<T>> = load_labeled_split(&cfg.data_root, Split::Test)?;
    if cfg.train.eval_images > 0 && test_set.len() > cfg.train.eval_images {
        test_set.truncate(cfg.train.eval_images);
    }

    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let resolved = run_dir.join(RESOLVED_CONFIG_FILE);
    fs::write(&resolved, run.to_toml()?).map_err(|e| Error::io(&resolved, e))?;
    let metrics_path = run_dir.join(METRICS_FILE);

    let (mut state, mut rows) = match &opts.resume {
        Some(path) => {
            let (state, _) = TrainState::<T>::load(path, Some(&cfg.net))?;
            let kept = if metrics_path.exists() {
                read_metrics(&metrics_path)?
                    .into_iter()
                    .filter(|(r, _)| r.iteration <= state.iteration)
                    .map(|(r, p)| MetricsRow::new(&r, p))
                    .collect()
            } else {
                Vec::new()
            };
            (state, kept)
        }
        None => (TrainState::<T>::new(&cfg.net, cfg.train.seed)?, Vec::new()),
    };
    write_metrics(&metrics_path, &rows)?;

    let total = opts.stop_at.unwrap_or(cfg.train.total_iters).min(cfg.train.total_iters);
    let mut final_checkpoint = checkpoint_path(run_dir, state.iteration);
    if opts.resume.is_none() {
        state.save(&final_checkpoint, Some(&cfg))?;
    }
    let mut last_report = None;
    let mut last_test_psnr = None;
    while state.iteration < total {
        let (x, y) = sample_batch(&mut state.rng, &train_set, cfg.train.batch_size)?;
        let report = train_step(&mut state, &cfg, &x, &y)?;
        let it = state.iteration;
        let mut test_psnr = None;
        if cfg.train.eval_every > 0 && (it % cfg.train.eval_every == 0 || it == total) && !test_set.is_empty() {
            let values = evaluate_psnr(&state.models, &test_set, cfg.eval_style_seed, cfg.train.deterministic_style)?;
            let mean = values.iter().map(|&v| cap_psnr(v)).sum::<f64>() / values.len() as f64;
            state.best_psnr = Some(state.best_psnr.map_or(mean, |b: f64| b.max(mean)));
            test_psnr = Some(mean);
            last_test_psnr = Some(mean);
        }
        if it % cfg.train.log_every == 0 || test_psnr.is_some() || it == total {
            rows.push(MetricsRow::new(&report, test_psnr));
            write_metrics(&metrics_path, &rows)?;
            if opts.verbose {
                log::info!(
                    "iter {it}: total {:.5} rec {:.5} adv {:.4} d {:.4}{}",
                    report.total,
                    report.rec,
                    report.adv,
                    report.d_adv,
                    test_psnr.map(|p| format!(" test psnr {p:.2} dB")).unwrap_or_default()
                );
            }
        }
        if it % cfg.train.sample_every == 0 && !test_set.is_empty() {
            let path = run_dir.join("samples").join(format!("iter_{it:06}.png"));
            write_sample_panel(&state.models, &test_set[0], cfg.eval_style_seed, cfg.train.deterministic_style, &path)?;
        }
        if it % cfg.train.checkpoint_every == 0 || it == total {
            final_checkpoint = checkpoint_path(run_dir, it);
            state.save(&final_checkpoint, Some(&cfg))?;
        }
        last_report = Some(report);
    }
    Ok(TrainOutcome {
        state,
        final_checkpoint,
        metrics: metrics_path,
        last_report,
        last_test_psnr,
    })
}
