//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.
//!
//! The training criteria use `BRANCHGAN_ACCEPT_ITERS` iterations per run
//! (default 500) and keep their artifacts in a temporary directory unless
//! `BRANCHGAN_ACCEPT_KEEP` names a directory to use instead.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use branchgan::compose::{alpha_blend, compose_inference, sample_alpha, AlphaVector, BranchSet};
use branchgan::config::RunConfig;
use branchgan::data::{build_dataset, load_eval_split, load_labeled_split, Convention, DatasetRequest, LabeledImage, Split, SynthParams};
use branchgan::eval::{evaluate, AblationVariant, EvalOutputs, EvalReport};
use branchgan::graph::{Graph, Var};
use branchgan::losses::{
    balance_loss, d_adv_loss, dis_rec_loss, fake_term, g_adv_loss, grad_rec_loss, r1_penalty, real_term, rec_loss,
    sparse_loss, sqr_loss, total_loss, LossParts, LossWeights, Reduction,
};
use branchgan::metrics::{distinction_mask, psnr_from_mse};
use branchgan::model::{init_models, Binding, Group, ModelSet, NetConfig};
use branchgan::train::{read_metrics, train, TrainRunOptions};
use branchgan::{Tensor, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    ensure((got - want).abs() <= tol, || format!("{name}: got {got}, expected {want}"))
}

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, v.to_vec()).unwrap()
}

fn scalar_of(f: impl FnOnce(&mut Graph<f64>) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = f(&mut g);
    g.scalar(v)
}

// ---------------------------------------------------------------- criterion 1

fn loss_hand_values() -> Check {
    const TOL: f64 = 1e-9;
    let rec_sum = scalar_of(|g| {
        let (x, y) = (g.constant(t(&[1, 1, 1, 1], &[1.0])), g.constant(t(&[1, 1, 1, 1], &[0.5])));
        rec_loss(g, x, y, Reduction::Sum)
    });
    close("rec sum", rec_sum, 0.75, TOL)?;
    let rec_mean = scalar_of(|g| {
        let (x, y) = (g.constant(t(&[1, 1, 1, 2], &[0.5, -0.5])), g.constant(t(&[1, 1, 1, 2], &[0.0, 0.0])));
        rec_loss(g, x, y, Reduction::Mean)
    });
    close("rec mean", rec_mean, 0.75, TOL)?;

    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[1, 1, 1, 2], &[0.0, 1.0]));
    let gi = g.grad_image(x);
    ensure(g.value(gi).data()[..2] == [1.0, 0.0], || format!("horizontal gradient of [0, 1]: {:?}", g.value(gi).data()))?;
    let c = 0.37;
    let ramp = g.constant(Tensor::from_fn(&[1, 1, 4, 5], |i| c * (i % 5) as f64));
    let gr = g.grad_image(ramp);
    for row in 0..4 {
        for col in 0..4 {
            close("ramp interior gradient", g.value(gr).data()[row * 5 + col], c, TOL)?;
        }
    }
    // step edge vs flat image of equal mean: one horizontal difference of 1 among 8 entries
    let step = scalar_of(|g| {
        let x = g.constant(t(&[1, 1, 1, 4], &[0.0, 0.0, 1.0, 1.0]));
        let y = g.constant(t(&[1, 1, 1, 4], &[0.5; 4]));
        grad_rec_loss(g, x, y, Reduction::Mean)
    });
    close("grad_rec step edge", step, 0.25, TOL)?;

    let dis = scalar_of(|g| {
        let x = g.constant(t(&[1, 1, 2, 2], &[0.5, 0.2, -0.3, 0.9]));
        let xh = g.constant(t(&[1, 1, 2, 2], &[0.1, -0.6, 0.4, 0.0]));
        let psi = g.constant(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 0.0]));
        dis_rec_loss(g, x, xh, psi, Reduction::Mean)
    });
    close("dis_rec indicator [1,0,0,0]", dis, 0.4 + 0.16, TOL)?;

    let sqr = scalar_of(|g| {
        let (a, b) = (g.constant(t(&[1], &[1.0])), g.constant(t(&[1], &[1.0])));
        sqr_loss(g, &[a, b])
    });
    close("sqr two ones", sqr, 4.0, TOL)?;
    let bal = scalar_of(|g| {
        let p1 = g.constant(t(&[1], &[0.7]));
        let p2 = g.constant(t(&[1], &[0.1f64.sqrt()]));
        let p3 = g.constant(t(&[1], &[0.3f64.sqrt()]));
        balance_loss(g, &[p1, p2, p3])
    });
    close("balance e=(0.1, 0.3)", bal, 0.01, TOL)?;
    let sparse = scalar_of(|g| {
        let p = g.constant(t(&[1, 1, 1, 2], &[0.5, -0.5]));
        sparse_loss(g, p)
    });
    close("sparse", sparse, 0.5, TOL)?;

    let ln2 = std::f64::consts::LN_2;
    let zeros = || t(&[4], &[0.0; 4]);
    for (name, v) in [
        ("real term at 0", scalar_of(|g| {
            let l = g.constant(zeros());
            real_term(g, l)
        })),
        ("fake term at 0", scalar_of(|g| {
            let l = g.constant(zeros());
            fake_term(g, l)
        })),
        ("generator loss at 0", scalar_of(|g| {
            let (a, b) = (g.constant(zeros()), g.constant(zeros()));
            g_adv_loss(g, a, b)
        })),
    ] {
        close(name, v, ln2, TOL)?;
    }
    let d = scalar_of(|g| {
        let (r, a, b) = (g.constant(zeros()), g.constant(zeros()), g.constant(zeros()));
        d_adv_loss(g, r, a, b)
    });
    close("discriminator loss at 0 (real + mean fake)", d, 2.0 * ln2, TOL)?;

    let b0 = BranchSet::new(vec![t(&[1, 1, 1], &[0.1]), t(&[1, 1, 1], &[0.4])], 0).unwrap();
    let b1 = BranchSet::new(vec![t(&[1, 1, 1], &[-0.2]), t(&[1, 1, 1], &[0.6])], 1).unwrap();
    let (x0, x1) = alpha_blend(&b0, &b1, &AlphaVector { alpha: vec![0.25], batch: 0 }).unwrap();
    close("blend x0", x0.item(), 0.65, TOL)?;
    close("blend x1", x1.item(), 0.25, TOL)?;

    close("psnr at mse 0.01", psnr_from_mse(0.01), 20.0, TOL)?;
    close("psnr at mse 1e-4", psnr_from_mse(1e-4), 40.0, TOL)?;
    let m = distinction_mask(&t(&[1, 2, 2], &[1.0, 0.0, 0.0, 0.0])).unwrap();
    ensure(m.bits() == [true, false, false, false], || format!("distinction mask {:?}", m.bits()))?;

    // total equals an independent weighted recomputation
    let mut g = Graph::<f64>::new();
    let vals = [0.31, 0.12, 0.53, 0.04, 0.005, 0.26, 0.71];
    let v: Vec<Var> = vals.iter().map(|&x| g.constant(Tensor::scalar(x))).collect();
    let w = LossWeights::default();
    let parts = LossParts { rec: v[0], grad_rec: v[1], dis_rec: v[2], sqr: v[3], bal: v[4], sparse: v[5], adv: v[6] };
    let (_, report) = total_loss(&mut g, &w, &parts, 1).map_err(|e| e.to_string())?;
    let recomputed = w.rec * vals[0] + w.grad_rec * vals[1] + w.dis_rec * vals[2] + w.sqr * vals[3] + w.bal * vals[4]
        + w.sparse * vals[5] + w.adv * vals[6];
    ensure((report.total - recomputed).abs() <= 1e-6 * recomputed.abs(), || {
        format!("total {} vs recomputed {recomputed}", report.total)
    })?;

    // sqr is zero iff no pixel has two non-zero branches: every sign pattern of 2 branches x 2 pixels,
    // each with random magnitudes
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut patterns = 0;
    for code in 0..81usize {
        let signs: Vec<f64> = (0..4).map(|k| ((code / 3usize.pow(k)) % 3) as f64 - 1.0).collect();
        for _ in 0..5 {
            let vals: Vec<f64> = signs.iter().map(|s| s * rng.random_range(0.05..2.0)).collect();
            let (p1, p2) = (&vals[0..2], &vals[2..4]);
            let v = scalar_of(|g| {
                let a = g.constant(t(&[1, 1, 1, 2], p1));
                let b = g.constant(t(&[1, 1, 1, 2], p2));
                sqr_loss(g, &[a, b])
            });
            let disjoint = p1[0] * p2[0] == 0.0 && p1[1] * p2[1] == 0.0;
            ensure((v == 0.0) == disjoint, || format!("sqr {v} for branches {p1:?} {p2:?}"))?;
        }
        patterns += 1;
    }
    Ok(format!("hand values within 1e-9; sqr zero-iff-disjoint on all {patterns} sign patterns"))
}

// ---------------------------------------------------------------- criterion 2

/// Max over trials of ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-12).
fn fd_check(
    name: &str,
    trials: usize,
    rng: &mut ChaCha8Rng,
    mut make: impl FnMut(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> Result<f64, String> {
    const EPS: f64 = 1e-4;
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let inputs = make(rng);
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
            for j in 0..x.numel() {
                let eval_at = |delta: f64| {
                    let mut moved = inputs.clone();
                    moved[k].data_mut()[j] += delta;
                    let mut g = Graph::new();
                    let vs: Vec<Var> = moved.into_iter().map(|m| g.constant(m)).collect();
                    let o = f(&mut g, &vs);
                    g.scalar(o)
                };
                let numeric = (eval_at(EPS) - eval_at(-EPS)) / (2.0 * EPS);
                let a = analytic.data()[j];
                diff += (a - numeric).powi(2);
                na += a * a;
                nn += numeric * numeric;
            }
        }
        let rel = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-12);
        if rel >= 1e-4 {
            return Err(format!("{name}: trial {trial} relative error {rel:.3e}"));
        }
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Random values kept away from 0 so |·| kinks sit outside the finite-difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.01..1.0);
        if rng.random::<bool>() { m } else { -m }
    })
}

fn gradient_checks() -> Check {
    const TRIALS: usize = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let img = [2, 1, 4, 4];
    let mut report = Vec::new();
    // Differences x - x̂ must also avoid 0, so x̂ = x - δ with δ away from 0.
    let pair = |rng: &mut ChaCha8Rng| {
        let x = away_from_zero(rng, &img);
        let d = away_from_zero(rng, &img);
        let xh = x.zip_map(&d, |a, b| a - b).unwrap();
        vec![x, xh]
    };
    for red in [Reduction::Mean, Reduction::Sum] {
        report.push(("rec", fd_check("rec", TRIALS, &mut rng, pair, |g, v| rec_loss(g, v[0], v[1], red))?));
    }
    report.push((
        "grad_rec",
        fd_check(
            "grad_rec",
            TRIALS,
            &mut rng,
            |rng| {
                // x̂ differs from x by a ramp, so every interior difference of x - x̂ is near 0.3 or 0.2;
                // boundary differences are identically 0 for both images
                let x = away_from_zero(rng, &img);
                let xh = Tensor::from_fn(&img, |i| x.data()[i] - 0.3 * ((i % 4) as f64) - 0.2 * (((i / 4) % 4) as f64) - rng.random_range(-0.01..0.01));
                vec![x, xh]
            },
            |g, v| grad_rec_loss(g, v[0], v[1], Reduction::Mean),
        )?,
    ));
    report.push((
        "dis_rec",
        fd_check(
            "dis_rec",
            TRIALS,
            &mut rng,
            |rng| {
                let mut v = pair(rng);
                v.push(away_from_zero(rng, &img));
                v
            },
            |g, v| {
                let psi = g.detach(v[2]);
                dis_rec_loss(g, v[0], v[1], psi, Reduction::Mean)
            },
        )?,
    ));
    let branches = |n: usize| move |rng: &mut ChaCha8Rng| (0..n).map(|_| away_from_zero(rng, &img)).collect::<Vec<_>>();
    report.push(("sqr", fd_check("sqr", TRIALS, &mut rng, branches(3), sqr_loss)?));
    report.push(("balance", fd_check("balance", TRIALS, &mut rng, branches(4), balance_loss)?));
    report.push(("sparse", fd_check("sparse", TRIALS, &mut rng, branches(1), |g, v| sparse_loss(g, v[0]))?));
    let logits = |n: usize| move |rng: &mut ChaCha8Rng| (0..n).map(|_| Tensor::from_fn(&[4], |_| rng.random_range(-3.0..3.0))).collect::<Vec<_>>();
    report.push(("g_adv", fd_check("g_adv", TRIALS, &mut rng, logits(2), |g, v| g_adv_loss(g, v[0], v[1]))?));
    report.push(("d_adv", fd_check("d_adv", TRIALS, &mut rng, logits(3), |g, v| d_adv_loss(g, v[0], v[1], v[2]))?));
    report.push(("r1", r1_gradient_check(TRIALS, &mut rng)?));
    Ok(report.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", "))
}

/// R1 against discriminator parameters on a tiny network (8x8 is the smallest valid image).
fn r1_gradient_check(trials: usize, rng: &mut ChaCha8Rng) -> Result<f64, String> {
    const EPS: f64 = 1e-5;
    let cfg = NetConfig {
        num_branches: 1,
        image_size: 8,
        base_width: 2,
        disc_width: 2,
        mapping_width: 4,
        ..NetConfig::default()
    };
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let mut m = init_models::<f64>(&cfg, trial as u64).map_err(|e| e.to_string())?;
        let x = Tensor::from_fn(&[2, 1, 8, 8], |_| rng.random_range(-1.0..1.0));
        let y = [rng.random_range(0..2), rng.random_range(0..2)];
        let penalty = |m: &ModelSet<f64>| {
            let mut g = Graph::new();
            let mut b = Binding::new(m);
            b.bind(&mut g, m, Group::Discriminator, false);
            let (r1, _) = r1_penalty(&mut g, m, &b, &x, &y).unwrap();
            g.scalar(r1)
        };
        let mut g = Graph::new();
        let mut b = Binding::new(&m);
        b.bind(&mut g, &m, Group::Discriminator, true);
        let (r1, _) = r1_penalty(&mut g, &m, &b, &x, &y).map_err(|e| e.to_string())?;
        let grads = g.backward(r1);
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        let ids: Vec<usize> = m.params().ids_in(Group::Discriminator).collect();
        for id in ids {
            let analytic = grads.get(b.var(id)).cloned().unwrap_or_else(|| Tensor::zeros(m.params().tensor(id).shape()));
            let k = rng.random_range(0..analytic.numel());
            let orig = m.params().tensor(id).data()[k];
            m.params_mut().tensor_mut(id).data_mut()[k] = orig + EPS;
            let up = penalty(&m);
            m.params_mut().tensor_mut(id).data_mut()[k] = orig - EPS;
            let down = penalty(&m);
            m.params_mut().tensor_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let a = analytic.data()[k];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        let rel = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-12);
        if rel >= 1e-4 {
            return Err(format!("r1: trial {trial} relative error {rel:.3e}"));
        }
        worst = worst.max(rel);
    }
    Ok(worst)
}

// ---------------------------------------------------------------- criterion 3

fn alpha_algebra() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let n = rng.random_range(2..7);
        let mk = |rng: &mut ChaCha8Rng| Tensor::<f64>::from_fn(&[1, 5, 5], |_| rng.random_range(-1.0..1.0));
        let p0: Vec<_> = (0..n).map(|_| mk(&mut rng)).collect();
        let p1: Vec<_> = (0..n).map(|_| mk(&mut rng)).collect();
        let b0 = BranchSet::new(p0.clone(), 0).unwrap();
        let b1 = BranchSet::new(p1.clone(), 1).unwrap();
        let ones = AlphaVector { alpha: vec![1.0; n - 1], batch: 0 };
        let (x0, _) = alpha_blend(&b0, &b1, &ones).unwrap();
        let (sum0, _) = compose_inference(&b0).unwrap();
        ensure(x0 == sum0, || format!("trial {trial}: α = 1 blend differs from the plain sum"))?;

        // identical non-class branches: the blend no longer depends on α
        let mut shared = p1.clone();
        shared[1..].clone_from_slice(&p0[1..]);
        let b1s = BranchSet::new(shared, 1).unwrap();
        let a = sample_alpha(n, trial as u64, &mut rng);
        let (xa, _) = alpha_blend(&b0, &b1s, &a).unwrap();
        worst = worst.max(xa.max_abs_diff(&sum0));
        ensure(worst <= 1e-6, || format!("trial {trial}: blend moved by {worst:e} with shared branches"))?;
    }
    Ok(format!("α = 1 exact over 100 trials; shared-branch α-dependence at most {worst:.1e}"))
}

// ---------------------------------------------------------------- criteria 4-8 setup

struct Workspace {
    root: PathBuf,
    iters: u64,
    _tmp: Option<tempfile::TempDir>,
    reports: BTreeMap<String, EvalReport>,
}

impl Workspace {
    fn new() -> Self {
        let iters = std::env::var("BRANCHGAN_ACCEPT_ITERS").ok().and_then(|v| v.parse().ok()).unwrap_or(500);
        let (root, tmp) = match std::env::var_os("BRANCHGAN_ACCEPT_KEEP") {
            Some(p) => (PathBuf::from(p), None),
            None => {
                let d = tempfile::tempdir().expect("temporary directory");
                (d.path().to_path_buf(), Some(d))
            }
        };
        Self { root, iters, _tmp: tmp, reports: BTreeMap::new() }
    }

    fn dataset(&self, set: u8) -> Result<PathBuf, String> {
        let root = self.root.join(format!("data_set{set}"));
        if !root.join("manifest.toml").exists() {
            build_dataset(&DatasetRequest {
                root: root.clone(),
                seed: 1,
                convention: Convention::from_set_number(set).unwrap(),
                n_train_per_class: 200,
                n_test_per_class: 50,
                params: SynthParams::default(),
                overwrite: true,
            })
            .map_err(|e| e.to_string())?;
        }
        Ok(root)
    }

    fn base_config(&self, set: u8) -> Result<RunConfig, String> {
        let mut run = RunConfig::default();
        run.data.root = self.dataset(set)?;
        run.data.set = set;
        run.train.total_iters = self.iters;
        run.train.eval_every = self.iters;
        run.train.sample_every = self.iters;
        run.train.checkpoint_every = self.iters;
        Ok(run)
    }

    /// Trains (once) and evaluates on the full test split.
    fn report(&mut self, set: u8, variant: &AblationVariant, seed: u64) -> Result<EvalReport, String> {
        let key = format!("set{set}_n{}_w{}_seed{seed}", variant.num_branches, variant.base_width.unwrap_or(0));
        if let Some(r) = self.reports.get(&key) {
            return Ok(r.clone());
        }
        let mut run = self.base_config(set)?;
        run.net.num_branches = variant.num_branches;
        if let Some(w) = variant.base_width {
            run.net.base_width = w;
        }
        run.train.seed = seed;
        let start = Instant::now();
        let out = train::<f32>(&run, &self.root.join(&key), &TrainRunOptions::default()).map_err(|e| format!("{key}: {e}"))?;
        let cfg = run.train_config().unwrap();
        let data = load_eval_split::<f32>(&cfg.data_root, Split::Test).map_err(|e| e.to_string())?;
        let r = evaluate(&out.state.models, &data, cfg.convention, cfg.eval_style_seed, false, &EvalOutputs::default())
            .map_err(|e| e.to_string())?;
        eprintln!(
            "  trained {key}: {} iters in {:.0}s, psnr {:.2} dB, auroc {:.3}",
            self.iters,
            start.elapsed().as_secs_f64(),
            r.psnr_mean,
            r.auroc_mean
        );
        self.reports.insert(key, r.clone());
        Ok(r)
    }
}

fn n5() -> AblationVariant {
    AblationVariant { num_branches: 5, base_width: None }
}

// ---------------------------------------------------------------- criterion 6

fn reproducibility(ws: &Workspace) -> Check {
    let mut run = ws.base_config(1).map_err(|e| e.to_string())?;
    run.train.total_iters = 100;
    run.train.log_every = 1;
    run.train.checkpoint_every = 50;
    run.train.eval_every = 50;
    run.train.sample_every = 100;
    let dir = ws.root.join("repro");
    let go = |name: &str, resume: Option<PathBuf>| {
        train::<f32>(&run, &dir.join(name), &TrainRunOptions { resume, ..Default::default() }).map_err(|e| e.to_string())
    };
    go("a", None)?;
    go("b", None)?;
    let csv_a = std::fs::read(dir.join("a/metrics.csv")).map_err(|e| e.to_string())?;
    let csv_b = std::fs::read(dir.join("b/metrics.csv")).map_err(|e| e.to_string())?;
    let rows = read_metrics(&dir.join("a/metrics.csv")).map_err(|e| e.to_string())?;
    ensure(rows.len() == 100 && rows.last().unwrap().0.iteration == 100, || format!("{} metric rows", rows.len()))?;
    ensure(csv_a == csv_b, || "metrics CSV differs between identical runs".into())?;

    // resume the first run from iteration 50 in a fresh directory
    std::fs::create_dir_all(dir.join("c")).map_err(|e| e.to_string())?;
    std::fs::copy(dir.join("a/metrics.csv"), dir.join("c/metrics.csv")).map_err(|e| e.to_string())?;
    go("c", Some(dir.join("a/ckpt_000050.bin")))?;
    let csv_c = std::fs::read(dir.join("c/metrics.csv")).map_err(|e| e.to_string())?;
    ensure(csv_c == csv_a, || "resumed metrics differ from the uninterrupted run".into())?;
    let ck_a = std::fs::read(dir.join("a/ckpt_000100.bin")).map_err(|e| e.to_string())?;
    let ck_c = std::fs::read(dir.join("c/ckpt_000100.bin")).map_err(|e| e.to_string())?;
    ensure(ck_a == ck_c, || "checkpoint at 100 differs after resuming at 50".into())?;
    Ok("100-iteration metrics identical across runs; resume at 50 reproduces metrics and the final checkpoint byte for byte".into())
}

// ---------------------------------------------------------------- criterion 7

fn firewall(ws: &Workspace) -> Check {
    let run = ws.base_config(1).map_err(|e| e.to_string())?;
    let cfg: TrainConfig = run.train_config().map_err(|e| e.to_string())?;
    // every value the training path is configured with
    let json = serde_json::to_value(&cfg).unwrap();
    fn keys(v: &serde_json::Value, out: &mut Vec<String>) {
        if let serde_json::Value::Object(m) = v {
            for (k, x) in m {
                out.push(k.clone());
                keys(x, out);
            }
        }
    }
    let mut names = Vec::new();
    keys(&json, &mut names);
    ensure(!names.iter().any(|k| k.contains("mask")), || format!("training config exposes {names:?}"))?;
    let top: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
    ensure(
        top == ["convention", "data_root", "eval_style_seed", "loss", "net", "optim", "train"],
        || format!("unexpected training config fields {top:?}"),
    )?;
    // the training loader yields exactly (image, label)
    let data: Vec<LabeledImage<f32>> = load_labeled_split(&cfg.data_root, Split::Train).map_err(|e| e.to_string())?;
    let LabeledImage { image, label } = data[0].clone();
    ensure(image.shape() == [1, 64, 64] && label <= 1, || "loader output".into())?;

    // training still runs with every mask file removed from a copy of the dataset
    let copy = ws.root.join("firewall_data");
    copy_dir(&cfg.data_root, &copy).map_err(|e| e.to_string())?;
    std::fs::remove_dir_all(copy.join("masks")).map_err(|e| e.to_string())?;
    let mut small = run.clone();
    small.data.root = copy;
    small.train.total_iters = 2;
    small.train.eval_every = 2;
    small.train.sample_every = 2;
    train::<f32>(&small, &ws.root.join("firewall_run"), &TrainRunOptions::default()).map_err(|e| e.to_string())?;
    Ok("training config has no mask route, loader yields (image, label), training runs with masks deleted".into())
}

fn copy_dir(from: &Path, to: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(to)?;
    for e in std::fs::read_dir(from)? {
        let e = e?;
        let dst = to.join(e.file_name());
        if e.file_type()?.is_dir() {
            copy_dir(&e.path(), &dst)?;
        } else {
            std::fs::copy(e.path(), dst)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- criteria 4, 5, 8

fn toy_set1(ws: &mut Workspace) -> Check {
    let mut lines = Vec::new();
    let mut failed = false;
    for seed in [1, 2] {
        let r = ws.report(1, &n5(), seed)?;
        let ok = r.psnr_mean >= 22.0 && r.auroc_mean >= 0.85;
        failed |= !ok;
        lines.push(format!("seed {seed}: psnr {:.2} dB, auroc {:.3}", r.psnr_mean, r.auroc_mean));
    }
    let msg = format!("{} iterations; {}", ws.iters, lines.join("; "));
    if failed {
        Err(format!("{msg} (need psnr >= 22 dB and auroc >= 0.85)"))
    } else {
        Ok(msg)
    }
}

/// P(X >= k) for X ~ Binomial(n, 1/2).
fn sign_test_upper(n: usize, k: usize) -> f64 {
    let choose = |n: usize, r: usize| (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
    (k..=n).map(|r| choose(n, r)).sum::<f64>() / 2f64.powi(n as i32)
}

fn ablation_direction(ws: &mut Workspace) -> Check {
    let seeds = [1u64, 2, 3];
    let base = ws.base_config(1)?;
    let matched = AblationVariant::matched_single_branch(&base.net, 0.10).map_err(|e| e.to_string())?;
    let single = AblationVariant { num_branches: 1, base_width: None };
    let mut psnr = |v: &AblationVariant| -> Result<Vec<f64>, String> {
        seeds.iter().map(|&s| ws.report(1, v, s).map(|r| r.psnr_mean)).collect()
    };
    let p5 = psnr(&n5())?;
    let p1 = psnr(&single)?;
    let pm = psnr(&matched)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut problems = Vec::new();
    for (name, other) in [("N=1", &p1), ("matched N=1", &pm)] {
        if mean(&p5) <= mean(other) {
            problems.push(format!("seed-mean N=5 {:.2} dB not above {name} {:.2} dB", mean(&p5), mean(other)));
        }
        let losses = p5.iter().zip(other.iter()).filter(|(a, b)| a <= b).count();
        let p = sign_test_upper(seeds.len(), losses);
        if p < 0.05 {
            problems.push(format!("sign test favours {name} (p = {p:.3})"));
        }
    }
    let msg = format!(
        "{} iterations; psnr N=5 {p5:.2?}, N=1 {p1:.2?}, matched N=1 (width {}) {pm:.2?}",
        ws.iters,
        matched.base_width.unwrap()
    );
    if problems.is_empty() {
        Ok(msg)
    } else {
        Err(format!("{msg}: {}", problems.join("; ")))
    }
}

fn toy_set2(ws: &mut Workspace) -> Check {
    let mut lines = Vec::new();
    let mut failed = false;
    for seed in [1, 2] {
        let r = ws.report(2, &n5(), seed)?;
        failed |= r.auroc_mean < 0.75;
        lines.push(format!("seed {seed}: auroc {:.3} (psnr {:.2} dB)", r.auroc_mean, r.psnr_mean));
    }
    let msg = format!("{} iterations; {}", ws.iters, lines.join("; "));
    if failed {
        Err(format!("{msg} (need auroc >= 0.75)"))
    } else {
        Ok(msg)
    }
}

fn main() -> ExitCode {
    let mut ws = Workspace::new();
    let mut all_ok = true;
    let mut run = |n: usize, title: &str, f: &mut dyn FnMut(&mut Workspace) -> Check, ws: &mut Workspace| {
        let start = Instant::now();
        let res = f(ws);
        let secs = start.elapsed().as_secs_f64();
        match &res {
            Ok(m) => println!("criterion {n} PASS ({title}, {secs:.0}s): {m}"),
            Err(m) => println!("criterion {n} FAIL ({title}, {secs:.0}s): {m}"),
        }
        all_ok &= res.is_ok();
    };
    run(1, "loss hand values", &mut |_| loss_hand_values(), &mut ws);
    run(2, "finite-difference gradients", &mut |_| gradient_checks(), &mut ws);
    run(3, "blend algebra", &mut |_| alpha_algebra(), &mut ws);
    run(7, "mask firewall", &mut |w| firewall(w), &mut ws);
    run(6, "reproducibility", &mut |w| reproducibility(w), &mut ws);
    run(4, "toy set 1", &mut toy_set1, &mut ws);
    run(8, "toy set 2", &mut toy_set2, &mut ws);
    run(5, "ablation direction", &mut ablation_direction, &mut ws);
    if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
