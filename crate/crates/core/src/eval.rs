//! Inference, test-set evaluation, PNG panels and parameter-matched ablations.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::compose::{compose_inference, display_transform, BranchSet};
use crate::config::RunConfig;
use crate::data::{load_eval_split, Convention, EvalImage, LabeledImage, Split};
use crate::error::{Error, Result};
use crate::imaging::{unit_to_u8, write_gray_png, Mask};
use crate::metrics::{cap_psnr, localization_metrics, mean_std, psnr};
use crate::model::{generator_param_count, ModelSet, NetConfig};
use crate::tensor::{Element, Tensor};
use crate::train::{train, TrainRunOptions, TrainState};

const EVAL_CHUNK: usize = 16;

/// Branches, composition and distinction map of one image.
#[derive(Debug, Clone)]
pub struct Inference<T: Element> {
    pub branches: BranchSet<T>,
    pub composed: Tensor<T>,
    pub distinction: Tensor<T>,
}

/// Evaluation latents: draw `i` is the same whatever the batch size.
pub fn eval_latents<T: Element>(count: usize, dim: usize, seed: u64, deterministic: bool) -> Tensor<T> {
    if deterministic {
        return Tensor::zeros(&[count, dim]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[count, dim], |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        T::from_f64(v)
    })
}

/// Runs images (each 1×H×W) through the model with styles of classes `y`.
pub fn infer<T: Element>(models: &ModelSet<T>, images: &[Tensor<T>], y: &[usize], z: &Tensor<T>) -> Result<Vec<Inference<T>>> {
    if images.len() != y.len() || z.shape()[0] != images.len() {
        return Err(Error::shape("infer: images, labels and latents differ in count"));
    }
    let mut out = Vec::with_capacity(images.len());
    for start in (0..images.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(images.len());
        let x = Tensor::stack(&images[start..end])?;
        let zc = Tensor::stack(&(start..end).map(|i| z.index0(i)).collect::<Vec<_>>())?;
        let s = models.map_style(&zc, &y[start..end])?;
        let psis = models.branch_forward(&x, &s)?;
        for (k, &class) in y[start..end].iter().enumerate() {
            let set = BranchSet::new(psis.iter().map(|p| p.index0(k)).collect(), class as u8)?;
            let (composed, distinction) = compose_inference(&set)?;
            out.push(Inference {
                branches: set,
                composed,
                distinction,
            });
        }
    }
    Ok(out)
}

/// Same-class reconstruction PSNR of each image (uncapped).
pub fn evaluate_psnr<T: Element>(
    models: &ModelSet<T>,
    data: &[LabeledImage<T>],
    style_seed: u64,
    deterministic: bool,
) -> Result<Vec<f64>> {
    let images: Vec<Tensor<T>> = data.iter().map(|d| d.image.clone()).collect();
    let y: Vec<usize> = data.iter().map(|d| d.label as usize).collect();
    let z = eval_latents(images.len(), models.config().latent_dim, style_seed, deterministic);
    infer(models, &images, &y, &z)?
        .iter()
        .zip(&images)
        .map(|(inf, x)| psnr(x, &inf.composed))
        .collect()
}

/// Ground-truth mask a distinction map is scored against, if the image has one.
pub fn localization_target(convention: Convention, img: &EvalImage<impl Element>) -> Option<&Mask> {
    match convention {
        Convention::Set1 => (img.label == 1).then_some(&img.mask_rect),
        Convention::Set2 => Some(&img.mask_shape),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub index: usize,
    pub label: u8,
    pub psnr: f64,
    pub iou: Option<f64>,
    pub auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_branches: usize,
    pub params: usize,
    pub images: Vec<ImageScore>,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub iou_mean: f64,
    pub auroc_mean: f64,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOutputs {
    /// Write panels for the first this many images into `dir`.
    pub panels: usize,
    pub dir: Option<PathBuf>,
}

/// PSNR on every image; IoU and AUROC of |ψ₁| on images with a localisation target.
pub fn evaluate<T: Element>(
    models: &ModelSet<T>,
    data: &[EvalImage<T>],
    convention: Convention,
    style_seed: u64,
    deterministic: bool,
    outputs: &EvalOutputs,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::config("evaluation set is empty"));
    }
    let images: Vec<Tensor<T>> = data.iter().map(|d| d.image.clone()).collect();
    let y: Vec<usize> = data.iter().map(|d| d.label as usize).collect();
    let z = eval_latents(images.len(), models.config().latent_dim, style_seed, deterministic);
    let results = infer(models, &images, &y, &z)?;
    let mut scores = Vec::with_capacity(data.len());
    for (i, (img, inf)) in data.iter().zip(&results).enumerate() {
        let p = psnr(&img.image, &inf.composed)?;
        let (iou, auroc) = match localization_target(convention, img) {
            Some(mask) => {
                let (a, b) = localization_metrics(&inf.distinction, mask)?;
                (Some(a), Some(b))
            }
            None => (None, None),
        };
        if let (Some(dir), true) = (&outputs.dir, i < outputs.panels) {
            let gt = localization_target(convention, img);
            write_panel(&dir.join(format!("panel_{i:04}.png")), &img.image, inf, gt)?;
        }
        scores.push(ImageScore {
            index: i,
            label: img.label,
            psnr: p,
            iou,
            auroc,
        });
    }
    let capped: Vec<f64> = scores.iter().map(|s| cap_psnr(s.psnr)).collect();
    let (psnr_mean, psnr_std) = mean_std(&capped);
    let ious: Vec<f64> = scores.iter().filter_map(|s| s.iou).collect();
    let aurocs: Vec<f64> = scores.iter().filter_map(|s| s.auroc).collect();
    Ok(EvalReport {
        num_branches: models.num_branches(),
        params: models.generator_parameter_count(),
        images: scores,
        psnr_mean,
        psnr_std,
        iou_mean: mean_std(&ious).0,
        auroc_mean: mean_std(&aurocs).0,
    })
}

/// Loads a checkpoint and evaluates it on the test split of `data_root`.
pub fn evaluate_checkpoint(
    ckpt: &Path,
    data_root: &Path,
    style_seed: u64,
    deterministic: bool,
    outputs: &EvalOutputs,
) -> Result<EvalReport> {
    let (state, _) = TrainState::<f32>::load(ckpt, None)?;
    let manifest = crate::data::DatasetManifest::load(data_root)?;
    if manifest.params.image_size != state.models.config().image_size {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint expects {0}x{0} images, dataset has {1}x{1}",
            state.models.config().image_size,
            manifest.params.image_size
        )));
    }
    let data = load_eval_split::<f32>(data_root, Split::Test)?;
    evaluate(&state.models, &data, manifest.convention, style_seed, deterministic, outputs)
}

/// Horizontal strip of [0, 1] tiles separated by 2-pixel white gaps.
fn write_strip(path: &Path, tiles: &[Vec<f64>], h: usize, w: usize) -> Result<()> {
    const GAP: usize = 2;
    let width = tiles.len() * w + (tiles.len().saturating_sub(1)) * GAP;
    let mut px = vec![255u8; h * width];
    for (t, tile) in tiles.iter().enumerate() {
        let x0 = t * (w + GAP);
        for r in 0..h {
            for c in 0..w {
                px[r * width + x0 + c] = unit_to_u8(tile[r * w + c]);
            }
        }
    }
    write_gray_png(path, h, width, &px)
}

fn unit_tile<T: Element>(t: &Tensor<T>) -> Vec<f64> {
    display_transform(t).data().iter().map(|v| v.as_f64()).collect()
}

/// input | ψ₁..ψ_N | composition | |ψ₁| scaled to its maximum | ground truth (when given).
pub fn write_panel<T: Element>(path: &Path, input: &Tensor<T>, inf: &Inference<T>, gt: Option<&Mask>) -> Result<()> {
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let mut tiles = vec![unit_tile(input)];
    tiles.extend(inf.branches.psis.iter().map(unit_tile));
    tiles.push(unit_tile(&inf.composed));
    let mag: Vec<f64> = inf.distinction.data().iter().map(|v| v.as_f64().abs()).collect();
    let peak = mag.iter().cloned().fold(0.0, f64::max);
    tiles.push(mag.iter().map(|v| if peak > 0.0 { v / peak } else { 0.0 }).collect());
    if let Some(m) = gt {
        tiles.push(m.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect());
    }
    write_strip(path, &tiles, h, w)
}

/// Training-time preview of one test image.
pub fn write_sample_panel<T: Element>(
    models: &ModelSet<T>,
    img: &LabeledImage<T>,
    style_seed: u64,
    deterministic: bool,
    path: &Path,
) -> Result<()> {
    let z = eval_latents(1, models.config().latent_dim, style_seed, deterministic);
    let inf = infer(models, std::slice::from_ref(&img.image), &[img.label as usize], &z)?;
    write_panel(path, &img.image, &inf[0], None)
}

/// One configuration of an ablation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub num_branches: usize,
    /// Override of the generator base width; `None` keeps the base config.
    pub base_width: Option<usize>,
}

impl AblationVariant {
    /// Single-branch variant whose generator width brings its parameter count
    /// within `tol` (relative) of the base configuration.
    pub fn matched_single_branch(base: &NetConfig, tol: f64) -> Result<Self> {
        let target = generator_param_count(base);
        let one = NetConfig {
            num_branches: 1,
            ..base.clone()
        };
        let width = one.width_matching(target, tol).ok_or_else(|| {
            Error::config(format!("no single-branch width within {tol} of {target} generator parameters"))
        })?;
        Ok(Self {
            num_branches: 1,
            base_width: Some(width),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config_hash: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub params: usize,
    pub seed: u64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub iou_mean: f64,
    pub auroc_mean: f64,
    pub status: String,
}

/// Trains every variant under every seed into `out_dir/<hash>_seed<seed>/`,
/// evaluates on the test split and writes `out_dir/ablation.csv`. A failing run
/// becomes a row with NaN metrics and its error as the status.
pub fn ablate(base: &RunConfig, variants: &[AblationVariant], seeds: &[u64], out_dir: &Path) -> Result<Vec<AblationRow>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join("ablation.csv");
    let mut rows = Vec::new();
    for v in variants {
        for &seed in seeds {
            let mut run = base.clone();
            run.net.num_branches = v.num_branches;
            if let Some(w) = v.base_width {
                run.net.base_width = w;
            }
            run.train.seed = seed;
            let (hash, params) = match run.train_config() {
                Ok(c) => (c.hash(), generator_param_count(&c.net)),
                Err(e) => {
                    rows.push(failed_row(String::new(), v.num_branches, 0, seed, &e));
                    continue;
                }
            };
            let dir = out_dir.join(format!("{hash}_seed{seed}"));
            let row = match run_variant(&run, &dir) {
                Ok(r) => AblationRow {
                    config_hash: hash,
                    n: v.num_branches,
                    params,
                    seed,
                    psnr_mean: r.psnr_mean,
                    psnr_std: r.psnr_std,
                    iou_mean: r.iou_mean,
                    auroc_mean: r.auroc_mean,
                    status: "ok".into(),
                },
                Err(e) => failed_row(hash, v.num_branches, params, seed, &e),
            };
            log::info!("ablation N={} seed={seed}: {}", row.n, row.status);
            rows.push(row);
            write_ablation_csv(&csv_path, &rows)?;
        }
    }
    write_ablation_csv(&csv_path, &rows)?;
    Ok(rows)
}

fn failed_row(hash: String, n: usize, params: usize, seed: u64, e: &Error) -> AblationRow {
    AblationRow {
        config_hash: hash,
        n,
        params,
        seed,
        psnr_mean: f64::NAN,
        psnr_std: f64::NAN,
        iou_mean: f64::NAN,
        auroc_mean: f64::NAN,
        status: format!("error: {e}").replace(['\n', ','], " "),
    }
}

fn run_variant(run: &RunConfig, dir: &Path) -> Result<EvalReport> {
    let outcome = train::<f32>(run, dir, &TrainRunOptions::default())?;
    let cfg = run.train_config()?;
    let data = load_eval_split::<f32>(&cfg.data_root, Split::Test)?;
    let outputs = EvalOutputs {
        panels: run.eval.panels,
        dir: Some(dir.join("panels")),
    };
    evaluate(
        &outcome.state.models,
        &data,
        cfg.convention,
        cfg.eval_style_seed,
        cfg.train.deterministic_style,
        &outputs,
    )
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblationRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}
