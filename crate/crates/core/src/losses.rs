//! Loss functionals as differentiable graph scalars.
//!
//! Every function takes graph variables and returns a scalar variable. Images
//! are batched (B, C, H, W); "per image" quantities are computed per batch row.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{Binding, ModelSet};
use crate::tensor::{cast, Element, Tensor};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            _ => Err(Error::config(format!("unknown reduction {s:?} (sum | mean)"))),
        }
    }
}

fn reduce<T: Element>(g: &mut Graph<T>, x: Var, r: Reduction) -> Var {
    match r {
        Reduction::Sum => g.sum(x),
        Reduction::Mean => g.mean(x),
    }
}

/// Element-wise |d| + d².
fn l1_plus_l2<T: Element>(g: &mut Graph<T>, d: Var) -> Var {
    let a = g.abs(d);
    let s = g.square(d);
    g.add(a, s)
}

pub fn rec_loss<T: Element>(g: &mut Graph<T>, x: Var, xh: Var, r: Reduction) -> Var {
    let d = g.sub(x, xh);
    let e = l1_plus_l2(g, d);
    reduce(g, e, r)
}

pub fn grad_rec_loss<T: Element>(g: &mut Graph<T>, x: Var, xh: Var, r: Reduction) -> Var {
    let gx = g.grad_image(x);
    let gh = g.grad_image(xh);
    rec_loss(g, gx, gh, r)
}

/// Per-image indicator |ψ| > mean |ψ|, as 0/1 values.
pub fn distinction_indicator<T: Element>(psi: &Tensor<T>) -> Tensor<T> {
    let n = psi.shape()[0];
    let per = psi.numel() / n.max(1);
    let mut out = Tensor::zeros(psi.shape());
    for (src, dst) in psi.data().chunks(per).zip(out.data_mut().chunks_mut(per)) {
        let mean = src.iter().map(|v| v.abs()).sum::<T>() / cast(per as f64);
        for (s, d) in src.iter().zip(dst.iter_mut()) {
            if s.abs() > mean {
                *d = T::one();
            }
        }
    }
    out
}

/// Reconstruction restricted to each image's distinction indicator, normalised
/// by the indicator's size (0 for an empty indicator). Images are averaged
/// (mean) or summed (sum). The indicator itself carries no gradient.
pub fn dis_rec_loss<T: Element>(g: &mut Graph<T>, x: Var, xh: Var, psi1: Var, r: Reduction) -> Var {
    let ind = distinction_indicator(g.value(psi1));
    let n = ind.shape()[0];
    let per = ind.numel() / n.max(1);
    let counts: Vec<T> = ind
        .data()
        .chunks(per)
        .map(|c| {
            let k = c.iter().copied().sum::<T>();
            if k > T::zero() {
                T::one() / k
            } else {
                T::zero()
            }
        })
        .collect();
    let ind = g.constant(ind);
    let d = g.sub(x, xh);
    let dm = g.mul(d, ind);
    let e = l1_plus_l2(g, dm);
    let per_image = g.sum_per_sample(e);
    let inv = g.constant(Tensor::from_vec(&[n], counts).unwrap());
    let normed = g.mul_per_sample(per_image, inv);
    reduce(g, normed, r)
}

/// mean((Σψᵢ² − (Σψᵢ)²)²) over all elements.
pub fn sqr_loss<T: Element>(g: &mut Graph<T>, psis: &[Var]) -> Var {
    let mut sq = g.square(psis[0]);
    let mut s = psis[0];
    for &p in &psis[1..] {
        let p2 = g.square(p);
        sq = g.add(sq, p2);
        s = g.add(s, p);
    }
    let s2 = g.square(s);
    let inner = g.sub(sq, s2);
    let outer = g.square(inner);
    g.mean(outer)
}

/// Population variance of the mean energies of branches 2..N; 0 for N ≤ 2.
pub fn balance_loss<T: Element>(g: &mut Graph<T>, psis: &[Var]) -> Var {
    if psis.len() <= 2 {
        return g.constant(Tensor::scalar(T::zero()));
    }
    let energies: Vec<Var> = psis[1..]
        .iter()
        .map(|&p| {
            let p2 = g.square(p);
            g.mean(p2)
        })
        .collect();
    let k: T = cast(energies.len() as f64);
    let total = energies[1..].iter().fold(energies[0], |acc, &e| g.add(acc, e));
    let mean = g.scale(total, T::one() / k);
    let mut var = None;
    for &e in &energies {
        let d = g.sub(e, mean);
        let d2 = g.square(d);
        var = Some(match var {
            None => d2,
            Some(acc) => g.add(acc, d2),
        });
    }
    g.scale(var.unwrap(), T::one() / k)
}

pub fn sparse_loss<T: Element>(g: &mut Graph<T>, psi1: Var) -> Var {
    let a = g.abs(psi1);
    g.mean(a)
}

/// Mean of ln(1 + e^(−l)): the loss for logits that should read "real".
pub fn real_term<T: Element>(g: &mut Graph<T>, logits: Var) -> Var {
    let n = g.neg(logits);
    let s = g.softplus(n);
    g.mean(s)
}

/// Mean of ln(1 + e^l): the loss for logits that should read "fake".
pub fn fake_term<T: Element>(g: &mut Graph<T>, logits: Var) -> Var {
    let s = g.softplus(logits);
    g.mean(s)
}

/// Discriminator objective: real term plus the mean of the two fake terms.
pub fn d_adv_loss<T: Element>(g: &mut Graph<T>, real: Var, fake0: Var, fake1: Var) -> Var {
    let r = real_term(g, real);
    let f0 = fake_term(g, fake0);
    let f1 = fake_term(g, fake1);
    let f = g.add(f0, f1);
    let f = g.scale(f, cast(0.5));
    g.add(r, f)
}

/// Generator objective: mean of the two non-saturating "look real" terms.
pub fn g_adv_loss<T: Element>(g: &mut Graph<T>, fake0: Var, fake1: Var) -> Var {
    let a = real_term(g, fake0);
    let b = real_term(g, fake1);
    let s = g.add(a, b);
    g.scale(s, cast(0.5))
}

/// R1 penalty 0.5 · mean_b ‖∂D_y(x_b)/∂x_b‖² on real samples.
///
/// Returns (penalty, real logits). The penalty node has the exact penalty as
/// its value and the exact parameter gradient: it is built as a directional
/// derivative of D along the (frozen) input gradient, which needs no second
/// reverse pass.
pub fn r1_penalty<T: Element>(
    g: &mut Graph<T>,
    models: &ModelSet<T>,
    b: &Binding,
    x_real: &Tensor<T>,
    y: &[usize],
) -> Result<(Var, Var)> {
    let v = models.input_gradient(x_real, y)?;
    let xv = g.constant(x_real.clone());
    let vv = g.constant(v);
    let (logits, tangent) = models.discriminate_with_tangent(g, b, xv, vv, y);
    let s = g.mean(tangent);
    let half = cast::<T>(0.5) * g.scalar(s);
    Ok((g.add_scalar(s, -half), logits))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub rec: f64,
    pub grad_rec: f64,
    pub dis_rec: f64,
    pub sqr: f64,
    pub bal: f64,
    pub sparse: f64,
    pub adv: f64,
    pub r1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec: 1.0,
            grad_rec: 1.0,
            dis_rec: 1.0,
            sqr: 0.5,
            bal: 0.1,
            sparse: 0.1,
            adv: 1.0,
            r1: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.rec, self.grad_rec, self.dis_rec, self.sqr, self.bal, self.sparse, self.adv, self.r1,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        Ok(())
    }

    /// Only the pixel reconstruction term switched on.
    pub fn rec_only() -> Self {
        Self {
            rec: 1.0,
            grad_rec: 0.0,
            dis_rec: 0.0,
            sqr: 0.0,
            bal: 0.0,
            sparse: 0.0,
            adv: 0.0,
            r1: 0.0,
        }
    }
}

/// Generator-side loss terms of one step.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub rec: Var,
    pub grad_rec: Var,
    pub dis_rec: Var,
    pub sqr: Var,
    pub bal: Var,
    pub sparse: Var,
    pub adv: Var,
}

/// Unweighted term values of one step plus the weighted generator total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: u64,
    pub rec: f64,
    pub grad_rec: f64,
    pub dis_rec: f64,
    pub sqr: f64,
    pub bal: f64,
    pub sparse: f64,
    pub adv: f64,
    pub total: f64,
    pub d_adv: f64,
    /// 0 on steps where the lazy penalty was skipped.
    pub r1: f64,
}

impl LossReport {
    /// Σ λ·term over the generator terms.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.rec * self.rec
            + w.grad_rec * self.grad_rec
            + w.dis_rec * self.dis_rec
            + w.sqr * self.sqr
            + w.bal * self.bal
            + w.sparse * self.sparse
            + w.adv * self.adv
    }

    pub fn all_finite(&self) -> bool {
        [
            self.rec, self.grad_rec, self.dis_rec, self.sqr, self.bal, self.sparse, self.adv, self.total,
            self.d_adv, self.r1,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn named_terms(&self) -> [(&'static str, f64); 10] {
        [
            ("rec", self.rec),
            ("grad_rec", self.grad_rec),
            ("dis_rec", self.dis_rec),
            ("sqr", self.sqr),
            ("bal", self.bal),
            ("sparse", self.sparse),
            ("adv", self.adv),
            ("total", self.total),
            ("d_adv", self.d_adv),
            ("r1", self.r1),
        ]
    }
}

/// Weighted generator objective. Terms with zero weight are left out of the graph.
pub fn total_loss<T: Element>(
    g: &mut Graph<T>,
    w: &LossWeights,
    parts: &LossParts,
    iteration: u64,
) -> Result<(Var, LossReport)> {
    let terms = [
        (w.rec, parts.rec),
        (w.grad_rec, parts.grad_rec),
        (w.dis_rec, parts.dis_rec),
        (w.sqr, parts.sqr),
        (w.bal, parts.bal),
        (w.sparse, parts.sparse),
        (w.adv, parts.adv),
    ];
    let value = |g: &Graph<T>, v: Var| g.scalar(v).as_f64();
    let mut report = LossReport {
        iteration,
        rec: value(g, parts.rec),
        grad_rec: value(g, parts.grad_rec),
        dis_rec: value(g, parts.dis_rec),
        sqr: value(g, parts.sqr),
        bal: value(g, parts.bal),
        sparse: value(g, parts.sparse),
        adv: value(g, parts.adv),
        ..LossReport::default()
    };
    for (name, v) in report.named_terms().iter().take(7) {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss term {name} = {v} at iteration {iteration}"
            )));
        }
    }
    let mut total = g.constant(Tensor::scalar(T::zero()));
    for (wk, v) in terms {
        if wk != 0.0 {
            let t = g.scale(v, cast(wk));
            total = g.add(total, t);
        }
    }
    report.total = g.scalar(total).as_f64();
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    fn eval(f: impl FnOnce(&mut Graph<f64>) -> Var) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g);
        g.scalar(v)
    }

    #[test]
    fn rec_hand_values() {
        let v = eval(|g| {
            let x = g.constant(t(&[1, 1, 1, 1], &[1.0]));
            let y = g.constant(t(&[1, 1, 1, 1], &[0.5]));
            rec_loss(g, x, y, Reduction::Sum)
        });
        assert!((v - 0.75).abs() < 1e-12);
    }

    #[test]
    fn dis_rec_guard_and_scale_invariance() {
        let x = t(&[1, 1, 2, 2], &[0.3, -0.2, 0.5, 0.1]);
        let xh = t(&[1, 1, 2, 2], &[0.1, 0.0, 0.0, 0.4]);
        let zero = eval(|g| {
            let (a, b, p) = (g.constant(x.clone()), g.constant(xh.clone()), g.constant(Tensor::zeros(&[1, 1, 2, 2])));
            dis_rec_loss(g, a, b, p, Reduction::Mean)
        });
        assert_eq!(zero, 0.0);
        let psi = t(&[1, 1, 2, 2], &[0.2, -0.9, 0.05, 0.4]);
        let base = eval(|g| {
            let (a, b, p) = (g.constant(x.clone()), g.constant(xh.clone()), g.constant(psi.clone()));
            dis_rec_loss(g, a, b, p, Reduction::Mean)
        });
        let scaled = eval(|g| {
            let (a, b, p) = (g.constant(x.clone()), g.constant(xh.clone()), g.constant(psi.map(|v| v * 7.5)));
            dis_rec_loss(g, a, b, p, Reduction::Mean)
        });
        assert_eq!(base, scaled);
    }

    #[test]
    fn balance_is_zero_for_two_branches() {
        let v = eval(|g| {
            let a = g.constant(t(&[1], &[0.3]));
            let b = g.constant(t(&[1], &[0.9]));
            balance_loss(g, &[a, b])
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn total_matches_weighted_sum_and_rejects_nan() {
        let mut g = Graph::<f64>::new();
        let vals = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];
        let vars: Vec<Var> = vals.iter().map(|&v| g.constant(Tensor::scalar(v))).collect();
        let parts = LossParts {
            rec: vars[0],
            grad_rec: vars[1],
            dis_rec: vars[2],
            sqr: vars[3],
            bal: vars[4],
            sparse: vars[5],
            adv: vars[6],
        };
        let w = LossWeights::default();
        let (_, report) = total_loss(&mut g, &w, &parts, 3).unwrap();
        assert!((report.total - report.weighted_total(&w)).abs() <= 1e-12);
        let nan = g.constant(Tensor::scalar(f64::NAN));
        let parts = LossParts { sqr: nan, ..parts };
        assert!(matches!(total_loss(&mut g, &w, &parts, 3), Err(Error::NonFinite(_))));
    }

    #[test]
    fn reduction_parses() {
        assert_eq!("sum".parse::<Reduction>().unwrap(), Reduction::Sum);
        assert!("max".parse::<Reduction>().is_err());
    }

    #[test]
    fn r1_surrogate_has_penalty_value_and_gradient() {
        use crate::model::{init_models, Group, NetConfig};
        let cfg = NetConfig {
            num_branches: 1,
            image_size: 8,
            base_width: 2,
            disc_width: 2,
            mapping_width: 4,
            ..NetConfig::default()
        };
        let mut m = init_models::<f64>(&cfg, 11).unwrap();
        let x = Tensor::from_fn(&[2, 1, 8, 8], |i| ((i * 37 % 17) as f64 / 8.0) - 1.0);
        let y = [0, 1];
        let penalty = |m: &ModelSet<f64>| {
            let gx = m.input_gradient(&x, &y).unwrap();
            0.5 * gx.data().iter().map(|v| v * v).sum::<f64>() / 2.0
        };
        let mut g = Graph::new();
        let mut b = Binding::new(&m);
        b.bind(&mut g, &m, Group::Discriminator, true);
        let (r1, _) = r1_penalty(&mut g, &m, &b, &x, &y).unwrap();
        assert!((g.scalar(r1) - penalty(&m)).abs() < 1e-12);
        let grads = g.backward(r1);
        let ids: Vec<usize> = m.params().ids_in(Group::Discriminator).collect();
        let eps = 1e-6;
        for &id in &ids {
            let analytic = grads
                .get(b.get(id).unwrap())
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(m.params().tensor(id).shape()));
            for k in [0, analytic.numel() / 2, analytic.numel() - 1] {
                let orig = m.params().tensor(id).data()[k];
                m.params_mut().tensor_mut(id).data_mut()[k] = orig + eps;
                let up = penalty(&m);
                m.params_mut().tensor_mut(id).data_mut()[k] = orig - eps;
                let down = penalty(&m);
                m.params_mut().tensor_mut(id).data_mut()[k] = orig;
                let fd = (up - down) / (2.0 * eps);
                let a = analytic.data()[k];
                assert!((a - fd).abs() <= 1e-5 * (1.0 + fd.abs()), "{} [{k}]: {a} vs {fd}", m.params().name(id));
            }
        }
    }
}
