//! Additive composition of branch outputs.
//!
//! Training mixes the non-class branches (2..N) of the two style passes with a
//! per-batch blend vector α; inference simply sums all branches and returns the
//! first one as the class distinction map. Summation always runs in ascending
//! branch order so results are bit-reproducible.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{cast, Element, Tensor};

/// Branch outputs ψ₁…ψ_N of one input under one style.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchSet<T: Element> {
    pub psis: Vec<Tensor<T>>,
    pub style_class: u8,
}

impl<T: Element> BranchSet<T> {
    pub fn new(psis: Vec<Tensor<T>>, style_class: u8) -> Result<Self> {
        let first = psis
            .first()
            .ok_or_else(|| Error::shape("a branch set needs at least one branch"))?;
        for p in &psis[1..] {
            first.expect_same_shape(p)?;
        }
        Ok(Self { psis, style_class })
    }

    pub fn len(&self) -> usize {
        self.psis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psis.is_empty()
    }

    /// Branch set of sample `i` of a batched set.
    pub fn sample(&self, i: usize) -> Self {
        Self {
            psis: self.psis.iter().map(|p| p.index0(i)).collect(),
            style_class: self.style_class,
        }
    }
}

/// Blend weights for branches 2..N; one vector per batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaVector {
    pub alpha: Vec<f64>,
    pub batch: u64,
}

pub fn sample_alpha<R: Rng + ?Sized>(num_branches: usize, batch: u64, rng: &mut R) -> AlphaVector {
    AlphaVector {
        alpha: (1..num_branches).map(|_| rng.random::<f64>()).collect(),
        batch,
    }
}

fn check_pair<T: Element>(b0: &BranchSet<T>, b1: &BranchSet<T>, a: &AlphaVector) -> Result<()> {
    if b0.len() != b1.len() || b0.is_empty() {
        return Err(Error::shape(format!(
            "branch sets of length {} and {}",
            b0.len(),
            b1.len()
        )));
    }
    if a.alpha.len() + 1 != b0.len() {
        return Err(Error::shape(format!(
            "{} blend weights for {} branches",
            a.alpha.len(),
            b0.len()
        )));
    }
    b0.psis[0].expect_same_shape(&b1.psis[0])
}

fn blend_one<T: Element>(own: &[Tensor<T>], other: &[Tensor<T>], alpha: &[f64]) -> Tensor<T> {
    let mut acc = own[0].clone();
    for (p, &a) in own[1..].iter().zip(alpha) {
        let a: T = cast(a);
        acc.data_mut().iter_mut().zip(p.data()).for_each(|(s, &v)| *s += a * v);
    }
    for (p, &a) in other[1..].iter().zip(alpha) {
        let a: T = cast(1.0 - a);
        acc.data_mut().iter_mut().zip(p.data()).for_each(|(s, &v)| *s += a * v);
    }
    acc
}

/// Returns (x̂⁰, x̂¹). With a single branch this is (ψ₁⁰, ψ₁¹).
pub fn alpha_blend<T: Element>(
    b0: &BranchSet<T>,
    b1: &BranchSet<T>,
    a: &AlphaVector,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_pair(b0, b1, a)?;
    Ok((
        blend_one(&b0.psis, &b1.psis, &a.alpha),
        blend_one(&b1.psis, &b0.psis, &a.alpha),
    ))
}

/// Returns (Σψᵢ, ψ₁).
pub fn compose_inference<T: Element>(b: &BranchSet<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = b
        .psis
        .first()
        .ok_or_else(|| Error::shape("cannot compose an empty branch set"))?;
    let mut acc = first.clone();
    for p in &b.psis[1..] {
        acc.expect_same_shape(p)?;
        acc.add_assign(p);
    }
    Ok((acc, first.clone()))
}

/// Maps a signed map in [-1, 1] to [0, 1] for display.
pub fn display_transform<T: Element>(map: &Tensor<T>) -> Tensor<T> {
    let half: T = cast(0.5);
    map.map(|v| ((v + T::one()) * half).max(T::zero()).min(T::one()))
}

fn blend_graph_one<T: Element>(g: &mut Graph<T>, own: &[Var], other: &[Var], alpha: &[f64]) -> Var {
    let mut acc = own[0];
    for (&p, &a) in own[1..].iter().zip(alpha) {
        let t = g.scale(p, cast(a));
        acc = g.add(acc, t);
    }
    for (&p, &a) in other[1..].iter().zip(alpha) {
        let t = g.scale(p, cast(1.0 - a));
        acc = g.add(acc, t);
    }
    acc
}

/// Differentiable [`alpha_blend`] with one α shared by the whole batch.
pub fn alpha_blend_graph<T: Element>(g: &mut Graph<T>, p0: &[Var], p1: &[Var], alpha: &[f64]) -> (Var, Var) {
    assert!(p0.len() == p1.len() && alpha.len() + 1 == p0.len(), "alpha_blend_graph: lengths");
    (
        blend_graph_one(g, p0, p1, alpha),
        blend_graph_one(g, p1, p0, alpha),
    )
}

/// Differentiable blend with a separate α row per sample; `alphas[b]` has N−1 entries.
pub fn alpha_blend_per_sample_graph<T: Element>(
    g: &mut Graph<T>,
    p0: &[Var],
    p1: &[Var],
    alphas: &[Vec<f64>],
) -> (Var, Var) {
    let n = p0.len();
    assert!(p1.len() == n && alphas.iter().all(|a| a.len() + 1 == n), "alpha_blend_per_sample_graph: lengths");
    let column = |g: &mut Graph<T>, i: usize, complement: bool| {
        let vals = alphas
            .iter()
            .map(|a| cast(if complement { 1.0 - a[i] } else { a[i] }))
            .collect();
        g.constant(Tensor::from_vec(&[alphas.len()], vals).unwrap())
    };
    let blend = |g: &mut Graph<T>, own: &[Var], other: &[Var]| {
        let mut acc = own[0];
        for (i, &p) in own[1..].iter().enumerate() {
            let a = column(g, i, false);
            let t = g.mul_per_sample(p, a);
            acc = g.add(acc, t);
        }
        for (i, &p) in other[1..].iter().enumerate() {
            let a = column(g, i, true);
            let t = g.mul_per_sample(p, a);
            acc = g.add(acc, t);
        }
        acc
    };
    let x0 = blend(g, p0, p1);
    let x1 = blend(g, p1, p0);
    (x0, x1)
}

/// Differentiable Σψᵢ in ascending order.
pub fn sum_graph<T: Element>(g: &mut Graph<T>, psis: &[Var]) -> Var {
    psis[1..].iter().fold(psis[0], |acc, &p| g.add(acc, p))
}
