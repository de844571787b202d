//! SVD-parameterized adapters `ΔW = P·diag(Λ⊙m)·Q`, their orthogonality
//! penalty, gradient-sensitivity importance scores and budgeted pruning,
//! plus a plain fixed-rank LoRA for comparison runs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Standard deviation of the Gaussian init for `P` and `Q`.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetMode {
    /// One ranking across all adapted layers.
    #[default]
    Global,
    /// Every layer keeps the same number of components.
    PerLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub r_max: usize,
    pub r_target: usize,
    /// 1-based epochs after which pruning runs.
    pub prune_epochs: Vec<usize>,
    pub lambda_ortho: f64,
    #[serde(default)]
    pub budget_mode: BudgetMode,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            r_max: 8,
            r_target: 4,
            prune_epochs: vec![3, 7, 12],
            lambda_ortho: 0.003,
            budget_mode: BudgetMode::Global,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r_max == 0 || self.r_target == 0 || self.r_target > self.r_max {
            return Err(Error::contract(format!(
                "need 0 < r_target ({}) <= r_max ({})",
                self.r_target, self.r_max
            )));
        }
        if self.prune_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract("prune_epochs must be strictly increasing"));
        }
        if self.prune_epochs.first() == Some(&0) {
            return Err(Error::contract("prune epochs are 1-based"));
        }
        if !(self.lambda_ortho >= 0.0 && self.lambda_ortho.is_finite()) {
            return Err(Error::contract("lambda_ortho must be nonnegative"));
        }
        Ok(())
    }

    /// Total active components after each prune event for `layers` adapted
    /// layers: linear from `layers·r_max` down to exactly `layers·r_target`.
    pub fn budget_schedule(&self, layers: usize) -> Vec<usize> {
        budget_schedule(layers, self.r_max, self.r_target, self.prune_epochs.len())
    }
}

pub fn budget_schedule(layers: usize, r_max: usize, r_target: usize, events: usize) -> Vec<usize> {
    let start = (layers * r_max) as f64;
    let end = (layers * r_target) as f64;
    (1..=events)
        .map(|k| {
            if k == events {
                layers * r_target
            } else {
                (start - (start - end) * k as f64 / events as f64).round() as usize
            }
        })
        .collect()
}

/// One adapted layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterState<T: Real = f32> {
    pub layer_name: String,
    /// `d_out × r_max`
    pub p: Tensor<T>,
    /// `r_max × d_in`
    pub q: Tensor<T>,
    /// `r_max`
    pub lambda: Tensor<T>,
    mask: Vec<bool>,
    importance: Vec<f64>,
    importance_steps: usize,
}

impl<T: Real> AdapterState<T> {
    /// `P, Q ~ N(0, 0.02²)`, `Λ = 0`, all components active.
    pub fn init<R: Rng + ?Sized>(layer_name: &str, d_out: usize, d_in: usize, r_max: usize, rng: &mut R) -> Self {
        let p = Tensor::randn(&[d_out, r_max], INIT_STD, rng);
        let q = Tensor::randn(&[r_max, d_in], INIT_STD, rng);
        Self::from_parts(layer_name, p, q, Tensor::zeros(&[r_max]), vec![true; r_max]).expect("consistent init shapes")
    }

    pub fn from_parts(layer_name: &str, p: Tensor<T>, q: Tensor<T>, lambda: Tensor<T>, mask: Vec<bool>) -> Result<Self> {
        let r = lambda.len();
        if p.ndim() != 2 || q.ndim() != 2 || lambda.ndim() != 1 || p.shape()[1] != r || q.shape()[0] != r || mask.len() != r {
            return Err(Error::shape(
                "adapter",
                format!(
                    "P {:?}, Q {:?}, lambda {:?}, mask {}",
                    p.shape(),
                    q.shape(),
                    lambda.shape(),
                    mask.len()
                ),
            ));
        }
        Ok(Self {
            layer_name: layer_name.to_string(),
            p,
            q,
            lambda,
            mask,
            importance: vec![0.0; r],
            importance_steps: 0,
        })
    }

    pub fn r_max(&self) -> usize {
        self.mask.len()
    }

    pub fn d_out(&self) -> usize {
        self.p.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.q.shape()[1]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn active_rank(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn mask_tensor(&self) -> Tensor<T> {
        let data = self.mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
        Tensor::new(&[self.mask.len()], data).expect("mask shape")
    }

    pub fn importance(&self) -> &[f64] {
        &self.importance
    }

    /// Overwrites the running importance means (for tests and replays).
    pub fn set_importance(&mut self, scores: &[f64]) -> Result<()> {
        if scores.len() != self.r_max() || scores.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::contract("importance must be r_max nonnegative values"));
        }
        self.importance.copy_from_slice(scores);
        self.importance_steps = 1;
        Ok(())
    }

    pub fn p_name(&self) -> String {
        format!("{}.adapter.P", self.layer_name)
    }

    pub fn q_name(&self) -> String {
        format!("{}.adapter.Q", self.layer_name)
    }

    pub fn lambda_name(&self) -> String {
        format!("{}.adapter.lambda", self.layer_name)
    }

    pub fn mask_name(&self) -> String {
        format!("{}.adapter.mask", self.layer_name)
    }

    /// Dense `P·diag(Λ⊙m)·Q` outside any graph.
    pub fn delta(&self) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let v = self.bind(&mut g, false)?;
        let d = adapter_delta(&mut g, &v)?;
        Ok(g.value(d).clone())
    }

    /// Puts the adapter tensors on a graph; the mask is always a constant.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> Result<AdapterVars> {
        Ok(AdapterVars {
            p: g.param(&self.p_name(), self.p.clone(), requires_grad)?,
            q: g.param(&self.q_name(), self.q.clone(), requires_grad)?,
            lambda: g.param(&self.lambda_name(), self.lambda.clone(), requires_grad)?,
            mask: g.constant(self.mask_tensor()),
        })
    }

    /// Folds `|λ_i|·|g_i|` into the running mean since the last prune.
    /// Masked components score 0.
    pub fn accumulate_importance(&mut self, grad_lambda: &[T]) -> Result<()> {
        if grad_lambda.len() != self.r_max() {
            return Err(Error::shape(
                "accumulate_importance",
                format!("gradient length {} vs r_max {}", grad_lambda.len(), self.r_max()),
            ));
        }
        let scores = step_scores(self.lambda.data(), grad_lambda);
        self.importance_steps += 1;
        let n = self.importance_steps as f64;
        for ((acc, s), &active) in self.importance.iter_mut().zip(scores).zip(&self.mask) {
            let s = if active { s } else { 0.0 };
            *acc += (s - *acc) / n;
        }
        Ok(())
    }

    fn reset_importance(&mut self) {
        self.importance.iter_mut().for_each(|s| *s = 0.0);
        self.importance_steps = 0;
    }
}

/// Per-component sensitivity `|λ_i|·|∂L/∂λ_i|`.
pub fn step_scores<T: Real>(lambda: &[T], grad: &[T]) -> Vec<f64> {
    lambda
        .iter()
        .zip(grad)
        .map(|(&l, &g)| l.as_f64().abs() * g.as_f64().abs())
        .collect()
}

/// Graph handles of one adapter.
#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub p: Var,
    pub q: Var,
    pub lambda: Var,
    pub mask: Var,
}

/// `P·diag(Λ⊙m)·Q`, differentiable in `P`, `Q`, `Λ` only.
pub fn adapter_delta<T: Real>(g: &mut Graph<T>, v: &AdapterVars) -> Result<Var> {
    let lm = g.mul(v.lambda, v.mask)?;
    let scaled = g.mul(v.p, lm)?;
    g.matmul(scaled, v.q)
}

/// `x·(W + ΔW)ᵀ + b` evaluated as `x·Wᵀ + ((x·Qᵀ)⊙(Λ⊙m))·Pᵀ + b`.
pub fn adapted_forward<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    bias: Option<Var>,
    v: &AdapterVars,
) -> Result<Var> {
    let base = g.linear(x, w, bias)?;
    let xq = g.matmul_t(x, v.q, false, true)?;
    let lm = g.mul(v.lambda, v.mask)?;
    let xs = g.mul(xq, lm)?;
    let delta = g.matmul_t(xs, v.p, false, true)?;
    if g.shape(delta) != g.shape(base) {
        return Err(Error::shape(
            "adapted_forward",
            format!("{:?} vs {:?}", g.shape(delta), g.shape(base)),
        ));
    }
    g.add(base, delta)
}

/// `‖PᵀP − I‖²_F + ‖QQᵀ − I‖²_F`.
pub fn ortho_penalty<T: Real>(g: &mut Graph<T>, p: Var, q: Var) -> Result<Var> {
    let r = g.shape(p)[1];
    let eye = g.constant(Tensor::eye(r));
    let ptp = g.matmul_t(p, p, true, false)?;
    let qqt = g.matmul_t(q, q, false, true)?;
    let dp = g.sub(ptp, eye)?;
    let dq = g.sub(qqt, eye)?;
    let sp = g.square(dp)?;
    let sq = g.square(dq)?;
    let a = g.sum(sp)?;
    let b = g.sum(sq)?;
    g.add(a, b)
}

/// Keeps the `budget` highest-importance active components across all
/// layers. Ties go to the lower `(layer, component)` index. Importance
/// accumulators are reset afterwards.
pub fn prune_global<T: Real>(adapters: &mut [AdapterState<T>], budget: usize) -> Result<()> {
    let mut ranked: Vec<(usize, usize, f64)> = adapters
        .iter()
        .enumerate()
        .flat_map(|(l, a)| {
            a.mask
                .iter()
                .enumerate()
                .filter(|(_, &m)| m)
                .map(move |(i, _)| (l, i, a.importance[i]))
        })
        .collect();
    if budget > ranked.len() {
        return Err(Error::contract(format!(
            "prune budget {budget} exceeds {} active components",
            ranked.len()
        )));
    }
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    for &(l, i, _) in &ranked[budget..] {
        adapters[l].mask[i] = false;
    }
    adapters.iter_mut().for_each(AdapterState::reset_importance);
    Ok(())
}

/// Like [`prune_global`] but each layer keeps `rank` components.
pub fn prune_per_layer<T: Real>(adapters: &mut [AdapterState<T>], rank: usize) -> Result<()> {
    for a in adapters.iter_mut() {
        let mut ranked: Vec<(usize, f64)> = a
            .mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| (i, a.importance[i]))
            .collect();
        if rank > ranked.len() {
            return Err(Error::contract(format!(
                "{}: rank {rank} exceeds {} active components",
                a.layer_name,
                ranked.len()
            )));
        }
        ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        for &(i, _) in &ranked[rank..] {
            a.mask[i] = false;
        }
        a.reset_importance();
    }
    Ok(())
}

/// Fixed-rank LoRA residual `ΔW = B·A`.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedLoraState<T: Real = f32> {
    pub layer_name: String,
    /// `r × d_in`
    pub a: Tensor<T>,
    /// `d_out × r`
    pub b: Tensor<T>,
}

impl<T: Real> FixedLoraState<T> {
    /// `A ~ U(±1/√d_in)`, `B = 0`.
    pub fn init<R: Rng + ?Sized>(layer_name: &str, d_out: usize, d_in: usize, r: usize, rng: &mut R) -> Self {
        Self {
            layer_name: layer_name.to_string(),
            a: Tensor::uniform(&[r, d_in], 1.0 / (d_in as f64).sqrt(), rng),
            b: Tensor::zeros(&[d_out, r]),
        }
    }

    pub fn from_parts(layer_name: &str, a: Tensor<T>, b: Tensor<T>) -> Result<Self> {
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[0] != b.shape()[1] {
            return Err(Error::shape("fixed_lora", format!("A {:?}, B {:?}", a.shape(), b.shape())));
        }
        Ok(Self {
            layer_name: layer_name.to_string(),
            a,
            b,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn a_name(&self) -> String {
        format!("{}.lora.A", self.layer_name)
    }

    pub fn b_name(&self) -> String {
        format!("{}.lora.B", self.layer_name)
    }

    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> Result<LoraVars> {
        Ok(LoraVars {
            a: g.param(&self.a_name(), self.a.clone(), requires_grad)?,
            b: g.param(&self.b_name(), self.b.clone(), requires_grad)?,
        })
    }

    pub fn delta(&self) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let v = self.bind(&mut g, false)?;
        let d = fixed_lora_delta(&mut g, &v)?;
        Ok(g.value(d).clone())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LoraVars {
    pub a: Var,
    pub b: Var,
}

pub fn fixed_lora_delta<T: Real>(g: &mut Graph<T>, v: &LoraVars) -> Result<Var> {
    g.matmul(v.b, v.a)
}

/// `x·Wᵀ + (x·Aᵀ)·Bᵀ + b`.
pub fn lora_forward<T: Real>(g: &mut Graph<T>, x: Var, w: Var, bias: Option<Var>, v: &LoraVars) -> Result<Var> {
    let base = g.linear(x, w, bias)?;
    let xa = g.matmul_t(x, v.a, false, true)?;
    let delta = g.matmul_t(xa, v.b, false, true)?;
    g.add(base, delta)
}
