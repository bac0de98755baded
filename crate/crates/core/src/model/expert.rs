//! Expert Consultation: a generalist projection plus one expert projection
//! per task, mixed by router-derived task weights.
//!
//! For patches `z` (N x d_f) the router produces per-patch task logits
//! `FC2(ReLU(FC1(z)))` (N x T). The target task's logit is scaled by `gamma`,
//! each row is normalized across tasks, rows are averaged into one weight
//! per task and the target weight is shifted by `beta`. The projection is
//! `theta_general + sum_i w_i * theta_i`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::init::{uniform, xavier};
use crate::error::{contract, Result};
use crate::numerics::{graph::softmax_rows, Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::Rng;

/// How router logits become per-patch task weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EcNormalization {
    /// Target logit scaled by gamma, then an ordinary softmax across tasks.
    #[default]
    Softmax,
    /// The printed form: the target term of the denominator is not
    /// exponentiated. Rows do not sum to one; kept for comparison only.
    Literal,
}

/// Task conditioning handed to Expert Consultation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conditioning {
    pub task: Option<usize>,
    pub gamma: f64,
    pub beta: f64,
}

impl Conditioning {
    pub fn task_aware(task: usize, gamma: f64, beta: f64) -> Self {
        Self {
            task: Some(task),
            gamma,
            beta,
        }
    }

    /// No target task: gamma = 1, beta = 0.
    pub fn task_agnostic() -> Self {
        Self {
            task: None,
            gamma: 1.0,
            beta: 0.0,
        }
    }

    fn effective(&self) -> (Option<usize>, f64, f64) {
        match self.task {
            Some(t) => (Some(t), self.gamma, self.beta),
            None => (None, 1.0, 0.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExpertCommittee {
    pub d_f: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub normalization: EcNormalization,
    general: ParamId,
    experts: Vec<ParamId>,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: Vec<ParamId>,
    fc2_b: Vec<ParamId>,
}

impl ExpertCommittee {
    pub fn new(
        store: &mut ParamStore,
        d_f: usize,
        d_model: usize,
        d_hidden: usize,
        normalization: EcNormalization,
        rng: &mut Rng,
    ) -> Self {
        Self {
            d_f,
            d_model,
            d_hidden,
            normalization,
            general: store.add("ec.general", xavier(rng, d_f, d_model)),
            experts: Vec::new(),
            fc1_w: store.add("ec.router.fc1.w", xavier(rng, d_f, d_hidden)),
            fc1_b: store.add("ec.router.fc1.b", Tensor::zeros(1, d_hidden)),
            fc2_w: Vec::new(),
            fc2_b: Vec::new(),
        }
    }

    /// Re-attaches to parameters already present in `store` (checkpoint load).
    pub fn attach(
        store: &ParamStore,
        d_f: usize,
        d_model: usize,
        d_hidden: usize,
        normalization: EcNormalization,
    ) -> Result<Self> {
        let get = |name: &str| {
            store
                .id(name)
                .ok_or_else(|| crate::Error::Contract(format!("missing parameter {name}")))
        };
        let mut c = Self {
            d_f,
            d_model,
            d_hidden,
            normalization,
            general: get("ec.general")?,
            experts: Vec::new(),
            fc1_w: get("ec.router.fc1.w")?,
            fc1_b: get("ec.router.fc1.b")?,
            fc2_w: Vec::new(),
            fc2_b: Vec::new(),
        };
        let mut t = 0;
        while let Some(e) = store.id(&format!("ec.expert.{t}")) {
            c.experts.push(e);
            c.fc2_w.push(get(&format!("ec.router.fc2.{t}.w"))?);
            c.fc2_b.push(get(&format!("ec.router.fc2.{t}.b"))?);
            t += 1;
        }
        Ok(c)
    }

    pub fn expert_count(&self) -> usize {
        self.experts.len()
    }

    pub fn general(&self) -> ParamId {
        self.general
    }

    pub fn experts(&self) -> &[ParamId] {
        &self.experts
    }

    pub fn router_rows(&self) -> impl Iterator<Item = (ParamId, ParamId)> + '_ {
        self.fc2_w.iter().copied().zip(self.fc2_b.iter().copied())
    }

    /// Appends a zero expert and a small random router row.
    pub fn add_expert(&mut self, store: &mut ParamStore, rng: &mut Rng) -> usize {
        let t = self.experts.len();
        self.experts.push(store.add(
            format!("ec.expert.{t}"),
            Tensor::zeros(self.d_f, self.d_model),
        ));
        self.fc2_w.push(store.add(
            format!("ec.router.fc2.{t}.w"),
            uniform(rng, self.d_hidden, 1, 1e-2),
        ));
        let b = rng.random_range(-1e-2..1e-2);
        self.fc2_b
            .push(store.add(format!("ec.router.fc2.{t}.b"), Tensor::scalar(b)));
        t
    }

    /// Freezes experts and router rows with index below `task`.
    pub fn freeze_before(&self, store: &mut ParamStore, task: usize) {
        for t in 0..task.min(self.experts.len()) {
            store.set_frozen(self.experts[t], true);
            store.set_frozen(self.fc2_w[t], true);
            store.set_frozen(self.fc2_b[t], true);
        }
    }

    /// Per-patch router logits, `N x T`.
    pub fn router_logits(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Var {
        let w1 = g.param(store, self.fc1_w);
        let b1 = g.param(store, self.fc1_b);
        let h = g.matmul(z, w1);
        let h = g.add_row(h, b1);
        let h = g.relu(h);
        let cols: Vec<Var> = self
            .fc2_w
            .iter()
            .zip(&self.fc2_b)
            .map(|(&w, &b)| {
                let w = g.param(store, w);
                let b = g.param(store, b);
                let l = g.matmul(h, w);
                g.add_row(l, b)
            })
            .collect();
        g.concat_cols(&cols)
    }

    /// Averaged, shifted task weights `1 x T` for a bag.
    pub fn weights(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: Var,
        cond: &Conditioning,
    ) -> Result<Option<Var>> {
        if self.experts.is_empty() {
            return Ok(None);
        }
        let logits = self.router_logits(g, store, z);
        weights_on_graph(g, logits, cond, self.normalization).map(Some)
    }

    /// `theta_general + sum_i w_i * theta_i`.
    pub fn consult(&self, g: &mut Graph, store: &ParamStore, weights: Option<Var>) -> Var {
        let mut acc = g.param(store, self.general);
        if let Some(w) = weights {
            for (i, &e) in self.experts.iter().enumerate() {
                let theta = g.param(store, e);
                let wi = g.slice_cols(w, i, 1);
                let scaled = g.scale_by(theta, wi);
                acc = g.add(acc, scaled);
            }
        }
        acc
    }

    /// Projects patches `N x d_f` into the model space.
    pub fn project(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: Var,
        cond: &Conditioning,
    ) -> Result<Var> {
        let [n, d] = g.shape(z);
        if n == 0 {
            return contract("cannot project an empty bag");
        }
        if d != self.d_f {
            return contract(format!("bag has {d} features, committee expects {}", self.d_f));
        }
        let w = self.weights(g, store, z, cond)?;
        let theta = self.consult(g, store, w);
        Ok(g.matmul(z, theta))
    }
}

fn check_target(cond: &Conditioning, tasks: usize) -> Result<()> {
    if let Some(t) = cond.task {
        if t >= tasks {
            return contract(format!("target task {t} out of range ({tasks} experts)"));
        }
    }
    Ok(())
}

fn weights_on_graph(
    g: &mut Graph,
    logits: Var,
    cond: &Conditioning,
    mode: EcNormalization,
) -> Result<Var> {
    let [n, tasks] = g.shape(logits);
    check_target(cond, tasks)?;
    let (target, gamma, beta) = cond.effective();
    let per_patch = match (mode, target) {
        (EcNormalization::Softmax, None) => g.softmax_rows(logits),
        (EcNormalization::Softmax, Some(t)) => {
            let mut mask = Tensor::filled(n, tasks, 1.0);
            (0..n).for_each(|r| mask.set(r, t, gamma));
            let mask = g.constant(mask);
            let scaled = g.mul(logits, mask);
            g.softmax_rows(scaled)
        }
        (EcNormalization::Literal, None) => g.softmax_rows(logits),
        (EcNormalization::Literal, Some(t)) => {
            let mut scale = Tensor::filled(n, tasks, 1.0);
            let mut others = Tensor::filled(n, tasks, 1.0);
            for r in 0..n {
                scale.set(r, t, gamma);
                others.set(r, t, 0.0);
            }
            let scale = g.constant(scale);
            let others = g.constant(others);
            let scaled = g.mul(logits, scale);
            let numer = g.exp(scaled);
            let e = g.exp(logits);
            let rest = g.mul(e, others);
            let rest = g.row_sums(rest);
            let target_col = g.slice_cols(logits, t, 1);
            let target_col = g.scale(target_col, gamma);
            let denom = g.add(rest, target_col);
            g.div_col(numer, denom)
        }
    };
    let mean = g.mean_rows(per_patch);
    Ok(match target {
        Some(t) if beta != 0.0 => {
            let mut shift = Tensor::zeros(1, tasks);
            shift.set(0, t, beta);
            let shift = g.constant(shift);
            g.add(mean, shift)
        }
        _ => mean,
    })
}

/// Per-patch task weights (`N x T`, before averaging and shifting).
pub fn per_patch_weights(
    logits: &Tensor,
    cond: &Conditioning,
    mode: EcNormalization,
) -> Result<Tensor> {
    check_target(cond, logits.cols())?;
    let (target, gamma, _) = cond.effective();
    let Some(t) = target else {
        return Ok(softmax_rows(logits, false));
    };
    match mode {
        EcNormalization::Softmax => {
            let mut scaled = logits.clone();
            for r in 0..scaled.rows() {
                let v = scaled.get(r, t);
                scaled.set(r, t, v * gamma);
            }
            Ok(softmax_rows(&scaled, false))
        }
        EcNormalization::Literal => {
            let mut out = Tensor::zeros(logits.rows(), logits.cols());
            for r in 0..logits.rows() {
                let row = logits.row(r);
                let denom: f64 = row
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| if i == t { gamma * w } else { w.exp() })
                    .sum();
                for (i, &w) in row.iter().enumerate() {
                    let num = if i == t { (gamma * w).exp() } else { w.exp() };
                    out.set(r, i, num / denom);
                }
            }
            Ok(out)
        }
    }
}

/// Task weights from router logits: normalize per patch, average over
/// patches, shift the target by beta.
pub fn ec_weights(
    logits: &Tensor,
    cond: &Conditioning,
    mode: EcNormalization,
) -> Result<Vec<f64>> {
    if logits.rows() == 0 {
        return contract("ec_weights needs at least one patch");
    }
    let per_patch = per_patch_weights(logits, cond, mode)?;
    let mut w = per_patch.mean_rows().into_data();
    let (target, _, beta) = cond.effective();
    if let Some(t) = target {
        w[t] += beta;
    }
    Ok(w)
}

/// `general + sum_i weights[i] * experts[i]`.
pub fn consult(general: &Tensor, experts: &[Tensor], weights: &[f64]) -> Result<Tensor> {
    if experts.len() != weights.len() {
        return contract(format!(
            "{} weights for {} experts",
            weights.len(),
            experts.len()
        ));
    }
    let mut out = general.clone();
    for (e, &w) in experts.iter().zip(weights) {
        if e.shape() != general.shape() {
            return contract("expert shape differs from the generalist");
        }
        out.add_assign(&e.scale(w));
    }
    Ok(out)
}
