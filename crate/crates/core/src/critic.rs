//! Ensembles of Q-networks with target copies.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{adam_step, polyak_update, AdamState, Architecture, Mlp, OutputActivation};

/// How bootstrap targets are formed across the ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    /// Every member regresses onto the ensemble minimum.
    Shared,
    /// Each member bootstraps from its own target network.
    Independent,
}

impl TargetMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetMode::Shared => "shared",
            TargetMode::Independent => "independent",
        }
    }
}

impl std::str::FromStr for TargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(TargetMode::Shared),
            "independent" => Ok(TargetMode::Independent),
            other => Err(Error::config(format!("unknown target mode {other:?}"))),
        }
    }
}

/// Stacks `[states | actions]` column-wise.
pub fn critic_input(states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[states, actions]).expect("row counts match")
}

/// Mean squared TD error of one critic and its gradient.
///
/// Returns `(loss, grad, per-sample squared residuals)`; `targets` are constants.
pub fn critic_loss(
    arch: &Architecture,
    params: &[f64],
    input: ArrayView2<f64>,
    targets: ArrayView1<f64>,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let tape = arch.forward_tape(params, input)?;
    let q = tape.output().column(0);
    let n = targets.len() as f64;
    let resid: Array1<f64> = &q - &targets;
    let per: Vec<f64> = resid.iter().map(|r| r * r).collect();
    let loss = per.iter().sum::<f64>() / n;
    let d_out = (resid * (2.0 / n)).insert_axis(Axis(1));
    let mut grad = vec![0.0; params.len()];
    arch.backward(params, &tape, d_out.view(), Some(&mut grad), false);
    Ok((loss, grad, per))
}

/// Ensemble minimum per sample with the index of the minimizing member.
pub fn min_over_members(q: &Array2<f64>) -> (Array1<f64>, Vec<usize>) {
    let n = q.ncols();
    let mut mins = Array1::from_elem(n, f64::INFINITY);
    let mut arg = vec![0usize; n];
    for (i, row) in q.rows().into_iter().enumerate() {
        for (b, &v) in row.iter().enumerate() {
            if v < mins[b] {
                mins[b] = v;
                arg[b] = i;
            }
        }
    }
    (mins, arg)
}

/// Result of differentiating `sum_b weight_b * min_i Q_i(s_b, a_b)` w.r.t. the actions.
#[derive(Debug, Clone)]
pub struct MinQGrad {
    pub q_min: Array1<f64>,
    pub argmin: Vec<usize>,
    /// `d/da` of the weighted sum, shape `(batch, action_dim)`.
    pub d_actions: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticEnsemble {
    arch: Architecture,
    state_dim: usize,
    action_dim: usize,
    pub members: Vec<Mlp>,
    pub targets: Vec<Mlp>,
    pub optims: Vec<AdamState>,
}

impl CriticEnsemble {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        n: usize,
        state_dim: usize,
        action_dim: usize,
        hidden_width: usize,
        hidden_layers: usize,
        lr: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("ensemble size must be at least 1"));
        }
        let arch = Architecture::with_hidden(
            state_dim + action_dim,
            hidden_width,
            hidden_layers,
            1,
            OutputActivation::Identity,
        )?;
        let members: Vec<Mlp> = (0..n).map(|_| Mlp::new(arch.clone(), rng)).collect();
        let targets = members.clone();
        let optims = (0..n).map(|_| AdamState::new(arch.num_params(), lr)).collect();
        Ok(Self {
            arch,
            state_dim,
            action_dim,
            members,
            targets,
            optims,
        })
    }

    pub fn from_parts(members: Vec<Mlp>, targets: Vec<Mlp>, optims: Vec<AdamState>, action_dim: usize) -> Result<Self> {
        let arch = members
            .first()
            .ok_or_else(|| Error::config("ensemble size must be at least 1"))?
            .arch()
            .clone();
        if targets.len() != members.len()
            || optims.len() != members.len()
            || members.iter().chain(&targets).any(|m| m.arch() != &arch)
            || optims.iter().any(|o| o.len() != arch.num_params())
            || arch.output_dim() != 1
            || arch.input_dim() <= action_dim
        {
            return Err(Error::config("inconsistent critic ensemble parts"));
        }
        let state_dim = arch.input_dim() - action_dim;
        Ok(Self {
            arch,
            state_dim,
            action_dim,
            members,
            targets,
            optims,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn evaluate(nets: &[Mlp], input: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut q = Array2::zeros((nets.len(), input.nrows()));
        for (i, net) in nets.iter().enumerate() {
            let out = net.forward_batch(input)?;
            q.row_mut(i).assign(&out.column(0));
        }
        Ok(q)
    }

    /// Online Q-values, shape `(members, batch)`.
    pub fn q_values(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        Self::evaluate(&self.members, input)
    }

    /// Target-network Q-values, shape `(members, batch)`.
    pub fn target_q_values(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        Self::evaluate(&self.targets, input)
    }

    /// One Adam step of member `i` towards `targets`; returns the pre-step loss.
    pub fn update_member(&mut self, i: usize, input: ArrayView2<f64>, targets: ArrayView1<f64>) -> Result<f64> {
        let (loss, grad, per) = critic_loss(&self.arch, self.members[i].params(), input, targets)?;
        if !loss.is_finite() {
            let idx = per.iter().position(|l| !l.is_finite());
            return Err(Error::numerical(format!("non-finite critic loss {loss}"), Some(i), idx));
        }
        adam_step(self.members[i].params_mut(), &grad, &mut self.optims[i])?;
        Ok(loss)
    }

    pub fn soft_update(&mut self, tau: f64) -> Result<()> {
        for (t, m) in self.targets.iter_mut().zip(&self.members) {
            polyak_update(t.params_mut(), m.params(), tau)?;
        }
        Ok(())
    }

    /// Minimum over online members at `(states, actions)` and its action gradient,
    /// weighting sample `b` by `weights[b]`.
    ///
    /// Only the minimizing member of each sample is backpropagated.
    pub fn min_q_action_grad(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        weights: ArrayView1<f64>,
    ) -> Result<MinQGrad> {
        let input = critic_input(states, actions);
        let q = self.q_values(input.view())?;
        let (q_min, argmin) = min_over_members(&q);
        let batch = input.nrows();
        let mut d_actions = Array2::zeros((batch, self.action_dim));
        for (i, net) in self.members.iter().enumerate() {
            let rows: Vec<usize> = (0..batch).filter(|&b| argmin[b] == i).collect();
            if rows.is_empty() {
                continue;
            }
            let sub = input.select(Axis(0), &rows);
            let tape = net.forward_tape(sub.view())?;
            let d_out = Array2::from_shape_fn((rows.len(), 1), |(k, _)| weights[rows[k]]);
            let d_in = net
                .backward(&tape, d_out.view(), None, true)
                .expect("input gradient requested");
            for (k, &b) in rows.iter().enumerate() {
                d_actions
                    .row_mut(b)
                    .assign(&d_in.slice(s![k, self.state_dim..]));
            }
        }
        Ok(MinQGrad {
            q_min,
            argmin,
            d_actions,
        })
    }
}

/// `1 / max(mean |q|, floor)`: the Q-normalization factor, treated as a constant.
pub fn q_scale(q: ArrayView1<f64>, floor: f64) -> (f64, bool) {
    let mean_abs = q.iter().map(|v| v.abs()).sum::<f64>() / q.len().max(1) as f64;
    if mean_abs < floor {
        (1.0 / floor, true)
    } else {
        (1.0 / mean_abs, false)
    }
}

pub const Q_SCALE_FLOOR: f64 = 1e-8;
