//! Loss terms as interchangeable strategies.
//!
//! Every term reports its value and its partial derivatives with respect to
//! the score matrix S and each active expert output x̃_ij. Terms are
//! registered by name in a [`TermRegistry`]; an objective picks one term per
//! [`TermKind`] slot, so alternative formulations (e.g. the two auxiliary
//! normalizations) can be swapped at runtime without touching the gradient
//! code.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array1, Array2};

use super::{
    aux_loss, ortho_loss, ortho_pair_count, score_column_means, task_loss, variance_loss,
    AuxNormalization, LossWeights,
};
use crate::error::{LabError, Result};
use crate::math::Matrix;
use crate::moe::{ExpertOutputs, RoutingState};

/// The slot a term occupies in the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TermKind {
    Task,
    Aux,
    Ortho,
    Variance,
}

pub struct LossInputs<'a> {
    pub state: &'a RoutingState,
    pub outputs: &'a ExpertOutputs,
    pub targets: &'a Matrix,
    pub weights: &'a LossWeights,
}

/// Partial derivatives of one scalar term.
#[derive(Debug, Clone, PartialEq)]
pub struct Partials {
    /// ∂term/∂s_ij, N × n.
    pub d_scores: Array2<f64>,
    /// ∂term/∂x̃_ij, aligned with `ExpertOutputs::active`.
    pub d_outputs: Vec<Vec<Array1<f64>>>,
}

impl Partials {
    pub fn zeros(outputs: &ExpertOutputs, tokens: usize, experts: usize) -> Self {
        Self {
            d_scores: Array2::zeros((tokens, experts)),
            d_outputs: outputs
                .active
                .iter()
                .map(|t| t.iter().map(|(_, v)| Array1::zeros(v.len())).collect())
                .collect(),
        }
    }

    fn for_inputs(inputs: &LossInputs<'_>) -> Self {
        let (tokens, experts) = inputs.state.scores.shape();
        Self::zeros(inputs.outputs, tokens, experts)
    }

    /// `self += coeff · other`.
    pub fn add_scaled(&mut self, coeff: f64, other: &Partials) {
        self.d_scores.scaled_add(coeff, &other.d_scores);
        for (mine, theirs) in self.d_outputs.iter_mut().zip(&other.d_outputs) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                a.scaled_add(coeff, b);
            }
        }
    }
}

pub trait LossTerm: Send + Sync {
    fn name(&self) -> &'static str;
    fn kind(&self) -> TermKind;
    fn value(&self, inputs: &LossInputs<'_>) -> Result<f64>;
    fn partials(&self, inputs: &LossInputs<'_>) -> Result<Partials>;
}

/// Mean squared error of the combined output.
pub struct TaskMse;

impl LossTerm for TaskMse {
    fn name(&self) -> &'static str {
        "task_mse"
    }

    fn kind(&self) -> TermKind {
        TermKind::Task
    }

    fn value(&self, inputs: &LossInputs<'_>) -> Result<f64> {
        task_loss(&inputs.outputs.combined, inputs.targets)
    }

    fn partials(&self, inputs: &LossInputs<'_>) -> Result<Partials> {
        let y = &inputs.outputs.combined;
        if y.shape() != inputs.targets.shape() {
            return Err(LabError::Shape("prediction vs target".into()));
        }
        let scale = 2.0 / (y.rows() * y.cols()) as f64;
        let mut p = Partials::for_inputs(inputs);
        for (i, token) in inputs.outputs.active.iter().enumerate() {
            // g_yi = ∂L_h/∂y_i
            let g: Array1<f64> = (&y.row(i) - &inputs.targets.row(i)) * scale;
            for (slot, (j, out)) in token.iter().enumerate() {
                p.d_scores[[i, *j]] = g.dot(out);
                p.d_outputs[i][slot] = &g * inputs.state.scores.get(i, *j);
            }
        }
        Ok(p)
    }
}

/// `Σ f_j·p_j` with the token fractions `f_j` held constant; only `p_j`
/// carries gradient.
pub struct AuxBalance {
    pub mode: AuxNormalization,
}

impl LossTerm for AuxBalance {
    fn name(&self) -> &'static str {
        self.mode.term_name()
    }

    fn kind(&self) -> TermKind {
        TermKind::Aux
    }

    fn value(&self, inputs: &LossInputs<'_>) -> Result<f64> {
        Ok(aux_loss(inputs.state, self.mode))
    }

    fn partials(&self, inputs: &LossInputs<'_>) -> Result<Partials> {
        let st = inputs.state;
        let coeff = match self.mode {
            AuxNormalization::Paper => 1.0,
            AuxNormalization::Switch => {
                st.num_experts() as f64 / (st.k() as f64 * st.num_tokens() as f64)
            }
        };
        let mut p = Partials::for_inputs(inputs);
        for mut row in p.d_scores.rows_mut() {
            for (d, f) in row.iter_mut().zip(&st.loads_f) {
                *d = coeff * f;
            }
        }
        Ok(p)
    }
}

/// Mean squared projection between distinct active experts of a token.
pub struct Orthogonality {
    pub eps_norm: f64,
}

impl LossTerm for Orthogonality {
    fn name(&self) -> &'static str {
        "ortho"
    }

    fn kind(&self) -> TermKind {
        TermKind::Ortho
    }

    fn value(&self, inputs: &LossInputs<'_>) -> Result<f64> {
        Ok(ortho_loss(inputs.outputs, self.eps_norm))
    }

    fn partials(&self, inputs: &LossInputs<'_>) -> Result<Partials> {
        let mut p = Partials::for_inputs(inputs);
        let pairs = ortho_pair_count(inputs.outputs);
        if pairs == 0 {
            return Ok(p);
        }
        let norm = 1.0 / pairs as f64;
        let eps = self.eps_norm;
        for (i, token) in inputs.outputs.active.iter().enumerate() {
            for (ia, (_, a)) in token.iter().enumerate() {
                for (ib, (_, b)) in token.iter().enumerate() {
                    if ia == ib {
                        continue;
                    }
                    // T = u²·q / D², u = ⟨a,b⟩, q = ‖b‖², D = q + ε
                    let u = a.dot(b);
                    let q = b.dot(b);
                    let denom = q + eps;
                    let du = 2.0 * u * q / (denom * denom);
                    let dq = u * u * (eps - q) / (denom * denom * denom);
                    p.d_outputs[i][ia].scaled_add(norm * du, b);
                    p.d_outputs[i][ib].scaled_add(norm * du, a);
                    p.d_outputs[i][ib].scaled_add(norm * 2.0 * dq, b);
                }
            }
        }
        Ok(p)
    }
}

/// Negative per-expert variance of routing scores.
pub struct ScoreVariance;

impl LossTerm for ScoreVariance {
    fn name(&self) -> &'static str {
        "variance"
    }

    fn kind(&self) -> TermKind {
        TermKind::Variance
    }

    fn value(&self, inputs: &LossInputs<'_>) -> Result<f64> {
        Ok(variance_loss(inputs.state))
    }

    fn partials(&self, inputs: &LossInputs<'_>) -> Result<Partials> {
        let st = inputs.state;
        let means = score_column_means(&st.scores);
        let coeff = -2.0 / st.num_experts() as f64;
        let mut p = Partials::for_inputs(inputs);
        // the s̄_j dependence drops out because deviations sum to zero
        for (mut d_row, s_row) in p
            .d_scores
            .rows_mut()
            .into_iter()
            .zip(st.scores.as_array().rows())
        {
            for ((d, s), m) in d_row.iter_mut().zip(s_row.iter()).zip(&means) {
                *d = coeff * (s - m);
            }
        }
        Ok(p)
    }
}

type TermFactory = Box<dyn Fn(&LossWeights) -> Arc<dyn LossTerm> + Send + Sync>;

struct Registration {
    kind: TermKind,
    factory: TermFactory,
}

/// Name-keyed collection of loss-term factories.
pub struct TermRegistry {
    entries: BTreeMap<&'static str, Registration>,
}

impl TermRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn register<F>(&mut self, name: &'static str, kind: TermKind, factory: F)
    where
        F: Fn(&LossWeights) -> Arc<dyn LossTerm> + Send + Sync + 'static,
    {
        self.entries.insert(
            name,
            Registration {
                kind,
                factory: Box::new(factory),
            },
        );
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn kind_of(&self, name: &str) -> Option<TermKind> {
        self.entries.get(name).map(|r| r.kind)
    }

    pub fn build(&self, name: &str, weights: &LossWeights) -> Result<Arc<dyn LossTerm>> {
        self.entries
            .get(name)
            .map(|r| (r.factory)(weights))
            .ok_or_else(|| LabError::Unknown {
                kind: "loss term",
                name: name.to_string(),
            })
    }

    /// The four terms an objective with these weights uses, in slot order.
    pub fn objective(&self, weights: &LossWeights) -> Result<Objective> {
        Ok(Objective {
            task: self.build("task_mse", weights)?,
            aux: self.build(weights.aux_normalization.term_name(), weights)?,
            ortho: self.build("ortho", weights)?,
            variance: self.build("variance", weights)?,
        })
    }
}

impl Default for TermRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register("task_mse", TermKind::Task, |_| Arc::new(TaskMse));
        r.register("aux_switch", TermKind::Aux, |_| {
            Arc::new(AuxBalance {
                mode: AuxNormalization::Switch,
            })
        });
        r.register("aux_paper", TermKind::Aux, |_| {
            Arc::new(AuxBalance {
                mode: AuxNormalization::Paper,
            })
        });
        r.register("ortho", TermKind::Ortho, |w| {
            Arc::new(Orthogonality {
                eps_norm: w.eps_norm,
            })
        });
        r.register("variance", TermKind::Variance, |_| Arc::new(ScoreVariance));
        r
    }
}

/// One term per slot.
#[derive(Clone)]
pub struct Objective {
    pub task: Arc<dyn LossTerm>,
    pub aux: Arc<dyn LossTerm>,
    pub ortho: Arc<dyn LossTerm>,
    pub variance: Arc<dyn LossTerm>,
}

impl Objective {
    pub fn terms(&self) -> [&Arc<dyn LossTerm>; 4] {
        [&self.task, &self.aux, &self.ortho, &self.variance]
    }
}
