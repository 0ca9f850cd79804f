//! Exact gradients of the total loss with respect to the router and every
//! expert, a central finite-difference oracle, and per-term attribution.
//!
//! Conventions shared by the analytic path and the oracle:
//! - the top-k support (and the gate-active set) is frozen at the base point;
//! - dynamic scale factors are constants;
//! - the token fractions `f_j` are piecewise constant, so the auxiliary
//!   loss only differentiates through `p_j`.
//!
//! Backpropagation is a chain of small closed forms. Term partials with
//! respect to `s_ij` go through the renormalized top-k softmax to the logits
//! (on the support, `s_i` is a softmax over the selected logits), then to
//! `θ_R` via `Xᵀ`. Partials with respect to `x̃_ij` go to `θ_Ej` via `x_iᵀ`.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{LabError, Result};
use crate::losses::{combine, LossBreakdown, LossInputs, LossWeights, Partials, TermRegistry};
use crate::losses::{score_column_means, AuxNormalization};
use crate::math::{gaussian_sample, Matrix, Rng};
use crate::moe::{forward, route, route_with_support, ExpertOutputs, MoeParams, RoutingState};

/// Denominator floor for relative gradient errors. Entries smaller than this
/// are compared on an absolute scale of `REL_ERR_FLOOR`.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    /// d × n
    pub d_router: Matrix,
    /// n matrices of d × d_out
    pub d_experts: Vec<Matrix>,
}

impl GradientBundle {
    pub fn zeros_like(params: &MoeParams) -> Self {
        Self {
            d_router: Matrix::zeros(params.router.rows(), params.router.cols()),
            d_experts: params
                .experts
                .iter()
                .map(|e| Matrix::zeros(e.rows(), e.cols()))
                .collect(),
        }
    }

    /// Router entries first, then each expert, all row-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.d_router.to_vec();
        for e in &self.d_experts {
            v.extend(e.to_vec());
        }
        v
    }

    pub fn router_norm(&self) -> f64 {
        self.d_router.frobenius_norm()
    }

    pub fn expert_norms(&self) -> Vec<f64> {
        self.d_experts.iter().map(Matrix::frobenius_norm).collect()
    }

    /// Largest entrywise `|a − b| / max(|a|, |b|, REL_ERR_FLOOR)`.
    pub fn max_rel_error(&self, other: &GradientBundle) -> f64 {
        self.flatten()
            .iter()
            .zip(other.flatten())
            .map(|(a, b)| rel_error(*a, b))
            .fold(0.0, f64::max)
    }
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Everything produced by one evaluation of the objective.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub state: RoutingState,
    pub outputs: ExpertOutputs,
    pub breakdown: LossBreakdown,
}

/// Per-term partials, unweighted.
struct TermPartials {
    task: Partials,
    aux: Partials,
    ortho: Partials,
    variance: Partials,
}

fn evaluate_state(
    params: &MoeParams,
    x: &Matrix,
    targets: &Matrix,
    weights: &LossWeights,
    state: RoutingState,
    prev_scales: Option<(f64, f64)>,
) -> Result<Evaluation> {
    let outputs = forward(params, x, &state, weights.tau_gate)?;
    let objective = TermRegistry::default().objective(weights)?;
    let inputs = LossInputs {
        state: &state,
        outputs: &outputs,
        targets,
        weights,
    };
    let l_h = objective.task.value(&inputs)?;
    let l_aux = objective.aux.value(&inputs)?;
    let l_o = objective.ortho.value(&inputs)?;
    let l_v = objective.variance.value(&inputs)?;
    let breakdown = combine(l_h, l_aux, l_o, l_v, weights, prev_scales)?;
    Ok(Evaluation {
        state,
        outputs,
        breakdown,
    })
}

/// Route, run the experts and compute the loss breakdown.
pub fn evaluate(
    params: &MoeParams,
    x: &Matrix,
    targets: &Matrix,
    weights: &LossWeights,
    prev_scales: Option<(f64, f64)>,
) -> Result<Evaluation> {
    weights.validate()?;
    let state = route(params, x)?;
    evaluate_state(params, x, targets, weights, state, prev_scales)
}

fn term_partials(
    eval: &Evaluation,
    targets: &Matrix,
    weights: &LossWeights,
) -> Result<TermPartials> {
    let objective = TermRegistry::default().objective(weights)?;
    let inputs = LossInputs {
        state: &eval.state,
        outputs: &eval.outputs,
        targets,
        weights,
    };
    Ok(TermPartials {
        task: objective.task.partials(&inputs)?,
        aux: objective.aux.partials(&inputs)?,
        ortho: objective.ortho.partials(&inputs)?,
        variance: objective.variance.partials(&inputs)?,
    })
}

/// Chains score and output partials back to the parameters.
pub fn backprop(
    params: &MoeParams,
    x: &Matrix,
    eval: &Evaluation,
    partials: &Partials,
) -> Result<GradientBundle> {
    let state = &eval.state;
    let (tokens, n) = state.scores.shape();
    let mut d_logits = Array2::<f64>::zeros((tokens, n));
    for (i, sel) in state.support.selected.iter().enumerate() {
        // s restricted to the support is softmax(logits[sel])
        let inner: f64 = sel
            .iter()
            .map(|&j| partials.d_scores[[i, j]] * state.scores.get(i, j))
            .sum();
        for &m in sel {
            d_logits[[i, m]] = state.scores.get(i, m) * (partials.d_scores[[i, m]] - inner);
        }
    }
    let d_router = x.as_array().t().dot(&d_logits);

    let (d, d_out) = params.experts[0].shape();
    let mut d_experts = vec![Array2::<f64>::zeros((d, d_out)); n];
    for (i, token) in eval.outputs.active.iter().enumerate() {
        let xi = x.row(i);
        for (slot, (j, _)) in token.iter().enumerate() {
            let g = &partials.d_outputs[i][slot];
            let grad = &mut d_experts[*j];
            for (r, xv) in xi.iter().enumerate() {
                if *xv != 0.0 {
                    grad.row_mut(r).scaled_add(*xv, g);
                }
            }
        }
    }
    let bundle = GradientBundle {
        d_router: Matrix::from_array(d_router)?,
        d_experts: d_experts
            .into_iter()
            .map(Matrix::from_array)
            .collect::<Result<_>>()?,
    };
    Ok(bundle)
}

fn weighted_partials(tp: &TermPartials, weights: &LossWeights, b: &LossBreakdown) -> Partials {
    let mut total = tp.task.clone();
    total.add_scaled(weights.alpha, &tp.aux);
    total.add_scaled(weights.beta * b.scale_o, &tp.ortho);
    total.add_scaled(weights.gamma * b.scale_v, &tp.variance);
    total
}

/// Loss breakdown and exact gradient of `total` at `params`.
pub fn forward_backward(
    params: &MoeParams,
    x: &Matrix,
    targets: &Matrix,
    weights: &LossWeights,
    prev_scales: Option<(f64, f64)>,
) -> Result<(LossBreakdown, GradientBundle)> {
    let eval = evaluate(params, x, targets, weights, prev_scales)?;
    let grads = gradient_at(params, x, targets, weights, &eval)?;
    Ok((eval.breakdown, grads))
}

/// Gradient of the total for an evaluation already in hand.
pub fn gradient_at(
    params: &MoeParams,
    x: &Matrix,
    targets: &Matrix,
    weights: &LossWeights,
    eval: &Evaluation,
) -> Result<GradientBundle> {
    let tp = term_partials(eval, targets, weights)?;
    let partials = weighted_partials(&tp, weights, &eval.breakdown);
    backprop(params, x, eval, &partials)
}

/// Total loss with the support taken from `base` and the scale factors fixed
/// to `scales`.
fn frozen_total(
    params: &MoeParams,
    x: &Matrix,
    targets: &Matrix,
    weights: &LossWeights,
    base: &Evaluation,
    scales: (f64, f64),
) -> Result<f64> {
    let state = route_with_support(params, x, &base.state.support)?;
    let mut outputs = forward(params, x, &state, 0.0)?;
    // keep the base point's gate-active set
    for (now, then) in outputs.active.iter_mut().zip(&base.outputs.active) {
        now.retain(|(j, _)| then.iter().any(|(k, _)| k == j));
    }
    let mut combined = Array2::<f64>::zeros(outputs.combined.shape());
    for (i, token) in outputs.active.iter().enumerate() {
        for (j, v) in token {
            combined.row_mut(i).scaled_add(state.scores.get(i, *j), v);
        }
    }
    outputs.combined = Matrix::from_array(combined)?;
    let objective = TermRegistry::default().objective(weights)?;
    let inputs = LossInputs {
        state: &state,
        outputs: &outputs,
        targets,
        weights,
    };
    let fixed = LossWeights {
        dynamic_scaling: false,
        ..*weights
    };
    let b = combine(
        objective.task.value(&inputs)?,
        objective.aux.value(&inputs)?,
        objective.ortho.value(&inputs)?,
        objective.variance.value(&inputs)?,
        &fixed,
        None,
    )?;
    Ok(b.l_h
        + fixed.alpha * b.l_aux
        + fixed.beta * scales.0 * b.l_o
        + fixed.gamma * scales.1 * b.l_v)
}

/// Central finite differences of any scalar function of a parameter vector.
pub fn central_difference<F>(f: F, point: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    (0..point.len())
        .into_par_iter()
        .map(|i| {
            let mut p = point.to_vec();
            p[i] = point[i] + h;
            let plus = f(&p);
            p[i] = point[i] - h;
            let minus = f(&p);
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Finite-difference gradient of the total loss, with the top-k support and
/// the dynamic scales frozen at the base point.
pub fn fd_gradient(
    params: &MoeParams,
    x: &Matrix,
    targets: &Matrix,
    weights: &LossWeights,
    prev_scales: Option<(f64, f64)>,
    h: f64,
) -> Result<GradientBundle> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(LabError::InvalidArgument(
            "finite-difference step must be > 0".into(),
        ));
    }
    let base = evaluate(params, x, targets, weights, prev_scales)?;
    let scales = base.breakdown.scales();
    let (d, n) = params.router.shape();
    let mut indices = Vec::with_capacity(params.len());
    for r in 0..d {
        for c in 0..n {
            indices.push((None, r, c));
        }
    }
    for (j, e) in params.experts.iter().enumerate() {
        for r in 0..e.rows() {
            for c in 0..e.cols() {
                indices.push((Some(j), r, c));
            }
        }
    }
    let perturbed = |which: Option<usize>, r: usize, c: usize, value: f64| -> Result<f64> {
        let mut p = params.clone();
        match which {
            None => p.router = p.router.with_entry(r, c, value)?,
            Some(j) => p.experts[j] = p.experts[j].with_entry(r, c, value)?,
        }
        frozen_total(&p, x, targets, weights, &base, scales)
    };
    let values: Vec<f64> = indices
        .par_iter()
        .map(|&(which, r, c)| {
            let v = match which {
                None => params.router.get(r, c),
                Some(j) => params.experts[j].get(r, c),
            };
            let plus = perturbed(which, r, c, v + h)?;
            let minus = perturbed(which, r, c, v - h)?;
            Ok((plus - minus) / (2.0 * h))
        })
        .collect::<Result<_>>()?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(LabError::NonFinite("finite-difference evaluation".into()));
    }
    let router_len = d * n;
    let d_router = Matrix::from_vec(d, n, values[..router_len].to_vec())?;
    let mut offset = router_len;
    let mut d_experts = Vec::with_capacity(params.experts.len());
    for e in &params.experts {
        let len = e.rows() * e.cols();
        d_experts.push(Matrix::from_vec(
            e.rows(),
            e.cols(),
            values[offset..offset + len].to_vec(),
        )?);
        offset += len;
    }
    Ok(GradientBundle {
        d_router,
        d_experts,
    })
}

/// Unweighted per-term gradients and their norms.
#[derive(Debug, Clone)]
pub struct AttributionReport {
    pub breakdown: LossBreakdown,
    pub task: GradientBundle,
    pub aux: GradientBundle,
    pub ortho: GradientBundle,
    pub variance: GradientBundle,
}

impl AttributionReport {
    /// `(term, ‖∂term/∂θ_R‖, [‖∂term/∂θ_Ej‖])` rows.
    pub fn table(&self) -> Vec<(&'static str, f64, Vec<f64>)> {
        [
            ("task", &self.task),
            ("aux", &self.aux),
            ("ortho", &self.ortho),
            ("variance", &self.variance),
        ]
        .into_iter()
        .map(|(name, g)| (name, g.router_norm(), g.expert_norms()))
        .collect()
    }

    /// Structural zeros that do not hold exactly.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, g) in [("aux", &self.aux), ("variance", &self.variance)] {
            for (j, e) in g.d_experts.iter().enumerate() {
                if e.max_abs() != 0.0 {
                    out.push(format!("d{name}/dtheta_E{j} = {:e}", e.max_abs()));
                }
            }
        }
        if self.ortho.d_router.max_abs() != 0.0 {
            out.push(format!(
                "dortho/dtheta_R = {:e}",
                self.ortho.d_router.max_abs()
            ));
        }
        out
    }

    /// Recombines the per-term gradients with the loss weights and scales.
    pub fn recombine(&self, weights: &LossWeights) -> GradientBundle {
        let b = &self.breakdown;
        let coeffs = [
            (1.0, &self.task),
            (weights.alpha, &self.aux),
            (weights.beta * b.scale_o, &self.ortho),
            (weights.gamma * b.scale_v, &self.variance),
        ];
        let mut router = Array2::<f64>::zeros(self.task.d_router.shape());
        let mut experts: Vec<Array2<f64>> = self
            .task
            .d_experts
            .iter()
            .map(|e| Array2::zeros(e.shape()))
            .collect();
        for (c, g) in coeffs {
            router.scaled_add(c, g.d_router.as_array());
            for (acc, e) in experts.iter_mut().zip(&g.d_experts) {
                acc.scaled_add(c, e.as_array());
            }
        }
        GradientBundle {
            d_router: Matrix::from_array(router).expect("finite"),
            d_experts: experts
                .into_iter()
                .map(|e| Matrix::from_array(e).expect("finite"))
                .collect(),
        }
    }
}

/// Splits the gradient by loss term.
pub fn attribute_gradients(
    params: &MoeParams,
    x: &Matrix,
    targets: &Matrix,
    weights: &LossWeights,
    prev_scales: Option<(f64, f64)>,
) -> Result<AttributionReport> {
    let eval = evaluate(params, x, targets, weights, prev_scales)?;
    let tp = term_partials(&eval, targets, weights)?;
    Ok(AttributionReport {
        breakdown: eval.breakdown,
        task: backprop(params, x, &eval, &tp.task)?,
        aux: backprop(params, x, &eval, &tp.aux)?,
        ortho: backprop(params, x, &eval, &tp.ortho)?,
        variance: backprop(params, x, &eval, &tp.variance)?,
    })
}

/// Exact `∂L_v/∂s_ij = −(2/n)(s_ij − s̄_j)` next to the coefficient
/// `2(N−1)/(nN)` obtained by dropping the cross terms of the mean.
#[derive(Debug, Clone)]
pub struct VarianceGradientProbe {
    pub exact: Array2<f64>,
    pub dropped_cross_terms: Array2<f64>,
    pub max_abs_divergence: f64,
}

pub fn variance_gradient_probe(state: &RoutingState) -> VarianceGradientProbe {
    let (tokens, n) = state.scores.shape();
    let means = score_column_means(&state.scores);
    let exact_c = -2.0 / n as f64;
    let dropped_c = -2.0 * (tokens as f64 - 1.0) / (n as f64 * tokens as f64);
    let mut exact = Array2::zeros((tokens, n));
    let mut dropped = Array2::zeros((tokens, n));
    for i in 0..tokens {
        for j in 0..n {
            let dev = state.scores.get(i, j) - means[j];
            exact[[i, j]] = exact_c * dev;
            dropped[[i, j]] = dropped_c * dev;
        }
    }
    let max_abs_divergence = exact
        .iter()
        .zip(dropped.iter())
        .map(|(a, b): (&f64, &f64)| (a - b).abs())
        .fold(0.0, f64::max);
    VarianceGradientProbe {
        exact,
        dropped_cross_terms: dropped,
        max_abs_divergence,
    }
}

/// A seeded random problem for gradient checks.
#[derive(Debug, Clone)]
pub struct GradInstance {
    pub seed: u64,
    pub params: MoeParams,
    pub x: Matrix,
    pub targets: Matrix,
    pub weights: LossWeights,
    pub prev_scales: Option<(f64, f64)>,
}

impl GradInstance {
    /// Shapes are drawn within N ≤ 16, n ≤ 6, k ≤ 3, d ≤ 8, d_out ≤ 4.
    /// `variant` cycles through every on/off combination of the three
    /// balance weights, with and without dynamic scaling, and mixes both
    /// auxiliary normalizations into each.
    pub fn generate(seed: u64, variant: usize) -> Self {
        let mut rng = Rng::new(seed);
        let pick = |rng: &mut Rng, lo: usize, hi: usize| {
            lo + (rng.next_u64() % (hi - lo + 1) as u64) as usize
        };
        let n = pick(&mut rng, 2, 6);
        let k = pick(&mut rng, 1, 3.min(n));
        let d = pick(&mut rng, 2, 8);
        let d_out = pick(&mut rng, 1, 4);
        let tokens = pick(&mut rng, 4, 16);
        let router = gaussian_sample(&mut rng, d, n, 0.0, 1.0);
        let experts = (0..n)
            .map(|_| gaussian_sample(&mut rng, d, d_out, 0.0, 0.7))
            .collect();
        let params = MoeParams::new(router, experts, k).expect("valid shapes");
        let x = gaussian_sample(&mut rng, tokens, d, 0.0, 1.0);
        let targets = gaussian_sample(&mut rng, tokens, d_out, 0.0, 1.0);

        let combo = variant % 8;
        let mut on = |bit: usize| {
            if combo >> bit & 1 == 1 {
                0.5 + rng.uniform()
            } else {
                0.0
            }
        };
        let (alpha, beta, gamma) = (on(0), on(1), on(2));
        let dynamic_scaling = (variant / 8) % 2 == 1;
        // parity of (active terms + scaling flag) keeps the aux mode
        // independent of whether alpha is on
        let aux_normalization = if (combo.count_ones() as usize + variant / 8).is_multiple_of(2) {
            AuxNormalization::Switch
        } else {
            AuxNormalization::Paper
        };
        let prev_scales = if dynamic_scaling && variant.is_multiple_of(3) {
            Some((0.5 + rng.uniform(), 0.5 + rng.uniform()))
        } else {
            None
        };
        let weights = LossWeights {
            alpha,
            beta,
            gamma,
            eps_norm: 1e-8,
            tau_gate: 0.0,
            aux_normalization,
            dynamic_scaling,
        };
        Self {
            seed,
            params,
            x,
            targets,
            weights,
            prev_scales,
        }
    }

    pub fn describe(&self) -> String {
        let w = &self.weights;
        format!(
            "N={} n={} k={} d={} d_out={} alpha={:.3} beta={:.3} gamma={:.3} aux={} dynamic={}",
            self.x.rows(),
            self.params.num_experts(),
            self.params.k,
            self.params.input_dim(),
            self.params.output_dim(),
            w.alpha,
            w.beta,
            w.gamma,
            w.aux_normalization,
            w.dynamic_scaling
        )
    }
}

#[derive(Debug, Clone)]
pub struct InstanceCheck {
    pub seed: u64,
    pub description: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub h: f64,
    pub instances: Vec<InstanceCheck>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.instances
            .iter()
            .map(|c| c.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&InstanceCheck> {
        self.instances
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compares analytic and finite-difference gradients on `count` instances
/// seeded `base_seed, base_seed + 1, …`.
pub fn gradcheck_suite(base_seed: u64, count: usize, h: f64) -> Result<GradcheckReport> {
    let instances = (0..count)
        .map(|i| {
            let inst = GradInstance::generate(base_seed.wrapping_add(i as u64), i);
            let (_, analytic) = forward_backward(
                &inst.params,
                &inst.x,
                &inst.targets,
                &inst.weights,
                inst.prev_scales,
            )?;
            let numeric = fd_gradient(
                &inst.params,
                &inst.x,
                &inst.targets,
                &inst.weights,
                inst.prev_scales,
                h,
            )?;
            Ok(InstanceCheck {
                seed: inst.seed,
                description: inst.describe(),
                max_rel_err: analytic.max_rel_error(&numeric),
            })
        })
        .collect::<Result<_>>()?;
    Ok(GradcheckReport { h, instances })
}
