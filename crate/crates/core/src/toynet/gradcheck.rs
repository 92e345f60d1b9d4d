use rand::seq::index::sample;

use super::loss::hierarchical_loss;
use super::net::{ForwardTrace, Network};
use super::params::Grads;
use super::tensor::Tensor;
use crate::error::Result;
use crate::rng;
use crate::segmetrics::{Label, LabelGrid};
use crate::tradeoff::SupervisionPlan;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Coordinates drawn per parameter tensor; smaller tensors are checked in full.
    pub samples_per_param: usize,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            samples_per_param: 200,
            floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Coordinates dropped because a ReLU input crossed zero inside ±ε.
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Signs of every ReLU input in a forward pass.
pub fn kink_pattern(trace: &ForwardTrace) -> Vec<bool> {
    trace
        .pre_activations()
        .iter()
        .flat_map(|t| t.data().iter().map(|&v| v > 0.0))
        .collect()
}

/// Compares `analytic` with central differences of `eval`, which returns the
/// loss and the ReLU sign pattern of the perturbed network.
pub fn check_gradients<F>(net: &Network, analytic: &Grads, cfg: &GradCheckConfig, mut eval: F) -> Result<GradCheckReport>
where
    F: FnMut(&Network) -> Result<(f64, Vec<bool>)>,
{
    let mut probe = net.clone();
    let (_, base_signs) = eval(&probe)?;
    let mut rng = rng::named(cfg.seed, "gradcheck");
    let mut report = Vec::new();
    for (pi, param) in net.params().params().iter().enumerate() {
        let n = param.value.len();
        let mut coords: Vec<usize> = if n <= cfg.samples_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, cfg.samples_per_param).into_vec()
        };
        coords.sort_unstable();
        let mut check = ParamCheck {
            name: param.name.clone(),
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
        };
        for &c in &coords {
            let orig = param.value[c];
            probe.params_mut().params_mut()[pi].value[c] = orig + cfg.epsilon;
            let (plus, s_plus) = eval(&probe)?;
            probe.params_mut().params_mut()[pi].value[c] = orig - cfg.epsilon;
            let (minus, s_minus) = eval(&probe)?;
            probe.params_mut().params_mut()[pi].value[c] = orig;
            if s_plus != base_signs || s_minus != base_signs {
                check.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.epsilon);
            let err = relative_error(analytic.values()[pi][c], numeric, cfg.floor);
            check.max_rel_error = check.max_rel_error.max(err);
            check.checked += 1;
        }
        report.push(check);
    }
    Ok(GradCheckReport { params: report })
}

/// Checks every backward pass of `net` under the hierarchical loss of `plan`.
pub fn grad_check(
    net: &Network,
    images: &Tensor,
    labels: &LabelGrid,
    plan: &SupervisionPlan,
    ignore_index: Label,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (out, trace) = net.forward_traced(images)?;
    let loss = hierarchical_loss(&out, labels, plan, ignore_index)?;
    let grads = net.backward(&trace, &loss.d_logits)?;
    check_gradients(net, &grads, cfg, |probe| {
        let (out, trace) = probe.forward_traced(images)?;
        let l = hierarchical_loss(&out, labels, plan, ignore_index)?;
        Ok((l.total, kink_pattern(&trace)))
    })
}
