//! Parametric leaky integrate-and-fire (PLIF) neurons with soft reset.
//!
//! Per timestep a layer charges, fires, then resets:
//!
//! ```text
//! H_t = lambda * U_{t-1} + I_t          (charge)
//! S_t = [H_t > V_th]                    (fire)
//! U_t = H_t - V_th * S_t                (soft reset)
//! ```
//!
//! with `lambda = sigmoid(w)` learnable and shared across the layer. The
//! backward pass replaces `dS/dH` by a piecewise quadratic surrogate centred on
//! the threshold, and keeps the reset term in the graph.

use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Result, Tensor, TensorError};

pub const DEFAULT_THRESHOLD: f64 = 1.0;
pub const DEFAULT_LEAK: f64 = 0.99;
pub const DEFAULT_ALPHA: f64 = 1.0;

pub fn sigmoid<F: Real>(w: F) -> F {
    F::one() / (F::one() + (-w).exp())
}

/// Leak parameter `w` with `sigmoid(w) == leak`.
pub fn leak_param_for(leak: f64) -> f64 {
    (leak / (1.0 - leak)).ln()
}

/// Piecewise quadratic surrogate of the spike derivative: zero outside
/// `|v| <= 1/alpha`, otherwise `alpha - alpha^2 |v|`.
pub fn surrogate_derivative<F: Real>(v: F, alpha: F) -> F {
    if v.abs() > alpha.recip() {
        F::zero()
    } else {
        alpha - alpha * alpha * v.abs()
    }
}

/// Forward spike nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpikeFn {
    /// Binary spikes `[v > 0]`.
    #[default]
    Heaviside,
    /// The piecewise quadratic step whose derivative is exactly
    /// [`surrogate_derivative`]. Spikes become graded, so the network is no
    /// longer spiking, but the backward pass becomes the true gradient; this
    /// is what makes finite-difference checks of BPTT meaningful.
    SoftStep,
}

impl SpikeFn {
    /// Spike output for a potential `v` measured relative to the threshold.
    pub fn eval<F: Real>(self, v: F, alpha: F) -> F {
        match self {
            SpikeFn::Heaviside => {
                if v > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            SpikeFn::SoftStep => {
                let half = F::lit(0.5);
                let r = alpha.recip();
                if v <= -r {
                    F::zero()
                } else if v >= r {
                    F::one()
                } else if v < F::zero() {
                    half * (F::one() + alpha * v).powi(2)
                } else {
                    F::one() - half * (F::one() - alpha * v).powi(2)
                }
            }
        }
    }
}

/// Static configuration of one spiking layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlifParams<F> {
    pub leak_param: F,
    pub threshold: F,
    pub alpha: F,
    pub spike: SpikeFn,
}

impl<F: Real> PlifParams<F> {
    pub fn new(leak_param: F, threshold: F, alpha: F) -> Self {
        Self {
            leak_param,
            threshold,
            alpha,
            spike: SpikeFn::Heaviside,
        }
    }

    pub fn with_spike(self, spike: SpikeFn) -> Self {
        Self { spike, ..self }
    }

    pub fn leak(&self) -> F {
        sigmoid(self.leak_param)
    }
}

impl<F: Real> Default for PlifParams<F> {
    fn default() -> Self {
        Self::new(
            F::lit(leak_param_for(DEFAULT_LEAK)),
            F::lit(DEFAULT_THRESHOLD),
            F::lit(DEFAULT_ALPHA),
        )
    }
}

/// Membrane potentials of one layer carried between timesteps.
#[derive(Clone, Debug)]
pub struct PlifLayerState<F> {
    pub membrane: Tensor<F>,
    pub leak_param: F,
    pub threshold: F,
    pub alpha: F,
    pub spike: SpikeFn,
}

impl<F: Real> PlifLayerState<F> {
    pub fn new(shape: &[usize], leak_param: F, threshold: F) -> Self {
        Self {
            membrane: Tensor::zeros(shape),
            leak_param,
            threshold,
            alpha: F::lit(DEFAULT_ALPHA),
            spike: SpikeFn::Heaviside,
        }
    }

    /// State for a layer described by `params`.
    pub fn for_params(shape: &[usize], params: &PlifParams<F>) -> Self {
        Self {
            membrane: Tensor::zeros(shape),
            leak_param: params.leak_param,
            threshold: params.threshold,
            alpha: params.alpha,
            spike: params.spike,
        }
    }

    pub fn leak(&self) -> F {
        sigmoid(self.leak_param)
    }

    /// Zero the membranes before a new input sequence.
    pub fn reset(&mut self) {
        self.membrane.fill(F::zero());
    }
}

/// Advance a layer by one timestep and return its spikes.
pub fn plif_step<F: Real>(state: &mut PlifLayerState<F>, input: &Tensor<F>) -> Result<Tensor<F>> {
    if input.shape() != state.membrane.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "plif_step",
            expected: format!("{:?}", state.membrane.shape()),
            got: input.shape().to_vec(),
        });
    }
    let (leak, th) = (state.leak(), state.threshold);
    let mut spikes = Tensor::zeros(input.shape());
    for ((v, &i), s) in state
        .membrane
        .data_mut()
        .iter_mut()
        .zip(input.data())
        .zip(spikes.data_mut())
    {
        let h = leak * *v + i;
        *s = state.spike.eval(h - th, state.alpha);
        *v = h - th * *s;
    }
    Ok(spikes)
}

/// Everything a layer's backward pass needs from a `T`-step forward run.
#[derive(Clone, Debug)]
pub struct SpikeTrace<F> {
    /// Membrane potentials after charging, before reset, `[T, ...]`.
    pub pre_reset: Tensor<F>,
    /// Output spikes, `[T, ...]`, exactly {0, 1}.
    pub spikes: Tensor<F>,
}

impl<F: Real> SpikeTrace<F> {
    pub fn timesteps(&self) -> usize {
        self.spikes.shape()[0]
    }

    /// Spike count at every timestep.
    pub fn counts_per_step(&self) -> Vec<u64> {
        (0..self.timesteps())
            .map(|t| self.spikes.outer(t).iter().filter(|&&s| s != F::zero()).count() as u64)
            .collect()
    }

    /// Membranes after the final reset.
    pub fn final_membrane(&self, threshold: F) -> Vec<F> {
        let t = self.timesteps() - 1;
        self.pre_reset
            .outer(t)
            .iter()
            .zip(self.spikes.outer(t))
            .map(|(&h, &s)| h - threshold * s)
            .collect()
    }
}

/// Run a layer over a whole `[T, ...]` input sequence from zero membranes.
pub fn plif_forward<F: Real>(params: &PlifParams<F>, inputs: &Tensor<F>) -> Result<SpikeTrace<F>> {
    let steps = *inputs.shape().first().ok_or_else(|| TensorError::ShapeMismatch {
        op: "plif_forward",
        expected: "[T, ...]".into(),
        got: vec![],
    })?;
    let n = inputs.len() / steps.max(1);
    let (leak, th) = (params.leak(), params.threshold);
    let mut membrane = vec![F::zero(); n];
    let mut pre_reset = Tensor::zeros(inputs.shape());
    let mut spikes = Tensor::zeros(inputs.shape());
    for t in 0..steps {
        let input = inputs.outer(t);
        let h_out = pre_reset.outer_mut(t);
        for i in 0..n {
            h_out[i] = leak * membrane[i] + input[i];
        }
        let s_out = spikes.outer_mut(t);
        for i in 0..n {
            let h = pre_reset.data()[t * n + i];
            let s = params.spike.eval(h - th, params.alpha);
            s_out[i] = s;
            membrane[i] = h - th * s;
        }
    }
    Ok(SpikeTrace { pre_reset, spikes })
}

#[derive(Clone, Debug)]
pub struct PlifGrads<F> {
    /// Gradient with respect to the input current at every step, `[T, ...]`.
    pub input: Tensor<F>,
    /// Gradient with respect to the leak parameter `w`, summed over time and neurons.
    pub leak_param: F,
}

/// Reverse-mode pass through the charge/fire/reset recurrence.
///
/// `grad_spikes` is the cotangent of every step's spikes; `grad_final_membrane`
/// optionally seeds the cotangent of the membrane left after the last step.
pub fn plif_backward<F: Real>(
    params: &PlifParams<F>,
    trace: &SpikeTrace<F>,
    grad_spikes: &Tensor<F>,
    grad_final_membrane: Option<&Tensor<F>>,
) -> Result<PlifGrads<F>> {
    if grad_spikes.shape() != trace.spikes.shape() || trace.pre_reset.shape() != trace.spikes.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "plif_backward",
            expected: format!("trace covering {:?}", grad_spikes.shape()),
            got: trace.spikes.shape().to_vec(),
        });
    }
    let steps = trace.timesteps();
    let n = grad_spikes.len() / steps.max(1);
    let (leak, th, alpha) = (params.leak(), params.threshold, params.alpha);

    let mut grad_u = match grad_final_membrane {
        Some(g) if g.len() == n => g.data().to_vec(),
        Some(g) => {
            return Err(TensorError::ShapeMismatch {
                op: "plif_backward",
                expected: format!("{n} terminal membranes"),
                got: g.shape().to_vec(),
            })
        }
        None => vec![F::zero(); n],
    };
    let mut grad_input = Tensor::zeros(grad_spikes.shape());
    let mut grad_leak = 0.0f64;
    for t in (0..steps).rev() {
        let h = trace.pre_reset.outer(t);
        let gs = grad_spikes.outer(t);
        let gi = grad_input.outer_mut(t);
        let prev = (t > 0).then(|| (trace.pre_reset.outer(t - 1), trace.spikes.outer(t - 1)));
        let mut leak_acc = F::zero();
        for i in 0..n {
            let sg = surrogate_derivative(h[i] - th, alpha);
            let grad_s = gs[i] - th * grad_u[i];
            let grad_h = grad_s * sg + grad_u[i];
            gi[i] = grad_h;
            if let Some((hp, sp)) = prev {
                leak_acc += grad_h * (hp[i] - th * sp[i]);
            }
            grad_u[i] = leak * grad_h;
        }
        grad_leak += leak_acc.to_f64().unwrap_or(f64::NAN);
    }
    let dleak_dw = leak * (F::one() - leak);
    Ok(PlifGrads {
        input: grad_input,
        leak_param: F::lit(grad_leak) * dleak_dw,
    })
}
