//! Discrete-time leaky integrate-and-fire dynamics with hard reset and a
//! sigmoid surrogate gradient.
//!
//! Per step: `v_pre = alpha_decay * v + x`, spike on `v_pre >= v_th`
//! (step convention: threshold crossings at exactly zero fire), then
//! hard reset to `v_reset` wherever a spike fired. Backward through the
//! step function uses the sigmoid surrogate; the reset term treats the
//! spike as a constant so no gradient flows through the reset path in
//! hard mode.

use thiserror::Error;

use crate::tensor::tape::{CustomOp, Tape, Var};
use crate::tensor::{sigmoid, DenseTensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeuronError {
    #[error("drive shape {drive:?} does not match state shape {state:?}")]
    ShapeMismatch { drive: Vec<usize>, state: Vec<usize> },
    #[error("invalid LIF parameters: {0}")]
    InvalidParams(String),
}

/// LIF neuron constants. `dt` is fixed to 1 simulation step, so the leak
/// factor is `alpha_decay = dt / tau = 1 / tau`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifParams {
    pub tau: f64,
    pub v_th: f64,
    pub v_reset: f64,
    pub dt: f64,
    pub surrogate_alpha: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            tau: 2.0,
            v_th: 0.5,
            v_reset: 0.0,
            dt: 1.0,
            surrogate_alpha: 4.0,
        }
    }
}

impl LifParams {
    pub fn alpha_decay(&self) -> f64 {
        self.dt / self.tau
    }

    pub fn validate(&self) -> Result<(), NeuronError> {
        let a = self.alpha_decay();
        if !(self.tau > 0.0) {
            return Err(NeuronError::InvalidParams("tau must be positive".into()));
        }
        if !(a > 0.0 && a <= 1.0) {
            return Err(NeuronError::InvalidParams(format!(
                "alpha_decay {a} outside (0, 1]"
            )));
        }
        if !(self.v_th > self.v_reset) {
            return Err(NeuronError::InvalidParams(
                "v_th must exceed v_reset".into(),
            ));
        }
        Ok(())
    }
}

/// Membrane potential of a neuron population.
#[derive(Debug, Clone, PartialEq)]
pub struct LifState {
    pub v: DenseTensor,
}

impl LifState {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            v: DenseTensor::zeros(shape),
        }
    }
}

/// One integrate-fire-reset step. Spikes are exactly binary; at every
/// position that fired the new potential equals `v_reset` bit-exactly.
pub fn lif_step(
    state: &LifState,
    input_drive: &DenseTensor,
    params: &LifParams,
) -> Result<(DenseTensor, LifState), NeuronError> {
    if input_drive.shape() != state.v.shape() {
        return Err(NeuronError::ShapeMismatch {
            drive: input_drive.shape().to_vec(),
            state: state.v.shape().to_vec(),
        });
    }
    let alpha = params.alpha_decay();
    let n = input_drive.len();
    let mut spikes = vec![0.0; n];
    let mut v_new = vec![0.0; n];
    for i in 0..n {
        let v_pre = alpha * state.v.data()[i] + input_drive.data()[i];
        if v_pre - params.v_th >= 0.0 {
            spikes[i] = 1.0;
            v_new[i] = params.v_reset;
        } else {
            v_new[i] = v_pre;
        }
    }
    let shape = input_drive.shape().to_vec();
    Ok((
        DenseTensor::new(shape.clone(), spikes).expect("shape preserved"),
        LifState {
            v: DenseTensor::new(shape, v_new).expect("shape preserved"),
        },
    ))
}

/// Sequential LIF simulation; the leading axis of `inputs` is the
/// timestep. Returns the binary spike train with the same shape.
pub fn lif_forward_sequence(
    inputs: &DenseTensor,
    params: &LifParams,
    initial: &LifState,
) -> Result<DenseTensor, NeuronError> {
    let t_len = *inputs.shape().first().unwrap_or(&0);
    let rest = &inputs.shape()[inputs.rank().min(1)..];
    let inner: usize = rest.iter().product();
    if initial.v.len() != inner {
        return Err(NeuronError::ShapeMismatch {
            drive: rest.to_vec(),
            state: initial.v.shape().to_vec(),
        });
    }
    let mut state = initial.clone();
    let mut out = DenseTensor::zeros(inputs.shape());
    for t in 0..t_len {
        let drive = DenseTensor::new(
            initial.v.shape().to_vec(),
            inputs.data()[t * inner..(t + 1) * inner].to_vec(),
        )
        .expect("slice length matches state");
        let (spikes, next) = lif_step(&state, &drive, params)?;
        out.data_mut()[t * inner..(t + 1) * inner].copy_from_slice(spikes.data());
        state = next;
    }
    Ok(out)
}

/// `alpha * sigma(alpha u) * (1 - sigma(alpha u))` — the derivative of
/// `sigma(alpha u)`, used as the surrogate for the step function.
pub fn surrogate_grad(u: &DenseTensor, alpha: f64) -> DenseTensor {
    assert!(alpha > 0.0, "surrogate sharpness must be positive");
    crate::tensor::tape::surrogate_derivative(u, alpha)
}

/// How spikes are produced on the tape.
///
/// `Hard` is the real model: exact step forward, surrogate backward,
/// stop-gradient through the reset. `Soft` replaces the step with
/// `sigma(alpha u)` and differentiates the whole recurrence exactly,
/// which makes the full network finite-difference checkable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpikeMode {
    Hard,
    Soft,
}

#[derive(Debug)]
struct LifSequenceOp {
    params: LifParams,
    mode: SpikeMode,
    batch: usize,
    t_len: usize,
    inner: usize,
    v_pre: DenseTensor,
}

impl CustomOp for LifSequenceOp {
    fn name(&self) -> &'static str {
        "lif_sequence"
    }

    fn backward(
        &self,
        inputs: &[&DenseTensor],
        output: &DenseTensor,
        grad: &DenseTensor,
    ) -> Result<Vec<Option<DenseTensor>>, TensorError> {
        let x = inputs[0];
        let (alpha, v_th, v_reset) = (
            self.params.alpha_decay(),
            self.params.v_th,
            self.params.v_reset,
        );
        let a_s = self.params.surrogate_alpha;
        let (b_n, t_n, r_n) = (self.batch, self.t_len, self.inner);
        let mut gx = DenseTensor::zeros(x.shape());
        let mut gv = vec![0.0; r_n]; // grad w.r.t. post-reset v at step t
        for b in 0..b_n {
            gv.iter_mut().for_each(|g| *g = 0.0);
            for t in (0..t_n).rev() {
                let base = (b * t_n + t) * r_n;
                for r in 0..r_n {
                    let i = base + r;
                    let vp = self.v_pre.data()[i];
                    let s = output.data()[i];
                    let gs_out = grad.data()[i];
                    let u = vp - v_th;
                    let (gs_total, sg) = match self.mode {
                        SpikeMode::Hard => {
                            let sig = sigmoid(a_s * u);
                            (gs_out, a_s * sig * (1.0 - sig))
                        }
                        SpikeMode::Soft => {
                            // v depends on s differentiably in soft mode.
                            (gs_out + gv[r] * (v_reset - vp), a_s * s * (1.0 - s))
                        }
                    };
                    let g_vpre = gs_total * sg + gv[r] * (1.0 - s);
                    gx.data_mut()[i] = g_vpre;
                    gv[r] = alpha * g_vpre;
                }
            }
        }
        Ok(vec![Some(gx)])
    }
}

/// Fused LIF simulation on the tape over layout `(batch, T, ...)` with
/// the time axis at position 1. Membrane potential starts at `v_reset`
/// and is not carried across calls.
pub fn lif_sequence(
    tape: &mut Tape,
    x: Var,
    params: &LifParams,
    mode: SpikeMode,
) -> Result<Var, TensorError> {
    let shape = tape.value(x).shape().to_vec();
    assert!(shape.len() >= 2, "lif_sequence expects (batch, T, ...)");
    let batch = shape[0];
    let t_len = shape[1];
    let inner: usize = shape[2..].iter().product();
    let xv = tape.value(x);
    let (alpha, v_th, v_reset, a_s) = (
        params.alpha_decay(),
        params.v_th,
        params.v_reset,
        params.surrogate_alpha,
    );
    let mut v_pre = DenseTensor::zeros(&shape);
    let mut spikes = DenseTensor::zeros(&shape);
    let mut v = vec![0.0; inner];
    for b in 0..batch {
        v.iter_mut().for_each(|p| *p = v_reset);
        for t in 0..t_len {
            let base = (b * t_len + t) * inner;
            for r in 0..inner {
                let vp = alpha * v[r] + xv.data()[base + r];
                v_pre.data_mut()[base + r] = vp;
                let s = match mode {
                    SpikeMode::Hard => {
                        if vp - v_th >= 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    SpikeMode::Soft => sigmoid(a_s * (vp - v_th)),
                };
                spikes.data_mut()[base + r] = s;
                v[r] = vp * (1.0 - s) + v_reset * s;
            }
        }
    }
    let op: Option<Box<dyn CustomOp>> = if tape.wants_grad(&[x]) {
        Some(Box::new(LifSequenceOp {
            params: *params,
            mode,
            batch,
            t_len,
            inner,
            v_pre,
        }))
    } else {
        None
    };
    Ok(tape.custom(&[x], spikes, op))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;

    fn defaults() -> LifParams {
        LifParams::default()
    }

    #[test]
    fn default_params_valid() {
        let p = defaults();
        p.validate().unwrap();
        assert_eq!(p.alpha_decay(), 0.5);
    }

    #[test]
    fn hand_trace_constant_drive() {
        // drive 0.3, tau=2: v_pre goes 0.3, 0.45, 0.525 (spike, reset), 0.3.
        let drive = DenseTensor::full(&[4, 1], 0.3);
        let spikes =
            lif_forward_sequence(&drive, &defaults(), &LifState::zeros(&[1])).unwrap();
        assert_eq!(spikes.data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_drive_stays_silent() {
        let drive = DenseTensor::zeros(&[5, 3]);
        let spikes =
            lif_forward_sequence(&drive, &defaults(), &LifState::zeros(&[3])).unwrap();
        assert!(spikes.data().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn threshold_boundary_fires() {
        // v_pre lands exactly on v_th: step convention says fire.
        let state = LifState::zeros(&[1]);
        let drive = DenseTensor::full(&[1], 0.5);
        let (spikes, next) = lif_step(&state, &drive, &defaults()).unwrap();
        assert_eq!(spikes.data(), &[1.0]);
        assert_eq!(next.v.data(), &[0.0]); // reset is bit-exact
    }

    #[test]
    fn saturated_drive_fires_every_step() {
        let drive = DenseTensor::full(&[6, 2], 1.0);
        let spikes =
            lif_forward_sequence(&drive, &defaults(), &LifState::zeros(&[2])).unwrap();
        assert!(spikes.data().iter().all(|&s| s == 1.0));
    }

    #[test]
    fn empty_sequence_yields_empty_train() {
        let drive = DenseTensor::zeros(&[0, 2]);
        let spikes =
            lif_forward_sequence(&drive, &defaults(), &LifState::zeros(&[2])).unwrap();
        assert_eq!(spikes.shape(), &[0, 2]);
        assert!(spikes.is_empty());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let state = LifState::zeros(&[2]);
        let drive = DenseTensor::zeros(&[3]);
        assert!(matches!(
            lif_step(&state, &drive, &defaults()),
            Err(NeuronError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn surrogate_at_zero_is_one_for_alpha_four() {
        let g = surrogate_grad(&DenseTensor::scalar(0.0), 4.0);
        assert!((g.item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn surrogate_saturates_far_from_threshold() {
        let g = surrogate_grad(
            &DenseTensor::new(vec![2], vec![-40.0, 40.0]).unwrap(),
            4.0,
        );
        assert!(g.data().iter().all(|&v| v.abs() < 1e-30));
    }

    #[test]
    fn surrogate_matches_finite_difference_of_sigmoid() {
        let u = 0.7;
        let alpha = 4.0;
        let eps = 1e-6;
        let fd = (crate::tensor::sigmoid(alpha * (u + eps))
            - crate::tensor::sigmoid(alpha * (u - eps)))
            / (2.0 * eps);
        let g = surrogate_grad(&DenseTensor::scalar(u), alpha).item();
        assert!((g - fd).abs() < 1e-8, "analytic {g} vs fd {fd}");
    }

    #[test]
    fn spikes_binary_and_reset_exact_random_inputs() {
        let mut rng = crate::init::SeededRng::new(11);
        for _ in 0..50 {
            let drive = rng.uniform_tensor(&[6, 4], -1.5, 1.5);
            let mut state = LifState::zeros(&[4]);
            for t in 0..6 {
                let step = DenseTensor::new(
                    vec![4],
                    drive.data()[t * 4..(t + 1) * 4].to_vec(),
                )
                .unwrap();
                let (spikes, next) = lif_step(&state, &step, &defaults()).unwrap();
                assert!(spikes.is_binary());
                for i in 0..4 {
                    if spikes.data()[i] == 1.0 {
                        assert_eq!(next.v.data()[i], 0.0);
                    }
                }
                state = next;
            }
        }
    }

    #[test]
    fn leak_shrinks_potential_without_input() {
        let mut state = LifState {
            v: DenseTensor::new(vec![2], vec![0.4, -0.3]).unwrap(),
        };
        let zero = DenseTensor::zeros(&[2]);
        let mut prev: Vec<f64> = state.v.data().iter().map(|v| v.abs()).collect();
        for _ in 0..5 {
            let (spikes, next) = lif_step(&state, &zero, &defaults()).unwrap();
            assert!(spikes.data().iter().all(|&s| s == 0.0));
            for i in 0..2 {
                assert!(next.v.data()[i].abs() <= prev[i]);
                prev[i] = next.v.data()[i].abs();
            }
            state = next;
        }
    }

    #[test]
    fn tape_forward_matches_value_forward_exactly() {
        let mut rng = crate::init::SeededRng::new(5);
        let x = rng.uniform_tensor(&[2, 5, 3], -1.0, 1.0);
        // Tape path (recording on).
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let s_tape = lif_sequence(&mut tape, xv, &defaults(), SpikeMode::Hard).unwrap();
        // Tape path (recording off).
        let mut tape_off = Tape::no_grad();
        let xv2 = tape_off.param(x.clone());
        let s_off = lif_sequence(&mut tape_off, xv2, &defaults(), SpikeMode::Hard).unwrap();
        assert_eq!(tape.value(s_tape).data(), tape_off.value(s_off).data());
        // Value path, sample by sample.
        for b in 0..2 {
            let sample = DenseTensor::new(
                vec![5, 3],
                x.data()[b * 15..(b + 1) * 15].to_vec(),
            )
            .unwrap();
            let spikes =
                lif_forward_sequence(&sample, &defaults(), &LifState::zeros(&[3])).unwrap();
            assert_eq!(
                spikes.data(),
                &tape.value(s_tape).data()[b * 15..(b + 1) * 15]
            );
        }
    }

    #[test]
    fn soft_mode_gradient_matches_finite_differences() {
        let mut rng = crate::init::SeededRng::new(17);
        let x = rng.uniform_tensor(&[2, 4, 3], -1.0, 1.5);
        let err = check_gradients(
            |tape, vars| {
                let s = lif_sequence(tape, vars[0], &defaults(), SpikeMode::Soft)?;
                let sq = tape.mul(s, s)?;
                let a = tape.sum_axis(sq, 2)?;
                let b = tape.sum_axis(a, 1)?;
                let c = tape.mean_axis(b, 0)?;
                Ok(c)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }
}
