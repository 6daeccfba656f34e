//! Binary channel manipulation.
//!
//! Each channel `j` of operator `i`'s response gets a learnable manipulator
//! `w[i][j]`. During search the gated responses are concatenated and fed to
//! the heads; manipulators are learned on validation loss while the network
//! weights are learned on training loss. After search an operator's
//! potential is the sum of its sigmoided manipulators and the two operators
//! with the largest potential are retained.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::operators::{OperatorKind, ResponseSet};
use crate::params::{Bound, ParamStore};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Cls,
    Reg,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Cls => "cls",
            Branch::Reg => "reg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum NoiseMode {
    /// `g_k = 0`: gates are deterministic functions of `w`.
    Zero,
    /// Fresh Gumbel noise every step, derived from `seed`.
    Sampled { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// `σ((w + g1 − g2)/τ)`.
    Soft,
    /// Binary forward value with the soft gradient.
    Hard,
}

/// Relaxed binary sample `y1 = σ((w + g1 − g2)/τ)`.
pub fn gumbel_soft<S: Scalar>(w: S, g1: S, g2: S, tau: S) -> S {
    sigmoid((w + g1 - g2) / tau)
}

/// A hard gate value with the gradient used for it on the backward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HardGate<S> {
    /// `1` iff `(w + g1 − g2)/τ > 0`.
    pub value: S,
    /// `∂y1/∂w` of the relaxed sample.
    pub grad: S,
}

/// Straight-through binary sample.
pub fn gumbel_hard<S: Scalar>(w: S, g1: S, g2: S, tau: S) -> HardGate<S> {
    let z = (w + g1 - g2) / tau;
    let y = sigmoid(z);
    HardGate {
        value: if z > S::zero() { S::one() } else { S::zero() },
        grad: y * (S::one() - y) / tau,
    }
}

/// Standard Gumbel draw `−ln(−ln U)`.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Manipulators `w: m×C` for one head branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ManipulatorBank<S> {
    pub branch: Branch,
    pub w: Tensor<S>,
    pub tau: S,
    pub noise: NoiseMode,
}

impl<S: Scalar> ManipulatorBank<S> {
    /// Zero-initialised bank: every gate starts at `σ(0) = 0.5`.
    pub fn new(branch: Branch, m: usize, c: usize, tau: S, noise: NoiseMode) -> Result<Self> {
        if !(tau > S::zero()) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        Ok(Self {
            branch,
            w: Tensor::zeros(&[m, c])?,
            tau,
            noise,
        })
    }

    pub fn param_name(branch: Branch) -> String {
        format!("{}.bcm.w", branch.name())
    }

    pub fn operators(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.w.shape()[1]
    }

    /// `p_i = Σ_j σ(w[i][j])`.
    pub fn potentials(&self) -> Vec<S> {
        potentials(&self.w)
    }

    /// Gumbel noise pair `(g1, g2)` for one step; `None` in zero-noise mode.
    pub fn noise_for_step(&self, step: u64) -> Option<(Tensor<S>, Tensor<S>)> {
        let NoiseMode::Sampled { seed } = self.noise else {
            return None;
        };
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step.wrapping_mul(2) + (self.branch == Branch::Reg) as u64);
        let n = self.w.len();
        let mut draw = || {
            let v = (0..n).map(|_| S::lit(sample_gumbel(&mut rng))).collect();
            Tensor::from_vec(self.w.shape(), v).expect("bank shape")
        };
        let g1 = draw();
        let g2 = draw();
        Some((g1, g2))
    }
}

/// Potentials of every operator row of a manipulator matrix.
pub fn potentials<S: Scalar>(w: &Tensor<S>) -> Vec<S> {
    let c = w.shape()[1];
    w.data()
        .chunks(c)
        .map(|row| row.iter().map(|&x| sigmoid(x)).sum())
        .collect()
}

/// Gate settings for [`aggregate`].
#[derive(Debug, Clone)]
pub struct GateSpec<S> {
    pub tau: S,
    pub mode: GateMode,
    pub noise: Option<(Tensor<S>, Tensor<S>)>,
}

impl<S: Scalar> GateSpec<S> {
    pub fn soft(tau: S) -> Self {
        Self {
            tau,
            mode: GateMode::Soft,
            noise: None,
        }
    }
}

/// Concatenation of every response channel scaled by its gate, in
/// canonical operator order: `H_x×W_x×(mC)`.
pub fn aggregate<S: Scalar>(
    tape: &mut Tape<S>,
    w: Var,
    rs: &ResponseSet,
    gate: &GateSpec<S>,
) -> Result<Var> {
    let sw = tape.shape(w).to_vec();
    if rs.is_empty() || sw.len() != 2 || sw[0] != rs.len() {
        return Err(TensorError::ShapeMismatch {
            op: "aggregate",
            lhs: sw,
            rhs: vec![rs.len()],
        }
        .into());
    }
    let c = sw[1];
    for &r in &rs.responses {
        if tape.shape(r).last() != Some(&c) {
            return Err(TensorError::ShapeMismatch {
                op: "aggregate",
                lhs: vec![sw[0], c],
                rhs: tape.shape(r).to_vec(),
            }
            .into());
        }
    }
    let mut z = w;
    if let Some((g1, g2)) = &gate.noise {
        let g1 = tape.constant(g1.clone());
        let g2 = tape.constant(g2.clone());
        let diff = tape.sub(g1, g2)?;
        z = tape.add(z, diff)?;
    }
    if gate.tau != S::one() {
        z = tape.scale(z, S::one() / gate.tau);
    }
    let soft = tape.sigmoid(z);
    let gates = match gate.mode {
        GateMode::Soft => soft,
        GateMode::Hard => tape.straight_through(z, soft)?,
    };
    let mut parts = Vec::with_capacity(rs.len());
    for (i, &r) in rs.responses.iter().enumerate() {
        let row = tape.select_row(gates, i)?;
        let row = tape.reshape(row, &[1, 1, c])?;
        parts.push(tape.mul(r, row)?);
    }
    Ok(tape.concat(&parts)?)
}

/// The two operators kept after search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetainedPair {
    pub first: OperatorKind,
    pub second: OperatorKind,
    /// Set when the search space had a single operator.
    pub degenerate: bool,
}

impl RetainedPair {
    pub fn kinds(&self) -> [OperatorKind; 2] {
        [self.first, self.second]
    }
}

/// Operator indices sorted by descending potential; equal potentials keep
/// canonical (ascending index) order.
pub fn rank_by_potential<S: Scalar>(potentials: &[S]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..potentials.len()).collect();
    order.sort_by(|&a, &b| {
        potentials[b]
            .partial_cmp(&potentials[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Top-2 retention rule.
pub fn retain_top_two<S: Scalar>(potentials: &[S], kinds: &[OperatorKind]) -> Result<RetainedPair> {
    if potentials.is_empty() || potentials.len() != kinds.len() {
        return Err(Error::Config(format!(
            "{} potentials for {} operators",
            potentials.len(),
            kinds.len()
        )));
    }
    let order = rank_by_potential(potentials);
    Ok(match order.as_slice() {
        [only] => RetainedPair {
            first: kinds[*only],
            second: kinds[*only],
            degenerate: true,
        },
        [a, b, ..] => RetainedPair {
            first: kinds[*a],
            second: kinds[*b],
            degenerate: false,
        },
        [] => unreachable!(),
    })
}

/// Outcome of a search for one branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub branch: Branch,
    pub kinds: Vec<OperatorKind>,
    pub potentials: Vec<f64>,
    pub retained: RetainedPair,
    /// Potentials after each epoch.
    pub history: Vec<Vec<f64>>,
    pub seed: u64,
}

/// Stage-2 wiring: the two retained responses concatenated in potential
/// order, ungated. `H_x×W_x×2C`.
pub fn select_retained<S: Scalar>(
    tape: &mut Tape<S>,
    retained: &RetainedPair,
    rs: &ResponseSet,
) -> Result<Var> {
    let pick = |k: OperatorKind| {
        rs.response(k)
            .ok_or_else(|| Error::Config(format!("retained operator {k} not in response set")))
    };
    let (a, b) = (pick(retained.first)?, pick(retained.second)?);
    if retained.first == retained.second {
        warn!("retained pair is degenerate ({}); duplicating its response", retained.first);
    }
    Ok(tape.concat(&[a, b])?)
}

/// Losses observed during one [`bilevel_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses<S> {
    pub train: S,
    pub val: S,
}

/// Loss closure used by [`bilevel_step`]: builds a scalar loss on the tape
/// from bound network weights and bound manipulators.
pub trait LossFn<S>: FnMut(&mut Tape<S>, &Bound, &Bound) -> Result<Var> {}
impl<S, F: FnMut(&mut Tape<S>, &Bound, &Bound) -> Result<Var>> LossFn<S> for F {}

fn check_finite<S: Scalar>(tape: &Tape<S>, loss: Var, what: &str) -> Result<S> {
    let v = tape.value(loss).data()[0];
    if !v.is_finite() {
        return Err(Error::Diverged(format!("{what} loss is {v}")));
    }
    Ok(v)
}

/// One first-order bilevel update:
///
/// 1. `θ' = θ − ε ∇θ L_train(θ, w)`
/// 2. `w ← w − lr_w ∇w L_val(θ', w)` (the term through `θ'` is dropped)
/// 3. `θ ← θ'`
pub fn bilevel_step<S: Scalar>(
    theta: &mut ParamStore<S>,
    arch: &mut ParamStore<S>,
    train_loss: impl LossFn<S>,
    val_loss: impl LossFn<S>,
    eps: S,
    lr_w: S,
) -> Result<StepLosses<S>> {
    bilevel_step_clipped(theta, arch, train_loss, val_loss, eps, lr_w, S::zero())
}

/// [`bilevel_step`] with the inner θ step shortened to a global gradient
/// norm of at most `clip_norm` (non-positive disables).
pub fn bilevel_step_clipped<S: Scalar>(
    theta: &mut ParamStore<S>,
    arch: &mut ParamStore<S>,
    mut train_loss: impl LossFn<S>,
    mut val_loss: impl LossFn<S>,
    eps: S,
    lr_w: S,
    clip_norm: S,
) -> Result<StepLosses<S>> {
    if eps < S::zero() {
        return Err(Error::Config(format!("inner step must be non-negative, got {eps}")));
    }
    let mut tape = Tape::new();
    let tb = theta.bind(&mut tape);
    let ab = arch.bind_frozen(&mut tape);
    let loss = train_loss(&mut tape, &tb, &ab)?;
    let train = check_finite(&tape, loss, "training")?;
    if tape.requires_grad(loss) {
        tape.backward(loss)?;
        theta.sgd_step_clipped(&tape, &tb, eps, clip_norm);
    }

    let mut tape = Tape::new();
    let tb = theta.bind_frozen(&mut tape);
    let ab = arch.bind(&mut tape);
    let loss = val_loss(&mut tape, &tb, &ab)?;
    let val = check_finite(&tape, loss, "validation")?;
    if tape.requires_grad(loss) {
        tape.backward(loss)?;
        arch.sgd_step(&tape, &ab, lr_w);
    }
    if !theta.is_finite() || !arch.is_finite() {
        return Err(Error::Diverged("non-finite parameters after update".into()));
    }
    Ok(StepLosses { train, val })
}

/// Which phase a loss is evaluated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Val,
}

/// Context handed to the search loss: global step index and phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepCtx {
    pub step: u64,
    pub phase: Phase,
}

/// Optimisation schedule for [`run_search`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchSchedule<S> {
    pub epochs: usize,
    /// Inner step `ε`, also the weight learning rate.
    pub lr_theta: S,
    /// Final `ε` after exponential decay over all steps.
    pub lr_theta_final: S,
    pub lr_w: S,
    /// Bound on the θ gradient norm; zero disables.
    pub clip_norm: S,
}

/// One bank under search: its branch and the operators its rows gate.
#[derive(Debug, Clone, PartialEq)]
pub struct BankSpec {
    pub branch: Branch,
    pub kinds: Vec<OperatorKind>,
}

/// Alternates [`bilevel_step`] over `train` batches (each paired with a
/// validation batch, cycling) for `schedule.epochs` epochs and returns one
/// [`SearchResult`] per bank. Manipulators live in `arch` under
/// [`ManipulatorBank::param_name`].
#[allow(clippy::too_many_arguments)]
pub fn run_search<S: Scalar, B>(
    theta: &mut ParamStore<S>,
    arch: &mut ParamStore<S>,
    banks: &[BankSpec],
    train: &[B],
    val: &[B],
    schedule: &SearchSchedule<S>,
    seed: u64,
    mut loss: impl FnMut(&mut Tape<S>, &Bound, &Bound, &B, StepCtx) -> Result<Var>,
) -> Result<Vec<SearchResult>> {
    if schedule.epochs > 0 && (train.is_empty() || val.is_empty()) {
        return Err(Error::Data("search needs non-empty train and validation splits".into()));
    }
    let snapshot = |arch: &ParamStore<S>| -> Result<Vec<Vec<f64>>> {
        banks
            .iter()
            .map(|b| {
                let w = arch.get(&ManipulatorBank::<S>::param_name(b.branch)).ok_or_else(|| {
                    Error::Config(format!("no manipulators for branch {}", b.branch.name()))
                })?;
                Ok(potentials(w).into_iter().map(S::to_f64_lossy).collect())
            })
            .collect()
    };

    let total_steps = (schedule.epochs * train.len()).max(1);
    let decay = if schedule.lr_theta > S::zero() {
        (schedule.lr_theta_final / schedule.lr_theta)
            .ln()
            .to_f64_lossy()
            / total_steps as f64
    } else {
        0.0
    };
    let mut history: Vec<Vec<Vec<f64>>> = vec![Vec::new(); banks.len()];
    let mut step = 0u64;
    for _ in 0..schedule.epochs {
        for (i, batch) in train.iter().enumerate() {
            let vbatch = &val[i % val.len()];
            let eps = schedule.lr_theta * S::lit((decay * step as f64).exp());
            let s = step;
            // Both closures need `loss`; borrow it through a cell.
            let loss_cell = std::cell::RefCell::new(&mut loss);
            bilevel_step_clipped(
                theta,
                arch,
                |t: &mut Tape<S>, tb: &Bound, ab: &Bound| {
                    (*loss_cell.borrow_mut())(t, tb, ab, batch, StepCtx { step: s, phase: Phase::Train })
                },
                |t: &mut Tape<S>, tb: &Bound, ab: &Bound| {
                    (*loss_cell.borrow_mut())(t, tb, ab, vbatch, StepCtx { step: s, phase: Phase::Val })
                },
                eps,
                schedule.lr_w,
                schedule.clip_norm,
            )?;
            step += 1;
        }
        for (h, p) in history.iter_mut().zip(snapshot(arch)?) {
            h.push(p);
        }
    }

    let finals = snapshot(arch)?;
    banks
        .iter()
        .zip(finals)
        .zip(history)
        .map(|((bank, potentials), history)| {
            Ok(SearchResult {
                branch: bank.branch,
                kinds: bank.kinds.clone(),
                retained: retain_top_two(&potentials, &bank.kinds)?,
                potentials,
                history,
                seed,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::OperatorKind::*;

    #[test]
    fn soft_gate_values() {
        assert_eq!(gumbel_soft(0.0, 0.0, 0.0, 1.0), 0.5);
        assert!((gumbel_soft(2.0f64, 0.0, 0.0, 1.0) - 0.880_797_077_977_882_3).abs() < 1e-15);
    }

    #[test]
    fn hard_gate_threshold() {
        assert_eq!(gumbel_hard(0.3f64, 0.0, 0.0, 1.0).value, 1.0);
        assert_eq!(gumbel_hard(-0.3f64, 0.0, 0.0, 1.0).value, 0.0);
        assert_eq!(gumbel_hard(0.0f64, 0.0, 0.0, 1.0).value, 0.0);
        // σ'(0.3) = σ(0.3)(1 − σ(0.3))
        assert!((gumbel_hard(0.3f64, 0.0, 0.0, 1.0).grad - 0.244_458_311_690_745_86).abs() < 1e-12);
    }

    #[test]
    fn potential_values() {
        let w = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        let p = potentials(&w);
        assert!((p[0] - 1.0).abs() < 1e-15);
        assert_eq!(p[1], 1.0);
        let bank = ManipulatorBank::<f64>::new(Branch::Cls, 7, 256, 1.0, NoiseMode::Zero).unwrap();
        assert!(bank.potentials().iter().all(|&p| p == 128.0));
        assert!(ManipulatorBank::<f64>::new(Branch::Cls, 1, 1, 0.0, NoiseMode::Zero).is_err());
    }

    #[test]
    fn retention_ties_and_degenerate() {
        let kinds = [DwXcorr, Concat, PointwiseAdd];
        let r = retain_top_two(&[1.0, 1.0, 1.0], &kinds).unwrap();
        assert_eq!((r.first, r.second, r.degenerate), (DwXcorr, Concat, false));
        let r = retain_top_two(&[0.5, 2.0, 2.0], &kinds).unwrap();
        assert_eq!((r.first, r.second), (Concat, PointwiseAdd));
        let r = retain_top_two(&[0.5], &[Film]).unwrap();
        assert_eq!((r.first, r.second, r.degenerate), (Film, Film, true));
        assert!(retain_top_two::<f64>(&[], &[]).is_err());
    }

    #[test]
    fn sampled_noise_is_replayable() {
        let bank = ManipulatorBank::<f64>::new(Branch::Reg, 2, 3, 1.0, NoiseMode::Sampled { seed: 9 })
            .unwrap();
        assert_eq!(bank.noise_for_step(4), bank.noise_for_step(4));
        assert_ne!(bank.noise_for_step(4), bank.noise_for_step(5));
        let zero = ManipulatorBank::<f64>::new(Branch::Reg, 2, 3, 1.0, NoiseMode::Zero).unwrap();
        assert!(zero.noise_for_step(0).is_none());
    }

    #[test]
    fn bilevel_rejects_nan() {
        let mut theta = ParamStore::<f64>::new();
        theta.insert("t", Tensor::scalar(1.0));
        let mut arch = ParamStore::new();
        arch.insert("w", Tensor::scalar(0.0));
        let nan = |tape: &mut Tape<f64>, tb: &Bound, _: &Bound| {
            let t = tb.get("t")?;
            Ok(tape.scale(t, f64::NAN))
        };
        let ok = |_: &mut Tape<f64>, _: &Bound, ab: &Bound| Ok(ab.get("w")?);
        assert!(matches!(
            bilevel_step(&mut theta, &mut arch, nan, ok, 0.1, 0.1),
            Err(Error::Diverged(_))
        ));
    }
}
