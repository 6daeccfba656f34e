//! Matching network plus classification/regression heads.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::bcm::{aggregate, select_retained, Branch, GateMode, GateSpec, ManipulatorBank, NoiseMode, RetainedPair};
use crate::error::{Error, Result};
use crate::geometry::{cell_center, BBox};
use crate::operators::{build_response_set, FeaturePair, OperatorConfig, OperatorKind, OperatorSet, PairDims};
use crate::params::{conv1x1_init, Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::labels::Labels;

/// Head outputs on the search grid.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `H_x×W_x×1` logits.
    pub cls_logits: Var,
    /// `H_x×W_x×4` positive side distances.
    pub reg_pred: Var,
}

fn head_name(branch: Branch, leaf: &str) -> String {
    format!("{}.head.{leaf}", branch.name())
}

/// Output width of a branch head.
pub fn head_outputs(branch: Branch) -> usize {
    match branch {
        Branch::Cls => 1,
        Branch::Reg => 4,
    }
}

/// Reduce conv (`in_channels → C`) followed by the output conv.
pub fn init_head<S: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<S>,
    rng: &mut R,
    branch: Branch,
    in_channels: usize,
    c: usize,
) -> Result<()> {
    let (w, b) = conv1x1_init(rng, in_channels, c)?;
    store.insert(head_name(branch, "reduce.weight"), w);
    store.insert(head_name(branch, "reduce.bias"), b);
    let (w, b) = conv1x1_init(rng, c, head_outputs(branch))?;
    store.insert(head_name(branch, "out.weight"), w);
    store.insert(head_name(branch, "out.bias"), b);
    Ok(())
}

/// One branch head. The regression output goes through softplus.
pub fn branch_head<S: Scalar>(
    tape: &mut Tape<S>,
    input: Var,
    params: &Bound,
    branch: Branch,
) -> Result<Var> {
    let hidden = tape.conv1x1(
        input,
        params.get(&head_name(branch, "reduce.weight"))?,
        params.get(&head_name(branch, "reduce.bias"))?,
    )?;
    let out = tape.conv1x1(
        hidden,
        params.get(&head_name(branch, "out.weight"))?,
        params.get(&head_name(branch, "out.bias"))?,
    )?;
    Ok(match branch {
        Branch::Cls => out,
        Branch::Reg => tape.softplus(out),
    })
}

pub fn head_forward<S: Scalar>(
    tape: &mut Tape<S>,
    cls_input: Var,
    reg_input: Var,
    params: &Bound,
) -> Result<HeadOutput> {
    Ok(HeadOutput {
        cls_logits: branch_head(tape, cls_input, params, Branch::Cls)?,
        reg_pred: branch_head(tape, reg_input, params, Branch::Reg)?,
    })
}

/// Balanced BCE on the classification map plus `λ`·mean(1 − IoU) over
/// valid regression cells. Positives and negatives each carry half of the
/// classification mass. Without positives only the classification term
/// remains.
pub fn loss_total<S: Scalar>(
    tape: &mut Tape<S>,
    out: &HeadOutput,
    labels: &Labels<S>,
    lambda: S,
) -> Result<Var> {
    let targets = labels.cls_target.data().to_vec();
    if tape.value(out.cls_logits).len() != targets.len()
        || tape.value(out.reg_pred).len() != labels.reg_target.len()
    {
        return Err(Error::Config("head output and label shapes disagree".into()));
    }
    let n = targets.len();
    let n_pos = labels.positives();
    let n_neg = n - n_pos;
    let weights: Vec<S> = if n_pos == 0 || n_neg == 0 {
        if n_pos == 0 {
            warn!("no positive cell in labels; using classification loss only");
        }
        vec![S::one() / S::from_usize_lossy(n); n]
    } else {
        let wp = S::lit(0.5) / S::from_usize_lossy(n_pos);
        let wn = S::lit(0.5) / S::from_usize_lossy(n_neg);
        targets
            .iter()
            .map(|&t| if t > S::zero() { wp } else { wn })
            .collect()
    };
    let cls = tape.weighted_bce(out.cls_logits, targets, weights)?;
    let valid = labels.valid_cells();
    if n_pos == 0 || valid.is_empty() || lambda == S::zero() {
        return Ok(cls);
    }
    let reg = tape.iou_loss(out.reg_pred, labels.reg_target.data().to_vec(), valid)?;
    let reg = tape.scale(reg, lambda);
    Ok(tape.add(cls, reg)?)
}

/// Box from the highest-logit cell (first in row-major order on ties) and
/// that cell's four side distances.
pub fn predict_box<S: Scalar>(cls_logits: &Tensor<S>, reg_pred: &Tensor<S>) -> BBox {
    let w = cls_logits.shape()[1];
    let mut best = 0;
    for (i, &v) in cls_logits.data().iter().enumerate() {
        if v > cls_logits.data()[best] {
            best = i;
        }
    }
    let (cx, cy) = cell_center(best / w, best % w);
    let d: Vec<f64> = reg_pred.data()[best * 4..best * 4 + 4]
        .iter()
        .map(|x| x.to_f64_lossy())
        .collect();
    BBox::new(cx - d[0], cy - d[1], cx + d[2], cy + d[3])
}

/// How a branch turns operator responses into head input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "wiring")]
pub enum Wiring {
    /// Every operator, channel-gated by the branch's manipulators.
    Gated,
    /// The two retained responses concatenated, no gates.
    Retained { pair: RetainedPair },
    /// A single operator's response.
    Single { kind: OperatorKind },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchModel {
    pub branch: Branch,
    pub operators: OperatorSet,
    pub wiring: Wiring,
}

impl BranchModel {
    fn prefix(branch: Branch) -> String {
        format!("{}.op", branch.name())
    }

    pub fn gated(branch: Branch, kinds: &[OperatorKind]) -> Result<Self> {
        Ok(Self {
            branch,
            operators: OperatorSet::new(kinds, &Self::prefix(branch))?,
            wiring: Wiring::Gated,
        })
    }

    pub fn retained(branch: Branch, pair: RetainedPair) -> Result<Self> {
        let kinds: Vec<OperatorKind> = if pair.first == pair.second {
            vec![pair.first]
        } else {
            vec![pair.first, pair.second]
        };
        Ok(Self {
            branch,
            operators: OperatorSet::new(&kinds, &Self::prefix(branch))?,
            wiring: Wiring::Retained { pair },
        })
    }

    pub fn single(branch: Branch, kind: OperatorKind) -> Result<Self> {
        Ok(Self {
            branch,
            operators: OperatorSet::new(&[kind], &Self::prefix(branch))?,
            wiring: Wiring::Single { kind },
        })
    }

    /// Channels fed to the head.
    pub fn head_channels(&self, c: usize) -> usize {
        match self.wiring {
            Wiring::Gated => self.operators.len() * c,
            Wiring::Retained { .. } => 2 * c,
            Wiring::Single { .. } => c,
        }
    }
}

/// Gate behaviour of the search-stage model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateSettings {
    pub tau: f64,
    pub mode: GateMode,
    pub noise: NoiseMode,
}

impl Default for GateSettings {
    fn default() -> Self {
        Self {
            tau: 1.0,
            mode: GateMode::Soft,
            noise: NoiseMode::Zero,
        }
    }
}

/// Two branches, their heads and (for gated branches) manipulators.
#[derive(Debug, Clone, PartialEq)]
pub struct SiameseModel<S> {
    pub cls: BranchModel,
    pub reg: BranchModel,
    pub op_cfg: OperatorConfig,
    pub gate: GateSettings,
    pub dims: PairDims,
    /// Operator and head weights.
    pub theta: ParamStore<S>,
    /// Manipulators, one `m×C` matrix per gated branch.
    pub arch: ParamStore<S>,
}

impl<S: Scalar> SiameseModel<S> {
    pub fn new<R: Rng + ?Sized>(
        cls: BranchModel,
        reg: BranchModel,
        dims: PairDims,
        op_cfg: OperatorConfig,
        gate: GateSettings,
        rng: &mut R,
    ) -> Result<Self> {
        if !(gate.tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", gate.tau)));
        }
        let mut theta = ParamStore::new();
        let mut arch = ParamStore::new();
        for b in [&cls, &reg] {
            b.operators.init_params(&mut theta, rng, dims, &op_cfg)?;
            init_head(&mut theta, rng, b.branch, b.head_channels(dims.c), dims.c)?;
            if b.wiring == Wiring::Gated {
                let bank = ManipulatorBank::<S>::new(
                    b.branch,
                    b.operators.len(),
                    dims.c,
                    S::lit(gate.tau),
                    gate.noise,
                )?;
                arch.insert(ManipulatorBank::<S>::param_name(b.branch), bank.w);
            }
        }
        Ok(Self {
            cls,
            reg,
            op_cfg,
            gate,
            dims,
            theta,
            arch,
        })
    }

    /// Manipulator bank snapshot of a gated branch.
    pub fn bank(&self, branch: Branch) -> Option<ManipulatorBank<S>> {
        let w = self.arch.get(&ManipulatorBank::<S>::param_name(branch))?.clone();
        Some(ManipulatorBank {
            branch,
            w,
            tau: S::lit(self.gate.tau),
            noise: self.gate.noise,
        })
    }

    fn branch_input(
        &self,
        tape: &mut Tape<S>,
        model: &BranchModel,
        pair: &crate::operators::PairVars,
        tb: &Bound,
        ab: &Bound,
        step: Option<u64>,
    ) -> Result<Var> {
        let rs = build_response_set(tape, pair, &model.operators, tb, &self.op_cfg)?;
        match &model.wiring {
            Wiring::Gated => {
                let w = ab.get(&ManipulatorBank::<S>::param_name(model.branch))?;
                let noise = match step {
                    Some(s) => self.bank(model.branch).and_then(|b| b.noise_for_step(s)),
                    None => None,
                };
                let spec = GateSpec {
                    tau: S::lit(self.gate.tau),
                    mode: self.gate.mode,
                    noise,
                };
                aggregate(tape, w, &rs, &spec)
            }
            Wiring::Retained { pair } => select_retained(tape, pair, &rs),
            Wiring::Single { .. } => Ok(rs.responses[0]),
        }
    }

    /// Full forward pass. `step` selects Gumbel noise in sampled mode;
    /// `None` evaluates without noise.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        pair: &FeaturePair<S>,
        tb: &Bound,
        ab: &Bound,
        step: Option<u64>,
    ) -> Result<HeadOutput> {
        let vars = pair.record(tape, false);
        let cls_in = self.branch_input(tape, &self.cls, &vars, tb, ab, step)?;
        let reg_in = self.branch_input(tape, &self.reg, &vars, tb, ab, step)?;
        head_forward(tape, cls_in, reg_in, tb)
    }

    /// Mean of [`loss_total`] over a batch.
    pub fn batch_loss<'a>(
        &self,
        tape: &mut Tape<S>,
        tb: &Bound,
        ab: &Bound,
        batch: impl IntoIterator<Item = (&'a FeaturePair<S>, &'a Labels<S>)>,
        lambda: S,
        step: Option<u64>,
    ) -> Result<Var> {
        let mut total: Option<Var> = None;
        let mut n = 0usize;
        for (pair, labels) in batch {
            let out = self.forward(tape, pair, tb, ab, step)?;
            let l = loss_total(tape, &out, labels, lambda)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
            n += 1;
        }
        let total = total.ok_or_else(|| Error::Data("empty batch".into()))?;
        Ok(tape.scale(total, S::one() / S::from_usize_lossy(n)))
    }

    /// Inference without gradients: `(cls_logits, reg_pred)`.
    pub fn predict(&self, pair: &FeaturePair<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let mut tape = Tape::new();
        let tb = self.theta.bind_frozen(&mut tape);
        let ab = self.arch.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, pair, &tb, &ab, None)?;
        Ok((
            tape.value(out.cls_logits).clone(),
            tape.value(out.reg_pred).clone(),
        ))
    }

    pub fn predict_box(&self, pair: &FeaturePair<S>) -> Result<BBox> {
        let (cls, reg) = self.predict(pair)?;
        Ok(predict_box(&cls, &reg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::desk::labels::make_labels;

    #[test]
    fn predict_box_from_one_hot() {
        let mut cls = Tensor::<f64>::zeros(&[5, 5, 1]).unwrap();
        cls.data_mut()[2 * 5 + 3] = 1.0;
        let reg = Tensor::full(&[5, 5, 4], 1.0).unwrap();
        let b = predict_box(&cls, &reg);
        assert_eq!(b, BBox::new(2.5, 1.5, 4.5, 3.5));
        assert_eq!(b.center(), cell_center(2, 3));

        let flat = Tensor::<f64>::zeros(&[5, 5, 1]).unwrap();
        assert_eq!(predict_box(&flat, &reg).center(), cell_center(0, 0));
    }

    #[test]
    fn loss_limits() {
        let labels = make_labels::<f64>(&BBox::from_cells(0..1, 0..1), 2, 1);
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::from_vec(&[2, 1, 1], vec![40.0, -40.0]).unwrap());
        let reg = tape.param(labels.reg_target.clone());
        let out = HeadOutput {
            cls_logits: logits,
            reg_pred: reg,
        };
        let l = loss_total(&mut tape, &out, &labels, 1.0).unwrap();
        assert!(tape.value(l).data()[0] < 1e-15);

        // A single valid cell with IoU 1/2 contributes λ·0.5.
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::from_vec(&[2, 1, 1], vec![40.0, -40.0]).unwrap());
        let mut half = labels.reg_target.clone();
        half.data_mut()[3] = 0.0;
        let reg = tape.param(half);
        let out = HeadOutput {
            cls_logits: logits,
            reg_pred: reg,
        };
        let l = loss_total(&mut tape, &out, &labels, 2.0).unwrap();
        assert!((tape.value(l).data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_without_positives_is_cls_only() {
        let labels = make_labels::<f64>(&BBox::new(10.0, 10.0, 11.0, 11.0), 2, 2);
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::zeros(&[2, 2, 1]).unwrap());
        let reg = tape.param(Tensor::full(&[2, 2, 4], 1.0).unwrap());
        let out = HeadOutput {
            cls_logits: logits,
            reg_pred: reg,
        };
        let l = loss_total(&mut tape, &out, &labels, 1.0).unwrap();
        assert!((tape.value(l).data()[0] - 2f64.ln()).abs() < 1e-15);
    }
}
