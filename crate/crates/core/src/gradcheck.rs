//! Central finite-difference gradient checking.

use crate::autograd::{Tape, Var};
use crate::scalar::Scalar;
use crate::geometry::BBox;
use crate::operators::{FeaturePair, MatchingOperator, OperatorConfig, OperatorKind, PairDims, PairVars};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Init, Result, Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Default finite-difference step.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Max over coordinates of `|analytic − numeric| / max(1, |analytic|)` for
/// a scalar function of one tensor.
pub fn grad_check<S, F>(f: F, x: &Tensor<S>, eps: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, Var) -> Result<Var>,
{
    let errs = grad_check_inputs(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)?;
    Ok(errs[0])
}

/// Per-input max relative error for a scalar function of several tensors.
/// Every input is recorded as a `requires_grad` leaf.
pub fn grad_check_inputs<S, F>(f: F, inputs: &[Tensor<S>], eps: S) -> Result<Vec<S>>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<S>]| -> Result<S> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;

    let two = S::lit(2.0);
    let mut errs = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .map(<[S]>::to_vec)
            .unwrap_or_else(|| vec![S::zero(); inputs[k].len()]);
        let mut worst = S::zero();
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + eps;
            let hi = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - eps;
            let lo = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (hi - lo) / (two * eps);
            let err = (analytic[i] - numeric).abs() / S::one().max(analytic[i].abs());
            worst = worst.max(err);
        }
        errs.push(worst);
    }
    Ok(errs)
}

/// Max relative gradient error of one operator on a random `hz×wz` /
/// `hx×wx×c` instance, over both features and every operator parameter.
/// The scalar probe is `Σ σ(response ⊙ r)` for a fixed random `r`.
pub fn check_operator(
    kind: OperatorKind,
    cfg: &OperatorConfig,
    dims: PairDims,
    seed: u64,
) -> crate::Result<f64> {
    let rand = |shape: &[usize], s: u64| {
        Tensor::<f64>::create(shape, Init::SeededUniform { seed: s, lo: -1.0, hi: 1.0 })
    };
    let pair = FeaturePair::new(
        rand(&[dims.hz, dims.wz, dims.c], seed)?,
        rand(&[dims.hx, dims.wx, dims.c], seed + 1)?,
        BBox::new(0.0, 0.0, dims.wz as f64, (dims.hz as f64 / 2.0).max(1.0)),
    )?;
    let op = MatchingOperator::new(kind, "op");
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    op.init_params(&mut store, &mut rng, dims, cfg)?;
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    let mut inputs = vec![pair.fz.clone(), pair.fx.clone()];
    for (i, n) in names.iter().enumerate() {
        let shape = store.get(n).map(|t| t.shape().to_vec()).unwrap_or_default();
        inputs.push(rand(&shape, seed + 100 + i as u64)?.map(|x| x * 0.5));
    }
    let probe = rand(&[dims.hx, dims.wx, dims.c], seed + 3)?;
    let errs = grad_check_inputs(
        |tape: &mut Tape<f64>, v| {
            let pv = PairVars {
                fz: v[0],
                fx: v[1],
                mask_z: tape.constant(pair.mask_z.clone()),
                box_z: pair.box_z,
                dims,
            };
            let bound = Bound::from_vars(names.iter().cloned().zip(v[2..].iter().copied()));
            let r = op.forward(tape, &pv, &bound, cfg).map_err(|e| match e {
                crate::Error::Tensor(t) => t,
                other => TensorError::Backward(other.to_string()),
            })?;
            let w = tape.constant(probe.clone());
            let y = tape.mul(r, w)?;
            let y = tape.sigmoid(y);
            Ok(tape.sum(y))
        },
        &inputs,
        DEFAULT_EPS,
    )?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}
