use matchsearch::bcm::{Branch, GateMode, ManipulatorBank};
use matchsearch::desk::{loss_total, make_labels, BranchModel, GateSettings, SiameseModel};
use matchsearch::gradcheck::{grad_check_inputs, DEFAULT_EPS};
use matchsearch::operators::{MatchingOperator, PairVars};
use matchsearch::params::Bound;
use matchsearch::tensor::Init;
use matchsearch::{BBox, FeaturePair, NoiseMode, OperatorConfig, OperatorKind, ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::create(shape, Init::SeededUniform { seed, lo: -1.0, hi: 1.0 }).unwrap()
}

fn small_pair(seed: u64) -> FeaturePair<f64> {
    FeaturePair::new(
        rand(&[2, 2, 4], seed),
        rand(&[4, 4, 4], seed + 1),
        BBox::new(0.0, 0.0, 1.0, 2.0),
    )
    .unwrap()
}

fn check_operator(kind: OperatorKind, cfg: OperatorConfig) -> f64 {
    let pair = small_pair(10 + kind.index() as u64);
    let op = MatchingOperator::new(kind, "op");
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(kind.index() as u64);
    op.init_params(&mut store, &mut rng, pair.dims(), &cfg).unwrap();
    // Random biases so every parameter path is exercised away from zero.
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    let mut inputs = vec![pair.fz.clone(), pair.fx.clone()];
    for (i, n) in names.iter().enumerate() {
        let t = store.get(n).unwrap();
        inputs.push(rand(t.shape(), 100 + i as u64).map(|x| x * 0.5));
    }
    let probe = rand(&[4, 4, 4], 999);
    let errs = grad_check_inputs(
        |tape: &mut Tape<f64>, v| {
            let pv = PairVars {
                fz: v[0],
                fx: v[1],
                mask_z: tape.constant(pair.mask_z.clone()),
                box_z: pair.box_z,
                dims: pair.dims(),
            };
            let bound = Bound::from_vars(names.iter().cloned().zip(v[2..].iter().copied()));
            let r = op.forward(tape, &pv, &bound, &cfg).map_err(to_tensor_err)?;
            let w = tape.constant(probe.clone());
            let y = tape.mul(r, w)?;
            let y = tape.sigmoid(y);
            Ok(tape.sum(y))
        },
        &inputs,
        DEFAULT_EPS,
    )
    .unwrap();
    errs.into_iter().fold(0.0, f64::max)
}

fn to_tensor_err(e: matchsearch::Error) -> matchsearch::TensorError {
    match e {
        matchsearch::Error::Tensor(t) => t,
        other => matchsearch::TensorError::Backward(other.to_string()),
    }
}

#[test]
fn every_operator_matches_finite_differences() {
    for kind in OperatorKind::ALL {
        let err = check_operator(kind, OperatorConfig::default());
        assert!(err <= TOL, "{kind}: {err:e}");
    }
}

#[test]
fn transformer_with_two_heads_and_raw_affinity() {
    let cfg = OperatorConfig {
        heads: 2,
        normalize_affinity: false,
        mean_pooling: false,
    };
    for kind in [
        OperatorKind::SimpleTransformer,
        OperatorKind::PairwiseRelation,
        OperatorKind::TransductiveGuidance,
        OperatorKind::DwXcorr,
    ] {
        let err = check_operator(kind, cfg);
        assert!(err <= TOL, "{kind}: {err:e}");
    }
}

/// Loss of the gated model as a function of every weight and manipulator.
fn composite_error(mode: GateMode, wiring_gated: bool) -> f64 {
    let pair = small_pair(77);
    let gt = BBox::new(1.0, 1.0, 3.0, 3.0);
    let labels = make_labels::<f64>(&gt, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (cls, reg) = if wiring_gated {
        (
            BranchModel::gated(Branch::Cls, &OperatorKind::ALL).unwrap(),
            BranchModel::gated(Branch::Reg, &OperatorKind::ALL).unwrap(),
        )
    } else {
        let pair_kinds = matchsearch::RetainedPair {
            first: OperatorKind::Film,
            second: OperatorKind::DwXcorr,
            degenerate: false,
        };
        (
            BranchModel::retained(Branch::Cls, pair_kinds).unwrap(),
            BranchModel::retained(Branch::Reg, pair_kinds).unwrap(),
        )
    };
    let gate = GateSettings {
        tau: 0.7,
        mode,
        noise: NoiseMode::Zero,
    };
    let mut model =
        SiameseModel::<f64>::new(cls, reg, pair.dims(), OperatorConfig::default(), gate, &mut rng).unwrap();
    for b in [Branch::Cls, Branch::Reg] {
        if let Some(w) = model.arch.get_mut(&ManipulatorBank::<f64>::param_name(b)) {
            *w = rand(w.shape(), 3 + b as u64);
        }
    }
    let mut names: Vec<String> = model.theta.names().map(str::to_owned).collect();
    names.extend(model.arch.names().map(str::to_owned));
    let inputs: Vec<Tensor<f64>> = names
        .iter()
        .map(|n| model.theta.get(n).or_else(|| model.arch.get(n)).unwrap().clone())
        .collect();
    let errs = grad_check_inputs(
        |tape: &mut Tape<f64>, v| {
            let bound = Bound::from_vars(names.iter().cloned().zip(v.iter().copied()));
            let out = model.forward(tape, &pair, &bound, &bound, None).map_err(to_tensor_err)?;
            loss_total(tape, &out, &labels, 1.0).map_err(to_tensor_err)
        },
        &inputs,
        DEFAULT_EPS,
    )
    .unwrap();
    errs.into_iter().fold(0.0, f64::max)
}

#[test]
fn stage1_composite_matches_finite_differences() {
    let err = composite_error(GateMode::Soft, true);
    assert!(err <= TOL, "{err:e}");
}

#[test]
fn stage2_composite_matches_finite_differences() {
    let err = composite_error(GateMode::Soft, false);
    assert!(err <= TOL, "{err:e}");
}

#[test]
fn head_shapes_do_not_depend_on_operator_count() {
    let pair = small_pair(1);
    let mut shapes = Vec::new();
    for kinds in [&OperatorKind::ALL[..], &OperatorKind::ALL[..2]] {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = SiameseModel::<f64>::new(
            BranchModel::gated(Branch::Cls, kinds).unwrap(),
            BranchModel::gated(Branch::Reg, kinds).unwrap(),
            pair.dims(),
            OperatorConfig::default(),
            GateSettings::default(),
            &mut rng,
        )
        .unwrap();
        let (c, r) = model.predict(&pair).unwrap();
        shapes.push((c.shape().to_vec(), r.shape().to_vec()));
    }
    assert_eq!(shapes[0], shapes[1]);
    assert_eq!(shapes[0], (vec![4, 4, 1], vec![4, 4, 4]));
}
