//! The seven matching operators `φ(F_z, F_x) → R`.
//!
//! Every operator maps an exemplar map `F_z: H_z×W_z×C` and a search map
//! `F_x: H_x×W_x×C` to a response of shape `H_x×W_x×C`, so responses from
//! different operators can be gated channel by channel.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::params::{conv1x1_init, Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// Operator identity. Declaration order is the canonical index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    DwXcorr,
    Concat,
    PointwiseAdd,
    PairwiseRelation,
    Film,
    SimpleTransformer,
    TransductiveGuidance,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 7] = [
        OperatorKind::DwXcorr,
        OperatorKind::Concat,
        OperatorKind::PointwiseAdd,
        OperatorKind::PairwiseRelation,
        OperatorKind::Film,
        OperatorKind::SimpleTransformer,
        OperatorKind::TransductiveGuidance,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::DwXcorr => "dw_xcorr",
            OperatorKind::Concat => "concat",
            OperatorKind::PointwiseAdd => "pointwise_add",
            OperatorKind::PairwiseRelation => "pairwise_relation",
            OperatorKind::Film => "film",
            OperatorKind::SimpleTransformer => "simple_transformer",
            OperatorKind::TransductiveGuidance => "transductive_guidance",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            OperatorKind::DwXcorr => "Depthwise Cross-correlation",
            OperatorKind::Concat => "Concatenation",
            OperatorKind::PointwiseAdd => "Pointwise-Addition",
            OperatorKind::PairwiseRelation => "Pairwise-Relation",
            OperatorKind::Film => "FiLM",
            OperatorKind::SimpleTransformer => "Simple-Transformer",
            OperatorKind::TransductiveGuidance => "Transductive-Guidance",
        }
    }

    pub fn has_params(self) -> bool {
        !matches!(
            self,
            OperatorKind::DwXcorr | OperatorKind::PointwiseAdd | OperatorKind::TransductiveGuidance
        )
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OperatorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown operator kind {s:?}")))
    }
}

/// Exemplar/candidate features with the exemplar box and its pseudo mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePair<S> {
    pub fz: Tensor<S>,
    pub fx: Tensor<S>,
    pub box_z: BBox,
    /// `H_z×W_z×1`, 1 on cells whose centers lie inside `box_z`.
    pub mask_z: Tensor<S>,
}

impl<S: Scalar> FeaturePair<S> {
    pub fn new(fz: Tensor<S>, fx: Tensor<S>, box_z: BBox) -> Result<Self> {
        if fz.rank() != 3 || fx.rank() != 3 || fz.last_dim() != fx.last_dim() {
            return Err(TensorError::ShapeMismatch {
                op: "feature pair",
                lhs: fz.shape().to_vec(),
                rhs: fx.shape().to_vec(),
            }
            .into());
        }
        let (hz, wz) = (fz.shape()[0], fz.shape()[1]);
        let mut mask = vec![S::zero(); hz * wz];
        for cell in box_z.cells_inside(hz, wz) {
            mask[cell] = S::one();
        }
        let mask_z = Tensor::from_vec(&[hz, wz, 1], mask)?;
        Ok(Self {
            fz,
            fx,
            box_z,
            mask_z,
        })
    }

    pub fn dims(&self) -> PairDims {
        PairDims {
            hz: self.fz.shape()[0],
            wz: self.fz.shape()[1],
            hx: self.fx.shape()[0],
            wx: self.fx.shape()[1],
            c: self.fx.last_dim(),
        }
    }

    /// Records the pair as constants (or as differentiable leaves).
    pub fn record(&self, tape: &mut Tape<S>, requires_grad: bool) -> PairVars {
        PairVars {
            fz: tape.leaf(self.fz.clone(), requires_grad),
            fx: tape.leaf(self.fx.clone(), requires_grad),
            mask_z: tape.constant(self.mask_z.clone()),
            box_z: self.box_z,
            dims: self.dims(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairDims {
    pub hz: usize,
    pub wz: usize,
    pub hx: usize,
    pub wx: usize,
    pub c: usize,
}

/// A [`FeaturePair`] recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct PairVars {
    pub fz: Var,
    pub fx: Var,
    pub mask_z: Var,
    pub box_z: BBox,
    pub dims: PairDims,
}

/// Settings shared by all operators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorConfig {
    /// Attention heads for the simple transformer.
    pub heads: usize,
    /// Divide affinities by `√C`. Off gives the raw matmul.
    pub normalize_affinity: bool,
    /// Average instead of sum over exemplar cells in DwXcorr, and over mask
    /// cells in the transductive guidance map.
    pub mean_pooling: bool,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self {
            heads: 1,
            normalize_affinity: true,
            mean_pooling: true,
        }
    }
}

fn param_name(prefix: &str, kind: OperatorKind, leaf: &str) -> String {
    format!("{prefix}.{}.{leaf}", kind.name())
}

/// One operator instance owning parameters under `prefix`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchingOperator {
    pub kind: OperatorKind,
    pub prefix: String,
}

impl MatchingOperator {
    pub fn new(kind: OperatorKind, prefix: impl Into<String>) -> Self {
        Self {
            kind,
            prefix: prefix.into(),
        }
    }

    fn name(&self, leaf: &str) -> String {
        param_name(&self.prefix, self.kind, leaf)
    }

    /// Names of the parameters this operator registers, in order.
    pub fn param_names(&self) -> Vec<String> {
        let leaves: &[&str] = match self.kind {
            OperatorKind::Concat => &["conv.weight", "conv.bias"],
            OperatorKind::PairwiseRelation => &["proj.weight", "proj.bias"],
            OperatorKind::Film => &["gamma.weight", "gamma.bias", "beta.weight", "beta.bias"],
            OperatorKind::SimpleTransformer => &[
                "query.weight",
                "query.bias",
                "key.weight",
                "key.bias",
                "value.weight",
                "value.bias",
            ],
            _ => &[],
        };
        leaves.iter().map(|l| self.name(l)).collect()
    }

    /// Adds freshly initialised parameters to `store`.
    pub fn init_params<S: Scalar, R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore<S>,
        rng: &mut R,
        dims: PairDims,
        cfg: &OperatorConfig,
    ) -> Result<()> {
        let c = dims.c;
        let convs: Vec<(&str, usize, usize)> = match self.kind {
            OperatorKind::Concat => vec![("conv", 2 * c, c)],
            OperatorKind::PairwiseRelation => vec![("proj", dims.hz * dims.wz, c)],
            OperatorKind::Film => vec![("gamma", c, c), ("beta", c, c)],
            OperatorKind::SimpleTransformer => {
                if cfg.heads == 0 || c % cfg.heads != 0 {
                    return Err(Error::Config(format!(
                        "{} channels not divisible by {} heads",
                        c, cfg.heads
                    )));
                }
                vec![("query", c, c), ("key", c, c), ("value", c, c)]
            }
            _ => vec![],
        };
        for (stem, fan_in, fan_out) in convs {
            let (w, b) = conv1x1_init(rng, fan_in, fan_out)?;
            store.insert(self.name(&format!("{stem}.weight")), w);
            store.insert(self.name(&format!("{stem}.bias")), b);
        }
        Ok(())
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        pair: &PairVars,
        params: &Bound,
        cfg: &OperatorConfig,
    ) -> Result<Var> {
        let p = |leaf: &str| params.get(&self.name(leaf));
        match self.kind {
            OperatorKind::DwXcorr => dw_xcorr(tape, pair, cfg.mean_pooling),
            OperatorKind::Concat => concat(tape, pair, p("conv.weight")?, p("conv.bias")?),
            OperatorKind::PointwiseAdd => pointwise_add(tape, pair),
            OperatorKind::PairwiseRelation => pairwise_relation(
                tape,
                pair,
                p("proj.weight")?,
                p("proj.bias")?,
                cfg.normalize_affinity,
            ),
            OperatorKind::Film => film(
                tape,
                pair,
                (p("gamma.weight")?, p("gamma.bias")?),
                (p("beta.weight")?, p("beta.bias")?),
            ),
            OperatorKind::SimpleTransformer => simple_transformer(
                tape,
                pair,
                [
                    (p("query.weight")?, p("query.bias")?),
                    (p("key.weight")?, p("key.bias")?),
                    (p("value.weight")?, p("value.bias")?),
                ],
                cfg.heads,
            ),
            OperatorKind::TransductiveGuidance => {
                transductive_guidance(tape, pair, cfg.normalize_affinity, cfg.mean_pooling)
            }
        }
    }
}

/// Depth-wise cross-correlation of `F_x` with `F_z` as the kernel,
/// divided by the exemplar area when `mean` is set.
pub fn dw_xcorr<S: Scalar>(tape: &mut Tape<S>, pair: &PairVars, mean: bool) -> Result<Var> {
    let r = tape.xcorr_depthwise(pair.fx, pair.fz)?;
    let area = pair.dims.hz * pair.dims.wz;
    if mean && area > 1 {
        return Ok(tape.scale(r, S::one() / S::from_usize_lossy(area)));
    }
    Ok(r)
}

/// `f_z`: the exemplar map pooled inside `box_z`, shape `1×1×C`.
pub fn pooled_exemplar<S: Scalar>(tape: &mut Tape<S>, pair: &PairVars) -> Result<Var> {
    Ok(tape.roi_mean_pool(pair.fz, &pair.box_z)?)
}

/// `Conv([f_z, F_x])` with `f_z` tiled over the search grid.
pub fn concat<S: Scalar>(tape: &mut Tape<S>, pair: &PairVars, weight: Var, bias: Var) -> Result<Var> {
    let fz = pooled_exemplar(tape, pair)?;
    let tiled = tape.tile_spatial(fz, pair.dims.hx, pair.dims.wx)?;
    let joined = tape.concat(&[tiled, pair.fx])?;
    Ok(tape.conv1x1(joined, weight, bias)?)
}

/// `f_z + F_x`.
pub fn pointwise_add<S: Scalar>(tape: &mut Tape<S>, pair: &PairVars) -> Result<Var> {
    let fz = pooled_exemplar(tape, pair)?;
    Ok(tape.add(pair.fx, fz)?)
}

/// `matmul(S(F_x), S(F_z))`: `H_xW_x × H_zW_z` cell affinities, optionally
/// divided by `√C`.
pub fn affinity<S: Scalar>(tape: &mut Tape<S>, pair: &PairVars, normalize: bool) -> Result<Var> {
    let d = pair.dims;
    let sx = tape.reshape(pair.fx, &[d.hx * d.wx, d.c])?;
    let sz = tape.reshape(pair.fz, &[d.hz * d.wz, d.c])?;
    let szt = tape.transpose(sz)?;
    let raw = tape.matmul(sx, szt)?;
    Ok(if normalize {
        tape.scale(raw, S::one() / S::from_usize_lossy(d.c).sqrt())
    } else {
        raw
    })
}

/// Affinity reshaped to `H_x×W_x×(H_zW_z)` and projected back to `C`
/// channels by a 1×1 convolution.
pub fn pairwise_relation<S: Scalar>(
    tape: &mut Tape<S>,
    pair: &PairVars,
    weight: Var,
    bias: Var,
    normalize: bool,
) -> Result<Var> {
    let d = pair.dims;
    let a = affinity(tape, pair, normalize)?;
    let maps = tape.reshape(a, &[d.hx, d.wx, d.hz * d.wz])?;
    Ok(tape.conv1x1(maps, weight, bias)?)
}

/// `γ·F_x + β` with `γ`, `β` predicted from `f_z` by separate 1×1 convs.
pub fn film<S: Scalar>(
    tape: &mut Tape<S>,
    pair: &PairVars,
    gamma: (Var, Var),
    beta: (Var, Var),
) -> Result<Var> {
    let fz = pooled_exemplar(tape, pair)?;
    let g = tape.conv1x1(fz, gamma.0, gamma.1)?;
    let b = tape.conv1x1(fz, beta.0, beta.1)?;
    let scaled = tape.mul(pair.fx, g)?;
    Ok(tape.add(scaled, b)?)
}

/// Scaled dot-product attention with queries from `F_x` and keys/values
/// from `F_z`; heads split the channel axis. No positional encoding.
pub fn simple_transformer<S: Scalar>(
    tape: &mut Tape<S>,
    pair: &PairVars,
    [query, key, value]: [(Var, Var); 3],
    heads: usize,
) -> Result<Var> {
    let d = pair.dims;
    if heads == 0 || d.c % heads != 0 {
        return Err(Error::Config(format!(
            "{} channels not divisible by {heads} heads",
            d.c
        )));
    }
    let q = tape.conv1x1(pair.fx, query.0, query.1)?;
    let k = tape.conv1x1(pair.fz, key.0, key.1)?;
    let v = tape.conv1x1(pair.fz, value.0, value.1)?;
    let q = tape.reshape(q, &[d.hx * d.wx, d.c])?;
    let k = tape.reshape(k, &[d.hz * d.wz, d.c])?;
    let v = tape.reshape(v, &[d.hz * d.wz, d.c])?;
    let head_dim = d.c / heads;
    let scale = S::one() / S::from_usize_lossy(head_dim).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            let start = h * head_dim;
            (
                tape.slice_last(q, start, head_dim)?,
                tape.slice_last(k, start, head_dim)?,
                tape.slice_last(v, start, head_dim)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(attn, vh)?);
    }
    let merged = if heads == 1 { outs[0] } else { tape.concat(&outs)? };
    Ok(tape.reshape(merged, &[d.hx, d.wx, d.c])?)
}

/// Propagates the exemplar pseudo mask through the affinity and adds the
/// resulting single-channel guidance map to every channel of `F_x`.
pub fn transductive_guidance<S: Scalar>(
    tape: &mut Tape<S>,
    pair: &PairVars,
    normalize: bool,
    mean: bool,
) -> Result<Var> {
    let g = guidance_map(tape, pair, normalize, mean)?;
    let g = tape.tile_channels(g, pair.dims.c)?;
    Ok(tape.add(g, pair.fx)?)
}

/// `G = A·m` over the exemplar mask, `H_x×W_x×1`; divided by the mask area
/// when `mean` is set and the area exceeds one cell.
pub fn guidance_map<S: Scalar>(tape: &mut Tape<S>, pair: &PairVars, normalize: bool, mean: bool) -> Result<Var> {
    let d = pair.dims;
    let a = affinity(tape, pair, normalize)?;
    let mask = tape.reshape(pair.mask_z, &[d.hz * d.wz, 1])?;
    let mut g = tape.matmul(a, mask)?;
    let area = tape.value(pair.mask_z).sum();
    if mean && area > S::one() {
        g = tape.scale(g, S::one() / area);
    }
    Ok(tape.reshape(g, &[d.hx, d.wx, 1])?)
}

/// Responses of a set of operators, in canonical order.
#[derive(Debug, Clone)]
pub struct ResponseSet {
    pub responses: Vec<Var>,
    pub kinds: Vec<OperatorKind>,
}

impl ResponseSet {
    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn response(&self, kind: OperatorKind) -> Option<Var> {
        self.kinds
            .iter()
            .position(|&k| k == kind)
            .map(|i| self.responses[i])
    }
}

/// An ordered, duplicate-free collection of operators sharing a prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperatorSet {
    operators: Vec<MatchingOperator>,
}

impl OperatorSet {
    /// Sorts `kinds` into canonical order. Empty or repeated kinds are a
    /// configuration error.
    pub fn new(kinds: &[OperatorKind], prefix: &str) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::Config("operator set must not be empty".into()));
        }
        let mut sorted = kinds.to_vec();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != kinds.len() {
            return Err(Error::Config(format!("repeated operator in {kinds:?}")));
        }
        Ok(Self {
            operators: sorted
                .into_iter()
                .map(|k| MatchingOperator::new(k, prefix))
                .collect(),
        })
    }

    pub fn all(prefix: &str) -> Self {
        Self::new(&OperatorKind::ALL, prefix).expect("canonical set is valid")
    }

    pub fn kinds(&self) -> Vec<OperatorKind> {
        self.operators.iter().map(|o| o.kind).collect()
    }

    pub fn len(&self) -> usize {
        self.operators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.operators.is_empty()
    }

    pub fn operators(&self) -> &[MatchingOperator] {
        &self.operators
    }

    pub fn init_params<S: Scalar, R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore<S>,
        rng: &mut R,
        dims: PairDims,
        cfg: &OperatorConfig,
    ) -> Result<()> {
        for op in &self.operators {
            op.init_params(store, rng, dims, cfg)?;
        }
        Ok(())
    }
}

/// Evaluates every operator of `set` on `pair`.
pub fn build_response_set<S: Scalar>(
    tape: &mut Tape<S>,
    pair: &PairVars,
    set: &OperatorSet,
    params: &Bound,
    cfg: &OperatorConfig,
) -> Result<ResponseSet> {
    let mut responses = Vec::with_capacity(set.len());
    for op in set.operators() {
        let r = op.forward(tape, pair, params, cfg)?;
        debug_assert_eq!(tape.shape(r), [pair.dims.hx, pair.dims.wx, pair.dims.c]);
        responses.push(r);
    }
    Ok(ResponseSet {
        responses,
        kinds: set.kinds(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(hz: usize, hx: usize, c: usize, seed: u64) -> FeaturePair<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fz = Tensor::uniform(&[hz, hz, c], &mut rng, -2.0, 2.0).unwrap();
        let fx = Tensor::uniform(&[hx, hx, c], &mut rng, -2.0, 2.0).unwrap();
        FeaturePair::new(fz, fx, BBox::new(0.0, 0.0, hz as f64, hz as f64)).unwrap()
    }

    #[test]
    fn kinds_parse_and_order() {
        for (i, k) in OperatorKind::ALL.into_iter().enumerate() {
            assert_eq!(k.index(), i);
            assert_eq!(k.name().parse::<OperatorKind>().unwrap(), k);
        }
        assert!(matches!("xcorr".parse::<OperatorKind>(), Err(Error::Config(_))));
        let set = OperatorSet::new(&[OperatorKind::Film, OperatorKind::DwXcorr], "p").unwrap();
        assert_eq!(set.kinds(), vec![OperatorKind::DwXcorr, OperatorKind::Film]);
        assert!(OperatorSet::new(&[], "p").is_err());
        assert!(OperatorSet::new(&[OperatorKind::Film, OperatorKind::Film], "p").is_err());
    }

    #[test]
    fn mask_marks_box_cells() {
        let p = FeaturePair::new(
            Tensor::<f64>::zeros(&[3, 3, 2]).unwrap(),
            Tensor::zeros(&[4, 4, 2]).unwrap(),
            BBox::from_cells(1..2, 0..2),
        )
        .unwrap();
        assert_eq!(
            p.mask_z.data(),
            &[0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]
        );
        let bad = FeaturePair::new(
            Tensor::<f64>::zeros(&[3, 3, 2]).unwrap(),
            Tensor::zeros(&[4, 4, 3]).unwrap(),
            BBox::from_cells(0..1, 0..1),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn response_shapes_are_uniform() {
        for hz in [1, 3] {
            let p = pair(hz, 5, 4, 3);
            let set = OperatorSet::all("t");
            let mut store = ParamStore::new();
            let cfg = OperatorConfig { heads: 2, ..Default::default() };
            set.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(1), p.dims(), &cfg)
                .unwrap();
            let mut tape = Tape::new();
            let vars = p.record(&mut tape, false);
            let bound = store.bind(&mut tape);
            let rs = build_response_set(&mut tape, &vars, &set, &bound, &cfg).unwrap();
            assert_eq!(rs.len(), 7);
            for r in &rs.responses {
                assert_eq!(tape.shape(*r), &[5, 5, 4]);
                assert!(tape.value(*r).is_finite());
            }
        }
    }

    #[test]
    fn transformer_rejects_bad_head_count() {
        let p = pair(2, 3, 4, 1);
        let op = MatchingOperator::new(OperatorKind::SimpleTransformer, "t");
        let mut store = ParamStore::<f64>::new();
        let cfg = OperatorConfig { heads: 3, ..Default::default() };
        let err = op.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(0), p.dims(), &cfg);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn xcorr_kernel_larger_than_search_fails() {
        let p = pair(4, 3, 2, 0);
        let mut tape = Tape::new();
        let v = p.record(&mut tape, false);
        assert!(dw_xcorr(&mut tape, &v, true).is_err());
    }
}
