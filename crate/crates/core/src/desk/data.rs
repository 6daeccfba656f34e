//! Synthetic exemplar/candidate feature pairs.
//!
//! Each sequence owns a target appearance: a shared signature vector plus a
//! position-dependent pattern over the target's cells. The exemplar map
//! holds the target centred; every candidate map holds it at a random
//! location over structured background noise. Challenge attributes perturb
//! the candidate.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::operators::FeaturePair;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    ScaleVariation,
    Occlusion,
    Blur,
    Distractor,
    BackgroundClutter,
    LowContrast,
}

impl Attribute {
    pub const ALL: [Attribute; 6] = [
        Attribute::ScaleVariation,
        Attribute::Occlusion,
        Attribute::Blur,
        Attribute::Distractor,
        Attribute::BackgroundClutter,
        Attribute::LowContrast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::ScaleVariation => "scale_variation",
            Attribute::Occlusion => "occlusion",
            Attribute::Blur => "blur",
            Attribute::Distractor => "distractor",
            Attribute::BackgroundClutter => "background_clutter",
            Attribute::LowContrast => "low_contrast",
        }
    }

    /// Short column label for report tables.
    pub fn abbrev(self) -> &'static str {
        match self {
            Attribute::ScaleVariation => "SV",
            Attribute::Occlusion => "OCC",
            Attribute::Blur => "BLUR",
            Attribute::Distractor => "DIS",
            Attribute::BackgroundClutter => "BC",
            Attribute::LowContrast => "LC",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attribute {s:?}")))
    }
}

/// Per-sequence probability of each attribute.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeRates {
    pub scale_variation: f64,
    pub occlusion: f64,
    pub blur: f64,
    pub distractor: f64,
    pub background_clutter: f64,
    pub low_contrast: f64,
}

impl AttributeRates {
    pub fn uniform(rate: f64) -> Self {
        Self {
            scale_variation: rate,
            occlusion: rate,
            blur: rate,
            distractor: rate,
            background_clutter: rate,
            low_contrast: rate,
        }
    }

    pub fn rate(&self, a: Attribute) -> f64 {
        match a {
            Attribute::ScaleVariation => self.scale_variation,
            Attribute::Occlusion => self.occlusion,
            Attribute::Blur => self.blur,
            Attribute::Distractor => self.distractor,
            Attribute::BackgroundClutter => self.background_clutter,
            Attribute::LowContrast => self.low_contrast,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for a in Attribute::ALL {
            let r = self.rate(a);
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("rate for {a} must lie in [0, 1], got {r}")));
            }
        }
        Ok(())
    }
}

/// Feature grid dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub hz: usize,
    pub wz: usize,
    pub hx: usize,
    pub wx: usize,
    pub c: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            hz: 8,
            wz: 8,
            hx: 16,
            wx: 16,
            c: 16,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if [self.hz, self.wz, self.hx, self.wx].contains(&0) {
            return Err(Error::Config(format!("grid dims must be >= 1: {self:?}")));
        }
        if self.c < 2 {
            return Err(Error::Config(format!("need at least 2 channels, got {}", self.c)));
        }
        if self.hz > self.hx || self.wz > self.wx {
            return Err(Error::Config(format!(
                "exemplar grid {}x{} larger than search grid {}x{}",
                self.hz, self.wz, self.hx, self.wx
            )));
        }
        Ok(())
    }
}

/// Dataset generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub seed: u64,
    pub n_sequences: usize,
    pub pairs_per_sequence: usize,
    pub grid: GridSpec,
    pub rates: AttributeRates,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_sequences: 200,
            pairs_per_sequence: 8,
            grid: GridSpec::default(),
            rates: AttributeRates::uniform(0.15),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair<S> {
    pub pair: FeaturePair<S>,
    /// Target box on the candidate grid.
    pub gt_box: BBox,
    /// Sorted, duplicate-free.
    pub attributes: Vec<Attribute>,
    pub sequence_id: usize,
}

impl<S> SyntheticPair<S> {
    pub fn is_clean(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn has(&self, a: Attribute) -> bool {
        self.attributes.contains(&a)
    }
}

// Appearance constants, in units of the background noise scale.
const SIGNATURE_STD: f64 = 1.0;
const PATTERN_STD: f64 = 0.6;
const POSITION_GAIN: f64 = 0.9;
const TARGET_JITTER: f64 = 0.25;
const WHITE_NOISE: f64 = 0.45;
const SMOOTH_NOISE: f64 = 0.6;
const CLUTTER_GAIN: f64 = 2.0;
const LOW_CONTRAST_GAIN: f64 = 0.4;
const DISTRACTOR_JITTER: f64 = 0.3;
const MAX_SCALE_RETRIES: usize = 8;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `h×w×c` row-major map of f64 values.
struct Map {
    h: usize,
    w: usize,
    c: usize,
    v: Vec<f64>,
}

impl Map {
    fn new(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            v: vec![0.0; h * w * c],
        }
    }

    fn cell_mut(&mut self, r: usize, col: usize) -> &mut [f64] {
        let o = (r * self.w + col) * self.c;
        &mut self.v[o..o + self.c]
    }

    /// 3×3 mean over in-grid neighbours.
    fn blurred(&self) -> Map {
        let mut out = Map::new(self.h, self.w, self.c);
        for r in 0..self.h {
            for col in 0..self.w {
                let mut n = 0.0;
                let mut acc = vec![0.0; self.c];
                for rr in r.saturating_sub(1)..(r + 2).min(self.h) {
                    for cc in col.saturating_sub(1)..(col + 2).min(self.w) {
                        let o = (rr * self.w + cc) * self.c;
                        for (a, &x) in acc.iter_mut().zip(&self.v[o..o + self.c]) {
                            *a += x;
                        }
                        n += 1.0;
                    }
                }
                for (d, a) in out.cell_mut(r, col).iter_mut().zip(acc) {
                    *d = a / n;
                }
            }
        }
        out
    }

    fn into_tensor<S: Scalar>(self) -> Result<Tensor<S>> {
        Ok(Tensor::from_vec(
            &[self.h, self.w, self.c],
            self.v.into_iter().map(S::lit).collect(),
        )?)
    }
}

/// Background: white noise plus a spatially smoothed noise field.
fn background(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, gain: f64) -> Map {
    let mut field = Map::new(h, w, c);
    field.v.iter_mut().for_each(|x| *x = normal(rng));
    let smooth = field.blurred();
    let mut out = Map::new(h, w, c);
    for (i, x) in out.v.iter_mut().enumerate() {
        *x = gain * (WHITE_NOISE * normal(rng) + SMOOTH_NOISE * 3.0 * smooth.v[i]);
    }
    out
}

/// Cell features inside a target carry its distances to the four box
/// sides along fixed directions shared by every sequence, the way backbone
/// features encode object extent.
fn edge_code(seed: u64, c: usize) -> [Vec<f64>; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    std::array::from_fn(|_| (0..c).map(|_| normal(&mut rng)).collect())
}

/// Target appearance of one sequence.
struct Appearance {
    tw: usize,
    th: usize,
    signature: Vec<f64>,
    /// `th×tw` grid of per-cell offsets, row-major.
    pattern: Vec<Vec<f64>>,
    edges: [Vec<f64>; 4],
}

impl Appearance {
    fn sample(rng: &mut ChaCha8Rng, grid: &GridSpec, edges: [Vec<f64>; 4]) -> Self {
        let side = grid.hz.min(grid.wz).min(grid.hx).min(grid.wx);
        let lo = (side * 3 / 8).max(1);
        let hi = (side * 5 / 8).max(lo);
        let tw = rng.gen_range(lo..=hi);
        let th = rng.gen_range(lo..=hi);
        let c = grid.c;
        let signature: Vec<f64> = (0..c).map(|_| SIGNATURE_STD * normal(rng)).collect();
        let pattern = (0..tw * th)
            .map(|_| (0..c).map(|_| PATTERN_STD * normal(rng)).collect())
            .collect();
        Self {
            tw,
            th,
            signature,
            pattern,
            edges,
        }
    }

    /// Paints the target into `bbox` (whole cells), resampling the pattern
    /// by nearest neighbour when the box size differs from the native size.
    fn paint(&self, map: &mut Map, bbox: &BBox, gain: f64, jitter: f64, rng: &mut ChaCha8Rng) {
        let (x0, y0) = (bbox.x0 as usize, bbox.y0 as usize);
        let (w, h) = (bbox.width() as usize, bbox.height() as usize);
        for r in 0..h {
            let v = ((r as f64 + 0.5) * self.th as f64 / h as f64) as usize;
            for col in 0..w {
                let u = ((col as f64 + 0.5) * self.tw as f64 / w as f64) as usize;
                let p = &self.pattern[v.min(self.th - 1) * self.tw + u.min(self.tw - 1)];
                let (fc, fr) = (col as f64 + 0.5, r as f64 + 0.5);
                let sides = [fc, fr, w as f64 - fc, h as f64 - fr];
                let cell = map.cell_mut(y0 + r, x0 + col);
                for (k, d) in cell.iter_mut().enumerate() {
                    let code: f64 = sides.iter().zip(&self.edges).map(|(s, e)| s * e[k]).sum();
                    *d = gain * (self.signature[k] + p[k] + POSITION_GAIN * code) + jitter * normal(rng);
                }
            }
        }
    }
}

fn sequence_rng(seed: u64, sequence_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sequence_id as u64 + 1);
    rng
}

fn random_box(rng: &mut ChaCha8Rng, w: usize, h: usize, grid_w: usize, grid_h: usize) -> BBox {
    let x0 = rng.gen_range(0..=grid_w - w);
    let y0 = rng.gen_range(0..=grid_h - h);
    BBox::from_cells(y0..y0 + h, x0..x0 + w)
}

/// Scaled target size for a scale-variation pair. Draws that do not fit
/// the grid are redrawn a bounded number of times, then the native size is
/// used.
fn scaled_size(rng: &mut ChaCha8Rng, app: &Appearance, grid: &GridSpec) -> (usize, usize) {
    for _ in 0..MAX_SCALE_RETRIES {
        let f: f64 = rng.gen_range(0.55..1.8);
        let w = (app.tw as f64 * f).round() as usize;
        let h = (app.th as f64 * f).round() as usize;
        if (1..=grid.wx).contains(&w) && (1..=grid.hx).contains(&h) && (w, h) != (app.tw, app.th) {
            return (w, h);
        }
    }
    (app.tw, app.th)
}

/// Generates `n_sequences × pairs_per_sequence` pairs. Each sequence is a
/// pure function of `(seed, sequence_id)`.
pub fn gen_synthetic<S: Scalar>(cfg: &DataConfig) -> Result<Vec<SyntheticPair<S>>> {
    cfg.grid.validate()?;
    cfg.rates.validate()?;
    let mut out = Vec::with_capacity(cfg.n_sequences * cfg.pairs_per_sequence);
    for seq in 0..cfg.n_sequences {
        out.extend(gen_sequence(cfg, seq)?);
    }
    Ok(out)
}

/// Pairs of one sequence.
pub fn gen_sequence<S: Scalar>(cfg: &DataConfig, sequence_id: usize) -> Result<Vec<SyntheticPair<S>>> {
    let g = cfg.grid;
    let mut rng = sequence_rng(cfg.seed, sequence_id);
    let attributes: Vec<Attribute> = Attribute::ALL
        .into_iter()
        .filter(|&a| {
            let r = cfg.rates.rate(a);
            rng.gen_bool(r.clamp(0.0, 1.0))
        })
        .collect();
    let has = |a| attributes.contains(&a);
    let app = Appearance::sample(&mut rng, &g, edge_code(cfg.seed, g.c));

    let zx0 = (g.wz - app.tw) / 2;
    let zy0 = (g.hz - app.th) / 2;
    let box_z = BBox::from_cells(zy0..zy0 + app.th, zx0..zx0 + app.tw);
    let mut fz = background(&mut rng, g.hz, g.wz, g.c, 1.0);
    app.paint(&mut fz, &box_z, 1.0, TARGET_JITTER, &mut rng);
    let fz: Tensor<S> = fz.into_tensor()?;

    let mut pairs = Vec::with_capacity(cfg.pairs_per_sequence);
    for _ in 0..cfg.pairs_per_sequence {
        let (w, h) = if has(Attribute::ScaleVariation) {
            scaled_size(&mut rng, &app, &g)
        } else {
            (app.tw, app.th)
        };
        let gt_box = random_box(&mut rng, w, h, g.wx, g.hx);
        let clutter = if has(Attribute::BackgroundClutter) { CLUTTER_GAIN } else { 1.0 };
        let mut fx = background(&mut rng, g.hx, g.wx, g.c, clutter);
        if has(Attribute::Distractor) {
            let mut decoy = random_box(&mut rng, app.tw, app.th, g.wx, g.hx);
            for _ in 0..16 {
                if decoy.iou(&gt_box) == 0.0 {
                    break;
                }
                decoy = random_box(&mut rng, app.tw, app.th, g.wx, g.hx);
            }
            app.paint(&mut fx, &decoy, 1.0, DISTRACTOR_JITTER, &mut rng);
        }
        let gain = if has(Attribute::LowContrast) { LOW_CONTRAST_GAIN } else { 1.0 };
        app.paint(&mut fx, &gt_box, gain, TARGET_JITTER, &mut rng);
        if has(Attribute::Occlusion) {
            occlude(&mut fx, &gt_box, &mut rng);
        }
        if has(Attribute::Blur) {
            fx = fx.blurred();
        }
        pairs.push(SyntheticPair {
            pair: FeaturePair::new(fz.clone(), fx.into_tensor()?, box_z)?,
            gt_box,
            attributes: attributes.clone(),
            sequence_id,
        });
    }
    Ok(pairs)
}

/// Zeroes a half of the target region on a random side.
fn occlude(map: &mut Map, bbox: &BBox, rng: &mut ChaCha8Rng) {
    let (x0, y0) = (bbox.x0 as usize, bbox.y0 as usize);
    let (w, h) = (bbox.width() as usize, bbox.height() as usize);
    let (rows, cols) = match rng.gen_range(0..4) {
        0 => (y0..y0 + h, x0..x0 + w.div_ceil(2)),
        1 => (y0..y0 + h, x0 + w / 2..x0 + w),
        2 => (y0..y0 + h.div_ceil(2), x0..x0 + w),
        _ => (y0 + h / 2..y0 + h, x0..x0 + w),
    };
    for r in rows {
        for c in cols.clone() {
            map.cell_mut(r, c).iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Splits by sequence identity: the first `ratio` of sequence ids train,
/// the rest validate.
pub fn split_by_sequence<T: Clone>(
    items: &[T],
    sequence_of: impl Fn(&T) -> usize,
    n_sequences: usize,
    ratio: f64,
) -> Result<(Vec<T>, Vec<T>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let n_train = ((n_sequences as f64) * ratio).round() as usize;
    let n_train = n_train.clamp(1, n_sequences.saturating_sub(1).max(1));
    let (train, val): (Vec<T>, Vec<T>) = items
        .iter()
        .cloned()
        .partition(|x| sequence_of(x) < n_train);
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(rates: AttributeRates) -> DataConfig {
        DataConfig {
            seed: 3,
            n_sequences: 6,
            pairs_per_sequence: 3,
            grid: GridSpec::default(),
            rates,
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = small(AttributeRates::uniform(0.5));
        let a = gen_synthetic::<f64>(&cfg).unwrap();
        let b = gen_synthetic::<f64>(&cfg).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic::<f64>(&DataConfig { seed: 4, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn boxes_inside_grid_and_attributes_shared_per_sequence() {
        let cfg = small(AttributeRates::uniform(0.5));
        let data = gen_synthetic::<f64>(&cfg).unwrap();
        assert_eq!(data.len(), 18);
        for p in &data {
            assert!(p.gt_box.within_grid(16, 16));
            assert!(!p.gt_box.is_degenerate());
            assert!(p.pair.fx.is_finite() && p.pair.fz.is_finite());
            let first = data.iter().find(|q| q.sequence_id == p.sequence_id).unwrap();
            assert_eq!(first.attributes, p.attributes);
        }
    }

    #[test]
    fn full_occlusion_rate_tags_every_pair() {
        let rates = AttributeRates {
            occlusion: 1.0,
            ..Default::default()
        };
        let data = gen_synthetic::<f64>(&small(rates)).unwrap();
        assert!(data.iter().all(|p| p.attributes == vec![Attribute::Occlusion]));
    }

    #[test]
    fn clean_target_found_by_hadamard_argmax() {
        let data = gen_synthetic::<f64>(&small(AttributeRates::default())).unwrap();
        let p = &data[0];
        assert!(p.is_clean());
        let g = GridSpec::default();
        // f_z: mean of exemplar cells inside the box.
        let cells = p.pair.box_z.cells_inside(g.hz, g.wz);
        let mut fz = vec![0.0; g.c];
        for &cell in &cells {
            for k in 0..g.c {
                fz[k] += p.pair.fz.data()[cell * g.c + k] / cells.len() as f64;
            }
        }
        let score = |cell: usize| -> f64 {
            (0..g.c).map(|k| fz[k] * p.pair.fx.data()[cell * g.c + k]).sum()
        };
        let best = (0..g.hx * g.wx)
            .max_by(|&a, &b| score(a).partial_cmp(&score(b)).unwrap())
            .unwrap();
        assert!(p.gt_box.cells_inside(g.hx, g.wx).contains(&best));
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut cfg = small(AttributeRates::uniform(1.5));
        assert!(gen_synthetic::<f64>(&cfg).is_err());
        cfg.rates = AttributeRates::default();
        cfg.grid.c = 1;
        assert!(gen_synthetic::<f64>(&cfg).is_err());
    }

    #[test]
    fn split_is_by_sequence() {
        let items: Vec<usize> = (0..10).flat_map(|s| [s, s]).collect();
        let (train, val) = split_by_sequence(&items, |&s| s, 10, 0.8).unwrap();
        assert_eq!(train.len(), 16);
        assert!(val.iter().all(|&s| s >= 8));
        assert!(split_by_sequence(&items, |&s| s, 10, 1.0).is_err());
    }
}
