//! Success curves, AUC and per-attribute breakdowns.

use matchsearch::desk::{pair_ious, Attribute, LabeledPair, SiameseModel};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Number of points on the threshold grid `0, 0.05, …, 1`.
pub const N_THRESHOLDS: usize = 21;

pub fn thresholds() -> Vec<f64> {
    (0..N_THRESHOLDS).map(|i| i as f64 / 20.0).collect()
}

/// Fraction of `ious` strictly above each threshold.
pub fn success_curve(ious: &[f64]) -> Vec<f64> {
    let n = ious.len().max(1) as f64;
    thresholds()
        .into_iter()
        .map(|t| ious.iter().filter(|&&v| v > t).count() as f64 / n)
        .collect()
}

pub fn auc(curve: &[f64]) -> f64 {
    if curve.is_empty() {
        return 0.0;
    }
    curve.iter().sum::<f64>() / curve.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub curve: Vec<f64>,
    pub auc: f64,
}

impl Summary {
    pub fn of(ious: &[f64]) -> Self {
        let curve = success_curve(ious);
        Self {
            count: ious.len(),
            auc: auc(&curve),
            curve,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSummary {
    pub attribute: Attribute,
    /// `None` when no pair carries the attribute.
    pub summary: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ious: Vec<f64>,
    pub overall: Summary,
    pub clean: Option<Summary>,
    pub attributes: Vec<AttributeSummary>,
}

impl Metrics {
    /// A pair with several attributes counts towards each of them.
    pub fn from_ious(ious: Vec<f64>, attributes: &[&[Attribute]]) -> Result<Self> {
        if ious.is_empty() {
            return Err(HarnessError::Runtime("cannot evaluate an empty dataset".into()));
        }
        if ious.len() != attributes.len() {
            return Err(HarnessError::Runtime(format!(
                "{} IoUs for {} attribute lists",
                ious.len(),
                attributes.len()
            )));
        }
        let subset = |keep: &dyn Fn(&[Attribute]) -> bool| -> Option<Summary> {
            let sel: Vec<f64> = ious
                .iter()
                .zip(attributes)
                .filter(|(_, a)| keep(a))
                .map(|(&v, _)| v)
                .collect();
            (!sel.is_empty()).then(|| Summary::of(&sel))
        };
        let clean = subset(&|a| a.is_empty());
        let per_attr = Attribute::ALL
            .iter()
            .map(|&attr| AttributeSummary {
                attribute: attr,
                summary: subset(&|a| a.contains(&attr)),
            })
            .collect();
        Ok(Self {
            overall: Summary::of(&ious),
            ious,
            clean,
            attributes: per_attr,
        })
    }

    pub fn attribute(&self, a: Attribute) -> Option<&Summary> {
        self.attributes
            .iter()
            .find(|s| s.attribute == a)
            .and_then(|s| s.summary.as_ref())
    }

    pub fn mean_iou(&self) -> f64 {
        self.ious.iter().sum::<f64>() / self.ious.len() as f64
    }

    pub fn clean_mean_iou(&self, dataset: &[LabeledPair<f64>]) -> Option<f64> {
        let clean: Vec<f64> = self
            .ious
            .iter()
            .zip(dataset)
            .filter(|(_, p)| p.sample.is_clean())
            .map(|(&v, _)| v)
            .collect();
        (!clean.is_empty()).then(|| clean.iter().sum::<f64>() / clean.len() as f64)
    }
}

/// IoU of `predict_box` against ground truth for every pair, aggregated.
pub fn eval_metrics(model: &SiameseModel<f64>, dataset: &[LabeledPair<f64>]) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(HarnessError::Runtime("cannot evaluate an empty dataset".into()));
    }
    for p in dataset {
        if p.sample.pair.dims() != model.dims {
            return Err(HarnessError::Runtime(format!(
                "pair grid {:?} does not match model grid {:?}",
                p.sample.pair.dims(),
                model.dims
            )));
        }
    }
    let ious = pair_ious(model, dataset)?;
    let attrs: Vec<&[Attribute]> = dataset.iter().map(|p| p.attributes()).collect();
    Metrics::from_ious(ious, &attrs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_hopeless_predictors() {
        let c = success_curve(&[1.0; 5]);
        assert!(c[..20].iter().all(|&v| v == 1.0));
        assert_eq!(c[20], 0.0);
        assert!((auc(&c) - 20.0 / 21.0).abs() < 1e-15);

        let c = success_curve(&[0.0; 5]);
        assert!(c.iter().all(|&v| v == 0.0));
        let c = success_curve(&[0.01; 5]);
        assert_eq!(c[0], 1.0);
        assert!((auc(&c) - 1.0 / 21.0).abs() < 1e-15);
    }

    #[test]
    fn thresholds_are_strict() {
        let c = success_curve(&[0.5]);
        assert_eq!(c[9], 1.0);
        assert_eq!(c[10], 0.0);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(Metrics::from_ious(vec![], &[]).is_err());
    }
}
