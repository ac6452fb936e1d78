//! Accuracy, the train/test masking cross matrix, and sweep tables.

mod chart;
mod report;
mod sweep;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use chart::render_bar_chart;
pub use report::{
    read_results, render_markdown, render_tables_csv, write_results, ExperimentKind, ResultsFile, ResultsMeta,
    ResultsRow,
};
pub use sweep::{
    check_non_increasing, head_sweep, median, prepare_backbone, stage_sweep, strategy_comparison, strategy_label, SweepContext,
    SweepData, SweepRow, SweepTable,
};

use crate::classifier::ClassifierModel;
use crate::error::{Error, Result};
use crate::maskops::{masked_forward_batch, MaskProvider, Strategy};
use crate::nn::argmax_rows;
use crate::segmodel::{image_batch, mask_batch};
use crate::synthset::{BinaryMask, Image, SampleRecord};

const EVAL_CHUNK: usize = 64;

/// Which test images the model sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMasking {
    /// Unmodified images, no masking anywhere.
    Original,
    /// The model's own masking; a baseline model gets its input masked.
    Masked,
}

impl TestMasking {
    /// Strategy actually run at test time for a model trained with `trained`.
    pub fn effective(self, trained: &Strategy) -> Strategy {
        match (self, trained) {
            (TestMasking::Original, _) => Strategy::Baseline,
            (TestMasking::Masked, Strategy::Baseline) => Strategy::EARLY,
            (TestMasking::Masked, s) => *s,
        }
    }
}

/// Predicted labels, in record order. `masks` must align with `records`
/// whenever `strategy` masks.
pub fn predict_labels(
    model: &ClassifierModel,
    records: &[SampleRecord],
    masks: Option<&[BinaryMask]>,
    strategy: &Strategy,
) -> Result<Vec<usize>> {
    if let Some(ms) = masks {
        if ms.len() != records.len() {
            return Err(Error::Shape(format!("{} masks for {} records", ms.len(), records.len())));
        }
    }
    let dtype = model.dtype();
    let mut preds = Vec::with_capacity(records.len());
    for (ci, chunk) in records.chunks(EVAL_CHUNK).enumerate() {
        let imgs: Vec<&Image> = chunk.iter().map(|r| &r.image).collect();
        let x = image_batch(&imgs, dtype)?;
        let m = match (strategy.needs_mask(), masks) {
            (false, _) => None,
            (true, None) => return Err(Error::Config("a mask is required for masked strategies".into())),
            (true, Some(ms)) => {
                let start = ci * EVAL_CHUNK;
                let part: Vec<&BinaryMask> = ms[start..start + chunk.len()].iter().collect();
                Some(mask_batch(&part, dtype)?)
            }
        };
        let logits = masked_forward_batch(model, &x, m.as_ref(), strategy)?;
        preds.extend(argmax_rows(&logits)?);
    }
    Ok(preds)
}

/// Percentage of records whose label equals the prediction.
pub fn accuracy_from_predictions(preds: &[usize], records: &[SampleRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("accuracy over an empty record set".into()));
    }
    if preds.len() != records.len() {
        return Err(Error::Shape(format!("{} predictions for {} records", preds.len(), records.len())));
    }
    let correct = preds.iter().zip(records).filter(|(p, r)| **p == r.label).count();
    Ok(100.0 * correct as f64 / records.len() as f64)
}

/// Test accuracy in percent of a model trained with `strategy`.
pub fn accuracy(
    model: &ClassifierModel,
    records: &[SampleRecord],
    strategy: &Strategy,
    test_masking: TestMasking,
    masks: &dyn MaskProvider,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("accuracy over an empty record set".into()));
    }
    let run = test_masking.effective(strategy);
    let ms = if run.needs_mask() { Some(masks.masks(records)?) } else { None };
    let preds = predict_labels(model, records, ms.as_deref(), &run)?;
    accuracy_from_predictions(&preds, records)
}

/// Provenance attached to an [`EvalReport`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMeta {
    pub model_id: String,
    pub strategy: String,
    pub regime: String,
    pub seed: u64,
}

/// Accuracy (%) on both test sets, with and without test-time masking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub id_original: f64,
    pub id_masked: f64,
    pub ood_original: f64,
    pub ood_masked: f64,
    pub meta: EvalMeta,
}

impl EvalReport {
    pub fn get(&self, ood: bool, masking: TestMasking) -> f64 {
        match (ood, masking) {
            (false, TestMasking::Original) => self.id_original,
            (false, TestMasking::Masked) => self.id_masked,
            (true, TestMasking::Original) => self.ood_original,
            (true, TestMasking::Masked) => self.ood_masked,
        }
    }
}

/// Fills the 2x2 matrix of (id, ood) x (original, masked).
pub fn cross_eval(
    model: &ClassifierModel,
    id_test: &[SampleRecord],
    ood_test: &[SampleRecord],
    strategy: &Strategy,
    masks: &dyn MaskProvider,
    meta: EvalMeta,
) -> Result<EvalReport> {
    let acc = |recs: &[SampleRecord], m| accuracy(model, recs, strategy, m, masks);
    Ok(EvalReport {
        id_original: acc(id_test, TestMasking::Original)?,
        id_masked: acc(id_test, TestMasking::Masked)?,
        ood_original: acc(ood_test, TestMasking::Original)?,
        ood_masked: acc(ood_test, TestMasking::Masked)?,
        meta,
    })
}

/// Memoizes another provider's masks by record id.
#[derive(Clone, Debug, Default)]
pub struct MaskCache {
    masks: HashMap<String, BinaryMask>,
}

impl MaskCache {
    pub fn build(provider: &dyn MaskProvider, records: &[SampleRecord]) -> Result<Self> {
        let masks = provider.masks(records)?;
        Ok(Self {
            masks: records.iter().map(|r| r.id.clone()).zip(masks).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

impl MaskProvider for MaskCache {
    fn masks(&self, records: &[SampleRecord]) -> Result<Vec<BinaryMask>> {
        records
            .iter()
            .map(|r| {
                self.masks
                    .get(&r.id)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("no cached mask for `{}`", r.id)))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthset::Split;

    fn records(labels: &[usize]) -> Vec<SampleRecord> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                SampleRecord::new(
                    format!("r{i}"),
                    Image::filled(2, 2, [0.0; 3]).unwrap(),
                    BinaryMask::ones(2, 2).unwrap(),
                    l,
                    0,
                    Split::IdTest,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let recs = records(&labels);
        assert_eq!(accuracy_from_predictions(&labels, &recs).unwrap(), 100.0);
        assert_eq!(accuracy_from_predictions(&vec![2; 40], &recs).unwrap(), 25.0);
        assert!(matches!(accuracy_from_predictions(&[], &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn effective_strategy_matrix() {
        let late = Strategy::late(2);
        assert_eq!(TestMasking::Original.effective(&late), Strategy::Baseline);
        assert_eq!(TestMasking::Masked.effective(&late), late);
        assert_eq!(TestMasking::Masked.effective(&Strategy::Baseline), Strategy::EARLY);
    }

    #[test]
    fn mask_cache_looks_up_by_id() {
        let recs = records(&[0, 1, 0]);
        let cache = MaskCache::build(&crate::maskops::OracleMasks, &recs).unwrap();
        assert_eq!(cache.len(), 3);
        let rev: Vec<_> = recs.iter().rev().cloned().collect();
        assert_eq!(cache.masks(&rev).unwrap().len(), 3);
        let other = records(&[0, 0, 0, 0]);
        assert!(cache.masks(&other[3..]).is_err());
    }
}
