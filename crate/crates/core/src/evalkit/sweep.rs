//! Multi-seed experiment drivers: strategy comparison, stage sweep, head sweep.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{accuracy, cross_eval, EvalMeta, EvalReport, TestMasking};
use crate::backbones::BackboneKind;
use crate::classifier::{ClassifierConfig, ClassifierModel};
use crate::error::{Error, Result};
use crate::heads::HeadVariant;
use crate::maskops::{MaskProvider, Strategy, StrategyConfig, StrategyKind};
use crate::synthset::SampleRecord;
use crate::trainkit::{pretrain, train_classifier, PretrainConfig, TrainConfig};

/// Record sets used by every sweep.
#[derive(Clone, Copy, Debug)]
pub struct SweepData<'a> {
    pub pretrain: &'a [SampleRecord],
    pub train: &'a [SampleRecord],
    pub val: &'a [SampleRecord],
    pub id_test: &'a [SampleRecord],
    pub ood_test: &'a [SampleRecord],
}

/// Everything a sweep needs besides the swept axis.
pub struct SweepContext<'a> {
    pub data: SweepData<'a>,
    pub classifier: ClassifierConfig,
    pub train: TrainConfig,
    /// `None` starts every run from random backbone weights.
    pub pretrain: Option<PretrainConfig>,
    pub seeds: Vec<u64>,
    pub masks: &'a dyn MaskProvider,
    pub model_name: String,
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Model for `seed` whose backbone has been through pretraining, if configured.
pub fn prepare_backbone(ctx: &SweepContext<'_>, seed: u64) -> Result<ClassifierModel> {
    let mut cfg = ctx.classifier.clone();
    cfg.backbone.seed = seed;
    cfg.head_seed = seed;
    let model = ClassifierModel::new(cfg, candle_core::DType::F32)?;
    match &ctx.pretrain {
        Some(p) if p.epochs > 0 => {
            if ctx.data.pretrain.is_empty() {
                return Err(Error::Empty("pretraining requested without pretrain records".into()));
            }
            Ok(pretrain(model, ctx.data.pretrain, p, seed)?.0)
        }
        _ => Ok(model),
    }
}

/// Test masking a model is scored under in the sweep tables.
fn native(strategy: &Strategy) -> TestMasking {
    match strategy {
        Strategy::Baseline => TestMasking::Original,
        _ => TestMasking::Masked,
    }
}

fn train_run(
    ctx: &SweepContext<'_>,
    base: &ClassifierModel,
    head: HeadVariant,
    strategy: &Strategy,
    train: &TrainConfig,
    seed: u64,
) -> Result<ClassifierModel> {
    let model = ClassifierModel::with_new_head(base, head, seed)?;
    let cfg = TrainConfig {
        seed,
        ..train.clone()
    };
    let (model, _) = train_classifier(model, ctx.data.train, ctx.data.val, &cfg, strategy, ctx.masks)?;
    Ok(model)
}

fn id_ood(ctx: &SweepContext<'_>, model: &ClassifierModel, strategy: &Strategy) -> Result<(f64, f64)> {
    let t = native(strategy);
    Ok((
        accuracy(model, ctx.data.id_test, strategy, t, ctx.masks)?,
        accuracy(model, ctx.data.ood_test, strategy, t, ctx.masks)?,
    ))
}

/// Short machine label of a strategy config, e.g. `late@stage3`.
pub fn strategy_label(s: &StrategyConfig) -> String {
    match (s.strategy, &s.stage) {
        (StrategyKind::Late, Some(stage)) => format!("late@{stage}"),
        (StrategyKind::Late, None) => "late".into(),
        (StrategyKind::Early, _) => "early".into(),
        (StrategyKind::Baseline, _) => "baseline".into(),
    }
}

/// Trains one model per (seed, strategy) and cross-evaluates each.
pub fn strategy_comparison(strategies: &[StrategyConfig], ctx: &SweepContext<'_>) -> Result<Vec<EvalReport>> {
    let resolved = strategies
        .iter()
        .map(|s| s.resolve(&ctx.classifier.backbone))
        .collect::<Result<Vec<_>>>()?;
    let mut reports = Vec::new();
    for &seed in &ctx.seeds {
        let base = prepare_backbone(ctx, seed)?;
        for (sc, strategy) in strategies.iter().zip(&resolved) {
            let model = train_run(ctx, &base, ctx.classifier.head, strategy, &ctx.train, seed)?;
            let meta = EvalMeta {
                model_id: ctx.model_name.clone(),
                strategy: strategy_label(sc),
                regime: ctx.train.regime.as_str().into(),
                seed,
            };
            reports.push(cross_eval(&model, ctx.data.id_test, ctx.data.ood_test, strategy, ctx.masks, meta)?);
        }
    }
    Ok(reports)
}

/// One row of a sweep: its labels and per-seed (id, ood) accuracies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub labels: Vec<String>,
    pub per_seed: Vec<(u64, f64, f64)>,
}

impl SweepRow {
    pub fn key(&self) -> String {
        self.labels.join("/")
    }

    pub fn id_test(&self) -> f64 {
        median(&self.per_seed.iter().map(|r| r.1).collect::<Vec<_>>())
    }

    pub fn ood_test(&self) -> f64 {
        median(&self.per_seed.iter().map(|r| r.2).collect::<Vec<_>>())
    }
}

/// Rows in insertion order, unique by key.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub columns: Vec<String>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Adds a seed result to the row keyed by `labels`, creating it if needed.
    pub fn record(&mut self, labels: &[String], seed: u64, id: f64, ood: f64) -> Result<()> {
        if labels.len() != self.columns.len() {
            return Err(Error::Shape(format!("{} labels for {} columns", labels.len(), self.columns.len())));
        }
        match self.rows.iter_mut().find(|r| r.labels == labels) {
            Some(row) if row.per_seed.iter().any(|s| s.0 == seed) => {
                Err(Error::Config(format!("seed {seed} recorded twice for `{}`", row.key())))
            }
            Some(row) => {
                row.per_seed.push((seed, id, ood));
                Ok(())
            }
            None => {
                self.rows.push(SweepRow {
                    labels: labels.to_vec(),
                    per_seed: vec![(seed, id, ood)],
                });
                Ok(())
            }
        }
    }

    pub fn row(&self, labels: &[&str]) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.labels.iter().map(String::as_str).eq(labels.iter().copied()))
    }

    pub fn keys_unique(&self) -> bool {
        let mut seen = HashSet::new();
        self.rows.iter().all(|r| seen.insert(r.key()))
    }
}

/// Indices `i` where `values[i + 1] > values[i] + slack`.
pub fn check_non_increasing(values: &[f64], slack: f64) -> Vec<usize> {
    values
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] > w[0] + slack)
        .map(|(i, _)| i)
        .collect()
}

fn stage_strategy(name: &str, ctx: &SweepContext<'_>) -> Result<Strategy> {
    let rule = Default::default();
    if name == "0" {
        return Ok(Strategy::Early { rule });
    }
    let stage = ctx
        .classifier
        .backbone
        .parse_stage(name)
        .map_err(|_| Error::Stage(format!("unknown stage `{name}`")))?;
    Ok(if stage == 0 {
        Strategy::Early { rule }
    } else {
        Strategy::Late { stage, rule }
    })
}

/// One model per stage and seed, masked at that stage; rows keyed by the
/// stage names as given.
pub fn stage_sweep(stages: &[&str], ctx: &SweepContext<'_>) -> Result<SweepTable> {
    let strategies = stages
        .iter()
        .map(|s| stage_strategy(s, ctx))
        .collect::<Result<Vec<_>>>()?;
    let mut table = SweepTable::new(&["stage"]);
    for &seed in &ctx.seeds {
        let base = prepare_backbone(ctx, seed)?;
        for (name, strategy) in stages.iter().zip(&strategies) {
            let model = train_run(ctx, &base, ctx.classifier.head, strategy, &ctx.train, seed)?;
            let (id, ood) = id_ood(ctx, &model, strategy)?;
            table.record(&[name.to_string()], seed, id, ood)?;
        }
    }
    Ok(table)
}

/// Full factorial over strategies x head variants x regimes on a ViT.
/// Each entry of `regimes` is a complete training config; its regime names the column.
pub fn head_sweep(
    variants: &[HeadVariant],
    strategies: &[StrategyConfig],
    regimes: &[TrainConfig],
    ctx: &SweepContext<'_>,
) -> Result<SweepTable> {
    if ctx.classifier.backbone.kind != BackboneKind::Vit {
        return Err(Error::field("backbone.kind", "the head sweep needs a vit backbone"));
    }
    if let Some(v) = variants.iter().find(|v| !v.compatible_with(BackboneKind::Vit)) {
        return Err(Error::field("eval.head_variants", format!("`{}` is not a vit head", v.as_str())));
    }
    let resolved = strategies
        .iter()
        .map(|s| s.resolve(&ctx.classifier.backbone))
        .collect::<Result<Vec<_>>>()?;
    for r in regimes {
        r.validate()?;
    }
    let mut table = SweepTable::new(&["strategy", "head", "regime"]);
    for &seed in &ctx.seeds {
        let base = prepare_backbone(ctx, seed)?;
        for (sc, strategy) in strategies.iter().zip(&resolved) {
            for &variant in variants {
                for train in regimes {
                    let model = train_run(ctx, &base, variant, strategy, train, seed)?;
                    let (id, ood) = id_ood(ctx, &model, strategy)?;
                    let labels = [
                        strategy_label(sc),
                        variant.as_str().to_string(),
                        train.regime.as_str().to_string(),
                    ];
                    table.record(&labels, seed, id, ood)?;
                }
            }
        }
    }
    Ok(table)
}
