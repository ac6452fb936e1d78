//! End-to-end acceptance run. Each test prints one PASS/FAIL line to stderr,
//! uncaptured, then asserts.

mod common;

use std::io::Write;
use std::time::Instant;

use maskbench::backbones::BackboneConfig;
use maskbench::classifier::ClassifierConfig;
use maskbench::evalkit::{
    check_non_increasing, head_sweep, median, read_results, render_markdown, stage_sweep, strategy_comparison,
    ExperimentKind, ResultsFile, ResultsMeta, SweepContext, SweepData,
};
use maskbench::heads::HeadVariant;
use maskbench::maskops::{OracleMasks, StrategyConfig};
use maskbench::segmodel::{evaluate_segmenter, train_segmenter, SegmenterConfig};
use maskbench::synthset::{generate_dataset, split_records, DatasetSpec, SampleRecord, Split, SplitSizes};
use maskbench::trainkit::{PretrainConfig, TrainConfig};

const SEEDS: [u64; 3] = [0, 1, 2];

type NamedCheck = (&'static str, fn() -> common::Check);

fn verdict(name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    // direct handle: libtest only captures the print macros
    let _ = writeln!(std::io::stderr(), "[acceptance] {tag} {name}: {detail}");
}

fn show(file: ResultsFile) {
    let _ = writeln!(std::io::stderr(), "{}", render_markdown(&[file]));
}

struct Splits {
    pretrain: Vec<SampleRecord>,
    train: Vec<SampleRecord>,
    val: Vec<SampleRecord>,
    id_test: Vec<SampleRecord>,
    ood_test: Vec<SampleRecord>,
}

impl Splits {
    fn generate(spec: &DatasetSpec) -> Self {
        let all = generate_dataset(spec).expect("valid spec");
        let s = |split| split_records(&all, split);
        Self {
            pretrain: s(Split::Pretrain),
            train: s(Split::Train),
            val: s(Split::Val),
            id_test: s(Split::IdTest),
            ood_test: s(Split::OodTest),
        }
    }

    fn data(&self) -> SweepData<'_> {
        SweepData {
            pretrain: &self.pretrain,
            train: &self.train,
            val: &self.val,
            id_test: &self.id_test,
            ood_test: &self.ood_test,
        }
    }
}

/// Eight shapes on eight background families, 95% of biased-split samples on
/// their class's designated family.
fn benchmark_spec(size: usize, splits: SplitSizes) -> DatasetSpec {
    DatasetSpec {
        num_classes: 8,
        num_bg_families: 8,
        bias_strength: 0.95,
        image_size: (size, size),
        splits,
        seed: 7,
        fg_area_band: (0.1, 0.6),
    }
}

fn full_spec() -> DatasetSpec {
    benchmark_spec(
        64,
        SplitSizes {
            pretrain: 800,
            train: 4000,
            val: 200,
            id_test: 1000,
            ood_test: 1000,
        },
    )
}

/// A short budget on unbiased data: enough for shape features, short of
/// saturating them, so the classifier still has a background shortcut to take.
fn short_pretrain(learning_rate: f64) -> PretrainConfig {
    PretrainConfig {
        epochs: 4,
        learning_rate,
        batch_size: 32,
        weight_decay: 1e-2,
    }
}

fn context<'a>(data: SweepData<'a>, backbone: BackboneConfig, head: HeadVariant, pretrain_lr: f64) -> SweepContext<'a> {
    SweepContext {
        data,
        classifier: ClassifierConfig {
            backbone,
            head,
            num_classes: 8,
            head_seed: 0,
            gap_fg_normalize: false,
        },
        train: TrainConfig::frozen(30, 0),
        pretrain: Some(short_pretrain(pretrain_lr)),
        seeds: SEEDS.to_vec(),
        masks: &OracleMasks,
        model_name: "toy".into(),
    }
}

#[test]
fn invariant_suite() {
    let t = Instant::now();
    let checks: [NamedCheck; 8] = [
        ("early-mask background invariance", common::early_background_invariance),
        ("early-mask background gradient", common::early_background_gradient_zero),
        ("all-ones equivalence", common::all_ones_equivalence),
        ("image-level late is early", common::late_zero_is_early),
        ("composite bit-exactness", common::composite_bit_exact),
        ("dice oracle", common::dice_matches_counting),
        ("subsample shapes", common::subsample_shapes),
        ("smoothed-loss gradient", common::smoothed_loss_gradient),
    ];
    let failures: Vec<String> = checks
        .iter()
        .filter_map(|(name, check)| check().err().map(|e| format!("{name}: {e}")))
        .collect();
    let secs = t.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 120.0;
    let detail = if failures.is_empty() {
        format!("8/8 checks in {secs:.1}s (limit 120s)")
    } else {
        failures.join("; ")
    };
    verdict("invariant suite", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn early_masking_beats_baseline_out_of_distribution() {
    let t = Instant::now();
    let splits = Splits::generate(&full_spec());
    let strategies = [StrategyConfig::baseline(), StrategyConfig::early()];
    let backbones = [
        ("cnn", BackboneConfig::toy_cnn((64, 64), 0), HeadVariant::Gap, 2e-3),
        ("vit", BackboneConfig::toy_vit((64, 64), 0), HeadVariant::Concat, 1e-3),
    ];
    let mut details = Vec::new();
    let mut pass = true;
    for (name, backbone, head, plr) in backbones {
        let ctx = SweepContext {
            model_name: name.into(),
            ..context(splits.data(), backbone, head, plr)
        };
        let reports = strategy_comparison(&strategies, &ctx).expect("comparison runs");
        let pick = |label: &str, masked: bool| {
            let v: Vec<f64> = reports
                .iter()
                .filter(|r| r.meta.strategy == label)
                .map(|r| if masked { r.ood_masked } else { r.ood_original })
                .collect();
            median(&v)
        };
        let (base, early) = (pick("baseline", false), pick("early", true));
        let gain = early - base;
        pass &= gain >= 5.0;
        details.push(format!("{name} ood {base:.2} -> {early:.2} ({gain:+.2}pp)"));
        show(ResultsFile::from_reports(ResultsMeta::new(ExperimentKind::CrossEval), &reports));
    }
    let secs = t.elapsed().as_secs_f64();
    pass &= secs <= 1200.0;
    let detail = format!("{}; {secs:.0}s (limit 1200s)", details.join(", "));
    verdict("early masking beats baseline OOD, both backbones, frozen", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn earlier_masking_stage_is_no_worse_out_of_distribution() {
    let splits = Splits::generate(&full_spec());
    let ctx = context(splits.data(), BackboneConfig::toy_cnn((64, 64), 0), HeadVariant::Gap, 2e-3);
    let stages = ["0", "L-1", "L"];
    let table = stage_sweep(&stages, &ctx).expect("stage sweep runs");
    let ood: Vec<f64> = stages
        .iter()
        .map(|s| table.row(&[s]).expect("row per stage").ood_test())
        .collect();
    show(ResultsFile::from_sweep(ResultsMeta::new(ExperimentKind::StageSweep), "toy", &table));
    let pass = check_non_increasing(&ood, 1.0).is_empty();
    let detail = format!("median ood 0 / L-1 / L = {:.2} / {:.2} / {:.2} (slack 1pp)", ood[0], ood[1], ood[2]);
    verdict("ood non-increasing as the mask moves from 0 to L", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn segmenter_generalizes_across_backgrounds() {
    let splits = Splits::generate(&full_spec());
    let config = SegmenterConfig {
        epochs: 3,
        ..SegmenterConfig::default()
    };
    let train: Vec<SampleRecord> = splits.train.iter().take(1000).cloned().collect();
    let (model, _) = train_segmenter(&train, &config).expect("segmenter trains");
    let eval: Vec<SampleRecord> = splits.val.iter().chain(&splits.ood_test).cloned().collect();
    let report = evaluate_segmenter(&model, &eval).expect("segmenter evaluates");
    let fg = |split| report.per_split.get(&split).map(|d| d.dice_fg).unwrap_or(f64::NAN);
    let (val, ood) = (fg(Split::Val), fg(Split::OodTest));
    let pass = val >= 0.95 && ood >= 0.90;
    let detail = format!("foreground dice val {val:.4} (>= 0.95), ood_test {ood:.4} (>= 0.90)");
    verdict("segmenter dice", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn report_reproduces_golden_tables() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let files: Vec<ResultsFile> = ["reference_cross_eval.csv", "reference_stage_sweep.csv", "reference_head_sweep.csv"]
        .iter()
        .map(|f| read_results(&dir.join(f)).expect("fixture parses"))
        .collect();
    let got = render_markdown(&files);
    let want = std::fs::read_to_string(dir.join("reference_report.md")).expect("golden exists");
    let pass = got == want;
    let detail = if pass {
        "3 tables byte-identical".to_string()
    } else {
        let line = got.lines().zip(want.lines()).position(|(a, b)| a != b);
        format!("first differing line {line:?}")
    };
    verdict("fixture rendering", pass, &detail);
    assert!(pass, "{detail}\n{got}");
}

#[test]
fn head_sweep_factorial_and_patch_fine_tuning() {
    let spec = benchmark_spec(
        32,
        SplitSizes {
            pretrain: 800,
            train: 1000,
            val: 200,
            id_test: 500,
            ood_test: 500,
        },
    );
    let splits = Splits::generate(&spec);
    let ctx = SweepContext {
        seeds: vec![0],
        ..context(splits.data(), BackboneConfig::toy_vit((32, 32), 0), HeadVariant::Concat, 1e-3)
    };
    let strategies = [StrategyConfig::baseline(), StrategyConfig::early(), StrategyConfig::late("L-1")];
    let regimes = [TrainConfig::frozen(30, 0), TrainConfig::fine_tune(6, 0)];
    let table = head_sweep(&HeadVariant::VIT, &strategies, &regimes, &ctx).expect("head sweep runs");
    show(ResultsFile::from_sweep(ResultsMeta::new(ExperimentKind::HeadSweep), "toy-vit", &table));
    let complete = table.rows.len() == 18 && table.keys_unique();
    let ood = |regime| {
        table
            .row(&["early", "patch_gap", regime])
            .map(|r| r.ood_test())
            .unwrap_or(f64::NAN)
    };
    let (frozen, tuned) = (ood("frozen"), ood("fine_tune"));
    let pass = complete && tuned >= frozen;
    let detail = format!(
        "{} cells; early-masked patch ood frozen {frozen:.2} -> fine-tuned {tuned:.2}",
        table.rows.len()
    );
    verdict("head sweep factorial", pass, &detail);
    assert!(pass, "{detail}");
}
