//! Checks shared by the invariant tests and the acceptance run. Each returns
//! `Err` with a description of the first violation.

#![allow(dead_code)]

use candle_core::{DType, Tensor, Var};
use maskbench::backbones::{BackboneConfig, BackboneKind};
use maskbench::classifier::{ClassifierConfig, ClassifierModel};
use maskbench::heads::HeadVariant;
use maskbench::maskops::{masked_forward, masked_forward_batch, subsample_mask, Strategy, SubsampleRule};
use maskbench::segmodel::{dice, MaskClass};
use maskbench::synthset::{composite, render_sample_layers, BinaryMask, DatasetSpec, Image, Split, SplitSizes};
use maskbench::trainkit::{smoothed_loss, smoothed_loss_grad, smoothed_loss_batch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<(), String>;

pub fn cnn_config(size: usize, seed: u64) -> BackboneConfig {
    BackboneConfig {
        width: 32,
        stem_factor: 2,
        ..BackboneConfig::toy_cnn((size, size), seed)
    }
}

pub fn vit_config(size: usize, seed: u64) -> BackboneConfig {
    BackboneConfig {
        width: 32,
        depth: 3,
        patch_size: 4,
        ..BackboneConfig::toy_vit((size, size), seed)
    }
}

pub fn model(backbone: BackboneConfig, dtype: DType) -> ClassifierModel {
    let head = match backbone.kind {
        BackboneKind::Cnn => HeadVariant::Gap,
        BackboneKind::Vit => HeadVariant::Concat,
    };
    let config = ClassifierConfig {
        backbone,
        head,
        num_classes: 5,
        head_seed: 11,
        gap_fg_normalize: false,
    };
    ClassifierModel::new(config, dtype).expect("valid model config")
}

pub fn random_image<R: Rng>(size: usize, rng: &mut R) -> Image {
    Image::from_fn(size, size, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap()
}

/// A disc-ish foreground covering roughly a third of the image.
pub fn blob_mask(size: usize) -> BinaryMask {
    let c = size as f64 / 2.0 - 0.5;
    let r = size as f64 * 0.33;
    BinaryMask::from_fn(size, size, |y, x| {
        let (dy, dx) = (y as f64 - c, x as f64 - c * 0.8);
        dy * dy + dx * dx <= r * r
    })
    .unwrap()
}

fn same_bits(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn models(size: usize) -> Vec<(&'static str, ClassifierModel)> {
    vec![
        ("cnn", model(cnn_config(size, 3), DType::F32)),
        ("vit", model(vit_config(size, 3), DType::F32)),
    ]
}

/// Early masking: logits do not depend on background pixel values.
pub fn early_background_invariance() -> Check {
    let size = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mask = blob_mask(size);
    for (name, m) in models(size) {
        for _ in 0..4 {
            let img = random_image(size, &mut rng);
            let noise = random_image(size, &mut rng);
            let swapped = composite(&img, &mask, &noise).unwrap();
            let a = masked_forward(&m, &img, Some(&mask), &Strategy::EARLY).map_err(|e| e.to_string())?;
            let b = masked_forward(&m, &swapped, Some(&mask), &Strategy::EARLY).map_err(|e| e.to_string())?;
            if !same_bits(&a.0, &b.0) {
                return Err(format!("{name}: logits changed with the background: {:?} vs {:?}", a.0, b.0));
            }
        }
    }
    Ok(())
}

/// Early masking: the loss gradient is exactly zero on background pixels and
/// matches central differences on foreground pixels.
pub fn early_background_gradient_zero() -> Check {
    let size = 16;
    let m = model(cnn_config(size, 5), DType::F64);
    let mask = blob_mask(size);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = random_image(size, &mut rng);
    let x0 = img.to_tensor(DType::F64).unwrap().unsqueeze(0).unwrap();
    let mt = mask.to_tensor(DType::F64).unwrap().unsqueeze(0).unwrap();
    let target = [3usize];
    let loss_of = |x: &Tensor| -> f64 {
        let logits = masked_forward_batch(&m, x, Some(&mt), &Strategy::EARLY).unwrap();
        smoothed_loss_batch(&logits, &target, 0.1).unwrap().to_scalar::<f64>().unwrap()
    };
    let var = Var::from_tensor(&x0).unwrap();
    let logits = masked_forward_batch(&m, var.as_tensor(), Some(&mt), &Strategy::EARLY).map_err(|e| e.to_string())?;
    let loss = smoothed_loss_batch(&logits, &target, 0.1).map_err(|e| e.to_string())?;
    let grads = loss.backward().map_err(|e| e.to_string())?;
    let g = grads
        .get(var.as_tensor())
        .ok_or("no gradient reached the input")?
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap();
    let base = x0.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let plane = size * size;
    let h = 1e-6;
    let mut checked_fg = 0;
    for (i, gi) in g.iter().enumerate() {
        let (y, x) = ((i % plane) / size, i % size);
        if !mask.get(y, x) {
            if *gi != 0.0 {
                return Err(format!("background input {i} has gradient {gi:e}"));
            }
            continue;
        }
        // every third foreground input keeps the finite-difference pass short
        if i % 3 != 0 {
            continue;
        }
        let shifted = |d: f64| {
            let mut v = base.clone();
            v[i] += d;
            Tensor::from_vec(v, x0.shape(), x0.device()).unwrap()
        };
        let fd = (loss_of(&shifted(h)) - loss_of(&shifted(-h))) / (2.0 * h);
        let err = (gi - fd).abs() / fd.abs().max(gi.abs()).max(1e-3);
        if err > 1e-5 {
            return Err(format!("foreground input {i}: analytic {gi:e} vs finite difference {fd:e}"));
        }
        checked_fg += 1;
    }
    if checked_fg == 0 {
        return Err("no foreground input checked".into());
    }
    Ok(())
}

/// With an all-ones mask, Early, every Late(s) and Baseline give identical logits.
pub fn all_ones_equivalence() -> Check {
    let size = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ones = BinaryMask::ones(size, size).unwrap();
    for (name, m) in models(size) {
        let img = random_image(size, &mut rng);
        let base = masked_forward(&m, &img, None, &Strategy::Baseline).map_err(|e| e.to_string())?;
        let mut strategies = vec![Strategy::EARLY];
        strategies.extend((0..=m.backbone().last_stage()).map(Strategy::late));
        for s in strategies {
            let l = masked_forward(&m, &img, Some(&ones), &s).map_err(|e| e.to_string())?;
            if !same_bits(&l.0, &base.0) {
                return Err(format!("{name}: {s:?} differs from baseline under an all-ones mask"));
            }
        }
    }
    Ok(())
}

/// Late masking at the image level reproduces early masking.
pub fn late_zero_is_early() -> Check {
    let size = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mask = blob_mask(size);
    for (name, m) in models(size) {
        for _ in 0..3 {
            let img = random_image(size, &mut rng);
            let early = masked_forward(&m, &img, Some(&mask), &Strategy::EARLY).map_err(|e| e.to_string())?;
            let late = masked_forward(&m, &img, Some(&mask), &Strategy::late(0)).map_err(|e| e.to_string())?;
            if !same_bits(&early.0, &late.0) {
                return Err(format!("{name}: Late(0) {:?} vs Early {:?}", late.0, early.0));
            }
        }
    }
    Ok(())
}

/// Generated samples equal the composite of their layers, and the 2x2 select example holds.
pub fn composite_bit_exact() -> Check {
    let fg = Image::new(2, 2, [[0.1, 0.2, 0.3, 0.4]; 3].concat()).unwrap();
    let bg = Image::new(2, 2, [[0.9, 0.8, 0.7, 0.6]; 3].concat()).unwrap();
    let mask = BinaryMask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
    let out = composite(&fg, &mask, &bg).unwrap();
    let want: Vec<f32> = [[0.1f32, 0.8, 0.7, 0.4]; 3].concat();
    if !same_bits(out.data(), &want) {
        return Err(format!("2x2 composite gave {:?}", out.data()));
    }
    let spec = DatasetSpec {
        num_classes: 6,
        num_bg_families: 5,
        bias_strength: 0.9,
        image_size: (24, 24),
        splits: SplitSizes {
            pretrain: 6,
            train: 12,
            val: 6,
            id_test: 6,
            ood_test: 6,
        },
        seed: 9,
        fg_area_band: (0.1, 0.6),
    };
    let records = maskbench::synthset::generate_dataset(&spec).map_err(|e| e.to_string())?;
    for (i, r) in records.iter().enumerate() {
        let index = records[..i].iter().filter(|q| q.split == r.split).count();
        let layers = render_sample_layers(&spec, r.split, index).map_err(|e| e.to_string())?;
        let again = composite(&layers.shape, &layers.mask, &layers.texture).unwrap();
        if !same_bits(again.data(), r.image.data()) || layers.mask != r.mask {
            return Err(format!("record {} is not the composite of its layers", r.id));
        }
        if composite(&r.image, &r.mask, &layers.texture).unwrap() != r.image {
            return Err(format!("record {}: composite is not idempotent", r.id));
        }
    }
    let _ = Split::Train;
    Ok(())
}

/// Dice equals 2|X∩Y| / (|X|+|Y|) counted pixel by pixel, for both classes.
pub fn dice_matches_counting() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..1000 {
        let density_a: f64 = rng.random();
        let density_b: f64 = rng.random();
        let a = BinaryMask::from_fn(8, 8, |_, _| rng.random_bool(density_a)).unwrap();
        let b = BinaryMask::from_fn(8, 8, |_, _| rng.random_bool(density_b)).unwrap();
        for class in [MaskClass::Foreground, MaskClass::Background] {
            let want = class == MaskClass::Foreground;
            let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
            for y in 0..8 {
                for x in 0..8 {
                    let (pa, pb) = (a.get(y, x) == want, b.get(y, x) == want);
                    inter += usize::from(pa && pb);
                    na += usize::from(pa);
                    nb += usize::from(pb);
                }
            }
            let oracle = if na + nb == 0 { 1.0 } else { 2.0 * inter as f64 / (na + nb) as f64 };
            let got = dice(&a, &b, class).map_err(|e| e.to_string())?;
            if got != oracle {
                return Err(format!("trial {trial} {class:?}: dice {got} vs count {oracle}"));
            }
        }
    }
    Ok(())
}

/// Subsampled masks have shape (M/k, N/k) for random sizes and factors.
pub fn subsample_shapes() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let k = [1, 2, 4, 8, 16][rng.random_range(0..5)];
        let (gm, gn) = (rng.random_range(1..8), rng.random_range(1..8));
        let (m, n) = (gm * k, gn * k);
        let mask = BinaryMask::from_fn(m, n, |_, _| rng.random_bool(0.5)).unwrap();
        for rule in [SubsampleRule::Fraction(0.5), SubsampleRule::AnyPixel] {
            let p = subsample_mask(&mask, (m / k, n / k), rule).map_err(|e| e.to_string())?;
            if p.dims() != (gm, gn) {
                return Err(format!("{m}x{n} with k={k} gave {:?}", p.dims()));
            }
        }
        if m > 1 && subsample_mask(&mask, (m - 1, n), SubsampleRule::default()).is_ok() && m % (m - 1) != 0 {
            return Err(format!("indivisible {m} -> {} accepted", m - 1));
        }
    }
    Ok(())
}

/// Analytic smoothed-loss gradient against central differences.
pub fn smoothed_loss_gradient() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..300 {
        let c = rng.random_range(2..12);
        let logits: Vec<f64> = (0..c).map(|_| rng.random_range(-6.0..6.0)).collect();
        let target = rng.random_range(0..c);
        let eps = rng.random_range(0.0..0.5);
        let g = smoothed_loss_grad(&logits, target, eps).map_err(|e| e.to_string())?;
        for j in 0..c {
            let mut up = logits.clone();
            let mut down = logits.clone();
            up[j] += 1e-6;
            down[j] -= 1e-6;
            let fd = (smoothed_loss(&up, target, eps).unwrap() - smoothed_loss(&down, target, eps).unwrap()) / 2e-6;
            let rel = (g[j] - fd).abs() / fd.abs().max(g[j].abs()).max(1e-3);
            if rel > 1e-5 {
                return Err(format!("trial {trial} logit {j}: analytic {} vs fd {fd}", g[j]));
            }
        }
    }
    Ok(())
}
