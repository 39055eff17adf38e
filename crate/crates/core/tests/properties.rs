use mtseg::augment::{apply, Interpolation, TransformSpec};
use mtseg::config::ExperimentConfig;
use mtseg::data::{dequantize, quantize, read_pgm, write_pgm, Pgm};
use mtseg::losses::LossKind;
use mtseg::metrics::{confusion_metrics, hausdorff_masks, Confusion};
use mtseg::schedule::{consistency_weight_at_epoch, lr_at_epoch, ScheduleConfig};
use mtseg::teacher::{ema_alpha_schedule, ema_slice};
use mtseg::tensor::Tensor;
use proptest::prelude::*;

fn mask(bits: &[bool]) -> Tensor<f64> {
    Tensor::new(&[1, 1, 8, 8], bits.iter().map(|&b| f64::from(u8::from(b))).collect()).unwrap()
}

fn probs(v: &[f64]) -> Tensor<f64> {
    Tensor::new(&[1, 1, 8, 8], v.to_vec()).unwrap()
}

fn brute_hausdorff(a: &[bool], b: &[bool], w: usize) -> f64 {
    let pts = |m: &[bool]| -> Vec<(f64, f64)> {
        m.iter()
            .enumerate()
            .filter(|(_, &x)| x)
            .map(|(i, _)| ((i / w) as f64, (i % w) as f64))
            .collect()
    };
    let (pa, pb) = (pts(a), pts(b));
    let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| {
        from.iter()
            .map(|p| to.iter().map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    directed(&pa, &pb).max(directed(&pb, &pa))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_ranges(p in prop::collection::vec(0.0f64..=1.0, 64), g in prop::collection::vec(any::<bool>(), 64)) {
        let (p, g) = (probs(&p), mask(&g));
        let dice = LossKind::Dice.evaluate(&p, &g).unwrap();
        prop_assert!((-1.0..=0.0).contains(&dice));
        let mse = LossKind::Mse.evaluate(&p, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&mse));
        let ce = LossKind::CrossEntropy.evaluate(&g, &p).unwrap();
        prop_assert!(ce >= 0.0 && ce.is_finite());
    }

    #[test]
    fn tversky_at_one_half_is_dice(a in prop::collection::vec(any::<bool>(), 64), b in prop::collection::vec(any::<bool>(), 64)) {
        let (a, b) = (mask(&a), mask(&b));
        let d = LossKind::Dice.evaluate(&a, &b).unwrap();
        let t = LossKind::tversky(0.5, 0.5).unwrap().evaluate(&a, &b).unwrap();
        prop_assert_eq!(d.to_bits(), t.to_bits());
    }

    #[test]
    fn ema_is_a_convex_combination(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..50),
        alpha in 0.0f64..=1.0,
    ) {
        let (mut avg, cur): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let before = avg.clone();
        ema_slice(&mut avg, &cur, alpha);
        for ((&n, &o), &c) in avg.iter().zip(&before).zip(&cur) {
            prop_assert!(n >= o.min(c) - 1e-12 && n <= o.max(c) + 1e-12);
        }
    }

    #[test]
    fn ema_alpha_steps_up_after_rampup(ramp in 1u32..100, epoch in 0u32..200) {
        let a = ema_alpha_schedule(epoch, ramp, 0.99, 0.999);
        prop_assert_eq!(a, if epoch < ramp { 0.99 } else { 0.999 });
    }

    #[test]
    fn hausdorff_is_symmetric_and_matches_brute_force(
        a in prop::collection::vec(any::<bool>(), 64),
        b in prop::collection::vec(any::<bool>(), 64),
    ) {
        prop_assume!(a.contains(&true) && b.contains(&true));
        let ab = hausdorff_masks(&a, &b, 8).unwrap();
        let ba = hausdorff_masks(&b, &a, 8).unwrap();
        prop_assert_eq!(ab.to_bits(), ba.to_bits());
        prop_assert_eq!(ab.to_bits(), brute_hausdorff(&a, &b, 8).to_bits());
    }

    #[test]
    fn foreground_iou_follows_from_dice(a in prop::collection::vec(any::<bool>(), 64), b in prop::collection::vec(any::<bool>(), 64)) {
        let c = Confusion::from_masks(&a, &b);
        prop_assume!(c.tp + c.fp + c.fn_ > 0);
        let dice = c.overlap().dice;
        let iou = 100.0 * c.tp as f64 / (c.tp + c.fp + c.fn_) as f64;
        prop_assert!((iou - dice / (200.0 - dice) * 100.0).abs() < 1e-9);
        let via_tensors = confusion_metrics(&mask(&a), &mask(&b)).unwrap();
        prop_assert_eq!(via_tensors, c.overlap());
    }

    #[test]
    fn overlap_scores_are_percentages(a in prop::collection::vec(any::<bool>(), 64), b in prop::collection::vec(any::<bool>(), 64)) {
        let o = Confusion::from_masks(&a, &b).overlap();
        for v in [o.dice, o.miou, o.recall, o.precision, o.specificity] {
            prop_assert!((0.0..=100.0).contains(&v));
        }
    }

    #[test]
    fn hflip_is_an_involution(v in prop::collection::vec(-1.0f64..1.0, 64)) {
        let t = probs(&v);
        let flip = TransformSpec::new(true, 0.0, 0, 0).unwrap();
        for interp in [Interpolation::Nearest, Interpolation::Bilinear] {
            let twice = apply(&flip, &apply(&flip, &t, interp).unwrap(), interp).unwrap();
            prop_assert_eq!(twice.data(), t.data());
        }
        let same = apply(&TransformSpec::identity(), &t, Interpolation::Bilinear).unwrap();
        prop_assert_eq!(same.data(), t.data());
    }

    #[test]
    fn schedules_are_monotone(ramp in 1u32..60, extra in 0u32..200, gamma in 0.0f64..30.0) {
        let cfg = ScheduleConfig { alpha_lr: 1e-3, rampup_epochs: ramp, total_epochs: ramp + extra, gamma_max: gamma };
        let mut prev_lr = 0.0;
        let mut prev_w = 0.0;
        for e in 0..=ramp {
            let lr = lr_at_epoch(e, &cfg).unwrap();
            let w = consistency_weight_at_epoch(e, &cfg);
            prop_assert!(lr >= prev_lr && w >= prev_w && w <= gamma);
            prev_lr = lr;
            prev_w = w;
        }
        for e in ramp..=cfg.total_epochs {
            let lr = lr_at_epoch(e, &cfg).unwrap();
            prop_assert!(lr <= prev_lr && lr >= 0.0);
            prop_assert_eq!(consistency_weight_at_epoch(e, &cfg), gamma);
            prev_lr = lr;
        }
    }

    #[test]
    fn pgm_round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
        let pixels: Vec<u8> = (0..w * h).map(|i| (seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) >> 33) as u8).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let img = Pgm { width: w, height: h, pixels };
        write_pgm(&path, &img).unwrap();
        prop_assert_eq!(read_pgm(&path).unwrap(), img);
    }

    #[test]
    fn quantization_is_idempotent(x in 0.0f32..=1.0) {
        let q = quantize(x);
        prop_assert_eq!(quantize(dequantize(q)), q);
        prop_assert!((dequantize(q) - x).abs() <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn config_text_round_trips(
        seed in any::<u64>(),
        gamma in 0.0f64..50.0,
        lr in 1e-6f64..1e-1,
        tau in prop::option::of(0.01f64..0.99),
        loss in prop::sample::select(vec!["mse", "dice", "ce", "tversky:0.3:0.7"]),
        augment in any::<bool>(),
    ) {
        let mut cfg = ExperimentConfig::desk();
        cfg.seed = seed;
        cfg.schedule.gamma_max = gamma;
        cfg.schedule.alpha_lr = lr;
        cfg.threshold = tau;
        cfg.augment = augment;
        cfg = ExperimentConfig::parse_over(cfg, &format!("consistency_loss = {loss}")).unwrap();
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
