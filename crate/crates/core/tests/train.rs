use clora_core::linalg::{seeded_rng, Matrix};
use clora_core::lrm::{param_count, AdapterBank, Variant};
use clora_core::sade::{rsr_term, token_similarity, ExpertSet};
use clora_core::train::{
    ablate, build_adapters, cosine_lr, measure_regularizer_flops, objective, parse_key_values,
    set_vit_field, train, Regularizer, SyntheticTask, TaskSpec, TrainConfig, ABLATION_VARIANTS,
};
use clora_core::verify::{gradient_check, toy_config};
use clora_core::vit::{AttachMode, VitConfig, VitWeights};
use clora_core::Error;

fn random_experts(p: usize, d: usize, seed: u64) -> ExpertSet {
    let mut rng = seeded_rng(seed);
    ExpertSet::new(
        (0..p)
            .map(|_| Matrix::random_normal(d, d, 1.0, &mut rng))
            .collect(),
    )
    .unwrap()
}

fn small_vit(layers: usize) -> VitConfig {
    VitConfig {
        d: 16,
        layers,
        heads: 2,
        n: 4,
        patch_dim: 6,
        ffn_hidden: 32,
        classes: 2,
    }
}

fn small_task(seed: u64) -> SyntheticTask {
    SyntheticTask::generate(TaskSpec {
        train: 64,
        val: 32,
        test: 32,
        ..TaskSpec::separable(4, 6, seed)
    })
    .unwrap()
}

fn quick() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        warmup_epochs: 1,
        batch: 16,
        p: 2,
        r: 2,
        ..Default::default()
    }
}

#[test]
fn objective_matches_hand_composition() {
    let mut rng = seeded_rng(1);
    let logits = Matrix::random_normal(5, 3, 2.0, &mut rng);
    let labels = [0, 2, 1, 1, 0];
    let banks = [random_experts(3, 6, 2), random_experts(3, 6, 3)];
    let (alpha, d) = (0.7, 6);

    let mut ce = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        ce += lse - row[y];
    }
    ce /= labels.len() as f64;
    let mut reg = 0.0;
    for bank in &banks {
        for h in 0..bank.p() {
            for r in (h + 1)..bank.p() {
                reg += bank
                    .get(h)
                    .matmul(&bank.get(r).transpose())
                    .unwrap()
                    .frobenius_sq();
            }
        }
    }
    let want = ce + alpha / (d * d) as f64 * reg;
    let got = objective(&logits, &labels, &banks, alpha, d).unwrap();
    assert!(
        (got - want).abs() < 1e-12 * want.abs().max(1.0),
        "{got} vs {want}"
    );

    let pure = objective(&logits, &labels, &banks, 0.0, d).unwrap();
    assert!((pure - ce).abs() < 1e-12);
    assert!(objective(&logits, &[0, 1, 2, 3, 0], &banks, alpha, d).is_err());
}

#[test]
fn uniform_logits_cost_log_k_per_sample() {
    for k in [2usize, 3, 10] {
        let got = objective(&Matrix::zeros(4, k), &[0, 1, 0, 1], &[], 1.0, 8).unwrap();
        assert!((got - (k as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn full_objective_gradients_match_finite_differences() {
    for reg in [Regularizer::None, Regularizer::Rsr, Regularizer::Sr] {
        let report = gradient_check(toy_config(8, 1, 2), 2, 2, 1.0, reg, 21).unwrap();
        assert_eq!(report.checked, 80);
        assert!(report.max_rel_err < 1e-4, "{reg:?}: {report:?}");
    }
    let report = gradient_check(toy_config(8, 2, 2), 3, 2, 10.0, Regularizer::Rsr, 22).unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn cosine_schedule_examples() {
    assert_eq!(cosine_lr(0, 100, 10, 0.5), 0.0);
    assert!((cosine_lr(10, 100, 10, 0.5) - 0.5).abs() < 1e-15);
    assert!(cosine_lr(100, 100, 10, 0.5).abs() < 1e-12);
    assert!((cosine_lr(55, 100, 10, 0.5) - 0.25).abs() < 1e-12);
    assert!((cosine_lr(5, 100, 10, 0.5) - 0.25).abs() < 1e-15);
}

#[test]
fn task_regenerates_and_splits_are_disjoint() {
    let a = small_task(3);
    let b = small_task(3);
    assert_eq!(a.train, b.train);
    assert_eq!(a.val, b.val);
    assert_eq!(a.test, b.test);
    assert_ne!(small_task(4).train, a.train);
    for s in &a.val {
        assert!(!a.train.iter().any(|t| t.patches == s.patches));
    }
    for s in &a.test {
        assert!(!a.train.iter().chain(&a.val).any(|t| t.patches == s.patches));
    }
}

#[test]
fn training_freezes_backbone_and_updates_adapters() {
    let vit = small_vit(2);
    let task = small_task(5);
    let w = VitWeights::init(vit, &mut seeded_rng(6)).unwrap();
    let config = quick();
    let adapters = build_adapters(&config, &vit).unwrap();
    let out = train(&task, &w, adapters.clone(), &config).unwrap();
    assert_eq!(out.digest_before, w.backbone_digest());
    assert_eq!(out.digest_after, out.digest_before);
    assert_ne!(out.adapters, adapters);
    assert_ne!(out.weights.head_w, w.head_w);
    assert_eq!(out.history.len(), config.epochs);
    assert!(out
        .history
        .iter()
        .all(|r| r.train_loss.is_finite() && r.rsr_sum >= 0.0));
}

#[test]
fn merged_weights_cannot_be_trained() {
    let vit = small_vit(2);
    let config = quick();
    let w = VitWeights::init(vit, &mut seeded_rng(7)).unwrap();
    let mut merged = w.clone();
    merged.merged = true;
    let err = train(
        &small_task(7),
        &merged,
        build_adapters(&config, &vit).unwrap(),
        &config,
    )
    .unwrap_err();
    assert!(matches!(err, Error::DoubleMerge));
}

fn mean_abs_similarity(bank: &AdapterBank, tokens: &[Matrix]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for j in 0..bank.m() {
        let experts = bank.experts(j).unwrap().unwrap();
        for x in tokens {
            for h in 0..experts.p() {
                for r in (h + 1)..experts.p() {
                    if let Ok(s) = token_similarity(x, &experts, h, r) {
                        total += s.abs();
                        count += 1;
                    }
                }
            }
        }
    }
    total / count as f64
}

#[test]
fn diversity_term_lowers_token_similarity() {
    let vit = small_vit(2);
    let task = small_task(8);
    let w = VitWeights::init(vit, &mut seeded_rng(9)).unwrap();
    let run = |alpha| {
        let config = TrainConfig {
            alpha,
            p: 3,
            epochs: 6,
            ..quick()
        };
        train(&task, &w, build_adapters(&config, &vit).unwrap(), &config).unwrap()
    };
    let with = run(1.0);
    let without = run(0.0);
    let mut rng = seeded_rng(10);
    let tokens: Vec<Matrix> = (0..500)
        .map(|_| Matrix::random_normal(1, vit.d, 1.0, &mut rng))
        .collect();
    let a = mean_abs_similarity(&with.adapters.unwrap().bank, &tokens);
    let b = mean_abs_similarity(&without.adapters.unwrap().bank, &tokens);
    assert!(a < b, "alpha=1: {a}, alpha=0: {b}");
}

#[test]
fn sample_dependent_cost_ratio_tracks_batch_size() {
    for b in [8, 32] {
        let (sr, rsr) = measure_regularizer_flops(64, 16, b, 2, 11).unwrap();
        let measured = rsr.total() as f64 / sr.total() as f64;
        let predicted = 64.0 / (2.0 * 17.0 * b as f64);
        assert!(
            (measured / predicted - 1.0).abs() <= 0.2,
            "b={b}: {measured} vs {predicted}"
        );
    }
}

fn apply_file(text: &str) -> clora_core::Result<(TrainConfig, VitConfig)> {
    let mut config = TrainConfig::default();
    let mut vit = small_vit(2);
    for (key, value) in parse_key_values(text)? {
        if !config.set(&key, &value)? && !set_vit_field(&mut vit, &key, &value)? {
            return Err(Error::Config(format!("unknown key {key}")));
        }
    }
    config.validate()?;
    Ok((config, vit))
}

#[test]
fn config_file_round_trip() {
    let text = "# run\nalpha = 0.5\nlr=0.002\nb=8\nepochs=20\nwarmup_epochs=2\nsade_on=false\nschedule=cosine\nL=3\n";
    let (config, vit) = apply_file(text).unwrap();
    assert_eq!(config.alpha, 0.5);
    assert_eq!(config.lr, 0.002);
    assert_eq!(config.batch, 8);
    assert_eq!(config.epochs, 20);
    assert!(!config.sade_on);
    assert_eq!(vit, small_vit(3));
    assert!(parse_key_values("alpha=1\nalpha=2\n").is_err());
    assert!(apply_file("bogus=1\n").is_err());
    assert!(apply_file("alpha=-1\n").is_err());
    assert!(apply_file("epochs=2\nwarmup_epochs=3\n").is_err());
}

#[test]
fn ablation_rows_isolate_flags() {
    let vit = small_vit(3);
    let task = small_task(12);
    let w = VitWeights::init(vit, &mut seeded_rng(13)).unwrap();
    let base = TrainConfig {
        epochs: 1,
        warmup_epochs: 0,
        ..quick()
    };
    let rows = ablate(&task, &w, &base, &[1]).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.variant.name).collect();
    let expected: Vec<&str> = ABLATION_VARIANTS.iter().map(|v| v.name).collect();
    assert_eq!(names, expected);

    let by = |name: &str| rows.iter().find(|r| r.variant.name == name).unwrap();
    assert_eq!(by("CLoRA").param_count, by("CLoRAMF").param_count);
    assert_eq!(by("CLoRA").param_count, by("CLoRA*").param_count);
    assert_eq!(by("CLoRA").param_count, by("CLoRA(QV)").param_count);
    assert_eq!(
        (by("CLoRAMS").mha_modules, by("CLoRAMS").ffn_modules),
        (3, 0)
    );
    assert_eq!(
        (by("CLoRAFS").mha_modules, by("CLoRAFS").ffn_modules),
        (0, 3)
    );
    assert_eq!(by("CLoRA(QV)").mode, AttachMode::QvUpdate);
    assert_eq!(by("CLoRAMF").regularizer, Regularizer::None);
    assert_eq!(by("CLoRA#").regularizer, Regularizer::None);
    assert_eq!(by("CLoRA*").regularizer, Regularizer::Sr);

    let head = vit.head_params();
    let clora = clora_core::lrm::AdapterConfig {
        d: 16,
        r: 2,
        m: 6,
        p: 2,
        variant: Variant::Clora,
    };
    assert_eq!(by("CLoRA").param_count, param_count(&clora, head).unwrap());
    let naive = clora_core::lrm::AdapterConfig {
        variant: Variant::NaiveSum,
        ..clora
    };
    assert_eq!(by("CLoRA#").param_count, param_count(&naive, head).unwrap());
    assert!(by("CLoRA*").regularizer_flops.total() > by("CLoRA").regularizer_flops.total());
    assert!(rows.iter().all(|r| r.val_accs.len() == 1));
}

#[test]
fn rsr_sum_of_fresh_adapters_is_zero() {
    let config = quick();
    let a = build_adapters(&config, &small_vit(2)).unwrap().unwrap();
    for j in 0..a.bank.m() {
        assert_eq!(rsr_term(&a.bank.experts(j).unwrap().unwrap()), 0.0);
    }
}
