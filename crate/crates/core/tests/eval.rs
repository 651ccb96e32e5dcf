mod support;

use std::path::Path;

use tcv2_core::data::{make_patient_splits, synth_generate, SynthConfig, SynthTask, TaskSpec, TaskSplits};
use tcv2_core::eval::finetune::predictions_csv;
use tcv2_core::eval::predictions::{evaluate_predictions, parse_predictions};
use tcv2_core::eval::{attention_export, finetune_protocol, parse_attention_csv, AggInit, FinetuneConfig};
use tcv2_core::model::{EncoderConfig, ModelConfig, MultiTaskModel, Scope};
use tcv2_core::rng::stream;
use tcv2_core::tensor::DenseTensor;
use tcv2_core::train::Bag;

use support::{bag_with_labels, random_matrix, random_model};

#[test]
fn uniform_bag_gets_uniform_attention_in_every_head() {
    let mut rng = stream(61, &[]);
    let model = random_model(&mut rng, vec![TaskSpec::binary("t")], 3, 4);
    let row = vec![0.3, -1.2, 0.7];
    let bag = bag_with_labels(DenseTensor::from_rows(&vec![row; 7]).unwrap(), &[("t", 1)]);
    let export = attention_export(&model, &bag, "t").unwrap();
    for h in 0..export.map.heads() {
        assert!(export.map.head(h).iter().all(|&w| (w - 1.0 / 7.0).abs() < 1e-15));
    }
}

#[test]
fn attention_csv_parses_back_exactly() {
    let mut rng = stream(62, &[]);
    let model = random_model(&mut rng, vec![TaskSpec::binary("t")], 3, 4);
    let mut bag = bag_with_labels(random_matrix(&mut rng, 9, 3, 2.0), &[("t", 0)]);
    bag.instance_index = (0..9).map(|k| 3 * k + 1).collect();
    bag.coords = Some((0..9).map(|k| (256 * (k % 3), 256 * (k / 3))).collect());
    let export = attention_export(&model, &bag, "t").unwrap();
    let back = parse_attention_csv(&export.to_csv()).unwrap();
    assert_eq!(back.instance_ids, bag.instance_index);
    assert!(back.weights.bit_eq(&export.map.weights));
    let pgm = export.to_pgm().unwrap();
    assert!(pgm.starts_with("P2\n3 3\n255\n"));
}

#[test]
fn finetuning_is_deterministic_and_leaves_encoder_frozen() {
    let cfg = SynthConfig {
        n_slides: 40,
        instances_per_slide: 20,
        d_in: 6,
        ..SynthConfig::default()
    };
    let pre_cohort = synth_generate(&cfg).unwrap();
    let pretrained = MultiTaskModel::new(ModelConfig::new(EncoderConfig::new(6, 6)), pre_cohort.cohort.registry.clone(), 3).unwrap();
    let down = synth_generate(&SynthConfig {
        seed: 77,
        concept_seed: Some(cfg.seed),
        tasks: vec![SynthTask::binary("down", 0)],
        ..cfg.clone()
    })
    .unwrap();
    let m = down.manifest(Path::new("."));
    let splits = TaskSplits::from_global(&make_patient_splits(&m, (0.6, 0.2, 0.2), 1).unwrap().assignment, &m);
    let task = down.cohort.registry.tasks()[0].clone();
    let mut fc = FinetuneConfig {
        repeats: 2,
        init: AggInit::RandomAgg,
        ..FinetuneConfig::default()
    };
    fc.base.epochs = 2;
    fc.base.bag_min = 8;
    fc.base.bag_max = 16;
    fc.base.val_bag = 16;

    let before = pretrained.digest(Scope::Encoder);
    let a = finetune_protocol(&pretrained, &down.cohort, &splits, &task, &fc).unwrap();
    let b = finetune_protocol(&pretrained, &down.cohort, &splits, &task, &fc).unwrap();
    assert_eq!(pretrained.digest(Scope::Encoder), before);
    assert!(a.repeats.iter().all(|r| r.encoder_digest == before));
    assert_eq!(a.repeats.iter().map(|r| r.repeat).collect::<Vec<_>>(), vec![0, 1]);
    for (x, y) in a.repeats.iter().zip(&b.repeats) {
        assert!(x.log.bit_eq(&y.log));
        assert_eq!(x.predictions, y.predictions);
    }
    assert_eq!(a.report.to_string(), b.report.to_string());

    let r = &a.repeats[0];
    let parsed = parse_predictions(&predictions_csv("down", &r.predictions)).unwrap();
    let metrics = &evaluate_predictions(&parsed, None).unwrap()["down"];
    assert_eq!(metrics.auc, Some(r.auc));
    assert_eq!(metrics.balanced_accuracy, r.balanced_accuracy);

    fc.repeats = 1;
    let single = finetune_protocol(&pretrained, &down.cohort, &splits, &task, &fc).unwrap();
    assert!(single.report.metrics.iter().all(|m| m.std == 0.0));
}

#[test]
fn attention_export_uses_the_bag_of_the_slide() {
    let synth = synth_generate(&SynthConfig {
        n_slides: 6,
        instances_per_slide: 5,
        d_in: 4,
        ..SynthConfig::default()
    })
    .unwrap();
    let model = MultiTaskModel::new(ModelConfig::new(EncoderConfig::new(4, 4)), synth.cohort.registry.clone(), 1).unwrap();
    let bag = Bag::from_slide(&synth.cohort.slides[0]);
    let export = attention_export(&model, &bag, "task1").unwrap();
    assert_eq!(export.map.len(), 5);
    assert_eq!(export.coords, synth.cohort.slides[0].coords);
    assert!((export.map.mean_over_heads().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}
