use spikedrive::train::{
    evaluate, synth_dataset, Dataset, DatasetKind, Geometry, LrSchedule, TrainConfig, Trainer,
};
use spikedrive::{build_model, ModelConfig};
use tempfile::tempdir;

const GEOM: Geometry = Geometry { channels: 3, height: 16, width: 16 };

fn config(classes: usize) -> ModelConfig {
    ModelConfig { height: 16, width: 16, ..ModelConfig::small(1, 16, classes) }
}

fn train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        learning_rate: 0.05,
        lr_schedule: LrSchedule::Cosine,
        seed: 7,
        ..TrainConfig::default()
    }
}

fn stripes(n: usize) -> Dataset {
    synth_dataset(DatasetKind::Stripes, n, GEOM, 3).unwrap()
}

fn weights(t: &Trainer) -> Vec<Vec<u64>> {
    t.model.store().tensors().iter().map(|t| t.value.iter().map(|v| v.to_bits()).collect()).collect()
}

#[test]
fn fixed_seed_runs_are_bit_identical() {
    let data = stripes(6);
    let run = || {
        let mut t = Trainer::new(build_model(&config(4), 1).unwrap(), train_config(2)).unwrap();
        let mut log = Vec::new();
        for _ in 0..2 {
            t.train_epoch(&data, Some(&mut log)).unwrap();
        }
        (weights(&t), log)
    };
    let (a, log_a) = run();
    let (b, log_b) = run();
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
}

#[test]
fn resume_continues_the_same_trajectory() {
    let data = stripes(6);
    let dir = tempdir().unwrap();
    let path = dir.path().join("ckpt.sdtf");

    let mut straight = Trainer::new(build_model(&config(4), 2).unwrap(), train_config(3)).unwrap();
    let mut straight_log = Vec::new();
    for _ in 0..3 {
        straight.train_epoch(&data, Some(&mut straight_log)).unwrap();
    }

    let mut first = Trainer::new(build_model(&config(4), 2).unwrap(), train_config(3)).unwrap();
    let mut log = Vec::new();
    first.train_epoch(&data, Some(&mut log)).unwrap();
    first.save(&path).unwrap();
    drop(first);
    let mut resumed = Trainer::resume(&path, train_config(3)).unwrap();
    assert_eq!(resumed.epoch(), 1);
    for _ in 1..3 {
        resumed.train_epoch(&data, Some(&mut log)).unwrap();
    }
    assert_eq!(resumed.step(), straight.step());
    assert_eq!(weights(&resumed), weights(&straight));
    assert_eq!(String::from_utf8(log).unwrap(), String::from_utf8(straight_log).unwrap());
}

#[test]
fn loss_falls_over_two_hundred_steps() {
    let data = stripes(50);
    let cfg = TrainConfig { lr_schedule: LrSchedule::Constant, ..train_config(8) };
    let mut t = Trainer::new(build_model(&config(4), 4).unwrap(), cfg).unwrap();
    let mut losses = Vec::new();
    let mut epoch = 0;
    while losses.len() < 200 {
        let order = t.epoch_order(data.len(), epoch);
        for chunk in order.chunks(8) {
            if losses.len() == 200 {
                break;
            }
            let (x, y) = data.batch(chunk);
            losses.push(t.train_step(x.view(), &y, 0.05).unwrap().loss);
        }
        epoch += 1;
    }
    let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = losses[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < head, "leading {head}, trailing {tail}");
    assert!(t.dead_attention_blocks().is_empty(), "attention never received gradient");
}

fn nearest_neighbour_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let flat = |d: &Dataset, i: usize| d.images.index_axis(ndarray::Axis(0), i).iter().copied().collect::<Vec<f64>>();
    let train_rows: Vec<Vec<f64>> = (0..train.len()).map(|i| flat(train, i)).collect();
    let mut hits = 0;
    for i in 0..test.len() {
        let x = flat(test, i);
        let best = train_rows
            .iter()
            .enumerate()
            .map(|(j, r)| (j, r.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        hits += usize::from(train.labels[best] == test.labels[i]);
    }
    hits as f64 / test.len() as f64
}

#[test]
fn pixel_nearest_neighbour_beats_chance() {
    for kind in [DatasetKind::Stripes, DatasetKind::Blobs, DatasetKind::XorPatch] {
        let train = synth_dataset(kind, 40, GEOM, 1).unwrap();
        let test = synth_dataset(kind, 40, GEOM, 2).unwrap();
        let chance = 1.0 / kind.num_classes() as f64;
        let acc = nearest_neighbour_accuracy(&train, &test);
        assert!(acc > chance, "{}: 1-NN {acc} vs chance {chance}", kind.name());
    }
}

#[test]
fn random_model_is_near_chance() {
    // Balanced 4-class set of 400 per model: chance 0.25 within 3 binomial sigma.
    // Pooled over five seeds, so sigma shrinks with the 2000 predictions.
    let data = stripes(100);
    let accs: Vec<f64> = (0..5).map(|s| evaluate(&build_model(&config(4), 100 + s).unwrap(), &data).unwrap()).collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let sigma = (0.25f64 * 0.75 / (400.0 * accs.len() as f64)).sqrt();
    assert!((mean - 0.25).abs() <= 3.0 * sigma, "accuracies {accs:?}");
}

#[test]
fn single_correct_sample_scores_one() {
    let data = stripes(1);
    let model = build_model(&config(4), 0).unwrap();
    let t = model.config().timesteps;
    let (x, _) = data.batch(&[0]);
    let fwd = model
        .forward(spikedrive::model::repeat_over_time(x.view(), t).view(), spikedrive::model::PassOptions::inference(), None)
        .unwrap();
    let predicted = spikedrive::train::argmax_rows(fwd.logits.view())[0];
    let one = Dataset::new(x, vec![predicted], 4).unwrap();
    assert_eq!(evaluate(&model, &one).unwrap(), 1.0);
}
