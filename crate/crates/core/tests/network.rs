use ndarray::{array, Array2};
use noisylab_core::labels::ClassWeights;
use noisylab_core::losses::{CompositeConfig, Targets};
use noisylab_core::metrics::auc;
use noisylab_core::trainer::{
    adam_step, train, AdamConfig, Heads, Layout, ModelState, SplitData, TrainConfig, TrainingLog,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn layout() -> Layout {
    Layout {
        inputs: 4,
        hidden: 5,
        classes: 3,
        spatial: 0,
        segmentation: 0,
    }
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Dense layer `out x in` read from `params` at `*at`, advancing it.
fn dense(params: &[f64], at: &mut usize, input: &[f64], out: usize) -> Vec<f64> {
    let n_in = input.len();
    let w = &params[*at..*at + out * n_in];
    let b = &params[*at + out * n_in..*at + out * n_in + out];
    *at += out * n_in + out;
    (0..out)
        .map(|o| {
            let mut z = b[o];
            for k in 0..n_in {
                z += w[o * n_in + k] * input[k];
            }
            z
        })
        .collect()
}

#[test]
fn forward_matches_scalar_loops() {
    let l = layout();
    let model = ModelState::initialize(l, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Array2::from_shape_fn((7, l.inputs), |_| rng.random_range(-2.0..2.0));
    let got = model.predict(x.view(), Heads::default()).unwrap().abnormality;
    for i in 0..x.nrows() {
        let mut at = 0;
        let row: Vec<f64> = x.row(i).to_vec();
        let h1: Vec<f64> = dense(&model.params, &mut at, &row, l.hidden).into_iter().map(relu).collect();
        let h2: Vec<f64> = dense(&model.params, &mut at, &h1, l.hidden).into_iter().map(relu).collect();
        let out: Vec<f64> = dense(&model.params, &mut at, &h2, l.classes).into_iter().map(sigmoid).collect();
        for (n, want) in out.iter().enumerate() {
            assert!((got[[i, n]] - want).abs() <= 1e-12, "row {i} class {n}: {} vs {want}", got[[i, n]]);
        }
    }
}

#[test]
fn positive_scaling_of_the_output_layer_keeps_the_ranking() {
    let l = layout();
    let model = ModelState::initialize(l, 5).unwrap();
    let mut scaled = model.clone();
    let start = (l.hidden * l.inputs + l.hidden) + (l.hidden * l.hidden + l.hidden);
    let len = l.classes * l.hidden + l.classes;
    for p in &mut scaled.params[start..start + len] {
        *p *= 3.5;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Array2::from_shape_fn((20, l.inputs), |_| rng.random_range(-2.0..2.0));
    let a = model.predict(x.view(), Heads::default()).unwrap().abnormality;
    let b = scaled.predict(x.view(), Heads::default()).unwrap().abnormality;
    let argmax = |row: ndarray::ArrayView1<'_, f64>| {
        (0..row.len()).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap()
    };
    for i in 0..20 {
        assert_eq!(argmax(a.row(i)), argmax(b.row(i)));
    }
}

#[test]
fn duplicating_a_sample_doubles_the_gradient() {
    let l = layout();
    let model = ModelState::initialize(l, 7).unwrap();
    let one = array![[0.3, -1.2, 0.8, 0.1]];
    let two = array![[0.3, -1.2, 0.8, 0.1], [0.3, -1.2, 0.8, 0.1]];
    let targets = |f: usize| Targets {
        labels: Array2::from_shape_fn((f, 3), |(_, n)| u8::from(n == 1)),
        mask: Array2::from_elem((f, 3), true),
        spatial: None,
        segmentation: None,
    };
    let cfg = CompositeConfig::baseline(ClassWeights::from_counts(vec![3, 5, 2], vec![7, 5, 8]));
    let (v1, g1) = model.loss_and_gradient(one.view(), &targets(1), &cfg).unwrap();
    let (v2, g2) = model.loss_and_gradient(two.view(), &targets(2), &cfg).unwrap();
    assert!((v2 - 2.0 * v1).abs() <= 1e-12 * v1.abs());
    for (a, b) in g1.iter().zip(&g2) {
        assert!((b - 2.0 * a).abs() <= 1e-12 * a.abs().max(1e-12));
    }
}

#[test]
fn adam_matches_scalar_reference() {
    let l = layout();
    let mut model = ModelState::initialize(l, 9).unwrap();
    let cfg = AdamConfig::default();
    let lr = 0.01;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = model.params.len();
    let mut theta = model.params.clone();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    for t in 1..=10 {
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        adam_step(&mut model, &g, lr, &cfg).unwrap();
        for k in 0..n {
            m[k] = 0.9 * m[k] + 0.1 * g[k];
            v[k] = 0.999 * v[k] + 0.001 * g[k] * g[k];
            let m_hat = m[k] / (1.0 - 0.9f64.powi(t));
            let v_hat = v[k] / (1.0 - 0.999f64.powi(t));
            theta[k] -= lr * m_hat / (v_hat.sqrt() + 1e-8);
        }
    }
    assert_eq!(model.step_count, 10);
    for (a, b) in model.params.iter().zip(&theta) {
        assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
    }
}

fn separable(n: usize, seed: u64) -> SplitData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::zeros((n, 4));
    let mut y = Array2::zeros((n, 1));
    for i in 0..n {
        let pos = i % 2 == 0;
        x[[i, 0]] = if pos { rng.random_range(0.5..1.0) } else { rng.random_range(-1.0..-0.5) };
        for k in 1..4 {
            x[[i, k]] = rng.random_range(-1.0..1.0);
        }
        y[[i, 0]] = u8::from(pos);
    }
    SplitData {
        features: x,
        targets: Targets {
            mask: Array2::from_elem((n, 1), true),
            labels: y.clone(),
            spatial: None,
            segmentation: None,
        },
        clean_labels: Some(y),
    }
}

fn toy_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.01,
        batch_size: 32,
        max_epochs: 20,
        hidden: 8,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn separable_toy_is_learned_perfectly() {
    let (tr, va, te) = (separable(400, 1), separable(100, 2), separable(200, 3));
    let loss = CompositeConfig::baseline(ClassWeights::from_counts(vec![200], vec![200]));
    let mut log = TrainingLog::default();
    let model = train(&tr, &va, &loss, &toy_config(4), &["toy".into()], &mut log).unwrap();
    let p = model.predict(te.features.view(), Heads::default()).unwrap().abnormality;
    let scores: Vec<f64> = p.column(0).to_vec();
    let labels: Vec<u8> = te.targets.labels.column(0).to_vec();
    assert_eq!(auc(&scores, &labels).unwrap().auc, 1.0);
    assert!(log.best_epoch.is_some());
}

#[test]
fn same_seed_gives_identical_logs_and_parameters() {
    let (tr, va) = (separable(300, 5), separable(100, 6));
    let loss = CompositeConfig::baseline(ClassWeights::from_counts(vec![150], vec![150]));
    let run = || {
        let mut log = TrainingLog::default();
        let model = train(&tr, &va, &loss, &toy_config(11), &["toy".into()], &mut log).unwrap();
        let mut csv = Vec::new();
        log.write_csv(&mut csv).unwrap();
        let mut ckpt = Vec::new();
        model.write_checkpoint(&mut ckpt).unwrap();
        (csv, ckpt)
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let model = ModelState::initialize(layout(), 12).unwrap();
    let mut bytes = Vec::new();
    model.write_checkpoint(&mut bytes).unwrap();
    let back = ModelState::read_checkpoint(bytes.as_slice()).unwrap();
    assert_eq!(back, model);
    bytes.push(0);
    assert!(ModelState::read_checkpoint(bytes.as_slice()).is_err());
}
