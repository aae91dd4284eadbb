use synthmetric::encoder::{EncodedPair, EncoderConfig, HeadSpec, LossSelector, ModelParams, Target, TrainExample};
use synthmetric::signals::{SignalVector, TaskSet};

const H: f64 = 1e-4;
/// Denominator floor: below it the check is effectively absolute.
const FLOOR: f64 = 1e-6;

fn tiny() -> ModelParams {
    let cfg = EncoderConfig {
        vocab_size: 10,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 12,
        dropout: 0.0,
        init_seed: 11,
        init_std: 0.5,
    };
    ModelParams::init(cfg, HeadSpec::from_tasks(&TaskSet::standard())).unwrap()
}

fn example(m: &ModelParams) -> TrainExample {
    let sv = SignalVector {
        bleu: 0.3,
        rouge: [0.5, -0.2, 0.1],
        bertscore: [0.9, 0.7, -0.4],
        likelihood: [-0.5, 0.25, 1.5, -1.0],
        entail: [0.6, 0.1, 0.3],
        backtran_flag: [1.0, 0.0],
    };
    TrainExample {
        input: EncodedPair::new(vec![2, 5, 6, 7, 3, 8, 6, 9, 3], vec![0, 0, 0, 0, 0, 1, 1, 1, 1]).unwrap(),
        target: Target::Tasks(m.head_targets(&sv).unwrap()),
    }
}

fn max_rel_error(m: &ModelParams, batch: &[TrainExample], sel: &LossSelector) -> f64 {
    let (_, analytic) = m.loss_and_gradient(batch, sel, None).unwrap();
    let mut probe = m.clone();
    let mut worst: f64 = 0.0;
    for i in 0..m.n_params() {
        let x = m.data()[i];
        probe.data_mut()[i] = x + H;
        let up = probe.loss(batch, sel).unwrap();
        probe.data_mut()[i] = x - H;
        let down = probe.loss(batch, sel).unwrap();
        probe.data_mut()[i] = x;
        let numeric = (up - down) / (2.0 * H);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(FLOOR);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn gradients_match_central_differences_for_every_selector() {
    let m = tiny();
    let ex = example(&m);
    let rated = TrainExample {
        input: ex.input.clone(),
        target: Target::Rating(0.8),
    };
    let mut cases = vec![("supervised", vec![rated], LossSelector::Supervised)];
    for (k, h) in m.heads().iter().enumerate() {
        cases.push((h.name.as_str(), vec![ex.clone()], LossSelector::SingleTask(k)));
    }
    cases.push(("mixture", vec![ex.clone()], LossSelector::Pretrain(vec![1.0, 0.5, 2.0, 1.0, 0.3, 0.7, 1.0, 1.5, 0.8])));
    for (name, batch, sel) in cases {
        let err = max_rel_error(&m, &batch, &sel);
        assert!(err < 1e-4, "{name}: max relative error {err:e}");
    }
}

#[test]
fn gradient_is_independent_of_thread_count() {
    let m = tiny();
    let ex = example(&m);
    let batch: Vec<_> = (0..9).map(|_| ex.clone()).collect();
    let sel = LossSelector::Pretrain(vec![1.0; 9]);
    let a = m.loss_and_gradient(&batch, &sel, Some(3)).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = pool.install(|| m.loss_and_gradient(&batch, &sel, Some(3)).unwrap());
    assert_eq!(a, b);
}
