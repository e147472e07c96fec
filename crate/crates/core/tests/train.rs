use neko_core::corpus::{
    build_mixture, ChannelKind, MixtureDataset, NoiseChannel, SentencePool, TaskSource, Tokenizer, DEFAULT_ALPHABET,
};
use neko_core::model::{ModelConfig, TransformerParams};
use neko_core::tasks::{TaskId, TaskRegistry};
use neko_core::tensor::{clip_global_norm, global_grad_norm, zero_grads, Tensor};
use neko_core::train::{
    batch_gradients, lr_at, LossOptions, metrics_csv_header, nll_loss, Checkpoint, EncodedSample, StepMetrics, TrainConfig,
    TrainState, Trainer,
};
use neko_core::NekoError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TASKS: [&str; 3] = ["asr", "ocr", "typo"];

fn registry() -> TaskRegistry {
    TaskRegistry::new(&TASKS).unwrap()
}

fn tiny_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        n_experts: 4,
        top_k: 2,
        max_seq_len: 256,
        ..ModelConfig::default()
    }
}

fn mixture(samples_per_task: usize, seed: u64) -> MixtureDataset {
    let reg = registry();
    let sources: Vec<TaskSource> = reg
        .tasks()
        .iter()
        .zip([ChannelKind::Asr, ChannelKind::Ocr, ChannelKind::Typo])
        .map(|(t, k)| TaskSource {
            task: t.clone(),
            channel: NoiseChannel::new(k, 0.15).unwrap(),
        })
        .collect();
    let pool = SentencePool::generated(200, seed).unwrap();
    build_mixture(&sources, &pool, samples_per_task, 2, seed, 1).unwrap()
}

fn train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        epochs: 2,
        batch_size_tokens: 400,
        seed,
        ..TrainConfig::default()
    }
}

fn trainer(data: MixtureDataset, train: TrainConfig, init_seed: u64) -> Trainer<f64> {
    let vocab = Tokenizer::new(DEFAULT_ALPHABET, &TASKS).unwrap().vocab_size();
    let params = TransformerParams::<f64>::init(&tiny_config(vocab), init_seed).unwrap();
    let state = TrainState::fresh(params, registry(), 7, train, DEFAULT_ALPHABET, 2).unwrap();
    Trainer::new(state, data, 1).unwrap()
}

fn random_sample(rng: &mut ChaCha8Rng, task: &TaskId, vocab: usize, len: usize) -> EncodedSample {
    EncodedSample {
        index: 0,
        task: task.clone(),
        tokens: (0..len).map(|_| rng.gen_range(0..vocab)).collect(),
        loss_mask: vec![true; len],
    }
}

fn loss_of(params: &TransformerParams<f64>, samples: &[&EncodedSample], state: &TrainState<f64>) -> f64 {
    nll_loss(params, samples, &state.map).unwrap().data()[0]
}

#[test]
fn untrained_model_loss_is_log_vocab() {
    let reg = registry();
    let params = TransformerParams::<f64>::init(&tiny_config(64), 1).unwrap();
    let map = neko_core::tasks::build_expert_map(reg.tasks(), 4, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let samples: Vec<EncodedSample> = (0..6)
        .map(|i| random_sample(&mut rng, &reg.tasks()[i % 3], 64, 50))
        .collect();
    let refs: Vec<&EncodedSample> = samples.iter().collect();
    let loss = nll_loss(&params, &refs, &map).unwrap().data()[0];
    assert!((loss - 64f64.ln()).abs() < 0.05, "{loss}");
}

#[test]
fn batch_of_identical_samples_matches_single() {
    let reg = registry();
    let params = TransformerParams::<f64>::init(&tiny_config(64), 4).unwrap();
    let map = neko_core::tasks::build_expert_map(reg.tasks(), 4, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut s = random_sample(&mut rng, &reg.tasks()[1], 64, 30);
    for m in &mut s.loss_mask[..12] {
        *m = false;
    }
    let one = nll_loss(&params, &[&s], &map).unwrap().data()[0];
    let four = nll_loss(&params, &[&s, &s, &s, &s], &map).unwrap().data()[0];
    assert!((one - four).abs() < 1e-6);
}

#[test]
fn one_hot_output_gives_near_zero_loss() {
    let config = tiny_config(64);
    let mut params = TransformerParams::<f64>::init(&config, 5).unwrap();
    let target = 9;
    let layout = params.layout.clone();
    // Residual stream carries only the embedding of `target`, whose tied
    // output row then dominates every other logit.
    let mut embed = vec![0.0; 64 * config.d_model];
    embed[target * config.d_model..(target + 1) * config.d_model].fill(2.0);
    params.tensors[layout.embed.0] = Tensor::new(vec![64, config.d_model], embed).unwrap();
    for layer in &layout.layers {
        let wo = &mut params.tensors[layer.wo.0];
        *wo = Tensor::zeros(wo.shape().to_vec());
        for e in &layer.experts {
            let down = &mut params.tensors[e.down.0];
            *down = Tensor::zeros(down.shape().to_vec());
        }
    }
    let reg = registry();
    let map = neko_core::tasks::build_expert_map(reg.tasks(), 4, 0).unwrap();
    let s = EncodedSample {
        index: 0,
        task: reg.tasks()[0].clone(),
        tokens: vec![target; 20],
        loss_mask: vec![true; 20],
    };
    let loss = nll_loss(&params, &[&s], &map).unwrap().data()[0];
    assert!(loss >= 0.0 && loss < 1e-6, "{loss}");
}

#[test]
fn empty_effective_batch_errors() {
    let reg = registry();
    let params = TransformerParams::<f64>::init(&tiny_config(64), 4).unwrap();
    let map = neko_core::tasks::build_expert_map(reg.tasks(), 4, 0).unwrap();
    assert!(nll_loss(&params, &[], &map).is_err());
    let s = EncodedSample {
        index: 0,
        task: reg.tasks()[0].clone(),
        tokens: vec![1, 2, 3],
        loss_mask: vec![false; 3],
    };
    assert!(nll_loss(&params, &[&s], &map).is_err());
}

#[test]
fn one_step_decreases_batch_loss_for_most_seeds() {
    let data = mixture(4, 11);
    let mut passed = 0;
    for seed in 0..20 {
        let mut tr = trainer(data.clone(), train_config(seed), seed);
        let batch: Vec<usize> = (0..4).collect();
        let before = {
            let refs: Vec<&EncodedSample> = batch.iter().map(|&i| &tr.samples()[i]).collect();
            loss_of(&tr.state.params, &refs, &tr.state)
        };
        tr.step(&batch, 1e-4).unwrap();
        let refs: Vec<&EncodedSample> = batch.iter().map(|&i| &tr.samples()[i]).collect();
        let after = loss_of(&tr.state.params, &refs, &tr.state);
        if after < before {
            passed += 1;
        }
    }
    assert!(passed >= 19, "{passed}/20");
}

fn trajectory(tr: &mut Trainer<f64>, max_steps: Option<usize>) -> Vec<StepMetrics> {
    let mut log = Vec::new();
    tr.run(max_steps, |m| {
        log.push(m.clone());
        true
    })
    .unwrap();
    log
}

#[test]
fn same_seed_gives_bitwise_identical_trajectory() {
    let data = mixture(6, 3);
    let mut a = trainer(data.clone(), train_config(1), 2);
    let mut b = trainer(data, train_config(1), 2);
    let la = trajectory(&mut a, None);
    let lb = trajectory(&mut b, None);
    assert!(la.len() > 2);
    let bits = |l: &[StepMetrics]| l.iter().map(|m| (m.loss.to_bits(), m.grad_norm.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&la), bits(&lb));
    assert_eq!(a.state.params, b.state.params);
}

#[test]
fn resume_from_checkpoint_reproduces_uninterrupted_run() {
    let data = mixture(6, 4);
    let mut full = trainer(data.clone(), train_config(5), 6);
    let full_log = trajectory(&mut full, None);
    let total = full_log.len();
    assert!(total >= 4);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let mut first = trainer(data.clone(), train_config(5), 6);
    let mut log = trajectory(&mut first, Some(total / 2));
    first.state.to_checkpoint().save(&path).unwrap();
    drop(first);

    let state = TrainState::from_checkpoint(Checkpoint::<f64>::load(&path).unwrap());
    let mut resumed = Trainer::new(state, data, 1).unwrap();
    log.extend(trajectory(&mut resumed, None));
    assert_eq!(log, full_log);
    assert_eq!(resumed.state.params, full.state.params);
    assert_eq!(resumed.state.opt, full.state.opt);
}

#[test]
fn resume_with_different_data_is_rejected() {
    let mut tr = trainer(mixture(6, 4), train_config(5), 6);
    trajectory(&mut tr, Some(1));
    let state = tr.state.clone();
    assert!(Trainer::new(state, mixture(6, 9), 1).is_err());
}

#[test]
fn overfitting_two_samples_never_increases_loss() {
    let data = MixtureDataset {
        samples: mixture(1, 8).samples.into_iter().take(2).collect(),
    };
    let mut tr = trainer(data, train_config(0), 3);
    let batch = [0, 1];
    let mut losses = Vec::new();
    for _ in 0..50 {
        losses.push(tr.step(&batch, 1e-3).unwrap().loss);
    }
    for w in losses.windows(2) {
        assert!(w[1] <= w[0], "{losses:?}");
    }
    assert!(losses[49] < losses[0] - 0.5);
}

#[test]
fn clipped_norm_respects_threshold() {
    let data = mixture(4, 2);
    let mut tr = trainer(data, train_config(0), 1);
    let refs: Vec<&EncodedSample> = tr.samples().iter().collect();
    let refs: Vec<EncodedSample> = refs.into_iter().cloned().collect();
    let refs: Vec<&EncodedSample> = refs.iter().collect();
    let map = tr.state.map.clone();
    for clip in [1e-3, 0.05, 0.3] {
        let params = &mut tr.state.params;
        zero_grads(&mut params.tensors);
        batch_gradients(params, &refs, &map, LossOptions::default(), 1).unwrap();
        let before = global_grad_norm(&params.tensors);
        assert!(before > clip);
        clip_global_norm(&mut params.tensors, clip).unwrap();
        assert!(global_grad_norm(&params.tensors) <= clip + 1e-6);
    }
}

#[test]
fn run_logs_forced_routing_and_schedule() {
    let data = mixture(6, 5);
    let mut tr = trainer(data, train_config(2), 0);
    let log = trajectory(&mut tr, None);
    let total = tr.state.total_steps;
    assert_eq!(log.len(), total);
    for m in &log {
        assert_eq!(m.forced_fraction, 1.0);
        assert_eq!(m.lr, lr_at(m.step, total, &tr.state.train));
        assert!(m.loss.is_finite() && m.grad_norm.is_finite());
        assert!((m.expert_load.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(m.tokens > 0 && m.tokens <= tr.state.train.batch_size_tokens);
    }
    assert_eq!(tr.state.step, total);
    assert!(trajectory(&mut tr, None).is_empty());
}

#[test]
fn batch_gradients_agree_with_single_graph_loss_and_across_threads() {
    let data = mixture(3, 6);
    let tr = trainer(data, train_config(0), 2);
    let samples: Vec<&EncodedSample> = tr.samples().iter().collect();
    let reference = nll_loss(&tr.state.params, &samples, &tr.state.map).unwrap().data()[0];
    let mut grads = Vec::new();
    for threads in [1, 3] {
        let mut params = tr.state.params.clone();
        zero_grads(&mut params.tensors);
        let stats = batch_gradients(&mut params, &samples, &tr.state.map, LossOptions::default(), threads).unwrap();
        assert!((stats.nll - reference).abs() < 1e-12);
        assert_eq!(stats.forced, stats.routings);
        grads.push(params.tensors);
    }
    for (a, b) in grads[0].iter().zip(&grads[1]) {
        for (x, y) in a.grad().unwrap().iter().zip(b.grad().unwrap()) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }
}

#[test]
fn non_finite_step_aborts_with_batch_dump() {
    let data = mixture(2, 1);
    let mut tr = trainer(data, train_config(0), 0);
    let dir = tempfile::tempdir().unwrap();
    tr.set_dump_dir(dir.path().to_path_buf());
    let embed = tr.state.params.layout.embed.0;
    tr.state.params.tensors[embed].data_mut()[0] = f64::NAN;
    let before = tr.state.params.clone();
    let batch: Vec<usize> = (0..tr.samples().len()).collect();
    match tr.step(&batch, 1e-3) {
        Err(NekoError::Numerical(msg)) => assert!(msg.contains("nan_batch_step1.jsonl"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let dumped = MixtureDataset::read(&dir.path().join("nan_batch_step1.jsonl")).unwrap();
    assert_eq!(dumped.len(), batch.len());
    assert_eq!(tr.state.step, 0);
    assert_eq!(tr.state.params.tensors[1].data(), before.tensors[1].data());
}

#[test]
fn metrics_csv_columns() {
    assert_eq!(
        metrics_csv_header(3),
        "step,loss,lr,grad_norm,tokens,expert_load_0,expert_load_1,expert_load_2"
    );
    let m = StepMetrics {
        step: 4,
        loss: 1.5,
        lr: 0.001,
        grad_norm: 0.25,
        tokens: 100,
        expert_load: vec![0.5, 0.25, 0.25],
        forced_fraction: 1.0,
    };
    assert_eq!(m.csv_row(), "4,1.5,0.001,0.25,100,0.5,0.25,0.25");
}

#[test]
fn ablation_trains_with_plain_top_k() {
    let train = TrainConfig {
        task_routing: false,
        ..train_config(2)
    };
    let mut tr = trainer(mixture(4, 5), train, 0);
    let log = trajectory(&mut tr, None);
    assert!(!log.is_empty());
    assert!(log.iter().all(|m| m.forced_fraction == 0.0 && m.loss.is_finite()));
}
