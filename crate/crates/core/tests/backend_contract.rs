//! The same contract checks against the in-process mock and against the mock
//! served over the worker protocol.

use qagen::backend::{
    split_mask_output, DecodeConfig, MockBackend, MockConfig, OptimizerConfig, ProcessBackend, PromptInput, Schedule,
    Seq2SeqBackend, TrainExample,
};
use qagen::chunking::TokenizerView;
use qagen::template::{parse_template, realize, soft_prompt_spec, Bindings, QGEN_TEMPLATE};
use qagen::training::masked_example;

fn served() -> ProcessBackend {
    ProcessBackend::spawn(&[env!("CARGO_BIN_EXE_qagen").to_string(), "serve-backend".to_string()]).unwrap()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(1.0)
}

fn prompt(backend: &dyn Seq2SeqBackend) -> PromptInput {
    let t = parse_template(QGEN_TEMPLATE).unwrap();
    let b = Bindings::new()
        .context("Mount Everest rises 8849 metres above sea level in Nepal.")
        .answer("Nepal");
    realize(&t, &b, backend.mask_token()).unwrap().into()
}

fn example(backend: &dyn Seq2SeqBackend) -> TrainExample {
    let t = parse_template(QGEN_TEMPLATE).unwrap();
    let b = Bindings::new()
        .context("Mount Everest rises 8849 metres above sea level in Nepal.")
        .answer("Nepal");
    masked_example(backend, &t, &b, "Where is Mount Everest?").unwrap()
}

fn optimizer() -> OptimizerConfig {
    OptimizerConfig {
        learning_rate: 0.2,
        schedule: Schedule::Linear,
        steps: 4,
        batch_size: 1,
        dropout: 0.1,
        optimizer: Default::default(),
    }
}

/// Everything observable through the trait, in a fixed order.
fn exercise(backend: &mut dyn Seq2SeqBackend, dir: &std::path::Path) -> Vec<String> {
    let mut log = Vec::new();
    let p = prompt(backend);
    log.push(format!("{:?}", backend.markers()));
    log.push(format!("{}", backend.embedding_dim()));
    log.push(format!("{:?}", backend.tokenize_with_offsets(&p.text)));

    let spec = soft_prompt_spec(&parse_template(QGEN_TEMPLATE).unwrap(), backend, backend.embedding_dim());
    backend.enable_soft_prompt(&spec).unwrap();

    let decode = DecodeConfig::default().with_seed(9);
    let first = backend.decode(&p, &decode).unwrap();
    assert_eq!(first, backend.decode(&p, &decode).unwrap(), "decoding is not deterministic");
    let question = split_mask_output(&first, backend.markers()).remove(&0).unwrap_or_default();
    assert!(!question.is_empty(), "no question in {first:?}");
    log.push(first);

    let ex = example(backend);
    let before = backend.loss(std::slice::from_ref(&ex)).unwrap();
    let mut losses = Vec::new();
    for step in 0..4 {
        let m = backend.train_step(std::slice::from_ref(&ex), &optimizer(), step).unwrap();
        assert_eq!(m.step, step);
        assert_eq!(m.active_tokens, ex.loss_mask.iter().filter(|b| **b).count());
        losses.push(m.loss);
    }
    assert!(close(losses[0], before), "train_step must report the pre-update loss");
    let after = backend.loss(std::slice::from_ref(&ex)).unwrap();
    assert!(after < before, "training did not lower the loss: {before} -> {after}");

    let targets = vec![ex.target.clone(), ex.target.replace("Where", "Why")];
    let scores = backend.score(&ex.input, &targets).unwrap();
    assert!(scores[0] > scores[1]);

    backend.save(dir).unwrap();
    let trained = backend.decode(&p, &decode).unwrap();
    backend.load(dir).unwrap();
    assert!(close(backend.loss(std::slice::from_ref(&ex)).unwrap(), after), "checkpoint did not round-trip");
    assert_eq!(backend.decode(&p, &decode).unwrap(), trained);
    log.push(trained);
    log.extend(losses.iter().chain(&scores).map(|x| format!("{x:.9}")));
    log
}

#[test]
fn mock_and_served_mock_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let mut mock = MockBackend::new(MockConfig::default()).unwrap();
    let mut remote = served();
    let a = exercise(&mut mock, &tmp.path().join("local"));
    let b = exercise(&mut remote, &tmp.path().join("remote"));
    assert_eq!(a, b);
}

#[test]
fn worker_errors_are_reported_not_fatal() {
    let remote = served();
    let bad = TrainExample {
        loss_mask: vec![true],
        ..example(&remote)
    };
    let err = remote.loss(&[bad]).unwrap_err();
    assert!(err.to_string().contains("loss mask"), "{err}");
    // The worker is still alive.
    assert!(!remote.tokenize_with_offsets("still here").is_empty());
}

#[test]
fn dead_worker_is_an_error() {
    let err = ProcessBackend::spawn(&["true".to_string()]).err().expect("spawn should fail");
    assert!(err.to_string().contains("worker exited"), "{err}");
    assert!(ProcessBackend::spawn(&[]).is_err());
}

#[test]
fn decode_is_reentrant_across_threads() {
    let mock = MockBackend::new(MockConfig::default()).unwrap();
    let p = prompt(&mock);
    let expected = mock.decode(&p, &DecodeConfig::default()).unwrap();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..4)
            .map(|_| s.spawn(|| mock.decode(&p, &DecodeConfig::default()).unwrap()))
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), expected);
        }
    });
}
