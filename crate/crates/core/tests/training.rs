use mpscope::gram::analyze_layers;
use mpscope::io::{read_metrics, read_tensors, Dtype, MetricsRow};
use mpscope::train::{checkpoint_path, run_training, synth_corpus, TrainConfig};
use mpscope::{Error, Variant};

fn quick(variant: Variant) -> TrainConfig {
    TrainConfig {
        steps: 100,
        log_every: 50,
        corpus_len: 4000,
        eval_len: 256,
        ..TrainConfig::toy(variant)
    }
}

#[test]
fn logs_step_zero_and_every_interval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(Variant::MlaPre);
    let summary = run_training(&cfg, dir.path()).unwrap();
    assert_eq!(summary.logged_steps, vec![0, 50, 100]);
    for step in [0, 50, 100] {
        assert!(checkpoint_path(dir.path(), step).exists());
    }
    let rows = read_metrics(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 3 * cfg.n_layers);
    assert_eq!(rows, summary.rows);
    assert!(rows.iter().all(|r| r.attention_entropy_bits.is_some()));
    assert_eq!(summary.train_losses.len(), 100);
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(run["config"]["model"]["variant"], "mla-pre");
}

#[test]
fn reruns_are_byte_identical() {
    let cfg = quick(Variant::MlaDec);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let sa = run_training(&cfg, a.path()).unwrap();
    let sb = run_training(&cfg, b.path()).unwrap();
    assert_eq!(sa.train_losses, sb.train_losses);
    for name in ["metrics.csv", "loss.csv", "ckpt_100.nt"] {
        assert_eq!(
            std::fs::read(a.path().join(name)).unwrap(),
            std::fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn offline_reanalysis_reproduces_logged_rows() {
    for v in Variant::ALL {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            checkpoint_dtype: Dtype::F64,
            ..quick(v)
        };
        let summary = run_training(&cfg, dir.path()).unwrap();
        for &step in &summary.logged_steps {
            let store = read_tensors(checkpoint_path(dir.path(), step)).unwrap();
            let offline: Vec<_> = analyze_layers(&store, &cfg.model, cfg.eigen_mode)
                .unwrap()
                .iter()
                .map(|a| MetricsRow::new(step, &a.spec, &a.metrics, None))
                .collect();
            let logged: Vec<_> = summary
                .rows
                .iter()
                .filter(|r| r.step == step)
                .map(|r| MetricsRow {
                    attention_entropy_bits: None,
                    ..r.clone()
                })
                .collect();
            assert_eq!(offline, logged, "{v} step {step}");
        }
    }
}

#[test]
fn divergence_aborts_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e200,
        steps: 20,
        log_every: 20,
        ..quick(Variant::Mha)
    };
    match run_training(&cfg, dir.path()) {
        Err(Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. } | Error::NonFiniteLogit { .. }) => {}
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn corpus_follows_its_transition_law() {
    let (vocab, sharpness) = (16, 0.7);
    let tokens = synth_corpus(11, vocab, 200_000, sharpness).unwrap();
    // Recover the permutation as the most frequent successor of each token.
    let mut counts = vec![vec![0usize; vocab]; vocab];
    for w in tokens.windows(2) {
        counts[w[0] as usize][w[1] as usize] += 1;
    }
    let mut hits = 0;
    for row in &counts {
        let best = row.iter().max().unwrap();
        hits += best;
    }
    let expected = sharpness + (1.0 - sharpness) / vocab as f64;
    let observed = hits as f64 / (tokens.len() - 1) as f64;
    assert!((observed - expected).abs() < 0.01, "{observed} vs {expected}");
    let mut targets: Vec<usize> = counts
        .iter()
        .map(|row| row.iter().enumerate().max_by_key(|(_, c)| **c).unwrap().0)
        .collect();
    targets.sort();
    targets.dedup();
    assert_eq!(targets.len(), vocab, "successor map is a permutation");
}

#[test]
fn bad_output_dir_is_reported_with_path() {
    let file = tempfile::NamedTempFile::new().unwrap();
    let err = run_training(&quick(Variant::Mha), &file.path().join("sub")).unwrap_err();
    assert!(err.to_string().contains(&file.path().display().to_string()), "{err}");
}
