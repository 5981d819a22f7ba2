mod common;

use std::fs;

use tailshare::model::{AblationFlags, Model};
use tailshare::pipeline::Prepared;
use tailshare::synth::ACTIVITY_DIM;
use tailshare::trainer::{validation_split, TrainConfig, Trainer};
use tailshare::Error;

fn trainer<'a>(p: &'a Prepared, cfg: &TrainConfig, seed: u64) -> Trainer<'a> {
    let train = p.data.train_events();
    let (fit, valid) = validation_split(&train, p.data.split_time, cfg.validation_days).unwrap();
    Trainer::new(&p.corpus, fit, valid, cfg, seed).unwrap()
}

fn param_bits(m: &Model) -> Vec<(String, Vec<u64>)> {
    m.store
        .iter()
        .map(|p| (p.name.clone(), p.value.data.iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn logged_total_is_the_sum_of_its_terms() {
    let (cfg, p) = common::small(11);
    let mut t = trainer(&p, &cfg.train, 5);
    t.begin_epoch().unwrap();
    let mut steps = 0;
    let mut pairs = 0;
    while let Some(terms) = t.step().unwrap() {
        let sum = terms.main + terms.transfer + cfg.train.lambda_ortho * terms.ortho;
        assert!((terms.total - sum).abs() <= 1e-12, "{terms:?}");
        steps += 1;
        pairs += terms.pairs;
    }
    assert!(steps > 10);
    assert!(pairs > 0, "the pair guarantee should yield transfer pairs");
}

#[test]
fn checkpoint_resume_matches_uninterrupted_run_bitwise() {
    let (cfg, p) = common::small(12);
    let dir = tempfile::tempdir().unwrap();

    let mut a = trainer(&p, &cfg.train, 9);
    a.begin_epoch().unwrap();
    a.step().unwrap().unwrap();
    a.save(dir.path()).unwrap();

    let train = p.data.train_events();
    let (fit, valid) = validation_split(&train, p.data.split_time, 1).unwrap();
    let mut b = Trainer::load(&p.corpus, fit, valid, &cfg.train, 9, dir.path()).unwrap();
    b.step().unwrap().unwrap();

    let mut c = trainer(&p, &cfg.train, 9);
    c.begin_epoch().unwrap();
    c.step().unwrap().unwrap();
    c.step().unwrap().unwrap();

    assert_eq!(param_bits(&b.model), param_bits(&c.model));
    assert_eq!(b.adam().step, c.adam().step);

    // A whole resumed run ends where the uninterrupted one does.
    b.fit().unwrap();
    c.fit().unwrap();
    assert_eq!(param_bits(&b.model), param_bits(&c.model));
    assert_eq!(b.metrics_lines(), c.metrics_lines());
}

#[test]
fn checkpoints_refuse_other_configs_and_damaged_files() {
    let (cfg, p) = common::small(13);
    let dir = tempfile::tempdir().unwrap();
    let t = trainer(&p, &cfg.train, 3);
    t.save(dir.path()).unwrap();
    let train = p.data.train_events();
    let (fit, valid) = validation_split(&train, p.data.split_time, 1).unwrap();

    let other = TrainConfig { lr: 0.5, ..cfg.train.clone() };
    let err = Trainer::load(&p.corpus, fit.clone(), valid.clone(), &other, 3, dir.path()).err().unwrap();
    assert!(matches!(err, Error::Config(_)), "{err}");
    let err = Trainer::load(&p.corpus, fit.clone(), valid.clone(), &cfg.train, 4, dir.path()).err().unwrap();
    assert!(matches!(err, Error::Config(_)), "{err}");

    let params = dir.path().join("params.bin");
    let bytes = fs::read(&params).unwrap();
    fs::write(&params, &bytes[..bytes.len() - 3]).unwrap();
    let err = Trainer::load(&p.corpus, fit, valid, &cfg.train, 3, dir.path()).err().unwrap();
    assert!(matches!(err, Error::Ingest(_)), "{err}");
}

#[test]
fn zero_epochs_keeps_initial_parameters_and_scores_one_half() {
    let (cfg, p) = common::small(14);
    let train_cfg = TrainConfig { epochs: 0, ..cfg.train.clone() };
    let mut t = trainer(&p, &train_cfg, 1);
    let before = param_bits(&t.model);
    t.fit().unwrap();
    assert!(t.finished());
    assert_eq!(param_bits(&t.model), before);
    assert_eq!(t.history().len(), 1);
    let scores = t.score(&p.data.test_events()).unwrap();
    assert!(scores.iter().all(|s| s.score == 0.5));
}

#[test]
fn training_is_deterministic_and_lowers_the_main_loss() {
    let (cfg, p) = common::small(15);
    let train_cfg = TrainConfig { epochs: 2, ..cfg.train.clone() };
    let mut a = trainer(&p, &train_cfg, 21);
    let mut b = trainer(&p, &train_cfg, 21);
    a.fit().unwrap();
    b.fit().unwrap();
    assert_eq!(param_bits(&a.model), param_bits(&b.model));
    let first = a.first_main().unwrap();
    let last = a.history().last().unwrap().train_main.unwrap();
    assert!(last < first, "main loss {first} -> {last}");
    assert!((first - std::f64::consts::LN_2).abs() < 1e-12, "zero output layer starts at 0.5");
}

#[test]
fn ablation_flags_remove_exactly_their_parameters() {
    let (cfg, p) = common::small(16);
    let mc = &cfg.train.model;
    let full = Model::new(mc, AblationFlags::default(), &p.corpus, 1).unwrap();
    let n = full.store.num_scalars();
    let m = mc.emb_dim;
    let gate = |input: usize| input * mc.gate_hidden + mc.gate_hidden + mc.gate_hidden + 1;
    let cgae_gates = 2 * gate(ACTIVITY_DIM);
    let view_gate = gate(2 * ACTIVITY_DIM + 2);
    let width = full.layout.view_width();
    let view = m + width * mc.fusion_dim + mc.fusion_dim;
    let individual = (p.corpus.users.len() + p.corpus.items.len()) * m;
    let cluster = (p.corpus.user_clusters.num_clusters() + p.corpus.item_clusters.num_clusters()) * m;

    let expected = [
        n - individual - cgae_gates,
        n - cluster - cgae_gates,
        n - cgae_gates,
        n - view - view_gate,
        n - view - view_gate,
        n - view_gate,
    ];
    for ((name, flags), want) in AblationFlags::variants().into_iter().zip(expected) {
        let model = Model::new(mc, flags, &p.corpus, 1).unwrap();
        assert_eq!(model.store.num_scalars(), want, "{name}");
        assert_ne!(model.assembly_hash(), full.assembly_hash(), "{name}");
    }
    let again = Model::new(mc, AblationFlags::default(), &p.corpus, 2).unwrap();
    assert_eq!(again.assembly_hash(), full.assembly_hash());
}

#[test]
fn shared_components_start_identical_across_variants() {
    let (cfg, p) = common::small(17);
    let mc = &cfg.train.model;
    let full = Model::new(mc, AblationFlags::default(), &p.corpus, 5).unwrap();
    for (name, flags) in AblationFlags::variants() {
        let v = Model::new(mc, flags, &p.corpus, 5).unwrap();
        for param in v.store.iter() {
            let id = full.store.find(&param.name).unwrap_or_else(|| panic!("{name}: {} is new", param.name));
            assert_eq!(full.store.value(id), &param.value, "{name}: {}", param.name);
        }
    }
}

#[test]
fn divergence_is_reported_and_leaves_the_last_good_state() {
    let (cfg, p) = common::small(18);
    let train_cfg = TrainConfig { lr: 1e300, ..cfg.train.clone() };
    let mut t = trainer(&p, &train_cfg, 2);
    t.begin_epoch().unwrap();
    let mut last_good = param_bits(&t.model);
    let err = loop {
        match t.step() {
            Ok(Some(_)) => last_good = param_bits(&t.model),
            Ok(None) => panic!("an absurd learning rate should diverge within one epoch"),
            Err(e) => break e,
        }
    };
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
    assert_eq!(param_bits(&t.model), last_good);
}

#[test]
fn invalid_flag_combinations_are_config_errors() {
    let (cfg, p) = common::small(19);
    for flags in [
        AblationFlags { no_individual_emb: true, no_cluster_emb: true, ..AblationFlags::default() },
        AblationFlags { no_instance_view: true, no_cluster_view: true, ..AblationFlags::default() },
    ] {
        let err = Model::new(&cfg.train.model, flags, &p.corpus, 1).err().unwrap();
        assert!(matches!(err, Error::Config(_)));
    }
}
