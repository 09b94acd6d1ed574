use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::backbone::BackboneConfig;
use crate::protocol::{build_protocol, generate_corpus, CorpusSpec, DomainTransform, ProtocolShape, Template};

fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.backbone = BackboneConfig {
        image_size: 16,
        patch_size: 4,
        channels: 3,
        embed_dim: 16,
        num_layers: 2,
        num_heads: 2,
        ffn_hidden: 32,
        ..BackboneConfig::default()
    };
    c.moa.hidden = 4;
    c.base.epochs = 2;
    c.incremental.epochs = 2;
    c.batch_size = 16;
    c
}

fn tiny_setup() -> (Manifest, Corpus) {
    let spec = CorpusSpec {
        classes: 6,
        per_pair: 5,
        image_size: 16,
        domains: vec![
            DomainTransform::Identity,
            DomainTransform::Contrast { factor: 0.55 },
            DomainTransform::BoxBlur { radius: 1 },
        ],
        seed: 3,
    };
    let corpus = generate_corpus(&spec).unwrap();
    let shape = ProtocolShape {
        base_classes: 4,
        base_domains: 1,
        n_way: 2,
        k_shot: 2,
        groups: 1,
        dil_per_group: 1,
        unseen_domains: 1,
    };
    let m = build_protocol(Template::Custom, &shape, &corpus.info, 5).unwrap();
    (m, corpus)
}

fn store_of(rows: &[Vec<f64>]) -> PrototypeStore {
    let mut s = PrototypeStore::new();
    for (c, r) in rows.iter().enumerate() {
        s.insert(c, &[r.clone()], 1).unwrap();
    }
    s
}

#[test]
fn classify_picks_matching_prototype() {
    let s = store_of(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
    let (c, scores) = classify(&[0.0, 1.0, 0.0], &s).unwrap();
    assert_eq!(c, 1);
    assert_eq!(scores[1], (1, 1.0));
    assert_eq!(scores[0].1, 0.0);
    let (c, _) = classify(&[0.0, 1e6, 0.0], &s).unwrap();
    assert_eq!(c, 1);
}

#[test]
fn classify_zero_query_is_uniform_with_lowest_id() {
    let s = store_of(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let (c, scores) = classify(&[0.0, 0.0], &s).unwrap();
    assert_eq!(c, 0);
    assert!(scores.iter().all(|&(_, v)| v == 0.0));
    // Exact ties also resolve to the lowest id.
    let (c, _) = classify(&[1.0, 1.0], &s).unwrap();
    assert_eq!(c, 0);
    assert!(classify(&[1.0], &s).is_err());
    assert!(classify(&[1.0], &PrototypeStore::new()).is_err());
}

#[test]
fn classify_matches_brute_force_scan() {
    let mut rng = util::rng(11, &[]);
    for _ in 0..50 {
        let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let s = store_of(&rows);
        let q: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let mut best = 0;
        for c in 1..6 {
            if cos(&q, &rows[c]) > cos(&q, &rows[best]) {
                best = c;
            }
        }
        let (c, scores) = classify(&q, &s).unwrap();
        assert_eq!(c, best);
        for (k, v) in scores {
            assert!((v - cos(&q, &s.get(k).unwrap().vector)).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn classify_ignores_positive_scale(
        q in prop::collection::vec(-1.0f64..1.0, 4),
        k in 1e-3f64..1e3,
        seed in any::<u64>(),
    ) {
        let mut rng = util::rng(seed, &[]);
        let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let s = store_of(&rows);
        let scaled: Vec<f64> = q.iter().map(|v| v * k).collect();
        prop_assert_eq!(classify(&q, &s).unwrap().0, classify(&scaled, &s).unwrap().0);
    }
}

#[test]
fn schedules_follow_milestones() {
    let p = TrainConfig::paper();
    assert_eq!((p.base.epochs, p.batch_size, p.incremental.epochs), (160, 64, 100));
    assert_eq!(p.base.lr_at(0), 0.001);
    assert_eq!(p.base.lr_at(79), 0.001);
    assert!((p.base.lr_at(80) - 1e-4).abs() < 1e-18);
    assert!((p.base.lr_at(120) - 1e-5).abs() < 1e-18);
    assert_eq!(p.incremental.lr_at(99), 0.0005);
    assert_eq!((p.gamma, p.zeta, p.tau, p.moa.adapters, p.moa.hidden), (0.3, 0.8, 1.0, 3, 8));
    assert_eq!(p.weight_decay, 5e-4);
    assert_eq!(TrainConfig::desk().zeta, 0.1);
}

#[test]
fn config_validation_and_serde_defaults() {
    let c: TrainConfig = serde_json::from_str(r#"{"zeta": 0.0, "seed": 4}"#).unwrap();
    assert_eq!(c.zeta, 0.0);
    assert_eq!(c.gamma, TrainConfig::desk().gamma);
    let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
    assert_eq!(back, c);
    for bad in [
        TrainConfig { gamma: 1.0, ..tiny_config() },
        TrainConfig { tau: 0.0, ..tiny_config() },
        TrainConfig { batch_size: 0, ..tiny_config() },
        TrainConfig { zeta: -1.0, ..tiny_config() },
        TrainConfig { max_pairs: Some(0), ..tiny_config() },
    ] {
        assert!(bad.validate().is_err());
    }
    let n = tiny_config().naive_finetune();
    assert!(!n.cosine_reg && !n.contrastive);
}

#[test]
fn head_expansion_keeps_old_logits() {
    let cfg = tiny_config();
    let mut model = Model::init(&cfg, 3).unwrap();
    let mut rng = util::rng(1, &[]);
    model.store.get_mut(model.head.bias).data_mut().copy_from_slice(&[0.1, -0.2, 0.3]);
    let probe: Vec<f32> = (0..4 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let logits = |m: &Model| {
        let mut tape = Tape::with_params(&m.store);
        let x = tape.constant(vec![4, 16], probe.clone()).unwrap();
        let z = m.head.logits(&mut tape, x).unwrap();
        (tape.value(z).to_vec(), tape.shape(z).to_vec())
    };
    let (before, _) = logits(&model);
    let w_before = model.store.get(model.head.weight).data().to_vec();
    model.head.expand(&mut model.store, 5, &mut rng).unwrap();
    assert_eq!(model.head_rows(), 8);
    assert_eq!(&model.store.get(model.head.weight).data()[..3 * 16], &w_before[..]);
    assert!(model.store.get(model.head.weight).requires_grad());
    let (after, shape) = logits(&model);
    assert_eq!(shape, vec![4, 8]);
    for r in 0..4 {
        assert_eq!(&after[r * 8..r * 8 + 3], &before[r * 3..r * 3 + 3]);
    }
}

#[test]
fn zero_zeta_gives_pure_cross_entropy() {
    let (m, corpus) = tiny_setup();
    let data = m.sample_session(1, 0).unwrap();
    let cfg = TrainConfig { zeta: 0.0, ..tiny_config() };
    let mut model = Model::init(&cfg, 4).unwrap();
    let log = model.train_base(&corpus, &data, 1).unwrap();
    for e in &log {
        assert!((e.total - e.ce).abs() <= 1e-6, "{e:?}");
        assert!(e.cos.is_some());
    }
    let cfg = tiny_config();
    let mut model = Model::init(&cfg, 4).unwrap();
    let log = model.train_base(&corpus, &data, 1).unwrap();
    let e = &log[0];
    assert!((e.total - (e.ce + cfg.zeta * e.cos.unwrap())).abs() < 1e-5);
}

#[test]
fn sessions_update_head_store_and_keep_backbone() {
    let (m, corpus) = tiny_setup();
    let cfg = tiny_config();
    let mut model = Model::init(&cfg, 4).unwrap();
    let frozen = model.backbone_checksum();
    let adapters = model.store.checksum(ParamGroup::Adapter);
    let d1 = m.sample_session(1, 0).unwrap();
    model.train_base(&corpus, &d1, 1).unwrap();
    assert_eq!(model.prototypes.len(), 4);
    assert_ne!(model.store.checksum(ParamGroup::Adapter), adapters);

    let d2 = m.sample_session(2, 0).unwrap();
    assert!(model.train_incremental(&corpus, &d2, TaskKind::Dil).is_err());
    let (_, cal) = model.train_incremental(&corpus, &d2, TaskKind::Cil).unwrap();
    assert!(cal.is_none());
    assert_eq!(model.head_rows(), 6);
    let before: BTreeMap<usize, usize> = model.prototypes.iter().map(|(c, p)| (c, p.domains)).collect();

    let d3 = m.sample_session(3, 0).unwrap();
    let (log, cal) = model.train_incremental(&corpus, &d3, TaskKind::Dil).unwrap();
    assert!(cal.unwrap() > 0.0);
    assert!(log.iter().all(|e| e.contrastive.is_some() && e.cos.is_none()));
    for (c, p) in model.prototypes.iter() {
        let want = before[&c] + usize::from(m.sessions[2].classes.contains(&c));
        assert_eq!(p.domains, want, "class {c}");
    }
    assert_eq!(model.head_rows(), 6);
    assert_eq!(model.backbone_checksum(), frozen);
}

#[test]
fn disabled_contrastive_leaves_plain_objective() {
    let (m, corpus) = tiny_setup();
    let cfg = TrainConfig { contrastive: false, ..tiny_config() };
    let mut model = Model::init(&cfg, 4).unwrap();
    model.train_base(&corpus, &m.sample_session(1, 0).unwrap(), 1).unwrap();
    model.train_incremental(&corpus, &m.sample_session(2, 0).unwrap(), TaskKind::Cil).unwrap();
    let (log, _) = model.train_incremental(&corpus, &m.sample_session(3, 0).unwrap(), TaskKind::Dil).unwrap();
    for e in &log {
        assert_eq!(e.total, e.ce);
        assert!(e.contrastive.unwrap() > 0.0);
    }
}

#[test]
fn base_session_is_required_first() {
    let (m, corpus) = tiny_setup();
    let mut model = Model::init(&tiny_config(), 4).unwrap();
    let d2 = m.sample_session(2, 0).unwrap();
    assert!(model.train_incremental(&corpus, &d2, TaskKind::Cil).is_err());
    assert!(model.train_base(&corpus, &d2, 1).is_err());
    let mut empty = m.sample_session(1, 0).unwrap();
    empty.train.clear();
    assert!(model.train_base(&corpus, &empty, 1).is_err());
}

#[test]
fn checkpoint_restores_model() {
    let (m, corpus) = tiny_setup();
    let cfg = tiny_config();
    let out = run_protocol(&m, &corpus, &cfg).unwrap();
    let last = out.checkpoints.last().unwrap();
    let back = Model::from_checkpoint(&cfg, &Checkpoint::from_bytes(&last.to_bytes()).unwrap()).unwrap();
    assert_eq!(back.prototypes, out.model.prototypes);
    assert_eq!(back.sessions_done, m.session_count);
    let data = m.sample_session(m.session_count, 0).unwrap();
    let a = score_session(&back, &m, &corpus, &data).unwrap();
    let b = &out.reports[m.session_count - 1];
    assert_eq!((a.alpha, a.delta, &a.per_class), (b.alpha, b.delta, &b.per_class));
    let wrong = TrainConfig { moa: crate::moa::MoaConfig { hidden: 5, ..cfg.moa.clone() }, ..cfg };
    assert!(Model::from_checkpoint(&wrong, last).is_err());
}

#[test]
fn run_reports_every_session_deterministically() {
    let (m, corpus) = tiny_setup();
    let cfg = tiny_config();
    let a = run_protocol(&m, &corpus, &cfg).unwrap();
    assert_eq!(a.reports.len(), m.session_count);
    for r in &a.reports {
        assert!((0.0..=100.0).contains(&r.alpha) && (0.0..=100.0).contains(&r.delta));
        assert_eq!(r.backbone_checksum, a.reports[0].backbone_checksum);
    }
    assert!(a.reports[0].novel_accuracy.is_none());
    assert!(a.reports[2].calibration_distance.is_some());
    assert_eq!(a.weights.len(), 2 * m.sample_session(3, 0).unwrap().seen_test.len());
    assert!(a.weights.iter().all(|w| (w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-5));
    let b = run_protocol(&m, &corpus, &cfg).unwrap();
    assert_eq!(a.reports, b.reports);
    assert_eq!(a.losses, b.losses);
    assert_eq!(losses_csv(&a.losses), losses_csv(&b.losses));
    let json: Vec<String> = a.reports.iter().map(|r| r.to_json().unwrap()).collect();
    let back: SessionReport = serde_json::from_str(&json[1]).unwrap();
    assert_eq!(back, a.reports[1]);
}

#[test]
fn single_base_session_gives_one_report() {
    let (_, corpus) = tiny_setup();
    let shape = ProtocolShape {
        base_classes: 4,
        base_domains: 1,
        n_way: 0,
        k_shot: 0,
        groups: 0,
        dil_per_group: 0,
        unseen_domains: 1,
    };
    let m = build_protocol(Template::Custom, &shape, &corpus.info, 0).unwrap();
    let out = run_protocol(&m, &corpus, &tiny_config()).unwrap();
    assert_eq!(out.reports.len(), 1);
    let wrong = TrainConfig { backbone: BackboneConfig::default(), ..tiny_config() };
    assert!(run_protocol(&m, &corpus, &wrong).is_err());
}

/// Desk smoke: twelve base classes after four epochs beat chance.
#[test]
fn desk_base_session_beats_chance() {
    let corpus = generate_corpus(&CorpusSpec::desk(0)).unwrap();
    let shape = ProtocolShape::preset(Template::DomainnetLike, crate::protocol::Preset::Desk).unwrap();
    let m = build_protocol(Template::DomainnetLike, &shape, &corpus.info, 0).unwrap();
    let cfg = TrainConfig::desk();
    let data = m.sample_session(1, 0).unwrap();
    let mut model = Model::init(&cfg, 12).unwrap();
    model.train_base(&corpus, &data, 1).unwrap();
    let r = score_session(&model, &m, &corpus, &data).unwrap();
    assert!(r.alpha > 100.0 / 12.0, "alpha {}", r.alpha);
}
