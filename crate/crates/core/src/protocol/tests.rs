use std::collections::BTreeSet;

use proptest::prelude::*;

use super::*;

fn info(classes: usize, domains: usize, per_pair: usize) -> CorpusInfo {
    CorpusInfo {
        name: "test".into(),
        classes,
        domain_names: (0..domains).map(|d| format!("d{d}")).collect(),
        per_pair,
        image_size: 8,
        channels: 3,
    }
}

fn paper(template: Template) -> Manifest {
    let shape = ProtocolShape::preset(template, Preset::Paper).unwrap();
    let corpus = info(shape.classes_needed(), shape.domains_wanted(), 30);
    build_protocol(template, &shape, &corpus, 0).unwrap()
}

fn pattern(m: &Manifest) -> Vec<TaskKind> {
    m.task_pattern()
}

#[test]
fn domainnet_like_paper_pattern() {
    use TaskKind::*;
    let m = paper(Template::DomainnetLike);
    assert_eq!(m.session_count, 9);
    assert_eq!(pattern(&m), vec![Base, Cil, Dil, Cil, Dil, Cil, Dil, Cil, Dil]);
    for s in &m.sessions[1..] {
        assert_eq!((s.n_way, s.k_shot), (Some(5), Some(5)));
        assert_eq!(s.domains.len(), 1);
    }
    let domains: Vec<usize> = m.sessions.iter().map(|s| s.domains[0]).collect();
    assert_eq!(domains, vec![0, 0, 1, 1, 2, 2, 3, 3, 4]);
    assert_eq!(m.unseen_domains, vec![5]);
    assert_eq!(m.sessions[1].classes, (60..65).collect::<Vec<_>>());
    assert_eq!(m.sessions[2].classes, m.sessions[1].classes);
    assert_eq!(m.group_intervals(), vec![(2, 3), (4, 5), (6, 7), (8, 9)]);
}

#[test]
fn imagenetc_like_paper_pattern() {
    use TaskKind::*;
    let m = paper(Template::ImagenetcLike);
    assert_eq!(m.session_count, 13);
    let mut want = vec![Base];
    for _ in 0..4 {
        want.extend([Cil, Dil, Dil]);
    }
    assert_eq!(pattern(&m), want);
    assert_eq!(m.sessions[0].domains, vec![0, 1, 2, 3]);
    for s in &m.sessions[1..] {
        assert_eq!((s.n_way, s.k_shot), (Some(10), Some(5)));
    }
    assert_eq!(m.unseen_domains, vec![12, 13, 14]);
    assert_eq!(m.group_intervals(), vec![(2, 4), (5, 7), (8, 10), (11, 13)]);
    // Each novel group spans exactly three consecutive sessions.
    for g in 0..4 {
        let classes = &m.sessions[1 + 3 * g].classes;
        let hits: Vec<usize> = m.sessions.iter().filter(|s| &s.classes == classes).map(|s| s.session_id).collect();
        assert_eq!(hits, vec![2 + 3 * g, 3 + 3 * g, 4 + 3 * g]);
    }
}

#[test]
fn desk_presets() {
    let shape = ProtocolShape::preset(Template::DomainnetLike, Preset::Desk).unwrap();
    let m = build_protocol(Template::DomainnetLike, &shape, &info(20, 5, 20), 3).unwrap();
    assert_eq!(m.session_count, 5);
    assert_eq!(m.unseen_domains, vec![4]);
    assert_eq!(m.sessions[0].train_samples.len(), 12 * 16);

    // Five domains are too few for fresh DIL domains everywhere: the
    // fallback revisits base domains the group has not seen.
    let shape = ProtocolShape::preset(Template::ImagenetcLike, Preset::Desk).unwrap();
    let m = build_protocol(Template::ImagenetcLike, &shape, &info(20, 5, 20), 3).unwrap();
    let domains: Vec<Vec<usize>> = m.sessions.iter().map(|s| s.domains.clone()).collect();
    assert_eq!(domains, vec![vec![0, 1], vec![0], vec![2], vec![3], vec![3], vec![0], vec![1]]);
}

#[test]
fn custom_without_increments_is_base_only() {
    let shape = ProtocolShape {
        base_classes: 4,
        base_domains: 1,
        n_way: 0,
        k_shot: 0,
        groups: 0,
        dil_per_group: 0,
        unseen_domains: 1,
    };
    let m = build_protocol(Template::Custom, &shape, &info(4, 2, 5), 0).unwrap();
    assert_eq!(m.session_count, 1);
    assert_eq!(m.sessions[0].task, TaskKind::Base);
    assert!(m.group_intervals().is_empty());
    assert!(ProtocolShape::preset(Template::Custom, Preset::Desk).is_err());
}

#[test]
fn first_cil_session_holds_n_way_k_shot() {
    let m = paper(Template::DomainnetLike);
    let d = m.sample_session(2, 1).unwrap();
    assert_eq!(d.train.len(), 25);
    let classes: BTreeSet<usize> = d.train.iter().map(|s| s.class).collect();
    assert_eq!(classes.len(), 5);
    let domains: BTreeSet<usize> = d.train.iter().map(|s| s.domain).collect();
    assert_eq!(domains.len(), 1);
}

#[test]
fn base_unseen_test_covers_base_classes_only() {
    let m = paper(Template::DomainnetLike);
    let d = m.sample_session(1, 0).unwrap();
    assert!(d.unseen_test.iter().all(|s| s.class < 60 && m.unseen_domains.contains(&s.domain)));
    let classes: BTreeSet<usize> = d.unseen_test.iter().map(|s| s.class).collect();
    assert_eq!(classes.len(), 60);
    assert!(d.seen_test.iter().all(|s| s.domain == 0 && s.class < 60));
}

#[test]
fn seen_test_accumulates() {
    let m = paper(Template::DomainnetLike);
    let test_per_pair = m.corpus.per_pair - m.train_per_pair;
    let d = m.sample_session(3, 0).unwrap();
    // 60 base pairs, then 5 classes in two domains.
    assert_eq!(d.seen_test.len(), (60 + 10) * test_per_pair);
    assert_eq!(d.unseen_test.len(), 65 * test_per_pair);
}

#[test]
fn training_sets_are_pairwise_disjoint_and_untested() {
    for template in [Template::DomainnetLike, Template::ImagenetcLike] {
        let m = paper(template);
        let sets: Vec<BTreeSet<usize>> = m.sessions.iter().map(|s| s.train_samples.iter().copied().collect()).collect();
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                assert!(sets[i].is_disjoint(&sets[j]), "sessions {} and {}", i + 1, j + 1);
            }
        }
        let all_train: BTreeSet<usize> = sets.iter().flatten().copied().collect();
        for id in 1..=m.session_count {
            let d = m.sample_session(id, 5).unwrap();
            assert!(d.seen_test.iter().chain(&d.unseen_test).all(|s| !all_train.contains(&s.id)));
        }
    }
}

#[test]
fn sampling_order_depends_only_on_seed() {
    let m = paper(Template::DomainnetLike);
    let a = m.sample_session(1, 7).unwrap();
    assert_eq!(a, m.sample_session(1, 7).unwrap());
    let b = m.sample_session(1, 8).unwrap();
    assert_ne!(a.train, b.train);
    let (mut sa, mut sb) = (a.train.clone(), b.train.clone());
    sa.sort();
    sb.sort();
    assert_eq!(sa, sb);
    assert!(m.sample_session(10, 0).is_err());
    assert!(m.sample_session(0, 0).is_err());
}

#[test]
fn manifest_round_trips_byte_identically() {
    for template in [Template::DomainnetLike, Template::ImagenetcLike] {
        let m = paper(template);
        let text = m.to_json().unwrap();
        let back = Manifest::from_json(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json().unwrap(), text);
    }
}

#[test]
fn insufficient_corpora_are_rejected() {
    let shape = ProtocolShape::preset(Template::DomainnetLike, Preset::Desk).unwrap();
    let t = Template::DomainnetLike;
    assert!(build_protocol(t, &shape, &info(17, 5, 20), 0).is_err());
    assert!(build_protocol(t, &shape, &info(20, 2, 20), 0).is_err());
    assert!(build_protocol(t, &shape, &info(20, 5, 2), 0).is_err());
    assert!(build_protocol(t, &shape, &info(20, 5, 1), 0).is_err());
    let wide = ProtocolShape { dil_per_group: 3, ..shape.clone() };
    assert!(build_protocol(t, &wide, &info(20, 4, 20), 0).is_err());
}

#[test]
fn tampered_manifests_fail_validation() {
    let m = paper(Template::DomainnetLike);
    let mut dup = m.clone();
    let stolen = dup.sessions[1].train_samples[0];
    dup.sessions[2].train_samples[0] = stolen;
    assert!(dup.validate().is_err());

    let mut reuse = m.clone();
    reuse.sessions[3].classes = reuse.sessions[1].classes.clone();
    assert!(reuse.validate().is_err());

    let mut leak = m.clone();
    leak.sessions[2].domains = vec![5];
    assert!(leak.validate().is_err());

    let mut not_base = m;
    not_base.sessions[0].task = TaskKind::Cil;
    assert!(not_base.validate().is_err());
}

#[test]
fn template_and_preset_names_parse() {
    assert_eq!("domainnet_like".parse::<Template>().unwrap(), Template::DomainnetLike);
    assert_eq!("imagenetc_like".parse::<Template>().unwrap(), Template::ImagenetcLike);
    assert!("other".parse::<Template>().is_err());
    assert_eq!("paper".parse::<Preset>().unwrap(), Preset::Paper);
}

/// Shapes and corpora small enough to build quickly but varied enough to
/// exercise the fallback domain rule.
pub(crate) fn arbitrary_setup() -> impl Strategy<Value = (ProtocolShape, CorpusInfo, u64)> {
    (1usize..6, 1usize..3, 1usize..4, 1usize..4, 0usize..4, 0usize..3, 1usize..3, 0usize..3, 3usize..8, any::<u64>())
        .prop_map(|(base, bd, n, k, groups, dil, unseen, spare, extra, seed)| {
            let shape = ProtocolShape {
                base_classes: base,
                base_domains: bd,
                n_way: n,
                k_shot: k,
                groups,
                dil_per_group: dil,
                unseen_domains: unseen,
            };
            let domains = bd + dil.max(1) + unseen + spare;
            let per_pair = k + extra;
            (shape.clone(), info(shape.classes_needed(), domains, per_pair), seed)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]
    #[test]
    fn random_manifests_hold_invariants((shape, corpus, seed) in arbitrary_setup()) {
        let m = build_protocol(Template::Custom, &shape, &corpus, seed).unwrap();
        prop_assert_eq!(m.session_count, shape.session_count());
        let mut classes = BTreeSet::new();
        let mut samples = BTreeSet::new();
        for s in &m.sessions {
            if s.task == TaskKind::Cil {
                prop_assert!(s.classes.iter().all(|c| !classes.contains(c)));
            }
            classes.extend(s.classes.iter().copied());
            for &id in &s.train_samples {
                prop_assert!(samples.insert(id));
            }
            prop_assert!(s.domains.iter().all(|d| !m.unseen_domains.contains(d)));
        }
        let text = m.to_json().unwrap();
        prop_assert_eq!(Manifest::from_json(&text).unwrap().to_json().unwrap(), text);
    }
}
