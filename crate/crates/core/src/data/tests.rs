use super::*;

fn spec(name: &str, style: Style, count: usize, seed: u64) -> DomainSpec {
    DomainSpec {
        name: name.into(),
        style,
        count_per_class: count,
        seed,
        test_fraction: 0.25,
        labeled: true,
    }
}

#[test]
fn render_is_deterministic() {
    let a = render_sample(Class::Spoof, &Style::source(), 42);
    let b = render_sample(Class::Spoof, &Style::source(), 42);
    assert_eq!(a, b);
    let (img, _) = &a;
    assert_eq!(img.shape(), &[3, 32, 32]);
    assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn depth_targets() {
    for seed in 0..20 {
        let (_, live) = render_sample(Class::Live, &Style::source(), seed);
        let (_, spoof) = render_sample(Class::Spoof, &Style::source(), seed);
        assert_eq!(live.shape(), &[1, 8, 8]);
        assert!((live.max_abs() - 1.0).abs() < 1e-12);
        assert!(spoof.data().iter().all(|&d| d == 0.0));
    }
}

#[test]
fn spoof_carries_more_high_frequency_energy() {
    let mut ratios = Vec::new();
    for seed in 0..100 {
        let (live, _) = render_sample(Class::Live, &Style::source(), seed);
        let (spoof, _) = render_sample(Class::Spoof, &Style::source(), seed);
        let (hl, hs) = (high_frequency_energy(&live), high_frequency_energy(&spoof));
        assert!(hs > hl, "seed {seed}: spoof {hs} vs live {hl}");
        ratios.push(hs / hl);
    }
    let min = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(min > 1.5, "min ratio {min}");
}

#[test]
fn layout_balances_classes_and_splits() {
    let s = spec("a", Style::source(), 8, 0);
    let mut counts = std::collections::HashMap::new();
    for i in 0..16 {
        *counts.entry(s.layout(i)).or_insert(0) += 1;
    }
    assert_eq!(counts[&(Class::Live, Split::Train)], 6);
    assert_eq!(counts[&(Class::Live, Split::Test)], 2);
    assert_eq!(counts[&(Class::Spoof, Split::Train)], 6);
    assert_eq!(counts[&(Class::Spoof, Split::Test)], 2);
    assert!(spec("a", Style::source(), 1, 0).validate().is_err());
    assert!(spec("a b", Style::source(), 8, 0).validate().is_err());
}

#[test]
fn generation_counts_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let s = spec("src", Style::source(), 1000, 3);
    let m = generate_with_threads(&s, &dir.path().join("a"), 1).unwrap();
    assert_eq!(m.records.len(), 2000);
    assert_eq!(m.records.iter().filter(|r| r.label == Some(1)).count(), 1000);
    assert!(m.split(Split::Test).records.len() == 500);
    let again = generate_with_threads(&s, &dir.path().join("b"), 3).unwrap();
    assert_eq!(m, again);
    for r in m.records.iter().step_by(97) {
        let a = std::fs::read(dir.path().join("a").join(&r.image)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(&r.image)).unwrap();
        assert_eq!(a, b);
    }
    let ma = std::fs::read(dir.path().join("a").join(MANIFEST_FILE)).unwrap();
    let mb = std::fs::read(dir.path().join("b").join(MANIFEST_FILE)).unwrap();
    assert_eq!(ma, mb);
    let loaded = DatasetManifest::load(&dir.path().join("a").join(MANIFEST_FILE)).unwrap();
    assert_eq!(loaded, m);
}

#[test]
fn domains_differ_in_channel_means() {
    let dir = tempfile::tempdir().unwrap();
    let src = spec("s", Style::source(), 60, 1);
    let tgt = spec("t", Style::target(), 60, 2);
    let ms = generate_domain_dataset(&src, &dir.path().join("s")).unwrap();
    let mt = generate_domain_dataset(&tgt, &dir.path().join("t")).unwrap();
    let a = Samples::load(&dir.path().join("s"), &ms).unwrap().channel_means();
    let b = Samples::load(&dir.path().join("t"), &mt).unwrap().channel_means();
    for c in 0..3 {
        assert!((a[c] - b[c]).abs() >= 0.05, "channel {c}: {} vs {}", a[c], b[c]);
    }
}

#[test]
fn unlabeled_domain_seals_labels() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = spec("t", Style::target(), 4, 5);
    s.labeled = false;
    let m = generate_domain_dataset(&s, dir.path()).unwrap();
    assert!(m.records.iter().all(|r| r.label.is_none() && r.depth.is_none()));
    let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    assert!(!text.contains("label") && !text.contains("depth"));
    let sealed = DatasetManifest::load(&dir.path().join(SEALED_MANIFEST_FILE)).unwrap();
    assert!(sealed.is_labeled());
    let open = Samples::load(dir.path(), &m).unwrap();
    assert!(open.labels().is_none());
    let closed = Samples::load(dir.path(), &sealed).unwrap();
    assert_eq!(closed.labels().unwrap().len(), 8);
    assert_eq!(closed.depths(&[0, 1]).unwrap().shape(), &[2, 1, 8, 8]);
}

#[test]
fn manifest_validation() {
    let rec = SampleRecord {
        image: "images/a.ppm".into(),
        depth: None,
        label: Some(1),
        domain: "a".into(),
        split: Split::Train,
    };
    let m = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        records: vec![rec.clone()],
    };
    assert!(m.validate().is_err());
    let dup = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        records: vec![
            SampleRecord { label: None, ..rec.clone() },
            SampleRecord { label: None, ..rec },
        ],
    };
    assert!(dup.validate().is_err());
    let text = r#"{"schema_version":1,"records":[],"extra":1}"#;
    assert!(serde_json::from_str::<DatasetManifest>(text).is_err());
}

#[test]
fn batches_cover_epoch() {
    let mut it = BatchIterator::new(10, 3, 7, false).unwrap();
    let batches = it.epoch_batches();
    assert_eq!(batches.len(), 4);
    let mut all: Vec<usize> = batches.concat();
    all.sort();
    assert_eq!(all, (0..10).collect::<Vec<_>>());
    let mut again = BatchIterator::new(10, 3, 7, false).unwrap();
    assert_eq!(again.epoch_batches(), batches);
    let next = it.epoch_batches();
    assert_ne!(next, batches);

    let mut dl = BatchIterator::new(10, 3, 7, true).unwrap();
    assert!(dl.epoch_batches().iter().all(|b| b.len() == 3));
    assert!(BatchIterator::new(0, 3, 0, false).is_err());
    let mut rolling = BatchIterator::new(5, 2, 1, true).unwrap();
    for _ in 0..10 {
        assert_eq!(rolling.next_batch().len(), 2);
    }
}

#[test]
fn partners_are_derangements() {
    // Enumerate all permutations of 4 and keep those without fixed points.
    let mut derangements = Vec::new();
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    let p = [a, b, c, d];
                    let distinct = (0..4).all(|i| (0..i).all(|j| p[i] != p[j]));
                    if distinct && (0..4).all(|i| p[i] != i) {
                        derangements.push(p.to_vec());
                    }
                }
            }
        }
    }
    assert_eq!(derangements.len(), 9);
    let mut seen = std::collections::HashSet::new();
    let mut rng = SplitMix64::new(11);
    for _ in 0..2000 {
        let p = partner_permutation(4, &mut rng);
        assert!(derangements.contains(&p), "{p:?}");
        seen.insert(p);
    }
    // Single cycles of length 4: (4-1)! = 6 of the 9 derangements.
    assert_eq!(seen.len(), 6);
    assert_eq!(partner_permutation(1, &mut rng), vec![0]);
}

#[test]
fn concat_keeps_order_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let a = spec("a", Style::source(), 2, 1);
    let b = spec("b", Style::target(), 3, 2);
    let ma = generate_domain_dataset(&a, &dir.path().join("a")).unwrap();
    let mb = generate_domain_dataset(&b, &dir.path().join("b")).unwrap();
    let sa = Samples::load(&dir.path().join("a"), &ma).unwrap();
    let sb = Samples::load(&dir.path().join("b"), &mb).unwrap();
    let joined = Samples::concat(&[sa.clone(), sb.clone()]);
    assert_eq!(joined.len(), 10);
    assert_eq!(joined.image(4), sb.image(0));
    assert_eq!(&joined.labels().unwrap()[4..], sb.labels().unwrap());
    assert_eq!(joined.domains()[3], "a");
    assert_eq!(joined.domains()[4], "b");
    assert!(Samples::concat(&[sa, sb.unlabeled()]).labels().is_none());
}
