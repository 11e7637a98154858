use teesim::cache::Outcome;
use teesim::host::attack::{full_prime_script, prime_probe, run_attack, run_corpus, set_hammer_trace, AttackKind};

#[test]
fn corpus_has_no_successes() {
    let report = run_corpus(3, 11).unwrap();
    for (kind, r) in &report.per_kind {
        println!("{kind}: {r}");
        assert!(r.attempts > 0, "{kind} made no attempt");
        assert_eq!(r.successes, 0, "{kind}");
        assert_eq!(r.unlogged, 0, "{kind}");
    }
}

#[test]
fn pmp_attacks_are_denied_not_merely_detected() {
    for kind in
        [AttackKind::HostReadRunning, AttackKind::HostReadStopped, AttackKind::MapForeign, AttackKind::CrossEnclave]
    {
        let r = run_attack(kind, 5).unwrap();
        assert_eq!(r.denied, r.attempts, "{kind}: {r}");
    }
}

#[test]
fn prime_probe_leaks_only_without_partition() {
    let probe = full_prime_script();
    let quiet: Vec<u64> = Vec::new();
    let loud = set_hammer_trace(5);
    let open_a = prime_probe(None, &probe, &quiet).unwrap();
    let open_b = prime_probe(None, &probe, &loud).unwrap();
    assert_ne!(open_a, open_b);
    assert!(open_b.contains(&Outcome::Miss));
    let part_a = prime_probe(Some(8), &probe, &quiet).unwrap();
    let part_b = prime_probe(Some(8), &probe, &loud).unwrap();
    assert_eq!(part_a, part_b);
}

#[test]
fn attack_names_round_trip() {
    for k in AttackKind::ALL {
        assert_eq!(AttackKind::from_name(k.name()), Some(k));
    }
}
