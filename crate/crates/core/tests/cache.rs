use proptest::prelude::*;
use teesim::cache::{Cache, CacheConfig, Outcome};
use teesim::crypto::Rng;
use teesim::host::attack::{full_prime_script, prime_probe, set_hammer_trace};
use teesim::machine::{Domain, EnclaveId};

fn random_lines(rng: &mut Rng, max: u64, span: u64) -> Vec<u64> {
    let n = 1 + rng.below(max);
    (0..n).map(|_| rng.below(span)).collect()
}

#[test]
fn partitioned_cache_hides_the_victim_trace() {
    let mut rng = Rng::new(8);
    for _ in 0..20 {
        let probe = random_lines(&mut rng, 200, 1 << 12);
        let a = random_lines(&mut rng, 60, 6 * 4096);
        let b = random_lines(&mut rng, 60, 6 * 4096);
        assert_eq!(prime_probe(Some(8), &probe, &a).unwrap(), prime_probe(Some(8), &probe, &b).unwrap());
    }
}

#[test]
fn shared_cache_leaks_through_prime_probe() {
    let probe = full_prime_script();
    let quiet = prime_probe(None, &probe, &[]).unwrap();
    let loud = prime_probe(None, &probe, &set_hammer_trace(5)).unwrap();
    assert_ne!(quiet, loud);
    assert!(
        loud.iter().filter(|o| **o == Outcome::Miss).count() > quiet.iter().filter(|o| **o == Outcome::Miss).count()
    );
}

#[test]
fn switching_partitions_flushes_the_enclave_ways() {
    let mut cache = Cache::new(CacheConfig::default()).unwrap();
    cache.enable_partition(4).unwrap();
    let e = Domain::Enclave(EnclaveId(0));
    cache.switch_partition(Domain::Host, e);
    for line in 0..64 {
        cache.access(e, line * 64);
    }
    assert!(cache.valid_lines_in_partition() > 0);
    cache.switch_partition(e, Domain::Host);
    assert_eq!(cache.valid_lines_in_partition(), 0);
    assert_eq!(cache.mask_violations(), 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// Enclave lines live only in the partition and never outlast a switch.
    #[test]
    fn fills_respect_the_way_mask(ops in proptest::collection::vec((any::<bool>(), 0u64..1 << 20), 0..400), ways in 1usize..16) {
        let mut cache = Cache::new(CacheConfig::default()).unwrap();
        cache.enable_partition(ways).unwrap();
        let e = Domain::Enclave(EnclaveId(3));
        let mut inside = false;
        for (enclave, addr) in ops {
            if enclave != inside {
                let (from, to) = if enclave { (Domain::Host, e) } else { (e, Domain::Host) };
                cache.switch_partition(from, to);
                inside = enclave;
            }
            cache.access(if inside { e } else { Domain::Host }, addr);
            if inside {
                prop_assert_eq!(cache.valid_lines_in_partition(), cache.valid_lines_of(e));
            } else {
                prop_assert_eq!(cache.valid_lines_of(e), 0);
            }
        }
        prop_assert!(cache.valid_lines_of(e) <= ways * cache.config().sets);
    }
}
