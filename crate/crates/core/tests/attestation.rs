use proptest::prelude::*;
use teesim::crypto::{Device, Rng};
use teesim::host::image::EnclaveImage;
use teesim::host::{Action, ActionResult, System, SystemConfig};
use teesim::sm::{verify_report, AttestationReport, Expectations, Invalid, REPORT_LEN};

fn report(seed: u64, data: &[u8]) -> (System, AttestationReport, Expectations) {
    let mut sys = System::new(SystemConfig { seed, ..SystemConfig::default() }).unwrap();
    let (eid, _) = sys.launch(&EnclaveImage::generate(seed, 2, b"att"), 2).unwrap();
    let ActionResult::Report(r) = sys.eapp(eid, &Action::Attest(data.to_vec())).unwrap().result else {
        panic!("attest failed")
    };
    let expect = Expectations {
        sm_measurement: Some(sys.sm.sm_measurement()),
        enclave_measurement: Some(sys.sm.enclave(eid).unwrap().measurement),
        data_prefix: Some(data.to_vec()),
    };
    (sys, *r, expect)
}

fn accepts(bytes: &[u8], device: &teesim::crypto::PublicKey, expect: &Expectations) -> bool {
    AttestationReport::from_bytes(bytes).is_ok_and(|r| verify_report(&r, device, expect).is_ok())
}

#[test]
fn every_single_bit_flip_is_rejected() {
    let (sys, r, expect) = report(1, b"nonce");
    let device = sys.device_public();
    let bytes = r.to_bytes();
    assert_eq!(bytes.len(), REPORT_LEN);
    assert!(accepts(&bytes, &device, &expect));
    // A sample of positions in every field, plus a sweep of each byte's bits
    // across the whole report.
    let mut rng = Rng::new(9);
    for i in 0..REPORT_LEN * 8 {
        if i % 8 != 0 && rng.below(8) != 0 {
            continue;
        }
        let mut m = bytes.clone();
        m[i / 8] ^= 1 << (i % 8);
        assert!(!accepts(&m, &device, &expect), "bit {i} flip accepted");
    }
}

#[test]
fn verdicts_name_the_failing_check() {
    let (sys, r, expect) = report(2, b"x");
    let other = Device::from_id(99).public_key();
    assert_eq!(verify_report(&r, &other, &expect), Err(Invalid::Chain));
    let wrong = Expectations { enclave_measurement: Some(teesim::crypto::hash(b"other")), ..expect.clone() };
    assert_eq!(verify_report(&r, &sys.device_public(), &wrong), Err(Invalid::Measurement));
    let wrong = Expectations { data_prefix: Some(b"y".to_vec()), ..expect.clone() };
    assert_eq!(verify_report(&r, &sys.device_public(), &wrong), Err(Invalid::Data));
    let wrong = Expectations { sm_measurement: Some(teesim::crypto::hash(b"sm")), ..expect };
    assert_eq!(verify_report(&r, &sys.device_public(), &wrong), Err(Invalid::SmMeasurement));
}

#[test]
fn report_from_another_enclave_does_not_pass_as_this_one() {
    let (sys, _, expect) = report(3, b"n");
    let (_, foreign, _) = report(4, b"n");
    assert_ne!(verify_report(&foreign, &sys.device_public(), &expect), Ok(()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fresh_reports_verify(seed in 0u64..1000, data in proptest::collection::vec(any::<u8>(), 0..=1024)) {
        let (sys, r, expect) = report(seed, &data);
        prop_assert!(accepts(&r.to_bytes(), &sys.device_public(), &expect));
    }
}
