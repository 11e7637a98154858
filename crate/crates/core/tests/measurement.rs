mod support;

use proptest::prelude::*;
use support::{image_measurement, measure_loaded, mutate_image as mutate, random_image};
use teesim::crypto::Rng;
use teesim::host::image::EnclaveImage;
use teesim::host::{CreateOptions, System, SystemConfig};
use teesim::machine::PAGE_SIZE;

fn measured(image: &EnclaveImage, pad_pages: u64, scratchpad: bool) -> teesim::crypto::Measurement {
    measure_loaded(image, pad_pages, scratchpad).unwrap().0
}

#[test]
fn measurement_is_position_independent_and_content_sensitive() {
    let mut rng = Rng::new(42);
    for _ in 0..30 {
        let image = random_image(&mut rng);
        let base = measured(&image, 0, false);
        assert_eq!(base, image_measurement(&image));
        assert_eq!(measured(&image, 1 + rng.below(200), false), base);
        assert_eq!(measured(&image, rng.below(50), true), base);
        let changed = mutate(&image, &mut rng);
        assert_ne!(measured(&changed, 0, false), base);
        assert_ne!(image_measurement(&changed), base);
    }
}

#[test]
fn scratchpad_enclave_runs_and_host_cannot_see_the_staging_copy() {
    let image = EnclaveImage::generate(7, 2, b"sp");
    let mut sys = System::new(SystemConfig { scratchpad: Some(64 * PAGE_SIZE), ..SystemConfig::default() }).unwrap();
    let opts =
        CreateOptions { use_scratchpad: true, ..CreateOptions::new(teesim::host::os::pages_needed(&image) + 4, 2) };
    let eid = sys.create_enclave(0, &image, &opts).unwrap();
    let d = sys.sm.enclave(eid).unwrap();
    assert!(d.on_scratchpad);
    assert_eq!(d.epm, sys.sm.scratchpad().unwrap());
    sys.run(eid, 0).unwrap();
    let out =
        sys.eapp(eid, &teesim::host::Action::ReadV { vaddr: teesim::paging::EAPP_BASE + PAGE_SIZE, len: 16 }).unwrap();
    assert_eq!(out.result, teesim::host::ActionResult::Bytes(image.segments[3].data[..16].to_vec()));
    let sp = sys.sm.scratchpad().unwrap();
    assert!(sys.host_read(1, sp.base, 8).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn relocation_never_changes_the_digest(seed in any::<u64>(), pad in 0u64..300) {
        let image = random_image(&mut Rng::new(seed));
        prop_assert_eq!(measured(&image, pad, false), image_measurement(&image));
    }
}
