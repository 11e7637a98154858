use teesim::host::image::EnclaveImage;
use teesim::host::{Action, ActionResult, System, SystemConfig};
use teesim::sm::{EnclaveState, StopReason};

#[test]
fn infinite_loop_is_forced_off_at_exactly_the_budget() {
    for budget in [1, 7, 500, 10_000] {
        let mut sys = System::new(SystemConfig { watchdog_budget: budget, ..SystemConfig::default() }).unwrap();
        let (eid, hart) = sys.launch(&EnclaveImage::generate(1, 2, b"spin"), 2).unwrap();
        let out = sys.eapp(eid, &Action::Spin(u64::MAX)).unwrap();
        assert_eq!(out.stopped, Some(StopReason::Watchdog));
        assert_eq!(out.steps, budget);
        assert_eq!(sys.sm.enclave(eid).unwrap().state, EnclaveState::Stopped);
        // The hart is back in host hands.
        assert_eq!(sys.sm.running_on(hart), None);
        let page = sys.os.alloc(1).unwrap().base;
        assert!(sys.host_read(hart, page, 8).is_ok());
        assert_eq!(sys.machine.audit().events("watchdog").count(), 1);
        // The budget is refilled on resume.
        sys.resume(eid, hart).unwrap();
        let out = sys.eapp(eid, &Action::Spin(budget - 1)).unwrap();
        assert_eq!(out.stopped, None);
        assert_eq!(sys.eapp(eid, &Action::Exit(0)).unwrap().result, ActionResult::Value(0));
    }
}

#[test]
fn bounded_work_under_the_budget_is_untouched() {
    let mut sys = System::new(SystemConfig { watchdog_budget: 100, ..SystemConfig::default() }).unwrap();
    let (eid, _) = sys.launch(&EnclaveImage::generate(1, 2, b"spin"), 2).unwrap();
    let out = sys.eapp(eid, &Action::Spin(99)).unwrap();
    assert_eq!((out.steps, out.stopped), (99, None));
}
