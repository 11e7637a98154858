use std::path::Path;

use teesim::crypto::{Device, Hasher};
use teesim::host::scenario::{run_scenario, Overrides};

const SCRIPT: &str = r#"
boot seed=4 device=77 paging=4 encrypt dyn-resize store=16 cache partition=4
image a gen seed=3 pages=3 config=reflect
file /data "some host file"
create image=a epm=24p utm=20p
run 0
eapp 0 mmap 8p
eapp 0 writev 0x1000000000 hex:deadbeef
eapp 0 syscall open /data
eapp 0 syscall read 1 32
eapp 0 edge wordcount "a b c"
eapp 0 attest "challenge"
report verify enclave=0
expect valid
remote wordcount 0 "hello remote world"
expect reply 3
host read epm:0 64
expect denied
eapp 0 exit 0
destroy 0
"#;

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle)
}

#[test]
fn device_secret_never_leaves_the_device() {
    // The device key seed, derived the documented way.
    let secret = Hasher::new().update(Device::KEY_LABEL).update(&77u64.to_le_bytes()).finish().0;
    let res = run_scenario(SCRIPT, Path::new("."), &Overrides::default()).unwrap();
    assert!(res.passed(), "{}", res.transcript.join("\n"));
    let sys = res.system.as_ref().unwrap();
    assert_eq!(sys.device_public(), Device::from_id(77).public_key());

    let mut visible: Vec<Vec<u8>> = vec![res.audit.to_string().into_bytes(), res.transcript.join("\n").into_bytes()];
    let sm = sys.sm.sm_region();
    let mem = sys.machine.memory();
    visible.push(mem.read(sm.end(), mem.size() - sm.end()).unwrap().to_vec());
    for needle in [secret.to_vec(), hex::encode(secret).into_bytes()] {
        for (i, blob) in visible.iter().enumerate() {
            assert!(!contains(blob, &needle), "secret visible in output {i}");
        }
    }
}
