#![no_main]

use escore::nn::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).expect("re-decode");
        assert_eq!(back, ck);
    }
});
