#![no_main]

use capinstall::nn::io;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(net) = io::decode(data) {
        let bytes = io::encode(&net);
        assert_eq!(io::decode(&bytes).unwrap(), net);
    }
});
