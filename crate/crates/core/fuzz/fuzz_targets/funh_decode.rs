#![no_main]

use fun_core::data::{decode_funh, encode_funh, StoredCube};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // anything that decodes must re-encode to the same bytes
    if let Ok(cube) = decode_funh(data) {
        let again = match &cube {
            StoredCube::F32(c) => encode_funh(c),
            StoredCube::F64(c) => encode_funh(c),
        };
        assert_eq!(again, data);
    }
});
