#![no_main]

use fun_core::data::{format_annotations, parse_annotations};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(anns) = parse_annotations(text) {
        let again = parse_annotations(&format_annotations(&anns)).expect("formatted annotations parse");
        assert_eq!(again, anns);
    }
});
