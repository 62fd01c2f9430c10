#![no_main]
use bivsr::checkpoint::Container;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Container::decode(data) {
        // Anything that decodes must re-encode to the same bytes.
        let again = c.encode().expect("decoded container re-encodes");
        assert_eq!(again, data);
    }
});
