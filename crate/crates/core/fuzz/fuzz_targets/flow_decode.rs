#![no_main]
use bivsr::flow::FlowField;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(f) = FlowField::decode(data) {
        assert_eq!(f.encode(), data);
    }
});
