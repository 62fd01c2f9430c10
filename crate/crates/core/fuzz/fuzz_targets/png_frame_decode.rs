#![no_main]
use bivsr::video::Frame;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(frame) = Frame::from_png_bytes(data) {
        assert_eq!(frame.data().len(), 3 * frame.height() * frame.width());
        assert!(frame.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
