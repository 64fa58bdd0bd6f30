#![no_main]

use libfuzzer_sys::fuzz_target;
use specalloc::taskdist::DistributionKind;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(kind) = text.parse::<DistributionKind>() {
        kind.validate().unwrap();
    }
});
