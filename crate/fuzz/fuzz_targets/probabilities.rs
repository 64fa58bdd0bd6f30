#![no_main]

use libfuzzer_sys::fuzz_target;
use specalloc::io::{parse_probabilities, write_probabilities};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(dist) = parse_probabilities(text) else { return };
    assert!(dist.probabilities().windows(2).all(|w| w[0] >= w[1]));
    let mut out = Vec::new();
    write_probabilities(&dist, &mut out).unwrap();
    let back = parse_probabilities(std::str::from_utf8(&out).unwrap()).unwrap();
    assert_eq!(back, dist);
});
