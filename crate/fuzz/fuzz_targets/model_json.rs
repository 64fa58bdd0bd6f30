#![no_main]

use libfuzzer_sys::fuzz_target;
use specalloc::io::{parse_model_json, write_model_json};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(model) = parse_model_json(text) else { return };
    assert!(model.w_lo() > 0.0 && model.w_lo() < model.w_max());
    let y = model.efficiency(model.w_lo()).unwrap() * 0.5;
    let w = model.invert_efficiency(y).unwrap();
    assert!(w >= model.w_lo() && w <= model.w_max());
    let mut out = Vec::new();
    write_model_json(&model, &mut out).unwrap();
    let back = parse_model_json(std::str::from_utf8(&out).unwrap()).unwrap();
    assert_eq!(back.w_max(), model.w_max());
});
