#![no_main]

use libfuzzer_sys::fuzz_target;
use specalloc::cost_model::{fit_cost_model, FitOptions};
use specalloc::io::parse_benchmark_csv;

fuzz_target!(|data: &[u8]| {
    let Ok(samples) = parse_benchmark_csv(data) else { return };
    for s in &samples {
        assert!(s.w > 0.0 && s.t > 0.0 && s.w.is_finite() && s.t.is_finite());
    }
    if samples.len() <= 64 {
        if let Ok(model) = fit_cost_model(&samples, &FitOptions::default()) {
            assert!(model.w_lo() < model.w_max());
        }
    }
});
