#![no_main]

use libfuzzer_sys::fuzz_target;
use specalloc::io::parse_budgets;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(budgets) = parse_budgets(text) {
        assert!(!budgets.is_empty());
        assert!(budgets.iter().all(|b| b.is_finite() && *b > 0.0));
    }
});
