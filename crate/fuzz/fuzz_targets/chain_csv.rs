#![no_main]

use libfuzzer_sys::fuzz_target;
use specalloc::io::{parse_chain_csv, write_chain_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(chain) = parse_chain_csv(data) else { return };
    let dense = chain.to_dense();
    for row in &dense {
        assert!(row.iter().all(|&x| x >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
    let mut out = Vec::new();
    write_chain_csv(&chain, &mut out).unwrap();
    assert_eq!(parse_chain_csv(out.as_slice()).unwrap().to_dense(), dense);
});
