#![no_main]

use edgeprune::sim::parse_trace;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(arrivals) = parse_trace(text) {
        assert!(arrivals.windows(2).all(|w| w[0] <= w[1]));
    }
});
