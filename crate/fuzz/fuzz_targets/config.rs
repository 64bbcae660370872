#![no_main]

use edgeprune::config::ScenarioConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let _ = ScenarioConfig::parse(text);
});
