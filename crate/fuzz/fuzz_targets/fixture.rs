#![no_main]

use edgeprune::model::ModelFixture;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(fixture) = ModelFixture::parse(text) {
        let _ = fixture.build();
    }
});
