#![no_main]

use edgeprune::curvefit::FitCache;
use libfuzzer_sys::fuzz_target;

// a cache that parses must survive a round trip unchanged
fuzz_target!(|text: &str| {
    if let Ok(cache) = FitCache::parse(text) {
        let again = FitCache::parse(&cache.to_toml()).expect("rendered cache parses");
        assert_eq!(again, cache);
    }
});
