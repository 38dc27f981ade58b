#![no_main]

use libfuzzer_sys::fuzz_target;
use ltclip::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_toml(text) {
        let _ = cfg.validate();
        if let Ok(back) = cfg.to_toml() {
            assert_eq!(RunConfig::from_toml(&back).expect("serialized config parses"), cfg);
        }
    }
});
