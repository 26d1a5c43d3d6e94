#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = fedgr::config::parse_config_str(text) {
        let _ = cfg.validate();
        let again = fedgr::config::parse_config_str(&cfg.to_toml()).unwrap();
        assert_eq!(cfg.hash(), again.hash());
    }
});
