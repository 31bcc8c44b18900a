use std::path::PathBuf;

use assimilate::harness::SuiteConfig;

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

#[test]
fn shipped_default_equals_builtin() {
    let cfg = SuiteConfig::from_path(&config("default.toml")).unwrap();
    assert_eq!(cfg, SuiteConfig::default());
    assert_eq!(cfg.hash(), SuiteConfig::default().hash());
}

#[test]
fn smoke_config_validates() {
    let cfg = SuiteConfig::from_path(&config("smoke.toml")).unwrap();
    assert_ne!(cfg, SuiteConfig::default());
}

#[test]
fn empty_file_is_the_default() {
    assert_eq!(
        SuiteConfig::from_toml_str("").unwrap(),
        SuiteConfig::default()
    );
}
