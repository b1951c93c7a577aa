use std::path::Path;

use tsreason_core::config::RunConfig;

fn shipped() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml")
}

#[test]
fn shipped_default_config_matches_built_in_defaults() {
    let text = std::fs::read_to_string(shipped()).unwrap();
    let cfg = RunConfig::from_toml(&text).unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(text, RunConfig::default().to_toml());
}

#[test]
fn serialized_defaults_list_every_section() {
    let text = RunConfig::default().to_toml();
    for section in ["[circuit]", "[dataset]", "[tokenizer]", "[tokenizer_training]", "[model]", "[pretrain]", "[finetune]", "[eval]", "[ablation]"] {
        assert!(text.contains(section), "{section}");
    }
}
