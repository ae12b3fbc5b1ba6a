//! The shipped config files load and validate.

use meanfield::cli::{load_config, Method, RunArgs};

#[test]
fn shipped_configs_resolve() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|e| e != "toml") {
            continue;
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let value: toml::Table = text.parse().unwrap();
        let method = match value["method"].as_str().unwrap() {
            "mfc-direct" => Method::MfcDirect,
            "fbsde-shoot" => Method::FbsdeShoot,
            "dgm" => Method::Dgm,
            "oracle" => Method::Oracle,
            m => panic!("{}: unknown method {}", path.display(), m),
        };
        let args = RunArgs {
            config: None,
            seed: Some(1),
            out: None,
            model: None,
            set: Vec::new(),
        };
        let r = load_config(method, &text, &args).unwrap_or_else(|e| panic!("{}: {}", path.display(), e));
        assert_eq!(r.method, method);
        seen += 1;
    }
    assert!(seen >= 5);
}
