use std::path::Path;

use rationale_core::corpus::Task;
use rationale_core::runner::ExperimentConfig;
use rationale_core::TemplateRegistry;

#[test]
fn every_preset_parses_and_validates() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets");
    let registry = TemplateRegistry::builtin();
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|e| e != "toml") {
            continue;
        }
        let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let name = path.file_stem().unwrap().to_string_lossy();
        assert_eq!(cfg.name, name);
        let task = if name.contains("medicalbios") { Task::Bios } else { Task::Nli };
        cfg.check_templates(&registry, task)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen += 1;
    }
    assert_eq!(seen, 12);
}
