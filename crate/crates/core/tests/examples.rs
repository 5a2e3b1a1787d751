use std::path::{Path, PathBuf};

use twinforge::classifier::ModeKind;
use twinforge::pipeline::PipelineConfig;
use twinforge::simulator::{default_warehouse_config, PlantConfig};

fn example(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../config/examples")
        .join(name)
}

#[test]
fn plant_example_is_the_default_warehouse() {
    let text = std::fs::read_to_string(example("plant.toml")).unwrap();
    let plant = PlantConfig::from_toml(&text).unwrap();
    assert_eq!(plant, default_warehouse_config());
    assert_eq!(plant.sensor_count(), 16);
    assert_eq!(plant.runs.len(), 48);
}

#[test]
fn pipeline_example_uses_default_parameters() {
    let config = PipelineConfig::load(&example("pipeline.toml")).unwrap();
    assert_eq!(config.segmentation, Default::default());
    assert_eq!(config.dtw, Default::default());
    assert_eq!(config.classifier, Default::default());
    assert_eq!(config.classifier.mode, ModeKind::Windowed);
    assert_eq!(config.fusion, Default::default());
    assert!(config.inputs.plc.ends_with("fixtures/warehouse_plc.xml"));
    assert!(config.inputs.plc.exists());
}
