use std::path::Path;

use replaykd::config::{BlobSettings, RunConfigFile};
use replaykd::distill::{DistillConfig, ReplayMode, TeacherConfig};

fn shipped() -> RunConfigFile {
    RunConfigFile::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/blobs.cfg")).unwrap()
}

#[test]
fn shipped_config_matches_benchmark_presets() {
    let f = shipped();
    assert_eq!(f.blob_settings().unwrap(), BlobSettings::benchmark());
    assert_eq!(f.teacher_config().unwrap(), TeacherConfig::benchmark());
    for mode in [ReplayMode::PreDfkd, ReplayMode::NoReplay, ReplayMode::BufferReplay] {
        assert_eq!(f.distill_config(Some(mode)).unwrap(), DistillConfig::benchmark(mode, 0));
    }
    assert_eq!(f.get("eval_data"), Some("blobs:eval"));
}
