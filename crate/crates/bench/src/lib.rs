//! Shared fixtures for the criterion benches.

use styletrans_core::config::ExperimentConfig;
use styletrans_core::meta::StyleTask;

/// The small training configuration the benches exercise: it matches the
/// shape of the end-to-end test protocol.
pub fn bench_config() -> ExperimentConfig {
    ExperimentConfig {
        d_model: 16,
        heads: 4,
        window_size: 2,
        shift_size: 1,
        image_size: 64,
        batch_size: 1,
        content_count: 4,
        style_count: 2,
        outer_iters: 1,
        seed: 17,
        ..ExperimentConfig::default()
    }
}

pub fn bench_task() -> StyleTask {
    StyleTask::new(&bench_config()).expect("bench task")
}
