//! Cost model, gradient checks, verification suite and the drivers behind
//! the command line.

pub mod bench;
pub mod config;
pub mod cost;
pub mod gradcheck;
pub mod train;
pub mod verify;
pub mod viz;

pub use bench::{bench_csv, run_bench, BenchOptions, BenchRow};
pub use config::{load_train_config, train_config_from_str};
pub use cost::{extra_ratio, model_cost, rvsa_extra_flops, window_attention_flops, CostReport, ExtraCost, LayerCost, WindowAttentionCost};
pub use gradcheck::{gradcheck_module, ModuleCheck, TensorCheck, MODULES};
pub use train::{run_pretrain, PretrainSummary};
pub use verify::{run_suite, CheckOutcome, Fault, SuiteOptions, VerifyReport};
pub use viz::{export_layer_geometry, layer_transforms, GeometryFiles, VizOptions};
