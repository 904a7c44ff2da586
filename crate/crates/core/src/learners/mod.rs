//! Per-device training loops.

pub mod ddql;
pub mod replay;
pub mod schedule;
pub mod supervised;

pub use ddql::{
    ddql_act, ddql_target_and_device_sync, ddql_train_batch, double_q_target, run_test_episode,
    DdqlAgent, DdqlConfig,
};
pub use replay::{ReplayBuffer, Transition};
pub use schedule::EpsilonSchedule;
pub use supervised::{
    evaluate_accuracy, supervised_train_round, validate_and_snapshot, RoundMetrics, SupervisedConfig,
    SupervisedTrainer,
};
