//! Federated protocol: domain grouping, local training, aggregation and the
//! alternating round scheduler.

pub mod aggregate;
pub mod client;
pub mod round;

pub use aggregate::{
    aggregate_global_prompt, aggregate_group_nets, beta_alphas, beta_momentum_average, domain_wise_aggregate,
    BetaSchedule,
};
pub use client::{local_train_stage_a, local_train_stage_b, ClientUpdate, LocalConfig};
pub use round::{
    group_by_domain, init_round, run_round, sample_clients, BankShape, ProtocolConfig, RoundLog, RoundState,
    Stage, StageSchedule,
};
