//! Fixtures shared by the benchmarks.

use feddcg_core::prompt::DEFAULT_STUB_SEED;
use feddcg_core::protocol::{
    init_round, BankShape, BetaSchedule, LocalConfig, ProtocolConfig, RoundState, StageSchedule,
};
use feddcg_core::{
    generate_synthetic, partition_clients, ClientPartition, EmbeddingStore, NetShape, SyntheticSpec,
    TextEncoderStub,
};

/// A synthetic federation ready to run rounds on.
pub struct Federation {
    pub store: EmbeddingStore,
    pub partitions: Vec<ClientPartition>,
    pub stub: TextEncoderStub,
    pub config: ProtocolConfig,
    pub state: RoundState,
}

pub struct Scale {
    pub domains: usize,
    pub classes: usize,
    pub dim: usize,
    pub hidden: usize,
    pub clients_per_domain: usize,
    pub classes_per_client: usize,
    pub batch_size: usize,
}

/// Three domains of ten classes at width 32.
pub const TOY: Scale = Scale {
    domains: 3,
    classes: 10,
    dim: 32,
    hidden: 32,
    clients_per_domain: 2,
    classes_per_client: 10,
    batch_size: 32,
};

/// Prompt-network width of the reference configuration on a 20-class store.
pub const WIDE: Scale = Scale {
    domains: 3,
    classes: 20,
    dim: 512,
    hidden: 512,
    clients_per_domain: 6,
    classes_per_client: 20,
    batch_size: 128,
};

pub fn federation(scale: &Scale) -> Federation {
    let store = generate_synthetic(&SyntheticSpec {
        num_domains: scale.domains,
        num_classes: scale.classes,
        dim: scale.dim,
        token_dim: scale.dim,
        images_per_class_per_domain: 20,
        domain_shift: 0.6,
        noise: 0.05,
        seed: 1,
    })
    .expect("valid synthetic spec");
    let partitions = partition_clients(&store, scale.clients_per_domain, scale.classes_per_client, 1.0, 1)
        .expect("every cell has enough images");
    let shape = NetShape {
        prompt_len: 4,
        hidden: scale.hidden,
        heads: 4,
        token_dim: scale.dim,
    };
    let bank = BankShape {
        global_len: 4,
        domain_len: 4,
    };
    let schedule = StageSchedule::default();
    let state =
        init_round(&partitions, scale.domains, shape, bank, 1, &schedule).expect("every domain has clients");
    Federation {
        stub: TextEncoderStub::new(scale.dim, scale.dim, DEFAULT_STUB_SEED).expect("valid stub"),
        store,
        partitions,
        config: ProtocolConfig {
            participation: 1.0,
            local: LocalConfig {
                epochs: 1,
                batch_size: scale.batch_size,
                tau: 0.07,
                mix: 0.5,
            },
            base_lr: 1e-3,
            min_lr: 0.0,
            total_rounds: 250,
            beta: BetaSchedule::default(),
            normalized_momentum: false,
            schedule,
            log_timing: false,
        },
        state,
    }
}
