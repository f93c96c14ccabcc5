pub mod actions;
pub mod ensemble;
pub mod features;
pub mod model;

pub use actions::{generate_add_actions, generate_change_label_actions, AddCandidate};
pub use ensemble::{EnsembleManifest, EnsembleModels, DEFAULT_K_SPLIT};
pub use features::{FixedFeature, PoolingPredicate, ProposalFeature};
pub use model::{ContextConfig, ContextGrads, ContextModel, HeadKind, Target};
