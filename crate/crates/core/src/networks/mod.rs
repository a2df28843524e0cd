pub mod encoder;
pub mod layers;
pub mod model;

pub use encoder::{Encoder, EncoderKind, EncoderOutput};
pub use layers::{Mlp, MlpSpec, Mode};
pub use model::{BranchOutput, FraModel, ModelConfig, ModelPair, MOMENTUM, ONLINE};
