//! Networks: the density-conditioned generator, the patch discriminator
//! and the building blocks both share.

pub mod audit;
pub mod discriminator;
pub mod generator;
pub mod layers;
pub mod params;

pub use params::Initializer;

pub use discriminator::{DiscLayer, Discriminator, DiscriminatorConfig};
pub use generator::{BridgeMode, Conditioning, Conditions, Generator, GeneratorConfig, GeneratorInput, Mode};
pub use params::{Grads, ParamKind, ParamStore};
