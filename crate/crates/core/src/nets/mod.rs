//! Generator, discriminator and their building blocks.

pub mod ops;
pub mod discriminator;
pub mod generator;
pub mod layers;
pub mod params;
pub mod resnet;
pub mod spade;
pub mod spectral;

pub use discriminator::{Discriminator, DiscriminatorConfig, DiscriminatorOutput, ScaleOutput};
pub use generator::{Generator, GeneratorConfig, Variant};
pub use layers::Mode;
pub use params::{ParamBuilder, ParamStore};
pub use spectral::{spectral_norm_step, SpectralStep};
