//! Key-locked layer machinery: permutation keys, coordinate encodings, the
//! implicit modulation network, and the locked linear layer itself.

pub mod encoding;
pub mod inr;
pub mod key;
pub mod layer;

pub use encoding::{coordinate, encode, MAX_LEVELS};
pub use inr::{Activation, InrInit, InrNetwork, InrParamGrads};
pub use key::{KeySet, PermutationKey};
pub use layer::{InrLinearLayer, LockedGrads, ModulationCache};
