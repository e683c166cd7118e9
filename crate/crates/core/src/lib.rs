pub mod corpus;
pub mod evalkit;
pub mod gradsuite;
pub mod losses;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod probe;
pub mod sampler;
pub mod trainer;
pub mod vocab;
