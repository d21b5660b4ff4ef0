//! Low-resource deep entity resolution: a BiGRU matcher, adversarial
//! dataset adaptation, and partition-sampling active learning.

pub mod active;
pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod embed;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod trainer;
