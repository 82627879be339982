//! Multiclass boosting with adaptive one-vs-one vector trees.
//!
//! [`booster::train`] fits AOSO-LogitBoost (one tree per iteration, each node
//! updating an adaptively chosen class pair), ABC-LogitBoost, or plain
//! LogitBoost on a [`data::Dataset`].

pub mod bench;
pub mod booster;
pub mod data;
pub mod error;
pub mod model_io;
pub mod numerics;
pub mod pair;
pub mod tree;

pub use booster::{train, train_with, AbcBaseRule, Algorithm, BoostState, Model, TrainConfig};
pub use data::Dataset;
pub use error::{Error, Result};
pub use numerics::ClassLabel;
pub use pair::PairRule;
