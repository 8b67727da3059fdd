//! Active inverse reward design.
//!
//! A designer's true reward is learned by asking small reward-design
//! queries, observing which candidate reward the designer picks, and updating
//! a posterior over a finite sample of true rewards. Queries are chosen to
//! maximize expected information gain about the true reward.

pub mod environments;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod planning;
pub mod query;
pub mod reward_space;

pub use error::{Error, Result};
