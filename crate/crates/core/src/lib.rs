//! Purely tactile in-hand cube reorientation at desk scale.
//!
//! A four-finger surrogate hand ([`env`]) is driven by a low-pass filtered
//! position controller. A soft actor-critic policy ([`policy`]) learns from
//! stacked proprioceptive frames, and a differentiable particle filter
//! ([`filter`]) estimates the cube pose from the same signals. [`pipeline`]
//! chains the curriculum stages and [`bench`] measures the result.

pub mod bench;
pub mod checkpoint;
pub mod env;
pub mod error;
pub mod filter;
pub mod math;
pub mod pipeline;
pub mod policy;
pub mod rewards;
pub mod rotations;

pub use error::{Error, Result};
pub use math::Vec3;
pub use rotations::{distance, reduce_symmetry, GoalSet, OctahedralGroup, Rotation};
