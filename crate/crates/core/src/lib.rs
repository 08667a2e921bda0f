//! Endpoint box regression: refines object location proposals into oriented
//! 3D boxes from the LiDAR points sampled around each proposal.
//!
//! This crate is `no_std` (with `alloc`) and holds every pure algorithmic
//! piece: box geometry and rotated IoU, the closed-form output codecs, the
//! PointNet-style building block with hand-written reverse-mode gradients,
//! sample generation and batch refinement, and the detection metrics. File
//! formats, dataset synthesis and the command-line tool live in the `epbrm`
//! companion crate.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod boxcodec;
pub mod checkpoint;
pub mod class;
pub mod evaluator;
pub mod geometry;
pub mod oracle;
pub mod network;
pub mod pipeline;
pub mod trainer;

mod math;

pub use class::ObjectClass;
pub use geometry::{Box3D, Detection, Point3, PointCloud, Size3};
