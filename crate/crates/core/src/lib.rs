//! Composition and joint animation of a Gaussian-splat human and a
//! Gaussian-splat object.
//!
//! The crate is organized by pipeline stage:
//!
//! - [`gauss`]: the Gaussian data model, cameras, placement, PLY I/O
//! - [`render`]: software splat rasterizer with a gradient pullback
//! - [`body`]: skinned parametric body, forward kinematics, LBS, k-NN
//! - [`hexplane`]: factored spatiotemporal feature field with an MLP head
//! - [`motion`]: human/object motion fields, correspondence loss, penetration
//! - [`contact`]: segmentation providers, mask back-projection, contact init
//! - [`guidance`]: score-distillation gradients against pluggable providers
//! - [`opt`]: Adam and the composition/animation optimization loops

pub mod assets;
pub mod body;
pub mod contact;
pub mod gauss;
pub mod guidance;
pub mod hexplane;
pub mod math;
pub mod motion;
pub mod opt;
pub mod render;
pub mod wire;
