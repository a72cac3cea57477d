//! Dual-branch cross-patch attention transformer, built from first principles.
//!
//! Two vision-transformer branches read a global scene and a crop of its most
//! important person (MIP). After their encoder stacks, the branches exchange
//! information through bidirectional cross-patch attention: each branch ranks
//! its patch tokens by class attention, keeps the top fraction as queries and
//! attends over every token of the other branch. The two class tokens are
//! then combined and fed to a linear head.
//!
//! The crate is `no_std` (it needs `alloc`). It carries its own dense tensor
//! with a reverse-mode tape, the model, a seeded synthetic task, and the
//! optimizer and training loop. File formats, threading and the command line
//! live in the companion `dcat` crate.

#![no_std]

extern crate alloc;

pub mod cka;
pub mod cpa;
pub mod error;
pub mod image;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod ranking;
pub mod record;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use model::{DcatConfig, DcatModel, Fusion, HeadCombine, Task};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DType, Scalar, Tensor};
