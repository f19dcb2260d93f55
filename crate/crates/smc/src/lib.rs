//! Self-distillation training on multiple augmentation channels.
//!
//! The crate trains small image classifiers with a step-to-step
//! self-distillation scheme: every mini-batch flows through one
//! gradient-bearing channel while sibling channels, fed independently
//! augmented copies of the *next* batch, produce temperature-softened soft
//! labels that the following step consumes through a KL consistency term. A
//! cosine weight shifts emphasis from the hard-label cross-entropy to the KL
//! terms as training proceeds.
//!
//! Everything needed to run desk-scale experiments is included: a dense
//! tensor core with reverse-mode autodiff, MLP/CNN models, dataset loaders
//! (CIFAR binary and IDX), deterministic per-channel augmentation, label
//! noise injection, comparator training methods (plain SGD, label smoothing,
//! last-batch distillation, sharpness-aware minimization), and CSV/SVG
//! reporting. See the `examples/` directory for one runnable program per
//! capability; the `smc` binary exposes the same surface as subcommands.

pub mod cli;
pub mod config;
pub mod rng;
pub mod report;
pub mod data;
pub mod gradsuite;
pub mod losses;
pub mod models;
pub mod tensor;
pub mod trainer;
