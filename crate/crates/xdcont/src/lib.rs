//! Bifurcation diagrams for the SKT cross-diffusion competition system and its
//! three-component fast-reaction relaxation.
//!
//! The library discretizes both steady-state problems with P1 finite elements
//! on intervals and axis-aligned rectangles (homogeneous Neumann conditions),
//! follows solution branches with pseudo-arclength continuation, localizes and
//! classifies branch points, folds and Hopf points, and cross-validates the
//! detected bifurcations against the closed-form Turing analysis of the
//! linearized system. On top of that sit scripted studies: eps-convergence of
//! fast-reaction bifurcation points toward the cross-diffusion limit, and
//! topology reports (ring counting) for diagrams in the growth parameter r1.
//!
//! Start with the runnable examples, one per capability:
//!
//! ```text
//! cargo run --example turing_tables      # closed-form critical diffusion tables (1D + 2D)
//! cargo run --example continuation_1d    # 1D diagram in d: branch points, switching, stability
//! cargo run --example mesh_refinement    # located branch points vs. the analytic oracle
//! cargo run --example epsilon_sweep      # fast-reaction B_i(eps) -> cross-diffusion, fitted order
//! cargo run --example rings_r1           # r1 diagrams at d=0.02: ring topology report
//! cargo run --example continuation_2d    # 1x4 rectangle: folds, multistability, Hopf hunt
//! cargo run --example relaxation         # IMEX time relaxation cross-check of stability
//! ```
//!
//! The same capabilities are scriptable through the thin `xdcont` binary
//! (`run`, `turing`, `sweep-eps`, `switch`, `mesh dump`, `plot-data`), driven
//! by JSON configs; see `configs/` for ready-made ones.

pub mod config;
pub mod continuation;
pub mod error;
pub mod experiments;
pub mod fem;
pub mod linalg;
pub mod mesh;
pub mod models;
pub mod output;
pub mod stability;
pub mod turing;

pub use error::{Error, Result};
