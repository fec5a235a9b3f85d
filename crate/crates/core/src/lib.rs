//! Column-wise N:M structured sparsity for GEMM-based convolution.
//!
//! The pipeline: prune a weight matrix into tile-level column-wise N:M form
//! ([`pruner`]), lay the input feature map out as vector-aligned strips in a
//! single fused im2col pass ([`packer`]), multiply with register-tiled
//! micro-kernels over a modeled RVV vector unit ([`kernels`]), and pick the
//! tile height and LMUL per layer by profiling ([`tuner`]).

pub mod conv;
pub mod error;
pub mod kernels;
pub mod manifest;
pub mod packer;
pub mod pruner;
pub mod random;
pub mod shapes;
pub mod tensor;
pub mod tuner;

pub use conv::{conv_forward, conv_forward_reference, run_model, ConvLayer};
pub use error::{Error, Result};
pub use kernels::{KernelConfig, KernelKind, Lmul, TrafficCounters, VectorEnv, WeightSource};
pub use packer::{fused_im2col_pack, im2col, pack, ConvGeometry, PackedMatrix};
pub use pruner::{Mask, PruneMode, PruneSpec, RowSparseWeight, SparseWeight};
pub use tensor::{Dims4, Layout, Matrix, Tensor};
