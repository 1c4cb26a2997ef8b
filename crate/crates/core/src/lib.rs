//! Graph neural networks for transductive semi-supervised node classification.
//!
//! Three models share one small reverse-mode autodiff engine:
//!
//! * GLN, a linearized graph convolutional network `softmax(P² X W0 W1)`,
//! * GCN, the two-layer graph convolutional network with a ReLU between layers,
//! * AGNN, an embedding layer followed by attention-guided propagation layers
//!   whose neighbourhood weights are a softmax over `β · cos(h_i, h_j)`.
//!
//! Everything that touches the graph is sparse: propagation operators are stored
//! in CSR form with the self-loop-augmented pattern and no `n × n` dense matrix
//! is ever formed.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{CsrMatrix, NormalizedPropagator, SparseGraph};
pub use tensor::{Tape, Var};
