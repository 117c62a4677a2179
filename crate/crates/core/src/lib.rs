//! Spiking neural network inference engine and cost profiler.
//!
//! The building blocks: integrate-and-fire neurons over discrete time
//! steps, integer-only denoising of binary feature maps, CSP-style spiking
//! residual blocks, membrane-domain pyramid pooling, per-time-step batch
//! normalization with inference-time weight folding, and a synaptic
//! operation / energy accounting model driven by measured firing rates.
//!
//! ```
//! use spikenet_core::graph::{parse_config, random_weights, BoundGraph, ForwardOptions};
//! use spikenet_core::tensor::{FloatTensor, Shape};
//!
//! let graph = parse_config(
//!     "tsteps=2
//!      node enc ENCODER out_ch=4
//!      node dn DENOISE downsample=maxpool2 inputs=enc
//!      node b1 SUBLOCK1 out_ch=8 inputs=dn
//!      node head DETECTHEAD classes=2 inputs=b1,b1",
//! )?;
//! let weights = random_weights(&graph, 7)?;
//! let net = BoundGraph::bind(&graph, &weights)?;
//!
//! let image = FloatTensor::zeros(Shape::new(1, 3, 32, 32)?);
//! let (predictions, trace) = net.forward(&image, &ForwardOptions::default())?;
//! assert_eq!(predictions.len(), 2); // one raw map per scale
//! assert!(trace.if_sites.iter().all(|s| s.overall <= 1.0));
//! # Ok::<(), spikenet_core::Error>(())
//! ```

pub mod conv;
pub mod denoise;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod neuron;
pub mod norm;
pub mod pgm;
pub mod profile;
pub mod tensor;
pub mod tensor_file;

pub use error::{Error, Result};
pub use tensor::{Dtype, FloatTensor, Shape, SpikeTensor, Tensor};
