//! Differential convolution attention for two-branch RGB-D segmentation.
//!
//! A differential kernel rescales every tap of a convolution by
//! `exp(-|X(p) - X(p + p_i)|)`, so weights fade across depth discontinuities.
//! [`attention`] builds the DCA and EDCA attention blocks from it and wires them
//! into a fusion block; [`net`] stacks fusion blocks into a small segmentation
//! network that [`train`] fits on scenes from [`data`].
//!
//! ```
//! use dcattn::{ops::{diff_conv2d, ConvSpec}, Shape, Tensor};
//! let x = Tensor::<f64>::filled(Shape::new(1, 1, 3, 3).unwrap(), 1.0).unwrap();
//! let w = Tensor::<f64>::ones(Shape::new(1, 1, 3, 3).unwrap()).unwrap();
//! let y = diff_conv2d(&x, &w, ConvSpec::dense(3).unwrap()).unwrap();
//! // constant input: every tap keeps factor 1
//! assert!((y.at(0, 0, 1, 1) - 9.0).abs() < 1e-12);
//! ```

pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod net;
pub mod nn;
pub mod ops;
pub mod parallel;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Shape, Tensor};
