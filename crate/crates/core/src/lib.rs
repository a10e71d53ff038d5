//! Binary segmentation with a frozen ViT encoder tuned through residual
//! bottleneck adapters, a four-scale feature pyramid and a lightweight
//! U-Net decoder.
//!
//! ```
//! use sam3unet::encoder::EncoderConfig;
//! use sam3unet::model::Sam3UNet;
//!
//! let model = Sam3UNet::new(&EncoderConfig::toy(), 0).unwrap();
//! let images = ndarray::Array4::<f64>::zeros((1, 3, 84, 84));
//! let probs = model.predict(&images).unwrap();
//! assert_eq!(probs.shape(), &[1, 1, 84, 84]);
//! ```

pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod pyramid;
pub mod tensor_file;
pub mod trainer;

pub use error::{Error, Result};
pub use model::Sam3UNet;
