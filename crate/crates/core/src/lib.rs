pub mod colorspace;
pub mod image_io;
pub mod losses;
pub mod metrics;
pub mod tensor;
pub mod unet;
pub mod pipeline;
