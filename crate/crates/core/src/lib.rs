//! Multi-task conditional diffusion for styled motion synthesis. Numeric code
//! is generic over [`scalar::Scalar`]; the aliases below fix the precision.

pub mod autograd;
pub mod error;
pub mod scalar;
pub mod tensor;
pub mod nn;
pub mod schedule;
pub mod geometry;
pub mod motiondata;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod losses;
pub mod trainer;
pub mod sampler;
pub mod postprocess;
pub mod evaluation;

/// Training and sampling run in single precision.
pub type Real = f32;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Schedule = schedule::NoiseSchedule<f64>;
pub type Clip = motiondata::MotionClip<Real>;
pub type ModelTrainer = trainer::Trainer<Real>;
pub type ModelGenerator = sampler::Generator<Real>;
pub type ContentClassifier = evaluation::Classifier<Real>;

/// Independent seed for a numbered sub-stream of `seed` (SplitMix64 mixing).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(seed ^ mix(stream))
}
