//! Frozen multi-scale feature extractor.
//!
//! Four stages of bias-free 3x3 convolutions with relu, seeded once and never
//! trained. Stage 1 keeps full resolution, each later stage halves it, so
//! level `j` of the pyramid is `H / 2^(j-1)` on a side.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Real, Result};

pub const DEFAULT_FEATURE_SEED: u64 = 0x5eed;

/// Network width preset shared by the extractor and the LUT network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

impl Profile {
    /// Channels of the four pyramid levels.
    pub fn channels(self) -> [usize; 4] {
        match self {
            Profile::Desk => [16, 32, 64, 128],
            Profile::Paper => [64, 128, 256, 512],
        }
    }

    /// Output channels of every splatting block.
    pub fn c_mid(self) -> usize {
        match self {
            Profile::Desk => 64,
            Profile::Paper => 256,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::InvalidInput(format!(
                "unknown profile {other:?}, expected desk or paper"
            ))),
        }
    }
}

#[derive(Clone)]
struct Stage<T: Real> {
    down: Tensor<T>,
    stride: usize,
    refine: Tensor<T>,
}

/// The four feature maps of one image batch, finest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub levels: [Var; 4],
}

#[derive(Clone)]
pub struct FeatureExtractor<T: Real = f32> {
    profile: Profile,
    seed: u64,
    stages: Vec<Stage<T>>,
}

/// Bias-free conv kernel, uniform in `+-1/sqrt(fan_in)`.
pub(crate) fn conv_kernel<T: Real>(
    out: usize,
    inp: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let fan_in = inp * k * k;
    Tensor::<f64>::uniform(&[out, inp, k, k], 1.0 / (fan_in as f64).sqrt(), rng).cast()
}

impl<T: Real> FeatureExtractor<T> {
    pub fn new(profile: Profile, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prev = 3;
        let stages = profile
            .channels()
            .iter()
            .enumerate()
            .map(|(j, &c)| {
                // Downsample in the first conv of a stage so the second one
                // runs at the reduced resolution.
                let stage = Stage {
                    down: conv_kernel(c, prev, 3, &mut rng),
                    stride: if j == 0 { 1 } else { 2 },
                    refine: conv_kernel(c, c, 3, &mut rng),
                };
                prev = c;
                stage
            })
            .collect();
        Self { profile, seed, stages }
    }

    pub fn profile(&self) -> Profile {
        self.profile
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Kernels of every stage in evaluation order.
    pub fn kernels(&self) -> Vec<&Tensor<T>> {
        self.stages.iter().flat_map(|s| [&s.down, &s.refine]).collect()
    }

    /// Runs an `N x 3 x H x W` batch through the extractor. Kernels enter the
    /// tape as constants; gradients still flow to `img`.
    pub fn extract(&self, tape: &mut Tape<T>, img: Var) -> Result<FeaturePyramid> {
        let (_, c, h, w) = tape.value(img).nchw()?;
        if c != 3 {
            return Err(Error::shape(format!("extractor needs 3 channels, got {c}")));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::InvalidInput(format!(
                "feature extraction needs height and width divisible by 8, got {w}x{h}; resize the input first"
            )));
        }
        let mut x = img;
        let mut levels = Vec::with_capacity(4);
        for stage in &self.stages {
            let k1 = tape.constant(stage.down.clone());
            x = tape.conv2d(x, k1, stage.stride, 1)?;
            x = tape.relu(x)?;
            let k2 = tape.constant(stage.refine.clone());
            x = tape.conv2d(x, k2, 1, 1)?;
            x = tape.relu(x)?;
            levels.push(x);
        }
        Ok(FeaturePyramid {
            levels: [levels[0], levels[1], levels[2], levels[3]],
        })
    }
}
