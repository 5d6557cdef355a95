use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of ×2 upsampling stages in the image decoder.
pub const DECODER_STAGES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        ImageShape {
            height,
            width,
            channels,
        }
    }

    pub fn numel(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }
}

/// Architecture of the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Embedding dimension of the input feature.
    pub dim: usize,
    /// Width of the hidden layer between the two expansion layers.
    pub hidden: usize,
    /// Row tokens in the expanded feature map.
    pub tokens: usize,
    /// Channels per token.
    pub channels: usize,
    /// Token-mixing encoder blocks.
    pub blocks: usize,
    /// Output channels of the first three decoder stages; the last stage
    /// emits the image channels.
    pub decoder_channels: [usize; DECODER_STAGES - 1],
    pub image: ImageShape,
    /// Fixed factor applied to input features before expansion.
    pub input_scale: f64,
}

impl GeneratorConfig {
    /// Desk-scale defaults: 64-d features, 8×64 token map, 16×16×1 images.
    pub fn toy() -> Self {
        GeneratorConfig {
            dim: 64,
            hidden: 64,
            tokens: 8,
            channels: 64,
            blocks: 2,
            decoder_channels: [64, 32, 16],
            image: ImageShape::new(16, 16, 1),
            input_scale: 8.0 / 21.0,
        }
    }

    /// Full-size layout: 512-d features expanded to 49 tokens × 768 channels
    /// and decoded to 112×112×3. Only used for shape bookkeeping.
    pub fn paper_scale() -> Self {
        GeneratorConfig {
            dim: 512,
            hidden: 768,
            tokens: 49,
            channels: 768,
            blocks: 12,
            decoder_channels: [384, 192, 96],
            image: ImageShape::new(112, 112, 3),
            input_scale: 1.0,
        }
    }

    pub fn token_map_shape(&self) -> (usize, usize) {
        (self.tokens, self.channels)
    }

    /// Spatial grid the token map is reshaped to before decoding.
    pub fn decoder_grid(&self) -> (usize, usize) {
        let f = 1 << DECODER_STAGES;
        (self.image.height / f, self.image.width / f)
    }

    pub fn decoder_input_channels(&self) -> usize {
        let (gh, gw) = self.decoder_grid();
        self.tokens * self.channels / (gh * gw).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let f = 1 << DECODER_STAGES;
        if [self.dim, self.hidden, self.tokens, self.channels, self.image.channels]
            .contains(&0)
        {
            return Err(Error::invalid("generator dimensions must be positive"));
        }
        if self.image.height % f != 0 || self.image.width % f != 0 {
            return Err(Error::invalid(format!(
                "image {}x{} not divisible by {f}",
                self.image.height, self.image.width
            )));
        }
        let (gh, gw) = self.decoder_grid();
        if gh * gw == 0 || (self.tokens * self.channels) % (gh * gw) != 0 {
            return Err(Error::invalid(
                "token map does not tile the decoder input grid",
            ));
        }
        if self.decoder_channels.contains(&0) {
            return Err(Error::invalid("decoder channels must be positive"));
        }
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return Err(Error::invalid("input_scale must be positive"));
        }
        Ok(())
    }

    /// Names and shapes of every parameter tensor, in checkpoint order.
    pub fn layer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (r, c) = (self.tokens, self.channels);
        let mut v = vec![
            ("expand1.w".to_string(), vec![self.dim, self.hidden]),
            ("expand1.b".to_string(), vec![self.hidden]),
            ("expand2.w".to_string(), vec![self.hidden, r * c]),
            ("expand2.b".to_string(), vec![r * c]),
            ("cond.w".to_string(), vec![self.dim, c]),
            ("cond.b".to_string(), vec![c]),
        ];
        for b in 0..self.blocks {
            v.push((format!("block{b}.token.w"), vec![c, c]));
            v.push((format!("block{b}.token.b"), vec![c]));
            v.push((format!("block{b}.mix.w"), vec![r, r]));
            v.push((format!("block{b}.mix.b"), vec![c]));
        }
        let mut cin = self.decoder_input_channels();
        for s in 0..DECODER_STAGES {
            let cout = if s + 1 == DECODER_STAGES {
                self.image.channels
            } else {
                self.decoder_channels[s]
            };
            v.push((format!("dec{s}.w"), vec![cin, 4 * cout]));
            v.push((format!("dec{s}.b"), vec![4 * cout]));
            cin = cout;
        }
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_scale_token_map() {
        let c = GeneratorConfig::paper_scale();
        c.validate().unwrap();
        assert_eq!(c.token_map_shape(), (49, 768));
        assert_eq!(c.decoder_grid(), (7, 7));
        let shapes = c.layer_shapes();
        assert_eq!(shapes[2].1, vec![768, 49 * 768]);
        assert_eq!(shapes[0].1[0], 512);
    }

    #[test]
    fn toy_config_is_valid() {
        let c = GeneratorConfig::toy();
        c.validate().unwrap();
        assert_eq!(c.decoder_grid(), (1, 1));
        assert_eq!(c.decoder_input_channels(), 512);
    }

    #[test]
    fn bad_image_size_rejected() {
        let mut c = GeneratorConfig::toy();
        c.image.height = 12;
        assert!(c.validate().is_err());
    }
}
