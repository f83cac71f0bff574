//! Small four-stage convolutional backbone producing feature maps at
//! strides 8, 16, and 32.

use crate::error::{Error, Result};
use candle_core::Tensor;
use candle_nn::{conv2d, Conv2d, Conv2dConfig, Module, VarBuilder};

struct Stage {
    down: Conv2d,
    refine: Conv2d,
}

impl Stage {
    fn new(c_in: usize, c_out: usize, vb: VarBuilder) -> Result<Self> {
        let stride2 = Conv2dConfig {
            padding: 1,
            stride: 2,
            ..Default::default()
        };
        let same = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        Ok(Stage {
            down: conv2d(c_in, c_out, 3, stride2, vb.pp("down"))?,
            refine: conv2d(c_out, c_out, 3, same, vb.pp("refine"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.down.forward(x)?.relu()?;
        Ok((self.refine.forward(&x)?.relu()? + x)?)
    }
}

pub struct Backbone {
    stages: Vec<Stage>,
    extra: Conv2d,
}

impl Backbone {
    pub fn new(channels: [usize; 4], vb: VarBuilder) -> Result<Self> {
        let mut stages = Vec::new();
        let mut c_in = 3;
        for (i, &c) in channels.iter().enumerate() {
            stages.push(Stage::new(c_in, c, vb.pp(format!("stage{i}")))?);
            c_in = c;
        }
        let stride2 = Conv2dConfig {
            padding: 1,
            stride: 2,
            ..Default::default()
        };
        let extra = conv2d(c_in, c_in, 3, stride2, vb.pp("extra"))?;
        Ok(Backbone { stages, extra })
    }

    /// `images` is `[b, 3, h, w]` with `h`, `w` divisible by 32. Returns
    /// maps at strides 8, 16, 32.
    pub fn forward(&self, images: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (_, _, h, w) = images.dims4()?;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Contract(format!(
                "image size {h}x{w} not divisible by the total stride 32"
            )));
        }
        let mut x = images.clone();
        let mut f8 = None;
        let mut f16 = None;
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.forward(&x)?;
            if i == 2 {
                f8 = Some(x.clone());
            }
            if i == 3 {
                f16 = Some(x.clone());
            }
        }
        let f32map = self.extra.forward(&x)?.relu()?;
        Ok((f8.unwrap(), f16.unwrap(), f32map))
    }
}
