use super::ops;
use super::params::ParamStore;
use candle_core::{Result, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
    dilation: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Self> {
        let weight = store.uniform_fan_in(&format!("{name}.weight"), &[c_out, c_in, k], c_in * k, 1.0)?;
        let bias = Some(store.constant(&format!("{name}.bias"), &[c_out], 0.0)?);
        Ok(Self { weight, bias, stride, padding, dilation })
    }

    /// Stride-1 convolution that preserves length for odd `k`.
    pub fn same(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, dilation: usize) -> Result<Self> {
        Self::new(store, name, c_in, c_out, k, 1, dilation * (k - 1) / 2, dilation)
    }

    /// Rescales the freshly initialized weight, e.g. to start an output head small.
    pub fn scale_weight(self, factor: f32) -> Result<Self> {
        self.weight.set(&self.weight.as_tensor().affine(factor as f64, 0.0)?)?;
        Ok(self)
    }

    pub fn set_bias(&self, values: &[f32]) -> Result<()> {
        if let Some(b) = &self.bias {
            b.set(&Tensor::from_slice(values, b.shape(), b.device())?)?;
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ops::conv1d(x, self.weight.as_tensor(), self.stride, self.padding, self.dilation)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.as_tensor().reshape((1, (), 1))?),
            None => Ok(y),
        }
    }
}

/// Transposed convolution with kernel `2 * stride`, upsampling length by exactly `stride`.
#[derive(Debug, Clone)]
pub struct Upsample1d {
    weight: Var,
    bias: Var,
    stride: usize,
}

impl Upsample1d {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let k = 2 * stride;
        let weight = store.uniform_fan_in(&format!("{name}.weight"), &[c_in, c_out, k], c_in * 2, 1.0)?;
        let bias = store.constant(&format!("{name}.bias"), &[c_out], 0.0)?;
        Ok(Self { weight, bias, stride })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.stride;
        let y = ops::conv_transpose1d(x, self.weight.as_tensor(), s, s.div_ceil(2), s % 2)?;
        y.broadcast_add(&self.bias.as_tensor().reshape((1, (), 1))?)
    }
}

#[derive(Debug, Clone)]
pub struct Snake {
    alpha: Var,
}

impl Snake {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self { alpha: store.constant(&format!("{name}.alpha"), &[channels], 1.0)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::snake(x, self.alpha.as_tensor())
    }
}

/// Snake, dilated k=7 convolution, snake, pointwise convolution, plus skip.
#[derive(Debug, Clone)]
pub struct ResidualUnit {
    act1: Snake,
    conv1: Conv1d,
    act2: Snake,
    conv2: Conv1d,
}

impl ResidualUnit {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, dilation: usize) -> Result<Self> {
        Ok(Self {
            act1: Snake::new(store, &format!("{name}.act1"), channels)?,
            conv1: Conv1d::same(store, &format!("{name}.conv1"), channels, channels, 7, dilation)?,
            act2: Snake::new(store, &format!("{name}.act2"), channels)?,
            conv2: Conv1d::same(store, &format!("{name}.conv2"), channels, channels, 1, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.act1.forward(x)?;
        let y = self.conv1.forward(&y)?;
        let y = self.act2.forward(&y)?;
        let y = self.conv2.forward(&y)?;
        x + y
    }
}
