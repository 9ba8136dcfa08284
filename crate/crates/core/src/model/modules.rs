//! Building blocks shared by the posterior encoder and the flow couplings.

use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{self, Conv1dLayer, ParamBuilder};

/// Numerically stable sigmoid built on tanh.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x / 2.0)?.tanh()?.affine(0.5, 0.5))?)
}

/// Gated dilated-convolution stack with global speaker conditioning, in the
/// WaveNet style: each layer computes tanh/sigmoid gates from the dilated
/// conv plus a 1x1 projection of the speaker vector, with a residual path.
pub struct GatedConvStack {
    in_layers: Vec<Conv1dLayer>,
    cond_layers: Vec<Conv1dLayer>,
    res_layers: Vec<Conv1dLayer>,
    hidden: usize,
}

impl GatedConvStack {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        hidden: usize,
        cond_dim: usize,
        kernel: usize,
        n_layers: usize,
        dilation_growth: usize,
    ) -> Result<Self> {
        let mut in_layers = Vec::with_capacity(n_layers);
        let mut cond_layers = Vec::with_capacity(n_layers);
        let mut res_layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let dilation = dilation_growth.pow(i as u32).max(1);
            let padding = (kernel - 1) * dilation / 2;
            in_layers.push(nn::conv1d(
                pb,
                &format!("in{i}"),
                hidden,
                2 * hidden,
                kernel,
                1,
                padding,
                dilation,
            )?);
            cond_layers.push(nn::conv1d(
                pb,
                &format!("cond{i}"),
                cond_dim,
                2 * hidden,
                1,
                1,
                0,
                1,
            )?);
            res_layers.push(nn::conv1d(
                pb,
                &format!("res{i}"),
                hidden,
                hidden,
                1,
                1,
                0,
                1,
            )?);
        }
        Ok(Self {
            in_layers,
            cond_layers,
            res_layers,
            hidden,
        })
    }

    /// x: (B, hidden, T), cond: (B, cond_dim, 1) -> (B, hidden, T).
    pub fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for i in 0..self.in_layers.len() {
            let a = self.in_layers[i]
                .forward(&x)?
                .broadcast_add(&self.cond_layers[i].forward(cond)?)?;
            let filt = a.narrow(1, 0, self.hidden)?;
            let gate = a.narrow(1, self.hidden, self.hidden)?;
            let g = (filt.tanh()? * sigmoid(&gate)?)?;
            x = (x + self.res_layers[i].forward(&g)?)?;
        }
        Ok(x)
    }
}
