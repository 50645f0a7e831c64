//! Projection heads that map intermediate human-encoder stages into the
//! embedding space shared with the pose teacher. Used only during training.

use crate::encoders::Mode;
use crate::error::{PgdsError, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, relu_backward, relu_inplace, BatchNorm, BnCache,
    ExecTrace, Linear, Matrix, Module, Param, Tensor4,
};
use crate::rng::{self, tag};
use crate::simplex::EmbeddingVector;

/// Global average pooling, a linear layer to `D`, batch normalisation and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    stage: usize,
    linear: Linear,
    bn: BatchNorm,
}

#[derive(Debug, Clone)]
pub struct ProjectorPass {
    pub output: Matrix,
    pooled: Matrix,
    bn: BnCache,
    in_h: usize,
    in_w: usize,
}

/// Number of trainable parameters of a projector from `channels` to `dim`.
pub fn projector_param_count(channels: usize, dim: usize) -> Result<usize> {
    if channels == 0 || dim == 0 {
        return Err(PgdsError::domain("projector needs nonzero input channels and output dimension"));
    }
    Ok(channels * dim + 3 * dim)
}

impl Projector {
    pub fn new(stage: usize, channels: usize, dim: usize, seed: u64) -> Result<Self> {
        projector_param_count(channels, dim)?;
        let mut r = rng::stream(seed, &[tag::PROJECTOR_INIT, stage as u64]);
        Ok(Self {
            stage,
            linear: Linear::new(format!("php.stage{stage}.linear"), channels, dim, &mut r),
            bn: BatchNorm::new(format!("php.stage{stage}.bn"), dim),
        })
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn in_channels(&self) -> usize {
        self.linear.in_dim
    }

    pub fn forward(&self, feature: &Tensor4, mode: Mode, mut trace: Option<&mut ExecTrace>) -> Result<ProjectorPass> {
        if feature.c != self.linear.in_dim {
            return Err(PgdsError::domain(format!(
                "projector for stage {} expects {} channels, got {}",
                self.stage, self.linear.in_dim, feature.c
            )));
        }
        let pooled = global_avg_pool(feature);
        let lin = self.linear.forward(&pooled, trace.as_deref_mut());
        let (mut y, bn) = self.bn.forward(&lin.as_tensor(), mode == Mode::Train, trace);
        relu_inplace(&mut y.data);
        Ok(ProjectorPass {
            output: Matrix::from_vec(lin.rows, lin.cols, y.data),
            pooled,
            bn,
            in_h: feature.h,
            in_w: feature.w,
        })
    }

    pub fn commit_running_stats(&mut self, pass: &ProjectorPass) {
        self.bn.commit(&pass.bn);
    }

    /// Accumulates parameter gradients and returns the gradient with respect
    /// to the stage feature map.
    pub fn backward(&mut self, pass: &ProjectorPass, d_out: &Matrix) -> Tensor4 {
        let mut g = d_out.as_tensor();
        relu_backward(&pass.output.data, &mut g.data);
        let d_lin = self.bn.backward(&pass.bn, &g, true);
        let d_lin = Matrix::from_vec(d_out.rows, d_out.cols, d_lin.data);
        let d_pooled = self.linear.backward(&pass.pooled, &d_lin, true);
        global_avg_pool_backward(&d_pooled, pass.in_h, pass.in_w)
    }
}

impl Module for Projector {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.linear.params();
        v.extend(self.bn.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.linear.params_mut();
        v.extend(self.bn.params_mut());
        v
    }

    fn buffers(&self) -> Vec<&Param> {
        self.bn.buffers()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Param> {
        self.bn.buffers_mut()
    }
}

/// Projects one stage feature map (batch of one) into an embedding.
pub fn project_stage(feature: &Tensor4, projector: &Projector, mode: Mode) -> Result<EmbeddingVector> {
    if feature.n != 1 {
        return Err(PgdsError::domain(format!("project_stage takes a single feature map, got {}", feature.n)));
    }
    EmbeddingVector::new(projector.forward(feature, mode, None)?.output.data)
}
