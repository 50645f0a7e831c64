use crate::config::PgdsConfig;
use crate::encoders::{HumanEncoder, HumanPass, Mode, PoseEncoder};
use crate::error::{PgdsError, Result};
use crate::losses::{combined_loss, guide_loss_with_grad, triplet_batch_hard_with_grad, BatchLabels, LossBreakdown};
use crate::nn::{Matrix, Module, Param, Tensor4};
use crate::php::{Projector, ProjectorPass};
use crate::simplex::{softmax_cached, SoftmaxCache};

/// Everything that takes part in training: the trainable human encoder and
/// projectors, and the frozen pose encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PgdsModel {
    pub config: PgdsConfig,
    pub human: HumanEncoder,
    pub pose: PoseEncoder,
    pub projectors: Vec<Projector>,
}

/// Intermediate values of one forward pass, consumed by [`PgdsModel::backward`].
#[derive(Debug)]
pub struct ForwardRecord {
    pub breakdown: LossBreakdown,
    human: HumanPass,
    projectors: Vec<ProjectorPass>,
    /// Softmax caches of each guided layer (projectors first, then the final
    /// embedding when it takes part).
    softmax: Vec<Vec<SoftmaxCache>>,
    guide_grads: Vec<Matrix>,
    triplet_grad: Matrix,
}

fn row_softmax(m: &Matrix, temperature: f64) -> Result<Vec<SoftmaxCache>> {
    (0..m.rows).map(|r| softmax_cached(m.row(r), temperature)).collect()
}

fn probs_matrix(caches: &[SoftmaxCache]) -> Matrix {
    let cols = caches.first().map_or(0, |c| c.probs().len());
    Matrix::from_vec(caches.len(), cols, caches.iter().flat_map(|c| c.probs().iter().copied()).collect())
}

impl PgdsModel {
    /// Fresh human encoder and projectors around a pretrained, frozen pose encoder.
    pub fn new(config: PgdsConfig, pose: PoseEncoder) -> Result<Self> {
        config.validate()?;
        if !pose.is_frozen() {
            return Err(PgdsError::State("training requires a frozen pose encoder".into()));
        }
        if pose.embedding_dim() != config.model.embedding_dim {
            return Err(PgdsError::domain(format!(
                "pose embedding has {} dimensions, model expects {}",
                pose.embedding_dim(),
                config.model.embedding_dim
            )));
        }
        let human = HumanEncoder::new(&config.model, config.seed);
        let projectors = config
            .loss
            .php_stages
            .iter()
            .map(|&s| Projector::new(s, config.model.channels[s], config.model.embedding_dim, config.seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            human,
            pose,
            projectors,
        })
    }

    pub fn trainable_params(&self) -> Vec<&Param> {
        let mut v = self.human.params();
        for p in &self.projectors {
            v.extend(p.params());
        }
        v
    }

    pub fn trainable_params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.human.params_mut();
        for p in &mut self.projectors {
            v.extend(p.params_mut());
        }
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.trainable_params_mut() {
            p.zero_grad();
        }
    }

    /// Checks that trainable (human, projectors) and frozen (pose) parameters
    /// partition the model. Returns the two counts.
    pub fn assert_partition(&self) -> Result<(usize, usize)> {
        if !self.pose.is_frozen() {
            return Err(PgdsError::State("pose encoder is not frozen".into()));
        }
        let trainable = self.trainable_params();
        let frozen = self.pose.params();
        let mut names: Vec<&str> = trainable.iter().chain(&frozen).map(|p| p.name.as_str()).collect();
        let total = names.len();
        names.sort_unstable();
        names.dedup();
        if names.len() != total {
            return Err(PgdsError::State("parameter names overlap between groups".into()));
        }
        if trainable.iter().any(|p| p.name.starts_with("pose.")) || frozen.iter().any(|p| !p.name.starts_with("pose.")) {
            return Err(PgdsError::State("trainable and frozen parameter sets are not a partition".into()));
        }
        Ok((
            trainable.iter().map(|p| p.len()).sum(),
            frozen.iter().map(|p| p.len()).sum(),
        ))
    }

    /// Training-mode forward pass and loss for one batch.
    pub fn forward(&self, x: &Tensor4, labels: &BatchLabels) -> Result<ForwardRecord> {
        let loss_cfg = &self.config.loss;
        let tau = loss_cfg.temperature;
        let human = self.human.forward(x, Mode::Train, true, None)?;
        let pose = self.pose.pose_forward(x, None)?;
        let (triplet, triplet_grad) =
            triplet_batch_hard_with_grad(&human.embedding, labels, loss_cfg.triplet_margin)?;

        let pose_probs = probs_matrix(&row_softmax(&pose.embedding, tau)?);
        let mut projectors = Vec::with_capacity(self.projectors.len());
        let mut softmax = Vec::new();
        for proj in &self.projectors {
            let pass = proj.forward(&human.stages[proj.stage()], Mode::Train, None)?;
            softmax.push(row_softmax(&pass.output, tau)?);
            projectors.push(pass);
        }
        if loss_cfg.include_final_embedding_in_guide {
            softmax.push(row_softmax(&human.embedding, tau)?);
        }
        let layers: Vec<Matrix> = softmax.iter().map(|c| probs_matrix(c)).collect();
        let guide = guide_loss_with_grad(&pose_probs, &layers, labels, loss_cfg.guide_margin)?;
        let breakdown = combined_loss(triplet, guide.total, guide.per_layer, loss_cfg.lambda);
        Ok(ForwardRecord {
            breakdown,
            human,
            projectors,
            softmax,
            guide_grads: guide.grads,
            triplet_grad,
        })
    }

    /// Accumulates d(combined)/d(parameter) into the trainable parameters.
    /// With `lambda == 0` the guide branch is not differentiated at all.
    pub fn backward(&mut self, rec: &ForwardRecord) {
        let lambda = self.config.loss.lambda;
        let mut d_embedding = rec.triplet_grad.clone();
        let mut d_stages: Vec<Option<Tensor4>> = vec![None; rec.human.stages.len()];
        if lambda != 0.0 {
            let to_logits = |caches: &[SoftmaxCache], g: &Matrix| -> Matrix {
                let mut out = Matrix::zeros(g.rows, g.cols);
                for (r, c) in caches.iter().enumerate() {
                    let mut row = c.backward(g.row(r));
                    row.iter_mut().for_each(|v| *v *= lambda);
                    out.row_mut(r).copy_from_slice(&row);
                }
                out
            };
            for (i, proj) in self.projectors.iter_mut().enumerate() {
                let d_out = to_logits(&rec.softmax[i], &rec.guide_grads[i]);
                let d_feat = proj.backward(&rec.projectors[i], &d_out);
                let slot = &mut d_stages[proj.stage()];
                match slot {
                    Some(t) => t.add_assign(&d_feat),
                    None => *slot = Some(d_feat),
                }
            }
            if self.config.loss.include_final_embedding_in_guide {
                let last = self.projectors.len();
                d_embedding.add_assign(&to_logits(&rec.softmax[last], &rec.guide_grads[last]));
            }
        }
        self.human.backward(&rec.human, &d_embedding, &d_stages, true, false);
    }

    /// Moves batch statistics of a training pass into the running averages.
    pub fn commit_running_stats(&mut self, rec: &ForwardRecord) {
        self.human.commit_running_stats(&rec.human);
        for (proj, pass) in self.projectors.iter_mut().zip(&rec.projectors) {
            proj.commit_running_stats(pass);
        }
    }
}
