use rand::RngCore;

use super::data::Clip;
use crate::audio::Spectrogram;
use crate::fed::{self, LocalObjective, Named};
use crate::model::{is_buffer, predict_logits, update_running_stats, Bound, ModelConfig, ParamSet};
use crate::objective::{
    total_loss_with_targets, Augmentation, DaeLossWeights, LossBreakdown, LossWeights,
};
use crate::tensor::Tape;

/// Loss settings shared by every client.
#[derive(Debug, Clone)]
pub struct TrainSpec {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub dae: DaeLossWeights,
    pub augment: Augmentation,
    /// Reconstruct the noise-free crop instead of the model input.
    pub clean_targets: bool,
}

/// A site's training split under the composite objective.
#[derive(Debug, Clone)]
pub struct CryObjective {
    specs: Vec<Spectrogram>,
    targets: Vec<Spectrogram>,
    labels: Vec<usize>,
    spec: TrainSpec,
    sums: LossBreakdown,
    steps: usize,
}

impl CryObjective {
    pub fn new(clips: &[&Clip], spec: TrainSpec) -> Self {
        Self {
            specs: clips.iter().map(|c| c.spec.clone()).collect(),
            targets: clips
                .iter()
                .map(|c| match (&c.clean, spec.clean_targets) {
                    (Some(clean), true) => clean.clone(),
                    _ => c.spec.clone(),
                })
                .collect(),
            labels: clips.iter().map(|c| c.label).collect(),
            spec,
            sums: LossBreakdown::default(),
            steps: 0,
        }
    }

    /// Mean loss terms since the last call.
    pub fn take_breakdown(&mut self) -> LossBreakdown {
        let n = self.steps.max(1) as f64;
        let s = self.sums;
        self.sums = LossBreakdown::default();
        self.steps = 0;
        LossBreakdown {
            ce: s.ce / n,
            dae: s.dae / n,
            con: s.con / n,
            total: s.total / n,
        }
    }
}

impl LocalObjective for CryObjective {
    fn num_samples(&self) -> usize {
        self.specs.len()
    }

    fn minibatch(
        &mut self,
        params: &mut ParamSet,
        batch: &[usize],
        rng: &mut dyn RngCore,
    ) -> fed::Result<(f64, Named)> {
        let specs: Vec<&Spectrogram> = batch.iter().map(|&i| &self.specs[i]).collect();
        let targets: Vec<&Spectrogram> = batch.iter().map(|&i| &self.targets[i]).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| self.labels[i]).collect();
        let mut tape = Tape::new();
        let (graph, parts, grads) = {
            let bound = Bound::new(&mut tape, params, |n| !is_buffer(n));
            let (graph, parts) = total_loss_with_targets(
                &mut tape,
                &bound,
                &self.spec.model,
                &specs,
                Some(&targets),
                &labels,
                &self.spec.weights,
                &self.spec.dae,
                &self.spec.augment,
                rng,
            )?;
            let g = tape.backward(graph.total)?;
            (graph, parts, bound.grads(&g))
        };
        update_running_stats(&tape, graph.bn, params, self.spec.model.bn_momentum)?;
        self.sums.ce += parts.ce;
        self.sums.dae += parts.dae;
        self.sums.con += parts.con;
        self.sums.total += parts.total;
        self.steps += 1;
        Ok((parts.total, grads))
    }
}

/// Inference logits for `specs`, `batch` at a time.
pub fn predict(
    params: &ParamSet,
    cfg: &ModelConfig,
    specs: &[&Spectrogram],
    batch: usize,
) -> crate::Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(specs.len());
    for chunk in specs.chunks(batch.max(1)) {
        let x = cfg.batch_tensor(chunk)?;
        let logits = predict_logits(params, cfg, x)?;
        let k = cfg.n_classes;
        out.extend(logits.data().chunks(k).map(<[f64]>::to_vec));
    }
    Ok(out)
}
