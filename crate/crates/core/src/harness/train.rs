use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model_io::Dataset;
use crate::network::{argmax, backward_collect, forward_collect, LayerParams, Model};
use crate::optim::{sgd_step, Velocity};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

/// Mini-batch SGD over `data` for `cfg.epochs` epochs. Each epoch visits a
/// fresh permutation drawn from `seed`; per-image gradients are averaged in
/// batch order so the result does not depend on the thread count.
pub fn sgd_train(model: &mut Model, data: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if cfg.epochs > 0 && data.is_empty() {
        return Err(Error::invalid(format!("split {:?} is empty", data.split)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut velocity = Velocity::zeros_like(&model.params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sgd = cfg.sgd;
        sgd.lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let per_image: Vec<Result<(f64, Vec<Option<LayerParams>>)>> = batch
                .par_iter()
                .map(|&n| {
                    let trace = forward_collect(model, &data.image(n), &[])?;
                    let g = backward_collect(model, &trace, data.labels[n])?;
                    Ok((g.loss, g.params))
                })
                .collect();
            let mut total: Option<Vec<Option<LayerParams>>> = None;
            for item in per_image {
                let (loss, grads) = item?;
                loss_sum += loss;
                match &mut total {
                    None => total = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            if let (Some(a), Some(g)) = (a, g) {
                                a.weight.add_assign(&g.weight)?;
                                a.bias.add_assign(&g.bias)?;
                            }
                        }
                    }
                }
            }
            let mut grads = total.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            for p in grads.iter_mut().flatten() {
                p.weight.scale(inv);
                p.bias.scale(inv);
            }
            sgd_step(&mut model.params, &grads, &mut velocity, &sgd)?;
        }
        let mean_loss = loss_sum / data.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::invalid(format!("training diverged in epoch {epoch}")));
        }
        log::info!("epoch {epoch}: lr {} mean loss {mean_loss:.5}", sgd.lr);
        history.push(EpochStats {
            epoch,
            lr: sgd.lr,
            mean_loss,
        });
    }
    Ok(history)
}

/// Top-1 accuracy in `[0, 1]`.
pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid(format!("split {:?} is empty", data.split)));
    }
    let hits: Vec<Result<bool>> = (0..data.len())
        .into_par_iter()
        .map(|n| Ok(argmax(&model.logits(&data.image(n))?) == data.labels[n]))
        .collect();
    let mut correct = 0usize;
    for h in hits {
        correct += usize::from(h?);
    }
    Ok(correct as f64 / data.len() as f64)
}
