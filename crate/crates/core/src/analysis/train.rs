//! Driver for toy masked-image pretraining runs.

use std::path::PathBuf;

use serde::Serialize;

use crate::error::Result;
use crate::mim::{pretrain, write_loss_csv, TrainConfig};
use crate::model::save_checkpoint;

#[derive(Debug, Clone, Serialize)]
pub struct PretrainSummary {
    pub seed: u64,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// `final / initial`
    pub ratio: f64,
    pub loss_csv: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Trains, then writes the loss curve and the encoder checkpoint if the
/// config names them. The checkpoint is stored in finetune form.
pub fn run_pretrain(cfg: &TrainConfig) -> Result<PretrainSummary> {
    let mut run = pretrain(cfg)?;
    if let Some(path) = &cfg.loss_csv {
        write_loss_csv(path, &run.losses)?;
    }
    if let Some(path) = &cfg.checkpoint {
        run.model.finetune(&mut run.store)?;
        save_checkpoint(path, &run.model, &run.store)?;
    }
    let (initial_loss, final_loss) = (run.losses.first().copied().unwrap_or(f64::NAN), run.losses.last().copied().unwrap_or(f64::NAN));
    Ok(PretrainSummary {
        seed: cfg.seed,
        steps: run.losses.len(),
        initial_loss,
        final_loss,
        ratio: final_loss / initial_loss,
        loss_csv: cfg.loss_csv.clone(),
        checkpoint: cfg.checkpoint.clone(),
    })
}
