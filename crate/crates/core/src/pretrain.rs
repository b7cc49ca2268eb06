//! One-time synthetic pretraining of the backbone and Ψ₀, and the backbone
//! checkpoint.

use std::path::Path;

use crate::backbone::{BackboneParams, TaskHead};
use crate::checkpoint::Checkpoint;
use crate::config::BackboneConfig;
use crate::error::{Error, Result};
use crate::rng::Seed;
use crate::tasks::Example;
use crate::train::{fit_supervised, BackboneSlot, FitReport, PhaseHyper, TrainModules};

/// Trains a fresh backbone and head on the pretraining mixture, then freezes
/// the backbone. With a zero epoch budget the random initialisation is
/// returned, frozen.
pub fn pretrain_backbone(
    config: &BackboneConfig,
    train: &[Example],
    val: &[Example],
    hyper: &PhaseHyper,
    seed: Seed,
) -> Result<(BackboneParams, TaskHead, FitReport)> {
    let mut backbone = BackboneParams::init(config, seed.child("backbone"))?;
    let mut psi0 = TaskHead::init(config, seed.child("psi0"));
    let report = fit_supervised(
        BackboneSlot::Trainable(&mut backbone),
        &mut psi0,
        TrainModules::None,
        train,
        val,
        hyper,
        seed.child("fit"),
    )?;
    backbone.freeze();
    Ok((backbone, psi0, report))
}

pub fn backbone_checkpoint(backbone: &BackboneParams, psi0: &TaskHead) -> Checkpoint {
    let mut c = Checkpoint::new(backbone.config.digest());
    c.push_set("backbone.", backbone);
    c.push_set("psi0.", psi0);
    c
}

/// Writes the checkpoint, refusing to replace an existing file.
pub fn save_backbone(path: &Path, backbone: &BackboneParams, psi0: &TaskHead) -> Result<String> {
    if path.exists() {
        return Err(Error::AlreadyExists(path.display().to_string()));
    }
    backbone_checkpoint(backbone, psi0).write(path)
}

/// Reads a backbone checkpoint written for `config`; the backbone comes back
/// frozen.
pub fn load_backbone(path: &Path, config: &BackboneConfig) -> Result<(BackboneParams, TaskHead)> {
    let c = Checkpoint::read(path)?;
    from_checkpoint(&c, config)
}

pub fn from_checkpoint(
    c: &Checkpoint,
    config: &BackboneConfig,
) -> Result<(BackboneParams, TaskHead)> {
    if c.config_digest != config.digest() {
        return Err(Error::Config(format!(
            "backbone checkpoint was written for config {}, current config is {}",
            c.config_digest,
            config.digest()
        )));
    }
    let backbone = BackboneParams::from_named(config, true, &mut |name| {
        c.get(&format!("backbone.{name}")).cloned()
    })?;
    let mut psi0 = TaskHead::init(config, Seed(0));
    c.load_set("psi0.", &mut psi0)?;
    Ok((backbone, psi0))
}
