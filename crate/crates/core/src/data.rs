//! Dataset files: one JSON object per line plus a manifest with digests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{sha256_hex, Seed};
use crate::tasks::{Dataset, Example, QATask, World};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExampleLine {
    scene_features: Vec<Vec<f64>>,
    question_ids: Vec<usize>,
    answer_ids: Vec<usize>,
}

pub fn to_jsonl(examples: &[Example], feature_dim: usize) -> Result<String> {
    let mut out = String::new();
    for e in examples {
        if feature_dim == 0 || e.features.len() % feature_dim != 0 {
            return Err(Error::InvalidArgument(
                "features do not split into rows".into(),
            ));
        }
        let line = ExampleLine {
            scene_features: e
                .features
                .chunks(feature_dim)
                .map(<[f64]>::to_vec)
                .collect(),
            question_ids: e.question.clone(),
            answer_ids: e.answer.clone(),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl(text: &str) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let l: ExampleLine = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        let width = l.scene_features.first().map_or(0, Vec::len);
        if width == 0 || l.scene_features.iter().any(|r| r.len() != width) {
            return Err(Error::Format(format!(
                "line {}: ragged scene_features",
                i + 1
            )));
        }
        out.push(Example {
            features: l.scene_features.concat(),
            question: l.question_ids,
            answer: l.answer_ids,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub split: String,
    pub file: String,
    pub examples: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub seed: Seed,
    pub world_seed: Seed,
    pub codebook_digest: String,
    pub feature_dim: usize,
    pub n_slots: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<QATask>,
    pub splits: Vec<SplitEntry>,
}

pub fn manifest_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.manifest.json"))
}

/// Writes the splits and their manifest.
pub fn write_splits(
    dir: &Path,
    mut manifest: Manifest,
    splits: &[(&str, &[Example])],
) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    manifest.splits.clear();
    for (split, examples) in splits {
        let file = format!("{}.{split}.jsonl", manifest.name);
        let text = to_jsonl(examples, manifest.feature_dim)?;
        std::fs::write(dir.join(&file), text.as_bytes())?;
        manifest.splits.push(SplitEntry {
            split: split.to_string(),
            file,
            examples: examples.len(),
            sha256: sha256_hex(text.as_bytes()),
        });
    }
    let json = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(manifest_path(dir, &manifest.name), json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path, name: &str) -> Result<Manifest> {
    let text = std::fs::read_to_string(manifest_path(dir, name))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest {name}: {e}")))
}

/// Reads every split listed in the manifest, verifying each file's digest.
pub fn read_splits(dir: &Path, manifest: &Manifest) -> Result<Vec<(String, Vec<Example>)>> {
    let mut out = Vec::new();
    for s in &manifest.splits {
        let path = dir.join(&s.file);
        let bytes = std::fs::read(&path)?;
        let found = sha256_hex(&bytes);
        if found != s.sha256 {
            return Err(Error::DigestMismatch {
                path: path.display().to_string(),
                expected: s.sha256.clone(),
                found,
            });
        }
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Format(format!("{} is not UTF-8", s.file)))?;
        let examples = from_jsonl(&text)?;
        if examples.len() != s.examples {
            return Err(Error::Format(format!(
                "{}: {} examples, manifest says {}",
                s.file,
                examples.len(),
                s.examples
            )));
        }
        out.push((s.split.clone(), examples));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenStatus {
    Created,
    UpToDate,
}

fn task_manifest(world: &World, world_seed: Seed, task: &QATask) -> Manifest {
    Manifest {
        name: task.id.clone(),
        seed: task.seed,
        world_seed,
        codebook_digest: world.digest(),
        feature_dim: world.feature_dim,
        n_slots: world.n_slots,
        task: Some(task.clone()),
        splits: vec![],
    }
}

fn same_spec(a: &Manifest, b: &Manifest) -> bool {
    a.name == b.name
        && a.seed == b.seed
        && a.world_seed == b.world_seed
        && a.codebook_digest == b.codebook_digest
        && a.feature_dim == b.feature_dim
        && a.n_slots == b.n_slots
        && a.task == b.task
}

/// Loads a task's dataset when its files exist for the same generation parameters,
/// otherwise generates and writes it. Existing files whose digests do not
/// match their manifest are an error, never silently replaced.
pub fn ensure_task(
    dir: &Path,
    world: &World,
    world_seed: Seed,
    task: &QATask,
) -> Result<(Dataset, GenStatus)> {
    let wanted = task_manifest(world, world_seed, task);
    if manifest_path(dir, &task.id).exists() {
        let found = read_manifest(dir, &task.id)?;
        if same_spec(&found, &wanted) {
            let mut splits = read_splits(dir, &found)?;
            let take =
                |name: &str, splits: &mut Vec<(String, Vec<Example>)>| -> Result<Vec<Example>> {
                    let i = splits.iter().position(|(s, _)| s == name).ok_or_else(|| {
                        Error::Format(format!("manifest for {} lacks a {name} split", task.id))
                    })?;
                    Ok(splits.remove(i).1)
                };
            let train = take("train", &mut splits)?;
            let val = take("val", &mut splits)?;
            return Ok((
                Dataset {
                    task_id: task.id.clone(),
                    train,
                    val,
                },
                GenStatus::UpToDate,
            ));
        }
    }
    let ds = crate::tasks::generate_task(world, task)?;
    write_splits(dir, wanted, &[("train", &ds.train), ("val", &ds.val)])?;
    Ok((ds, GenStatus::Created))
}

/// Same contract as [`ensure_task`] for the pretraining corpus.
pub fn ensure_pretrain(
    dir: &Path,
    world: &World,
    world_seed: Seed,
    seed: Seed,
    train_size: usize,
    val_size: usize,
) -> Result<(Vec<Example>, Vec<Example>, GenStatus)> {
    let name = "pretrain";
    let wanted = Manifest {
        name: name.into(),
        seed,
        world_seed,
        codebook_digest: world.digest(),
        feature_dim: world.feature_dim,
        n_slots: world.n_slots,
        task: None,
        splits: vec![],
    };
    if manifest_path(dir, name).exists() {
        let found = read_manifest(dir, name)?;
        let sizes: Vec<usize> = found.splits.iter().map(|s| s.examples).collect();
        if same_spec(&found, &wanted) && sizes == [train_size, val_size] {
            let mut splits = read_splits(dir, &found)?;
            let val = splits.pop().map(|s| s.1).unwrap_or_default();
            let train = splits.pop().map(|s| s.1).unwrap_or_default();
            return Ok((train, val, GenStatus::UpToDate));
        }
    }
    let mut corpus = crate::tasks::pretrain_corpus(world, train_size + val_size, seed)?;
    let val = corpus.split_off(train_size);
    write_splits(dir, wanted, &[("train", &corpus), ("val", &val)])?;
    Ok((corpus, val, GenStatus::Created))
}

/// SHA-256 over both splits in the dataset file encoding.
pub fn dataset_digest(ds: &Dataset, feature_dim: usize) -> Result<String> {
    let mut text = to_jsonl(&ds.train, feature_dim)?;
    text.push_str(&to_jsonl(&ds.val, feature_dim)?);
    Ok(sha256_hex(text.as_bytes()))
}
