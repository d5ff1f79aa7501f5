//! End-to-end reproduction runs: pre-train the backbone, train obfuscator
//! families, and write models, loss curves and accuracy reports to one
//! directory.
//!
//! Each stage leaves a `.stamp` file naming its inputs (configuration, data
//! fingerprints, upstream model fingerprint and a hash of this library's
//! sources). A stage whose stamp still matches is loaded instead of retrained.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::evaluation::{accuracy_report, eval_accuracy, AccuracyReport};
use crate::fnv;
use crate::models::{load_model, save_model, ObfNetBundle, ObfNetVariant};
use crate::nn::{Network, TrainConfig};
use crate::training::{format_config, pretrain_backbone, train_obfnet_family, TrainLog};

/// Hash of the library sources this build was compiled from.
pub const SOURCE_HASH: &str = env!("OBFNET_SOURCE_HASH");

pub const BACKBONE_FILE: &str = "backbone.obfm";
pub const BACKBONE_LOSSES_FILE: &str = "backbone_losses.tsv";
pub const BACKBONE_ACCURACY_FILE: &str = "backbone_accuracy.txt";

pub fn bundle_file(variant: ObfNetVariant) -> String {
    format!("obfnet{}.obfb", variant.tag())
}

pub fn report_file(variant: ObfNetVariant) -> String {
    format!("obfnet{}_report.tsv", variant.tag())
}

pub fn losses_file(variant: ObfNetVariant) -> String {
    format!("obfnet{}_losses.tsv", variant.tag())
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Backbone training; its `seed` drives init and minibatch order.
    pub backbone: TrainConfig,
    /// Obfuscator training; seeds come from the family base seeds instead.
    pub obfnet: TrainConfig,
    pub obfnet2_k: u32,
    pub obfnet2_base_seed: u64,
    pub obfnet1_k: u32,
    pub obfnet1_base_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backbone: TrainConfig {
                seed: 1,
                ..TrainConfig::default()
            },
            obfnet: TrainConfig::default(),
            obfnet2_k: 3,
            obfnet2_base_seed: 100,
            obfnet1_k: 1,
            obfnet1_base_seed: 200,
        }
    }
}

impl RunConfig {
    pub fn family(&self, variant: ObfNetVariant) -> (u32, u64) {
        match variant {
            ObfNetVariant::ObfNet1 => (self.obfnet1_k, self.obfnet1_base_seed),
            ObfNetVariant::ObfNet2 => (self.obfnet2_k, self.obfnet2_base_seed),
        }
    }
}

/// Result of a stage, and whether it was recomputed or read back.
#[derive(Debug, Clone)]
pub struct Stage<T> {
    pub value: T,
    pub trained: bool,
}

#[derive(Debug, Clone)]
pub struct BackboneArtifacts {
    pub backbone: Network,
    pub accuracy: f64,
    pub log: TrainLog,
}

#[derive(Debug, Clone)]
pub struct FamilyArtifacts {
    pub bundle: ObfNetBundle,
    pub report: AccuracyReport,
    pub logs: Vec<TrainLog>,
}

/// FNV-1a over a dataset's pixel and label bytes.
pub fn dataset_fingerprint(data: &LabeledDataset) -> u64 {
    let mut h = fnv::Fnv1a::default();
    for v in data.images().data() {
        h.update(&v.to_le_bytes());
    }
    h.update(data.labels());
    h.finish()
}

fn stamp_matches(path: &Path, stamp: &str) -> bool {
    fs::read_to_string(path).map(|s| s == stamp).unwrap_or(false)
}

/// `instance<TAB>epoch<TAB>mean_loss` rows with round-trippable values.
pub fn losses_tsv(logs: &[TrainLog]) -> String {
    let mut s = String::from("instance\tepoch\tmean_loss\n");
    for (i, log) in logs.iter().enumerate() {
        for (e, l) in log.epoch_losses.iter().enumerate() {
            writeln!(s, "{i}\t{}\t{l:?}", e + 1).unwrap();
        }
    }
    s
}

fn parse_losses(text: &str) -> Result<Vec<TrainLog>> {
    let mut logs: Vec<TrainLog> = Vec::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split('\t').collect();
        let parsed = match fields.as_slice() {
            [i, _, l] => i.parse::<usize>().ok().zip(l.parse::<f64>().ok()),
            _ => None,
        };
        let (i, l) = parsed.ok_or_else(|| Error::Format(format!("bad loss row {line:?}")))?;
        if i >= logs.len() {
            logs.resize(i + 1, TrainLog::default());
        }
        logs[i].epoch_losses.push(l);
    }
    Ok(logs)
}

fn backbone_stamp(train: &LabeledDataset, test: &LabeledDataset, cfg: &TrainConfig) -> String {
    format!(
        "stage = backbone\nsource = {SOURCE_HASH}\ntrain = {:016x}\ntest = {:016x}\n{}",
        dataset_fingerprint(train),
        dataset_fingerprint(test),
        format_config(cfg)
    )
}

/// Loads the backbone from `dir` when its stamp matches, otherwise trains
/// it and writes model, accuracy and loss curve.
pub fn backbone_stage(
    dir: &Path,
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<Stage<BackboneArtifacts>> {
    fs::create_dir_all(dir)?;
    let stamp = backbone_stamp(train, test, cfg);
    let stamp_path = dir.join("backbone.stamp");
    if stamp_matches(&stamp_path, &stamp) {
        let backbone = load_model(&dir.join(BACKBONE_FILE))?;
        let log = parse_losses(&fs::read_to_string(dir.join(BACKBONE_LOSSES_FILE))?)?
            .pop()
            .unwrap_or_default();
        let accuracy = eval_accuracy(&backbone, test, None)?;
        return Ok(Stage {
            value: BackboneArtifacts {
                backbone,
                accuracy,
                log,
            },
            trained: false,
        });
    }
    let _ = fs::remove_file(&stamp_path);
    let pre = pretrain_backbone(train, test, cfg)?;
    save_model(&pre.backbone, &dir.join(BACKBONE_FILE))?;
    fs::write(dir.join(BACKBONE_ACCURACY_FILE), format!("{:.6}\n", pre.accuracy))?;
    fs::write(dir.join(BACKBONE_LOSSES_FILE), losses_tsv(std::slice::from_ref(&pre.log)))?;
    fs::write(&stamp_path, stamp)?;
    Ok(Stage {
        value: BackboneArtifacts {
            backbone: pre.backbone,
            accuracy: pre.accuracy,
            log: pre.log,
        },
        trained: true,
    })
}

/// Loads or trains a `k`-member family against `backbone`, then writes the
/// bundle, its accuracy report and loss curves.
#[allow(clippy::too_many_arguments)]
pub fn family_stage(
    dir: &Path,
    backbone: &Network,
    variant: ObfNetVariant,
    k: u32,
    base_seed: u64,
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<Stage<FamilyArtifacts>> {
    fs::create_dir_all(dir)?;
    let stamp = format!(
        "stage = {variant}\nsource = {SOURCE_HASH}\nbackbone = {:016x}\ntrain = {:016x}\ntest = {:016x}\nk = {k}\nbase_seed = {base_seed}\n{}",
        backbone.fingerprint(),
        dataset_fingerprint(train),
        dataset_fingerprint(test),
        format_config(cfg)
    );
    let stamp_path = dir.join(format!("obfnet{}.stamp", variant.tag()));
    if stamp_matches(&stamp_path, &stamp) {
        let bundle = ObfNetBundle::load(&dir.join(bundle_file(variant)))?;
        let report = accuracy_report(backbone, &bundle, test)?;
        let logs = parse_losses(&fs::read_to_string(dir.join(losses_file(variant)))?)?;
        return Ok(Stage {
            value: FamilyArtifacts { bundle, report, logs },
            trained: false,
        });
    }
    let _ = fs::remove_file(&stamp_path);
    let (bundle, logs) = train_obfnet_family(backbone, variant, k, base_seed, train, cfg)?;
    let report = accuracy_report(backbone, &bundle, test)?;
    bundle.save(&dir.join(bundle_file(variant)))?;
    fs::write(dir.join(report_file(variant)), report.to_tsv())?;
    fs::write(dir.join(losses_file(variant)), losses_tsv(&logs))?;
    fs::write(&stamp_path, stamp)?;
    Ok(Stage {
        value: FamilyArtifacts { bundle, report, logs },
        trained: true,
    })
}

/// Directory holding MNIST IDX files: `$OBFNET_MNIST_DIR`, else `data/mnist`
/// under the current directory, else `data/mnist` in this source tree.
pub fn locate_mnist_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os("OBFNET_MNIST_DIR") {
        return PathBuf::from(dir);
    }
    let local = PathBuf::from("data/mnist");
    if local.is_dir() {
        return local;
    }
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn losses_round_trip() {
        let logs = vec![
            TrainLog {
                epoch_losses: vec![2.302585092994046, 0.1 + 0.2],
            },
            TrainLog {
                epoch_losses: vec![1e-30],
            },
        ];
        assert_eq!(parse_losses(&losses_tsv(&logs)).unwrap(), logs);
        assert!(parse_losses("h\nnot a row\n").is_err());
    }

    #[test]
    fn source_hash_is_hex() {
        assert_eq!(SOURCE_HASH.len(), 16);
        assert!(SOURCE_HASH.chars().all(|c| c.is_ascii_hexdigit()));
    }

    #[test]
    fn family_file_names() {
        assert_eq!(bundle_file(ObfNetVariant::ObfNet2), "obfnet2.obfb");
        assert_eq!(report_file(ObfNetVariant::ObfNet1), "obfnet1_report.tsv");
    }
}
