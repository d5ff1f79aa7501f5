//! Shared fixtures for the integration tests: MNIST, and the standard run
//! (backbone plus both obfuscator families) cached under the target dir.

#![allow(dead_code)]

pub mod gradcheck;

use std::path::PathBuf;
use std::sync::OnceLock;

use obfnet::dataset::{LabeledDataset, Split};
use obfnet::models::ObfNetVariant;
use obfnet::pipeline::{
    backbone_stage, family_stage, locate_mnist_dir, BackboneArtifacts, FamilyArtifacts, RunConfig, Stage,
};

pub struct Mnist {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn mnist() -> &'static Mnist {
    static DATA: OnceLock<Mnist> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = locate_mnist_dir();
        let load = |split| {
            LabeledDataset::load_dir(&dir, split).unwrap_or_else(|e| {
                panic!(
                    "MNIST not available in {} ({e}). Place the four uncompressed IDX files there \
                     or set OBFNET_MNIST_DIR; see README.md",
                    dir.display()
                )
            })
        };
        Mnist {
            train: load(Split::Train),
            test: load(Split::Test),
        }
    })
}

/// Cache directory for the standard run, shared by every test binary.
pub fn standard_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("obfnet-standard")
}

pub struct Standard {
    pub config: RunConfig,
    pub backbone: Stage<BackboneArtifacts>,
    pub obfnet2: Stage<FamilyArtifacts>,
    pub obfnet1: Stage<FamilyArtifacts>,
}

/// The standard run, trained on first use and read back afterwards.
pub fn standard() -> &'static Standard {
    static RUN: OnceLock<Standard> = OnceLock::new();
    RUN.get_or_init(|| {
        let data = mnist();
        let dir = standard_dir();
        let config = RunConfig::default();
        let backbone = backbone_stage(&dir, &data.train, &data.test, &config.backbone).expect("backbone stage");
        let family = |variant| {
            let (k, seed) = config.family(variant);
            family_stage(
                &dir,
                &backbone.value.backbone,
                variant,
                k,
                seed,
                &data.train,
                &data.test,
                &config.obfnet,
            )
            .expect("obfuscator stage")
        };
        let obfnet2 = family(ObfNetVariant::ObfNet2);
        let obfnet1 = family(ObfNetVariant::ObfNet1);
        Standard {
            config,
            backbone,
            obfnet2,
            obfnet1,
        }
    })
}
