use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use obfnet::coordinator::{fetch_bundle, Coordinator, CoordinatorConfig, InferenceClient, RequestLog};
use obfnet::dataset::{load_idx_images, load_idx_labels, LabeledDataset, Split};
use obfnet::evaluation::{
    accuracy_report, export_image_grid, laplace_baseline_sweep, many_to_one_witness, reidentification_attack,
    sweep_tsv, zero_fraction,
};
use obfnet::models::{init_rng, load_model, save_model, ObfNetBundle};
use obfnet::nn::{Network, Tensor};
use obfnet::participant::{choose_obfnet, obfuscate, Participant, ParticipantPolicy};
use obfnet::pipeline::{
    locate_mnist_dir, losses_tsv, RunConfig, BACKBONE_ACCURACY_FILE, BACKBONE_FILE, BACKBONE_LOSSES_FILE,
};
use obfnet::training::{format_config, pretrain_backbone, train_obfnet_family};

use crate::{Command, UsageError};

pub const BACKBONE_CONFIG_FILE: &str = "backbone_config.txt";

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::PrepareData {
            images,
            labels,
            out,
            split,
        } => prepare_data(&images, &labels, &out, split),
        Command::Pretrain { train, seed, data, out } => {
            let cfg = train.resolve(RunConfig::default().backbone, seed)?;
            let dir = data_dir(data);
            let train = load(&dir, Split::Train)?;
            let test = load(&dir, Split::Test)?;
            let pre = pretrain_backbone(&train, &test, &cfg)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            save_model(&pre.backbone, &out.join(BACKBONE_FILE))?;
            fs::write(out.join(BACKBONE_ACCURACY_FILE), format!("{:.6}\n", pre.accuracy))?;
            fs::write(out.join(BACKBONE_LOSSES_FILE), losses_tsv(std::slice::from_ref(&pre.log)))?;
            fs::write(out.join(BACKBONE_CONFIG_FILE), format_config(&cfg))?;
            println!(
                "test accuracy {:.4}; backbone {:016x} written to {}",
                pre.accuracy,
                pre.backbone.fingerprint(),
                out.join(BACKBONE_FILE).display()
            );
            Ok(())
        }
        Command::TrainObfnets {
            backbone,
            variant,
            k,
            base_seed,
            train,
            data,
            out,
        } => {
            let cfg = train.resolve(RunConfig::default().obfnet, None)?;
            let backbone = read_backbone(&backbone)?;
            let data = load(&data_dir(data), Split::Train)?;
            let (bundle, logs) = train_obfnet_family(&backbone, variant, k, base_seed, &data, &cfg)?;
            create_parent(&out)?;
            bundle.save(&out).with_context(|| format!("writing {}", out.display()))?;
            for (e, log) in bundle.entries().iter().zip(&logs) {
                let last = log.epoch_losses.last().map_or("-".into(), |l| format!("{l:.5}"));
                println!("{}-{}\tseed {}\tfinal loss {last}", e.variant, e.instance, e.seed);
            }
            let bytes = fs::metadata(&out)?.len();
            println!(
                "{} nets, {bytes} bytes ({} per net) written to {}",
                bundle.len(),
                bytes / u64::from(k),
                out.display()
            );
            Ok(())
        }
        Command::Evaluate {
            backbone,
            bundle,
            test,
            out,
        } => {
            let backbone = read_backbone(&backbone)?;
            let bundle = read_bundle(&bundle)?;
            let test = load(&data_dir(test), Split::Test)?;
            emit(out.as_deref(), &accuracy_report(&backbone, &bundle, &test)?.to_tsv())
        }
        Command::Figures {
            backbone,
            bundle,
            test,
            out_dir,
            count,
            cols,
        } => figures(&backbone, &bundle, test, &out_dir, count as usize, cols as usize),
        Command::Serve {
            backbone,
            bundle,
            bind,
            bundle_bind,
            curious,
            log,
        } => serve(&backbone, bundle.as_deref(), bind, bundle_bind, curious, log.as_deref()),
        Command::Submit {
            endpoint,
            bundle,
            bundle_endpoint,
            p,
            n,
            seed,
            test,
        } => {
            let bundle = match (bundle, bundle_endpoint) {
                (Some(path), _) => read_bundle(&path)?,
                (None, Some(addr)) => fetch_bundle(addr.as_str(), None).with_context(|| format!("fetching bundle from {addr}"))?.0,
                (None, None) => bail!(UsageError("one of --bundle or --bundle-endpoint is required".into())),
            };
            let test = load(&data_dir(test), Split::Test)?;
            let n = n.min(test.len());
            let policy = ParticipantPolicy::new(p, seed).map_err(|e| UsageError(e.to_string()))?;
            let mut participant = Participant::new(Arc::new(bundle), policy)?;
            let mut client = InferenceClient::connect(endpoint.as_str()).with_context(|| format!("connecting to {endpoint}"))?;
            let images = test.flat_images();
            let (mut correct, mut obfuscated) = (0usize, 0usize);
            for i in 0..n {
                let s = participant.process(images.row(i), &mut client)?;
                correct += usize::from(s.prediction.label == test.labels()[i]);
                obfuscated += usize::from(s.obfuscated);
            }
            let accuracy = if n == 0 { 0.0 } else { correct as f64 / n as f64 };
            println!("served accuracy {accuracy:.4} over {n} samples ({obfuscated} obfuscated)");
            Ok(())
        }
        Command::AttackReport {
            bundle,
            test,
            n,
            seed,
            out,
        } => {
            let bundle = read_bundle(&bundle)?;
            let test = load(&data_dir(test), Split::Test)?;
            emit(out.as_deref(), &attack_report(&bundle, &test, n as usize, seed)?)
        }
        Command::BaselineSweep {
            backbone,
            test,
            scales,
            seed,
            out,
        } => {
            if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                bail!(UsageError(format!("noise scales must be positive: {scales:?}")));
            }
            let backbone = read_backbone(&backbone)?;
            let test = load(&data_dir(test), Split::Test)?;
            emit(out.as_deref(), &sweep_tsv(&laplace_baseline_sweep(&backbone, &test, &scales, seed)?))
        }
    }
}

fn data_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.unwrap_or_else(locate_mnist_dir)
}

fn load(dir: &Path, split: Split) -> Result<LabeledDataset> {
    LabeledDataset::load_dir(dir, split).with_context(|| format!("loading {split} split from {}", dir.display()))
}

fn read_backbone(path: &Path) -> Result<Network> {
    load_model(path).with_context(|| format!("reading backbone {}", path.display()))
}

fn read_bundle(path: &Path) -> Result<ObfNetBundle> {
    ObfNetBundle::load(path).with_context(|| format!("reading bundle {}", path.display()))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

/// Writes to `out`, or to stdout when no path is given.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            create_parent(path)?;
            fs::write(path, text).with_context(|| format!("writing {}", path.display()))
        }
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn prepare_data(images: &Path, labels: &Path, out: &Path, split: Option<Split>) -> Result<()> {
    let split = split.unwrap_or_else(|| {
        let name = images.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if name.starts_with("train") {
            Split::Train
        } else {
            Split::Test
        }
    });
    let image_bytes = fs::read(images).with_context(|| format!("reading {}", images.display()))?;
    let label_bytes = fs::read(labels).with_context(|| format!("reading {}", labels.display()))?;
    let data = LabeledDataset::new(
        load_idx_images(&image_bytes, true).with_context(|| images.display().to_string())?,
        load_idx_labels(&label_bytes).with_context(|| labels.display().to_string())?,
        split,
    )?;
    let (image_out, label_out) = data.reserialize_idx();
    let (image_name, label_name) = split.file_names();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(image_name), image_out)?;
    fs::write(out.join(label_name), label_out)?;
    println!("{split}: {} samples written to {}", data.len(), out.display());
    Ok(())
}

fn figures(backbone: &Path, bundles: &[PathBuf], test: Option<PathBuf>, out_dir: &Path, count: usize, cols: usize) -> Result<()> {
    let backbone = read_backbone(backbone)?;
    let test = load(&data_dir(test), Split::Test)?;
    let samples = test.take(count).flat_images();
    let rows = samples.batch_size().div_ceil(cols);
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    export_image_grid(&samples, &out_dir.join("original.pgm"), rows, cols)?;
    for path in bundles {
        let bundle = read_bundle(path)?;
        let entry = &bundle.entries()[0];
        let stem = format!("{}-{}", entry.variant, entry.instance).to_lowercase();
        let obfuscated = entry.net.predict(&samples)?;
        export_image_grid(&obfuscated, &out_dir.join(format!("{stem}.pgm")), rows, cols)?;
        let report = accuracy_report(&backbone, &bundle, &test)?;
        let bars = format!("obfnet{}_accuracy.tsv", entry.variant.tag());
        fs::write(out_dir.join(bars), report.bar_data())?;
    }
    println!("figures written to {}", out_dir.display());
    Ok(())
}

fn serve(
    backbone: &Path,
    bundle: Option<&Path>,
    bind: String,
    bundle_bind: Option<String>,
    curious: bool,
    log: Option<&Path>,
) -> Result<()> {
    let backbone = read_backbone(backbone)?;
    let bundle = bundle.map(read_bundle).transpose()?;
    let request_log = log
        .map(|p| RequestLog::with_file(p).with_context(|| format!("opening request log {}", p.display())))
        .transpose()?
        .map(Arc::new);
    let config = CoordinatorConfig {
        inference_bind: bind,
        bundle_bind,
        curious: curious || request_log.is_some(),
    };
    let coordinator = Coordinator::start(backbone, bundle.as_ref(), &config, request_log)?;
    println!("inference endpoint {}", coordinator.inference.local_addr());
    if let Some(d) = &coordinator.distribution {
        println!("bundle endpoint {}", d.local_addr());
    }
    std::io::stdout().flush()?;
    coordinator.inference.wait();
    Ok(())
}

/// Rows `metric<TAB>net<TAB>value` over the first `n` test samples.
fn attack_report(bundle: &ObfNetBundle, test: &LabeledDataset, n: usize, seed: u64) -> Result<String> {
    let raw = test.take(n).flat_images();
    let n = raw.batch_size();
    let mut out = String::from("metric\tnet\tvalue\n");
    let rate = reidentification_attack(&raw, &raw)?;
    out.push_str(&format!("reidentification\traw\t{rate:.4}\n"));
    for e in bundle.entries() {
        let name = format!("{}-{}", e.variant, e.instance);
        let rate = reidentification_attack(&raw, &e.net.predict(&raw)?)?;
        out.push_str(&format!("reidentification\t{name}\t{rate:.4}\n"));
    }
    let mut rng = init_rng(seed);
    let mut mixed = Vec::with_capacity(raw.len());
    for i in 0..n {
        mixed.extend(obfuscate(raw.row(i), choose_obfnet(bundle, &mut rng)?)?);
    }
    let mixed = Tensor::new(raw.shape().to_vec(), mixed)?;
    let rate = reidentification_attack(&raw, &mixed)?;
    out.push_str(&format!("reidentification\trandom-choice\t{rate:.4}\n"));
    let images = test.flat_images();
    for e in bundle.entries() {
        let name = format!("{}-{}", e.variant, e.instance);
        out.push_str(&format!("zero_fraction\t{name}\t{:.4}\n", zero_fraction(&e.net, &images)?));
        let witness = many_to_one_witness(&e.net)?.is_some();
        out.push_str(&format!("many_to_one_witness\t{name}\t{}\n", if witness { "found" } else { "none" }));
    }
    Ok(out)
}
