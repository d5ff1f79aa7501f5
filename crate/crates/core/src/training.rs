//! Two-phase training: pre-train the LeNet backbone on plaintext images,
//! then train each obfuscator through the frozen backbone on the same
//! classification loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::evaluation::eval_accuracy;
use crate::models::{
    build_lenet, build_obfnet, concatenate_frozen, detach_obfnet, BundleEntry, ObfNetBundle, ObfNetSpec,
    ObfNetVariant,
};
use crate::nn::{sgd_step, softmax_cross_entropy, GradientSet, Network, TrainConfig};

/// ChaCha stream used for minibatch order; stream 0 is weight init.
const ORDER_STREAM: u64 = 1;

/// Per-step information handed to training observers.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// Mean minibatch loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Runs `cfg.epochs` epochs of shuffled minibatch momentum SGD on `net`.
/// The shuffle is driven by `order_seed`; `observer` sees every step's
/// gradients before the update is applied.
pub fn train_network(
    net: &mut Network,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    order_seed: u64,
    observer: &mut dyn FnMut(&StepInfo, &GradientSet),
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(order_seed);
    rng.set_stream(ORDER_STREAM);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut velocity = GradientSet::zeros_like(net);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let images = data.images().gather_rows(idx);
            let labels: Vec<u8> = idx.iter().map(|&i| data.labels()[i]).collect();
            let trace = net.forward(&images)?;
            let (loss, grad) = softmax_cross_entropy(trace.output(), &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch, loss });
            }
            let grads = net.backward_params(&trace, &grad)?;
            observer(&StepInfo { epoch, batch, loss }, &grads);
            sgd_step(net, &grads, cfg, &mut velocity)?;
            total += f64::from(loss);
            batches += 1;
        }
        let mean = total / batches as f64;
        log::info!("epoch {}/{}: mean loss {mean:.5}", epoch + 1, cfg.epochs);
        log.epoch_losses.push(mean);
    }
    Ok(log)
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub backbone: Network,
    /// Accuracy on the held-out split.
    pub accuracy: f64,
    pub log: TrainLog,
}

/// Trains LeNet from seed `cfg.seed` and reports its accuracy on `test`.
pub fn pretrain_backbone(train: &LabeledDataset, test: &LabeledDataset, cfg: &TrainConfig) -> Result<Pretrained> {
    let mut backbone = build_lenet(cfg.seed);
    let log = train_network(&mut backbone, train, cfg, cfg.seed, &mut |_, _| {})?;
    let accuracy = eval_accuracy(&backbone, test, None)?;
    log::info!("backbone test accuracy {accuracy:.4}");
    Ok(Pretrained {
        backbone,
        accuracy,
        log,
    })
}

#[derive(Debug, Clone)]
pub struct TrainedObfNet {
    pub spec: ObfNetSpec,
    pub net: Network,
    pub log: TrainLog,
}

/// Trains one obfuscator through the frozen backbone. Both weight init and
/// minibatch order derive from `spec.seed`; `cfg.seed` is not used.
pub fn train_obfnet(
    backbone: &Network,
    spec: &ObfNetSpec,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainedObfNet> {
    train_obfnet_observed(backbone, spec, data, cfg, &mut |_, _| {})
}

/// [`train_obfnet`] with a per-step observer over the composite's gradients.
pub fn train_obfnet_observed(
    backbone: &Network,
    spec: &ObfNetSpec,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&StepInfo, &GradientSet),
) -> Result<TrainedObfNet> {
    let obfnet = build_obfnet(spec);
    let head = obfnet.layers().len();
    let mut composite = concatenate_frozen(&obfnet, backbone)?;
    let log = train_network(&mut composite, data, cfg, spec.seed, observer)?;
    let net = detach_obfnet(&composite, head)?;
    Ok(TrainedObfNet {
        spec: *spec,
        net,
        log,
    })
}

/// Trains `k` obfuscators with seeds `base_seed + x` for `x in 0..k` and
/// bundles them with the backbone fingerprint.
pub fn train_obfnet_family(
    backbone: &Network,
    variant: ObfNetVariant,
    k: u32,
    base_seed: u64,
    data: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(ObfNetBundle, Vec<TrainLog>)> {
    if k == 0 {
        return Err(Error::EmptyBundle);
    }
    let mut entries = Vec::with_capacity(k as usize);
    let mut logs = Vec::with_capacity(k as usize);
    for instance in 0..k {
        let spec = ObfNetSpec {
            variant,
            instance,
            seed: base_seed.wrapping_add(u64::from(instance)),
        };
        log::info!("training {variant}-{instance} (seed {})", spec.seed);
        let trained = train_obfnet(backbone, &spec, data, cfg).map_err(|e| Error::Instance {
            instance,
            source: Box::new(e),
        })?;
        entries.push(BundleEntry {
            instance,
            seed: spec.seed,
            variant,
            net: trained.net,
        });
        logs.push(trained.log);
    }
    Ok((ObfNetBundle::new(entries, backbone.fingerprint())?, logs))
}

/// Applies `key = value` lines onto `base`. Blank lines and `#` comments are
/// ignored; unknown keys are errors.
pub fn parse_config(text: &str, base: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = base;
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key=value", n + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |e: &dyn std::fmt::Display| Error::InvalidConfig(format!("line {}: {key}: {e}", n + 1));
        match key {
            "learning_rate" | "lr" => cfg.learning_rate = value.parse().map_err(|e| bad(&e))?,
            "momentum" => cfg.momentum = value.parse().map_err(|e| bad(&e))?,
            "batch_size" => cfg.batch_size = value.parse().map_err(|e| bad(&e))?,
            "epochs" => cfg.epochs = value.parse().map_err(|e| bad(&e))?,
            "seed" => cfg.seed = value.parse().map_err(|e| bad(&e))?,
            _ => return Err(Error::InvalidConfig(format!("line {}: unknown key {key:?}", n + 1))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Renders a config in the format accepted by [`parse_config`].
pub fn format_config(cfg: &TrainConfig) -> String {
    format!(
        "learning_rate = {}\nmomentum = {}\nbatch_size = {}\nepochs = {}\nseed = {}\n",
        cfg.learning_rate, cfg.momentum, cfg.batch_size, cfg.epochs, cfg.seed
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;
    use crate::nn::Tensor;

    /// Tiny separable problem: class = index of the brightest of 10 pixel bands.
    fn toy_dataset(n: usize) -> LabeledDataset {
        let mut data = vec![0.0f32; n * 784];
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = (i * 7 + i / 10) % 10;
            labels.push(label as u8);
            for p in 0..784 {
                let band = p * 10 / 784;
                let base = if band == label { 0.9 } else { 0.1 };
                data[i * 784 + p] = base * (((i + p) % 5) as f32 * 0.05 + 0.8);
            }
        }
        LabeledDataset::new(Tensor::new(vec![n, 1, 28, 28], data).unwrap(), labels, Split::Train).unwrap()
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn parse_config_overrides_and_rejects() {
        let cfg = parse_config("# comment\nlr = 0.05\nepochs=3\n\nseed = 11 # trailing\n", TrainConfig::default())
            .unwrap();
        assert_eq!(cfg.learning_rate, 0.05);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.batch_size, 64);
        assert!(parse_config("nonsense = 1", TrainConfig::default()).is_err());
        assert!(parse_config("epochs", TrainConfig::default()).is_err());
        assert!(parse_config("momentum = 1.5", TrainConfig::default()).is_err());
        let round = parse_config(&format_config(&cfg), TrainConfig::default()).unwrap();
        assert_eq!(round, cfg);
    }

    #[test]
    fn zero_epochs_leaves_init() {
        let data = toy_dataset(20);
        let out = pretrain_backbone(&data, &data, &quick_cfg(0)).unwrap();
        assert_eq!(out.backbone, build_lenet(0));
        assert!(out.log.epoch_losses.is_empty());
    }

    #[test]
    fn backbone_training_is_deterministic_and_learns() {
        let data = toy_dataset(200);
        let a = pretrain_backbone(&data, &data, &quick_cfg(4)).unwrap();
        let b = pretrain_backbone(&data, &data, &quick_cfg(4)).unwrap();
        assert_eq!(a.backbone.fingerprint(), b.backbone.fingerprint());
        assert_eq!(a.accuracy, b.accuracy);
        assert!(a.log.epoch_losses.last() < a.log.epoch_losses.first());
        assert!(a.accuracy > 0.5, "{}", a.accuracy);
    }

    #[test]
    fn obfnet_training_freezes_backbone() {
        let data = toy_dataset(64);
        let backbone = pretrain_backbone(&data, &data, &quick_cfg(2)).unwrap().backbone;
        let before = backbone.fingerprint();
        let spec = ObfNetSpec {
            variant: ObfNetVariant::ObfNet1,
            instance: 0,
            seed: 3,
        };
        let mut steps = 0;
        let trained = train_obfnet_observed(&backbone, &spec, &data, &quick_cfg(1), &mut |_, grads| {
            steps += 1;
            for layer in &grads.layers()[3..] {
                assert!(layer.iter().all(|t| t.data().iter().all(|v| *v == 0.0)));
            }
            assert!(grads.layer(0)[0].data().iter().any(|v| *v != 0.0));
        })
        .unwrap();
        assert_eq!(steps, 4);
        assert_eq!(backbone.fingerprint(), before);
        assert_eq!(trained.net.count_params(), 615_440);
        assert_ne!(trained.net.fingerprint(), build_obfnet(&spec).fingerprint());
    }

    #[test]
    fn family_of_one() {
        let data = toy_dataset(32);
        let backbone = build_lenet(1);
        let (bundle, logs) =
            train_obfnet_family(&backbone, ObfNetVariant::ObfNet1, 1, 40, &data, &quick_cfg(1)).unwrap();
        assert_eq!(bundle.len(), 1);
        assert_eq!(logs.len(), 1);
        assert_eq!(bundle.entries()[0].seed, 40);
        bundle.verify_backbone(&backbone).unwrap();
        assert!(matches!(
            train_obfnet_family(&backbone, ObfNetVariant::ObfNet1, 0, 40, &data, &quick_cfg(1)),
            Err(Error::EmptyBundle)
        ));
    }

    #[test]
    fn non_finite_loss_aborts_with_position() {
        let mut data = toy_dataset(16).images().clone().into_data();
        data[0] = f32::NAN;
        // bypass the [0, 1] check to simulate a corrupted batch
        let images = Tensor::new(vec![16, 1, 28, 28], data).unwrap();
        let ds = LabeledDataset::from_parts_unchecked(images, vec![0; 16], Split::Train);
        let mut net = build_lenet(0);
        let err = train_network(&mut net, &ds, &quick_cfg(1), 0, &mut |_, _| {}).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 0, .. }), "{err}");
    }
}
