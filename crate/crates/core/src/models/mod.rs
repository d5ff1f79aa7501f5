//! The three architectures (LeNet backbone, ObfNet1, ObfNet2), the
//! frozen-backbone concatenation used to train obfuscators, and their
//! on-disk formats.

mod bundle;
mod container;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{IMAGE_LEN, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Dense, Layer, MaxPool2d, Network};

pub use bundle::{BundleEntry, ObfNetBundle, BUNDLE_MAGIC};
pub(crate) use bundle::{declared_body_len, header_len};
pub use container::{decode_model, encode_model, load_model, save_model, MODEL_MAGIC};

pub const OBFNET2_HIDDEN: usize = 1000;

/// Seeded generator used for every weight initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObfNetVariant {
    /// Dense(784→784) + ReLU
    ObfNet1,
    /// Dense(784→1000) + ReLU + Dense(1000→784) + ReLU
    ObfNet2,
}

impl ObfNetVariant {
    pub fn hidden_width(self) -> usize {
        match self {
            ObfNetVariant::ObfNet1 => 0,
            ObfNetVariant::ObfNet2 => OBFNET2_HIDDEN,
        }
    }

    pub fn expected_params(self) -> usize {
        match self {
            ObfNetVariant::ObfNet1 => IMAGE_LEN * IMAGE_LEN + IMAGE_LEN,
            ObfNetVariant::ObfNet2 => {
                (IMAGE_LEN * OBFNET2_HIDDEN + OBFNET2_HIDDEN) + (OBFNET2_HIDDEN * IMAGE_LEN + IMAGE_LEN)
            }
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            ObfNetVariant::ObfNet1 => 1,
            ObfNetVariant::ObfNet2 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(ObfNetVariant::ObfNet1),
            2 => Some(ObfNetVariant::ObfNet2),
            _ => None,
        }
    }
}

impl fmt::Display for ObfNetVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ObfNet{}", self.tag())
    }
}

impl FromStr for ObfNetVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().trim_start_matches("obfnet") {
            "1" => Ok(ObfNetVariant::ObfNet1),
            "2" => Ok(ObfNetVariant::ObfNet2),
            _ => Err(Error::InvalidConfig(format!("unknown ObfNet variant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObfNetSpec {
    pub variant: ObfNetVariant,
    /// Instance index `x` within a family.
    pub instance: u32,
    pub seed: u64,
}

/// LeNet-5 with ReLU and max pooling, input `(1, 28, 28)`, 10 logits.
pub fn build_lenet(seed: u64) -> Network {
    let mut rng = init_rng(seed);
    let layers = vec![
        Layer::Conv2d(Conv2d::new(1, 6, 5, 1, 2, &mut rng)),
        Layer::Relu,
        Layer::MaxPool2d(MaxPool2d { size: 2, stride: 2 }),
        Layer::Conv2d(Conv2d::new(6, 16, 5, 1, 0, &mut rng)),
        Layer::Relu,
        Layer::MaxPool2d(MaxPool2d { size: 2, stride: 2 }),
        Layer::Flatten,
        Layer::Dense(Dense::new(400, 120, &mut rng)),
        Layer::Relu,
        Layer::Dense(Dense::new(120, 84, &mut rng)),
        Layer::Relu,
        Layer::Dense(Dense::new(84, 10, &mut rng)),
    ];
    Network::new(vec![1, IMAGE_SIDE, IMAGE_SIDE], layers).expect("LeNet layer chain is consistent")
}

pub fn build_obfnet(spec: &ObfNetSpec) -> Network {
    let mut rng = init_rng(spec.seed);
    let layers = match spec.variant {
        ObfNetVariant::ObfNet1 => vec![Layer::Dense(Dense::new(IMAGE_LEN, IMAGE_LEN, &mut rng)), Layer::Relu],
        ObfNetVariant::ObfNet2 => vec![
            Layer::Dense(Dense::new(IMAGE_LEN, OBFNET2_HIDDEN, &mut rng)),
            Layer::Relu,
            Layer::Dense(Dense::new(OBFNET2_HIDDEN, IMAGE_LEN, &mut rng)),
            Layer::Relu,
        ],
    };
    Network::new(vec![IMAGE_LEN], layers).expect("ObfNet layer chain is consistent")
}

/// Chains `obfnet`, a reshape bridge onto the backbone's input shape, and the
/// backbone. Only the obfnet layers stay trainable.
pub fn concatenate_frozen(obfnet: &Network, backbone: &Network) -> Result<Network> {
    let out_len: usize = obfnet.output_shape().iter().product();
    let in_len: usize = backbone.input_shape().iter().product();
    if out_len != in_len {
        return Err(Error::ShapeMismatch {
            layer: obfnet.layers().len(),
            expected: backbone.input_shape().to_vec(),
            found: obfnet.output_shape().to_vec(),
        });
    }
    let head = obfnet.layers().len();
    let mut layers = obfnet.layers().to_vec();
    layers.push(Layer::Reshape(backbone.input_shape().to_vec()));
    layers.extend_from_slice(backbone.layers());
    let mut composite = Network::new(obfnet.input_shape().to_vec(), layers)?;
    for i in 0..composite.layers().len() {
        composite.set_trainable(i, i < head);
    }
    Ok(composite)
}

/// Recovers the obfuscator from a composite built with [`concatenate_frozen`].
pub fn detach_obfnet(composite: &Network, obfnet_layers: usize) -> Result<Network> {
    if obfnet_layers == 0 || obfnet_layers >= composite.layers().len() {
        return Err(Error::InvalidConfig(format!(
            "cannot detach {obfnet_layers} layers from a {}-layer composite",
            composite.layers().len()
        )));
    }
    let (mut head, _) = composite.split_at(obfnet_layers)?;
    head.set_all_trainable(true);
    Ok(head)
}

/// Recovers the backbone part (everything after the reshape bridge) of a
/// composite built with [`concatenate_frozen`], trainable flags included.
pub fn detach_backbone(composite: &Network, obfnet_layers: usize) -> Result<Network> {
    if obfnet_layers == 0 || obfnet_layers + 1 >= composite.layers().len() {
        return Err(Error::InvalidConfig(format!(
            "no backbone after {obfnet_layers} obfuscator layers in a {}-layer composite",
            composite.layers().len()
        )));
    }
    let (_, tail) = composite.split_at(obfnet_layers + 1)?;
    Ok(tail)
}
