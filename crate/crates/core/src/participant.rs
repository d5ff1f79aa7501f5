//! Participant side: per sample, decide whether to obfuscate, pick one
//! obfuscator uniformly from the bundle, and submit to the coordinator.
//!
//! The chosen instance index never leaves this module. Obfuscated values are
//! sent as produced, without clipping.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::coordinator::wire::Prediction;
use crate::coordinator::InferenceClient;
use crate::dataset::IMAGE_LEN;
use crate::error::{Error, Result};
use crate::models::{init_rng, ObfNetBundle};
use crate::nn::{Network, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticipantPolicy {
    /// Probability of obfuscating any given sample.
    pub obfuscation_probability: f64,
    pub seed: u64,
}

impl ParticipantPolicy {
    pub fn new(obfuscation_probability: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&obfuscation_probability) {
            return Err(Error::InvalidConfig(format!(
                "obfuscation probability must lie in [0, 1], got {obfuscation_probability}"
            )));
        }
        Ok(Self {
            obfuscation_probability,
            seed,
        })
    }
}

/// Uniform choice over the bundle's nets.
pub fn choose_obfnet<'a, R: Rng + ?Sized>(bundle: &'a ObfNetBundle, rng: &mut R) -> Result<&'a Network> {
    choose_index(bundle, rng).map(|i| bundle.net(i))
}

fn choose_index<R: Rng + ?Sized>(bundle: &ObfNetBundle, rng: &mut R) -> Result<usize> {
    if bundle.is_empty() {
        return Err(Error::EmptyBundle);
    }
    Ok(rng.gen_range(0..bundle.len()))
}

/// Runs one sample of 784 values through `net`.
pub fn obfuscate(sample: &[f32], net: &Network) -> Result<Vec<f32>> {
    if sample.len() != IMAGE_LEN {
        return Err(Error::ShapeMismatch {
            layer: 0,
            expected: vec![IMAGE_LEN],
            found: vec![sample.len()],
        });
    }
    let out = net.predict(&Tensor::new(vec![1, IMAGE_LEN], sample.to_vec())?)?;
    Ok(out.into_data())
}

/// Sends one payload, raw or obfuscated; the frame is the same either way.
pub fn submit(payload: &[f32], client: &mut InferenceClient) -> Result<Prediction> {
    client.infer(payload)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Submission {
    pub prediction: Prediction,
    pub obfuscated: bool,
}

/// A participant holding a bundle and a seeded decision stream.
#[derive(Debug)]
pub struct Participant {
    bundle: Arc<ObfNetBundle>,
    policy: ParticipantPolicy,
    rng: ChaCha8Rng,
}

impl Participant {
    pub fn new(bundle: Arc<ObfNetBundle>, policy: ParticipantPolicy) -> Result<Self> {
        let policy = ParticipantPolicy::new(policy.obfuscation_probability, policy.seed)?;
        if bundle.is_empty() {
            return Err(Error::EmptyBundle);
        }
        Ok(Self {
            bundle,
            rng: init_rng(policy.seed),
            policy,
        })
    }

    pub fn policy(&self) -> &ParticipantPolicy {
        &self.policy
    }

    /// Returns the payload to transmit and whether it was obfuscated.
    pub fn prepare(&mut self, sample: &[f32]) -> Result<(Vec<f32>, bool)> {
        let obfuscate_this = self.rng.gen_bool(self.policy.obfuscation_probability);
        if !obfuscate_this {
            if sample.len() != IMAGE_LEN {
                return Err(Error::ShapeMismatch {
                    layer: 0,
                    expected: vec![IMAGE_LEN],
                    found: vec![sample.len()],
                });
            }
            return Ok((sample.to_vec(), false));
        }
        let net = choose_obfnet(&self.bundle, &mut self.rng)?;
        Ok((obfuscate(sample, net)?, true))
    }

    pub fn process(&mut self, sample: &[f32], client: &mut InferenceClient) -> Result<Submission> {
        let (payload, obfuscated) = self.prepare(sample)?;
        Ok(Submission {
            prediction: submit(&payload, client)?,
            obfuscated,
        })
    }
}
