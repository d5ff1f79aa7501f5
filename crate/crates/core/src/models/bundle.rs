//! K trained obfuscators bound to the backbone they were trained against.
//!
//! ```text
//! magic "OBFB" | version u16 | K u32 | body length u64 | backbone fingerprint u64 | entries…
//! entry: instance u32 | seed u64 | variant u8 | model length u64 | model container
//! ```
//! Integers are little-endian; "body length" counts every byte after itself.

use std::fs;
use std::path::Path;

use crate::dataset::IMAGE_LEN;
use crate::error::{Error, Result};
use crate::nn::Network;

use super::container::{decode_model, encode_model};
use super::ObfNetVariant;

pub const BUNDLE_MAGIC: &[u8; 4] = b"OBFB";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct BundleEntry {
    pub instance: u32,
    pub seed: u64,
    pub variant: ObfNetVariant,
    pub net: Network,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObfNetBundle {
    entries: Vec<BundleEntry>,
    backbone_fingerprint: u64,
}

impl ObfNetBundle {
    /// Validates and orders the entries by instance index.
    pub fn new(mut entries: Vec<BundleEntry>, backbone_fingerprint: u64) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyBundle);
        }
        for e in &entries {
            let params = e.net.count_params();
            if params != e.variant.expected_params() {
                return Err(Error::Format(format!(
                    "instance {}: {} has {params} parameters, expected {}",
                    e.instance,
                    e.variant,
                    e.variant.expected_params()
                )));
            }
            if e.net.input_shape() != [IMAGE_LEN] || e.net.output_shape() != [IMAGE_LEN] {
                return Err(Error::Format(format!(
                    "instance {}: obfuscator must map 784 values to 784 values",
                    e.instance
                )));
            }
        }
        entries.sort_by_key(|e| e.instance);
        if entries.windows(2).any(|w| w[0].instance == w[1].instance) {
            return Err(Error::Format("duplicate instance index in bundle".into()));
        }
        Ok(Self {
            entries,
            backbone_fingerprint,
        })
    }

    pub fn entries(&self) -> &[BundleEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Always false for a constructed bundle.
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn backbone_fingerprint(&self) -> u64 {
        self.backbone_fingerprint
    }

    pub fn net(&self, index: usize) -> &Network {
        &self.entries[index].net
    }

    pub fn verify_backbone(&self, backbone: &Network) -> Result<()> {
        let found = backbone.fingerprint();
        if found != self.backbone_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.backbone_fingerprint,
                found,
            });
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::new();
        body.extend_from_slice(&self.backbone_fingerprint.to_le_bytes());
        for e in &self.entries {
            let model = encode_model(&e.net);
            body.extend_from_slice(&e.instance.to_le_bytes());
            body.extend_from_slice(&e.seed.to_le_bytes());
            body.push(e.variant.tag());
            body.extend_from_slice(&(model.len() as u64).to_le_bytes());
            body.extend_from_slice(&model);
        }
        let mut out = Vec::with_capacity(HEADER_LEN + body.len());
        out.extend_from_slice(BUNDLE_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
        out
    }

    /// Parses a bundle and re-checks every invariant, including each model's
    /// own trailing fingerprint.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (k, body) = split_header(bytes)?;
        let mut pos = 0;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos + n;
            let s = body.get(pos..end).ok_or_else(|| Error::Format("truncated bundle".into()))?;
            pos = end;
            Ok(s)
        };
        let le64 = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
        let backbone_fingerprint = le64(take(8)?);
        let mut entries = Vec::with_capacity(k.min(1024));
        for _ in 0..k {
            let instance = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
            let seed = le64(take(8)?);
            let tag = take(1)?[0];
            let variant = ObfNetVariant::from_tag(tag)
                .ok_or_else(|| Error::Format(format!("unknown variant tag {tag}")))?;
            let len = usize::try_from(le64(take(8)?)).map_err(|_| Error::Format("model too large".into()))?;
            let net = decode_model(take(len)?)?;
            entries.push(BundleEntry {
                instance,
                seed,
                variant,
                net,
            });
        }
        if pos != body.len() {
            return Err(Error::Format("bundle body length disagrees with its entries".into()));
        }
        Self::new(entries, backbone_fingerprint)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes)
    }
}

/// Returns `(K, body)` after checking magic, version and declared length.
fn split_header(bytes: &[u8]) -> Result<(usize, &[u8])> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format("truncated bundle header".into()));
    }
    if &bytes[..4] != BUNDLE_MAGIC {
        return Err(Error::Format("not an ObfNet bundle (bad magic)".into()));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported bundle version {version}")));
    }
    let k = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    if k == 0 {
        return Err(Error::EmptyBundle);
    }
    let body_len = u64::from_le_bytes(bytes[10..18].try_into().expect("8 bytes"));
    let body = &bytes[HEADER_LEN..];
    if body.len() as u64 != body_len {
        return Err(Error::Format(format!(
            "bundle declares {body_len} body bytes, found {}",
            body.len()
        )));
    }
    Ok((k, body))
}

/// Length of the fixed bundle header, after which `body length` bytes follow.
pub(crate) const fn header_len() -> usize {
    HEADER_LEN
}

/// Reads the declared body length from a bundle header.
pub(crate) fn declared_body_len(header: &[u8]) -> Result<u64> {
    if header.len() < HEADER_LEN || &header[..4] != BUNDLE_MAGIC {
        return Err(Error::Format("not an ObfNet bundle header".into()));
    }
    Ok(u64::from_le_bytes(header[10..18].try_into().expect("8 bytes")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_lenet, build_obfnet, ObfNetSpec};

    fn entry(instance: u32) -> BundleEntry {
        let spec = ObfNetSpec {
            variant: ObfNetVariant::ObfNet1,
            instance,
            seed: 100 + u64::from(instance),
        };
        BundleEntry {
            instance,
            seed: spec.seed,
            variant: spec.variant,
            net: build_obfnet(&spec),
        }
    }

    #[test]
    fn empty_bundle_rejected() {
        assert!(matches!(ObfNetBundle::new(vec![], 0), Err(Error::EmptyBundle)));
        let mut bytes = ObfNetBundle::new(vec![entry(0)], 1).unwrap().encode();
        bytes[6..10].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(ObfNetBundle::decode(&bytes), Err(Error::EmptyBundle)));
    }

    #[test]
    fn encode_decode_preserves_bytes_and_order() {
        let backbone = build_lenet(5);
        let bundle = ObfNetBundle::new(vec![entry(1), entry(0)], backbone.fingerprint()).unwrap();
        assert_eq!(bundle.entries()[0].instance, 0);
        let bytes = bundle.encode();
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 2);
        let back = ObfNetBundle::decode(&bytes).unwrap();
        assert_eq!(back, bundle);
        assert_eq!(back.encode(), bytes);
        back.verify_backbone(&backbone).unwrap();
        assert!(back.verify_backbone(&build_lenet(6)).is_err());
    }

    #[test]
    fn wrong_variant_parameter_count_rejected() {
        let mut e = entry(0);
        e.variant = ObfNetVariant::ObfNet2;
        assert!(ObfNetBundle::new(vec![e], 0).is_err());
    }

    #[test]
    fn truncated_bundle_rejected() {
        let bytes = ObfNetBundle::new(vec![entry(0)], 0).unwrap().encode();
        assert!(ObfNetBundle::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(ObfNetBundle::decode(&bytes[..10]).is_err());
    }
}
