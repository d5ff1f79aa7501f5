//! Self-describing binary model container. All integers and floats are
//! little-endian.
//!
//! ```text
//! magic "OBFM" | version u16 | input rank u32 | input dims u32… | layer count u32
//! per layer:  kind u8 | trainable u8 | hyperparameters u32… | parameters f32…
//! trailer:    FNV-1a u64 over every parameter byte in layer order
//! ```
//!
//! Kind tags and hyperparameters:
//! `0` Dense (in, out) · `1` Conv2D (in_ch, out_ch, kernel, stride, padding) ·
//! `2` MaxPool2D (size, stride) · `3` ReLU · `4` Flatten · `5` Reshape (rank, dims…).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fnv::Fnv1a;
use crate::nn::{Conv2d, Dense, Layer, MaxPool2d, Network, Tensor};

pub const MODEL_MAGIC: &[u8; 4] = b"OBFM";
const VERSION: u16 = 1;

pub fn encode_model(net: &Network) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 4 * net.count_params());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    put(&mut out, net.input_shape().len());
    for &d in net.input_shape() {
        put(&mut out, d);
    }
    put(&mut out, net.layers().len());
    for (i, layer) in net.layers().iter().enumerate() {
        let tag = match layer {
            Layer::Dense(_) => 0u8,
            Layer::Conv2d(_) => 1,
            Layer::MaxPool2d(_) => 2,
            Layer::Relu => 3,
            Layer::Flatten => 4,
            Layer::Reshape(_) => 5,
        };
        out.push(tag);
        out.push(u8::from(net.is_trainable(i)));
        match layer {
            Layer::Dense(d) => {
                put(&mut out, d.in_dim);
                put(&mut out, d.out_dim);
            }
            Layer::Conv2d(c) => {
                for v in [c.in_channels, c.out_channels, c.kernel, c.stride, c.padding] {
                    put(&mut out, v);
                }
            }
            Layer::MaxPool2d(p) => {
                put(&mut out, p.size);
                put(&mut out, p.stride);
            }
            Layer::Reshape(dims) => {
                put(&mut out, dims.len());
                for &d in dims {
                    put(&mut out, d);
                }
            }
            Layer::Relu | Layer::Flatten => {}
        }
        for p in layer.params() {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out.extend_from_slice(&net.fingerprint().to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    hash: Fnv1a,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated model: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn dims(&mut self, rank: usize) -> Result<Vec<usize>> {
        if rank > 8 {
            return Err(Error::Format(format!("unsupported rank {rank}")));
        }
        (0..rank).map(|_| self.u32()).collect()
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("parameter size overflow".into()))?;
        let raw = self.take(len)?;
        self.hash.update(raw);
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(shape.to_vec(), data)
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader {
        bytes,
        pos: 0,
        hash: Fnv1a::default(),
    };
    if r.take(4)? != MODEL_MAGIC {
        return Err(Error::Format("not a model container (bad magic)".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let rank = r.u32()?;
    let input_shape = r.dims(rank)?;
    let count = r.u32()?;
    let mut layers = Vec::new();
    let mut trainable = Vec::new();
    for i in 0..count {
        let tag = r.u8()?;
        trainable.push(match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(Error::Format(format!("layer {i}: bad trainable flag {other}"))),
        });
        let layer = match tag {
            0 => {
                let (in_dim, out_dim) = (r.u32()?, r.u32()?);
                let weight = r.tensor(&[out_dim, in_dim])?;
                let bias = r.tensor(&[out_dim])?;
                Layer::Dense(Dense {
                    in_dim,
                    out_dim,
                    weight,
                    bias,
                })
            }
            1 => {
                let (in_channels, out_channels, kernel) = (r.u32()?, r.u32()?, r.u32()?);
                let (stride, padding) = (r.u32()?, r.u32()?);
                let weight = r.tensor(&[out_channels, in_channels, kernel, kernel])?;
                let bias = r.tensor(&[out_channels])?;
                Layer::Conv2d(Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    weight,
                    bias,
                })
            }
            2 => Layer::MaxPool2d(MaxPool2d {
                size: r.u32()?,
                stride: r.u32()?,
            }),
            3 => Layer::Relu,
            4 => Layer::Flatten,
            5 => {
                let rank = r.u32()?;
                Layer::Reshape(r.dims(rank)?)
            }
            other => return Err(Error::Format(format!("layer {i}: unknown kind tag {other}"))),
        };
        layers.push(layer);
    }
    let computed = r.hash.finish();
    let stored = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after model", bytes.len() - r.pos)));
    }
    if stored != computed {
        return Err(Error::FingerprintMismatch {
            expected: stored,
            found: computed,
        });
    }
    let mut net = Network::new(input_shape, layers)?;
    for (i, t) in trainable.into_iter().enumerate() {
        net.set_trainable(i, t);
    }
    Ok(net)
}

pub fn save_model(net: &Network, path: &Path) -> Result<()> {
    fs::write(path, encode_model(net))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Network> {
    let bytes = fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    decode_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_lenet, build_obfnet, concatenate_frozen, ObfNetSpec, ObfNetVariant};

    #[test]
    fn round_trips_every_layer_kind() {
        let obf = build_obfnet(&ObfNetSpec {
            variant: ObfNetVariant::ObfNet1,
            instance: 0,
            seed: 9,
        });
        let composite = concatenate_frozen(&obf, &build_lenet(1)).unwrap();
        let bytes = encode_model(&composite);
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, composite);
        assert_eq!(encode_model(&back), bytes);
        let tail = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        assert_eq!(tail, composite.fingerprint());
    }

    #[test]
    fn corrupted_parameter_fails_fingerprint() {
        let mut bytes = encode_model(&build_lenet(0));
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(decode_model(&bytes), Err(Error::FingerprintMismatch { .. })));
    }

    #[test]
    fn truncation_and_bad_magic() {
        let bytes = encode_model(&build_lenet(0));
        assert!(matches!(decode_model(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_model(&long), Err(Error::Format(_))));
    }
}
