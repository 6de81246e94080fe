//! Binary checkpoint: `SATL`, a little-endian u16 version, a u32-length-prefixed
//! JSON header, then every parameter as little-endian f64 values in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::data::Vocab;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::StructureLm;
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"SATL";
pub const VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    encoder: EncoderConfig,
    train: TrainConfig,
    vocab: Vocab,
    classes: Option<Vec<String>>,
    params: Vec<ParamEntry>,
}

pub fn to_bytes<T: Scalar>(model: &StructureLm<T>) -> Result<Vec<u8>> {
    let header = Header {
        encoder: model.encoder_config().clone(),
        train: model.config.clone(),
        vocab: model.vocab().clone(),
        classes: model.classifier().map(|c| c.classes().to_vec()),
        params: model
            .store
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header encoding: {e}")))?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Format("header exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(10 + json.len() + 8 * model.store.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in model.store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<StructureLm<T>> {
    let take = |at: usize, n: usize| -> Result<&[u8]> {
        bytes
            .get(at..at + n)
            .ok_or_else(|| Error::Format(format!("file truncated at byte {at}")))
    };
    if take(0, 4)? != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = u16::from_le_bytes(take(4, 2)?.try_into().expect("two bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    let len = u32::from_le_bytes(take(6, 4)?.try_into().expect("four bytes")) as usize;
    let header: Header =
        serde_json::from_slice(take(10, len)?).map_err(|e| Error::Format(format!("header: {e}")))?;
    let mut at = 10 + len;
    let expected_payload: usize = header.params.iter().map(|p| 8 * p.shape.iter().product::<usize>()).sum();
    if bytes.len() - at != expected_payload {
        return Err(Error::Format(format!(
            "payload holds {} bytes, header describes {expected_payload}",
            bytes.len() - at
        )));
    }
    if header.train.encoder_config(header.vocab.len()) != header.encoder {
        return Err(Error::Integrity(
            "encoder configuration disagrees with training configuration and vocabulary".into(),
        ));
    }
    let mut store = ParamStore::new();
    for p in &header.params {
        let numel: usize = p.shape.iter().product();
        let data = take(at, 8 * numel)?
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("eight bytes"))))
            .collect();
        at += 8 * numel;
        let value = Tensor::new(p.shape.clone(), data).map_err(|e| Error::Integrity(e.to_string()))?;
        store.add(p.name.clone(), value)?;
    }
    StructureLm::from_parts(header.vocab, header.train, store, header.classes)
}

pub fn save_checkpoint<T: Scalar>(model: &StructureLm<T>, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<StructureLm<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn tiny() -> StructureLm<f64> {
        let sents = vec![crate::data::tokenize("the dog saw a cat"), crate::data::tokenize("a cat ran")];
        let vocab = Vocab::build(&sents, 1).unwrap();
        let cfg = TrainConfig {
            n_layers: 4,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            max_len: 16,
            ..TrainConfig::default()
        };
        StructureLm::new(vocab, cfg).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = tiny();
        m.attach_classifier(vec!["a".into(), "b".into()]).unwrap();
        let bytes = to_bytes(&m).unwrap();
        let back: StructureLm<f64> = from_bytes(&bytes).unwrap();
        assert_eq!(to_bytes(&back).unwrap(), bytes);
        for ((_, a), (_, b)) in m.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        assert_eq!(back.config, m.config);
        assert_eq!(back.classifier().unwrap().classes(), ["a", "b"]);
        let toks = crate::data::tokenize("the cat saw a dog");
        let (mut g1, mut g2) = (Graph::new(), Graph::new());
        let a = m.encode_ids(&mut g1, &m.encode_tokens(&toks)).unwrap();
        let b = back.encode_ids(&mut g2, &back.encode_tokens(&toks)).unwrap();
        assert_eq!(g1.value(a.top()), g2.value(b.top()));
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let bytes = to_bytes(&tiny()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes::<f64>(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(from_bytes::<f64>(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[12] = b'!';
        assert!(matches!(from_bytes::<f64>(&bad), Err(Error::Format(_))));
        assert!(matches!(from_bytes::<f64>(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        assert!(matches!(from_bytes::<f64>(&bytes[..7]), Err(Error::Format(_))));
    }

    #[test]
    fn shape_mismatch_is_an_integrity_error() {
        let m = tiny();
        let bytes = to_bytes(&m).unwrap();
        let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[10..10 + len]).unwrap();
        let rebuild = |h: &str| {
            let mut out = bytes[..6].to_vec();
            out.extend_from_slice(&(h.len() as u32).to_le_bytes());
            out.extend_from_slice(h.as_bytes());
            out.extend_from_slice(&bytes[10 + len..]);
            out
        };
        let transposed = header.replace(
            "\"name\":\"syntax.proj.weight\",\"shape\":[8,1]",
            "\"name\":\"syntax.proj.weight\",\"shape\":[1,8]",
        );
        assert_ne!(transposed, header);
        assert!(matches!(from_bytes::<f64>(&rebuild(&transposed)), Err(Error::Integrity(_))));
        let out = rebuild(&header.replacen("\"d_ff\":16", "\"d_ff\":17", 1));
        assert!(matches!(from_bytes::<f64>(&out), Err(Error::Integrity(_))));
    }
}
