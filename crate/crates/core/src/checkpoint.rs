//! Named-array checkpoint file (`LTCK`), little-endian:
//!
//! ```text
//! magic     4 bytes "LTCK"
//! version   u32     1
//! count     u32     number of arrays
//! per array (sorted by name):
//!   name_len u16, name (UTF-8), rank u8, rank x u64 dims, prod(dims) x f64
//! ```
//!
//! Adapter arrays live under `adapter/`; the residual factor is stored as the
//! one-element array `adapter/lambda`.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use crate::adapter::{AdapterParams, Branch, Placement};
use crate::bytes::ByteReader;
use crate::encoder::ModelParams;
use crate::error::{Error, Result};
use crate::params::{ParamStore, ADAPTER_PREFIX};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LTCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const LAMBDA_NAME: &str = "adapter/lambda";

pub fn encode_store(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let count = u32::try_from(store.len()).map_err(|_| Error::Contract("too many arrays".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in store.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Contract(format!("array name too long: {name}")))?;
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| Error::Contract(format!("rank too large for `{name}`")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_store(buf: &[u8]) -> Result<ParamStore> {
    let mut r = ByteReader::new(buf);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic, expected LTCK"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = r.u32("array count")?;
    let mut store = ParamStore::new();
    let mut seen = BTreeSet::new();
    let mut last: Option<String> = None;
    for _ in 0..count {
        let at = r.offset();
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(at + 2, "array name is not UTF-8"))?
            .to_string();
        if name.is_empty() || !seen.insert(name.clone()) {
            return Err(Error::format(at, format!("empty or duplicate array name `{name}`")));
        }
        if last.as_ref().is_some_and(|prev| prev > &name) {
            return Err(Error::format(at, format!("array `{name}` out of order")));
        }
        let rank = r.u8("rank")? as usize;
        if rank == 0 {
            return Err(Error::format(r.offset() - 1, format!("array `{name}` has rank 0")));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let at = r.offset();
            let d = r.u64("dims")?;
            let d = usize::try_from(d)
                .ok()
                .filter(|&d| d > 0)
                .ok_or_else(|| Error::format(at, format!("array `{name}` has invalid dimension {d}")))?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::format(at, format!("array `{name}` is too large")))?;
            dims.push(d);
        }
        if numel.checked_mul(8).is_none_or(|n| n > r.remaining()) {
            return Err(Error::format(r.offset(), format!("truncated payload for `{name}`")));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64("payload")?);
        }
        store.insert(name.clone(), Tensor::new(dims, data)?);
        last = Some(name);
    }
    r.finish()?;
    Ok(store)
}

/// Backbone parameters plus an optional trained adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub adapter: Option<AdapterParams>,
}

impl Checkpoint {
    pub fn to_store(&self) -> Result<ParamStore> {
        let mut store = self.model.store().clone();
        if let Some(a) = &self.adapter {
            store.extend(a.store())?;
            store.insert(LAMBDA_NAME, Tensor::scalar(a.lambda()));
        }
        Ok(store)
    }

    pub fn from_store(store: ParamStore) -> Result<Self> {
        let backbone = store.filter(|n| !n.starts_with(ADAPTER_PREFIX));
        let model = ModelParams::from_store(backbone)?;
        let adapter_arrays = store.filter(|n| n.starts_with(ADAPTER_PREFIX) && n != LAMBDA_NAME);
        let adapter = if adapter_arrays.is_empty() && !store.contains(LAMBDA_NAME) {
            None
        } else {
            let lambda = store.get(LAMBDA_NAME)?;
            if lambda.len() != 1 {
                return Err(Error::dim("checkpoint", &[1], lambda.shape()));
            }
            let visual = adapter_arrays.contains(&Branch::Visual.weight_name());
            let language = adapter_arrays.contains(&Branch::Language.weight_name());
            let placement = match (visual, language) {
                (true, true) => Placement::Both,
                (true, false) => Placement::Visual,
                (false, true) => Placement::Language,
                (false, false) => return Err(Error::Contract("adapter lambda without adapter weights".into())),
            };
            let a = AdapterParams::from_parts(lambda.item(), placement, adapter_arrays)?;
            if a.width() != model.dims().joint_dim {
                return Err(Error::dim("checkpoint", &[a.width()], &[model.dims().joint_dim]));
            }
            Some(a)
        };
        Ok(Checkpoint { model, adapter })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        encode_store(&self.to_store()?)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        Checkpoint::from_store(decode_store(buf)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::decode(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelDims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn checkpoint(placement: Option<Placement>) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let dims = ModelDims {
            input_dim: 4,
            hidden: vec![5, 3],
            visual_out: 4,
            embed_dim: 3,
            text_hidden: vec![2],
            text_out: 4,
            joint_dim: 3,
            num_classes: 6,
            num_templates: 2,
        };
        let model = ModelParams::init(dims, &mut rng).unwrap();
        let adapter = placement.map(|p| AdapterParams::init(3, p, 0.2, &mut rng).unwrap());
        Checkpoint { model, adapter }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for p in [None, Some(Placement::Visual), Some(Placement::Language), Some(Placement::Both)] {
            let ck = checkpoint(p);
            let bytes = ck.encode().unwrap();
            let back = Checkpoint::decode(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.encode().unwrap(), bytes);
        }
    }

    #[test]
    fn backbone_digest_excludes_adapter() {
        let with = checkpoint(Some(Placement::Visual));
        let store = with.to_store().unwrap();
        assert_eq!(store.backbone_digest(), with.model.digest());
    }

    #[test]
    fn truncation_and_trailing_bytes_fail() {
        let bytes = checkpoint(Some(Placement::Both)).encode().unwrap();
        for cut in [0, 5, 12, 20, bytes.len() - 3] {
            assert!(matches!(decode_store(&bytes[..cut]), Err(Error::Format { .. })));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_store(&extra), Err(Error::Format { .. })));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::scalar(1.0));
        let one = encode_store(&s).unwrap();
        let mut twice = one.clone();
        twice[8..12].copy_from_slice(&2u32.to_le_bytes());
        twice.extend_from_slice(&one[12..]);
        assert!(decode_store(&twice).is_err());
    }
}
