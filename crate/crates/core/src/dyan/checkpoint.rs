use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{DyanParams, DyanSpec};
use crate::container::Container;
use crate::{Error, Result};

const FORMAT: &str = "dyan-checkpoint";

fn to_container(params: &DyanParams, extra: &BTreeMap<String, String>) -> Result<Container> {
    let mut c = Container::default();
    for (k, v) in extra {
        c.metadata.insert(format!("extra.{k}"), v.clone());
    }
    c.metadata.insert("format".into(), FORMAT.into());
    let spec = serde_json::to_string(params.spec())
        .map_err(|e| Error::Checkpoint(format!("cannot encode spec: {e}")))?;
    c.metadata.insert("spec".into(), spec);
    c.tensors = params
        .names()
        .into_iter()
        .zip(params.tensors().iter().cloned())
        .collect();
    Ok(c)
}

/// Writes parameters and caller metadata atomically.
pub fn save(params: &DyanParams, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
    to_container(params, extra)?.save(path)
}

/// Reads a checkpoint, checking every tensor name and shape against the
/// stored spec. Returns the caller metadata passed to [`save`].
pub fn load(path: &Path) -> Result<(DyanParams, BTreeMap<String, String>)> {
    let c = Container::load(path)?;
    if c.meta("format")? != FORMAT {
        return Err(Error::Checkpoint(format!(
            "{} is not a network checkpoint",
            path.display()
        )));
    }
    let spec: DyanSpec = serde_json::from_str(c.meta("spec")?)
        .map_err(|e| Error::Checkpoint(format!("bad spec: {e}")))?;
    spec.validate()?;
    let layout = spec.layout();
    if layout.len() != c.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, the spec needs {}",
            c.tensors.len(),
            layout.len()
        )));
    }
    let mut tensors = Vec::with_capacity(layout.len());
    for ((name, shape, _), (stored, t)) in layout.iter().zip(c.tensors) {
        if *name != stored || t.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {stored:?} {:?} does not match {name:?} {shape:?}",
                t.shape()
            )));
        }
        if !t.is_finite() {
            return Err(Error::Checkpoint(format!("tensor {name:?} is not finite")));
        }
        tensors.push(t);
    }
    let extra = c
        .metadata
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("extra.").map(|k| (k.to_string(), v.clone())))
        .collect();
    Ok((DyanParams::from_tensors(&spec, tensors)?, extra))
}

/// Hex SHA-256 of the serialised parameters, independent of caller metadata.
pub fn checkpoint_hash(params: &DyanParams) -> String {
    let c = to_container(params, &BTreeMap::new()).expect("spec always serialises");
    hex::encode(Sha256::digest(c.to_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.ckpt");
        let p = DyanParams::build(&DyanSpec::default(), 9).unwrap();
        let mut extra = BTreeMap::new();
        extra.insert("task".into(), "3v3".into());
        save(&p, &path, &extra).unwrap();
        let (q, meta) = load(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(meta, extra);
        assert_eq!(checkpoint_hash(&p), checkpoint_hash(&q));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.ckpt");
        save(&DyanParams::build(&DyanSpec::default(), 1).unwrap(), &path, &BTreeMap::new()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn replay_dump_is_not_a_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.bin");
        crate::replay::TaskBuffer::new(0, 4, 1).unwrap().dump(&path).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}
