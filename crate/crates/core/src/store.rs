//! Named-tensor files (safetensors layout) shared by encoder weights and
//! decoder checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use half::{bf16, f16};
use safetensors::tensor::{Dtype, SafeTensorError, SafeTensors, TensorView};

use crate::error::{Error, Result};

/// One named tensor held in `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        NamedTensor { shape, data }
    }
}

/// Tensors keyed by name, iterated in lexicographic order.
pub type TensorMap = BTreeMap<String, NamedTensor>;

fn weight_err(path: &Path, message: impl Into<String>) -> Error {
    Error::WeightFile {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn decode(name: &str, view: &TensorView<'_>) -> Result<Vec<f32>> {
    let bytes = view.data();
    let data = match view.dtype() {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")) as f32)
            .collect(),
        Dtype::F16 => bytes
            .chunks_exact(2)
            .map(|b| f16::from_le_bytes([b[0], b[1]]).to_f32())
            .collect(),
        Dtype::BF16 => bytes
            .chunks_exact(2)
            .map(|b| bf16::from_le_bytes([b[0], b[1]]).to_f32())
            .collect(),
        other => {
            return Err(Error::TensorMismatch {
                name: name.to_string(),
                message: format!("unsupported dtype {other:?} (expected a float type)"),
            })
        }
    };
    Ok(data)
}

/// Explains why a buffer whose header parses does not hold all tensor data,
/// naming the first tensor (by file offset) that is cut short.
fn diagnose_truncation(buffer: &[u8]) -> Option<Error> {
    let n = u64::from_le_bytes(buffer.get(..8)?.try_into().ok()?) as usize;
    let header = std::str::from_utf8(buffer.get(8..8usize.checked_add(n)?)?).ok()?;
    let json: serde_json::Value = serde_json::from_str(header).ok()?;
    let available = buffer.len() - 8 - n;
    let mut entries: Vec<(u64, u64, &str)> = json
        .as_object()?
        .iter()
        .filter(|(k, _)| k.as_str() != "__metadata__")
        .filter_map(|(k, v)| {
            let off = v.get("data_offsets")?.as_array()?;
            Some((off.first()?.as_u64()?, off.get(1)?.as_u64()?, k.as_str()))
        })
        .collect();
    entries.sort();
    let (start, end, name) = entries.into_iter().find(|&(_, end, _)| end as usize > available)?;
    Some(Error::TensorMismatch {
        name: name.to_string(),
        message: format!(
            "truncated: data occupies bytes [{start}, {end}) but only {available} data bytes are present"
        ),
    })
}

/// Reads every tensor of a named-tensor file plus its string metadata.
pub fn read(path: &Path) -> Result<(TensorMap, HashMap<String, String>)> {
    let buffer = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&buffer, path)
}

/// Decodes an in-memory named-tensor file; `path` only labels errors.
pub fn parse(buffer: &[u8], path: &Path) -> Result<(TensorMap, HashMap<String, String>)> {
    let st = match SafeTensors::deserialize(buffer) {
        Ok(st) => st,
        Err(SafeTensorError::MetadataIncompleteBuffer) | Err(SafeTensorError::InvalidOffset(_)) => {
            return Err(diagnose_truncation(buffer)
                .unwrap_or_else(|| weight_err(path, "file is truncated or has inconsistent offsets")))
        }
        Err(SafeTensorError::InvalidHeaderLength) | Err(SafeTensorError::HeaderTooSmall) => {
            return Err(weight_err(path, "file is truncated inside its header"))
        }
        Err(e) => return Err(weight_err(path, format!("not a named-tensor file: {e:?}"))),
    };
    let (_, meta) = SafeTensors::read_metadata(buffer)
        .map_err(|e| weight_err(path, format!("{e:?}")))?;
    let metadata = meta.metadata().clone().unwrap_or_default();
    let mut map = TensorMap::new();
    for (name, view) in st.tensors() {
        let data = decode(&name, &view)?;
        map.insert(name, NamedTensor::new(view.shape().to_vec(), data));
    }
    Ok((map, metadata))
}

/// Serializes `tensors` as `f32` with optional string metadata.
pub fn to_bytes(tensors: &TensorMap, metadata: Option<HashMap<String, String>>) -> Result<Vec<u8>> {
    let raw: Vec<(&str, Vec<u8>, &[usize])> = tensors
        .iter()
        .map(|(k, t)| {
            let bytes = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            (k.as_str(), bytes, t.shape.as_slice())
        })
        .collect();
    let mut views = Vec::with_capacity(raw.len());
    for (name, bytes, shape) in &raw {
        let view = TensorView::new(Dtype::F32, shape.to_vec(), bytes).map_err(|e| Error::TensorMismatch {
            name: name.to_string(),
            message: format!("{e:?}"),
        })?;
        views.push((*name, view));
    }
    safetensors::serialize(views, &metadata).map_err(|e| Error::Checkpoint(format!("{e:?}")))
}

/// Writes `tensors` to `path`, creating parent directories.
pub fn write(path: &Path, tensors: &TensorMap, metadata: Option<HashMap<String, String>>) -> Result<()> {
    let bytes = to_bytes(tensors, metadata)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorMap {
        let mut m = TensorMap::new();
        m.insert("a.weight".into(), NamedTensor::new(vec![2, 3], (0..6).map(|v| v as f32).collect()));
        m.insert("b.bias".into(), NamedTensor::new(vec![4], vec![0.5; 4]));
        m
    }

    #[test]
    fn round_trip_preserves_tensors_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.safetensors");
        let meta = HashMap::from([("k".to_string(), "v".to_string())]);
        write(&path, &sample(), Some(meta.clone())).unwrap();
        let (map, got) = read(&path).unwrap();
        assert_eq!(map, sample());
        assert_eq!(got, meta);
    }

    #[test]
    fn truncation_names_the_first_incomplete_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.safetensors");
        let bytes = to_bytes(&sample(), None).unwrap();
        // a.weight occupies the first 24 data bytes, b.bias the next 16.
        std::fs::write(&path, &bytes[..bytes.len() - 20]).unwrap();
        match read(&path).unwrap_err() {
            Error::TensorMismatch { name, .. } => assert_eq!(name, "a.weight"),
            e => panic!("unexpected error {e}"),
        }
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        match read(&path).unwrap_err() {
            Error::TensorMismatch { name, .. } => assert_eq!(name, "b.bias"),
            e => panic!("unexpected error {e}"),
        }
        std::fs::write(&path, &bytes[..12]).unwrap();
        assert!(matches!(read(&path).unwrap_err(), Error::WeightFile { .. }));
    }

    #[test]
    fn half_precision_is_widened() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.safetensors");
        let vals = [f16::from_f32(1.5), f16::from_f32(-2.0)];
        let bytes: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        let view = TensorView::new(Dtype::F16, vec![2], &bytes).unwrap();
        safetensors::serialize_to_file([("x", view)], &None, &path).unwrap();
        let (map, _) = read(&path).unwrap();
        assert_eq!(map["x"].data, vec![1.5, -2.0]);
    }
}
