//! `MIVOL001` container: 8-byte magic, little-endian `u32` header length, JSON header,
//! then the raw little-endian payload in z-slowest / x-fastest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LabelVolume, Volume};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MIVOL001";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Image,
    Labels,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: Kind,
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_classes: Option<u8>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    provenance: String,
}

/// Either kind of volume decoded from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum VolumeFile {
    Image(Volume),
    Labels(LabelVolume),
}

/// Borrowed view of either volume kind for writing.
#[derive(Debug, Clone, Copy)]
pub enum VolumeRef<'a> {
    Image(&'a Volume),
    Labels(&'a LabelVolume),
}

impl<'a> From<&'a Volume> for VolumeRef<'a> {
    fn from(v: &'a Volume) -> Self {
        VolumeRef::Image(v)
    }
}

impl<'a> From<&'a LabelVolume> for VolumeRef<'a> {
    fn from(v: &'a LabelVolume) -> Self {
        VolumeRef::Labels(v)
    }
}

pub(crate) fn encode(v: VolumeRef<'_>) -> Result<Vec<u8>> {
    let (header, payload) = match v {
        VolumeRef::Image(v) => {
            v.validate()?;
            let payload: Vec<u8> = v.data.iter().flat_map(|x| x.to_le_bytes()).collect();
            (
                Header {
                    kind: Kind::Image,
                    dims: v.dims,
                    spacing_mm: v.spacing,
                    dtype: "f32".into(),
                    num_classes: None,
                    provenance: v.provenance.clone(),
                },
                payload,
            )
        }
        VolumeRef::Labels(l) => {
            l.validate()?;
            (
                Header {
                    kind: Kind::Labels,
                    dims: l.dims,
                    spacing_mm: l.spacing,
                    dtype: "u8".into(),
                    num_classes: Some(l.num_classes),
                    provenance: String::new(),
                },
                l.labels.clone(),
            )
        }
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn write_volume<'a>(v: impl Into<VolumeRef<'a>>, path: &Path) -> Result<()> {
    let bytes = encode(v.into())?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn decode(bytes: &[u8], path: &Path) -> Result<VolumeFile> {
    let format = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 12 + h {
        return Err(format(format!("header length {h} exceeds file size")));
    }
    let header: Header =
        serde_json::from_slice(&bytes[12..12 + h]).map_err(|e| format(format!("header: {e}")))?;
    let payload = &bytes[12 + h..];
    let n: usize = header.dims.iter().product();
    match (header.kind, header.dtype.as_str()) {
        (Kind::Image, "f32") => {
            if payload.len() != n * 4 {
                return Err(format(format!(
                    "payload {} bytes, expected {}",
                    payload.len(),
                    n * 4
                )));
            }
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let v = Volume::new(header.dims, header.spacing_mm, data)
                .map_err(|e| format(e.to_string()))?
                .with_provenance(header.provenance);
            Ok(VolumeFile::Image(v))
        }
        (Kind::Labels, "u8") => {
            if payload.len() != n {
                return Err(format(format!(
                    "payload {} bytes, expected {n}",
                    payload.len()
                )));
            }
            let classes = header
                .num_classes
                .ok_or_else(|| format("label volume without num_classes".into()))?;
            let l = LabelVolume::new(header.dims, header.spacing_mm, payload.to_vec(), classes)
                .map_err(|e| format(e.to_string()))?;
            Ok(VolumeFile::Labels(l))
        }
        (kind, dtype) => Err(format(format!("dtype {dtype} invalid for kind {kind:?}"))),
    }
}

pub fn read_volume(path: &Path) -> Result<VolumeFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn read_image(path: &Path) -> Result<Volume> {
    match read_volume(path)? {
        VolumeFile::Image(v) => Ok(v),
        VolumeFile::Labels(_) => Err(Error::Format {
            path: path.to_path_buf(),
            reason: "expected an image volume, found labels".into(),
        }),
    }
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    match read_volume(path)? {
        VolumeFile::Labels(l) => Ok(l),
        VolumeFile::Image(_) => Err(Error::Format {
            path: path.to_path_buf(),
            reason: "expected a label volume, found an image".into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_image() -> Volume {
        let data = (0..64).map(|i| (i as f32 * 0.37).sin() * 100.0).collect();
        Volume::new([4, 4, 4], [0.8, 0.8, 2.5], data)
            .unwrap()
            .with_provenance("unit")
    }

    #[test]
    fn image_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.mivol");
        let v = sample_image();
        write_volume(&v, &p).unwrap();
        let back = read_image(&p).unwrap();
        assert_eq!(back, v);
        let bits: Vec<u32> = back.data.iter().map(|f| f.to_bits()).collect();
        assert_eq!(bits, v.data.iter().map(|f| f.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn writes_are_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let (p, q) = (dir.path().join("a"), dir.path().join("b"));
        write_volume(&sample_image(), &p).unwrap();
        write_volume(&sample_image(), &q).unwrap();
        assert_eq!(fs::read(p).unwrap(), fs::read(q).unwrap());
    }

    #[test]
    fn header_layout_is_as_documented() {
        let l = LabelVolume::new([1, 1, 3], [2.0, 2.0, 3.0], vec![0, 1, 2], 3).unwrap();
        let bytes = encode((&l).into()).unwrap();
        assert_eq!(&bytes[..8], b"MIVOL001");
        let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json: serde_json::Value = serde_json::from_slice(&bytes[12..12 + h]).unwrap();
        assert_eq!(json["kind"], "labels");
        assert_eq!(json["dtype"], "u8");
        assert_eq!(json["num_classes"], 3);
        assert_eq!(json["dims"], serde_json::json!([1, 1, 3]));
        assert_eq!(&bytes[12 + h..], &[0, 1, 2]);
    }

    #[test]
    fn decode_errors() {
        let p = Path::new("mem");
        assert!(matches!(
            decode(b"XXXXXXXX\0\0\0\0", p),
            Err(Error::BadMagic(_))
        ));
        let mut bytes = encode((&sample_image()).into()).unwrap();
        bytes.pop();
        assert!(matches!(decode(&bytes, p), Err(Error::Format { .. })));

        let l = LabelVolume::new([1, 1, 2], [1.0; 3], vec![0, 1], 2).unwrap();
        let mut bytes = encode((&l).into()).unwrap();
        *bytes.last_mut().unwrap() = 5;
        assert!(matches!(decode(&bytes, p), Err(Error::Format { .. })));

        let missing = Path::new("/nonexistent/definitely/missing.mivol");
        assert!(matches!(read_volume(missing), Err(Error::Io { .. })));
    }

    #[test]
    fn empty_dims_fail_validation_on_write() {
        let v = Volume {
            dims: [0, 1, 1],
            spacing: [1.0; 3],
            data: vec![],
            provenance: String::new(),
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            write_volume(&v, &dir.path().join("x")),
            Err(Error::Invalid { .. })
        ));
    }

    proptest! {
        #[test]
        fn label_round_trip(dims in prop::array::uniform3(1usize..6), classes in 1u8..6, seed in any::<u64>()) {
            let n = dims.iter().product::<usize>();
            let labels: Vec<u8> = (0..n).map(|i| ((seed >> (i % 61)) as u8) % classes).collect();
            let l = LabelVolume::new(dims, [1.5, 2.0, 3.0], labels, classes).unwrap();
            let back = decode(&encode((&l).into()).unwrap(), Path::new("mem")).unwrap();
            prop_assert_eq!(back, VolumeFile::Labels(l));
        }

        #[test]
        fn image_round_trip(dims in prop::array::uniform3(1usize..6), values in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 125)) {
            let n = dims.iter().product::<usize>();
            let v = Volume::new(dims, [0.5, 1.0, 2.0], values[..n].to_vec()).unwrap();
            let back = decode(&encode((&v).into()).unwrap(), Path::new("mem")).unwrap();
            prop_assert_eq!(back, VolumeFile::Image(v));
        }
    }
}
