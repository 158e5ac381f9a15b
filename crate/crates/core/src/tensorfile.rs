//! Named `f64` arrays plus string metadata in a safetensors container.
//!
//! All metadata is packed into one header entry (`vocspoof`) as sorted `key=value` lines so
//! that identical content always serializes to identical bytes.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};

const META_KEY: &str = "vocspoof";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorFile {
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    pub meta: BTreeMap<String, String>,
}

impl TensorFile {
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.insert(name.into(), (shape, data));
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.meta.insert(key.into(), value.to_string());
    }

    pub fn meta_str(&self, key: &str, path: &Path) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format(path, format!("missing metadata `{key}`")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str, path: &Path) -> Result<T> {
        let s = self.meta_str(key, path)?;
        s.parse()
            .map_err(|_| Error::format(path, format!("bad metadata `{key}` = `{s}`")))
    }

    pub fn take(&mut self, name: &str, path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::format(path, format!("missing tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let raw: Vec<(&String, &Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(n, (shape, data))| {
                (n, shape, data.iter().flat_map(|x| x.to_le_bytes()).collect())
            })
            .collect();
        let views = raw
            .iter()
            .map(|(n, shape, bytes)| {
                TensorView::new(Dtype::F64, shape.to_vec(), bytes)
                    .map(|v| (n.to_string(), v))
                    .map_err(|e| Error::input(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut packed = String::new();
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::input(format!("unencodable metadata `{k}`")));
            }
            packed.push_str(k);
            packed.push('=');
            packed.push_str(v);
            packed.push('\n');
        }
        let meta = HashMap::from([(META_KEY.to_string(), packed)]);
        safetensors::serialize(views, &Some(meta)).map_err(|e| Error::input(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self
            .to_bytes()
            .map_err(|e| Error::format(path, e.to_string()))?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: String| Error::format(path, m);
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let mut meta = BTreeMap::new();
        if let Some(packed) = header.metadata().as_ref().and_then(|m| m.get(META_KEY)) {
            for line in packed.lines() {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| bad(format!("bad metadata line `{line}`")))?;
                meta.insert(k.to_string(), v.to_string());
            }
        }
        let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F64 {
                return Err(bad(format!("tensor `{name}` is not f64")));
            }
            let data = view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.insert(name, (view.shape().to_vec(), data));
        }
        Ok(Self { tensors, meta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_are_canonical_and_round_trip() {
        let mut a = TensorFile::default();
        a.set_meta("z", 1);
        a.set_meta("a", "x y");
        a.set_meta("m", 2.5);
        a.insert("w", vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.0e300]);
        a.insert("b", vec![1], vec![0.1]);
        let b1 = a.to_bytes().unwrap();
        for _ in 0..5 {
            assert_eq!(a.clone().to_bytes().unwrap(), b1);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.safetensors");
        a.write(&p).unwrap();
        let back = TensorFile::read(&p).unwrap();
        assert_eq!(back.meta, a.meta);
        for (k, (s, d)) in &a.tensors {
            let (s2, d2) = &back.tensors[k];
            assert_eq!(s, s2);
            assert_eq!(
                d.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                d2.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
