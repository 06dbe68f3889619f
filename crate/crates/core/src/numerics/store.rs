use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::io;
use super::tape::{Gradients, Graph, Var};
use super::Tensor;
use crate::error::{FgstError, Result};

const MANIFEST: &str = "manifest.txt";

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(FgstError::InvalidArgument(format!("bad parameter name {name:?}")));
        }
        if self.tensors.contains_key(&name) {
            return Err(FgstError::InvalidArgument(format!("duplicate parameter {name}")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| FgstError::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| FgstError::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Sets every value to zero.
    pub fn zero_all(&mut self) {
        for t in self.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Registers every tensor as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|(k, v)| (k.clone(), g.param(v.clone()))).collect(),
        }
    }

    /// Registers every tensor as a constant of `g`.
    pub fn bind_constant(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|(k, v)| (k.clone(), g.constant(v.clone()))).collect(),
        }
    }

    /// Writes `manifest.txt` (`name dims file` per line) and one raw tensor
    /// file per parameter into `dir`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for (i, (name, t)) in self.tensors.iter().enumerate() {
            let file = format!("p{i:04}.fgt");
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let dims = if dims.is_empty() { "scalar".to_string() } else { dims.join("x") };
            manifest.push_str(&format!("{name} {dims} {file}\n"));
            io::save(dir.join(&file), t)?;
        }
        fs::write(dir.join(MANIFEST), manifest)?;
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = fs::read_to_string(dir.join(MANIFEST))?;
        let mut store = Self::new();
        for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [name, dims, file] = parts.as_slice() else {
                return Err(FgstError::Format(format!("bad manifest line {line:?}")));
            };
            let shape: Vec<usize> = dims
                .split('x')
                .filter(|_| *dims != "scalar")
                .map(|d| d.parse().map_err(|_| FgstError::Format(format!("bad dims in {line:?}"))))
                .collect::<Result<_>>()?;
            let t = io::load(dir.join(file))?;
            if t.shape() != shape {
                return Err(FgstError::Format(format!(
                    "{name}: manifest says {shape:?}, file holds {:?}",
                    t.shape()
                )));
            }
            store.insert(*name, t)?;
        }
        Ok(store)
    }
}

/// Parameter handles on one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| FgstError::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients keyed by parameter name; unused parameters get zeros.
    pub fn collect_grads(&self, g: &Graph, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let grad = grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).len()]);
                (k.clone(), grad)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip() {
        let mut s = ParamStore::new();
        s.insert("b.w", Tensor::new(vec![2, 1, 3], vec![1.0, -2.0, 3.5, 0.25, 1e-300, -0.0]).unwrap())
            .unwrap();
        s.insert("a", Tensor::scalar(7.0)).unwrap();
        assert!(s.insert("a", Tensor::scalar(1.0)).is_err());
        assert!(s.insert("with space", Tensor::scalar(1.0)).is_err());
        let dir = tempfile::tempdir().unwrap();
        s.save_dir(dir.path()).unwrap();
        let back = ParamStore::load_dir(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for ((na, ta), (nb, tb)) in s.iter().zip(back.iter()) {
            assert_eq!(na, nb);
            assert!(ta.bit_eq(tb));
        }
        assert_eq!(s.scalar_count(), 7);
    }

    #[test]
    fn bound_grads_cover_unused() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::filled(&[2], 1.0)).unwrap();
        s.insert("unused", Tensor::filled(&[3], 1.0)).unwrap();
        let mut g = Graph::new();
        let b = s.bind(&mut g);
        let l = g.sum(b.var("x").unwrap()).unwrap();
        let grads = g.backward(l).unwrap();
        let named = b.collect_grads(&g, &grads);
        assert_eq!(named["x"], vec![1.0, 1.0]);
        assert_eq!(named["unused"], vec![0.0; 3]);
        assert!(b.var("nope").is_err());
    }
}
