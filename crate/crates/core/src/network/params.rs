use std::collections::BTreeSet;
use std::io::Read;
use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::network::{Graph, Mode, NetworkSpec};
use crate::tensor::{Scalar, Shape, Tensor};

pub const WEIGHT_MAGIC: &[u8; 8] = b"FINEDWT1";

/// Ordered `name -> tensor` map of network parameters.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T = f32> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    /// Inserts or replaces a tensor, keeping the original position.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Parameter counts grouped by module (`conv2_1`, `drr3_1`, `respool2`, ...).
    pub fn breakdown(&self) -> Vec<(String, usize)> {
        let mut groups: IndexMap<String, usize> = IndexMap::new();
        for (name, t) in &self.entries {
            let module = name.split('.').next().unwrap_or(name).to_string();
            *groups.entry(module).or_default() += t.numel();
        }
        groups.into_iter().collect()
    }

    /// Restricts the store to the parameters of `graph`, checking shapes.
    /// In strict mode, names the graph does not use are an error; in
    /// lenient mode they are dropped.
    pub fn bind(&self, graph: &Graph, mode: LoadMode) -> Result<ParamStore<T>> {
        let wanted = graph.param_shapes();
        if mode == LoadMode::Strict {
            let known: BTreeSet<&str> = wanted.iter().map(|(n, _)| n.as_str()).collect();
            if let Some(extra) = self.names().find(|n| !known.contains(n)) {
                return Err(Error::UnknownParam(extra.to_string()));
            }
        }
        let mut out = ParamStore::new();
        for (name, shape) in wanted {
            let t = self
                .get(&name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            if t.shape() != shape {
                return Err(Error::Shape(format!(
                    "parameter `{name}` has shape {}, graph expects {shape}",
                    t.shape()
                )));
            }
            out.insert(name, t.clone());
        }
        Ok(out)
    }
}

/// Weight initialisation rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Weights `N(0, std²)`.
    Gaussian { std: f64 },
    /// Weights `N(0, 2 / fan_in)`.
    He,
    /// Fan-in scaling by role: `2 / fan_in` variance for convolutions
    /// followed by relu, `1 / fan_in` for linear projections, the last
    /// convolution of each residual branch further divided by the number
    /// of branches in its chain, and zero output heads.
    Fan,
}

impl Default for Init {
    fn default() -> Self {
        Init::Gaussian { std: 0.01 }
    }
}

/// Zero-mean Gaussian weights with standard deviation 0.01, zero biases.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<ParamStore<f32>> {
    init_params_with(spec, seed, Init::default())
}

pub fn init_params_with(spec: &NetworkSpec, seed: u64, init: Init) -> Result<ParamStore<f32>> {
    let graph = Graph::build(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in graph.param_shapes() {
        let t = if name.ends_with(".bias") {
            Tensor::zeros(shape)
        } else {
            let fan_in = (shape.c * shape.h * shape.w) as f64;
            let std = match init {
                Init::Gaussian { std } => std,
                Init::He => (2.0 / fan_in).sqrt(),
                Init::Fan => fan_std(&name, fan_in, spec),
            };
            Tensor::randn(shape, std, &mut rng)
        };
        store.insert(name, t);
    }
    Ok(store)
}

fn fan_std(name: &str, fan_in: f64, spec: &NetworkSpec) -> f64 {
    if name.contains(".conv_b.") {
        (2.0 / fan_in).sqrt() / spec.dilations.len() as f64
    } else if name.contains(".block") {
        (1.0 / fan_in).sqrt() / spec.respool_blocks as f64
    } else if name.starts_with("side") || name.starts_with("fuse") {
        0.0
    } else if name.contains(".tail.") {
        (1.0 / fan_in).sqrt()
    } else {
        (2.0 / fan_in).sqrt()
    }
}

pub fn count_params<T: Scalar>(store: &ParamStore<T>) -> usize {
    store.iter().map(|(_, t)| t.numel()).sum()
}

/// Drops the training helpers: lower-stage refinement blocks, their side
/// heads and the fused head. The retained set is exactly the parameter set
/// of the inference graph; retained tensors are copied unchanged.
pub fn prune_helpers<T: Scalar>(
    store: &ParamStore<T>,
    spec: &NetworkSpec,
) -> Result<ParamStore<T>> {
    let train_names: BTreeSet<String> = Graph::build(&spec.with_mode(Mode::Train))?
        .param_names()
        .into_iter()
        .collect();
    if let Some(extra) = store.names().find(|n| !train_names.contains(*n)) {
        return Err(Error::UnknownParam(extra.to_string()));
    }
    let inference = Graph::build(&spec.with_mode(Mode::Inference))?;
    store.bind(&inference, LoadMode::Lenient)
}

/// How to treat stored tensors a graph does not use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadMode {
    Strict,
    Lenient,
}

fn encode(store: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(16 + count_params(store) * 4);
    buf.extend_from_slice(WEIGHT_MAGIC);
    let count = u32::try_from(store.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, t) in store.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let dims = t.shape().dims();
        // trailing unit axes are implied
        let rank = dims.iter().rposition(|&d| d != 1).map_or(1, |i| i + 1);
        buf.push(rank as u8);
        for &d in &dims[..rank] {
            let d =
                u32::try_from(d).map_err(|_| Error::Format("dimension overflows u32".into()))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated file: needed {n} bytes for {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn decode(buf: &[u8]) -> Result<ParamStore<f32>> {
    let mut cur = Cursor { buf, pos: 0 };
    let magic = cur.take(8, "magic")?;
    if magic != WEIGHT_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(magic),
            std::str::from_utf8(WEIGHT_MAGIC).unwrap()
        )));
    }
    let count = cur.u32("tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u8("rank")? as usize;
        if rank > 4 {
            return Err(Error::Format(format!(
                "tensor `{name}` has rank {rank} > 4"
            )));
        }
        let mut dims = [1usize; 4];
        for d in dims.iter_mut().take(rank) {
            *d = cur.u32("dims")? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let bytes = cur.take(shape.numel() * 4, "tensor data")?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if store.contains(&name) {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
        store.insert(name, Tensor::from_vec(shape, data)?);
    }
    if cur.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last tensor",
            buf.len() - cur.pos
        )));
    }
    Ok(store)
}

/// Writes a weight file atomically.
pub fn save_params(store: &ParamStore<f32>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode(store)?)
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParamStore<f32>> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode(&buf)
}

/// Loads a weight file and binds it to `graph`.
pub fn load_params_for(
    path: impl AsRef<Path>,
    graph: &Graph,
    mode: LoadMode,
) -> Result<ParamStore<f32>> {
    load_params(path)?.bind(graph, mode)
}
