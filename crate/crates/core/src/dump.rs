//! ATND tensor dumps.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! header:  b"ATND" | u16 version (=1) | u8 endian (0 = little) | u8 dtype (0 = f32, 1 = f64)
//! record:  u32 name_len | name (UTF-8) | u8 ndim | ndim × u64 dims | prod(dims) × dtype data
//! ```
//!
//! Records repeat until end of file. Names are unique within a file. Per-head
//! tensors are named `L{layer}.H{head}.{kind}` with kind one of
//! `A` ([n_seq,] T, T), `Z` ([n_seq,] T, d, token-major), `Wq`/`Wk`/`Wv`
//! (d_head, d) and `Wo` (d, d_head).

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::block::{AttentionMap, BlockWeights, TokenMatrix};
use crate::Matrix;

pub const MAGIC: &[u8; 4] = b"ATND";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("bad magic {0:?}, expected \"ATND\"")]
    BadMagic([u8; 4]),
    #[error("unsupported dump version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported endianness flag {0}")]
    UnsupportedEndianness(u8),
    #[error("unknown dtype tag {0}")]
    BadDtype(u8),
    #[error("dump truncated while reading {0}")]
    Truncated(&'static str),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("tensor {name:?}: {what}")]
    BadTensor { name: String, what: String },
    #[error("missing tensor {0:?}")]
    Missing(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl DumpError {
    /// Stable numeric code per error kind.
    pub fn code(&self) -> u8 {
        match self {
            DumpError::BadMagic(_) => 10,
            DumpError::UnsupportedVersion(_) => 11,
            DumpError::UnsupportedEndianness(_) => 12,
            DumpError::BadDtype(_) => 13,
            DumpError::Truncated(_) => 14,
            DumpError::DuplicateName(_) => 15,
            DumpError::BadName => 16,
            DumpError::BadTensor { .. } => 17,
            DumpError::Missing(_) => 18,
            DumpError::Io(_) => 19,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u64>,
    /// Row-major (C order). f32 data is widened on read.
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<u64>, data: Vec<f64>) -> Result<Self, DumpError> {
        let name = name.into();
        let n: u64 = dims.iter().product();
        if n as usize != data.len() {
            return Err(DumpError::BadTensor {
                name,
                what: format!("dims {dims:?} hold {n} values but data has {}", data.len()),
            });
        }
        Ok(Self { name, dims, data })
    }

    pub fn from_matrix(name: impl Into<String>, m: &Matrix) -> Self {
        let (r, c) = m.shape();
        let data = (0..r)
            .flat_map(|i| (0..c).map(move |j| (i, j)))
            .map(|ij| m[ij])
            .collect();
        Self {
            name: name.into(),
            dims: vec![r as u64, c as u64],
            data,
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix, DumpError> {
        match self.dims[..] {
            [r, c] => Ok(Matrix::from_row_slice(r as usize, c as usize, &self.data)),
            _ => Err(self.bad(format!("expected 2 dims, found {:?}", self.dims))),
        }
    }

    /// Splits a ([n,] r, c) tensor into n row-major r × c matrices.
    pub fn slices(&self) -> Result<Vec<Matrix>, DumpError> {
        let (n, r, c) = match self.dims[..] {
            [r, c] => (1, r as usize, c as usize),
            [n, r, c] => (n as usize, r as usize, c as usize),
            _ => return Err(self.bad(format!("expected 2 or 3 dims, found {:?}", self.dims))),
        };
        Ok((0..n)
            .map(|k| Matrix::from_row_slice(r, c, &self.data[k * r * c..(k + 1) * r * c]))
            .collect())
    }

    fn bad(&self, what: String) -> DumpError {
        DumpError::BadTensor {
            name: self.name.clone(),
            what,
        }
    }
}

pub struct DumpWriter<W: Write> {
    out: W,
    dtype: Dtype,
    names: HashSet<String>,
}

impl DumpWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>, dtype: Dtype) -> Result<Self, DumpError> {
        Self::new(BufWriter::new(File::create(path)?), dtype)
    }
}

impl<W: Write> DumpWriter<W> {
    pub fn new(mut out: W, dtype: Dtype) -> Result<Self, DumpError> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&[0, dtype.tag()])?;
        Ok(Self {
            out,
            dtype,
            names: HashSet::new(),
        })
    }

    pub fn write(&mut self, t: &Tensor) -> Result<(), DumpError> {
        if !self.names.insert(t.name.clone()) {
            return Err(DumpError::DuplicateName(t.name.clone()));
        }
        let n: u64 = t.dims.iter().product();
        if n as usize != t.data.len() || t.dims.len() > u8::MAX as usize {
            return Err(t.bad("dims and data length disagree".into()));
        }
        self.out.write_all(&(t.name.len() as u32).to_le_bytes())?;
        self.out.write_all(t.name.as_bytes())?;
        self.out.write_all(&[t.dims.len() as u8])?;
        for d in &t.dims {
            self.out.write_all(&d.to_le_bytes())?;
        }
        match self.dtype {
            Dtype::F64 => {
                for x in &t.data {
                    self.out.write_all(&x.to_le_bytes())?;
                }
            }
            Dtype::F32 => {
                for x in &t.data {
                    self.out.write_all(&(*x as f32).to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, DumpError> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Streaming reader: yields one tensor at a time.
pub struct DumpReader<R: Read> {
    input: R,
    pub dtype: Dtype,
    pub version: u16,
    names: HashSet<String>,
    done: bool,
}

impl DumpReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, DumpError> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<(), DumpError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => DumpError::Truncated(what),
        _ => DumpError::Io(e),
    })
}

impl<R: Read> DumpReader<R> {
    pub fn new(mut input: R) -> Result<Self, DumpError> {
        let mut magic = [0u8; 4];
        read_exact_or(&mut input, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(DumpError::BadMagic(magic));
        }
        let mut rest = [0u8; 4];
        read_exact_or(&mut input, &mut rest, "header")?;
        let version = u16::from_le_bytes([rest[0], rest[1]]);
        if version != VERSION {
            return Err(DumpError::UnsupportedVersion(version));
        }
        if rest[2] != 0 {
            return Err(DumpError::UnsupportedEndianness(rest[2]));
        }
        let dtype = match rest[3] {
            0 => Dtype::F32,
            1 => Dtype::F64,
            t => return Err(DumpError::BadDtype(t)),
        };
        Ok(Self {
            input,
            dtype,
            version,
            names: HashSet::new(),
            done: false,
        })
    }

    fn next_tensor(&mut self) -> Result<Option<Tensor>, DumpError> {
        let mut len = [0u8; 4];
        // Clean EOF is only allowed on a record boundary.
        let mut got = 0;
        while got < 4 {
            match self.input.read(&mut len[got..]) {
                Ok(0) if got == 0 => return Ok(None),
                Ok(0) => return Err(DumpError::Truncated("name length")),
                Ok(k) => got += k,
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
        read_exact_or(&mut self.input, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| DumpError::BadName)?;
        if !self.names.insert(name.clone()) {
            return Err(DumpError::DuplicateName(name));
        }
        let mut nd = [0u8; 1];
        read_exact_or(&mut self.input, &mut nd, "ndim")?;
        let mut dims = Vec::with_capacity(nd[0] as usize);
        for _ in 0..nd[0] {
            let mut b = [0u8; 8];
            read_exact_or(&mut self.input, &mut b, "dims")?;
            dims.push(u64::from_le_bytes(b));
        }
        let n = dims
            .iter()
            .try_fold(1u64, |a, &b| a.checked_mul(b))
            .ok_or_else(|| DumpError::BadTensor {
                name: name.clone(),
                what: "element count overflows".into(),
            })? as usize;
        let w = self.dtype.width();
        let mut raw = vec![0u8; n * w];
        read_exact_or(&mut self.input, &mut raw, "data")?;
        let data = match self.dtype {
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        Ok(Some(Tensor { name, dims, data }))
    }
}

impl<R: Read> Iterator for DumpReader<R> {
    type Item = Result<Tensor, DumpError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let r = self.next_tensor().transpose();
        if !matches!(r, Some(Ok(_))) {
            self.done = true;
        }
        r
    }
}

pub fn write_dump(
    path: impl AsRef<Path>,
    dtype: Dtype,
    tensors: &[Tensor],
) -> Result<(), DumpError> {
    let mut w = DumpWriter::create(path, dtype)?;
    for t in tensors {
        w.write(t)?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<Vec<Tensor>, DumpError> {
    DumpReader::open(path)?.collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl std::fmt::Display for HeadId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{}.H{}", self.layer, self.head)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    A,
    Z,
    Wq,
    Wk,
    Wv,
    Wo,
}

impl TensorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TensorKind::A => "A",
            TensorKind::Z => "Z",
            TensorKind::Wq => "Wq",
            TensorKind::Wk => "Wk",
            TensorKind::Wv => "Wv",
            TensorKind::Wo => "Wo",
        }
    }
}

pub fn head_tensor_name(id: HeadId, kind: TensorKind) -> String {
    format!("{id}.{}", kind.as_str())
}

/// Parses `L{l}.H{h}.{kind}`; other names return None.
pub fn parse_head_name(name: &str) -> Option<(HeadId, TensorKind)> {
    let mut parts = name.split('.');
    let l = parts.next()?.strip_prefix('L')?.parse().ok()?;
    let h = parts.next()?.strip_prefix('H')?.parse().ok()?;
    let kind = match parts.next()? {
        "A" => TensorKind::A,
        "Z" => TensorKind::Z,
        "Wq" => TensorKind::Wq,
        "Wk" => TensorKind::Wk,
        "Wv" => TensorKind::Wv,
        "Wo" => TensorKind::Wo,
        _ => return None,
    };
    if parts.next().is_some() {
        return None;
    }
    Some((HeadId { layer: l, head: h }, kind))
}

/// Tensors of one head, converted to the crate's conventions: attention maps
/// per sequence and token matrices with tokens as columns.
#[derive(Clone, Debug, Default)]
pub struct HeadData {
    pub attention: Vec<AttentionMap>,
    pub tokens: Vec<TokenMatrix>,
    pub w_q: Option<Matrix>,
    pub w_k: Option<Matrix>,
    pub w_v: Option<Matrix>,
    pub w_o: Option<Matrix>,
}

pub fn group_heads(tensors: Vec<Tensor>) -> Result<BTreeMap<HeadId, HeadData>, DumpError> {
    let mut heads: BTreeMap<HeadId, HeadData> = BTreeMap::new();
    for t in tensors {
        let Some((id, kind)) = parse_head_name(&t.name) else {
            continue;
        };
        let entry = heads.entry(id).or_default();
        match kind {
            TensorKind::A => {
                for a in t.slices()? {
                    entry
                        .attention
                        .push(AttentionMap::new(a).map_err(|e| t.bad(e.to_string()))?);
                }
            }
            TensorKind::Z => {
                for z in t.slices()? {
                    entry.tokens.push(TokenMatrix(z.transpose()));
                }
            }
            TensorKind::Wq => entry.w_q = Some(t.to_matrix()?),
            TensorKind::Wk => entry.w_k = Some(t.to_matrix()?),
            TensorKind::Wv => entry.w_v = Some(t.to_matrix()?),
            TensorKind::Wo => entry.w_o = Some(t.to_matrix()?),
        }
    }
    Ok(heads)
}

const BLOCK_PARTS: [&str; 8] = ["Wq", "Wk", "Wv", "Wo", "W1", "b1", "W2", "b2"];

/// Block weights as `{prefix}.Wq`, …, `{prefix}.b2` tensors; biases are 1-D.
pub fn block_tensors(prefix: &str, w: &BlockWeights) -> Vec<Tensor> {
    let mats = [&w.w_q, &w.w_k, &w.w_v, &w.w_o, &w.w_1];
    let mut out: Vec<Tensor> = BLOCK_PARTS[..5]
        .iter()
        .zip(mats)
        .map(|(n, m)| Tensor::from_matrix(format!("{prefix}.{n}"), m))
        .collect();
    let vec = |n: &str, v: &crate::Vector| Tensor {
        name: format!("{prefix}.{n}"),
        dims: vec![v.len() as u64],
        data: v.as_slice().to_vec(),
    };
    out.push(vec("b1", &w.b_1));
    out.push(Tensor::from_matrix(format!("{prefix}.W2"), &w.w_2));
    out.push(vec("b2", &w.b_2));
    out
}

pub fn block_from_tensors(prefix: &str, tensors: &[Tensor]) -> Result<BlockWeights, DumpError> {
    let find = |part: &str| {
        let name = format!("{prefix}.{part}");
        tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or(DumpError::Missing(name))
    };
    let vec = |part: &str| -> Result<crate::Vector, DumpError> {
        let t = find(part)?;
        if t.dims.len() != 1 {
            return Err(t.bad("bias must be one-dimensional".into()));
        }
        Ok(crate::Vector::from_vec(t.data.clone()))
    };
    let w = BlockWeights {
        w_q: find("Wq")?.to_matrix()?,
        w_k: find("Wk")?.to_matrix()?,
        w_v: find("Wv")?.to_matrix()?,
        w_o: find("Wo")?.to_matrix()?,
        w_1: find("W1")?.to_matrix()?,
        b_1: vec("b1")?,
        w_2: find("W2")?.to_matrix()?,
        b_2: vec("b2")?,
    };
    w.validate().map_err(|e| DumpError::BadTensor {
        name: format!("{prefix}.*"),
        what: e.to_string(),
    })?;
    Ok(w)
}
