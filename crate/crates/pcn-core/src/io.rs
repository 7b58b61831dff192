//! Everything that crosses the process boundary: the binary tensor file
//! format, the checkpoint format, run-spec text parsing, and dataset
//! manifests.
//!
//! Both binary formats are fixed-width little-endian with canonical writers,
//! so identical inputs always produce byte-identical files.

use crate::net::{CloneNetConfig, ModuleTopology, ParameterSet};
use crate::tensor::{Dtype, Grid4, Scalar};
use crate::train::{AdamState, TrainConfig, TrainState};
use crate::{Error, Result};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const TENSOR_MAGIC: &[u8; 4] = b"PCNT";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PCNC";
pub const FORMAT_VERSION: u8 = 1;

fn file_err(path: &Path, source: std::io::Error) -> Error {
    Error::File {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

// ============================================================================
// Tensor files
// ============================================================================

/// In-memory form of one tensor file: dimensions plus a payload in one of the
/// two supported precisions.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Single(Vec<f32>),
    Double(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::Single(_) => Dtype::Single,
            TensorData::Double(_) => Dtype::Double,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::Single(v) => v.len(),
            TensorData::Double(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One tensor as stored on disk: `PCNT`, version, dtype, two reserved zero
/// bytes, dimension count (32-bit), dimensions (64-bit each), then the
/// row-major little-endian payload with nothing after it.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl TensorFile {
    pub fn from_grid<E: Scalar>(grid: &Grid4<E>) -> TensorFile {
        let dims = grid.dims().to_vec();
        let data = match E::DTYPE {
            Dtype::Single => {
                TensorData::Single(grid.data().iter().map(|v| v.as_f64() as f32).collect())
            }
            Dtype::Double => TensorData::Double(grid.data().iter().map(|v| v.as_f64()).collect()),
        };
        TensorFile { dims, data }
    }

    /// View the payload as a 4-D grid in the requested element type (values
    /// are converted if the stored precision differs).
    pub fn to_grid<E: Scalar>(&self) -> Result<Grid4<E>> {
        let dims: [usize; 4] = match self.dims.as_slice() {
            &[n, c, h, w] => [n, c, h, w],
            other => {
                return Err(Error::Value(format!(
                    "expected a 4-dimensional tensor (n, c, h, w), file has {} dims {:?}",
                    other.len(),
                    other
                )));
            }
        };
        let data: Vec<E> = match &self.data {
            TensorData::Single(v) => v.iter().map(|&x| E::from_f64(x as f64)).collect(),
            TensorData::Double(v) => v.iter().map(|&x| E::from_f64(x)).collect(),
        };
        Grid4::from_vec(dims, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dtype = self.data.dtype();
        let mut out = Vec::with_capacity(16 + self.dims.len() * 8 + self.data.len() * dtype.size());
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(FORMAT_VERSION);
        out.push(dtype.code());
        out.extend_from_slice(&[0u8, 0u8]);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::Single(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorData::Double(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let expected: usize = self.dims.iter().product();
        if expected != self.data.len() {
            return Err(Error::Value(format!(
                "tensor payload has {} elements but dims {:?} imply {expected}",
                self.data.len(),
                self.dims
            )));
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| file_err(path, e))
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<TensorFile> {
        let mut r = Reader::new(bytes, path);
        let magic = r.take(4)?;
        if magic != TENSOR_MAGIC {
            return Err(format_err(path, format!("bad magic {magic:?}, want PCNT")));
        }
        let version = r.byte()?;
        if version != FORMAT_VERSION {
            return Err(format_err(path, format!("unsupported version {version}")));
        }
        let code = r.byte()?;
        let dtype = Dtype::from_code(code)
            .ok_or_else(|| format_err(path, format!("unknown dtype code {code}")))?;
        let reserved = r.take(2)?;
        if reserved != [0, 0] {
            return Err(format_err(path, "reserved bytes must be zero"));
        }
        let ndim = r.u32()? as usize;
        if ndim == 0 || ndim > 8 {
            return Err(format_err(path, format!("implausible ndim {ndim}")));
        }
        let mut dims = Vec::with_capacity(ndim);
        let mut count: usize = 1;
        for _ in 0..ndim {
            let d = r.u64()? as usize;
            count = count
                .checked_mul(d)
                .ok_or_else(|| format_err(path, "dimension product overflows"))?;
            dims.push(d);
        }
        let payload = r.take(count * dtype.size())?;
        r.finish()?;
        let data = match dtype {
            Dtype::Single => TensorData::Single(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::Double => TensorData::Double(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(TensorFile { dims, data })
    }

    pub fn read(path: &Path) -> Result<TensorFile> {
        let bytes = std::fs::read(path).map_err(|e| file_err(path, e))?;
        TensorFile::from_bytes(&bytes, path)
    }
}

/// Convenience: write one grid as a tensor file.
pub fn write_grid<E: Scalar>(path: &Path, grid: &Grid4<E>) -> Result<()> {
    TensorFile::from_grid(grid).write(path)
}

/// Convenience: read a tensor file as a 4-D grid in the requested precision.
pub fn read_grid<E: Scalar>(path: &Path) -> Result<Grid4<E>> {
    TensorFile::read(path)?
        .to_grid()
        .map_err(|e| format_err(path, e.to_string()))
}

/// Bounds-checked little-endian slice reader used by both binary parsers.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Reader<'a> {
        Reader {
            bytes,
            pos: 0,
            path,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(format_err(
                self.path,
                format!(
                    "truncated: wanted {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn byte(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(format_err(
                self.path,
                format!(
                    "{} trailing bytes after the payload",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        Ok(())
    }
}

// ============================================================================
// Run specification text
// ============================================================================

/// Complete description of a training run as carried by config files and
/// checkpoints: the network configuration, the optimisation schedule, and the
/// patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub config: CloneNetConfig,
    pub train: TrainConfig,
    pub patch: usize,
    pub stride: usize,
}

/// The recognised keys, in canonical render order.
const SPEC_KEYS: [&str; 14] = [
    "n_clones",
    "transfer_mode",
    "input_mode",
    "residual_mode",
    "loss_mode",
    "n_layers",
    "n_kernels",
    "batch_size",
    "epochs",
    "lr_initial",
    "lr_final",
    "seed",
    "patch",
    "stride",
];

/// Split `key=value` lines, rejecting unknown and duplicate keys by name.
/// `extra` lists additional keys callers accept beyond [`SPEC_KEYS`].
fn parse_kv(text: &str, extra: &[&str]) -> Result<Vec<(String, String)>> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {} is not a key=value pair: '{line}'",
                lineno + 1
            )));
        };
        let key = key.trim();
        let value = value.trim();
        if !SPEC_KEYS.contains(&key) && !extra.contains(&key) {
            return Err(Error::Config(format!("unknown key '{key}'")));
        }
        if pairs.iter().any(|(k, _)| k == key) {
            return Err(Error::Config(format!("duplicate key '{key}'")));
        }
        pairs.push((key.to_string(), value.to_string()));
    }
    Ok(pairs)
}

struct KvLookup {
    pairs: Vec<(String, String)>,
}

impl KvLookup {
    fn get(&self, key: &str) -> Result<&str> {
        self.pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Config(format!("missing key '{key}'")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|e| Error::Config(format!("key '{key}': invalid value '{raw}': {e}")))
    }
}

impl TrainSpec {
    /// Parse the run spec from `key=value` lines (every key required; `#`
    /// comments and blank lines ignored; unknown or repeated keys rejected).
    pub fn parse(text: &str) -> Result<TrainSpec> {
        let kv = KvLookup {
            pairs: parse_kv(text, &[])?,
        };
        TrainSpec::from_lookup(&kv)
    }

    fn from_lookup(kv: &KvLookup) -> Result<TrainSpec> {
        let spec = TrainSpec {
            config: CloneNetConfig {
                n_clones: kv.parse("n_clones")?,
                transfer_mode: kv.parse("transfer_mode")?,
                input_mode: kv.parse("input_mode")?,
                residual_mode: kv.parse("residual_mode")?,
                loss_mode: kv.parse("loss_mode")?,
                topology: ModuleTopology::standard(kv.parse("n_layers")?, kv.parse("n_kernels")?),
            },
            train: TrainConfig {
                batch_size: kv.parse("batch_size")?,
                n_epochs: kv.parse("epochs")?,
                lr_initial: kv.parse("lr_initial")?,
                lr_final: kv.parse("lr_final")?,
                seed: kv.parse("seed")?,
            },
            patch: kv.parse("patch")?,
            stride: kv.parse("stride")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.train.validate()?;
        if self.patch == 0 || self.stride == 0 {
            return Err(Error::Config(
                "patch and stride must both be at least 1".into(),
            ));
        }
        if self.patch < self.config.min_image_side() {
            return Err(Error::Config(format!(
                "patch {} is below the network's minimum admissible side {}",
                self.patch,
                self.config.min_image_side()
            )));
        }
        Ok(())
    }

    /// Canonical `key=value` rendering; parses back to an equal spec.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n_clones={}", self.config.n_clones);
        let _ = writeln!(s, "transfer_mode={}", self.config.transfer_mode);
        let _ = writeln!(s, "input_mode={}", self.config.input_mode);
        let _ = writeln!(s, "residual_mode={}", self.config.residual_mode);
        let _ = writeln!(s, "loss_mode={}", self.config.loss_mode);
        let _ = writeln!(s, "n_layers={}", self.config.topology.n_layers);
        let _ = writeln!(s, "n_kernels={}", self.config.topology.n_kernels);
        let _ = writeln!(s, "batch_size={}", self.train.batch_size);
        let _ = writeln!(s, "epochs={}", self.train.n_epochs);
        let _ = writeln!(s, "lr_initial={}", self.train.lr_initial);
        let _ = writeln!(s, "lr_final={}", self.train.lr_final);
        let _ = writeln!(s, "seed={}", self.train.seed);
        let _ = writeln!(s, "patch={}", self.patch);
        let _ = writeln!(s, "stride={}", self.stride);
        s
    }
}

// ============================================================================
// Checkpoints
// ============================================================================

/// A trained (or in-progress) model on disk: the full run spec, progress
/// metadata, the shared parameters, and — once any step has been taken — the
/// Adam moments, so training resumes exactly where it stopped.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub spec: TrainSpec,
    pub state: TrainState<f64>,
}

impl Checkpoint {
    /// A fresh checkpoint with seeded initial parameters and no progress.
    pub fn fresh(spec: TrainSpec) -> Result<Checkpoint> {
        spec.validate()?;
        let params = ParameterSet::init(&spec.config, spec.train.seed);
        let adam = AdamState::new(&params);
        Ok(Checkpoint {
            spec,
            state: TrainState {
                params,
                adam,
                epochs_done: 0,
            },
        })
    }

    fn config_text(&self) -> String {
        let mut s = self.spec.render();
        let _ = writeln!(s, "epoch={}", self.state.epochs_done);
        let _ = writeln!(s, "adam_t={}", self.state.adam.t);
        s
    }

    /// Serialize canonically: equal checkpoints produce byte-identical files.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.spec.validate()?;
        self.state.params.validate_against(&self.spec.config)?;
        if self.spec.config.topology.shortcut_pairs
            != ModuleTopology::default_shortcuts(self.spec.config.topology.n_layers)
        {
            return Err(Error::Config(
                "the checkpoint format only represents the standard shortcut layout \
                 for a given n_layers"
                    .into(),
            ));
        }
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(FORMAT_VERSION);
        out.push(Dtype::Double.code());
        out.extend_from_slice(&[0u8, 0u8]);
        let text = self.config_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());

        let with_adam = self.state.adam.t > 0;
        let names = self.state.params.slice_names();
        let mut records: Vec<(String, &[f64])> = Vec::new();
        for (name, slice) in names.iter().zip(self.state.params.slices()) {
            records.push((name.clone(), slice));
        }
        if with_adam {
            for (name, slice) in names.iter().zip(self.state.adam.m.slices()) {
                records.push((format!("adam.m.{name}"), slice));
            }
            for (name, slice) in names.iter().zip(self.state.adam.v.slices()) {
                records.push((format!("adam.v.{name}"), slice));
            }
        }
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, slice) in records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(slice.len() as u64).to_le_bytes());
            for v in slice {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| file_err(path, e))
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
        let mut r = Reader::new(bytes, path);
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(format_err(path, format!("bad magic {magic:?}, want PCNC")));
        }
        let version = r.byte()?;
        if version != FORMAT_VERSION {
            return Err(format_err(path, format!("unsupported version {version}")));
        }
        let code = r.byte()?;
        if Dtype::from_code(code) != Some(Dtype::Double) {
            return Err(format_err(
                path,
                format!("unsupported checkpoint dtype code {code}"),
            ));
        }
        let reserved = r.take(2)?;
        if reserved != [0, 0] {
            return Err(format_err(path, "reserved bytes must be zero"));
        }
        let text_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(text_len)?)
            .map_err(|_| format_err(path, "config text is not valid UTF-8"))?;
        let kv = KvLookup {
            pairs: parse_kv(text, &["epoch", "adam_t"])
                .map_err(|e| format_err(path, e.to_string()))?,
        };
        let spec = TrainSpec::from_lookup(&kv).map_err(|e| format_err(path, e.to_string()))?;
        let epochs_done: usize = kv.parse("epoch").map_err(|e| format_err(path, e.to_string()))?;
        let adam_t: u64 = kv
            .parse("adam_t")
            .map_err(|e| format_err(path, e.to_string()))?;

        let n_records = r.u32()? as usize;
        let mut params = ParameterSet::<f64>::zeros(&spec.config);
        let mut adam = AdamState::new(&params);
        adam.t = adam_t;
        let names = params.slice_names();
        let expected: Vec<String> = if adam_t > 0 {
            let mut v = names.clone();
            v.extend(names.iter().map(|n| format!("adam.m.{n}")));
            v.extend(names.iter().map(|n| format!("adam.v.{n}")));
            v
        } else {
            names.clone()
        };
        if n_records != expected.len() {
            return Err(format_err(
                path,
                format!(
                    "expected {} tensor records for adam_t={adam_t}, found {n_records}",
                    expected.len()
                ),
            ));
        }
        for (rec_idx, want_name) in expected.iter().enumerate() {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| format_err(path, format!("record {rec_idx} name is not UTF-8")))?;
            if name != want_name {
                return Err(format_err(
                    path,
                    format!("record {rec_idx} is named '{name}', expected '{want_name}'"),
                ));
            }
            let len = r.u64()? as usize;
            let payload = r.take(len * 8)?;
            let values: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let target = if let Some(rest) = name.strip_prefix("adam.m.") {
                slice_by_name(&mut adam.m, rest)
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                slice_by_name(&mut adam.v, rest)
            } else {
                slice_by_name(&mut params, name)
            };
            let Some(target) = target else {
                return Err(format_err(path, format!("unroutable record name '{name}'")));
            };
            if target.len() != values.len() {
                return Err(format_err(
                    path,
                    format!(
                        "record '{name}' holds {} values but the configuration requires {}",
                        values.len(),
                        target.len()
                    ),
                ));
            }
            target.copy_from_slice(&values);
        }
        r.finish()?;

        let ckpt = Checkpoint {
            spec,
            state: TrainState {
                params,
                adam,
                epochs_done,
            },
        };
        Ok(ckpt)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| file_err(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

/// Locate one named parameter slice inside a set.
fn slice_by_name<'a>(params: &'a mut ParameterSet<f64>, name: &str) -> Option<&'a mut [f64]> {
    let idx = params.slice_names().iter().position(|n| n == name)?;
    let mut slices = params.slices_mut();
    // Drop the borrow of the others by re-borrowing just the wanted index.
    Some(std::mem::take(&mut slices[idx]))
}

// ============================================================================
// Manifests
// ============================================================================

/// One dataset row: an id plus the low-dose and normal-dose tensor paths,
/// already resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub low: PathBuf,
    pub normal: PathBuf,
}

/// Read a dataset manifest (`id<TAB>low_path<TAB>normal_path` per line);
/// relative paths are resolved against the manifest's own directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut entries = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(format_err(
                path,
                format!(
                    "line {}: expected 3 tab-separated fields, found {}",
                    lineno + 1,
                    fields.len()
                ),
            ));
        }
        let id = fields[0].to_string();
        if entries.iter().any(|e: &ManifestEntry| e.id == id) {
            return Err(format_err(path, format!("duplicate id '{id}'")));
        }
        entries.push(ManifestEntry {
            id,
            low: base.join(fields[1]),
            normal: base.join(fields[2]),
        });
    }
    if entries.is_empty() {
        return Err(format_err(path, "manifest lists no images"));
    }
    Ok(entries)
}

/// Write a dataset manifest; `rows` are `(id, low_relative, normal_relative)`.
pub fn write_manifest(path: &Path, rows: &[(String, String, String)]) -> Result<()> {
    let mut text = String::new();
    for (id, low, normal) in rows {
        let _ = writeln!(text, "{id}\t{low}\t{normal}");
    }
    std::fs::write(path, text).map_err(|e| file_err(path, e))
}

/// One evaluation row: an id and the tensor holding the image to score (or to
/// score against).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalEntry {
    pub id: String,
    pub path: PathBuf,
}

/// Read a manifest for evaluation. Two tab-separated fields are taken as
/// `id<TAB>path`; a three-field dataset manifest is accepted too, in which
/// case the final (normal-dose) column is used.
pub fn read_eval_manifest(path: &Path) -> Result<Vec<EvalEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut entries = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let (id, rel) = match fields.as_slice() {
            [id, p] => (*id, *p),
            [id, _, p] => (*id, *p),
            _ => {
                return Err(format_err(
                    path,
                    format!(
                        "line {}: expected 2 or 3 tab-separated fields, found {}",
                        lineno + 1,
                        fields.len()
                    ),
                ));
            }
        };
        let id = id.to_string();
        if entries.iter().any(|e: &EvalEntry| e.id == id) {
            return Err(format_err(path, format!("duplicate id '{id}'")));
        }
        entries.push(EvalEntry {
            id,
            path: base.join(rel),
        });
    }
    if entries.is_empty() {
        return Err(format_err(path, "manifest lists no images"));
    }
    Ok(entries)
}
