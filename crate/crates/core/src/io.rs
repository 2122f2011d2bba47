//! On-disk formats: raw tensors, checkpoints, PGM/PPM images and CSV reports.
//!
//! Raw tensor layout (all little-endian):
//!
//! ```text
//! b"TACT" | version u32 | rank u32 | dims u32 * rank | f32 * product(dims)
//! ```
//!
//! Checkpoints start with `b"TACL" | version u32` followed by records
//! `name_len u32 | name utf-8 | rank u32 | dims u32 * rank | f64 * product(dims)`
//! until end of file.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::convlstm::ConvLSTMParams;
use crate::error::{Error, Result};
use crate::field::{clamp01, ScalarField2D};
use crate::metrics::LabelMap2D;
use crate::scalar::Real;
use crate::train::HistoryRow;

pub const TENSOR_MAGIC: &[u8; 4] = b"TACT";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TACL";
pub const FORMAT_VERSION: u32 = 1;

/// Dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl RawTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.is_empty() || n != data.len() {
            return Err(Error::Shape(format!("dims {dims:?} hold {n} values, got {}", data.len())));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Shape(format!("dimension too large in {dims:?}")));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Stacks equally sized fields into a `[D, H, W]` volume.
    pub fn from_fields<T: Real>(fields: &[ScalarField2D<T>]) -> Result<Self> {
        let first = fields.first().ok_or_else(|| Error::Shape("no slices".into()))?;
        let (h, w) = first.dims();
        let mut data = Vec::with_capacity(fields.len() * h * w);
        for f in fields {
            if f.dims() != (h, w) {
                return Err(Error::Shape(format!("slice {:?} vs {:?}", f.dims(), (h, w))));
            }
            data.extend(f.values().iter().map(|v| v.as_f64() as f32));
        }
        Self::new(vec![fields.len(), h, w], data)
    }

    pub fn from_labels(maps: &[LabelMap2D]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::Shape("no slices".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::with_capacity(maps.len() * h * w);
        for m in maps {
            if (m.height(), m.width()) != (h, w) {
                return Err(Error::Shape("label slices differ in size".into()));
            }
            data.extend(m.labels().iter().map(|&l| l as f32));
        }
        Self::new(vec![maps.len(), h, w], data)
    }

    /// `(D, H, W)`; a rank-2 tensor is one slice.
    pub fn volume_dims(&self) -> Result<(usize, usize, usize)> {
        match self.dims[..] {
            [h, w] => Ok((1, h, w)),
            [d, h, w] => Ok((d, h, w)),
            _ => Err(Error::Shape(format!("expected a rank 2 or 3 tensor, got {:?}", self.dims))),
        }
    }

    /// Splits a volume into validated `[0, 1]` slices.
    pub fn to_fields<T: Real>(&self) -> Result<Vec<ScalarField2D<T>>> {
        let (_, h, w) = self.volume_dims()?;
        self.data
            .chunks(h * w)
            .map(|c| ScalarField2D::new(w, h, c.iter().map(|&v| T::lit(v as f64)).collect()))
            .collect()
    }

    pub fn to_labels(&self) -> Result<Vec<LabelMap2D>> {
        let (_, h, w) = self.volume_dims()?;
        self.data
            .chunks(h * w)
            .map(|c| {
                let labels = c
                    .iter()
                    .map(|&v| {
                        if v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0 {
                            Ok(v as u32)
                        } else {
                            Err(Error::Value(format!("label {v} is not a small non-negative integer")))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                LabelMap2D::new(w, h, labels)
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != TENSOR_MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let dims = r.dims()?;
        let n: usize = dims.iter().product();
        if r.remaining() != n * 4 {
            return Err(format!("payload is {} bytes, dims {dims:?} need {}", r.remaining(), n * 4));
        }
        let data = (0..n).map(|_| r.f32()).collect::<std::result::Result<Vec<_>, _>>()?;
        RawTensor::new(dims, data).map_err(|e| e.to_string())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.remaining() < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> std::result::Result<f32, String> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn dims(&mut self) -> std::result::Result<Vec<usize>, String> {
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(format!("rank {rank} out of range"));
        }
        let dims = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        match n {
            Some(n) if n <= self.remaining() => Ok(dims),
            _ => Err(format!("dims {dims:?} exceed the file size")),
        }
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &RawTensor) -> Result<()> {
    write(path.as_ref(), &tensor.to_bytes())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<RawTensor> {
    let path = path.as_ref();
    RawTensor::from_bytes(&read(path)?).map_err(|reason| Error::format(path, reason))
}

#[inline]
fn to_byte<T: Real>(v: T) -> u8 {
    (clamp01(v).as_f64() * 255.0 + 0.5).floor() as u8
}

/// Binary 8-bit greyscale, values scaled by 255 and rounded half up.
pub fn pgm_bytes<T: Real>(field: &ScalarField2D<T>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", field.width(), field.height()).into_bytes();
    out.extend(field.values().iter().map(|&v| to_byte(v)));
    out
}

pub fn write_pgm<T: Real>(path: impl AsRef<Path>, field: &ScalarField2D<T>) -> Result<()> {
    write(path.as_ref(), &pgm_bytes(field))
}

/// Greyscale base image with `overlay` raised into the red channel.
pub fn ppm_overlay_bytes<T: Real>(base: &ScalarField2D<T>, overlay: &ScalarField2D<T>) -> Result<Vec<u8>> {
    if base.dims() != overlay.dims() {
        return Err(Error::Shape(format!("overlay {:?} vs base {:?}", overlay.dims(), base.dims())));
    }
    let mut out = format!("P6\n{} {}\n255\n", base.width(), base.height()).into_bytes();
    for (&b, &o) in base.values().iter().zip(overlay.values()) {
        let g = to_byte(b);
        out.extend_from_slice(&[g.max(to_byte(o)), g, g]);
    }
    Ok(out)
}

pub fn write_ppm_overlay<T: Real>(
    path: impl AsRef<Path>,
    base: &ScalarField2D<T>,
    overlay: &ScalarField2D<T>,
) -> Result<()> {
    write(path.as_ref(), &ppm_overlay_bytes(base, overlay)?)
}

/// Parses a binary netpbm header of the given magic; returns
/// `(width, height, pixel bytes)`.
fn parse_netpbm<'a>(bytes: &'a [u8], magic: &str, channels: usize) -> std::result::Result<(usize, usize, &'a [u8]), String> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ascii header")?);
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != magic {
        return Err(format!("expected {magic}, found {}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header number `{s}`"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(format!("only maxval 255 is supported, got {max}"));
    }
    let need = w * h * channels;
    if w == 0 || h == 0 || bytes.len() < pos || bytes.len() - pos != need {
        return Err(format!("raster size does not match {w}x{h}"));
    }
    Ok((w, h, &bytes[pos..]))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<ScalarField2D<f64>> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let (w, h, raster) = parse_netpbm(&bytes, "P5", 1).map_err(|r| Error::format(path, r))?;
    ScalarField2D::new(w, h, raster.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Returns `(width, height, rgb bytes)`.
pub fn read_ppm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let (w, h, raster) = parse_netpbm(&bytes, "P6", 3).map_err(|r| Error::format(path, r))?;
    Ok((w, h, raster.to_vec()))
}

/// Scalar settings stored next to the weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta {
    /// 1 after the backbone stage, 2 after attention fine-tuning.
    pub stage: u32,
    pub slices: usize,
    pub patch: usize,
    pub beta: f64,
    pub sigma: f64,
    pub epsilon: f64,
}

const META_KEYS: [&str; 6] = ["meta.stage", "meta.slices", "meta.patch", "meta.beta", "meta.sigma", "meta.epsilon"];

fn push_record(out: &mut Vec<u8>, name: &str, dims: &[usize], values: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn checkpoint_bytes(params: &ConvLSTMParams<f64>, meta: &CheckpointMeta) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (name, dims, values) in params.named_tensors() {
        push_record(&mut out, &name, &dims, &values);
    }
    let meta_values = [
        meta.stage as f64,
        meta.slices as f64,
        meta.patch as f64,
        meta.beta,
        meta.sigma,
        meta.epsilon,
    ];
    for (key, v) in META_KEYS.iter().zip(meta_values) {
        push_record(&mut out, key, &[1], &[v]);
    }
    out
}

pub fn parse_checkpoint(bytes: &[u8]) -> std::result::Result<(ConvLSTMParams<f64>, CheckpointMeta), String> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let mut records: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    while r.remaining() > 0 {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| "non-utf8 tensor name")?.to_string();
        let dims = r.dims()?;
        let n: usize = dims.iter().product();
        let values = (0..n).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
        if records.iter().any(|(existing, _, _)| *existing == name) {
            return Err(format!("duplicate tensor `{name}`"));
        }
        records.push((name, dims, values));
    }
    let scalar = |key: &str| -> std::result::Result<f64, String> {
        match records.iter().find(|(n, _, _)| n == key) {
            Some((_, _, v)) if v.len() == 1 => Ok(v[0]),
            Some(_) => Err(format!("`{key}` must hold one value")),
            None => Err(format!("missing `{key}`")),
        }
    };
    let count = |key: &str| -> std::result::Result<usize, String> {
        let v = scalar(key)?;
        if v >= 0.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(format!("`{key}` = {v} is not a count"))
        }
    };
    let meta = CheckpointMeta {
        stage: count(META_KEYS[0])? as u32,
        slices: count(META_KEYS[1])?,
        patch: count(META_KEYS[2])?,
        beta: scalar(META_KEYS[3])?,
        sigma: scalar(META_KEYS[4])?,
        epsilon: scalar(META_KEYS[5])?,
    };
    let params = ConvLSTMParams::from_named_tensors(
        records
            .iter()
            .filter(|(n, _, _)| !n.starts_with("meta."))
            .map(|(n, d, v)| (n.as_str(), d.as_slice(), v.as_slice())),
    )
    .map_err(|e| e.to_string())?;
    params.validate().map_err(|e| e.to_string())?;
    Ok((params, meta))
}

pub fn write_checkpoint(path: impl AsRef<Path>, params: &ConvLSTMParams<f64>, meta: &CheckpointMeta) -> Result<()> {
    write(path.as_ref(), &checkpoint_bytes(params, meta))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(ConvLSTMParams<f64>, CheckpointMeta)> {
    let path = path.as_ref();
    parse_checkpoint(&read(path)?).map_err(|reason| Error::format(path, reason))
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("epoch,stage,lr,loss\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.epoch, r.stage.name(), r.lr, r.loss).unwrap();
    }
    out
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    write(path.as_ref(), text.as_bytes())
}

/// One line of a metric report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub stddev: f64,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("metric,value,stddev\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.metric, r.value, r.stddev).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tensor_header_layout() {
        let t = RawTensor::new(vec![2, 1], vec![1.0, -0.5]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..4], b"TACT");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..20], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[20..24], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 28);
        assert!(RawTensor::from_bytes(&b[..27]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(RawTensor::from_bytes(&extra).is_err());
        assert!(RawTensor::new(vec![3], vec![0.0; 2]).is_err());
    }

    #[test]
    fn pgm_rounds_half_up() {
        let f = ScalarField2D::new(4, 1, vec![0.0, 1.0, 0.5 / 255.0, 0.5]).unwrap();
        let b = pgm_bytes(&f);
        assert_eq!(&b[..11], b"P5\n4 1\n255\n");
        assert_eq!(&b[11..], &[0, 255, 1, 128]);
    }

    #[test]
    fn image_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = ScalarField2D::from_fn(3, 2, |r, c| (r * 3 + c) as f64 * 51.0 / 255.0).unwrap();
        write_pgm(dir.path().join("a.pgm"), &f).unwrap();
        let back = read_pgm(dir.path().join("a.pgm")).unwrap();
        for (a, b) in f.values().iter().zip(back.values()) {
            assert!((a - b).abs() < 1e-12);
        }
        let o = ScalarField2D::filled(3, 2, 1.0).unwrap();
        write_ppm_overlay(dir.path().join("a.ppm"), &f, &o).unwrap();
        let (w, h, rgb) = read_ppm(dir.path().join("a.ppm")).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(&rgb[..6], &[255, 0, 0, 255, 51, 51]);
        assert!(read_pgm(dir.path().join("a.ppm")).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ConvLSTMParams::<f64>::init(2, 3, &mut rng).unwrap();
        p.attention_weight = 0.125;
        let meta = CheckpointMeta { stage: 2, slices: 3, patch: 39, beta: 0.5, sigma: 1.0, epsilon: 0.01 };
        let bytes = checkpoint_bytes(&p, &meta);
        let (q, m) = parse_checkpoint(&bytes).unwrap();
        assert_eq!(q, p);
        assert_eq!(m, meta);
        assert!(parse_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        assert!(parse_checkpoint(b"TACT\x01\0\0\0").is_err());
    }

    #[test]
    fn csv_shapes() {
        use crate::train::Stage;
        let h = history_csv(&[HistoryRow { epoch: 0, stage: Stage::Tacnet, lr: 0.5, loss: 0.25 }]);
        assert_eq!(h, "epoch,stage,lr,loss\n0,tacnet,0.5,0.25\n");
        let m = metrics_csv(&[MetricRow { metric: "dice".into(), value: 1.0, stddev: 0.0 }]);
        assert_eq!(m, "metric,value,stddev\ndice,1,0\n");
    }

    proptest! {
        #[test]
        fn tensor_round_trip(dims in proptest::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
            use rand::Rng;
            let n: usize = dims.iter().product();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..n).map(|_| rng.gen::<f32>() * 10.0 - 5.0).collect();
            let t = RawTensor::new(dims, data).unwrap();
            let back = RawTensor::from_bytes(&t.to_bytes()).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn fields_round_trip_through_f32(values in proptest::collection::vec(0.0f32..=1.0, 12)) {
            let f = ScalarField2D::new(4, 3, values.iter().map(|&v| v as f64).collect()).unwrap();
            let t = RawTensor::from_fields(&[f.clone(), f.clone()]).unwrap();
            let back = t.to_fields::<f64>().unwrap();
            prop_assert_eq!(back.len(), 2);
            prop_assert_eq!(&back[0], &f);
        }
    }
}
