//! File formats: the `SPAD` dataset, `SPOI` tensor-record files (checkpoints,
//! truth companions, unmixing results), mask files and CSV import.
//!
//! All multi-byte values are little-endian. Every write goes to a temporary
//! file in the destination directory and is renamed into place, so an
//! interrupted process never leaves a truncated file behind.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};

use crate::batch::PixelBatch;
use crate::error::{Error, Result};
use crate::spectra::WavelengthGrid;

pub const DATASET_MAGIC: &[u8; 4] = b"SPAD";
pub const DATASET_VERSION: u32 = 1;
pub const TENSOR_MAGIC: &[u8; 4] = b"SPOI";
pub const TENSOR_VERSION: u32 = 1;

/// Upper bound on a single tensor's rank, guarding against corrupt headers.
const MAX_RANK: u32 = 8;
const MAX_NAME_LEN: u32 = 4096;

/// Writes `path` atomically: `body` fills a temp file that is then renamed.
pub fn write_atomic<P, B>(path: P, body: B) -> Result<()>
where
    P: AsRef<Path>,
    B: FnOnce(&mut BufWriter<&mut File>) -> Result<()>,
{
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        body(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn read_exact<const N: usize, R: Read>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact::<4, _>(r, what)?))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact::<8, _>(r, what)?))
}

fn read_f32s<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<f32>> {
    let bytes = n
        .checked_mul(4)
        .ok_or_else(|| Error::Format(format!("{what}: size overflow")))?;
    let mut buf = Vec::new();
    r.take(bytes as u64).read_to_end(&mut buf)?;
    if buf.len() != bytes {
        return Err(Error::Format(format!("truncated while reading {what}")));
    }
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn write_f32s<W: Write>(w: &mut W, values: impl IntoIterator<Item = f32>) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn check_magic<R: Read>(r: &mut R, magic: &[u8; 4], version: u32) -> Result<()> {
    let got = read_exact::<4, _>(r, "magic")?;
    if &got != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic)
        )));
    }
    let v = read_u32(r, "version")?;
    if v != version {
        return Err(Error::Format(format!("unsupported version {v}, expected {version}")));
    }
    Ok(())
}

fn ensure_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut one = [0u8; 1];
    match r.read(&mut one)? {
        0 => Ok(()),
        _ => Err(Error::Format("trailing bytes after payload".into())),
    }
}

/// A dataset on disk: wavelength grid plus pixels and depths.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub grid: WavelengthGrid,
    pub batch: PixelBatch,
}

impl Dataset {
    pub fn new(grid: WavelengthGrid, batch: PixelBatch) -> Result<Self> {
        if grid.len() != batch.wavelength_count() {
            return Err(Error::DimensionMismatch(format!(
                "grid has {} wavelengths, pixels have {}",
                grid.len(),
                batch.wavelength_count()
            )));
        }
        Ok(Self { grid, batch })
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let (i, l) = self.batch.pixels().dim();
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(i as u64).to_le_bytes())?;
        w.write_all(&(l as u64).to_le_bytes())?;
        write_f32s(w, self.grid.as_slice().iter().map(|&v| v as f32))?;
        write_f32s(w, self.batch.depths().iter().map(|&v| v as f32))?;
        write_f32s(w, self.batch.pixels().iter().map(|&v| v as f32))?;
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        check_magic(r, DATASET_MAGIC, DATASET_VERSION)?;
        let i = read_u64(r, "pixel count")? as usize;
        let l = read_u64(r, "wavelength count")? as usize;
        let wl = read_f32s(r, l, "wavelengths")?;
        let depths = read_f32s(r, i, "depths")?;
        let n = i
            .checked_mul(l)
            .ok_or_else(|| Error::Format("pixel payload size overflow".into()))?;
        let pixels = read_f32s(r, n, "pixels")?;
        ensure_eof(r)?;
        let grid = WavelengthGrid::new(wl.into_iter().map(f64::from).collect())?;
        let pixels = Array2::from_shape_vec((i, l), pixels.into_iter().map(f64::from).collect())
            .map_err(|e| Error::Format(e.to_string()))?;
        let batch = PixelBatch::new(pixels, depths.into_iter().map(f64::from).collect())?;
        Self::new(grid, batch)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, |w| self.write(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }

    /// CSV import: a header row whose cells after the first are wavelengths
    /// (nm), then one `depth_mm,p_1,…,p_L` row per pixel.
    pub fn from_csv<R: Read>(rdr: R) -> Result<Self> {
        let mut csv = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(rdr);
        let mut records = csv.records();
        let header = records
            .next()
            .ok_or_else(|| Error::Format("empty CSV".into()))??;
        if header.len() < 2 {
            return Err(Error::Format("header needs a label cell followed by wavelengths".into()));
        }
        let wl = header
            .iter()
            .skip(1)
            .map(|c| c.parse::<f64>().map_err(|_| Error::Format(format!("bad wavelength `{c}` in header"))))
            .collect::<Result<Vec<_>>>()?;
        let l = wl.len();
        let (mut depths, mut values) = (vec![], vec![]);
        for (row, rec) in records.enumerate() {
            let rec = rec?;
            if rec.len() != l + 1 {
                return Err(Error::Format(format!(
                    "row {} has {} cells, expected {}",
                    row + 2,
                    rec.len(),
                    l + 1
                )));
            }
            for (k, cell) in rec.iter().enumerate() {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| Error::Format(format!("row {}: bad number `{cell}`", row + 2)))?;
                if k == 0 {
                    depths.push(v);
                } else {
                    values.push(v);
                }
            }
        }
        let pixels =
            Array2::from_shape_vec((depths.len(), l), values).map_err(|e| Error::Format(e.to_string()))?;
        Self::new(WavelengthGrid::new(wl)?, PixelBatch::new(pixels, Array1::from(depths))?)
    }
}

/// One named tensor: shape plus row-major `f32` payload.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "tensor `{name}`: shape {shape:?} but {} values",
                data.len()
            )));
        }
        Ok(Self { name, shape, data })
    }

    /// Rank-2 view as `f64` (rank-1 tensors become a single row).
    pub fn to_array2(&self) -> Result<Array2<f64>> {
        let (r, c) = match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => {
                return Err(Error::Format(format!("tensor `{}` has rank {}, expected 1 or 2", self.name, s.len())))
            }
        };
        Ok(Array2::from_shape_vec((r, c), self.data.iter().map(|&v| f64::from(v)).collect())
            .expect("shape checked at construction"))
    }

    pub fn to_vec_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

/// An ordered collection of named tensors (`SPOI` format).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    pub records: Vec<TensorRecord>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: TensorRecord) -> Result<()> {
        if self.get(&record.name).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{}`", record.name)));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn push_array2<F: crate::Real>(&mut self, name: &str, a: ArrayView2<'_, F>) -> Result<()> {
        self.push(TensorRecord::new(
            name,
            vec![a.nrows(), a.ncols()],
            a.iter().map(|v| v.f64() as f32).collect(),
        )?)
    }

    pub fn push_vec(&mut self, name: &str, v: &[f64]) -> Result<()> {
        self.push(TensorRecord::new(name, vec![v.len()], v.iter().map(|&x| x as f32).collect())?)
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&TensorRecord> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.name.as_str())
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&TENSOR_VERSION.to_le_bytes())?;
        for rec in &self.records {
            let name = rec.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(rec.shape.len() as u32).to_le_bytes())?;
            for &d in &rec.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            write_f32s(w, rec.data.iter().copied())?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        check_magic(r, TENSOR_MAGIC, TENSOR_VERSION)?;
        let mut file = Self::new();
        loop {
            let mut len = [0u8; 4];
            let got = r.read(&mut len)?;
            if got == 0 {
                break;
            }
            if got < 4 {
                r.read_exact(&mut len[got..])
                    .map_err(|_| Error::Format("truncated record header".into()))?;
            }
            let len = u32::from_le_bytes(len);
            if len > MAX_NAME_LEN {
                return Err(Error::Format(format!("tensor name length {len} is implausible")));
            }
            let mut name = vec![0u8; len as usize];
            r.read_exact(&mut name)
                .map_err(|_| Error::Format("truncated tensor name".into()))?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = read_u32(r, "rank")?;
            if rank > MAX_RANK {
                return Err(Error::Format(format!("tensor `{name}` has implausible rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| read_u64(r, "dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor `{name}` size overflow")))?;
            let data = read_f32s(r, n, &name)?;
            file.push(TensorRecord::new(name, shape, data)?)?;
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, |w| self.write(w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}

/// Reads a mask: one `0` or `1` per line, exactly `expected` lines.
pub fn read_mask<R: Read>(r: R, expected: usize) -> Result<Vec<bool>> {
    let mut text = String::new();
    BufReader::new(r).read_to_string(&mut text)?;
    let mask = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| match l {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(Error::Format(format!("mask line {}: expected 0 or 1, got `{l}`", i + 1))),
        })
        .collect::<Result<Vec<_>>>()?;
    if mask.len() != expected {
        return Err(Error::DimensionMismatch(format!(
            "mask has {} entries, dataset has {expected} pixels",
            mask.len()
        )));
    }
    Ok(mask)
}

pub fn load_mask(path: &Path, expected: usize) -> Result<Vec<bool>> {
    read_mask(File::open(path)?, expected)
}

pub fn write_mask<W: Write>(w: &mut W, mask: &[bool]) -> Result<()> {
    for &m in mask {
        writeln!(w, "{}", u8::from(m))?;
    }
    Ok(())
}

pub fn save_mask(path: &Path, mask: &[bool]) -> Result<()> {
    write_atomic(path, |w| write_mask(w, mask))
}

/// Serializes `value` as pretty JSON with a trailing newline, atomically.
pub fn save_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn dataset() -> Dataset {
        Dataset::new(
            WavelengthGrid::new(vec![700.0, 750.5, 800.0]).unwrap(),
            PixelBatch::new(array![[0.1, 0.2, 0.3], [1.0, 0.0, 0.5]], array![0.0, 2.5]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn dataset_round_trip_is_bitwise() {
        let d = dataset();
        let mut buf = vec![];
        d.write(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SPAD");
        assert_eq!(buf.len(), 4 + 4 + 8 + 8 + 4 * (3 + 2 + 6));
        let back = Dataset::read(&mut buf.as_slice()).unwrap();
        let mut buf2 = vec![];
        back.write(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
        assert_eq!(back.batch.pixels()[[1, 2]], 0.5);
    }

    #[test]
    fn dataset_rejects_corruption() {
        let mut buf = vec![];
        dataset().write(&mut buf).unwrap();
        assert!(matches!(Dataset::read(&mut &buf[..buf.len() - 1]), Err(Error::Format(_))));
        let mut extra = buf.clone();
        extra.push(0);
        assert!(matches!(Dataset::read(&mut extra.as_slice()), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::read(&mut bad.as_slice()), Err(Error::Format(_))));
        let mut neg = buf;
        let off = neg.len() - 4;
        neg[off..].copy_from_slice(&(-1.0f32).to_le_bytes());
        assert!(matches!(Dataset::read(&mut neg.as_slice()), Err(Error::NegativeValue(_))));
    }

    #[test]
    fn tensor_round_trip() {
        let mut f = TensorFile::new();
        f.push_array2("a", array![[1.0f64, 2.0], [3.0, 4.0]].view()).unwrap();
        f.push_vec("v", &[0.5, f64::NAN]).unwrap();
        f.push(TensorRecord::new("scalar", vec![], vec![7.0]).unwrap()).unwrap();
        let mut buf = vec![];
        f.write(&mut buf).unwrap();
        let back = TensorFile::read(&mut buf.as_slice()).unwrap();
        assert_eq!(back.names().collect::<Vec<_>>(), ["a", "v", "scalar"]);
        assert_eq!(back.require("a").unwrap().to_array2().unwrap(), array![[1.0, 2.0], [3.0, 4.0]]);
        assert!(back.require("v").unwrap().data[1].is_nan());
        assert!(back.require("missing").is_err());
        assert!(f.push_vec("a", &[1.0]).is_err());
        assert!(matches!(TensorFile::read(&mut &buf[..buf.len() - 2]), Err(Error::Format(_))));
    }

    #[test]
    fn masks() {
        let m = read_mask("1\n0\n1\n".as_bytes(), 3).unwrap();
        assert_eq!(m, [true, false, true]);
        let mut buf = vec![];
        write_mask(&mut buf, &m).unwrap();
        assert_eq!(buf, b"1\n0\n1\n");
        assert!(matches!(read_mask("1\n0\n".as_bytes(), 3), Err(Error::DimensionMismatch(_))));
        assert!(matches!(read_mask("1\n2\n".as_bytes(), 2), Err(Error::Format(_))));
    }

    #[test]
    fn csv_import() {
        let d = Dataset::from_csv("depth_mm,700,750\n0,0.1,0.2\n1.5,0.3,0.4\n".as_bytes()).unwrap();
        assert_eq!(d.grid.as_slice(), &[700.0, 750.0]);
        assert_eq!(d.batch.depths().to_vec(), vec![0.0, 1.5]);
        assert_eq!(d.batch.pixels()[[1, 1]], 0.4);
        assert!(Dataset::from_csv("depth_mm,700\n0,0.1,0.2\n".as_bytes()).is_err());
        assert!(Dataset::from_csv("depth_mm,700\n0,-1\n".as_bytes()).is_err());
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_atomic(&p, |w| Ok(w.write_all(b"one")?)).unwrap();
        write_atomic(&p, |w| Ok(w.write_all(b"two")?)).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        let failed = write_atomic(&p, |_| Err(Error::Format("boom".into())));
        assert!(failed.is_err());
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
