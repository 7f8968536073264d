//! Minimal NIfTI-1 single-file (`.nii`) reader and writer.
//!
//! Supported datatypes: 2 (uint8), 4 (int16) and 16 (float32), either byte
//! order on read, little-endian on write. Geometry is taken from `dim` and
//! `pixdim` only; qform/sform orientation is ignored on read and left unset
//! on write. Dimensions 4..7 are flattened into the channel axis.

use std::fs;
use std::path::Path;

use super::{Grid, LabelMap, UncertaintyMap, Volume};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
const MAGIC_PAIR: &[u8; 4] = b"ni1\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Datatype {
    U8,
    I16,
    F32,
}

impl Datatype {
    fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::F32 => 16,
        }
    }

    fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(Datatype::U8),
            4 => Some(Datatype::I16),
            16 => Some(Datatype::F32),
            _ => None,
        }
    }

    fn bytes(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 => 2,
            Datatype::F32 => 4,
        }
    }
}

struct Header {
    grid: Grid,
    frames: usize,
    datatype: Datatype,
    vox_offset: usize,
    slope: f32,
    inter: f32,
    big_endian: bool,
}

struct Reader<'a> {
    buf: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn i16(&self, at: usize) -> i16 {
        let b = [self.buf[at], self.buf[at + 1]];
        if self.big_endian { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) }
    }

    fn i32(&self, at: usize) -> i32 {
        let b = self.buf[at..at + 4].try_into().unwrap();
        if self.big_endian { i32::from_be_bytes(b) } else { i32::from_le_bytes(b) }
    }

    fn f32(&self, at: usize) -> f32 {
        let b = self.buf[at..at + 4].try_into().unwrap();
        if self.big_endian { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) }
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), reason: reason.into() }
}

fn parse_header(path: &Path, buf: &[u8]) -> Result<Header> {
    if buf.len() < HEADER_SIZE {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_SIZE as u64,
            actual: buf.len() as u64,
        });
    }
    let le = i32::from_le_bytes(buf[0..4].try_into().unwrap());
    let be = i32::from_be_bytes(buf[0..4].try_into().unwrap());
    let big_endian = match (le, be) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(format_err(path, format!("sizeof_hdr is {le}, expected 348"))),
    };
    let magic = &buf[344..348];
    if magic == MAGIC_PAIR {
        return Err(format_err(path, "header/image pair (.hdr/.img) is not supported"));
    }
    if magic != MAGIC_SINGLE {
        return Err(format_err(path, format!("bad magic {magic:?}")));
    }
    let r = Reader { buf, big_endian };

    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::DimensionMismatch(format!("{}: dim[0] = {ndim}", path.display())));
    }
    let mut dim = [1usize; 7];
    for (k, d) in dim.iter_mut().enumerate().take(ndim as usize) {
        let v = r.i16(42 + 2 * k);
        if v <= 0 {
            return Err(Error::DimensionMismatch(format!("{}: dim[{}] = {v}", path.display(), k + 1)));
        }
        *d = v as usize;
    }
    let frames = dim[3..].iter().product::<usize>();

    let code = r.i16(70);
    let datatype = Datatype::from_code(code)
        .ok_or_else(|| Error::UnsupportedDatatype { path: path.to_path_buf(), code })?;
    let bitpix = r.i16(72);
    if bitpix as usize != datatype.bytes() * 8 {
        return Err(format_err(path, format!("bitpix {bitpix} does not match datatype {code}")));
    }

    let mut spacing = [1.0f64; 3];
    for (k, s) in spacing.iter_mut().enumerate() {
        let v = r.f32(80 + 4 * k).abs() as f64;
        if !(v.is_finite() && v > 0.0) {
            return Err(format_err(path, format!("pixdim[{}] = {v} is not a positive spacing", k + 1)));
        }
        *s = v;
    }

    let vox_offset = r.f32(108);
    if !(vox_offset.is_finite() && vox_offset >= DATA_OFFSET as f32) {
        return Err(format_err(path, format!("vox_offset {vox_offset} < {DATA_OFFSET}")));
    }
    let _ = r.i32(0);
    let grid = Grid::new([dim[0], dim[1], dim[2]], spacing)?;
    Ok(Header {
        grid,
        frames,
        datatype,
        vox_offset: vox_offset as usize,
        slope: r.f32(112),
        inter: r.f32(116),
        big_endian,
    })
}

/// Reads the header and the raw samples as f32, with scaling applied.
fn read_samples(path: &Path) -> Result<(Header, Vec<f32>)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(path, &buf)?;
    let count = header.grid.len() * header.frames;
    let expected = header.vox_offset + count * header.datatype.bytes();
    if buf.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: expected as u64,
            actual: buf.len() as u64,
        });
    }
    let body = &buf[header.vox_offset..expected];
    let be = header.big_endian;
    let mut samples: Vec<f32> = match header.datatype {
        Datatype::U8 => body.iter().map(|&b| b as f32).collect(),
        Datatype::I16 => body
            .chunks_exact(2)
            .map(|c| {
                let b = [c[0], c[1]];
                (if be { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) }) as f32
            })
            .collect(),
        Datatype::F32 => body
            .chunks_exact(4)
            .map(|c| {
                let b = c.try_into().unwrap();
                if be { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) }
            })
            .collect(),
    };
    let (slope, inter) = (header.slope, header.inter);
    if slope != 0.0 && slope.is_finite() && inter.is_finite() && !(slope == 1.0 && inter == 0.0) {
        samples.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    Ok((header, samples))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let (header, samples) = read_samples(path)?;
    Volume::new(header.grid, header.frames, samples)
        .map_err(|e| format_err(path, e.to_string()))
}

pub fn load_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let (header, samples) = read_samples(path)?;
    if header.frames != 1 {
        return Err(Error::DimensionMismatch(format!(
            "{}: label map must be 3D, found {} frames",
            path.display(),
            header.frames
        )));
    }
    let labels = samples_to_labels(path, &samples)?;
    LabelMap::new(header.grid, labels)
}

/// Reads a 4D uint8 stack written by [`save_label_stack`].
pub fn load_label_stack(path: impl AsRef<Path>) -> Result<Vec<LabelMap>> {
    let path = path.as_ref();
    let (header, samples) = read_samples(path)?;
    let labels = samples_to_labels(path, &samples)?;
    Ok(labels
        .chunks(header.grid.len())
        .map(|c| LabelMap::from_parts(header.grid, c.to_vec()))
        .collect())
}

fn samples_to_labels(path: &Path, samples: &[f32]) -> Result<Vec<u8>> {
    samples
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                Ok(v as u8)
            } else {
                Err(format_err(path, format!("label value {v} is not an integer in 0..=255")))
            }
        })
        .collect()
}

fn write(path: &Path, grid: &Grid, frames: usize, datatype: Datatype, body: &[u8]) -> Result<()> {
    let mut buf = vec![0u8; DATA_OFFSET];
    let put_i16 = |buf: &mut [u8], at: usize, v: i16| buf[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |buf: &mut [u8], at: usize, v: f32| buf[at..at + 4].copy_from_slice(&v.to_le_bytes());

    buf[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    buf[38] = b'r';
    let ndim: i16 = if frames > 1 { 4 } else { 3 };
    put_i16(&mut buf, 40, ndim);
    for k in 0..3 {
        put_i16(&mut buf, 42 + 2 * k, dim_i16(grid.dims[k], path)?);
    }
    put_i16(&mut buf, 48, dim_i16(frames, path)?);
    for k in 4..7 {
        put_i16(&mut buf, 42 + 2 * k, 1);
    }
    put_i16(&mut buf, 70, datatype.code());
    put_i16(&mut buf, 72, (datatype.bytes() * 8) as i16);
    put_f32(&mut buf, 76, 1.0);
    for k in 0..3 {
        put_f32(&mut buf, 80 + 4 * k, grid.spacing[k] as f32);
    }
    put_f32(&mut buf, 92, 1.0);
    put_f32(&mut buf, 108, DATA_OFFSET as f32);
    put_f32(&mut buf, 112, 1.0);
    buf[123] = 2; // mm
    buf[344..348].copy_from_slice(MAGIC_SINGLE);
    buf.extend_from_slice(body);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn dim_i16(n: usize, path: &Path) -> Result<i16> {
    i16::try_from(n).map_err(|_| {
        Error::DimensionMismatch(format!("{}: dimension {n} exceeds the NIfTI-1 limit", path.display()))
    })
}

/// Writes a float32 image; channels go to the 4th dimension.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let body: Vec<u8> = v.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    write(path.as_ref(), v.grid(), v.channels(), Datatype::F32, &body)
}

pub fn save_label_map(l: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), l.grid(), 1, Datatype::U8, l.labels())
}

/// Writes the uncertainty map as float32 (values are rounded from f64).
pub fn save_uncertainty(u: &UncertaintyMap, path: impl AsRef<Path>) -> Result<()> {
    let body: Vec<u8> = u.values().iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
    write(path.as_ref(), u.grid(), 1, Datatype::F32, &body)
}

/// Writes several label maps of one grid as a 4D uint8 image.
pub fn save_label_stack(maps: &[LabelMap], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let first = maps.first().ok_or_else(|| Error::Empty("label stack".into()))?;
    for m in maps {
        first.grid().check_same(m.grid(), "label stack")?;
    }
    let body: Vec<u8> = maps.iter().flat_map(|m| m.labels().iter().copied()).collect();
    write(path, first.grid(), maps.len(), Datatype::U8, &body)
}
