//! Binary tensor files (STV1), 8-bit grayscale heatmaps (PGM P5) and
//! directories of named tensors ("bundles").

use std::fs;
use std::path::Path;

use super::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"STV1";

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

/// Serialises a tensor as STV1: magic, dtype byte, rank byte, u32 LE extents, LE data.
pub fn encode_stv1<S: Scalar>(t: &Tensor<S>) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return format_err(format!("rank {} does not fit in one byte", t.rank()));
    }
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + t.len() * S::DTYPE.width());
    out.extend_from_slice(MAGIC);
    out.push(S::DTYPE as u8);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| Error::Format(format!("extent {e} exceeds u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

/// Reads the header, returning `(dtype, shape, payload offset)`.
fn decode_header(bytes: &[u8]) -> Result<(DType, Vec<usize>, usize)> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return format_err("missing STV1 magic");
    }
    let dtype = DType::from_code(bytes[4])?;
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return format_err("truncated STV1 header");
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    if bytes.len() != header + n * dtype.width() {
        return format_err(format!(
            "STV1 payload holds {} bytes, shape {shape:?} of {dtype:?} needs {}",
            bytes.len() - header,
            n * dtype.width()
        ));
    }
    Ok((dtype, shape, header))
}

/// Decodes STV1 bytes whose dtype must match `S`.
pub fn decode_stv1<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let (dtype, shape, off) = decode_header(bytes)?;
    if dtype != S::DTYPE {
        return format_err(format!("STV1 holds {dtype:?}, expected {:?}", S::DTYPE));
    }
    let data = bytes[off..].chunks_exact(dtype.width()).map(S::read_le).collect();
    Tensor::new(shape, data)
}

/// Decodes STV1 bytes of either dtype, widening to f64.
pub fn decode_stv1_any(bytes: &[u8]) -> Result<Tensor<f64>> {
    let (dtype, _, _) = decode_header(bytes)?;
    match dtype {
        DType::F64 => decode_stv1::<f64>(bytes),
        DType::F32 => Ok(decode_stv1::<f32>(bytes)?.cast()),
    }
}

pub fn write_stv1<S: Scalar>(path: impl AsRef<Path>, t: &Tensor<S>) -> Result<()> {
    fs::write(path, encode_stv1(t)?)?;
    Ok(())
}

pub fn read_stv1<S: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    decode_stv1(&fs::read(path)?)
}

/// Reads an STV1 file of either dtype as f64.
pub fn read_stv1_any(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    decode_stv1_any(&fs::read(path)?)
}

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Quantises values in `[0, 1]` as `round(255·v)`; values outside are clamped.
    pub fn from_unit(plane: &[f64], height: usize, width: usize) -> Result<Self> {
        if plane.len() != height * width {
            return format_err(format!("plane of {} values is not {height}x{width}", plane.len()));
        }
        let pixels = plane.iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8).collect();
        Ok(GrayImage { width, height, pixels })
    }
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    // Header: magic, width, height, maxval as whitespace-separated tokens
    // (with optional # comments), then exactly one whitespace byte.
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return format_err("truncated PGM header");
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("non-ASCII PGM header".into()))?);
    }
    if tokens[0] != "P5" {
        return format_err(format!("expected P5 magic, got {}", tokens[0]));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM number {s:?}")));
    let (width, height, maxval) = (parse(tokens[1])?, parse(tokens[2])?, parse(tokens[3])?);
    if maxval != 255 {
        return format_err(format!("only 8-bit PGM (maxval 255) is supported, got {maxval}"));
    }
    pos += 1;
    let pixels = bytes.get(pos..).unwrap_or_default().to_vec();
    if pixels.len() != width * height {
        return format_err(format!("PGM payload holds {} bytes, expected {}", pixels.len(), width * height));
    }
    Ok(GrayImage { width, height, pixels })
}

pub fn write_pgm(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    fs::write(path, encode_pgm(img))?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    decode_pgm(&fs::read(path)?)
}

/// Writes `[T, H, W]` values in `[0,1]` as `frame_0000.pgm`, `frame_0001.pgm`, …
/// and returns the file names.
pub fn write_pgm_frames(dir: impl AsRef<Path>, volume: &Tensor<f64>) -> Result<Vec<String>> {
    let [t, h, w] = volume.dims3("heatmap volume")?;
    fs::create_dir_all(dir.as_ref())?;
    let mut names = Vec::with_capacity(t);
    for (i, plane) in volume.data().chunks(h * w).enumerate() {
        let name = format!("frame_{i:04}.pgm");
        write_pgm(dir.as_ref().join(&name), &GrayImage::from_unit(plane, h, w)?)?;
        names.push(name);
    }
    Ok(names)
}

/// Named tensors stored as `<name>.stv1` files plus an `index.csv` of
/// `position,name,shape` lines.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Bundle {
    pub entries: Vec<(String, Tensor<f64>)>,
}

impl Bundle {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f64>) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut index = String::from("position,name,shape\n");
        for (i, (name, t)) in self.entries.iter().enumerate() {
            if name.is_empty() || name.contains([',', '/', '\\', '\n']) {
                return format_err(format!("invalid bundle entry name {name:?}"));
            }
            write_stv1(dir.join(format!("{name}.stv1")), t)?;
            let shape: Vec<String> = t.shape().iter().map(|e| e.to_string()).collect();
            index.push_str(&format!("{i},{name},{}\n", shape.join("x")));
        }
        fs::write(dir.join("index.csv"), index)?;
        Ok(())
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let index = fs::read_to_string(dir.join("index.csv"))?;
        let mut bundle = Bundle::default();
        for line in index.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            let [_, name, shape] = fields[..] else {
                return format_err(format!("bad bundle index line {line:?}"));
            };
            let t = read_stv1_any(dir.join(format!("{name}.stv1")))?;
            let listed: Vec<String> = t.shape().iter().map(|e| e.to_string()).collect();
            if listed.join("x") != shape {
                return format_err(format!("bundle entry {name}: index shape {shape} disagrees with file"));
            }
            bundle.push(name, t);
        }
        Ok(bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stv1_header_layout() {
        let t = Tensor::<f32>::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let bytes = encode_stv1(&t).unwrap();
        assert_eq!(&bytes[..4], b"STV1");
        assert_eq!(bytes[4], 0);
        assert_eq!(bytes[5], 2);
        assert_eq!(&bytes[6..14], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[14..18], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 22);
    }

    #[test]
    fn stv1_rejects_wrong_dtype_and_truncation() {
        let bytes = encode_stv1(&Tensor::<f64>::zeros(vec![3])).unwrap();
        assert!(decode_stv1::<f32>(&bytes).is_err());
        assert!(decode_stv1::<f64>(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_stv1::<f64>(b"NOPE").is_err());
    }

    #[test]
    fn pgm_quantisation() {
        let img = GrayImage::from_unit(&[0.0, 0.5, 1.0, 0.002], 2, 2).unwrap();
        assert_eq!(img.pixels, vec![0, 128, 255, 1]);
        assert_eq!(decode_pgm(&encode_pgm(&img)).unwrap(), img);
    }

    #[test]
    fn pgm_header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[7, 9]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.pixels), (2, 1, vec![7, 9]));
    }
}
