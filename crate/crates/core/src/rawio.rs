//! Raw float tensor files and directory datasets.
//!
//! File layout (all little-endian):
//!
//! ```text
//! magic  b"AVFT"
//! rank   u32
//! dims   u32 × rank
//! data   f32 × product(dims)
//! ```
//!
//! A dataset directory holds `<name>.image.avft` (`[C, H, W]`) and
//! `<name>.audio.avft` (`[1, bins, frames]`) pairs, plus an optional
//! `labels.csv` of `name,class_id` lines.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AVFT";

pub fn encode_raw_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
    out
}

pub fn decode_raw_tensor<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let bad = |m: &str| Error::Checkpoint(format!("raw tensor: {m}"));
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |o: usize| -> Result<u32> {
        bytes
            .get(o..o + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| bad("truncated header"))
    };
    let rank = u32_at(4)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(u32_at(8 + 4 * i)? as usize);
    }
    let start = 8 + 4 * rank;
    let n: usize = shape.iter().product();
    if bytes.len() != start + 4 * n {
        return Err(bad("payload length does not match dims"));
    }
    let data = bytes[start..]
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Tensor::new(&shape, data)
}

pub fn write_raw_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_raw_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_raw_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode_raw_tensor(&buf).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub struct RawSample<T: Scalar> {
    pub name: String,
    pub image: Tensor<T>,
    pub spectrogram: Tensor<T>,
    pub class_id: Option<usize>,
}

/// Loads every image/audio pair in `dir`, sorted by name.
pub fn load_dataset<T: Scalar>(dir: &Path) -> Result<Vec<RawSample<T>>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".image.avft")).map(str::to_owned))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::config("data.dir", format!("no *.image.avft files in {}", dir.display())));
    }
    let labels = read_labels(&dir.join("labels.csv"))?;
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let audio: PathBuf = dir.join(format!("{name}.audio.avft"));
        out.push(RawSample {
            image: read_raw_tensor(&dir.join(format!("{name}.image.avft")))?,
            spectrogram: read_raw_tensor(&audio)?,
            class_id: labels.iter().find(|(n, _)| *n == name).map(|(_, c)| *c),
            name,
        });
    }
    Ok(out)
}

fn read_labels(path: &Path) -> Result<Vec<(String, usize)>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (n, c) = l
                .split_once(',')
                .ok_or_else(|| Error::config("labels.csv", format!("malformed line `{l}`")))?;
            let c = c
                .trim()
                .parse()
                .map_err(|_| Error::config("labels.csv", format!("bad class id in `{l}`")))?;
            Ok((n.trim().to_string(), c))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32);
        let b = encode_raw_tensor(&t);
        assert_eq!(&b[..4], b"AVFT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(b[20..24].try_into().unwrap()), 1.0);
        assert_eq!(decode_raw_tensor::<f32>(&b).unwrap(), t);
        assert!(decode_raw_tensor::<f32>(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn dataset_directory() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::<f32>::zeros(&[3, 8, 8]);
        let spec = Tensor::<f32>::zeros(&[1, 8, 6]);
        for n in ["b", "a"] {
            write_raw_tensor(&dir.path().join(format!("{n}.image.avft")), &img).unwrap();
            write_raw_tensor(&dir.path().join(format!("{n}.audio.avft")), &spec).unwrap();
        }
        fs::write(dir.path().join("labels.csv"), "a,1\nb,0\n").unwrap();
        let ds = load_dataset::<f32>(dir.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds[0].name, "a");
        assert_eq!(ds[0].class_id, Some(1));
    }
}
