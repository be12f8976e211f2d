//! Big-endian IDX image/label files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{Dataset, LabeledSample};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            message: format!("truncated while reading {what}"),
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("four bytes")))
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let chunk = self.bytes.get(self.pos..self.pos + len).ok_or_else(|| Error::Format {
            offset: self.bytes.len() as u64,
            message: format!("truncated {what}: need {len} bytes from offset {}", self.pos),
        })?;
        self.pos += len;
        Ok(chunk)
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let got = self.u32("magic number")?;
        if got != expected {
            return Err(Error::Format {
                offset: 0,
                message: format!("magic {got:#010x}, expected {expected:#010x}"),
            });
        }
        Ok(())
    }
}

/// Parse an image file into `(rows * cols)`-pixel vectors scaled to `[0, 1]`.
pub fn parse_images(bytes: &[u8], limit: usize) -> Result<Vec<Vec<f64>>> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(IMAGES_MAGIC)?;
    let n = r.u32("image count")? as usize;
    let rows = r.u32("row count")? as usize;
    let cols = r.u32("column count")? as usize;
    let size = rows * cols;
    (0..n.min(limit))
        .map(|_| Ok(r.take(size, "image data")?.iter().map(|&p| p as f64 / 255.0).collect()))
        .collect()
}

pub fn parse_labels(bytes: &[u8], limit: usize) -> Result<Vec<u8>> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(LABELS_MAGIC)?;
    let n = r.u32("label count")? as usize;
    Ok(r.take(n.min(limit), "label data")?.to_vec())
}

/// First `limit` samples of an IDX image/label pair with one-hot labels over
/// `num_classes` classes (largest label + 1 when absent).
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    limit: usize,
    num_classes: Option<usize>,
) -> Result<Dataset> {
    if limit == 0 {
        return Err(Error::Config("IDX limit must be positive".into()));
    }
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    let images = parse_images(&read(images_path)?, limit)?;
    let labels = parse_labels(&read(labels_path)?, limit)?;
    if images.len() != labels.len() {
        return Err(Error::Format {
            offset: 4,
            message: format!("{} images but {} labels", images.len(), labels.len()),
        });
    }
    let k = num_classes.unwrap_or_else(|| labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0).max(2));
    let samples = images
        .into_iter()
        .zip(labels)
        .map(|(x, l)| {
            if l as usize >= k {
                return Err(Error::Config(format!("label {l} outside {k} classes")));
            }
            LabeledSample::one_hot(x, l as usize, k)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples)
}
