use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: [u8; 4] = [0, 0, 8, 3];
const LABELS_MAGIC: [u8; 4] = [0, 0, 8, 1];

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, context: &Path) -> Result<usize> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]) as usize)
        .ok_or_else(|| Error::Format {
            context: context.display().to_string(),
            detail: format!("file ends inside the header at byte {at}"),
        })
}

fn check_magic(bytes: &[u8], expected: [u8; 4]) -> Result<()> {
    let found = &bytes[..bytes.len().min(4)];
    if found != expected {
        return Err(Error::BadMagic {
            expected: expected.to_vec(),
            found: found.to_vec(),
        });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], start: usize, len: usize, context: &Path) -> Result<&'a [u8]> {
    bytes.get(start..start + len).ok_or_else(|| Error::Format {
        context: context.display().to_string(),
        detail: format!("expected {len} payload bytes, found {}", bytes.len().saturating_sub(start)),
    })
}

/// Read an IDX image/label pair (unsigned byte tensors, big-endian header).
/// Pixels are scaled by 1/255; the class count is one more than the largest label.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let ib = read(ip)?;
    let lb = read(lp)?;
    check_magic(&ib, IMAGES_MAGIC)?;
    check_magic(&lb, LABELS_MAGIC)?;
    let n = be_u32(&ib, 4, ip)?;
    let rows = be_u32(&ib, 8, ip)?;
    let cols = be_u32(&ib, 12, ip)?;
    let nl = be_u32(&lb, 4, lp)?;
    if n != nl {
        return Err(Error::Consistency(format!("{n} images but {nl} labels")));
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format {
            context: ip.display().to_string(),
            detail: format!("empty tensor {n}×{rows}×{cols}"),
        });
    }
    let pixels = payload(&ib, 16, n * rows * cols, ip)?;
    let labels: Vec<usize> = payload(&lb, 8, n, lp)?.iter().map(|&b| b as usize).collect();
    let images = Tensor::new(vec![n, 1, rows, cols], pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let name = ip
        .file_stem()
        .map_or_else(|| "idx".to_owned(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, split, images, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_pair(dir: &Path, images: &[u8], labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("img.idx");
        let lp = dir.join("lab.idx");
        std::fs::write(&ip, images).unwrap();
        std::fs::write(&lp, labels).unwrap();
        (ip, lp)
    }

    fn header(magic: [u8; 4], dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn hand_built_pair() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = header(IMAGES_MAGIC, &[2, 2, 2]);
        img.extend_from_slice(&[0, 255, 51, 102, 255, 0, 0, 255]);
        let mut lab = header(LABELS_MAGIC, &[2]);
        lab.extend_from_slice(&[1, 0]);
        let (ip, lp) = idx_pair(dir.path(), &img, &lab);
        let ds = load_idx(&ip, &lp, Split::Train).unwrap();
        assert_eq!(ds.images().shape(), &[2, 1, 2, 2]);
        assert_eq!(ds.images().data()[..4], [0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.labels(), &[1, 0]);
        assert_eq!(ds.classes(), 2);
    }

    #[test]
    fn truncated_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = header(IMAGES_MAGIC, &[2, 2, 2]);
        img.extend_from_slice(&[0, 1, 2]);
        let mut lab = header(LABELS_MAGIC, &[2]);
        lab.extend_from_slice(&[1, 0]);
        let (ip, lp) = idx_pair(dir.path(), &img, &lab);
        assert!(matches!(load_idx(&ip, &lp, Split::Train), Err(Error::Format { .. })));

        let (ip, lp) = idx_pair(dir.path(), &[0, 0, 8], &lab);
        assert!(matches!(load_idx(&ip, &lp, Split::Train), Err(Error::BadMagic { .. })));

        let (ip, lp) = idx_pair(dir.path(), &lab, &lab);
        match load_idx(&ip, &lp, Split::Train) {
            Err(Error::BadMagic { found, .. }) => assert_eq!(found, LABELS_MAGIC),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = header(IMAGES_MAGIC, &[1, 1, 1]);
        img.push(9);
        let mut lab = header(LABELS_MAGIC, &[2]);
        lab.extend_from_slice(&[0, 0]);
        let (ip, lp) = idx_pair(dir.path(), &img, &lab);
        assert!(matches!(load_idx(&ip, &lp, Split::Test), Err(Error::Consistency(_))));
    }
}
