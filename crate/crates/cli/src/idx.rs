//! Bit-exact IDX-format reader for the MNIST files: big-endian 32-bit
//! magic (0x00000803 images, 0x00000801 labels), dimension sizes, then
//! unsigned bytes. Pixels are scaled to `[0, 1]` by dividing by 255.0.

use cnorm::Dataset;
use std::fs;
use std::path::Path;
use thiserror::Error;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {got:#010x}, expected {want:#010x}")]
    WrongMagic { path: String, got: u32, want: u32 },
    #[error("{path}: file truncated (need {need} bytes, have {have})")]
    Truncated {
        path: String,
        need: usize,
        have: usize,
    },
    #[error("image/label counts differ: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: unsupported dimension count {dims}")]
    BadDimensions { path: String, dims: usize },
}

fn read_be_u32(bytes: &[u8], at: usize, path: &str) -> Result<u32, IdxError> {
    let end = at + 4;
    if bytes.len() < end {
        return Err(IdxError::Truncated {
            path: path.into(),
            need: end,
            have: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[at],
        bytes[at + 1],
        bytes[at + 2],
        bytes[at + 3],
    ]))
}

struct RawIdx {
    dims: Vec<usize>,
    payload: Vec<u8>,
}

fn read_idx(path: &Path, want_magic: u32, want_dims: usize) -> Result<RawIdx, IdxError> {
    let display = path.display().to_string();
    let bytes = fs::read(path).map_err(|source| IdxError::Io {
        path: display.clone(),
        source,
    })?;
    let magic = read_be_u32(&bytes, 0, &display)?;
    if magic != want_magic {
        return Err(IdxError::WrongMagic {
            path: display,
            got: magic,
            want: want_magic,
        });
    }
    // dimension count is the low byte of the magic
    let dims = (magic & 0xff) as usize;
    if dims != want_dims {
        return Err(IdxError::BadDimensions {
            path: display,
            dims,
        });
    }
    let mut sizes = Vec::with_capacity(dims);
    for d in 0..dims {
        sizes.push(read_be_u32(&bytes, 4 + 4 * d, &display)? as usize);
    }
    let header = 4 + 4 * dims;
    let need: usize = header + sizes.iter().product::<usize>();
    if bytes.len() < need {
        return Err(IdxError::Truncated {
            path: display,
            need,
            have: bytes.len(),
        });
    }
    Ok(RawIdx {
        dims: sizes,
        payload: bytes[header..need].to_vec(),
    })
}

/// Loads an images/labels IDX pair into a dataset with pixels in `[0, 1]`.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, IdxError> {
    let images = read_idx(images_path, IMAGE_MAGIC, 3)?;
    let labels = read_idx(labels_path, LABEL_MAGIC, 1)?;
    let (n, rows, cols) = (images.dims[0], images.dims[1], images.dims[2]);
    if n != labels.dims[0] {
        return Err(IdxError::CountMismatch {
            images: n,
            labels: labels.dims[0],
        });
    }
    let scaled: Vec<f32> = images.payload.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Dataset::new(scaled, labels.payload, rows, cols).expect("consistent idx payload"))
}

/// Writes a dataset back out as an IDX pair (used by tests to build
/// small fixture files).
pub fn write_mnist_idx(
    ds: &Dataset,
    images_path: &Path,
    labels_path: &Path,
) -> std::io::Result<()> {
    let n = ds.len() as u32;
    let mut img = Vec::with_capacity(16 + ds.images.len());
    img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&n.to_be_bytes());
    img.extend_from_slice(&(ds.rows as u32).to_be_bytes());
    img.extend_from_slice(&(ds.cols as u32).to_be_bytes());
    img.extend(
        ds.images
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    fs::write(images_path, img)?;

    let mut lab = Vec::with_capacity(8 + ds.labels.len());
    lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&n.to_be_bytes());
    lab.extend_from_slice(&ds.labels);
    fs::write(labels_path, lab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn tmp(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("cnorm-idx-{}-{name}", std::process::id()));
        p
    }

    #[test]
    fn round_trip_preserves_extreme_pixels() {
        let ds = Dataset::new(vec![1.0, 0.0, 0.5019608, 1.0], vec![3, 9], 1, 2).unwrap();
        let (ip, lp) = (tmp("rt-img"), tmp("rt-lab"));
        write_mnist_idx(&ds, &ip, &lp).unwrap();
        let back = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.labels, vec![3, 9]);
        assert_eq!(back.images[0], 1.0); // byte 255 -> 1.0
        assert_eq!(back.images[1], 0.0); // byte 0 -> 0.0
        let _ = std::fs::remove_file(ip);
        let _ = std::fs::remove_file(lp);
    }

    #[test]
    fn little_endian_magic_is_rejected() {
        let ip = tmp("le-img");
        let mut f = std::fs::File::create(&ip).unwrap();
        // 0x03080000: the image magic byte-swapped
        f.write_all(&[0x03, 0x08, 0x00, 0x00]).unwrap();
        f.write_all(&[0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 42])
            .unwrap();
        drop(f);
        let lp = tmp("le-lab");
        write_mnist_idx(
            &Dataset::new(vec![0.0], vec![1], 1, 1).unwrap(),
            tmp("le-x").as_path(),
            &lp,
        )
        .unwrap();
        let err = load_mnist_idx(&ip, &lp).unwrap_err();
        assert!(matches!(err, IdxError::WrongMagic { .. }), "{err}");
        let _ = std::fs::remove_file(ip);
        let _ = std::fs::remove_file(lp);
        let _ = std::fs::remove_file(tmp("le-x"));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let ds = Dataset::new(vec![0.5; 8], vec![1, 2], 2, 2).unwrap();
        let (ip, lp) = (tmp("tr-img"), tmp("tr-lab"));
        write_mnist_idx(&ds, &ip, &lp).unwrap();
        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_mnist_idx(&ip, &lp).unwrap_err();
        assert!(matches!(err, IdxError::Truncated { .. }), "{err}");
        let _ = std::fs::remove_file(ip);
        let _ = std::fs::remove_file(lp);
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let ds = Dataset::new(vec![0.5; 8], vec![1, 2], 2, 2).unwrap();
        let short = Dataset::new(vec![0.5; 4], vec![1], 2, 2).unwrap();
        let (ip, lp) = (tmp("cm-img"), tmp("cm-lab"));
        write_mnist_idx(&ds, &ip, tmp("cm-x").as_path()).unwrap();
        write_mnist_idx(&short, tmp("cm-y").as_path(), &lp).unwrap();
        let err = load_mnist_idx(&ip, &lp).unwrap_err();
        assert!(matches!(err, IdxError::CountMismatch { .. }), "{err}");
        for t in ["cm-img", "cm-lab", "cm-x", "cm-y"] {
            let _ = std::fs::remove_file(tmp(t));
        }
    }
}
