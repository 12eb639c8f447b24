//! Dataset ingestion and the instrumented dataset handle.

mod dataset;
mod flatbin;
mod idx;
mod synth;

pub use dataset::DatasetHandle;
pub use flatbin::{read_flat_tensor, write_flat_tensor, FlatDtype, FlatTensor};
pub use idx::{
    read_idx_images, read_idx_labels, write_idx_images, write_idx_labels, IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
};
pub use synth::{generate_shapes10, SHAPES10_CLASSES};

use crate::{Error, Result};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    Idx,
    FlatBinary,
}

/// Load an image/label pair into a handle: grayscale is replicated to 3
/// channels, u8 pixels are scaled to [0, 1].
pub fn load_dataset(
    images_path: &Path,
    labels_path: &Path,
    format: DataFormat,
) -> Result<DatasetHandle> {
    match format {
        DataFormat::Idx => {
            let (pixels, n, h, w) = read_idx_images(images_path)?;
            let labels = read_idx_labels(labels_path)?;
            if labels.len() != n {
                return Err(Error::Input(format!(
                    "{n} images but {} labels",
                    labels.len()
                )));
            }
            let images = replicate_gray_u8(&pixels, n, h, w);
            DatasetHandle::new(images, labels.iter().map(|&l| l as u32).collect(), h, w)
        }
        DataFormat::FlatBinary => {
            let img = read_flat_tensor(images_path)?;
            let lab = read_flat_tensor(labels_path)?;
            let labels: Vec<u32> = match lab.dtype {
                FlatDtype::U8 => lab.data_u8().iter().map(|&v| v as u32).collect(),
                FlatDtype::U32 => lab.data_u32(),
                FlatDtype::F32 => {
                    return Err(Error::Input("labels must be u8 or u32".into()));
                }
            };
            let (images, n, h, w) = match img.dims.len() {
                3 => {
                    let (n, h, w) = (img.dims[0], img.dims[1], img.dims[2]);
                    let gray: Vec<f32> = match img.dtype {
                        FlatDtype::U8 => img.data_u8().iter().map(|&v| v as f32 / 255.0).collect(),
                        FlatDtype::F32 => img.data_f32(),
                        FlatDtype::U32 => {
                            return Err(Error::Input("u32 image tensors are not supported".into()))
                        }
                    };
                    let mut rgb = Vec::with_capacity(n * 3 * h * w);
                    for i in 0..n {
                        let plane = &gray[i * h * w..(i + 1) * h * w];
                        for _ in 0..3 {
                            rgb.extend_from_slice(plane);
                        }
                    }
                    (rgb, n, h, w)
                }
                4 => {
                    if img.dims[1] != 3 {
                        return Err(Error::Input(format!(
                            "expected 3 channels, found {}",
                            img.dims[1]
                        )));
                    }
                    let (n, h, w) = (img.dims[0], img.dims[2], img.dims[3]);
                    let data: Vec<f32> = match img.dtype {
                        FlatDtype::U8 => img.data_u8().iter().map(|&v| v as f32 / 255.0).collect(),
                        FlatDtype::F32 => img.data_f32(),
                        FlatDtype::U32 => {
                            return Err(Error::Input("u32 image tensors are not supported".into()))
                        }
                    };
                    (data, n, h, w)
                }
                d => {
                    return Err(Error::Input(format!(
                        "image tensor must be (N,H,W) or (N,3,H,W), found {d} dims"
                    )))
                }
            };
            if labels.len() != n {
                return Err(Error::Input(format!(
                    "{n} images but {} labels",
                    labels.len()
                )));
            }
            DatasetHandle::new(images, labels, h, w)
        }
    }
}

fn replicate_gray_u8(pixels: &[u8], n: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * 3 * h * w);
    for i in 0..n {
        let plane = &pixels[i * h * w..(i + 1) * h * w];
        for _ in 0..3 {
            out.extend(plane.iter().map(|&v| v as f32 / 255.0));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn idx_loading_replicates_gray_to_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("imgs.idx");
        let lab_path = dir.path().join("labels.idx");
        let pixels: Vec<u8> = (0..3 * 28 * 28).map(|i| (i % 251) as u8).collect();
        write_idx_images(&img_path, &pixels, 3, 28, 28).unwrap();
        write_idx_labels(&lab_path, &[0, 1, 2]).unwrap();

        let ds = load_dataset(&img_path, &lab_path, DataFormat::Idx).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!((ds.height(), ds.width()), (28, 28));
        let img = ds.image(0);
        assert_eq!(img.shape(), &[3, 28, 28]);
        // channels replicated
        let d = img.data();
        assert_eq!(&d[..28 * 28], &d[28 * 28..2 * 28 * 28]);
        assert!((d[1] - 1.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn bad_magic_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.idx");
        std::fs::File::create(&p)
            .unwrap()
            .write_all(&[9, 9, 9, 9, 0, 0])
            .unwrap();
        let err = read_idx_images(&p).unwrap_err();
        match err {
            Error::Ingestion { offset, .. } => assert_eq!(offset, 0),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
