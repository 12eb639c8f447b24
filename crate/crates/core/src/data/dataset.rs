//! In-memory dataset with a read-access counter.
//!
//! The counter backs the raw-data-isolation protocol check: once a task is
//! memorized, nothing may touch its raw pixels again, and tests assert the
//! counter stays flat. Only pixel accessors count; label/metadata reads do
//! not.

use crate::tensor::Tensor;
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug)]
pub struct DatasetHandle {
    images: Vec<f32>, // N * 3 * H * W, values in [0, 1]
    labels: Vec<u32>,
    h: usize,
    w: usize,
    reads: AtomicU64,
}

impl DatasetHandle {
    pub fn new(images: Vec<f32>, labels: Vec<u32>, h: usize, w: usize) -> Result<Self> {
        let per_image = 3 * h * w;
        if per_image == 0 || images.len() != labels.len() * per_image {
            return Err(Error::Input(format!(
                "image buffer {} does not match {} labels at 3x{h}x{w}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(DatasetHandle {
            images,
            labels,
            h,
            w,
            reads: AtomicU64::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// One sample as a (3, H, W) tensor. Counts as a raw read.
    pub fn image(&self, i: usize) -> Tensor<f32> {
        self.reads.fetch_add(1, Ordering::Relaxed);
        let per = 3 * self.h * self.w;
        Tensor::from_vec(
            &[3, self.h, self.w],
            self.images[i * per..(i + 1) * per].to_vec(),
        )
    }

    /// A batch as a (B, 3, H, W) tensor plus labels. Counts B raw reads.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<u32>) {
        self.reads.fetch_add(indices.len() as u64, Ordering::Relaxed);
        let per = 3 * self.h * self.w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        (
            Tensor::from_vec(&[indices.len(), 3, self.h, self.w], data),
            labels,
        )
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Monotone count of raw pixel reads.
    pub fn read_count(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn classes(&self) -> Vec<u32> {
        let mut cs: Vec<u32> = self.labels.clone();
        cs.sort_unstable();
        cs.dedup();
        cs
    }

    pub fn class_counts(&self) -> BTreeMap<u32, usize> {
        let mut m = BTreeMap::new();
        for &l in &self.labels {
            *m.entry(l).or_insert(0) += 1;
        }
        m
    }

    /// Indices of all samples with a label in `classes`.
    pub fn indices_of_classes(&self, classes: &[u32]) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| classes.contains(l))
            .map(|(i, _)| i)
            .collect()
    }

    /// New handle holding copies of the selected samples. Setup-time
    /// operation: does not touch the read counter.
    pub fn subset(&self, indices: &[usize]) -> DatasetHandle {
        let per = 3 * self.h * self.w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        DatasetHandle {
            images: data,
            labels,
            h: self.h,
            w: self.w,
            reads: AtomicU64::new(0),
        }
    }

    /// Raw bytes one sample would occupy stored as u8 RGB (replay budget
    /// accounting).
    pub fn raw_bytes_per_image(&self) -> u64 {
        (3 * self.h * self.w) as u64
    }
}
