//! Representative selection: per class, keep the samples whose features
//! sit closest (MSE) to the class's mean feature.

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SelectionResult {
    /// Selected sample indices, ascending.
    pub indices: Vec<usize>,
    /// True when some class had fewer than `m` samples (all were kept).
    pub truncated: bool,
}

/// For each class: compute the mean feature, rank samples by squared
/// distance to it (MSE over feature dims), keep the `m` closest. Ties
/// break toward the smaller sample index.
pub fn select_representatives(features: &Tensor<f32>, labels: &[u32], m: usize) -> SelectionResult {
    assert_eq!(features.dim(0), labels.len());
    assert!(m >= 1, "retention count m must be >= 1");
    let d = features.dim(1);
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();

    let mut selected = Vec::new();
    let mut truncated = false;
    for class in classes {
        let members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        let mut mean = vec![0.0f64; d];
        for &i in &members {
            for (acc, &v) in mean.iter_mut().zip(&features.data()[i * d..(i + 1) * d]) {
                *acc += v as f64;
            }
        }
        for v in &mut mean {
            *v /= members.len() as f64;
        }
        let mut ranked: Vec<(f64, usize)> = members
            .iter()
            .map(|&i| (class_distance(&features.data()[i * d..(i + 1) * d], &mean), i))
            .collect();
        ranked.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if m > ranked.len() {
            truncated = true;
        }
        selected.extend(ranked.iter().take(m).map(|&(_, i)| i));
    }
    selected.sort_unstable();
    SelectionResult {
        indices: selected,
        truncated,
    }
}

/// Per-class ranking (distance-ascending, index tiebreak) without
/// truncation; used for budget-driven retention.
pub fn rank_by_representativeness(
    features: &Tensor<f32>,
    labels: &[u32],
) -> Vec<(u32, Vec<usize>)> {
    let d = features.dim(1);
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    classes
        .into_iter()
        .map(|class| {
            let members: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == class)
                .map(|(i, _)| i)
                .collect();
            let mut mean = vec![0.0f64; d];
            for &i in &members {
                for (acc, &v) in mean.iter_mut().zip(&features.data()[i * d..(i + 1) * d]) {
                    *acc += v as f64;
                }
            }
            for v in &mut mean {
                *v /= members.len() as f64;
            }
            let mut ranked: Vec<(f64, usize)> = members
                .iter()
                .map(|&i| (class_distance(&features.data()[i * d..(i + 1) * d], &mean), i))
                .collect();
            ranked.sort_by(|a, b| a.partial_cmp(b).unwrap());
            (class, ranked.into_iter().map(|(_, i)| i).collect())
        })
        .collect()
}

/// MSE between one feature row and a class mean (f64).
pub fn class_distance(feature: &[f32], mean: &[f64]) -> f64 {
    let mut acc = 0.0f64;
    for (&f, &m) in feature.iter().zip(mean) {
        let diff = f as f64 - m;
        acc += diff * diff;
    }
    acc / feature.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dim_example() {
        // features (0, 1, 10): mean 11/3; closest is value 1 (index 1)
        let f = Tensor::from_vec(&[3, 1], vec![0.0, 1.0, 10.0]);
        let res = select_representatives(&f, &[0, 0, 0], 1);
        assert_eq!(res.indices, vec![1]);
        assert!(!res.truncated);
    }

    #[test]
    fn ties_break_by_index() {
        let f = Tensor::from_vec(&[4, 2], vec![0.5; 8]);
        let res = select_representatives(&f, &[0, 0, 0, 0], 2);
        assert_eq!(res.indices, vec![0, 1]);
    }

    #[test]
    fn m_at_class_size_selects_all_and_larger_warns() {
        let f = Tensor::from_vec(&[3, 1], vec![0.0, 1.0, 2.0]);
        let res = select_representatives(&f, &[0, 0, 0], 3);
        assert_eq!(res.indices, vec![0, 1, 2]);
        assert!(!res.truncated);
        let res = select_representatives(&f, &[0, 0, 0], 5);
        assert_eq!(res.indices, vec![0, 1, 2]);
        assert!(res.truncated);
    }

    #[test]
    fn per_class_selection() {
        let f = Tensor::from_vec(&[6, 1], vec![0.0, 4.0, 2.0, 10.0, 20.0, 12.0]);
        let labels = [0, 0, 0, 1, 1, 1];
        // class 0: mean 2 -> closest index 2; class 1: mean 14 -> closest 5
        let res = select_representatives(&f, &labels, 1);
        assert_eq!(res.indices, vec![2, 5]);
    }
}
