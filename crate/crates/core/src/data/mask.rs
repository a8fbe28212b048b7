use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Sequence;
use crate::error::{Error, Result};
use crate::rng::{fnv1a, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Each observed frame is hidden independently with probability `fraction`.
    PerFrame,
    /// Only the final `k` frames of each recording keep their labels.
    TailOnly(usize),
    /// Whole runs of one label are hidden together with probability `fraction`.
    Interval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskLevel {
    Child,
    Parent,
    Both,
}

/// Hides labels deterministically per seed. Draws are keyed by recording id
/// and frame, so the result does not depend on dataset order. Labels are
/// never revealed.
pub fn mask_labels(
    dataset: &[Sequence],
    fraction: f64,
    seed: u64,
    mode: MaskMode,
    level: MaskLevel,
) -> Result<Vec<Sequence>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid("mask fraction must lie in [0, 1]"));
    }
    if mode == MaskMode::TailOnly(0) {
        return Err(Error::invalid("tail_only needs k >= 1"));
    }
    let mut out = Vec::with_capacity(dataset.len());
    for seq in dataset {
        let n = seq.len();
        let key = fnv1a(seq.id.as_bytes());
        let hide: Vec<bool> = match mode {
            MaskMode::PerFrame => (0..n)
                .map(|t| stream_rng(&[seed, key, t as u64]).random::<f64>() < fraction)
                .collect(),
            MaskMode::TailOnly(k) => (0..n).map(|t| t + k < n).collect(),
            MaskMode::Interval => {
                let mut hide = Vec::with_capacity(n);
                let mut run = 0u64;
                let mut current = false;
                for t in 0..n {
                    if t == 0 || seq.labels[t] != seq.labels[t - 1] {
                        current = stream_rng(&[seed, key, run]).random::<f64>() < fraction;
                        run += 1;
                    }
                    hide.push(current);
                }
                hide
            }
        };
        let mut s = seq.clone();
        let child = matches!(level, MaskLevel::Child | MaskLevel::Both);
        let parent = matches!(level, MaskLevel::Parent | MaskLevel::Both);
        let apply = |v: &mut Vec<Option<usize>>| {
            for (l, &h) in v.iter_mut().zip(&hide) {
                if h {
                    *l = None;
                }
            }
        };
        if child {
            apply(&mut s.labels);
        }
        if parent {
            apply(&mut s.parents);
        }
        for track in &mut s.entities {
            if child {
                track.labels.as_mut().map(apply);
            }
            if parent {
                track.parents.as_mut().map(apply);
            }
        }
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::vec;

    fn data() -> Vec<Sequence> {
        (0..10)
            .map(|i| {
                let labels = (0..40).map(|t| Some((t / 10) % 3)).collect();
                Sequence::single(format!("s{i}"), vec![vec![0.0]; 40], labels)
            })
            .collect()
    }

    fn observed(d: &[Sequence]) -> usize {
        d.iter().map(Sequence::observed_labels).sum()
    }

    #[test]
    fn zero_fraction_is_identity() {
        let d = data();
        assert_eq!(mask_labels(&d, 0.0, 1, MaskMode::PerFrame, MaskLevel::Both).unwrap(), d);
    }

    #[test]
    fn per_frame_hides_about_the_fraction_and_is_seeded() {
        let d = data();
        let a = mask_labels(&d, 0.25, 3, MaskMode::PerFrame, MaskLevel::Child).unwrap();
        let hidden = 400 - observed(&a);
        assert!((70..=130).contains(&hidden), "{hidden}");
        assert_eq!(a, mask_labels(&d, 0.25, 3, MaskMode::PerFrame, MaskLevel::Child).unwrap());
        assert_ne!(a, mask_labels(&d, 0.25, 4, MaskMode::PerFrame, MaskLevel::Child).unwrap());
    }

    #[test]
    fn tail_only_keeps_last_k() {
        let a = mask_labels(&data(), 0.0, 0, MaskMode::TailOnly(7), MaskLevel::Child).unwrap();
        for s in &a {
            assert_eq!(s.observed_labels(), 7);
            assert!(s.labels[33..].iter().all(Option::is_some));
        }
    }

    #[test]
    fn interval_hides_whole_runs() {
        let a = mask_labels(&data(), 0.5, 9, MaskMode::Interval, MaskLevel::Child).unwrap();
        for s in &a {
            for run in s.labels.chunks(10) {
                assert!(run.iter().all(Option::is_some) || run.iter().all(Option::is_none));
            }
        }
    }

    #[test]
    fn never_unmasks() {
        let d = data();
        let once = mask_labels(&d, 0.3, 1, MaskMode::PerFrame, MaskLevel::Child).unwrap();
        let twice = mask_labels(&once, 0.3, 2, MaskMode::Interval, MaskLevel::Child).unwrap();
        assert!(observed(&twice) <= observed(&once) && observed(&once) <= observed(&d));
        for (a, b) in once.iter().zip(&twice) {
            for (x, y) in a.labels.iter().zip(&b.labels) {
                assert!(x.is_some() || y.is_none());
            }
        }
    }

    #[test]
    fn bad_parameters_rejected() {
        assert!(mask_labels(&data(), 1.5, 0, MaskMode::PerFrame, MaskLevel::Child).is_err());
        assert!(mask_labels(&data(), 0.0, 0, MaskMode::TailOnly(0), MaskLevel::Child).is_err());
    }
}
