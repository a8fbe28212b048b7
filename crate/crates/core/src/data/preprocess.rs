use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::Sequence;
use crate::error::{Error, Result};

/// Subtract one joint's coordinates from every joint of each frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RootCentering {
    /// Index of the root joint (hip center for the usual skeleton layouts).
    pub joint: usize,
    /// Coordinates per joint.
    pub coords: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessOptions {
    pub center_root: Option<RootCentering>,
    /// Width of the centered moving average; 1 disables smoothing.
    pub smooth_window: usize,
    /// Replace each frame with its difference to the previous one.
    pub residuals: bool,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            center_root: None,
            smooth_window: 3,
            residuals: false,
        }
    }
}

/// Root-centering, then smoothing, then residual conversion, applied to every
/// entity track.
pub fn preprocess(seq: &Sequence, opts: &PreprocessOptions) -> Result<Sequence> {
    if opts.smooth_window == 0 || opts.smooth_window.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "smooth_window must be odd and >= 1, got {}",
            opts.smooth_window
        )));
    }
    let mut out = seq.clone();
    for track in &mut out.entities {
        if let Some(root) = opts.center_root {
            let dim = track.dim();
            if root.coords == 0 || dim % root.coords != 0 || (root.joint + 1) * root.coords > dim {
                return Err(Error::invalid(format!(
                    "root joint {} with {} coordinates does not fit frames of width {dim}",
                    root.joint, root.coords
                )));
            }
            for f in &mut track.frames {
                let origin: Vec<f64> = f[root.joint * root.coords..(root.joint + 1) * root.coords].to_vec();
                for (i, v) in f.iter_mut().enumerate() {
                    *v -= origin[i % root.coords];
                }
            }
        }
        if opts.smooth_window > 1 {
            let half = opts.smooth_window / 2;
            let src = track.frames.clone();
            let n = src.len();
            for (t, f) in track.frames.iter_mut().enumerate() {
                let lo = t.saturating_sub(half);
                let hi = (t + half + 1).min(n);
                for (d, v) in f.iter_mut().enumerate() {
                    *v = src[lo..hi].iter().map(|g| g[d]).sum::<f64>() / (hi - lo) as f64;
                }
            }
        }
        if opts.residuals {
            for t in (1..track.frames.len()).rev() {
                let (head, tail) = track.frames.split_at_mut(t);
                for (v, p) in tail[0].iter_mut().zip(&head[t - 1]) {
                    *v -= p;
                }
            }
            if let Some(first) = track.frames.first_mut() {
                first.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    Ok(out)
}

/// Inverts residual conversion given each entity's original first frame.
pub fn integrate_residuals(seq: &Sequence, first_frames: &[Vec<f64>]) -> Result<Sequence> {
    if first_frames.len() != seq.entities.len() {
        return Err(Error::invalid("one first frame per entity is required"));
    }
    let mut out = seq.clone();
    for (track, first) in out.entities.iter_mut().zip(first_frames) {
        let mut acc = first.clone();
        for (t, f) in track.frames.iter_mut().enumerate() {
            if f.len() != acc.len() {
                return Err(Error::invalid("first frame width does not match the track"));
            }
            if t > 0 {
                for (a, v) in acc.iter_mut().zip(f.iter()) {
                    *a += v;
                }
            }
            f.copy_from_slice(&acc);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn seq(frames: Vec<Vec<f64>>) -> Sequence {
        let n = frames.len();
        Sequence::single("p", frames, vec![None; n])
    }

    fn plain() -> PreprocessOptions {
        PreprocessOptions {
            center_root: None,
            smooth_window: 1,
            residuals: false,
        }
    }

    #[test]
    fn constant_sequence_has_zero_residuals() {
        let s = seq(vec![vec![1.0, 2.0]; 4]);
        let r = preprocess(&s, &PreprocessOptions { residuals: true, ..plain() }).unwrap();
        assert!(r.entities[0].frames.iter().all(|f| f == &vec![0.0, 0.0]));
    }

    #[test]
    fn window_one_is_identity() {
        let s = seq(vec![vec![1.0], vec![5.0], vec![-2.0]]);
        assert_eq!(preprocess(&s, &plain()).unwrap(), s);
    }

    #[test]
    fn smoothing_truncates_at_edges() {
        let s = seq(vec![vec![0.0], vec![3.0], vec![6.0], vec![0.0]]);
        let r = preprocess(&s, &PreprocessOptions { smooth_window: 3, ..plain() }).unwrap();
        let got: Vec<f64> = r.entities[0].frames.iter().map(|f| f[0]).collect();
        assert_eq!(got, vec![1.5, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn even_window_rejected() {
        let s = seq(vec![vec![0.0]]);
        assert!(preprocess(&s, &PreprocessOptions { smooth_window: 2, ..plain() }).is_err());
    }

    #[test]
    fn centering_at_origin_root_is_identity_and_other_roots_shift() {
        let s = seq(vec![vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]]);
        let c = |joint| PreprocessOptions {
            center_root: Some(RootCentering { joint, coords: 3 }),
            ..plain()
        };
        assert_eq!(preprocess(&s, &c(0)).unwrap(), s);
        let r = preprocess(&s, &c(1)).unwrap();
        assert_eq!(r.entities[0].frames[0], vec![-1.0, -2.0, -3.0, 0.0, 0.0, 0.0]);
        assert!(preprocess(&s, &c(2)).is_err());
    }

    proptest! {
        #[test]
        fn residuals_integrate_back(frames in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 1..20)) {
            let s = seq(frames.clone());
            let r = preprocess(&s, &PreprocessOptions { residuals: true, ..plain() }).unwrap();
            let back = integrate_residuals(&r, &[frames[0].clone()]).unwrap();
            for (a, b) in back.entities[0].frames.iter().flatten().zip(frames.iter().flatten()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
