use alloc::format;
use alloc::vec;

use crate::error::{Error, Result};

fn aligned(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("length mismatch: {a} predictions, {b} truths")));
    }
    Ok(())
}

/// Macro-averaged F1 over classes that occur in the predictions or the
/// truth. Frames with unknown truth are skipped.
pub fn f1_macro(predictions: &[usize], truths: &[Option<usize>], n_class: usize) -> Result<f64> {
    aligned(predictions.len(), truths.len())?;
    let mut tp = vec![0usize; n_class];
    let mut fp = vec![0usize; n_class];
    let mut fn_ = vec![0usize; n_class];
    for (&p, t) in predictions.iter().zip(truths) {
        let Some(t) = *t else { continue };
        if p >= n_class || t >= n_class {
            return Err(Error::invalid(format!("class index out of range for {n_class} classes")));
        }
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0usize;
    for k in 0..n_class {
        if tp[k] + fp[k] + fn_[k] == 0 {
            continue;
        }
        present += 1;
        sum += 2.0 * tp[k] as f64 / (2 * tp[k] + fp[k] + fn_[k]) as f64;
    }
    Ok(if present == 0 { 0.0 } else { sum / present as f64 })
}

/// Fraction of labeled frames predicted correctly.
pub fn accuracy(predictions: &[usize], truths: &[Option<usize>]) -> Result<f64> {
    aligned(predictions.len(), truths.len())?;
    let (mut hit, mut n) = (0usize, 0usize);
    for (&p, t) in predictions.iter().zip(truths) {
        if let Some(t) = *t {
            n += 1;
            hit += usize::from(p == t);
        }
    }
    Ok(if n == 0 { 0.0 } else { hit as f64 / n as f64 })
}

/// `sum over frames 1..=upto_frame, entities and dimensions of (forecast - truth)^2`.
/// Both trajectories are indexed `[frame][entity][dim]`.
pub fn accumulated_sq_error(
    forecast: &[alloc::vec::Vec<alloc::vec::Vec<f64>>],
    truth: &[alloc::vec::Vec<alloc::vec::Vec<f64>>],
    upto_frame: usize,
) -> Result<f64> {
    if upto_frame > forecast.len() || upto_frame > truth.len() {
        return Err(Error::invalid(format!(
            "upto_frame {upto_frame} exceeds the trajectory length"
        )));
    }
    let mut acc = 0.0;
    for (f, t) in forecast[..upto_frame].iter().zip(&truth[..upto_frame]) {
        aligned(f.len(), t.len())?;
        for (fe, te) in f.iter().zip(t) {
            aligned(fe.len(), te.len())?;
            acc += fe.iter().zip(te).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    #[test]
    fn perfect_predictions() {
        let t: Vec<Option<usize>> = vec![Some(0), Some(1), Some(2)];
        assert_eq!(f1_macro(&[0, 1, 2], &t, 3).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 2], &t).unwrap(), 1.0);
    }

    #[test]
    fn all_zero_predictions_on_balanced_truth() {
        let t = vec![Some(0), Some(0), Some(1), Some(1)];
        let f1 = f1_macro(&[0, 0, 0, 0], &t, 2).unwrap();
        assert!((f1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_and_unlabeled_frames_are_skipped() {
        let t = vec![Some(0), None, Some(1)];
        assert_eq!(f1_macro(&[0, 3, 1], &t, 5).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 3, 1], &t).unwrap(), 1.0);
        assert!(f1_macro(&[0], &t, 2).is_err());
    }

    #[test]
    fn accumulated_error_is_monotone() {
        let f = vec![vec![vec![1.0, 0.0]], vec![vec![2.0, 0.0]], vec![vec![0.0, 0.0]]];
        let t = vec![vec![vec![0.0, 0.0]]; 3];
        let errs: Vec<f64> = (0..=3).map(|k| accumulated_sq_error(&f, &t, k).unwrap()).collect();
        assert_eq!(errs, vec![0.0, 1.0, 5.0, 5.0]);
        assert_eq!(accumulated_sq_error(&t, &t, 3).unwrap(), 0.0);
        assert!(accumulated_sq_error(&f, &t, 4).is_err());
    }
}
