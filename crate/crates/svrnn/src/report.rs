//! CSV and plain-text renderings of results.

use std::fmt::Write as _;

use svrnn_core::tasks::{LabelTimeline, TrajectoryForecast};
use svrnn_core::trainer::Report;

pub fn report_csv(report: &Report) -> String {
    let mut s = String::from("task,metric,mean,std,repeats,values\n");
    for m in &report.metrics {
        let values: Vec<String> = m.values.iter().map(|v| v.to_string()).collect();
        writeln!(
            s,
            "{},{},{},{},{},{}",
            m.task.name(),
            m.name,
            m.mean(),
            m.std_dev(),
            m.values.len(),
            values.join(";")
        )
        .unwrap();
    }
    s
}

pub fn report_text(report: &Report) -> String {
    let mut s = String::new();
    for m in &report.metrics {
        writeln!(s, "{:<11} {:<21} {:>12.6} ± {:.6} (n={})", m.task.name(), m.name, m.mean(), m.std_dev(), m.values.len()).unwrap();
    }
    s
}

/// Header for [`timeline_rows`] with `n_class` probability columns.
pub fn timeline_header(n_class: usize) -> String {
    let mut s = String::from("recording,t,predicted,label_hidden");
    for k in 0..n_class {
        write!(s, ",p{k}").unwrap();
    }
    s.push('\n');
    s
}

pub fn timeline_rows(id: &str, timeline: &LabelTimeline) -> String {
    let mut s = String::new();
    for (t, (k, b)) in timeline.predicted.iter().zip(&timeline.beliefs).enumerate() {
        write!(s, "{id},{t},{k},{}", timeline.unobserved[t]).unwrap();
        for p in b {
            write!(s, ",{p}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Long-format CSV of a forecast mean: one row per frame, entity and
/// coordinate.
pub fn forecast_csv(id: &str, f: &TrajectoryForecast) -> String {
    let mut s = String::new();
    for (k, frame) in f.mean.iter().enumerate() {
        for (e, x) in frame.iter().enumerate() {
            for (d, v) in x.iter().enumerate() {
                writeln!(s, "{id},{},{e},{d},{v}", k + 1).unwrap();
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use svrnn_core::trainer::{Metric, Task};

    #[test]
    fn report_rows() {
        let r = Report {
            metrics: vec![Metric {
                task: Task::Detect,
                name: "accuracy".into(),
                values: vec![0.5, 0.75],
            }],
        };
        assert_eq!(report_csv(&r), "task,metric,mean,std,repeats,values\ndetect,accuracy,0.625,0.125,2,0.5;0.75\n");
        assert_eq!(report_csv(&Report::default()).lines().count(), 1);
        assert!(report_text(&r).contains("0.625000"));
    }

    #[test]
    fn timeline_lines() {
        let tl = LabelTimeline {
            predicted: vec![1],
            beliefs: vec![vec![0.25, 0.75]],
            unobserved: vec![true],
        };
        assert_eq!(timeline_header(2), "recording,t,predicted,label_hidden,p0,p1\n");
        assert_eq!(timeline_rows("a", &tl), "a,0,1,true,0.25,0.75\n");
    }
}
