use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::classify::{EvalReport, Route};
use crate::error::{Error, Result};

/// One evaluated cell of an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub experiment: String,
    /// Target dataset the row was evaluated on (`balanced`, `imbalanced`, ...).
    pub split: String,
    /// Initialization arm or GAN source.
    pub arm: String,
    pub variant: String,
    pub seed: u64,
    /// Length of the per-video feature vector fed to the SVM (0 for softmax).
    pub feature_dim: usize,
    pub report: EvalReport,
    pub wall_time_seconds: f64,
}

impl ReportRow {
    pub fn route(&self) -> Route {
        self.report.route
    }

    pub fn accuracy(&self) -> f64 {
        self.report.accuracy
    }
}

fn max_classes(rows: &[ReportRow]) -> usize {
    rows.iter().map(|r| r.report.per_class.len()).max().unwrap_or(0)
}

/// `experiment,split,arm,variant,seed,route,feature_dim,accuracy,per_class_0..`.
/// Wall time is left out so that the file is reproducible.
pub fn report_csv(rows: &[ReportRow]) -> String {
    let k = max_classes(rows);
    let mut s = String::from("experiment,split,arm,variant,seed,route,feature_dim,accuracy");
    for i in 0..k {
        write!(s, ",per_class_{i}").unwrap();
    }
    s.push('\n');
    for r in rows {
        write!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.experiment,
            r.split,
            r.arm,
            r.variant,
            r.seed,
            r.route().name(),
            r.feature_dim,
            r.accuracy()
        )
        .unwrap();
        for i in 0..k {
            match r.report.per_class.get(i) {
                Some(v) => write!(s, ",{v}").unwrap(),
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}

/// One line per (row, true class): `...,route,true_class,pred_0..`.
pub fn confusion_csv(rows: &[ReportRow]) -> String {
    let k = max_classes(rows);
    let mut s = String::from("experiment,split,arm,variant,seed,route,true_class");
    for i in 0..k {
        write!(s, ",pred_{i}").unwrap();
    }
    s.push('\n');
    for r in rows {
        for (t, counts) in r.report.confusion.iter().enumerate() {
            write!(s, "{},{},{},{},{},{},{t}", r.experiment, r.split, r.arm, r.variant, r.seed, r.route().name()).unwrap();
            for i in 0..k {
                match counts.get(i) {
                    Some(c) => write!(s, ",{c}").unwrap(),
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
    }
    s
}

pub fn timings_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from("experiment,split,arm,variant,seed,route,wall_time_seconds\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{:.3}",
            r.experiment,
            r.split,
            r.arm,
            r.variant,
            r.seed,
            r.route().name(),
            r.wall_time_seconds
        )
        .unwrap();
    }
    s
}

/// Mean accuracy of each (split, arm, variant, route) over seeds.
pub fn mean_accuracies(rows: &[ReportRow]) -> BTreeMap<(String, String, String, Route), (f64, usize)> {
    let mut acc: BTreeMap<_, (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry((r.split.clone(), r.arm.clone(), r.variant.clone(), r.route())).or_default();
        e.0 += r.accuracy();
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (sum, n))| (k, (sum / n as f64, n))).collect()
}

pub fn summary_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from("split,arm,variant,route,seeds,mean_accuracy\n");
    for ((split, arm, variant, route), (mean, n)) in mean_accuracies(rows) {
        writeln!(s, "{split},{arm},{variant},{},{n},{mean}", route.name()).unwrap();
    }
    s
}

pub fn write_reports(rows: &[ReportRow], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, body) in [
        ("report.csv", report_csv(rows)),
        ("confusion.csv", confusion_csv(rows)),
        ("summary.csv", summary_csv(rows)),
        ("timings.csv", timings_csv(rows)),
    ] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
