use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::naps::NapMode;

use super::cost::ComplexityReport;
use super::metrics::{Bucket, ConfidenceBuckets, MetricsReport};

pub const METRICS_CSV: &str = "metrics.csv";
pub const COMPLEXITY_CSV: &str = "complexity.csv";
pub const CONFIDENCE_CSV: &str = "confidence_buckets.csv";
pub const CONFIDENCE_SUMMARY_CSV: &str = "confidence_summary.csv";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// `best` and `second` markers by descending AUROC; ties keep row order.
pub fn rank_flags(reports: &[MetricsReport]) -> Vec<&'static str> {
    let mut order: Vec<usize> = (0..reports.len())
        .filter(|&i| reports[i].auroc.is_some())
        .collect();
    order.sort_by(|&a, &b| {
        reports[b]
            .auroc
            .unwrap()
            .total_cmp(&reports[a].auroc.unwrap())
            .then(a.cmp(&b))
    });
    let mut flags = vec![""; reports.len()];
    for (rank, &i) in order.iter().take(2).enumerate() {
        flags[i] = if rank == 0 { "best" } else { "second" };
    }
    flags
}

/// Columns: `mode,rec_neg,rec_pos,auroc,n_samples,tp,fp,fn,tn,rank`.
pub fn metrics_csv(reports: &[MetricsReport]) -> String {
    let flags = rank_flags(reports);
    let mut s = String::from("mode,rec_neg,rec_pos,auroc,n_samples,tp,fp,fn,tn,rank\n");
    for (r, flag) in reports.iter().zip(flags) {
        let c = r.confusion;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.mode,
            opt(r.recall_neg),
            opt(r.recall_pos),
            opt(r.auroc),
            r.n_samples,
            c.tp,
            c.fp,
            c.fn_,
            c.tn,
            flag
        ));
    }
    s
}

/// Columns: `mode,input_shape,params,macs,flops,latency_mean_ms,latency_std_ms,iterations,warmup_excluded`.
/// `flops` is twice `macs`.
pub fn complexity_csv(reports: &[ComplexityReport]) -> String {
    let mut s = String::from("mode,input_shape,params,macs,flops,latency_mean_ms,latency_std_ms,iterations,warmup_excluded\n");
    for r in reports {
        let shape: Vec<String> = r.input_shape.iter().map(|d| d.to_string()).collect();
        s.push_str(&format!(
            "{},{},{},{},{},{:.4},{:.4},{},{}\n",
            r.mode,
            shape.join("x"),
            r.params,
            r.flops,
            2 * r.flops,
            r.latency_mean_ms,
            r.latency_std_ms,
            r.iterations,
            r.warmup_excluded
        ));
    }
    s
}

/// Columns: `mode,bucket,frame_id,confidence`, one row per verdict.
pub fn confidence_csv(buckets: &[(NapMode, ConfidenceBuckets)]) -> String {
    let mut s = String::from("mode,bucket,frame_id,confidence\n");
    for (mode, b) in buckets {
        for (bucket, frame, conf) in &b.entries {
            s.push_str(&format!("{mode},{},{frame},{conf:.6}\n", bucket.as_str()));
        }
    }
    s
}

/// Columns: `mode,bucket,count,mean,min,q1,median,q3,max`.
pub fn confidence_summary_csv(buckets: &[(NapMode, ConfidenceBuckets)]) -> String {
    let mut s = String::from("mode,bucket,count,mean,min,q1,median,q3,max\n");
    for (mode, b) in buckets {
        for bucket in Bucket::ALL {
            match b.summary(bucket) {
                Some(q) => s.push_str(&format!(
                    "{mode},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                    bucket.as_str(),
                    q.count,
                    q.mean,
                    q.min,
                    q.q1,
                    q.median,
                    q.q3,
                    q.max
                )),
                None => s.push_str(&format!("{mode},{},0,NA,NA,NA,NA,NA,NA\n", bucket.as_str())),
            }
        }
    }
    s
}

fn write(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes the CSV reports that have data; returns the written paths.
pub fn emit_report(
    metrics: &[MetricsReport],
    buckets: &[(NapMode, ConfidenceBuckets)],
    complexity: &[ComplexityReport],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if metrics.is_empty() && complexity.is_empty() {
        return Err(Error::Invalid("nothing to report".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::new();
    if !metrics.is_empty() {
        paths.push(write(out_dir, METRICS_CSV, &metrics_csv(metrics))?);
    }
    if !buckets.is_empty() {
        paths.push(write(out_dir, CONFIDENCE_CSV, &confidence_csv(buckets))?);
        paths.push(write(
            out_dir,
            CONFIDENCE_SUMMARY_CSV,
            &confidence_summary_csv(buckets),
        )?);
    }
    if !complexity.is_empty() {
        paths.push(write(out_dir, COMPLEXITY_CSV, &complexity_csv(complexity))?);
    }
    Ok(paths)
}
