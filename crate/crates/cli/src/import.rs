//! Builds an error dataset from externally dumped activation bundles.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use introspect_core::detector::ActivationBundle;
use introspect_core::errorset::{
    assign_splits, write_dataset, ErrorDataset, ErrorRecord, SparsityStats, BUNDLES_DIR,
};
use introspect_core::naps::percentile_zeroing;
use introspect_core::store::MANIFEST_FILE;
use log::warn;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImportSummary {
    pub n_records: usize,
    /// Labels whose frame id matched no bundle.
    pub unknown_labels: usize,
    /// Bundles without a label.
    pub unlabelled_bundles: usize,
}

/// Reads every bundle directory under `dir` (each holding `ppc`, `mla` and
/// `lla`), joins them with `labels_file` (a JSON object mapping frame id to
/// 0 or 1) and writes a dataset under `out_dir`. Frame ids come from the
/// bundle's `frame_id` attribute or, failing that, its directory name.
/// Imported records carry no box counts, so `n_gt` and `n_missed` are 0.
pub fn import_external_bundles(
    dir: &Path,
    labels_file: &Path,
    ratios: [f64; 3],
    zeroing_percentile: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<(ErrorDataset, ImportSummary), CliError> {
    let text = fs::read_to_string(labels_file).map_err(|e| {
        CliError::Validation(format!("cannot read labels {}: {e}", labels_file.display()))
    })?;
    let labels: BTreeMap<String, u8> = serde_json::from_str(&text).map_err(|e| {
        CliError::Validation(format!(
            "labels {} must map frame ids to 0/1: {e}",
            labels_file.display()
        ))
    })?;
    if let Some((id, v)) = labels.iter().find(|(_, v)| **v > 1) {
        return Err(CliError::Validation(format!(
            "label for frame {id} is {v}, expected 0 or 1"
        )));
    }
    let mut dirs: Vec<_> = fs::read_dir(dir)
        .map_err(|e| {
            CliError::Validation(format!(
                "cannot read bundle directory {}: {e}",
                dir.display()
            ))
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Validation(format!(
            "no bundles found under {}",
            dir.display()
        )));
    }

    let mut shapes: Option<([Vec<usize>; 3], String)> = None;
    let mut seen = BTreeSet::new();
    let mut pending = Vec::new();
    let mut unlabelled = 0;
    let mut sparsity = SparsityStats {
        zeroing_percentile,
        ..SparsityStats::default()
    };
    for d in &dirs {
        let (bundle, _) =
            ActivationBundle::read(d).map_err(|e| CliError::Validation(e.to_string()))?;
        let id = bundle.frame_id.clone();
        match &shapes {
            None => shapes = Some((bundle.shapes(), id.clone())),
            Some((first, first_id)) => {
                let s = bundle.shapes();
                for (k, name) in ["ppc", "mla", "lla"].iter().enumerate() {
                    if s[k][0] != first[k][0] {
                        return Err(CliError::Validation(format!(
                            "frame {id}: `{name}` has {} channels but frame {first_id} has {}",
                            s[k][0], first[k][0]
                        )));
                    }
                    if s[k] != first[k] {
                        return Err(CliError::Validation(format!(
                            "frame {id}: `{name}` shape {:?} differs from {:?} in frame {first_id}",
                            s[k], first[k]
                        )));
                    }
                }
            }
        }
        if !bundle.all_finite() {
            return Err(CliError::Validation(format!(
                "frame {id}: non-finite activations"
            )));
        }
        if !seen.insert(id.clone()) {
            return Err(CliError::Validation(format!("frame id {id} appears twice")));
        }
        let Some(&label) = labels.get(&id) else {
            unlabelled += 1;
            continue;
        };
        let rel = format!("{BUNDLES_DIR}/{id}");
        bundle.write(
            &out_dir.join(&rel),
            BTreeMap::from([("label".to_string(), label.to_string())]),
        )?;
        let frac = |t: &introspect_nn::Tensor| {
            t.data().iter().filter(|v| **v != 0.0).count() as f64 / t.numel() as f64
        };
        sparsity.ppc_nonzero += frac(&bundle.ppc);
        sparsity.mla_nonzero += frac(&bundle.mla);
        sparsity.lla_nonzero += frac(&bundle.lla);
        sparsity.lla_zeroing_changed += percentile_zeroing(&bundle.lla, zeroing_percentile)?.1;
        pending.push((id, rel, label));
    }
    let unknown = labels.keys().filter(|k| !seen.contains(*k)).count();
    if unknown > 0 {
        warn!("{unknown} labels name frames without a bundle; skipped");
    }
    if unlabelled > 0 {
        warn!("{unlabelled} bundles have no label; skipped");
    }
    if pending.is_empty() {
        return Err(CliError::Validation("no bundle has a label".into()));
    }
    let n = pending.len() as f64;
    sparsity.ppc_nonzero /= n;
    sparsity.mla_nonzero /= n;
    sparsity.lla_nonzero /= n;
    sparsity.lla_zeroing_changed /= n;
    let ids: Vec<String> = pending.iter().map(|p| p.0.clone()).collect();
    let splits = assign_splits(&ids, ratios, seed)?;
    let mut records: Vec<ErrorRecord> = pending
        .into_iter()
        .zip(splits)
        .map(|((frame_id, bundle_path, label), split)| ErrorRecord {
            frame_id,
            bundle_path,
            label,
            n_gt: 0,
            n_missed: 0,
            split,
        })
        .collect();
    records.sort_by(|a, b| a.frame_id.cmp(&b.frame_id));
    let dataset = ErrorDataset {
        root: out_dir.to_path_buf(),
        records,
    };
    write_dataset(&dataset, 0, sparsity)?;
    let summary = ImportSummary {
        n_records: dataset.records.len(),
        unknown_labels: unknown,
        unlabelled_bundles: unlabelled,
    };
    Ok((dataset, summary))
}
