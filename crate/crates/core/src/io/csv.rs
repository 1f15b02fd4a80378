//! CSV exports. Column names are fixed:
//!
//! * ERF maps: `row,col,score`
//! * insertion curves: `target_id,method,step,r`
//! * method comparison: `method,layer,mean_auc,sd,win_rate,n_targets`
//!   (`layer` is `all` on the cross-layer row)
//! * non-locality scan: `layer,feature,sigma,flagged,n_firing_images`
//!   (`sigma` empty when the feature never fired), optionally preceded by an
//!   `instance` column
//! * per-target AUCs: `target_id,layer,method,auc`
//! * scan totals: `layer,scanned,flagged,never_fired`

use std::path::Path;

use crate::attribution::ErfMap;
use crate::error::{Error, Result};
use crate::eval::{ComparisonRow, CurveRecord, FeatureScan, LayerCount};

pub const ERF_COLUMNS: [&str; 3] = ["row", "col", "score"];
pub const CURVE_COLUMNS: [&str; 4] = ["target_id", "method", "step", "r"];
pub const COMPARISON_COLUMNS: [&str; 6] =
    ["method", "layer", "mean_auc", "sd", "win_rate", "n_targets"];
pub const NONLOCALITY_COLUMNS: [&str; 5] =
    ["layer", "feature", "sigma", "flagged", "n_firing_images"];
pub const AUC_COLUMNS: [&str; 4] = ["target_id", "layer", "method", "auc"];
pub const LAYER_COLUMNS: [&str; 4] = ["layer", "scanned", "flagged", "never_fired"];

fn write_rows(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_erf_csv(path: &Path, map: &ErfMap) -> Result<()> {
    let g = map.grid;
    let rows = map
        .scores
        .iter()
        .enumerate()
        .map(|(p, s)| vec![(p / g).to_string(), (p % g).to_string(), s.to_string()])
        .collect();
    write_rows(path, &ERF_COLUMNS, rows)
}

pub fn write_curves_csv(path: &Path, curves: &[CurveRecord]) -> Result<()> {
    let rows = curves
        .iter()
        .map(|c| vec![c.target_id.clone(), c.method.clone(), c.step.to_string(), c.r.to_string()])
        .collect();
    write_rows(path, &CURVE_COLUMNS, rows)
}

pub fn write_comparison_csv(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    let rows = rows
        .iter()
        .map(|r| {
            vec![
                r.method.clone(),
                r.layer.map_or_else(|| "all".into(), |l| l.to_string()),
                r.mean_auc.to_string(),
                r.sd.to_string(),
                r.win_rate.to_string(),
                r.n_targets.to_string(),
            ]
        })
        .collect();
    write_rows(path, &COMPARISON_COLUMNS, rows)
}

/// `instance` labels each row when the scan covers several instances.
pub fn write_nonlocality_csv(path: &Path, features: &[(Option<String>, FeatureScan)]) -> Result<()> {
    let with_instance = features.iter().any(|(i, _)| i.is_some());
    let mut header: Vec<&str> = Vec::new();
    if with_instance {
        header.push("instance");
    }
    header.extend(NONLOCALITY_COLUMNS);
    let rows = features
        .iter()
        .map(|(inst, f)| {
            let mut r = Vec::new();
            if with_instance {
                r.push(inst.clone().unwrap_or_default());
            }
            r.extend([
                f.layer.to_string(),
                f.feature.to_string(),
                f.sigma.map_or_else(String::new, |s| s.to_string()),
                f.flagged.to_string(),
                f.n_firing_images.to_string(),
            ]);
            r
        })
        .collect();
    write_rows(path, &header, rows)
}

/// `aucs` as stored in a comparison; `methods` names its AUC columns in order.
pub fn write_auc_csv(path: &Path, methods: &[String], aucs: &[(String, usize, Vec<f64>)]) -> Result<()> {
    let mut rows = Vec::new();
    for (id, layer, vals) in aucs {
        for (m, a) in methods.iter().zip(vals) {
            rows.push(vec![id.clone(), layer.to_string(), m.clone(), a.to_string()]);
        }
    }
    write_rows(path, &AUC_COLUMNS, rows)
}

pub fn write_layer_counts_csv(path: &Path, layers: &[LayerCount]) -> Result<()> {
    let rows = layers
        .iter()
        .map(|l| {
            vec![
                l.layer.to_string(),
                l.scanned.to_string(),
                l.flagged.to_string(),
                l.never_fired.to_string(),
            ]
        })
        .collect();
    write_rows(path, &LAYER_COLUMNS, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(path: &Path) -> Vec<String> {
        std::fs::read_to_string(path).unwrap().lines().map(String::from).collect()
    }

    #[test]
    fn comparison_marks_cross_layer_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let row = |layer| ComparisonRow {
            method: "ig".into(),
            layer,
            mean_auc: 0.5,
            sd: 0.0,
            win_rate: 1.0,
            n_targets: 3,
        };
        write_comparison_csv(&p, &[row(Some(2)), row(None)]).unwrap();
        assert_eq!(
            read(&p),
            [
                "method,layer,mean_auc,sd,win_rate,n_targets",
                "ig,2,0.5,0,1,3",
                "ig,all,0.5,0,1,3"
            ]
        );
    }

    #[test]
    fn never_fired_sigma_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.csv");
        let f = FeatureScan {
            layer: 1,
            feature: 4,
            sigma: None,
            flagged: false,
            n_firing_images: 0,
        };
        write_nonlocality_csv(&p, &[(None, f.clone())]).unwrap();
        assert_eq!(read(&p)[1], "1,4,,false,0");
        write_nonlocality_csv(&p, &[(Some("inst_000".into()), f)]).unwrap();
        assert_eq!(read(&p)[0], "instance,layer,feature,sigma,flagged,n_firing_images");
    }

    #[test]
    fn auc_rows_follow_method_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        let methods = vec!["activation".to_string(), "attnlrp".to_string()];
        write_auc_csv(&p, &methods, &[("t0".into(), 2, vec![0.25, 0.75])]).unwrap();
        assert_eq!(read(&p), ["target_id,layer,method,auc", "t0,2,activation,0.25", "t0,2,attnlrp,0.75"]);
    }
}
