//! Overlap metrics and the WT/TC/ET region compositions used for evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{CunetError, Result};
use crate::volume::Volume;

/// The three nested evaluation regions derived from a raw label map:
/// whole tumor {1, 2, 4}, tumor core {1, 4}, enhancing tumor {4}.
#[derive(Debug, Clone)]
pub struct RegionMasks {
    pub wt: Volume<bool>,
    pub tc: Volume<bool>,
    pub et: Volume<bool>,
}

/// Build the WT/TC/ET masks from a raw label volume over {0, 1, 2, 4}.
pub fn compose_regions(labels: &Volume<u8>) -> Result<RegionMasks> {
    let dims = labels.dims();
    let mut wt = Volume::new(dims, false);
    let mut tc = Volume::new(dims, false);
    let mut et = Volume::new(dims, false);
    for (i, &v) in labels.data().iter().enumerate() {
        match v {
            0 => {}
            1 => {
                wt.data_mut()[i] = true;
                tc.data_mut()[i] = true;
            }
            2 => {
                wt.data_mut()[i] = true;
            }
            4 => {
                wt.data_mut()[i] = true;
                tc.data_mut()[i] = true;
                et.data_mut()[i] = true;
            }
            other => return Err(CunetError::InvalidLabel { value: other, index: i }),
        }
    }
    Ok(RegionMasks { wt, tc, et })
}

fn check_same_dims(op: &'static str, a: [usize; 3], b: [usize; 3]) -> Result<()> {
    if a != b {
        return Err(CunetError::ShapeMismatch {
            op,
            detail: format!("{a:?} vs {b:?}"),
        });
    }
    Ok(())
}

/// Dice overlap 2|A∩B| / (|A| + |B|). Two empty masks score 1.0.
pub fn dice_score(pred: &Volume<bool>, truth: &Volume<bool>) -> Result<f64> {
    check_same_dims("dice_score", pred.dims(), truth.dims())?;
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&a, &b) in pred.data().iter().zip(truth.data()) {
        inter += (a && b) as usize;
        total += a as usize + b as usize;
    }
    if total == 0 {
        Ok(1.0)
    } else {
        Ok(2.0 * inter as f64 / total as f64)
    }
}

fn confusion(pred: &Volume<bool>, truth: &Volume<bool>) -> (usize, usize, usize, usize) {
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    let mut tn = 0;
    for (&a, &b) in pred.data().iter().zip(truth.data()) {
        match (a, b) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    (tp, fp, fn_, tn)
}

/// TP / (TP + FN); an empty denominator scores 1.0 by convention.
pub fn sensitivity(pred: &Volume<bool>, truth: &Volume<bool>) -> Result<f64> {
    check_same_dims("sensitivity", pred.dims(), truth.dims())?;
    let (tp, _, fn_, _) = confusion(pred, truth);
    if tp + fn_ == 0 {
        Ok(1.0)
    } else {
        Ok(tp as f64 / (tp + fn_) as f64)
    }
}

/// TN / (TN + FP); an empty denominator scores 1.0 by convention.
pub fn specificity(pred: &Volume<bool>, truth: &Volume<bool>) -> Result<f64> {
    check_same_dims("specificity", pred.dims(), truth.dims())?;
    let (_, fp, _, tn) = confusion(pred, truth);
    if tn + fp == 0 {
        Ok(1.0)
    } else {
        Ok(tn as f64 / (tn + fp) as f64)
    }
}

/// Per-region scores of one prediction.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RegionScores {
    pub dsc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Where a report came from; filled in by the inference pipeline.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct Provenance {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fold: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub postprocessed: Option<bool>,
}

/// Evaluation result: DSC / sensitivity / specificity per region, the mean
/// DSC over the three regions, plus flags for degenerate cases (for example
/// `et_empty_region` when a region is empty in both volumes).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub wt: RegionScores,
    pub tc: RegionScores,
    pub et: RegionScores,
    pub mean_dsc: f64,
    pub flags: Vec<String>,
    #[serde(default, skip_serializing_if = "is_default_provenance")]
    pub provenance: Provenance,
}

fn is_default_provenance(p: &Provenance) -> bool {
    *p == Provenance::default()
}

fn region_scores(
    name: &str,
    pred: &Volume<bool>,
    truth: &Volume<bool>,
    flags: &mut Vec<String>,
) -> Result<RegionScores> {
    let any_pred = pred.data().iter().any(|&v| v);
    let any_truth = truth.data().iter().any(|&v| v);
    if !any_pred && !any_truth {
        flags.push(format!("{name}_empty_region"));
    }
    if !any_truth && any_pred {
        flags.push(format!("{name}_sensitivity_undefined"));
    }
    Ok(RegionScores {
        dsc: dice_score(pred, truth)?,
        sensitivity: sensitivity(pred, truth)?,
        specificity: specificity(pred, truth)?,
    })
}

/// Score a predicted label volume against the truth over the three regions.
pub fn evaluate(pred_labels: &Volume<u8>, truth_labels: &Volume<u8>) -> Result<EvalReport> {
    check_same_dims("evaluate", pred_labels.dims(), truth_labels.dims())?;
    let pred = compose_regions(pred_labels)?;
    let truth = compose_regions(truth_labels)?;
    let mut flags = Vec::new();
    let wt = region_scores("wt", &pred.wt, &truth.wt, &mut flags)?;
    let tc = region_scores("tc", &pred.tc, &truth.tc, &mut flags)?;
    let et = region_scores("et", &pred.et, &truth.et, &mut flags)?;
    let mean_dsc = (wt.dsc + tc.dsc + et.dsc) / 3.0;
    Ok(EvalReport {
        wt,
        tc,
        et,
        mean_dsc,
        flags,
        provenance: Provenance::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels_from(dims: [usize; 3], vals: &[u8]) -> Volume<u8> {
        Volume::from_vec(dims, vals.to_vec()).unwrap()
    }

    #[test]
    fn region_composition_per_label() {
        let l = labels_from([1, 1, 4], &[0, 1, 2, 4]);
        let r = compose_regions(&l).unwrap();
        // label 0 -> nothing, 1 -> WT+TC, 2 -> WT only, 4 -> all three.
        assert_eq!(r.wt.data(), &[false, true, true, true]);
        assert_eq!(r.tc.data(), &[false, true, false, true]);
        assert_eq!(r.et.data(), &[false, false, false, true]);
    }

    #[test]
    fn region_composition_rejects_invalid_label() {
        let l = labels_from([1, 1, 2], &[0, 3]);
        let err = compose_regions(&l).unwrap_err();
        assert!(matches!(err, CunetError::InvalidLabel { value: 3, index: 1 }));
    }

    #[test]
    fn dice_closed_forms() {
        let dims = [2, 2, 4];
        let a = Volume::from_vec(dims, vec![true; 16]).unwrap();
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);

        // |A| = |B| = 8 with 4 overlapping -> 2*4/16 = 0.5.
        let mut x = Volume::new(dims, false);
        let mut y = Volume::new(dims, false);
        for i in 0..8 {
            x.data_mut()[i] = true;
        }
        for i in 4..12 {
            y.data_mut()[i] = true;
        }
        assert_eq!(dice_score(&x, &y).unwrap(), 0.5);

        let empty = Volume::new(dims, false);
        assert_eq!(dice_score(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn sensitivity_specificity_closed_forms() {
        let dims = [1, 1, 8];
        let truth = Volume::from_vec(
            dims,
            vec![true, true, true, true, false, false, false, false],
        )
        .unwrap();
        let all = Volume::from_vec(dims, vec![true; 8]).unwrap();
        assert_eq!(sensitivity(&all, &truth).unwrap(), 1.0);
        assert_eq!(specificity(&all, &truth).unwrap(), 0.0);
        assert_eq!(sensitivity(&truth, &truth).unwrap(), 1.0);
        assert_eq!(specificity(&truth, &truth).unwrap(), 1.0);
    }

    #[test]
    fn evaluate_identity_is_all_ones() {
        let l = labels_from([1, 2, 4], &[0, 1, 2, 4, 4, 2, 1, 0]);
        let r = evaluate(&l, &l).unwrap();
        for s in [&r.wt, &r.tc, &r.et] {
            assert_eq!(s.dsc, 1.0);
            assert_eq!(s.sensitivity, 1.0);
            assert_eq!(s.specificity, 1.0);
        }
        assert_eq!(r.mean_dsc, 1.0);
        assert!(r.flags.is_empty());
    }

    #[test]
    fn empty_region_is_flagged_and_scores_one() {
        // No ET voxels anywhere: ET dice 1.0 with an explicit flag.
        let l = labels_from([1, 1, 4], &[0, 1, 2, 0]);
        let r = evaluate(&l, &l).unwrap();
        assert_eq!(r.et.dsc, 1.0);
        assert!(r.flags.contains(&"et_empty_region".to_string()));
    }

    #[test]
    fn report_serializes_with_fixed_keys() {
        let l = labels_from([1, 1, 2], &[0, 4]);
        let r = evaluate(&l, &l).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        for region in ["wt", "tc", "et"] {
            for metric in ["dsc", "sensitivity", "specificity"] {
                assert!(json[region][metric].is_number(), "missing {region}.{metric}");
            }
        }
        assert!(json["mean_dsc"].is_number());
        assert!(json["flags"].is_array());
    }
}
