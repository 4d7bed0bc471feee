//! L1 training loss and inter-ocular normalized mean error.

use crate::data::LandmarkSet;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

fn same_len(op: &'static str, a: &LandmarkSet, b: &LandmarkSet) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dim(
            op,
            format!("{} predicted vs {} ground-truth landmarks", a.len(), b.len()),
        ));
    }
    Ok(())
}

/// Mean over all `2N` coordinates of `|pred − gt|`.
pub fn l1_loss(pred: &LandmarkSet, gt: &LandmarkSet) -> Result<f64> {
    same_len("l1_loss", pred, gt)?;
    let total: f64 = pred
        .points
        .iter()
        .zip(&gt.points)
        .map(|(p, g)| (p[0] - g[0]).abs() + (p[1] - g[1]).abs())
        .sum();
    Ok(total / (2 * pred.len()) as f64)
}

/// Tape form of [`l1_loss`] for `N×2` vars.
pub fn l1_loss_var<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    let diff = tape.sub(pred, gt)?;
    let abs = tape.abs(diff);
    Ok(tape.mean(abs))
}

/// Euclidean distance between the two eye landmarks.
pub fn inter_ocular(gt: &LandmarkSet, eyes: (usize, usize)) -> Result<f64> {
    let (l, r) = eyes;
    if l >= gt.len() || r >= gt.len() {
        return Err(Error::dim("nme", format!("eye indices {eyes:?} out of range for {} landmarks", gt.len())));
    }
    let (a, b) = (gt.points[l], gt.points[r]);
    Ok(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
}

/// `(1/N) Σᵢ ‖pᵢ − gᵢ‖₂ / D` with `D` the ground-truth inter-ocular
/// distance. A fraction; multiply by 100 for percent.
pub fn nme(pred: &LandmarkSet, gt: &LandmarkSet, eyes: (usize, usize)) -> Result<f64> {
    same_len("nme", pred, gt)?;
    let d = inter_ocular(gt, eyes)?;
    if d == 0.0 {
        return Err(Error::DegenerateNormalization);
    }
    let total: f64 = pred
        .points
        .iter()
        .zip(&gt.points)
        .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt())
        .sum();
    Ok(total / (pred.len() as f64 * d))
}

/// Dataset-level NME over pairs, skipping samples whose normalization is
/// degenerate.
#[derive(Debug, Clone, PartialEq)]
pub struct NmeSummary {
    /// Mean NME in percent over the scored samples.
    pub nme_percent: f64,
    /// Per-sample NME in percent; `None` where excluded.
    pub per_sample: Vec<Option<f64>>,
    pub excluded: usize,
}

pub fn summarize_nme<'a, I>(pairs: I, eyes: (usize, usize)) -> Result<NmeSummary>
where
    I: IntoIterator<Item = (&'a LandmarkSet, &'a LandmarkSet)>,
{
    let mut per_sample = Vec::new();
    for (pred, gt) in pairs {
        per_sample.push(match nme(pred, gt, eyes) {
            Ok(v) => Some(100.0 * v),
            Err(Error::DegenerateNormalization) => None,
            Err(e) => return Err(e),
        });
    }
    let scored: Vec<f64> = per_sample.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(Error::DegenerateNormalization);
    }
    Ok(NmeSummary {
        nme_percent: scored.iter().sum::<f64>() / scored.len() as f64,
        excluded: per_sample.len() - scored.len(),
        per_sample,
    })
}
