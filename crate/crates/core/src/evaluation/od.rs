//! Origin–destination flows from consecutive stays.

use std::collections::BTreeMap;

use super::EvalError;
use crate::geo::RegionId;
use crate::trajectory::Trajectory;

/// Flow counts keyed by `(origin, destination)`.
pub type OdMatrix = BTreeMap<(RegionId, RegionId), u64>;

/// One flow per consecutive stay pair, including pairs that stay in place.
pub fn build_od<'a>(trajs: impl IntoIterator<Item = &'a Trajectory>) -> OdMatrix {
    let mut od = OdMatrix::new();
    for t in trajs {
        for w in t.stays.windows(2) {
            *od.entry((w[0].region_id, w[1].region_id)).or_insert(0) += 1;
        }
    }
    od
}

/// Common part of commuters: `2 Σ min(a, b) / (Σ a + Σ b)`.
pub fn cpc(a: &OdMatrix, b: &OdMatrix) -> Result<f64, EvalError> {
    let total: u64 = a.values().sum::<u64>() + b.values().sum::<u64>();
    if total == 0 {
        return Err(EvalError::Empty("both OD matrices carry no flow".into()));
    }
    let common: u64 = a
        .iter()
        .filter_map(|(key, &x)| b.get(key).map(|&y| x.min(y)))
        .sum();
    Ok(2.0 * common as f64 / total as f64)
}
