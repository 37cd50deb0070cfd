use crate::error::{Error, Result};
use crate::latency::LatencyTable;
use crate::superkernel::DecisionTriple;

/// Largest search space [`enumerate_architectures`] will list.
pub const ENUMERATION_BUDGET: u128 = 100_000;

/// Every combination of per-layer decisions. Layers with `skip_mask[i]`
/// false get the four non-skip options, the others five.
pub fn enumerate_architectures(layers: usize, skip_mask: &[bool]) -> Result<Vec<Vec<DecisionTriple>>> {
    if skip_mask.len() != layers {
        return Err(Error::LayerCountMismatch { expected: layers, found: skip_mask.len() });
    }
    let space = 5u128.checked_pow(layers as u32).unwrap_or(u128::MAX);
    if space > ENUMERATION_BUDGET {
        return Err(Error::EnumerationBudget(space));
    }
    let options = |skip: bool| {
        let mut v = Vec::new();
        if skip {
            v.push(DecisionTriple { use_k5: false, use_e3_or_more: false, use_e6: false });
        }
        for use_k5 in [false, true] {
            for use_e6 in [false, true] {
                v.push(DecisionTriple { use_k5, use_e3_or_more: true, use_e6 });
            }
        }
        v
    };
    let mut all: Vec<Vec<DecisionTriple>> = vec![Vec::new()];
    for &skip in skip_mask {
        all = all
            .into_iter()
            .flat_map(|prefix| {
                options(skip).into_iter().map(move |d| {
                    let mut next = prefix.clone();
                    next.push(d);
                    next
                })
            })
            .collect();
    }
    Ok(all)
}

/// Table lookup of a hard architecture: the profiled entry for 5×5-6,
/// 5×5-3 and 3×3-6, `R[3x3,e6] / R[5x5,e6] · R[5x5,e3]` for 3×3-3, nothing
/// for a skip, plus the fixed overhead.
pub fn brute_force_runtime(arch: &[DecisionTriple], lut: &LatencyTable) -> Result<f64> {
    if arch.len() != lut.layers.len() {
        return Err(Error::LayerCountMismatch { expected: arch.len(), found: lut.layers.len() });
    }
    let mut total = lut.fixed_overhead_ms;
    for (d, row) in arch.iter().zip(&lut.layers) {
        if !d.use_e3_or_more {
            continue;
        }
        total += match (d.use_k5, d.use_e6) {
            (true, true) => row.r5x5_e6_ms,
            (true, false) => row.r5x5_e3_ms,
            (false, true) => row.r3x3_e6_ms,
            (false, false) => row.r3x3_e6_ms / row.r5x5_e6_ms * row.r5x5_e3_ms,
        };
    }
    Ok(total)
}
