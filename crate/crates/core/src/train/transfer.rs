use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{prefix_matches, ParamStore};

/// Copies every source tensor under each `(source_prefix, target_prefix)`
/// pair onto the correspondingly renamed target tensor. Unmapped target
/// tensors keep their values and every entry keeps its freeze flag. Returns
/// the number of tensors copied; nothing is written if any mapping fails.
pub fn transfer_init(
    source: &ParamStore,
    target: &mut ParamStore,
    name_map: &[(String, String)],
) -> Result<usize> {
    let mut plan = Vec::new();
    let mut bad = Vec::new();
    for (src, dst) in name_map {
        let src = src.trim_end_matches('.');
        let dst = dst.trim_end_matches('.');
        let matched: Vec<&str> = source.names().filter(|n| prefix_matches(src, n)).collect();
        if matched.is_empty() {
            bad.push(format!("{src} (no source tensors)"));
        }
        for name in matched {
            let to = format!("{dst}{}", &name[src.len()..]);
            let from_t = source.get(name)?;
            match target.get(&to) {
                Ok(t) if t.shape() == from_t.shape() => plan.push((name, to)),
                Ok(t) => bad.push(format!(
                    "{name} {:?} -> {to} {:?}",
                    from_t.shape(),
                    t.shape()
                )),
                Err(_) => bad.push(format!("{name} -> {to} (missing in target)")),
            }
        }
    }
    if !bad.is_empty() {
        return Err(Error::TransferMismatch(bad));
    }
    for (from, to) in &plan {
        let value = source.get(from)?.data().to_vec();
        target.get_mut(to)?.data_mut().copy_from_slice(&value);
    }
    Ok(plan.len())
}

/// Identity mappings for every top-level layer whose tensors exist in both
/// stores with equal shapes, e.g. everything but a resized head.
pub fn shared_prefixes(source: &ParamStore, target: &ParamStore) -> Vec<(String, String)> {
    let mut groups: BTreeMap<&str, bool> = BTreeMap::new();
    for (name, entry) in target.iter() {
        let top = name.split('.').next().unwrap_or(name);
        let ok = source
            .get(name)
            .map(|s| s.shape() == entry.tensor.shape())
            .unwrap_or(false);
        *groups.entry(top).or_insert(true) &= ok;
    }
    for name in source.names() {
        let top = name.split('.').next().unwrap_or(name);
        if !target.contains(name) {
            if let Some(g) = groups.get_mut(top) {
                *g = false;
            }
        }
    }
    groups
        .into_iter()
        .filter(|(_, ok)| *ok)
        .map(|(p, _)| (p.to_string(), p.to_string()))
        .collect()
}
