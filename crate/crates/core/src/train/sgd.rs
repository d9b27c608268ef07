use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// Plain SGD without momentum: `p -= lr * g` for every trainable, unfrozen
/// tensor named in `grads`. Nothing is written unless every gradient is
/// finite and shaped like its tensor.
pub fn sgd_step(params: &mut ParamStore, grads: &[(String, Vec<f32>)], lr: f64) -> Result<()> {
    let bad: Vec<String> = grads
        .iter()
        .filter(|(_, g)| g.iter().any(|v| !v.is_finite()))
        .map(|(n, g)| {
            let count = g.iter().filter(|v| !v.is_finite()).count();
            format!("{n} ({count} of {})", g.len())
        })
        .collect();
    if !bad.is_empty() {
        return Err(Error::NonFiniteGradient(bad));
    }
    for (name, g) in grads {
        let t = params.get(name)?;
        if t.numel() != g.len() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                left: t.shape().to_vec(),
                right: vec![g.len()],
            });
        }
    }
    for (name, g) in grads {
        let entry = params.entry(name).expect("checked above");
        if entry.frozen || !entry.trainable {
            continue;
        }
        for (p, &gv) in params.get_mut(name)?.data_mut().iter_mut().zip(g) {
            let delta = lr * gv as f64;
            // skipping zero steps keeps signed zeros intact
            if delta != 0.0 {
                *p = (*p as f64 - delta) as f32;
            }
        }
    }
    Ok(())
}
