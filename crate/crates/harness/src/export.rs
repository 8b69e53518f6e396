//! Attention-trace export.

use std::path::Path;

use duoformer::nn::Mode;
use duoformer::tensor::io as mstf;
use duoformer::tensor::no_grad;
use duoformer::trainer::Split;
use duoformer::DuoFormer64;

use crate::error::Result;

/// Runs the first `count` samples of `split` through `model` in eval mode and
/// writes `local_<i>.mstf` (`[n, N, n_h, T, T]`) and `global_<i>.mstf`
/// (`[n, n_h, N+1, N+1]`) for every layer, plus `labels.mstf`. Returns the
/// written file names.
pub fn export_attention(model: &DuoFormer64, split: &Split<f64>, count: usize, dir: &Path) -> Result<Vec<String>> {
    let _guard = no_grad();
    let idx: Vec<usize> = (0..count.min(split.len())).collect();
    let batch = split.select(&idx)?;
    let (_, trace) = model.forward(batch.inputs.as_model_input(), Mode::Eval)?;
    let mut written = Vec::new();
    for (kind, maps) in [("local", &trace.local), ("global", &trace.global)] {
        for (i, w) in maps.iter().enumerate() {
            let name = format!("{kind}_{i}.mstf");
            mstf::write(dir.join(&name), w)?;
            written.push(name);
        }
    }
    let labels: Vec<f64> = batch.labels.iter().map(|&l| l as f64).collect();
    mstf::write(dir.join("labels.mstf"), &duoformer::Tensor64::from_vec(vec![labels.len()], labels)?)?;
    written.push("labels.mstf".into());
    Ok(written)
}
