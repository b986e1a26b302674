//! Computes the class-weighted intra-class similarity on hand-made
//! embeddings, with and without self-pairs.

use crisis_kit::evalsuite::{metric_report, LabeledEmbeddings, SelfPairs};
use ndarray::array;

fn main() -> anyhow::Result<()> {
    let raw = array![[3.0, 0.1], [2.0, 0.3], [2.5, -0.2], [0.1, 1.0], [-0.2, 4.0], [1.0, 1.0]];
    let labels = vec![0, 0, 0, 1, 1, 2];
    let l = LabeledEmbeddings::normalized(&raw.view(), labels, 3)?;
    for mode in [SelfPairs::Exclude, SelfPairs::Include] {
        println!("{}", serde_json::to_string_pretty(&metric_report(&l, mode)?)?);
    }
    Ok(())
}
