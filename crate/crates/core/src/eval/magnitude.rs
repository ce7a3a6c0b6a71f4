use crate::error::{Error, Result};
use crate::pipeline::Model;
use crate::tensor::Tensor;

/// Per-sample maximum absolute activation of one branch, with a summary.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchMagnitudes {
    pub per_sample: Vec<f32>,
    pub mean: f64,
    /// Counts over the report's shared bin edges.
    pub histogram: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudeReport {
    /// `bins + 1` edges from 0 to the largest magnitude seen on either branch.
    pub edges: Vec<f64>,
    pub base: BranchMagnitudes,
    /// The novel branch as it enters the sum, i.e. after any gate.
    pub novel: BranchMagnitudes,
}

fn per_sample_max(t: &Tensor<f32>) -> Vec<f32> {
    let n = t.shape()[0];
    let stride = if n == 0 { 0 } else { t.numel() / n };
    t.data()
        .chunks(stride.max(1))
        .take(n)
        .map(|s| s.iter().fold(0.0f32, |m, v| m.max(v.abs())))
        .collect()
}

fn summarize(values: Vec<f32>, edges: &[f64]) -> BranchMagnitudes {
    let bins = edges.len() - 1;
    let top = edges[bins];
    let mut histogram = vec![0; bins];
    for &v in &values {
        let b = if top > 0.0 {
            ((v as f64 / top) * bins as f64).floor() as usize
        } else {
            0
        };
        histogram[b.min(bins - 1)] += 1;
    }
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / values.len().max(1) as f64;
    BranchMagnitudes {
        per_sample: values,
        mean,
        histogram,
    }
}

/// Distribution of the largest base and novel activation per sample at the
/// last block of an expanded model.
pub fn magnitude_report(model: &Model, inputs: &Tensor<f32>, bins: usize) -> Result<MagnitudeReport> {
    if bins == 0 {
        return Err(Error::invalid("magnitude_report", "need at least one histogram bin"));
    }
    let (base, novel) = model.last_branch_outputs(inputs)?;
    let base = per_sample_max(&base);
    let novel = per_sample_max(&novel);
    let top = base.iter().chain(&novel).fold(0.0f32, |m, &v| m.max(v)) as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| top * i as f64 / bins as f64).collect();
    Ok(MagnitudeReport {
        base: summarize(base, &edges),
        novel: summarize(novel, &edges),
        edges,
    })
}

/// `bin_lo,bin_hi,base,novel` rows.
pub fn render_histogram_csv(report: &MagnitudeReport) -> String {
    let mut out = String::from("bin_lo,bin_hi,base,novel\n");
    for i in 0..report.base.histogram.len() {
        out.push_str(&format!(
            "{:.4},{:.4},{},{}\n",
            report.edges[i],
            report.edges[i + 1],
            report.base.histogram[i],
            report.novel.histogram[i]
        ));
    }
    out
}
