use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollapseMetrics {
    /// Mean cosine over all unordered pairs.
    pub mean_pairwise_cosine: f64,
    /// Mean over dimensions of the population standard deviation of the
    /// L2-normalized embeddings.
    pub per_dim_std: f64,
}

/// Collapse diagnostics for `n` embeddings of width `d`, given row-major.
pub fn collapse_metrics(embeddings: &[f64], d: usize) -> Result<CollapseMetrics> {
    if d == 0 || !embeddings.len().is_multiple_of(d) {
        return invalid(format!("{} values do not form rows of width {d}", embeddings.len()));
    }
    let n = embeddings.len() / d;
    if n < 2 {
        return invalid("collapse metrics need at least two embeddings");
    }
    let unit: Vec<f64> = embeddings
        .chunks(d)
        .flat_map(|row| {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter().map(move |x| x / (norm + crate::autodiff::NORM_EPS))
        })
        .collect();
    let rows: Vec<&[f64]> = unit.chunks(d).collect();
    let mut cos_sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            cos_sum += rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let mut std_sum = 0.0;
    for k in 0..d {
        let mean = rows.iter().map(|r| r[k]).sum::<f64>() / n as f64;
        let var = rows.iter().map(|r| (r[k] - mean) * (r[k] - mean)).sum::<f64>() / n as f64;
        std_sum += var.sqrt();
    }
    Ok(CollapseMetrics {
        mean_pairwise_cosine: cos_sum / pairs,
        per_dim_std: std_sum / d as f64,
    })
}
