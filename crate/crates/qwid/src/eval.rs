//! Classifier evaluation: top-1/top-3 accuracy and the confusion matrix.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::LayerGraph;
use crate::tensor::{FloatTensor, Shape};

/// Evaluation summary. `confusion[actual][predicted]` counts samples.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub top1: f64,
    pub top3: f64,
    pub confusion: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

impl EvalReport {
    /// Row sums of the confusion matrix (samples per actual class).
    pub fn row_sums(&self) -> Vec<u64> {
        self.confusion.iter().map(|r| r.iter().sum()).collect()
    }

    /// Human-readable confusion matrix table.
    pub fn render_confusion(&self) -> String {
        let mut s = String::from("actual \\ predicted\n");
        let width = self
            .class_names
            .iter()
            .map(|n| n.len())
            .max()
            .unwrap_or(8)
            .max(5);
        s.push_str(&" ".repeat(width + 1));
        for (i, _) in self.class_names.iter().enumerate() {
            s.push_str(&format!("{i:>6}"));
        }
        s.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            s.push_str(&format!("{:<width$} ", self.class_names[i]));
            for &v in row {
                s.push_str(&format!("{v:>6}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Indices of the k largest logits, best first (ties break low-index).
fn top_k(row: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Run the graph over a dataset and tabulate accuracy. Works for any
/// graph mode; observers are frozen for the duration.
pub fn evaluate(g: &mut LayerGraph, d: &Dataset, batch_size: usize) -> Result<EvalReport> {
    if d.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let k = d.class_names.len();
    let live = g.observers_live;
    g.observers_live = false;
    let mut confusion = vec![vec![0u64; k]; k];
    let mut top1 = 0usize;
    let mut top3 = 0usize;
    let idx: Vec<usize> = (0..d.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let first = &d.images[chunk[0]];
        let dims = first.shape.dims().to_vec();
        let mut data = Vec::with_capacity(chunk.len() * first.data.len());
        for &i in chunk {
            data.extend_from_slice(&d.images[i].data);
        }
        let x = FloatTensor::new(Shape::new(&[chunk.len(), dims[0], dims[1], dims[2]])?, data)?;
        let logits = g.forward(&x)?;
        let classes = logits.shape.dims()[1];
        for (bi, &i) in chunk.iter().enumerate() {
            let row = &logits.data[bi * classes..(bi + 1) * classes];
            let label = d.labels[i];
            let best = top_k(row, 3);
            confusion[label][best[0]] += 1;
            if best[0] == label {
                top1 += 1;
            }
            if best.contains(&label) {
                top3 += 1;
            }
        }
    }
    g.observers_live = live;
    Ok(EvalReport {
        samples: d.len(),
        top1: top1 as f64 / d.len() as f64,
        top3: top3 as f64 / d.len() as f64,
        confusion,
        class_names: d.class_names.clone(),
    })
}
