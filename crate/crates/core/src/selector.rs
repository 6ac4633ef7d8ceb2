//! Nearest-example retrieval over a dense task × library cosine grid.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::embedder::{check_vectors, cosine_similarity, EmbedError, EmbeddingVector};

pub const DEFAULT_TOP_K: usize = 5;

/// Row-major `rows × cols` grid of cosine similarities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

pub fn similarity_matrix(
    task: &[EmbeddingVector],
    library: &[EmbeddingVector],
) -> Result<SimilarityMatrix, EmbedError> {
    let dim = task.first().or(library.first()).map(EmbeddingVector::dim);
    check_vectors(task, dim)?;
    check_vectors(library, dim)?;
    let mut values = Vec::with_capacity(task.len() * library.len());
    for t in task {
        for e in library {
            values.push(cosine_similarity(t, e)?);
        }
    }
    Ok(SimilarityMatrix {
        rows: task.len(),
        cols: library.len(),
        values,
    })
}

/// Per task sentence, library indices in descending similarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub k: usize,
    pub indices: Vec<Vec<usize>>,
}

/// The `k` most similar columns of one row, ties to the lower index.
pub fn top_k_row(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Applies [`top_k_row`] to every row. `k` above the column count returns all
/// columns.
///
/// # Panics
/// If `k` is zero.
pub fn select_top_k(matrix: &SimilarityMatrix, k: usize) -> SelectionResult {
    assert!(k >= 1, "top-k needs k >= 1");
    SelectionResult {
        k,
        indices: (0..matrix.rows)
            .map(|i| top_k_row(matrix.row(i), k))
            .collect(),
    }
}

/// Largest entry of each row; `None` for an empty library.
pub fn row_maxima(matrix: &SimilarityMatrix) -> Vec<Option<f64>> {
    (0..matrix.rows)
        .map(|i| {
            matrix
                .row(i)
                .iter()
                .copied()
                .max_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal))
        })
        .collect()
}
