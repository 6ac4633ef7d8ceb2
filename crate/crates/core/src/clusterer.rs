//! k-Medoids over cosine similarity.
//!
//! Medoids start as a uniform sample of `k` points. Each round assigns every
//! point to its most similar medoid, then moves each medoid to the cluster
//! member with the largest summed similarity to the rest of its cluster. The
//! loop stops when a round leaves the medoid set unchanged or `max_iter`
//! rounds have run. Ties go to the lowest index in both steps.
//!
//! A medoid is always assigned to its own cluster, even when another medoid
//! is an exact duplicate of it, so no cluster is ever empty and the objective
//! never decreases.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, TaskSet};
use crate::embedder::{check_vectors, cosine_similarity, EmbedError, EmbeddingVector};

pub const DEFAULT_MAX_ITER: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum ClusterError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("k = {k} exceeds the number of points ({n})")]
    TooManyClusters { k: usize, n: usize },
    #[error("no points to cluster")]
    Empty,
    #[error("max_iter must be at least 1")]
    ZeroIterations,
    #[error(transparent)]
    Embedding(#[from] EmbedError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    /// Point indices of the medoids, in medoid-index order.
    pub medoid_ids: Vec<usize>,
    /// `assignment[i]` is the medoid index point `i` belongs to.
    pub assignment: Vec<usize>,
    /// Sum over all points of the similarity to their medoid.
    pub objective: f64,
    /// Objective after the initial assignment and after every round.
    pub objective_trace: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
    pub seed: u64,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.medoid_ids.len()
    }

    /// Point indices belonging to medoid `j`, ascending.
    pub fn members(&self, j: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == j)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Dense symmetric cosine-similarity matrix over the input points.
struct Gram {
    n: usize,
    sims: Vec<f64>,
}

impl Gram {
    fn new(vectors: &[EmbeddingVector]) -> Result<Self, EmbedError> {
        let n = vectors.len();
        let mut sims = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let s = cosine_similarity(&vectors[i], &vectors[j])?;
                sims[i * n + j] = s;
                sims[j * n + i] = s;
            }
        }
        Ok(Self { n, sims })
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.sims[i * self.n + j]
    }
}

fn assign(gram: &Gram, medoids: &[usize]) -> (Vec<usize>, f64) {
    let mut assignment = vec![0; gram.n];
    let mut objective = 0.0;
    for (i, slot) in assignment.iter_mut().enumerate() {
        let (best, sim) = match medoids.iter().position(|&m| m == i) {
            Some(own) => (own, gram.get(i, i)),
            None => {
                let mut best = 0;
                let mut best_sim = gram.get(i, medoids[0]);
                for (j, &m) in medoids.iter().enumerate().skip(1) {
                    let s = gram.get(i, m);
                    if s > best_sim {
                        best = j;
                        best_sim = s;
                    }
                }
                (best, best_sim)
            }
        };
        *slot = best;
        objective += sim;
    }
    (assignment, objective)
}

fn update(gram: &Gram, medoids: &[usize], assignment: &[usize]) -> Vec<usize> {
    let k = medoids.len();
    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in assignment.iter().enumerate() {
        clusters[c].push(i);
    }
    clusters
        .iter()
        .zip(medoids)
        .map(|(members, &current)| {
            let mut best = current;
            let mut best_total = f64::NEG_INFINITY;
            for &cand in members {
                let total = members.iter().fold(0.0, |acc, &o| acc + gram.get(cand, o));
                if total > best_total {
                    best = cand;
                    best_total = total;
                }
            }
            best
        })
        .collect()
}

/// Clusters `vectors` into `k` groups. Deterministic in `(vectors, k, seed,
/// max_iter)`.
pub fn kmedoids(
    vectors: &[EmbeddingVector],
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<Clustering, ClusterError> {
    let n = vectors.len();
    if n == 0 {
        return Err(ClusterError::Empty);
    }
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if k > n {
        return Err(ClusterError::TooManyClusters { k, n });
    }
    if max_iter == 0 {
        return Err(ClusterError::ZeroIterations);
    }
    check_vectors(vectors, None)?;
    let gram = Gram::new(vectors)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut medoids = rand::seq::index::sample(&mut rng, n, k).into_vec();

    let (mut assignment, mut objective) = assign(&gram, &medoids);
    let mut trace = vec![objective];
    let mut iterations_run = 0;
    let mut converged = false;
    while iterations_run < max_iter {
        iterations_run += 1;
        let next = update(&gram, &medoids, &assignment);
        if next == medoids {
            converged = true;
            break;
        }
        medoids = next;
        (assignment, objective) = assign(&gram, &medoids);
        trace.push(objective);
    }

    Ok(Clustering {
        medoid_ids: medoids,
        assignment,
        objective,
        objective_trace: trace,
        iterations_run,
        converged,
        seed,
    })
}

/// The medoid sentences of `task`, in medoid-index order.
pub fn feature_sentences(clustering: &Clustering, task: &TaskSet) -> Vec<Sentence> {
    clustering
        .medoid_ids
        .iter()
        .map(|&i| task.sentences[i].clone())
        .collect()
}
