//! Python bindings. Vectors cross the boundary as lists of floats, one list
//! per vector; matrices as lists of such vectors.

use pyo3::prelude::*;

#[pymodule]
mod mcr2 {
    use mcr2_core as core;
    use ndarray::Array2;
    use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
    use pyo3::prelude::*;

    fn to_py(e: core::Error) -> PyErr {
        match e {
            core::Error::IoFailure { .. } => PyIOError::new_err(e.to_string()),
            e if e.is_numerical() => PyArithmeticError::new_err(e.to_string()),
            e => PyValueError::new_err(e.to_string()),
        }
    }

    /// `d × n` matrix from `n` vectors of length `d`.
    fn columns(vectors: &[Vec<f64>]) -> PyResult<Array2<f64>> {
        let n = vectors.len();
        let d = vectors.first().map_or(0, Vec::len);
        if n == 0 || d == 0 || vectors.iter().any(|v| v.len() != d) {
            return Err(PyValueError::new_err("expected a non-empty list of equal-length vectors"));
        }
        Ok(Array2::from_shape_fn((d, n), |(i, j)| vectors[j][i]))
    }

    fn as_vectors(m: &Array2<f64>) -> Vec<Vec<f64>> {
        m.columns().into_iter().map(|c| c.to_vec()).collect()
    }

    fn memberships(rows: &[Vec<f64>]) -> PyResult<Array2<f64>> {
        Ok(columns(rows)?.reversed_axes())
    }

    /// Dense single-precision vectors stored in EMB1 files.
    #[pyclass(name = "EmbeddingMatrix", module = "mcr2")]
    pub struct Embeddings {
        inner: core::EmbeddingMatrix,
    }

    #[pymethods]
    impl Embeddings {
        #[new]
        fn new(vectors: Vec<Vec<f32>>) -> PyResult<Self> {
            let dim = vectors.first().map_or(0, Vec::len);
            let inner = core::EmbeddingMatrix::from_rows(dim, &vectors).map_err(to_py)?;
            Ok(Embeddings { inner })
        }

        #[staticmethod]
        fn read(path: &str) -> PyResult<Self> {
            let inner = core::store::read_embeddings(path).map_err(to_py)?;
            Ok(Embeddings { inner })
        }

        fn write(&self, path: &str) -> PyResult<()> {
            core::store::write_embeddings(&self.inner, path).map_err(to_py)
        }

        #[getter]
        fn dim(&self) -> usize {
            self.inner.dim()
        }

        #[getter]
        fn count(&self) -> usize {
            self.inner.count()
        }

        fn to_list(&self) -> Vec<Vec<f32>> {
            self.inner.to_rows()
        }

        fn __len__(&self) -> usize {
            self.inner.count()
        }

        fn __repr__(&self) -> String {
            format!("EmbeddingMatrix(dim={}, count={})", self.inner.dim(), self.inner.count())
        }
    }

    /// A trained projection layer.
    #[pyclass(module = "mcr2")]
    pub struct Projector {
        params: core::ProjectorParams,
    }

    #[pymethods]
    impl Projector {
        #[staticmethod]
        fn load(path: &str) -> PyResult<Self> {
            let params = core::projector::load_checkpoint(path).map_err(to_py)?;
            Ok(Projector { params })
        }

        fn save(&self, path: &str) -> PyResult<()> {
            core::projector::save_checkpoint(&self.params, path).map_err(to_py)
        }

        #[getter]
        fn d_in(&self) -> usize {
            self.params.d_in()
        }

        #[getter]
        fn d_feat(&self) -> usize {
            self.params.d_feat()
        }

        #[getter]
        fn k(&self) -> usize {
            self.params.k()
        }

        fn parameter_count(&self) -> usize {
            self.params.parameter_count()
        }

        /// Unit-norm features for every vector.
        fn project(&self, embeddings: PyRef<'_, Embeddings>) -> PyResult<Embeddings> {
            let f = core::projector::project(&self.params, embeddings.inner.to_f64().view()).map_err(to_py)?;
            let inner = core::EmbeddingMatrix::from_f64(&f).map_err(to_py)?;
            Ok(Embeddings { inner })
        }

        /// Cluster-head label for every vector.
        fn assign(&self, embeddings: PyRef<'_, Embeddings>) -> PyResult<Vec<usize>> {
            core::infer_memberships(&self.params, embeddings.inner.to_f64().view()).map_err(to_py)
        }
    }

    /// Returns `(embeddings, pairs, labels)`; clean points come first, then
    /// one noisy duplicate of each, paired as `(i, base + i)`.
    #[pyfunction]
    #[pyo3(signature = (dim, clusters, rank, per, sigma = 0.05, seed = 0))]
    fn generate_synthetic(
        dim: usize,
        clusters: usize,
        rank: usize,
        per: usize,
        sigma: f64,
        seed: u64,
    ) -> PyResult<(Embeddings, Vec<(usize, usize)>, Vec<usize>)> {
        let spec = core::SyntheticSpec {
            dim,
            clusters,
            points_per_cluster: per,
            subspace_rank: rank,
            noise_sigma: sigma,
            seed,
        };
        let c = core::store::generate_synthetic(&spec).map_err(to_py)?;
        let pairs = c.pairs.iter().map(|p| (p.a, p.b)).collect();
        Ok((Embeddings { inner: c.embeddings }, pairs, c.labels))
    }

    #[pyfunction]
    fn default_lambda(d_feat: usize) -> f64 {
        core::default_lambda(d_feat)
    }

    /// Returns the projector and one `(epoch, loss, R, sumRk, D)` tuple per epoch.
    #[pyfunction]
    #[pyo3(signature = (
        embeddings, pairs, d_feat, k, batch = 256, epochs = 50, lambda_ = None,
        epsilon_sq = 0.5, tau = 1.0, lr = 1e-3, seed = 0, restarts = 1
    ))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        embeddings: PyRef<'_, Embeddings>,
        pairs: Vec<(usize, usize)>,
        d_feat: usize,
        k: usize,
        batch: usize,
        epochs: usize,
        lambda_: Option<f64>,
        epsilon_sq: f64,
        tau: f64,
        lr: f64,
        seed: u64,
        restarts: usize,
    ) -> PyResult<(Projector, Vec<(usize, f64, f64, f64, f64)>)> {
        let pair_set = core::PairSet::new(pairs.into_iter().map(|(a, b)| core::Pair { a, b }).collect())
            .map_err(to_py)?;
        let cfg = core::TrainConfig {
            batch_pairs: batch,
            epochs,
            lambda: lambda_.unwrap_or_else(|| core::default_lambda(d_feat)),
            epsilon_sq,
            temperature: tau,
            learning_rate: lr,
            seed,
            k,
            d_feat,
            restarts,
        };
        let emb = &embeddings.inner;
        let (params, history) = py.detach(|| core::train(emb, &pair_set, &cfg)).map_err(to_py)?;
        let rows = history
            .epochs
            .iter()
            .map(|r| (r.epoch, r.loss, r.rate, r.cluster_rate_sum, r.similarity))
            .collect();
        Ok((Projector { params }, rows))
    }

    #[pyfunction]
    #[pyo3(signature = (vectors, epsilon_sq = 0.5))]
    fn coding_rate(vectors: Vec<Vec<f64>>, epsilon_sq: f64) -> PyResult<f64> {
        core::coding_rate(columns(&vectors)?.view(), epsilon_sq).map_err(to_py)
    }

    #[pyfunction]
    #[pyo3(signature = (vectors, membership, epsilon_sq = 0.5))]
    fn cluster_rate(vectors: Vec<Vec<f64>>, membership: Vec<f64>, epsilon_sq: f64) -> PyResult<f64> {
        let pi = ndarray::Array1::from(membership);
        core::cluster_rate(columns(&vectors)?.view(), pi.view(), epsilon_sq).map_err(to_py)
    }

    /// `memberships` has one row of cluster weights per feature vector.
    #[pyfunction]
    #[pyo3(signature = (features, memberships, side1, side2, lambda_, epsilon_sq = 0.5))]
    fn mcr2_loss(
        features: Vec<Vec<f64>>,
        memberships: Vec<Vec<f64>>,
        side1: Vec<Vec<f64>>,
        side2: Vec<Vec<f64>>,
        lambda_: f64,
        epsilon_sq: f64,
    ) -> PyResult<f64> {
        let pi = self::memberships(&memberships)?;
        let cfg = core::RateConfig {
            epsilon_sq,
            lambda: lambda_,
            temperature: 1.0,
            clusters: pi.ncols(),
        };
        let (z1, z2) = (columns(&side1)?, columns(&side2)?);
        core::mcr2_loss(columns(&features)?.view(), pi.view(), z1.view(), z2.view(), &cfg).map_err(to_py)
    }

    #[pyfunction]
    fn pair_similarity(side1: Vec<Vec<f64>>, side2: Vec<Vec<f64>>) -> PyResult<f64> {
        let (z1, z2) = (columns(&side1)?, columns(&side2)?);
        core::pair_similarity(z1.view(), z2.view()).map_err(to_py)
    }

    /// Returns `(labels, centroids, inertia)`.
    #[pyfunction]
    #[pyo3(signature = (vectors, k, seed = 0))]
    fn kmeans(vectors: Vec<Vec<f64>>, k: usize, seed: u64) -> PyResult<(Vec<usize>, Vec<Vec<f64>>, f64)> {
        let m = core::kmeans(columns(&vectors)?.view(), k, seed).map_err(to_py)?;
        let centroids = m.centroids.as_ref().map(as_vectors).unwrap_or_default();
        Ok((m.labels.clone(), centroids, m.inertia().unwrap_or(0.0)))
    }

    #[pyfunction]
    fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
        core::spearman(&x, &y).map_err(to_py)
    }

    #[pyfunction]
    fn cluster_agreement(pred: Vec<usize>, truth: Vec<usize>) -> PyResult<f64> {
        Ok(core::cluster_agreement(&pred, &truth).map_err(to_py)?.value)
    }

    /// Spearman of pair cosines against `(a, b, score)` gold triples.
    #[pyfunction]
    fn sts_score(embeddings: PyRef<'_, Embeddings>, gold: Vec<(usize, usize, f64)>) -> PyResult<f64> {
        let gold = core::GoldScores {
            records: gold
                .into_iter()
                .map(|(a, b, score)| core::store::GoldRecord { a, b, score })
                .collect(),
        };
        Ok(core::sts_score(&embeddings.inner, &gold).map_err(to_py)?.value)
    }

    /// Fraction of `(query, duplicate)` pairs whose labels agree.
    #[pyfunction]
    fn retrieval_accuracy(
        corpus_labels: Vec<usize>,
        targets: Vec<(usize, usize)>,
        query_labels: Vec<usize>,
    ) -> PyResult<f64> {
        core::retrieval_accuracy(&corpus_labels, &targets, &query_labels).map_err(to_py)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_initializes() {
        Python::initialize();
        Python::attach(|py| {
            let m = pyo3::wrap_pymodule!(mcr2)(py);
            let m = m.bind(py);
            let f = m.getattr("default_lambda").unwrap();
            let v: f64 = f.call1((100usize,)).unwrap().extract().unwrap();
            assert_eq!(v, 2000.0);
            let rate: f64 = m
                .getattr("coding_rate")
                .unwrap()
                .call1((vec![vec![1.0f64, 0.0], vec![0.0, 1.0]],))
                .unwrap()
                .extract()
                .unwrap();
            assert!((rate - 3f64.ln()).abs() < 1e-12);
        });
    }
}
