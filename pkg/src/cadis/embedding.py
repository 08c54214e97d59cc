"""Seeded neighbour-graph embedding into one dimension.

A compact re-implementation of the UMAP recipe (fuzzy k-NN graph, spectral
initialisation, attractive/repulsive SGD layout with the ``a, b`` curve fitted
from ``min_dist``), vectorised per epoch so that a fixed seed gives bit-identical
output on any machine.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse
from scipy.linalg import eigh
from scipy.optimize import curve_fit
from scipy.sparse import csgraph
from scipy.sparse.linalg import eigsh
from sklearn.neighbors import NearestNeighbors

SMOOTH_K_TOLERANCE = 1e-5
MIN_K_DIST_SCALE = 1e-3


def find_ab_params(spread: float, min_dist: float) -> tuple[float, float]:
    """Fit ``1 / (1 + a d^(2b))`` to the offset-exponential membership curve."""

    def curve(x, a, b):
        return 1.0 / (1.0 + a * x ** (2 * b))

    xv = np.linspace(0, spread * 3, 300)
    yv = np.where(xv < min_dist, 1.0, np.exp(-(xv - min_dist) / spread))
    params, _ = curve_fit(curve, xv, yv)
    return float(params[0]), float(params[1])


def smooth_knn_dist(distances: np.ndarray, k: int, n_iter: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Per-point bandwidth ``sigma`` and local connectivity offset ``rho``.

    ``distances`` excludes the self column. Binary search solves
    ``sum_j exp(-(d_ij - rho_i) / sigma_i) = log2(k)`` for each row.
    """
    target = np.log2(k)
    n = distances.shape[0]
    rho = np.zeros(n)
    sigma = np.ones(n)
    mean_all = distances.mean()
    for i in range(n):
        row = distances[i]
        positive = row[row > 0]
        rho[i] = positive[0] if positive.size else 0.0
        lo, hi, mid = 0.0, np.inf, 1.0
        for _ in range(n_iter):
            psum = np.exp(-np.maximum(row - rho[i], 0.0) / mid).sum()
            if abs(psum - target) < SMOOTH_K_TOLERANCE:
                break
            if psum > target:
                hi = mid
                mid = (lo + hi) / 2.0
            else:
                lo = mid
                mid = mid * 2 if hi == np.inf else (lo + hi) / 2.0
        floor = MIN_K_DIST_SCALE * (row.mean() if rho[i] > 0 else mean_all)
        sigma[i] = max(mid, floor)
    return sigma, rho


def fuzzy_graph(x: np.ndarray, n_neighbors: int) -> sparse.csr_matrix:
    """Symmetrised fuzzy simplicial set (probabilistic t-conorm union)."""
    n = x.shape[0]
    nn = NearestNeighbors(n_neighbors=n_neighbors, algorithm="brute").fit(x)
    dist, idx = nn.kneighbors(x)
    # drop the self match; duplicates can displace it, so filter by index
    keep = idx != np.arange(n)[:, None]
    dist = np.array([d[m][: n_neighbors - 1] for d, m in zip(dist, keep)])
    idx = np.array([j[m][: n_neighbors - 1] for j, m in zip(idx, keep)])
    sigma, rho = smooth_knn_dist(dist, n_neighbors)
    vals = np.exp(-np.maximum(dist - rho[:, None], 0.0) / sigma[:, None])
    rows = np.repeat(np.arange(n), idx.shape[1])
    g = sparse.coo_matrix((vals.ravel(), (rows, idx.ravel())), shape=(n, n)).tocsr()
    gt = g.transpose().tocsr()
    out = g + gt - g.multiply(gt)
    out.eliminate_zeros()
    return out.tocsr()


def spectral_init(graph: sparse.csr_matrix, x: np.ndarray, seed: int) -> np.ndarray:
    """Fiedler vector of the normalised Laplacian; PCA when the graph is disconnected."""
    n_comp, _ = csgraph.connected_components(graph, directed=False)
    if n_comp == 1 and graph.shape[0] > 2:
        deg = np.asarray(graph.sum(axis=1)).ravel()
        d_inv = sparse.diags(1.0 / np.sqrt(deg))
        lap = sparse.identity(graph.shape[0]) - d_inv @ graph @ d_inv
        if graph.shape[0] <= 4000:
            vals, vecs = eigh(lap.toarray(), subset_by_index=[0, 1])
        else:
            v0 = np.random.default_rng(seed).uniform(size=graph.shape[0])
            vals, vecs = eigsh(lap.tocsc(), k=2, sigma=-1e-5, which="LM", v0=v0)
        coord = vecs[:, np.argsort(vals)[1]]
    else:
        coord = _pca_1d(x)
    # fix the eigenvector sign so the result is a function of the data only
    if np.dot(coord, _pca_1d(x)) < 0:
        coord = -coord
    return coord


def _pca_1d(x: np.ndarray) -> np.ndarray:
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    c = xc @ vt[0]
    # deterministic sign: largest-magnitude loading positive
    if vt[0][np.argmax(np.abs(vt[0]))] < 0:
        c = -c
    return c


def optimize_layout(
    y: np.ndarray,
    head: np.ndarray,
    tail: np.ndarray,
    weights: np.ndarray,
    a: float,
    b: float,
    n_epochs: int,
    rng: np.random.Generator,
    negative_sample_rate: int = 5,
    initial_alpha: float = 1.0,
) -> np.ndarray:
    n = y.shape[0]
    eps_per_sample = weights.max() / weights
    next_sample = eps_per_sample.copy()
    eps_per_neg = eps_per_sample / negative_sample_rate
    next_neg = eps_per_neg.copy()
    for epoch in range(n_epochs):
        alpha = initial_alpha * (1.0 - epoch / n_epochs)
        due = np.nonzero(next_sample <= epoch + 1)[0]
        if due.size == 0:
            continue
        i, j = head[due], tail[due]
        diff = y[i] - y[j]
        d2 = diff**2
        coeff = np.where(
            d2 > 0,
            (-2.0 * a * b * np.power(d2, b - 1.0)) / (a * np.power(d2, b) + 1.0),
            0.0,
        )
        grad = np.clip(coeff * diff, -4.0, 4.0) * alpha
        update = np.zeros(n)
        count = np.zeros(n)
        np.add.at(update, i, grad)
        np.add.at(update, j, -grad)
        np.add.at(count, i, 1.0)
        np.add.at(count, j, 1.0)
        next_sample[due] += eps_per_sample[due]

        n_neg = ((epoch + 1 - next_neg[due]) / eps_per_neg[due]).astype(int)
        n_neg = np.maximum(n_neg, 0)
        src = np.repeat(i, n_neg)
        if src.size:
            neg = rng.integers(0, n, size=src.size)
            nd = y[src] - y[neg]
            nd2 = nd**2
            rep = np.where(
                nd2 > 0,
                (2.0 * b) / ((0.001 + nd2) * (a * np.power(nd2, b) + 1.0)),
                0.0,
            )
            rgrad = np.where(nd2 > 0, np.clip(rep * nd, -4.0, 4.0), 0.0) * alpha
            np.add.at(update, src, rgrad)
            np.add.at(count, src, 1.0)
        next_neg[due] += n_neg * eps_per_neg[due]
        # simultaneous updates: average per point so one epoch moves a point at most one clipped step
        y = y + update / np.maximum(count, 1.0)
    return y


def embed(
    x: np.ndarray,
    n_neighbors: int = 15,
    min_dist: float = 0.1,
    seed: int = 0,
    n_epochs: int | None = None,
    spread: float = 1.0,
    learning_rate: float = 0.25,
) -> np.ndarray:
    """Embed the rows of ``x`` onto a line. Returns one coordinate per row.

    ``learning_rate`` is lower than the usual 1.0: with a spectral start that is
    already ordered, large early steps only fold segments of the line over.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    graph = fuzzy_graph(x, min(n_neighbors, n))
    if n_epochs is None:
        n_epochs = 500 if n <= 10000 else 200
    coo = graph.tocoo()
    keep = coo.data >= coo.data.max() / n_epochs
    head, tail, w = coo.row[keep], coo.col[keep], coo.data[keep]

    rng = np.random.default_rng(seed)
    init = spectral_init(graph, x, seed)
    init = 10.0 * (init - init.min()) / max(np.ptp(init), 1e-12)
    init = init + rng.normal(scale=1e-4, size=n)
    a, b = find_ab_params(spread, min_dist)
    return optimize_layout(init, head, tail, w, a, b, n_epochs, rng, initial_alpha=learning_rate)
