"""Spatially smoothed Gaussian mixture sampled by Gibbs.

Model: ``X_j | Z_j = i ~ N(mu_i, sigma2 I_D)`` with a Potts prior on the
labels that rewards agreement with neighbours, weighted by ``eta / |dj|``.
Each sweep updates the labels in a random order, then the cluster means,
then the shared variance.

Labels are 0-based throughout this module. File writers in :mod:`ingest`
and :mod:`cli` add one.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numba as nb
import numpy as np
from scipy.cluster.hierarchy import cut_tree, linkage

from .errors import ValidationError
from .ingest import NeighborGraph

MAX_RELABEL_K = 6


@dataclass(frozen=True)
class ModelConfig:
    """Sampler settings. ``iterations`` counts full sweeps."""

    K: int = 3
    eta: float = 0.9
    alpha: float = 0.001
    beta: float = 0.001
    iterations: int = 160_000
    burn_in: int = 10_000
    thin: int = 5
    seed: int = 0

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise ValidationError(f"K must be an integer >= 1, got {self.K}")
        if not (math.isfinite(self.eta) and self.eta >= 0):
            raise ValidationError(f"eta must be finite and >= 0, got {self.eta}")
        if not (self.alpha > 0 and self.beta > 0):
            raise ValidationError("alpha and beta must be > 0")
        if int(self.thin) != self.thin or self.thin < 1:
            raise ValidationError(f"thin must be an integer >= 1, got {self.thin}")
        if self.burn_in < 0 or self.burn_in >= self.iterations:
            raise ValidationError(
                f"need 0 <= burn_in < iterations, got burn_in={self.burn_in}, iterations={self.iterations}")

    @property
    def n_kept(self) -> int:
        return (self.iterations - self.burn_in) // self.thin


@dataclass(eq=False)
class ModelState:
    labels: np.ndarray
    means: np.ndarray
    sigma2: float

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.means = np.asarray(self.means, dtype=float)
        if self.means.ndim != 2:
            raise ValidationError("means must be a K x D array")
        K = self.means.shape[0]
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= K):
            raise ValidationError(f"labels must lie in 0..{K - 1}")
        if not (self.sigma2 > 0 and math.isfinite(self.sigma2)):
            raise ValidationError(f"sigma2 must be finite and > 0, got {self.sigma2}")

    @property
    def K(self) -> int:
        return self.means.shape[0]

    def copy(self) -> "ModelState":
        return ModelState(self.labels.copy(), self.means.copy(), float(self.sigma2))


@dataclass(eq=False)
class Chain:
    """Kept (post burn-in, thinned, relabeled) samples.

    ``permutations[s]`` maps new cluster index to the raw sampler index for
    sample ``s``; ``labels`` is only stored on request.
    """

    sample_index: np.ndarray
    means: np.ndarray
    sigma2: np.ndarray
    log_posterior: np.ndarray
    label_counts: np.ndarray
    permutations: np.ndarray
    labels: np.ndarray | None = None
    config: ModelConfig = field(default_factory=ModelConfig)

    @property
    def n_samples(self) -> int:
        return len(self.sample_index)


@dataclass(eq=False)
class ClusterReport:
    map_labels: np.ndarray
    probabilities: np.ndarray
    mean_mu: np.ndarray
    mean_sigma2: float
    n_samples: int


def _as_matrix(features) -> np.ndarray:
    X = getattr(features, "zscored", features)
    X = np.ascontiguousarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValidationError("features must be a non-empty N x D matrix")
    if not np.all(np.isfinite(X)):
        raise ValidationError("features must be finite")
    return X


# ---------------------------------------------------------------- init

def ward_init(features, K: int) -> np.ndarray:
    """Ward minimum-variance hierarchical clustering cut at ``K`` clusters.

    Clusters are numbered by first appearance in input order.
    """
    X = _as_matrix(features)
    N = X.shape[0]
    if N < K:
        raise ValidationError(f"need at least K={K} locations, got {N}")
    if K == 1 or N == 1:
        return np.zeros(N, dtype=np.int64)
    raw = cut_tree(linkage(X, method="ward"), n_clusters=K).ravel()
    _, first = np.unique(raw, return_index=True)
    order = np.argsort(first)
    remap = np.empty(K, dtype=np.int64)
    remap[np.unique(raw)[order]] = np.arange(K)
    return remap[raw]


def initial_state(features, K: int, labels: np.ndarray | None = None) -> ModelState:
    """Means and pooled variance of a labelling (Ward's by default)."""
    X = _as_matrix(features)
    if labels is None:
        labels = ward_init(X, K)
    labels = np.asarray(labels, dtype=np.int64)
    means = np.empty((K, X.shape[1]))
    for i in range(K):
        members = X[labels == i]
        means[i] = members.mean(axis=0) if len(members) else X.mean(axis=0)
    ss = float(np.sum((X - means[labels]) ** 2))
    sigma2 = ss / X.size if ss > 0 else 1.0
    return ModelState(labels, means, sigma2)


# ---------------------------------------------------------------- Gibbs steps

def log_likelihood_matrix(X: np.ndarray, means: np.ndarray, sigma2: float) -> np.ndarray:
    """``-||X_j - mu_i||^2 / (2 sigma2)`` as an N x K matrix."""
    d2 = ((X[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return -d2 / (2.0 * sigma2)


def potts_weights(graph: NeighborGraph, eta: float) -> np.ndarray:
    deg = graph.degree.astype(float)
    return np.divide(eta, deg, out=np.zeros_like(deg), where=deg > 0)


@nb.njit(cache=True)
def _label_sweep(loglik, indptr, indices, weight, labels, order, u):
    K = loglik.shape[1]
    logits = np.empty(K)
    for step in range(order.size):
        j = order[step]
        for i in range(K):
            logits[i] = loglik[j, i]
        w = weight[j]
        if w != 0.0:
            for p in range(indptr[j], indptr[j + 1]):
                logits[labels[indices[p]]] += w
        top = logits.max()
        total = 0.0
        for i in range(K):
            logits[i] = math.exp(logits[i] - top)
            total += logits[i]
        target = u[step] * total
        acc = 0.0
        choice = K - 1
        for i in range(K):
            acc += logits[i]
            if target < acc:
                choice = i
                break
        labels[j] = choice


def label_probabilities(j: int, state: ModelState, X: np.ndarray, graph: NeighborGraph, eta: float) -> np.ndarray:
    """Full conditional of ``Z_j`` given everything else."""
    logits = log_likelihood_matrix(X[j:j + 1], state.means, state.sigma2)[0]
    nbrs = graph.neighbors(j)
    if len(nbrs):
        logits = logits + eta / len(nbrs) * np.bincount(state.labels[nbrs], minlength=state.K)
    logits -= logits.max()
    p = np.exp(logits)
    return p / p.sum()


def gibbs_label_step(state: ModelState, features, graph: NeighborGraph, config: ModelConfig,
                     rng: np.random.Generator) -> ModelState:
    """One random-scan sweep over all labels (sequential, in place on a copy)."""
    X = _as_matrix(features)
    new = state.copy()
    _sweep(new, X, graph, potts_weights(graph, config.eta), rng)
    return new


def _sweep(state: ModelState, X, graph, weight, rng) -> None:
    N = X.shape[0]
    order = rng.permutation(N)
    u = rng.random(N)
    loglik = log_likelihood_matrix(X, state.means, state.sigma2)
    _label_sweep(loglik, graph.indptr, graph.indices, weight, state.labels, order, u)


def mean_posterior(state: ModelState, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-cluster sizes ``n_i`` and member means (NaN rows for empty clusters)."""
    K, D = state.means.shape
    counts = np.bincount(state.labels, minlength=K)
    sums = np.zeros((K, D))
    np.add.at(sums, state.labels, X)
    with np.errstate(invalid="ignore", divide="ignore"):
        centres = sums / counts[:, None]
    return counts, centres


def gibbs_mean_step(state: ModelState, features, rng: np.random.Generator,
                    bounds: tuple[np.ndarray, np.ndarray] | None = None) -> ModelState:
    """Draw each ``mu_i ~ N(mean of members, sigma2 / n_i I)``.

    An empty cluster draws uniformly from ``bounds`` (the feature bounding box
    by default).
    """
    X = _as_matrix(features)
    counts, centres = mean_posterior(state, X)
    if bounds is None:
        bounds = (X.min(axis=0), X.max(axis=0))
    K, D = state.means.shape
    means = np.empty((K, D))
    for i in range(K):
        if counts[i] == 0:
            means[i] = rng.uniform(bounds[0], bounds[1])
        else:
            means[i] = centres[i] + math.sqrt(state.sigma2 / counts[i]) * rng.standard_normal(D)
    return ModelState(state.labels, means, state.sigma2)


def variance_posterior(state: ModelState, features, config: ModelConfig) -> tuple[float, float]:
    """Shape and rate of the inverse-gamma full conditional of ``sigma2``."""
    X = _as_matrix(features)
    N, D = X.shape
    ss = float(np.sum((X - state.means[state.labels]) ** 2))
    return D * N / 2.0 + config.alpha, config.beta + 0.5 * ss


def gibbs_variance_step(state: ModelState, features, config: ModelConfig,
                        rng: np.random.Generator) -> ModelState:
    shape, rate = variance_posterior(state, features, config)
    sigma2 = 1.0 / rng.gamma(shape, 1.0 / rate)
    return ModelState(state.labels, state.means, sigma2)


def log_posterior(state: ModelState, features, graph: NeighborGraph, config: ModelConfig) -> float:
    """Log joint posterior up to an additive constant.

    The Potts term sums ``eta / |dj|`` times the number of agreeing neighbours
    over every location, so each neighbouring pair enters from both ends.
    """
    X = _as_matrix(features)
    N, D = X.shape
    s2 = state.sigma2
    ss = float(np.sum((X - state.means[state.labels]) ** 2))
    rows = np.repeat(np.arange(N), np.diff(graph.indptr))
    agree = (state.labels[graph.indices] == state.labels[rows]).astype(float)
    potts = float(np.sum(potts_weights(graph, config.eta)[rows] * agree))
    return (-(D * N / 2.0 + config.alpha + 1.0) * math.log(s2) - config.beta / s2
            - ss / (2.0 * s2) + potts)


# ---------------------------------------------------------------- relabeling

class Relabeler:
    """Online permutation matching against a running mean of relabeled means."""

    def __init__(self, K: int):
        if K > MAX_RELABEL_K:
            raise ValidationError(f"relabeling supports K <= {MAX_RELABEL_K}, got {K}")
        self.perms = np.array(list(itertools.permutations(range(K))), dtype=np.int64)
        self.reference = None
        self.n = 0

    def __call__(self, means: np.ndarray) -> np.ndarray:
        """Best permutation ``p`` (new index ``i`` takes raw cluster ``p[i]``); updates the reference."""
        if self.reference is None:
            perm = self.perms[0]
        else:
            cost = ((means[self.perms] - self.reference[None]) ** 2).sum(axis=(1, 2))
            perm = self.perms[int(np.argmin(cost))]
        aligned = means[perm]
        self.n += 1
        if self.reference is None:
            self.reference = aligned.copy()
        else:
            self.reference += (aligned - self.reference) / self.n
        return perm


def _inverse(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return inv


def relabel(chain: Chain) -> Chain:
    """Re-run permutation matching over a chain's kept means.

    Requires the label trace unless every permutation found is the
    identity, since counts cannot be remapped per sample otherwise.
    """
    if chain.n_samples == 0:
        raise ValidationError("cannot relabel an empty chain")
    K = chain.means.shape[1]
    matcher = Relabeler(K)
    perms = np.array([matcher(m) for m in chain.means])
    identity = np.arange(K)
    if np.all(perms == identity):
        return chain
    if chain.labels is None:
        raise ValidationError("relabeling a switched chain needs the stored label trace")
    means = np.array([m[p] for m, p in zip(chain.means, perms)])
    labels = np.array([_inverse(p)[z] for z, p in zip(chain.labels, perms)])
    counts = _count_labels(labels, K)
    composed = np.array([old[p] for old, p in zip(chain.permutations, perms)])
    return replace(chain, means=means, labels=labels, label_counts=counts, permutations=composed)


def _count_labels(labels: np.ndarray, K: int) -> np.ndarray:
    S, N = labels.shape
    counts = np.zeros((N, K), dtype=np.int64)
    for z in labels:
        counts[np.arange(N), z] += 1
    return counts


# ---------------------------------------------------------------- driver

def run_sampler(features, graph: NeighborGraph, config: ModelConfig, *,
                init: ModelState | None = None,
                fix_means: bool = False,
                fix_variance: bool = False,
                store_labels: bool = False) -> Chain:
    """Ward initialisation followed by ``config.iterations`` Gibbs sweeps.

    ``fix_means`` / ``fix_variance`` hold the corresponding block at its
    initial value, which turns the chain into a pure label sampler for
    exactness checks.
    """
    X = _as_matrix(features)
    N = X.shape[0]
    if graph.n != N:
        raise ValidationError(f"graph has {graph.n} nodes but features have {N} rows")
    if config.K > MAX_RELABEL_K:
        raise ValidationError(f"K <= {MAX_RELABEL_K} supported, got {config.K}")
    rng = np.random.default_rng(config.seed)
    state = initial_state(X, config.K) if init is None else init.copy()
    if state.means.shape != (config.K, X.shape[1]) or state.labels.shape != (N,):
        raise ValidationError("initial state does not match K, N or D")
    weight = potts_weights(graph, config.eta)
    bounds = (X.min(axis=0), X.max(axis=0))
    matcher = Relabeler(config.K)
    S = config.n_kept
    K, D = state.means.shape
    out_index = np.empty(S, dtype=np.int64)
    out_means = np.empty((S, K, D))
    out_s2 = np.empty(S)
    out_lp = np.empty(S)
    out_perm = np.empty((S, K), dtype=np.int64)
    out_labels = np.empty((S, N), dtype=np.int64) if store_labels else None
    counts = np.zeros((N, K), dtype=np.int64)
    rows = np.arange(N)
    s = 0
    for t in range(1, config.iterations + 1):
        _sweep(state, X, graph, weight, rng)
        if not fix_means:
            state = gibbs_mean_step(state, X, rng, bounds)
        if not fix_variance:
            state = gibbs_variance_step(state, X, config, rng)
        if t <= config.burn_in or (t - config.burn_in) % config.thin:
            continue
        perm = matcher(state.means)
        z = _inverse(perm)[state.labels]
        counts[rows, z] += 1
        out_index[s] = t
        out_means[s] = state.means[perm]
        out_s2[s] = state.sigma2
        out_lp[s] = log_posterior(state, X, graph, config)
        out_perm[s] = perm
        if out_labels is not None:
            out_labels[s] = z
        s += 1
    return Chain(out_index, out_means, out_s2, out_lp, counts, out_perm, out_labels, config)


def summarize(chain: Chain) -> ClusterReport:
    """Per-location label frequencies, marginal modes and posterior means."""
    if chain.n_samples < 1:
        raise ValidationError("summaries need at least one kept sample")
    probs = chain.label_counts / chain.label_counts.sum(axis=1, keepdims=True)
    return ClusterReport(
        map_labels=np.argmax(probs, axis=1),
        probabilities=probs,
        mean_mu=chain.means.mean(axis=0),
        mean_sigma2=float(chain.sigma2.mean()),
        n_samples=chain.n_samples,
    )


# ---------------------------------------------------------------- dumps

def write_chain_csv(chain: Chain, path: str | Path) -> None:
    """One row per kept sample: index, log posterior, sigma2, means row-major."""
    K, D = chain.means.shape[1:]
    header = ["sample_index", "log_posterior", "sigma2"] + [
        f"mu_{i + 1}_{d + 1}" for i in range(K) for d in range(D)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for s in range(chain.n_samples):
            w.writerow([int(chain.sample_index[s]), repr(float(chain.log_posterior[s])),
                        repr(float(chain.sigma2[s])), *(repr(float(v)) for v in chain.means[s].ravel())])


def write_label_trace(chain: Chain, ids, path: str | Path) -> None:
    """Kept labels (1-based), one row per sample, one column per location."""
    if chain.labels is None:
        raise ValidationError("chain was run without store_labels")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_index", *ids])
        for idx, z in zip(chain.sample_index, chain.labels):
            w.writerow([int(idx), *(z + 1).tolist()])
