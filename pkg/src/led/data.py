"""Dataset readers and synthetic generators."""

import gzip
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import ConfigError, ParseError

MNIST_PIXELS = 784
CANONICAL_COUNTS = {"train": 50000, "valid": 10000, "test": 10000}
_TOKENS = {"0": 0.0, "1": 1.0, "0.": 0.0, "1.": 1.0, "0.0": 0.0, "1.0": 1.0}


def read_amat(path, expected_lines=None, width=MNIST_PIXELS):
    """Parse one ``.amat`` file: one example per line, ``width`` tokens in {0, 1}."""
    path = Path(path)
    rows = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if len(tokens) != width:
                raise ParseError(path, lineno, f"expected {width} values, found {len(tokens)}")
            try:
                rows.append([_TOKENS[t] for t in tokens])
            except KeyError:
                bad = next(t for t in tokens if t not in _TOKENS)
                raise ParseError(path, lineno, f"token {bad!r} is not a binary value") from None
    if expected_lines is not None and len(rows) != expected_lines:
        raise ParseError(path, len(rows), f"expected {expected_lines} lines, found {len(rows)}")
    return np.array(rows, dtype=np.float64).reshape(len(rows), width)


def load_binarized_mnist(directory, expected_counts=CANONICAL_COUNTS):
    """Train/valid/test arrays from ``binarized_mnist_{split}.amat``.

    ``expected_counts=None`` skips the line-count check (for stand-in data).
    """
    directory = Path(directory)
    out = {}
    for split in ("train", "valid", "test"):
        n = None if expected_counts is None else expected_counts[split]
        out[split] = read_amat(directory / f"binarized_mnist_{split}.amat", n)
    return out["train"], out["valid"], out["test"]


def write_amat(path, X):
    X = np.asarray(X)
    with open(path, "w", encoding="ascii") as fh:
        for row in X:
            fh.write(" ".join("1" if v else "0" for v in row))
            fh.write("\n")


def prepare_desk_mnist(csv_gz, out_dir, seed=0, counts=(4000, 500, 500)):
    """Write ``.amat`` splits from a gzipped CSV of 8-bit MNIST pixels (label last).

    Pixels are binarised once by sampling Bernoulli(intensity / 255) with a fixed
    seed; rows are shuffled before splitting.
    """
    with gzip.open(csv_gz, "rt") as fh:
        raw = np.loadtxt(fh, delimiter=",")
    pixels = raw[:, :MNIST_PIXELS] / 255.0
    gen = np.random.default_rng(seed)
    binary = gen.random(pixels.shape) < pixels
    binary = binary[gen.permutation(len(binary))]
    if sum(counts) > len(binary):
        raise ConfigError(f"requested {sum(counts)} examples, source has {len(binary)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    start = 0
    for split, n in zip(("train", "valid", "test"), counts):
        write_amat(out_dir / f"binarized_mnist_{split}.amat", binary[start : start + n])
        start += n
    return out_dir


# ---------------------------------------------------------------------------
# 2-D Gaussian mixture


@dataclass
class GaussianMixture:
    means: np.ndarray
    covs: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.covs = np.asarray(self.covs, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        k = len(self.means)
        if self.covs.shape != (k, self.dim, self.dim) or self.weights.shape != (k,):
            raise ConfigError("mixture means, covariances and weights disagree in size")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ConfigError(f"mixture weights must be non-negative and sum to 1, got {self.weights}")

    @property
    def dim(self):
        return self.means.shape[1]

    @classmethod
    def ring(cls, components=4, radius=2.0, std=0.35):
        """Equal-weight isotropic components evenly spaced on a circle."""
        angles = 2 * np.pi * np.arange(components) / components
        means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        covs = np.repeat(np.eye(2)[None] * std**2, components, axis=0)
        return cls(means, covs, np.full(components, 1.0 / components))

    def sample(self, n, gen, return_labels=False):
        labels = gen.choice(len(self.weights), size=n, p=self.weights)
        chol = np.linalg.cholesky(self.covs)
        eps = gen.standard_normal((n, self.dim))
        x = self.means[labels] + np.einsum("nij,nj->ni", chol[labels], eps)
        return (x, labels) if return_labels else x

    def pdf(self, pts):
        pts = np.atleast_2d(pts)
        return sum(w * stats.multivariate_normal(m, c).pdf(pts).reshape(len(pts))
                   for m, c, w in zip(self.means, self.covs, self.weights))

    def log_pdf(self, pts):
        pts = np.atleast_2d(pts)
        comps = np.stack([np.log(w) + stats.multivariate_normal(m, c).logpdf(pts).reshape(len(pts))
                          for m, c, w in zip(self.means, self.covs, self.weights)])
        mx = comps.max(axis=0)
        return mx + np.log(np.exp(comps - mx).sum(axis=0))


def toy_mixture_sampler(mixture, n, gen):
    """``n`` i.i.d. draws of the toy mixture; ``mixture.pdf`` is the analytic density."""
    return mixture.sample(n, gen)
