"""Instance appearance features for multimodal synthesis.

An image encoder maps a frame to a low-dimensional feature map, which
is then averaged per object instance so every pixel of an instance
carries the same appearance vector. After training, per-class Gaussian
mixtures fitted to the pooled vectors let inference sample a new
appearance for each instance.
"""

import numpy as np
import torch
import torch.nn as nn

from .errors import NumericalError


class InstanceEncoder(nn.Module):
    """Small conv encoder: frame (3, H, W) -> feature map (d, H, W)."""

    def __init__(self, feature_dim=3, base_channels=16):
        super().__init__()
        ch = base_channels
        self.net = nn.Sequential(
            nn.Conv2d(3, ch, 3, 1, 1),
            nn.InstanceNorm2d(ch),
            nn.ReLU(True),
            nn.Conv2d(ch, ch * 2, 3, 2, 1),
            nn.InstanceNorm2d(ch * 2),
            nn.ReLU(True),
            nn.Conv2d(ch * 2, ch * 2, 3, 1, 1),
            nn.InstanceNorm2d(ch * 2),
            nn.ReLU(True),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(ch * 2, feature_dim, 3, 1, 1),
            nn.Tanh(),
        )

    def forward(self, x):
        return self.net(x)


def instance_average_pool(features, instance_map):
    """Replace every pixel's feature by the mean over its instance.

    features: (B, d, H, W) or (d, H, W); instance_map: matching (B, H, W)
    or (H, W) integer IDs. Idempotent: pooling a pooled map is a no-op.
    """
    squeeze = features.dim() == 3
    feats = features.unsqueeze(0) if squeeze else features
    inst = instance_map.unsqueeze(0) if squeeze else instance_map
    if inst.shape[-2:] != feats.shape[-2:]:
        raise ValueError("instance map spatial size must match features")
    b, d, h, w = feats.shape
    out = torch.empty_like(feats)
    for i in range(b):
        ids = inst[i].reshape(-1).long()
        n = int(ids.max().item()) + 1
        flat = feats[i].reshape(d, -1)
        sums = torch.zeros(d, n, dtype=feats.dtype, device=feats.device)
        sums.index_add_(1, ids, flat)
        counts = torch.zeros(n, dtype=feats.dtype, device=feats.device)
        counts.index_add_(0, ids, torch.ones_like(ids, dtype=feats.dtype))
        means = sums / counts.clamp_min(1.0)
        out[i] = means[:, ids].reshape(d, h, w)
    return out.squeeze(0) if squeeze else out


def encode_instance_features(encoder, frame, instance_map):
    """Encoder forward followed by instance-wise average pooling."""
    return instance_average_pool(encoder(frame), instance_map)


class GaussianMixture:
    """Diagonal-free full-covariance mixture over d-dimensional vectors."""

    def __init__(self, weights, means, covariances):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.means = np.asarray(means, dtype=np.float64)
        self.covariances = np.asarray(covariances, dtype=np.float64)

    @property
    def n_components(self):
        return len(self.weights)

    def sample(self, rng):
        k = rng.choice(self.n_components, p=self.weights)
        return rng.multivariate_normal(self.means[k], self.covariances[k], method="svd")

    def to_dict(self):
        return {
            "weights": self.weights,
            "means": self.means,
            "covariances": self.covariances,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["weights"], d["means"], d["covariances"])


def _fit_single_gaussian(x):
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / len(x)
    return GaussianMixture([1.0], [mean], [cov])


def fit_gaussian_mixture(x, n_components, seed=0, n_iter=100, reg=1e-6, tol=1e-7):
    """Maximum-likelihood EM fit; closed form for one component."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("expected (N, d) feature matrix")
    n, d = x.shape
    n_components = min(n_components, n)
    if n_components == 1:
        return _fit_single_gaussian(x)

    rng = np.random.default_rng(seed)
    means = x[rng.choice(n, size=n_components, replace=False)]
    base_cov = np.cov(x, rowvar=False, bias=True) + reg * np.eye(d)
    covs = np.stack([base_cov] * n_components)
    weights = np.full(n_components, 1.0 / n_components)

    prev_ll = -np.inf
    for _ in range(n_iter):
        # E step: log responsibilities
        log_prob = np.empty((n, n_components))
        for k in range(n_components):
            diff = x - means[k]
            try:
                chol = np.linalg.cholesky(covs[k])
            except np.linalg.LinAlgError as e:
                raise NumericalError(f"mixture covariance not PD: {e}") from e
            sol = np.linalg.solve(chol, diff.T)
            maha = (sol**2).sum(axis=0)
            logdet = 2.0 * np.log(np.diag(chol)).sum()
            log_prob[:, k] = (
                np.log(weights[k]) - 0.5 * (d * np.log(2 * np.pi) + logdet + maha)
            )
        log_norm = np.logaddexp.reduce(log_prob, axis=1)
        resp = np.exp(log_prob - log_norm[:, None])
        ll = log_norm.mean()

        # M step
        nk = resp.sum(axis=0) + 1e-12
        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        for k in range(n_components):
            diff = x - means[k]
            covs[k] = (resp[:, k, None] * diff).T @ diff / nk[k] + reg * np.eye(d)

        if abs(ll - prev_ll) < tol:
            break
        prev_ll = ll
    return GaussianMixture(weights, means, covs)


class InstanceFeatureModel:
    """Per-class Gaussian mixtures over pooled instance features."""

    def __init__(self, per_class):
        self.per_class = dict(per_class)  # class id -> GaussianMixture

    @classmethod
    def fit(cls, features, classes, n_components=3, seed=0):
        """features: (N, d) pooled vectors; classes: (N,) class IDs.

        Classes with no instances are simply omitted from the model.
        """
        features = np.asarray(features, dtype=np.float64)
        classes = np.asarray(classes)
        per_class = {}
        for c in sorted(set(int(v) for v in classes)):
            xc = features[classes == c]
            per_class[c] = fit_gaussian_mixture(xc, n_components, seed=seed + c)
        return cls(per_class)

    def sample_map(self, instance_map, instance_classes, seed):
        """Paint one sampled vector per instance over its pixels.

        instance_map: (H, W) integer IDs; instance_classes: dict of
        instance ID -> class ID. Deterministic given the seed.
        """
        rng = np.random.default_rng(seed)
        inst = np.asarray(instance_map)
        any_mix = next(iter(self.per_class.values()))
        d = any_mix.means.shape[1]
        out = np.zeros((d,) + inst.shape, dtype=np.float32)
        for i in sorted(int(v) for v in np.unique(inst)):
            c = int(instance_classes[i])
            if c not in self.per_class:
                raise ValueError(f"no feature model for class {c}")
            vec = self.per_class[c].sample(rng)
            out[:, inst == i] = vec[:, None].astype(np.float32)
        return out

    def to_dict(self):
        return {str(c): m.to_dict() for c, m in self.per_class.items()}

    @classmethod
    def from_dict(cls, d):
        return cls({int(c): GaussianMixture.from_dict(m) for c, m in d.items()})
