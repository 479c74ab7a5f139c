"""Analytic stand-ins for the radiance field, used as test oracles."""

import numpy as np


class AnalyticField:
    """Density and color given by closed-form functions of position."""

    dtype = np.dtype(np.float64)

    def __init__(self, sigma_fn, color_fn=None):
        self.sigma_fn = sigma_fn
        self.color_fn = color_fn or (lambda q: np.clip(q, 0, 1))

    def forward(self, q, d, need_grad=False):
        q = np.asarray(q, dtype=np.float64)
        return self.sigma_fn(q), self.color_fn(q), None

    def density_and_features(self, q):
        q = np.asarray(q, dtype=np.float64)
        return self.sigma_fn(q), q

    def color(self, features, d):
        return self.color_fn(features)


def hard_sphere(center=(0.5, 0.5, 0.5), radius=0.2, sigma=1e4):
    c = np.asarray(center)

    def fn(q):
        return np.where(np.linalg.norm(q - c, axis=-1) <= radius, sigma, 0.0)

    return AnalyticField(fn)


def gaussian_blob(center=(0.5, 0.5, 0.5), width=0.15, peak=8.0):
    c = np.asarray(center)

    def fn(q):
        return peak * np.exp(-np.sum((q - c) ** 2, axis=-1) / (2 * width ** 2))

    def col(q):
        return 0.5 + 0.4 * np.sin(3 * q + np.array([0.0, 1.0, 2.0]))

    return AnalyticField(fn, col)


vacuum = AnalyticField(lambda q: np.zeros(q.shape[0]))
