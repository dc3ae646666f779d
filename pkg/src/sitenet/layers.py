"""Batch normalization with shared or per-site statistics.

A NormLayerState owns one channel-wise affine pair plus running estimates of
the batch moments. DsbnState keeps one complete NormLayerState per site and
dispatches on a site id, so no statistic or affine parameter is ever shared
across sites.
"""

import numpy as np

from .autodiff import ShapeError, Tensor, _record


class NormalizationError(ValueError):
    """Batch too small to estimate per-channel statistics."""


class UnknownSiteError(KeyError):
    """Site id has no normalization state registered."""


class NormLayerState:
    """Affine parameters and running moments for one normalization layer."""

    def __init__(self, num_channels, momentum=0.1, epsilon=1e-5):
        if num_channels < 1:
            raise ShapeError(f"num_channels must be >= 1, got {num_channels}")
        self.num_channels = num_channels
        self.momentum = float(momentum)
        self.epsilon = float(epsilon)
        self.gamma = Tensor(np.ones(num_channels), requires_grad=True)
        self.beta = Tensor(np.zeros(num_channels), requires_grad=True)
        self.running_mean = np.zeros(num_channels)
        self.running_var = np.ones(num_channels)

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]


def batch_norm(x, state, training):
    """Normalize [N, C, H, W] per channel with affine scale and shift.

    Training mode uses biased batch moments and folds them into the running
    estimates: running <- (1 - momentum) * running + momentum * batch.
    Eval mode applies the stored running moments and mutates nothing.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm expects a 4-D tensor, got {x.data.shape}")
    n, c, h, w = x.data.shape
    if c != state.num_channels:
        raise ShapeError(
            f"input has {c} channels but the layer normalizes {state.num_channels}"
        )
    gamma, beta = state.gamma, state.beta
    gcol = gamma.data.reshape(1, c, 1, 1)

    if training:
        m = n * h * w
        if m < 2:
            raise NormalizationError(
                f"need at least 2 values per channel to normalize, got {m}"
            )
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))  # biased
        state.running_mean = (1.0 - state.momentum) * state.running_mean + state.momentum * mu
        state.running_var = (1.0 - state.momentum) * state.running_var + state.momentum * var
        inv_std = 1.0 / np.sqrt(var + state.epsilon)
        xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        out_data = gcol * xhat + beta.data.reshape(1, c, 1, 1)

        def backward(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
            dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
            dx = None
            if x.requires_grad:
                dxhat = g * gcol
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = (inv_std.reshape(1, c, 1, 1) / m) * (m * dxhat - s1 - xhat * s2)
            return dx, dgamma, dbeta

        return _record(out_data, (x, gamma, beta), backward)

    inv_std = 1.0 / np.sqrt(state.running_var + state.epsilon)
    xhat = (x.data - state.running_mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out_data = gcol * xhat + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        dx = g * gcol * inv_std.reshape(1, c, 1, 1) if x.requires_grad else None
        return dx, dgamma, dbeta

    return _record(out_data, (x, gamma, beta), backward)


class DsbnState:
    """One complete NormLayerState per site, dispatched by site id."""

    def __init__(self, num_channels, sites, momentum=0.1, epsilon=1e-5):
        sites = tuple(sites)
        if not sites:
            raise ValueError("DsbnState needs at least one site id")
        self.num_channels = num_channels
        self.per_site = {
            s: NormLayerState(num_channels, momentum=momentum, epsilon=epsilon)
            for s in sites
        }

    def state_for(self, site):
        try:
            return self.per_site[site]
        except KeyError:
            raise UnknownSiteError(
                f"no normalization state for site {site!r}; known: {sorted(self.per_site)}"
            ) from None

    def parameters(self):
        out = []
        for s in sorted(self.per_site):
            for name, p in self.per_site[s].parameters():
                out.append((f"site{s}.{name}", p))
        return out


def dsbn(x, state, site, training):
    """Batch-normalize x with the state belonging to ``site`` only."""
    return batch_norm(x, state.state_for(site), training)
