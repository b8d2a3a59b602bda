"""Incremental locally weighted regression with receptive fields.

The model keeps a set of local affine models, each with a Gaussian
activation kernel given by a center and a distance metric.  Queries blend
the local predictions with normalized kernel weights and also return a
variance that combines local noise estimates with the disagreement
between local models, so the prediction is usable as a probabilistic
one-step dynamics model.

Local models are fit online by activation-weighted recursive least
squares (ridge-regularized, optional forgetting) on inputs centered at
the field's own center.  New fields are spawned whenever no existing
kernel activates above the generation threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

MAGIC = "LWPR1"


class LwprFormatError(ValueError):
    """Raised for malformed persistence payloads; carries a byte offset."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _as_metric(d_init, dim: int) -> NDArray[np.float64]:
    """Normalize a scalar / per-dim vector / full matrix into a metric matrix."""
    d = np.asarray(d_init, dtype=np.float64)
    if d.ndim == 0:
        m = np.eye(dim) * float(d)
    elif d.ndim == 1:
        if d.shape != (dim,):
            raise ValueError(f"d_init vector must have length {dim}")
        m = np.diag(d)
    elif d.shape == (dim, dim):
        m = 0.5 * (d + d.T)
    else:
        raise ValueError(f"d_init must be scalar, ({dim},) or ({dim},{dim})")
    if not np.all(np.linalg.eigvalsh(m) > 0):
        raise ValueError("metric must be positive definite")
    return m


@dataclass
class Prediction:
    """Blended prediction at one query point."""

    mean: float
    variance: float
    max_activation: float  # largest unnormalized kernel value


@dataclass
class ReceptiveField:
    """One local affine model with its Gaussian kernel and RLS state."""

    center: NDArray[np.float64]
    metric: NDArray[np.float64]
    coef: NDArray[np.float64]            # [offset, slope...] on centered inputs
    local_variance: float = 0.0
    var_acc: float = 0.0
    weight_count: float = 0.0
    inv_gram: NDArray[np.float64] = field(default=None)  # RLS P matrix

    def activation(self, x: NDArray) -> float:
        d = np.asarray(x, dtype=np.float64) - self.center
        return float(np.exp(-0.5 * d @ self.metric @ d))

    def local_predict(self, x: NDArray) -> float:
        d = np.asarray(x, dtype=np.float64) - self.center
        return float(self.coef[0] + self.coef[1:] @ d)


class LwprModel:
    """Set of receptive fields over a fixed-dimension input space.

    Args:
        input_dim: Number of input components.
        w_gen: Generation threshold in (0, 1); a new field is spawned when
            no existing kernel activates above it.
        d_init: Metric for newly created fields (scalar, per-dim diagonal
            vector, or full SPD matrix).  Inputs are not normalized
            internally, so choose this in input units.
        forgetting: Exponential forgetting factor in (0, 1] for the RLS
            statistics (1.0 keeps all history).
        ridge: Ridge regularizer (>= 0) seeding each field's RLS state.
        participation: Minimum unnormalized activation for a field to
            receive a share of an update.
    """

    def __init__(
        self,
        input_dim: int,
        w_gen: float = 0.1,
        d_init=1.0,
        forgetting: float = 1.0,
        ridge: float = 1e-3,
        participation: float = 1e-3,
    ):
        if input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if not 0.0 < w_gen < 1.0:
            raise ValueError("w_gen must be in (0, 1)")
        if not 0.0 < forgetting <= 1.0:
            raise ValueError("forgetting must be in (0, 1]")
        if ridge < 0.0:
            raise ValueError("ridge must be >= 0")
        self.input_dim = int(input_dim)
        self.w_gen = float(w_gen)
        self.d_init = _as_metric(d_init, input_dim)
        self.forgetting = float(forgetting)
        self.ridge = float(ridge)
        self.participation = float(participation)
        self.fields: list[ReceptiveField] = []
        self._stacked = None  # cache for vectorized prediction

    # ------------------------------------------------------------------
    # prediction

    @property
    def num_fields(self) -> int:
        return len(self.fields)

    def _check_query(self, x) -> NDArray[np.float64]:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.shape != (self.input_dim,):
            raise ValueError(f"query must have {self.input_dim} components")
        if not np.all(np.isfinite(x)):
            raise ValueError("query contains non-finite values")
        return x

    def _stacks(self):
        """(centers, metrics, coefs, variances) stacked over fields."""
        if self._stacked is None:
            self._stacked = (
                np.stack([f.center for f in self.fields]),
                np.stack([f.metric for f in self.fields]),
                np.stack([f.coef for f in self.fields]),
                np.array([f.local_variance for f in self.fields]),
            )
        return self._stacked

    def unnormalized_activations(self, x) -> NDArray[np.float64]:
        x = self._check_query(x)
        if not self.fields:
            return np.empty(0)
        centers, metrics, _, _ = self._stacks()
        diff = x[None, :] - centers
        quad = np.einsum("ld,lde,le->l", diff, metrics, diff)
        return np.exp(-0.5 * quad)

    def activations(self, x) -> NDArray[np.float64]:
        """Normalized kernel weights at x, ordered like the field list."""
        if not self.fields:
            raise ValueError("no receptive fields")
        w = self.unnormalized_activations(x)
        return w / w.sum()

    def predict(self, x) -> Prediction:
        """Blended mean/variance prediction at x.

        The variance combines each participating field's local noise
        estimate with its squared disagreement against the blended mean.
        """
        if not self.fields:
            raise ValueError("no receptive fields")
        x = self._check_query(x)
        means, variances = self.predict_batch(x[None, :])
        w_raw = self.unnormalized_activations(x)
        return Prediction(
            mean=float(means[0]),
            variance=float(variances[0]),
            max_activation=float(w_raw.max()),
        )

    def predict_batch(self, X) -> tuple[NDArray, NDArray]:
        """Vectorized predict over rows of X (shape (B, input_dim))."""
        if not self.fields:
            raise ValueError("no receptive fields")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ValueError(f"X must have shape (B, {self.input_dim})")
        if not np.all(np.isfinite(X)):
            raise ValueError("query contains non-finite values")
        centers, metrics, coefs, lvar = self._stacks()
        diff = X[:, None, :] - centers[None, :, :]          # (B, L, d)
        quad = np.einsum("bld,lde,ble->bl", diff, metrics, diff)
        w = np.exp(-0.5 * quad)
        w /= w.sum(axis=1, keepdims=True)
        y = coefs[None, :, 0] + np.einsum("bld,ld->bl", diff, coefs[:, 1:])
        mean = (w * y).sum(axis=1)
        dev = mean[:, None] - y
        var = (w * (dev * dev + lvar[None, :])).sum(axis=1)
        return mean, var

    # ------------------------------------------------------------------
    # training

    def _new_field(self, x: NDArray[np.float64]) -> ReceptiveField:
        d = self.input_dim
        inv_gram = np.eye(d + 1) / max(self.ridge, 1e-12)
        return ReceptiveField(
            center=x.copy(),
            metric=self.d_init.copy(),
            coef=np.zeros(d + 1),
            inv_gram=inv_gram,
        )

    def _rls_update(self, f: ReceptiveField, x: NDArray, y: float, w: float):
        z = np.concatenate(([1.0], x - f.center))
        ff = self.forgetting
        p = f.inv_gram / ff
        pz = p @ z
        gain = (w / (1.0 + w * (z @ pz))) * pz
        f.coef = f.coef + gain * (y - z @ f.coef)
        p = p - np.outer(gain, pz)
        f.inv_gram = 0.5 * (p + p.T)
        residual = y - z @ f.coef
        f.var_acc = ff * f.var_acc + w * residual * residual
        f.weight_count = ff * f.weight_count + w
        f.local_variance = f.var_acc / f.weight_count

    def update(self, x, y: float) -> "LwprModel":
        """Incorporate one training sample (x, y).

        Spawns a new field centered at x when nothing activates above
        w_gen (the sample then trains only the new field); otherwise every
        field activating above the participation threshold receives an
        activation-weighted RLS update and a matching update of its local
        residual variance.
        """
        x = self._check_query(x)
        y = float(y)
        if not np.isfinite(y):
            raise ValueError("target is non-finite")
        w_raw = self.unnormalized_activations(x) if self.fields else np.empty(0)
        if w_raw.size == 0 or w_raw.max() < self.w_gen:
            f = self._new_field(x)
            self.fields.append(f)
            self._rls_update(f, x, y, 1.0)
        else:
            for f, w in zip(self.fields, w_raw):
                if w >= self.participation:
                    self._rls_update(f, x, y, float(w))
        self._stacked = None
        return self


# ----------------------------------------------------------------------
# persistence

def save_model(model: LwprModel) -> bytes:
    """Serialize a model; the round trip reproduces predictions bit-exactly."""
    payload = {
        "input_dim": model.input_dim,
        "hyperparams": {
            "w_gen": model.w_gen,
            "d_init": model.d_init.tolist(),
            "forgetting": model.forgetting,
            "ridge": model.ridge,
            "participation": model.participation,
        },
        "fields": [
            {
                "center": f.center.tolist(),
                "metric": f.metric.tolist(),
                "coef": f.coef.tolist(),
                "local_variance": f.local_variance,
                "var_acc": f.var_acc,
                "weight_count": f.weight_count,
                "inv_gram": f.inv_gram.tolist(),
            }
            for f in model.fields
        ],
    }
    return (MAGIC + "\n" + json.dumps(payload, sort_keys=True)).encode()


def load_model(data: bytes) -> LwprModel:
    """Inverse of save_model; raises LwprFormatError on malformed input."""
    header = MAGIC.encode() + b"\n"
    if not data.startswith(header):
        raise LwprFormatError("bad magic header", offset=0)
    body_off = len(header)
    try:
        payload = json.loads(data[body_off:].decode())
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        pos = getattr(e, "pos", 0)
        raise LwprFormatError(f"invalid payload: {e}", offset=body_off + pos) from e
    try:
        hp = payload["hyperparams"]
        model = LwprModel(
            input_dim=payload["input_dim"],
            w_gen=hp["w_gen"],
            d_init=np.array(hp["d_init"]),
            forgetting=hp["forgetting"],
            ridge=hp["ridge"],
            participation=hp["participation"],
        )
        for fd in payload["fields"]:
            model.fields.append(
                ReceptiveField(
                    center=np.array(fd["center"], dtype=np.float64),
                    metric=np.array(fd["metric"], dtype=np.float64),
                    coef=np.array(fd["coef"], dtype=np.float64),
                    local_variance=float(fd["local_variance"]),
                    var_acc=float(fd["var_acc"]),
                    weight_count=float(fd["weight_count"]),
                    inv_gram=np.array(fd["inv_gram"], dtype=np.float64),
                )
            )
    except (KeyError, TypeError, ValueError) as e:
        raise LwprFormatError(f"incomplete payload: {e}", offset=body_off) from e
    return model


# ----------------------------------------------------------------------
# fast evaluation path for the rollout engine

class FrozenLwpr:
    """Immutable float32 snapshot of a model for batched rollout queries.

    Folds the kernel quadratic form into two small GEMMs:
        exponent = (X*X) @ a1 + X @ a2 + a0
    which is much faster than per-field distance loops for the batch sizes
    the rollout engine uses.  Workspaces are owned by the instance, so one
    instance must not be shared across concurrently evaluating workers.
    """

    def __init__(self, model: LwprModel, batch_rows: int):
        if not model.fields:
            raise ValueError("no receptive fields")
        centers, metrics, coefs, lvar = model._stacks()
        L = len(model.fields)
        dc = np.einsum("lde,le->ld", metrics, centers)
        self.a1 = (-0.5 * np.einsum("ldd->ld", metrics)).T.astype(np.float32).copy()
        self.a2 = dc.T.astype(np.float32).copy()
        self.a0 = (-0.5 * np.einsum("ld,ld->l", dc, centers)).astype(np.float32)
        self._cross = metrics - metrics * np.eye(metrics.shape[1])[None]
        self._diagonal_only = bool(np.all(self._cross == 0.0))
        if not self._diagonal_only:
            # full-metric fallback: exponent needs the off-diagonal terms too
            self.axx = (-0.5 * metrics.reshape(L, -1)).T.astype(np.float32).copy()
            self.a2f = dc.T.astype(np.float32).copy()
        self.slopes = coefs[:, 1:].T.astype(np.float32).copy()
        self.y0 = (coefs[:, 0] - np.einsum("ld,ld->l", coefs[:, 1:], centers)).astype(
            np.float32
        )
        self.lvar = lvar.astype(np.float32)
        self.input_dim = model.input_dim
        b, d = batch_rows, model.input_dim
        self._x2 = np.empty((b, d), np.float32)
        self._q = np.empty((b, L), np.float32)
        self._t = np.empty((b, L), np.float32)
        self._y = np.empty((b, L), np.float32)
        self._den = np.empty(b, np.float32)
        if not self._diagonal_only:
            self._xq = np.empty((b, d * d), np.float32)

    def predict_into(self, X: NDArray[np.float32], out_mean, out_var=None):
        """Mean (and optionally variance) for rows of X, written in place.

        X must be float32 with shape (B, input_dim) for B <= the batch size
        given at construction.
        """
        b = X.shape[0]
        x2, q, t, y, den = (
            self._x2[:b],
            self._q[:b],
            self._t[:b],
            self._y[:b],
            self._den[:b],
        )
        if self._diagonal_only:
            np.multiply(X, X, out=x2)
            np.matmul(x2, self.a1, out=q)
            np.matmul(X, self.a2, out=t)
        else:
            xq = self._xq[:b]
            bb, d = X.shape
            np.multiply(X[:, :, None], X[:, None, :], out=xq.reshape(bb, d, d))
            np.matmul(xq, self.axx, out=q)
            np.matmul(X, self.a2f, out=t)
        q += t
        q += self.a0[None, :]
        np.exp(q, out=q)                       # q now holds kernel weights
        q.sum(axis=1, out=den)
        q /= den[:, None]                      # normalized weights
        np.matmul(X, self.slopes, out=y)
        y += self.y0[None, :]
        np.multiply(q, y, out=t)
        t.sum(axis=1, out=out_mean)
        if out_var is not None:
            np.subtract(out_mean[:, None], y, out=t)
            np.multiply(t, t, out=t)
            t += self.lvar[None, :]
            t *= q
            t.sum(axis=1, out=out_var)
