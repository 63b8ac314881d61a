"""Exact numerical checks of the aliasing, mutual-information and evidence-bound arguments.

Everything here works on small discrete objects so each claim is verified by
enumeration rather than estimation. Mutual information is in bits, the ELBO
and evidence in nats.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DivisibilityError, InvalidDistribution

_DIST_TOL = 1e-9


# ------------------------------------------------------------ spectral folding

@dataclass(frozen=True)
class SpectrumGrid:
    coeffs: np.ndarray  # complex (N, N), unnormalized forward DFT

    @classmethod
    def of(cls, x: np.ndarray) -> "SpectrumGrid":
        return cls(np.fft.fft2(np.asarray(x, dtype=np.float64)))

    @property
    def n(self) -> int:
        return self.coeffs.shape[0]

    def inverse(self) -> np.ndarray:
        return np.fft.ifft2(self.coeffs)


def decimate(x: np.ndarray, s: int) -> np.ndarray:
    """Keep every s-th sample along both axes, starting at (0, 0)."""
    return np.asarray(x)[::s, ::s]


def spectral_fold_predict(spectrum: SpectrumGrid, s: int) -> SpectrumGrid:
    """Spectrum of the factor-``s`` decimated signal from the original spectrum.

    Bin ``(m1, m2)`` of the ``(N/s, N/s)`` result is ``1/s²`` times the sum of
    the ``s²`` original bins ``(m1 + k1·N/s, m2 + k2·N/s)``.
    """
    c = spectrum.coeffs
    n1, n2 = c.shape
    if s < 1 or n1 % s or n2 % s:
        raise DivisibilityError(f"s={s} does not divide grid {n1}x{n2}")
    b1, b2 = n1 // s, n2 // s
    out = np.zeros((b1, b2), dtype=np.complex128)
    for k1 in range(s):
        for k2 in range(s):
            out += c[k1 * b1:(k1 + 1) * b1, k2 * b2:(k2 + 1) * b2]
    return SpectrumGrid(out / s**2)


def spectral_fold_check(image: np.ndarray, s: int) -> float:
    """Max |predicted − direct| over the folded spectrum of a 2-D (or per-channel 3-D) image."""
    image = np.asarray(image, dtype=np.float64)
    channels = [image] if image.ndim == 2 else [image[..., k] for k in range(image.shape[2])]
    err = 0.0
    for x in channels:
        predicted = spectral_fold_predict(SpectrumGrid.of(x), s).coeffs
        direct = np.fft.fft2(decimate(x, s))
        err = max(err, float(np.max(np.abs(predicted - direct))))
    return err


# ---------------------------------------------------------- mutual information

@dataclass(frozen=True)
class ToyJoint:
    """Joint probability table; axis ``i`` is the variable named ``names[i]``."""

    table: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.ndim != len(self.names):
            raise InvalidDistribution(f"table has {t.ndim} axes but {len(self.names)} names")
        if np.any(t < 0) or not np.isfinite(t).all() or abs(t.sum() - 1.0) > _DIST_TOL:
            raise InvalidDistribution("joint table must be nonnegative and sum to 1")
        object.__setattr__(self, "table", t)

    def marginal(self, names: Sequence[str]) -> np.ndarray:
        keep = [self.names.index(n) for n in names]
        drop = tuple(i for i in range(len(self.names)) if i not in keep)
        m = self.table.sum(axis=drop)
        # reorder remaining axes to the requested order
        remaining = [i for i in range(len(self.names)) if i in keep]
        return np.transpose(m, [remaining.index(i) for i in keep])


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64).ravel()
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def mutual_information(joint: ToyJoint, vars_a: Sequence[str], vars_b: Sequence[str]) -> float:
    """Plug-in ``Σ p·log2(p / (p_a·p_b))`` in bits, with 0·log 0 = 0."""
    vars_a, vars_b = list(vars_a), list(vars_b)
    if set(vars_a) & set(vars_b):
        raise ValueError("variable groups must be disjoint")
    pab = joint.marginal(vars_a + vars_b)
    pa = joint.marginal(vars_a)
    pb = joint.marginal(vars_b)
    la, lb = pa.size, pb.size
    pab = pab.reshape(la, lb)
    outer = np.outer(pa.ravel(), pb.ravel())
    nz = pab > 0
    return float((pab[nz] * np.log2(pab[nz] / outer[nz])).sum())


def xor_joint() -> ToyJoint:
    """Z, F independent fair bits and M = Z xor F."""
    t = np.zeros((2, 2, 2))
    for z in range(2):
        for f in range(2):
            t[z, f, z ^ f] = 0.25
    return ToyJoint(t, ("Z", "F", "M"))


def _random_simplex(rng, shape):
    x = rng.gamma(1.0, size=shape)
    return x / x.sum(axis=-1, keepdims=True)


def random_detail_joint(seed: int, nz: int = 3, nd: int = 3, nm: int = 2, nf: int = 3) -> ToyJoint:
    """Random joint over (Z, F, M) where M depends on Z and a detail D that Z does not see.

    F is a deterministic function of (D, M): a coarse code carrying part of the
    lost detail and of the mask value. D is summed out of the returned table.
    """
    rng = np.random.default_rng(seed)
    p_z = _random_simplex(rng, nz)
    p_d = _random_simplex(rng, nd)
    p_m = _random_simplex(rng, (nz, nd, nm))
    f_of = rng.integers(0, nf, size=(nd, nm))
    t = np.zeros((nz, nf, nm))
    for z in range(nz):
        for d in range(nd):
            for m in range(nm):
                t[z, f_of[d, m], m] += p_z[z] * p_d[d] * p_m[z, d, m]
    return ToyJoint(t / t.sum(), ("Z", "F", "M"))


def with_independent_f(joint_zm: np.ndarray, p_f: np.ndarray) -> ToyJoint:
    """Extend a (Z, M) joint with an F that is independent of both."""
    t = joint_zm[:, None, :] * np.asarray(p_f)[None, :, None]
    return ToyJoint(t, ("Z", "F", "M"))


def mi_gain_experiment(seed: int) -> tuple[float, float]:
    """``(I(Z;M), I(Z,F;M))`` on the seeded random detail joint."""
    joint = random_detail_joint(seed)
    return mutual_information(joint, ["Z"], ["M"]), mutual_information(joint, ["Z", "F"], ["M"])


# ---------------------------------------------------------------------- ELBO

@dataclass(frozen=True)
class ToyLatentModel:
    prior: np.ndarray  # (K,)      p(z)
    likelihood: np.ndarray  # (K, V)    p(m | z)
    q: np.ndarray  # (V, K)    q(z | m)

    def __post_init__(self):
        for name in ("prior", "likelihood", "q"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if np.any(a < 0) or np.any(np.abs(a.sum(axis=-1) - 1.0) > _DIST_TOL):
                raise InvalidDistribution(f"{name} rows must be probability distributions")
            object.__setattr__(self, name, a)
        k, v = self.likelihood.shape
        if self.prior.shape != (k,) or self.q.shape != (v, k):
            raise InvalidDistribution("prior/likelihood/q shapes are inconsistent")

    def posterior(self, m: int) -> np.ndarray:
        joint = self.prior * self.likelihood[:, m]
        return joint / joint.sum()

    def with_exact_posterior(self) -> "ToyLatentModel":
        q = np.stack([self.posterior(m) for m in range(self.likelihood.shape[1])])
        return ToyLatentModel(self.prior, self.likelihood, q)


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    nz = p > 0
    return float((p[nz] * (np.log(p[nz]) - np.log(q[nz]))).sum())


def evidence(model: ToyLatentModel, m: int) -> float:
    """``log Σ_z p(z)·p(m|z)``."""
    return float(np.log((model.prior * model.likelihood[:, m]).sum()))


def elbo(model: ToyLatentModel, m: int) -> float:
    """``E_q[log p(m|z)] − KL(q(·|m) ‖ p(z))`` by exact enumeration."""
    q = model.q[m]
    nz = q > 0
    recon = float((q[nz] * np.log(model.likelihood[nz, m])).sum()) if np.all(model.likelihood[nz, m] > 0) \
        else -np.inf
    return recon - _kl(q, model.prior)


def posterior_kl(model: ToyLatentModel, m: int) -> float:
    """``KL(q(·|m) ‖ p(z|m))``, which equals ``evidence − elbo``."""
    return _kl(model.q[m], model.posterior(m))


def random_toy(seed: int, k: int = 4, v: int = 3) -> ToyLatentModel:
    rng = np.random.default_rng(seed)
    return ToyLatentModel(_random_simplex(rng, k), _random_simplex(rng, (k, v)), _random_simplex(rng, (v, k)))


# -------------------------------------------------------------------- report

def theory_report(n_images: int = 50, n_toys: int = 1000, n_joints: int = 100, seed: int = 0) -> dict:
    """Run every check and summarise worst cases."""
    rng = np.random.default_rng(seed)
    fold = []
    for i in range(n_images):
        x = rng.random((16, 16))
        for s in (2, 4):
            fold.append({"image": i, "s": s, "max_err": spectral_fold_check(x, s)})

    gaps, eq_gaps = [], []
    for t in range(n_toys):
        model = random_toy(seed * 100003 + t)
        for m in range(model.likelihood.shape[1]):
            gaps.append(evidence(model, m) - elbo(model, m))
            exact = model.with_exact_posterior()
            eq_gaps.append(abs(evidence(exact, m) - elbo(exact, m)))

    mi = []
    for j in range(n_joints):
        i_z, i_zf = mi_gain_experiment(seed * 100003 + j)
        mi.append({"joint": j, "i_z": i_z, "i_zf": i_zf, "gain": i_zf - i_z})
    xj = xor_joint()
    xor = {"i_z": mutual_information(xj, ["Z"], ["M"]), "i_zf": mutual_information(xj, ["Z", "F"], ["M"])}

    return {
        "fold_max_err": max(r["max_err"] for r in fold),
        "jensen_gap_min": float(min(gaps)),
        "jensen_equality_max_abs": float(max(eq_gaps)),
        "mi_gain_min": float(min(r["gain"] for r in mi)),
        "xor": xor,
        "fold_cases": fold,
        "mi_cases": mi,
    }
