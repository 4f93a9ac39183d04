"""
Synthetic poly-2 data with planted interactions.

Each of ``m`` fields draws one of ``N`` categories from its own categorical
distribution.  The score of a row is

    z = b + Σ_i w_i[x_i] + Σ_{planted (i,j)} v_ij[x_i, x_j] + noise

(triples add a ``v_ijt[x_i, x_j, x_t]`` table instead) and the label is
``z >= threshold``.  Only the planted interactions carry signal beyond the
linear terms, so a correct search should keep them and prune the rest.

`SyntheticSpec` files are INI text holding every sampled parameter, so
``load_spec(save_spec(spec))`` regenerates identical data.
"""

from __future__ import annotations

import configparser
import io
import logging
from dataclasses import dataclass
from typing import Dict, Sequence, Tuple

import numpy as np

from .data_model import FieldSchema, InteractionId, MiniBatch
from .errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_PLANTED = "0,1;2,5;3,4"

# substream ids local to this module
_SPEC_STREAM = 101
_DATA_STREAM = 102


@dataclass
class SyntheticSpec:
    field_count: int
    categories: int
    planted: Tuple[InteractionId, ...]
    field_probs: np.ndarray          # (m, N), rows sum to 1
    linear: np.ndarray               # (m, N)
    interaction_weights: Dict[InteractionId, np.ndarray]
    bias: float
    noise_sigma: float
    threshold: float
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        m, n = self.field_count, self.categories
        if m < 2 or n < 1:
            raise ConfigError(f"Synthetic data needs m >= 2 and N >= 1, got m={m}, N={n}")
        if self.field_probs.shape != (m, n) or self.linear.shape != (m, n):
            raise ConfigError(f"field_probs and linear must be ({m}, {n}) arrays")
        if (self.field_probs < 0).any() or np.abs(self.field_probs.sum(axis=1) - 1.0).max() > 1e-9:
            raise ConfigError("Each field distribution must be non-negative and sum to 1 within 1e-9")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        for iid in self.planted:
            if iid.fields[-1] >= m:
                raise ConfigError(f"Planted interaction {iid} is outside {m} fields")
            w = self.interaction_weights.get(iid)
            if w is None or w.shape != (n,) * len(iid.fields):
                raise ConfigError(f"Planted interaction {iid} needs a {'x'.join([str(n)] * len(iid.fields))} table")

    def schema(self) -> FieldSchema:
        return FieldSchema.one_hot([self.categories] * self.field_count)

    def score(self, x: np.ndarray) -> np.ndarray:
        """Noiseless score for an ``(n, m)`` category matrix."""
        z = np.full(x.shape[0], self.bias, dtype=np.float64)
        for i in range(self.field_count):
            z += self.linear[i, x[:, i]]
        for iid in self.planted:
            table = self.interaction_weights[iid]
            z += table[tuple(x[:, f] for f in iid.fields)]
        return z


def parse_planted(text: str) -> Tuple[InteractionId, ...]:
    """``"0,1;2,5"`` -> ``(InteractionId((0, 1)), InteractionId((2, 5)))``."""
    return tuple(InteractionId.parse(p) for p in text.split(";") if p.strip())


def _sample_categories(probs: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    return np.column_stack([rng.choice(probs.shape[1], size=n, p=p) for p in probs])


def sample_synthetic_spec(
    field_count: int = 6,
    categories: int = 60,
    planted: Sequence[InteractionId] = parse_planted(DEFAULT_PLANTED),
    seed: int = 0,
    noise_ratio: float = 0.01,
    presamples: int = 100_000,
) -> SyntheticSpec:
    """Draw a spec: Dirichlet(1) field distributions, N(0, 1) weights and bias.

    The noise level is ``noise_ratio`` times the std of the noiseless score and
    the threshold is its median over ``presamples`` rows, which puts the
    positive ratio near one half.
    """
    rng = np.random.default_rng([seed, _SPEC_STREAM])
    m, n = field_count, categories
    probs = rng.dirichlet(np.ones(n), size=m)
    probs /= probs.sum(axis=1, keepdims=True)
    linear = rng.standard_normal((m, n))
    weights = {iid: rng.standard_normal((n,) * len(iid.fields)) for iid in planted}
    bias = float(rng.standard_normal())

    spec = SyntheticSpec(
        field_count=m,
        categories=n,
        planted=tuple(planted),
        field_probs=probs,
        linear=linear,
        interaction_weights=weights,
        bias=bias,
        noise_sigma=0.0,
        threshold=0.0,
        seed=seed,
    )
    z0 = spec.score(_sample_categories(probs, presamples, rng))
    spec.noise_sigma = float(noise_ratio * z0.std())
    spec.threshold = float(np.median(z0))
    logger.debug(
        "Synthetic spec: m=%d N=%d planted=%s noise=%.4g threshold=%.4g",
        m, n, ",".join(f"({p})" for p in planted), spec.noise_sigma, spec.threshold,
    )
    return spec


def generate_synthetic(spec: SyntheticSpec, n_train: int, n_test: int) -> Tuple[MiniBatch, MiniBatch]:
    """I.i.d. train and test splits drawn from *spec*."""
    if n_train < 1 or n_test < 1:
        raise ConfigError(f"n_train and n_test must be >= 1, got {n_train} and {n_test}")
    rng = np.random.default_rng([spec.seed, _DATA_STREAM])
    total = n_train + n_test
    x = _sample_categories(spec.field_probs, total, rng)
    z = spec.score(x) + spec.noise_sigma * rng.standard_normal(total)
    labels = (z >= spec.threshold).astype(np.int64)
    schema = spec.schema()
    train = MiniBatch.from_arrays(schema, x[:n_train], labels[:n_train])
    test = MiniBatch.from_arrays(schema, x[n_train:], labels[n_train:])
    logger.info(
        "Generated %d train / %d test synthetic rows (positive ratio %.3f)",
        n_train, n_test, float(labels.mean()),
    )
    return train, test


# ---------------------------------------------------------------------------
# INI persistence
# ---------------------------------------------------------------------------

def _floats(arr: np.ndarray) -> str:
    return ",".join(repr(float(v)) for v in np.ravel(arr))


def _parse_floats(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(",")], dtype=np.float64)


def spec_to_text(spec: SyntheticSpec) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp["spec"] = {
        "field_count": str(spec.field_count),
        "categories": str(spec.categories),
        "planted": ";".join(str(p) for p in spec.planted),
        "bias": repr(spec.bias),
        "noise_sigma": repr(spec.noise_sigma),
        "threshold": repr(spec.threshold),
        "seed": str(spec.seed),
    }
    cp["field_probs"] = {f"f{i}": _floats(row) for i, row in enumerate(spec.field_probs)}
    cp["linear"] = {f"f{i}": _floats(row) for i, row in enumerate(spec.linear)}
    cp["interactions"] = {str(p): _floats(spec.interaction_weights[p]) for p in spec.planted}

    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def spec_from_text(text: str) -> SyntheticSpec:
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(text)
    try:
        head = cp["spec"]
        m, n = int(head["field_count"]), int(head["categories"])
        planted = parse_planted(head["planted"])
        probs = np.stack([_parse_floats(cp["field_probs"][f"f{i}"]) for i in range(m)])
        linear = np.stack([_parse_floats(cp["linear"][f"f{i}"]) for i in range(m)])
        weights = {
            p: _parse_floats(cp["interactions"][str(p)]).reshape((n,) * len(p.fields))
            for p in planted
        }
        return SyntheticSpec(
            field_count=m,
            categories=n,
            planted=planted,
            field_probs=probs,
            linear=linear,
            interaction_weights=weights,
            bias=float(head["bias"]),
            noise_sigma=float(head["noise_sigma"]),
            threshold=float(head["threshold"]),
            seed=int(head.get("seed", "0")),
        )
    except (KeyError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"Malformed synthetic spec: {exc}") from exc


def save_spec(spec: SyntheticSpec, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(spec_to_text(spec))


def load_spec(path: str) -> SyntheticSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return spec_from_text(fh.read())
