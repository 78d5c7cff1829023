"""Long-format datasets: CSV ingestion, train/test splits and synthetic generation.

A dataset directory holds

* ``inputs.csv``        ``input_id, x_1 .. x_D``
* ``observations.csv``  ``input_id, output_id, y``
* ``outputs.csv``       optional; ``output_id[, h0_1 .. h0_K]`` (prior means of the latents)
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    X: np.ndarray
    input_ids: list[str]
    output_ids: list[str]
    n: np.ndarray
    p: np.ndarray
    y: np.ndarray
    prior_mean: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float).reshape(len(self.input_ids), -1)
        self.n = np.asarray(self.n, dtype=np.int64)
        self.p = np.asarray(self.p, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=float)
        if self.prior_mean is not None:
            self.prior_mean = np.asarray(self.prior_mean, dtype=float).reshape(len(self.output_ids), -1)

    @property
    def N(self) -> int:
        return len(self.input_ids)

    @property
    def P(self) -> int:
        return len(self.output_ids)

    @property
    def D_X(self) -> int:
        return self.X.shape[1]

    @property
    def n_obs(self) -> int:
        return len(self.y)

    @property
    def fully_observed(self) -> bool:
        return self.n_obs == self.N * self.P

    def subset(self, mask: np.ndarray) -> "Dataset":
        """Same inputs and outputs, observations restricted to ``mask``."""
        return Dataset(self.X, list(self.input_ids), list(self.output_ids),
                       self.n[mask], self.p[mask], self.y[mask], self.prior_mean)

    def restrict(self, inputs, outputs) -> "Dataset":
        """Sub-dataset on the given input and output indices, renumbered in that order."""
        inputs = np.asarray(inputs, dtype=np.int64)
        outputs = np.asarray(outputs, dtype=np.int64)
        new_n = np.full(self.N, -1, dtype=np.int64)
        new_p = np.full(self.P, -1, dtype=np.int64)
        new_n[inputs] = np.arange(len(inputs))
        new_p[outputs] = np.arange(len(outputs))
        keep = (new_n[self.n] >= 0) & (new_p[self.p] >= 0)
        prior = None if self.prior_mean is None else self.prior_mean[outputs]
        return Dataset(self.X[inputs], [self.input_ids[i] for i in inputs],
                       [self.output_ids[j] for j in outputs], new_n[self.n[keep]],
                       new_p[self.p[keep]], self.y[keep], prior)

    def obs_index(self) -> np.ndarray:
        """``(N, P)`` table of observation row numbers, ``-1`` where missing."""
        table = np.full((self.N, self.P), -1, dtype=np.int64)
        table[self.n, self.p] = np.arange(self.n_obs)
        return table


def _read_csv(path: str) -> tuple[list[str], list[tuple[int, list[str]]]]:
    if not os.path.exists(path):
        raise DatasetError(f"missing file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        rows = [(i + 2, row) for i, row in enumerate(reader) if row]
    return header, rows


def _float(value: str, path: str, line: int) -> float:
    try:
        v = float(value)
    except ValueError:
        raise DatasetError(f"{path}:{line}: not a number: {value!r}") from None
    if not math.isfinite(v):
        raise DatasetError(f"{path}:{line}: non-finite value {value!r}")
    return v


def load_dataset(path: str) -> Dataset:
    inputs_path = os.path.join(path, "inputs.csv")
    obs_path = os.path.join(path, "observations.csv")
    outputs_path = os.path.join(path, "outputs.csv")

    header, rows = _read_csv(inputs_path)
    if len(header) < 2 or header[0] != "input_id" or header[1:] != [f"x_{i + 1}" for i in range(len(header) - 1)]:
        raise DatasetError(f"{inputs_path}:1: header must be input_id, x_1, ..., x_D")
    input_ids, X, input_index = [], [], {}
    for line, row in rows:
        if len(row) != len(header):
            raise DatasetError(f"{inputs_path}:{line}: expected {len(header)} fields, got {len(row)}")
        iid = row[0].strip()
        if iid in input_index:
            raise DatasetError(f"{inputs_path}:{line}: duplicate input_id {iid!r}")
        input_index[iid] = len(input_ids)
        input_ids.append(iid)
        X.append([_float(v, inputs_path, line) for v in row[1:]])

    output_ids: list[str] = []
    output_index: dict[str, int] = {}
    prior_mean = None
    if os.path.exists(outputs_path):
        oheader, orows = _read_csv(outputs_path)
        k = len(oheader) - 1
        if not oheader or oheader[0] != "output_id" or oheader[1:] != [f"h0_{i + 1}" for i in range(k)]:
            raise DatasetError(f"{outputs_path}:1: header must be output_id[, h0_1, ..., h0_K]")
        means = []
        for line, row in orows:
            if len(row) != len(oheader):
                raise DatasetError(f"{outputs_path}:{line}: expected {len(oheader)} fields, got {len(row)}")
            oid = row[0].strip()
            if oid in output_index:
                raise DatasetError(f"{outputs_path}:{line}: duplicate output_id {oid!r}")
            output_index[oid] = len(output_ids)
            output_ids.append(oid)
            means.append([_float(v, outputs_path, line) for v in row[1:]])
        if k > 0:
            prior_mean = np.asarray(means, dtype=float)

    header, rows = _read_csv(obs_path)
    if header != ["input_id", "output_id", "y"]:
        raise DatasetError(f"{obs_path}:1: header must be input_id, output_id, y")
    n, p, y, seen = [], [], [], set()
    fixed_outputs = bool(output_ids)
    for line, row in rows:
        if len(row) != 3:
            raise DatasetError(f"{obs_path}:{line}: expected 3 fields, got {len(row)}")
        iid, oid = row[0].strip(), row[1].strip()
        if iid not in input_index:
            raise DatasetError(f"{obs_path}:{line}: dangling input_id {iid!r}")
        if oid not in output_index:
            if fixed_outputs:
                raise DatasetError(f"{obs_path}:{line}: dangling output_id {oid!r}")
            output_index[oid] = len(output_ids)
            output_ids.append(oid)
        key = (input_index[iid], output_index[oid])
        if key in seen:
            raise DatasetError(f"{obs_path}:{line}: duplicate observation for ({iid!r}, {oid!r})")
        seen.add(key)
        n.append(key[0])
        p.append(key[1])
        y.append(_float(row[2], obs_path, line))
    if not input_ids:
        raise DatasetError(f"{inputs_path}: no inputs")
    return Dataset(np.asarray(X, dtype=float), input_ids, output_ids, n, p, y, prior_mean)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_dataset(ds: Dataset, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "inputs.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["input_id"] + [f"x_{i + 1}" for i in range(ds.D_X)])
        for iid, row in zip(ds.input_ids, ds.X):
            w.writerow([iid] + [_fmt(v) for v in row])
    with open(os.path.join(path, "outputs.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        k = 0 if ds.prior_mean is None else ds.prior_mean.shape[1]
        w.writerow(["output_id"] + [f"h0_{i + 1}" for i in range(k)])
        for j, oid in enumerate(ds.output_ids):
            w.writerow([oid] + ([_fmt(v) for v in ds.prior_mean[j]] if k else []))
    with open(os.path.join(path, "observations.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["input_id", "output_id", "y"])
        for n, p, y in zip(ds.n, ds.p, ds.y):
            w.writerow([ds.input_ids[n], ds.output_ids[p], _fmt(y)])


@dataclass
class SplitSpec:
    """Random hold-out at ``fraction``, or block-wise hold-out of contiguous time ranges.

    Block-wise: one disjoint random group of ``outputs_per_block`` outputs per entry
    of ``positions``; each output in a ``head`` group loses its first
    ``block_length`` observations (ordered by the first input column), a
    ``tail`` group its last.
    """

    scheme: str = "random"
    fraction: float = 0.2
    block_length: int = 10
    outputs_per_block: int = 1
    positions: tuple[str, ...] = ("head", "tail")
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("random", "block"):
            raise ValueError(f"unknown split scheme {self.scheme!r}")
        if self.scheme == "random" and not 0.0 < self.fraction < 1.0:
            raise ValueError("split fraction must lie in (0, 1)")
        if self.scheme == "block":
            if self.block_length < 1 or self.outputs_per_block < 1:
                raise ValueError("block_length and outputs_per_block must be positive")
            if any(pos not in ("head", "tail") for pos in self.positions):
                raise ValueError("block positions must be 'head' or 'tail'")
        self.positions = tuple(self.positions)


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    rng = np.random.default_rng(spec.seed)
    test = np.zeros(ds.n_obs, dtype=bool)
    if spec.scheme == "random":
        n_test = int(round(spec.fraction * ds.n_obs))
        if n_test < 1 or n_test >= ds.n_obs:
            raise DatasetError(f"fraction {spec.fraction} leaves an empty train or test set")
        test[rng.choice(ds.n_obs, size=n_test, replace=False)] = True
    else:
        n_groups = len(spec.positions)
        if n_groups * spec.outputs_per_block > ds.P:
            raise DatasetError("not enough outputs for the requested block groups")
        chosen = rng.choice(ds.P, size=n_groups * spec.outputs_per_block, replace=False)
        order_key = ds.X[ds.n, 0]
        for g, pos in enumerate(spec.positions):
            for out in chosen[g * spec.outputs_per_block:(g + 1) * spec.outputs_per_block]:
                rows = np.flatnonzero(ds.p == out)
                if spec.block_length >= len(rows):
                    raise DatasetError(
                        f"block length {spec.block_length} infeasible for output "
                        f"{ds.output_ids[out]!r} with {len(rows)} observations"
                    )
                rows = rows[np.lexsort((ds.n[rows], order_key[rows]))]
                held = rows[:spec.block_length] if pos == "head" else rows[-spec.block_length:]
                test[held] = True
    return ds.subset(~test), ds.subset(test)


@dataclass
class SynthSpec:
    n_inputs: int = 40
    n_outputs: int = 10
    input_dim: int = 1
    latent_dim: int = 2
    lengthscale_x: float = 1.0
    lengthscale_h: float = 1.0
    outputscale: float = 1.0
    noise: float = 0.01
    likelihood: str = "gaussian"
    km: float = 0.1
    dispersion: float = 1.0
    scale: float = 1.0
    x_range: float = 5.0

    def __post_init__(self):
        if self.likelihood not in ("gaussian", "zinb"):
            raise ValueError(f"unknown likelihood {self.likelihood!r}")
        if self.n_inputs < 1 or self.n_outputs < 1:
            raise ValueError("need at least one input and one output")


MAX_JOINT = 10_000


def rbf(A: np.ndarray, B: np.ndarray, lengthscale: float, outputscale: float = 1.0) -> np.ndarray:
    d = (A[:, None, :] - B[None, :, :]) / lengthscale
    return outputscale * np.exp(-0.5 * (d * d).sum(-1))


def draw_separable_field(
    X: np.ndarray, H: np.ndarray, spec: SynthSpec, rng: np.random.Generator, size: int | None = None
) -> np.ndarray:
    """Draw ``f`` with covariance ``k_H(h, h') k_X(x, x')``, shaped ``([size,] P, N)``."""
    Kx = rbf(X, X, spec.lengthscale_x)
    if H.shape[1]:
        Kh = rbf(H, H, spec.lengthscale_h, spec.outputscale)
    else:
        Kh = spec.outputscale * np.ones((len(H), len(H)))
    K = np.kron(Kh, Kx)
    L = np.linalg.cholesky(K + 1e-8 * np.eye(len(K)))
    shape = (len(K),) if size is None else (size, len(K))
    f = rng.standard_normal(shape) @ L.T
    return f.reshape(*(() if size is None else (size,)), len(H), len(X))


def sample_zinb(m: np.ndarray, km: float, dispersion: float, rng: np.random.Generator) -> np.ndarray:
    """Gamma-Poisson NB draws with Michaelis-Menten extra zeros."""
    r = 1.0 / dispersion
    lam = rng.gamma(shape=r, scale=m / r)
    y = rng.poisson(lam).astype(float)
    if km > 0:
        psi = km / (km + m)
        y[rng.random(m.shape) < psi] = 0.0
    return y


def softplus_np(f: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, f)


def generate_synthetic(spec: SynthSpec, seed: int) -> tuple[Dataset, dict]:
    """Fully observed dataset drawn from the separable LV-MOGP prior, plus its ground truth."""
    N, P = spec.n_inputs, spec.n_outputs
    if N * P > MAX_JOINT:
        raise DatasetError(f"N*P = {N * P} exceeds the dense sampling limit {MAX_JOINT}")
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, spec.x_range, size=(N, spec.input_dim))
    if spec.input_dim == 1:
        X = np.sort(X, axis=0)
    H = rng.standard_normal((P, spec.latent_dim))
    f = draw_separable_field(X, H, spec, rng)
    if spec.likelihood == "gaussian":
        y = f + math.sqrt(spec.noise) * rng.standard_normal(f.shape) if spec.noise > 0 else f.copy()
    else:
        y = sample_zinb(spec.scale * softplus_np(f), spec.km, spec.dispersion, rng)
    nn_, pp_ = np.meshgrid(np.arange(N), np.arange(P), indexing="ij")
    ds = Dataset(
        X,
        [f"x{i}" for i in range(N)],
        [f"p{j}" for j in range(P)],
        nn_.ravel(), pp_.ravel(),
        y[pp_.ravel(), nn_.ravel()],
    )
    truth = {"spec": asdict(spec), "seed": seed, "H": H.tolist(), "f": f.tolist()}
    return ds, truth


def save_truth(truth: dict, path: str) -> None:
    with open(os.path.join(path, "truth.json"), "w", encoding="utf-8") as fh:
        json.dump(truth, fh)
