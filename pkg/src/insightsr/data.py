"""Benchmark datasets: generation, CSV I/O, splits, noise and resampling."""
from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .expr import RESERVED_NAMES
from .metrics import BENCHMARK_TAU

SPLITS = ("train", "id_test", "ood_test")
BENCHMARKS = (
    "oscillator1",
    "oscillator2",
    "ecoli_growth",
    "stress_strain_csv",
    "lsr_transform_I_37_4",
    "lsr_transform_III_4_33",
    "lsr_synth_crk0",
)
_IDENT = re.compile(r"^[A-Za-z_][A-Za-z_0-9]*$")

# Fraction of the time horizon (ODE benchmarks) used for train/ID rows.
OOD_TIME_FRACTION = 0.7
# Total share of each input range treated as out-of-distribution, split
# evenly between the low and high ends.
OOD_RANGE_FRACTION = 0.15


class DatasetError(Exception):
    """Dataset could not be generated, read or validated."""


class GenerationError(DatasetError):
    pass


class SchemaError(DatasetError):
    pass


@dataclass(frozen=True)
class VariableInfo:
    name: str
    unit: str = ""
    description: str = ""


@dataclass(frozen=True, eq=False)
class Dataset:
    name: str
    variables: tuple[VariableInfo, ...]
    X: np.ndarray
    y: np.ndarray
    target_name: str
    splits: dict
    description: str = ""
    target_unit: str = ""
    seed: Optional[int] = None
    noise_sigma: float = 0.0
    ground_truth: Optional[str] = None
    tau: float = 0.1

    def __post_init__(self):
        X = np.array(self.X, dtype=float, copy=True)
        y = np.array(self.y, dtype=float, copy=True).reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.shape[0] or X.shape[1] != len(self.variables):
            raise DatasetError(f"shape mismatch: X{X.shape}, y{y.shape}, {len(self.variables)} variables")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DatasetError("X and y must be finite")
        names = [v.name for v in self.variables]
        if len(set(names + [self.target_name])) != len(names) + 1:
            raise DatasetError("variable and target names must be distinct")
        for nm in names:
            if not _IDENT.match(nm) or nm in RESERVED_NAMES:
                raise DatasetError(f"{nm!r} is not a usable variable name")
        splits = {}
        seen = set()
        for key in SPLITS:
            idx = np.array(self.splits.get(key, []), dtype=np.int64).reshape(-1)
            if idx.size and (idx.min() < 0 or idx.max() >= X.shape[0]):
                raise DatasetError(f"split {key} has out-of-range indices")
            if seen.intersection(idx.tolist()) or len(set(idx.tolist())) != idx.size:
                raise DatasetError(f"split {key} overlaps another split or repeats indices")
            seen.update(idx.tolist())
            idx.setflags(write=False)
            splits[key] = idx
        if splits["train"].size == 0:
            raise DatasetError("train split is empty")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "splits", splits)
        object.__setattr__(self, "variables", tuple(self.variables))

    @property
    def variable_names(self) -> list[str]:
        return [v.name for v in self.variables]

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.splits[name]
        return self.X[idx], self.y[idx]

    def same_as(self, other: "Dataset") -> bool:
        """Bitwise equality of data and metadata."""
        return (
            self.metadata() == other.metadata()
            and self.X.tobytes() == other.X.tobytes()
            and self.y.tobytes() == other.y.tobytes()
        )

    def metadata(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "variables": [{"name": v.name, "unit": v.unit, "description": v.description} for v in self.variables],
            "target": {"name": self.target_name, "unit": self.target_unit},
            "splits": {k: v.tolist() for k, v in self.splits.items()},
            "seed": self.seed,
            "noise_sigma": self.noise_sigma,
            "ground_truth": self.ground_truth,
            "tau": self.tau,
        }

    def save(self, csv_path) -> tuple[Path, Path]:
        """Write ``<name>.csv`` and the JSON sidecar ``<name>.meta.json``."""
        csv_path = Path(csv_path)
        meta_path = meta_path_for(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.variable_names + [self.target_name])
            for row, target in zip(self.X.tolist(), self.y.tolist()):
                writer.writerow([repr(v) for v in row] + [repr(target)])
        with open(meta_path, "w", encoding="utf-8") as fh:
            json.dump(self.metadata(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return csv_path, meta_path

    @classmethod
    def load(cls, csv_path) -> "Dataset":
        """Read a dataset written by :meth:`save` (CSV plus sidecar)."""
        csv_path = Path(csv_path)
        meta_path = meta_path_for(csv_path)
        if not meta_path.exists():
            raise DatasetError(f"missing metadata sidecar {meta_path}")
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        variables = [VariableInfo(**v) for v in meta["variables"]]
        X, y = _read_rows(csv_path, [v.name for v in variables], meta["target"]["name"])
        return cls(
            name=meta["name"],
            variables=tuple(variables),
            X=X,
            y=y,
            target_name=meta["target"]["name"],
            target_unit=meta["target"].get("unit", ""),
            splits=meta["splits"],
            description=meta.get("description", ""),
            seed=meta.get("seed"),
            noise_sigma=meta.get("noise_sigma", 0.0),
            ground_truth=meta.get("ground_truth"),
            tau=meta.get("tau", 0.1),
        )


def meta_path_for(csv_path) -> Path:
    csv_path = Path(csv_path)
    return csv_path.with_name(csv_path.stem + ".meta.json")


# ---------------------------------------------------------------------------
# CSV ingestion


def _read_rows(path: Path, names: Sequence[str], target_name: str):
    if not Path(path).exists():
        raise DatasetError(f"no such file: {path}")
    expected = list(names) + [target_name]
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != expected:
            raise SchemaError(f"{path}: header {header} does not match {expected}")
        for lineno, raw in enumerate(reader, start=2):
            if not raw or all(not c.strip() for c in raw):
                continue
            if len(raw) != len(expected):
                raise DatasetError(f"{path}:{lineno}: expected {len(expected)} fields, got {len(raw)}")
            try:
                values = [float(c) for c in raw]
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in values):
                raise DatasetError(f"{path}:{lineno}: non-finite value")
            rows.append(values)
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    arr = np.array(rows, dtype=float)
    return arr[:, :-1], arr[:, -1]


def load_csv(
    path,
    schema: Sequence,
    target_name: str,
    *,
    name: Optional[str] = None,
    split_policy: str = "random",
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
    tau: float = 0.1,
    description: str = "",
) -> Dataset:
    """Ingest an external CSV whose header is the schema names then the target.

    ``split_policy`` is ``"random"`` (shuffle, then cut by ``fractions``),
    ``"range"`` (rows in the outer ends of any input range are OOD), or
    ``"train"`` (everything is training data).
    """
    variables = [v if isinstance(v, VariableInfo) else VariableInfo(v) for v in schema]
    X, y = _read_rows(Path(path), [v.name for v in variables], target_name)
    rng = np.random.default_rng(seed)
    n = len(y)
    if split_policy == "train":
        splits = {"train": np.arange(n)}
    elif split_policy == "random":
        perm = rng.permutation(n)
        total = sum(fractions)
        n_train = max(1, int(round(n * fractions[0] / total)))
        n_id = min(n - n_train, int(round(n * fractions[1] / total)))
        splits = {
            "train": np.sort(perm[:n_train]),
            "id_test": np.sort(perm[n_train:n_train + n_id]),
            "ood_test": np.sort(perm[n_train + n_id:]),
        }
    elif split_policy == "range":
        outer = _outer_mask(X, X.min(axis=0), X.max(axis=0))
        inner_idx = rng.permutation(np.flatnonzero(~outer))
        if inner_idx.size == 0:
            raise DatasetError("range split leaves no in-distribution rows")
        n_train = max(1, int(round(inner_idx.size * fractions[0] / (fractions[0] + fractions[1]))))
        splits = {
            "train": np.sort(inner_idx[:n_train]),
            "id_test": np.sort(inner_idx[n_train:]),
            "ood_test": np.flatnonzero(outer),
        }
    else:
        raise ValueError(f"unknown split policy {split_policy!r}")
    return Dataset(
        name=name or Path(path).stem,
        variables=tuple(variables),
        X=X,
        y=y,
        target_name=target_name,
        splits=splits,
        seed=seed,
        tau=tau,
        description=description,
    )


def _outer_mask(X: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    margin = (hi - lo) * OOD_RANGE_FRACTION / 2
    return np.any((X < lo + margin) | (X > hi - margin), axis=1)


# ---------------------------------------------------------------------------
# ODE integration


def rk4_integrate(
    rhs: Callable[[float, np.ndarray], np.ndarray],
    y0: Sequence[float],
    t_max: float,
    step: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Classical fixed-step RK4 from t=0 to ``t_max``.

    Returns ``(times, states)`` on the grid ``k * step``.
    """
    n_steps = int(round(t_max / step))
    if n_steps <= 0 or not math.isclose(n_steps * step, t_max, rel_tol=1e-9):
        raise ValueError(f"t_max={t_max} is not a whole number of steps of {step}")
    states = np.empty((n_steps + 1, len(y0)))
    states[0] = y0
    y = np.array(y0, dtype=float)
    for k in range(n_steps):
        t = k * step
        k1 = rhs(t, y)
        k2 = rhs(t + step / 2, y + step / 2 * k1)
        k3 = rhs(t + step / 2, y + step / 2 * k2)
        k4 = rhs(t + step, y + step * k3)
        y = y + step / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise GenerationError(f"integration blew up at t={t + step:.6g}")
        states[k + 1] = y
    return np.arange(n_steps + 1) * step, states


# ---------------------------------------------------------------------------
# Benchmarks


@dataclass(frozen=True)
class GeneratorSpec:
    benchmark: str
    seed: int = 0
    n_train: int = 500
    n_id: int = 250
    n_ood: int = 250
    noise_sigma: float = 0.0
    step_size: float = 0.01
    method: str = "RK4"
    t_max: float = 50.0
    csv_path: Optional[str] = None
    constants: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.benchmark not in BENCHMARKS:
            raise ValueError(f"unknown benchmark {self.benchmark!r}; choose from {BENCHMARKS}")
        for name in ("n_train", "n_id", "n_ood"):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if not self.noise_sigma >= 0:
            raise ValueError("noise_sigma must be non-negative")
        if not self.step_size > 0 or not self.t_max > 0:
            raise ValueError("step_size and t_max must be positive")
        if self.method.upper() != "RK4":
            raise ValueError("only RK4 integration is supported")
        if self.benchmark == "stress_strain_csv" and not self.csv_path:
            raise ValueError("stress_strain_csv needs csv_path")

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generator fields: {sorted(unknown)}")
        return cls(**d)


OSCILLATOR1 = {"F": 0.8, "alpha": 0.5, "beta": 0.2, "gamma": 0.5, "omega": 1.0}
OSCILLATOR2 = {"F": 0.3, "alpha": 0.5, "beta": 1.0, "delta": 5.0, "gamma": 0.5, "omega": 1.0}
ECOLI = {
    "mu_max": 1.0, "K_S": 2.0, "k": 0.3, "x0": 20.0, "c": 1e-5,
    "x_decay": 40.0, "pH_opt": 7.0, "pH_min": 4.0, "pH_max": 10.0,
}
CRK0 = {"k1": 0.1899, "k2": 0.1899, "k3": 0.7498}


def oscillator1_rhs(x, v, F=0.8, alpha=0.5, beta=0.2, gamma=0.5, omega=1.0):
    return F * np.sin(omega * x) - alpha * v**3 - beta * x**3 - gamma * x * v - x * np.cos(x)


def oscillator2_rhs(t, x, v, F=0.3, alpha=0.5, beta=1.0, delta=5.0, gamma=0.5, omega=1.0):
    return F * np.sin(omega * t) - alpha * v**3 - beta * x * v - delta * x * np.exp(gamma * x)


def ecoli_rhs(B, S, T, pH, mu_max, K_S, k, x0, c, x_decay, pH_opt, pH_min, pH_max):
    return (
        mu_max * B * (S / (K_S + S))
        * (np.tanh(k * (T - x0)) / (1 + c * (T - x_decay) ** 4))
        * np.exp(-np.abs(pH - pH_opt))
        * np.sin((pH - pH_min) * np.pi / (pH_max - pH_min)) ** 2
    )


def crk0_rhs(A, k1=0.1899, k2=0.1899, k3=0.7498):
    return -k1 * A**2 + k2 * A**2 / (k3 * A**4 + 1)


def lsr_I_37_4(delta, I2, Int):
    c2 = np.cos(delta) ** 2
    return 2 * I2 * c2 + I2 + Int + 2 * np.sqrt(I2 * (I2 * c2 + I2 + Int)) * np.cos(delta)


def lsr_III_4_33(E_n, h, omega, k_b):
    return h * omega / (2 * np.pi * k_b * np.log(1 + h * omega / (2 * np.pi * E_n)))


def _c(value: float) -> str:
    # Constants inside ground-truth strings; negative values go through unary minus.
    return repr(float(value)) if value >= 0 else f"(-{repr(float(-value))})"


def ground_truth_expression(benchmark: str, constants: Optional[dict] = None) -> Optional[str]:
    """Ground-truth right-hand side in skeleton grammar (no learnable params)."""
    constants = constants or {}
    if benchmark == "oscillator1":
        k = {**OSCILLATOR1, **constants}
        return (
            f"{_c(k['F'])}*sin({_c(k['omega'])}*x) - {_c(k['alpha'])}*v**3 - {_c(k['beta'])}*x**3"
            f" - {_c(k['gamma'])}*x*v - x*cos(x)"
        )
    if benchmark == "oscillator2":
        k = {**OSCILLATOR2, **constants}
        return (
            f"{_c(k['F'])}*sin({_c(k['omega'])}*t) - {_c(k['alpha'])}*v**3 - {_c(k['beta'])}*x*v"
            f" - {_c(k['delta'])}*x*exp({_c(k['gamma'])}*x)"
        )
    if benchmark == "ecoli_growth":
        k = {**ECOLI, **constants}
        return (
            f"{_c(k['mu_max'])}*B*(S/({_c(k['K_S'])} + S))"
            f"*(tanh({_c(k['k'])}*(T - {_c(k['x0'])}))/(1 + {_c(k['c'])}*(T - {_c(k['x_decay'])})**4))"
            f"*exp(-abs(pH - {_c(k['pH_opt'])}))"
            f"*sin((pH - {_c(k['pH_min'])})*pi/({_c(k['pH_max'])} - {_c(k['pH_min'])}))**2"
        )
    if benchmark == "lsr_synth_crk0":
        k = {**CRK0, **constants}
        return f"-{_c(k['k1'])}*A**2 + {_c(k['k2'])}*A**2/({_c(k['k3'])}*A**4 + 1)"
    if benchmark == "lsr_transform_I_37_4":
        return (
            "2*I2*cos(delta)**2 + I2 + Int"
            " + 2*sqrt(I2*(I2*cos(delta)**2 + I2 + Int))*cos(delta)"
        )
    if benchmark == "lsr_transform_III_4_33":
        return "h*omega/(2*pi*k_b*log(1 + h*omega/(2*pi*E_n)))"
    return None


@dataclass(frozen=True)
class _BoxBenchmark:
    name: str
    description: str
    variables: tuple[VariableInfo, ...]
    target: VariableInfo
    lo: tuple[float, ...]
    hi: tuple[float, ...]
    func: Callable[..., np.ndarray]


def _box_benchmark(spec: GeneratorSpec) -> _BoxBenchmark:
    V = VariableInfo
    if spec.benchmark == "ecoli_growth":
        k = {**ECOLI, **spec.constants}
        return _BoxBenchmark(
            "ecoli_growth",
            "Growth rate of an E. coli population as a function of population density, "
            "substrate concentration, temperature and pH.",
            (V("B", "OD", "population density"), V("S", "g/L", "substrate concentration"),
             V("T", "degC", "temperature"), V("pH", "", "acidity")),
            V("dB_dt", "OD/h", "population growth rate"),
            (0.1, 0.1, 10.0, 4.5), (2.0, 10.0, 45.0, 9.5),
            lambda B, S, T, pH: ecoli_rhs(B, S, T, pH, **k),
        )
    if spec.benchmark == "lsr_synth_crk0":
        k = {**CRK0, **spec.constants}
        return _BoxBenchmark(
            "lsr_synth_crk0",
            "Reaction rate of a chemical species as a function of its concentration.",
            (V("A", "mol/L", "concentration"),),
            V("dA_dt", "mol/(L s)", "reaction rate"),
            (0.0,), (2.0,),
            lambda A: crk0_rhs(A, **k),
        )
    if spec.benchmark == "lsr_transform_I_37_4":
        return _BoxBenchmark(
            "lsr_transform_I_37_4",
            "Intensity of the first of two interfering wave sources given the phase difference, "
            "the second source intensity and the combined intensity.",
            (V("delta", "rad", "phase difference"), V("I2", "W/m^2", "second source intensity"),
             V("Int", "W/m^2", "combined intensity")),
            V("I1", "W/m^2", "first source intensity"),
            (1.0, 1.0, 1.0), (5.0, 5.0, 5.0),
            lsr_I_37_4,
        )
    if spec.benchmark == "lsr_transform_III_4_33":
        return _BoxBenchmark(
            "lsr_transform_III_4_33",
            "Temperature of a quantum harmonic oscillator from the energy of its mode.",
            (V("E_n", "J", "mode energy"), V("h", "J s", "Planck constant"),
             V("omega", "rad/s", "angular frequency"), V("k_b", "J/K", "Boltzmann constant")),
            V("T", "K", "temperature"),
            (1.0, 1.0, 1.0, 1.0), (5.0, 5.0, 5.0, 5.0),
            lsr_III_4_33,
        )
    raise ValueError(spec.benchmark)


def _rngs(seed: int):
    sample_ss, split_ss, noise_ss = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(sample_ss), np.random.default_rng(split_ss), np.random.default_rng(noise_ss)


def _assemble(spec, name, description, variables, target, X_in, y_in, X_ood, y_ood, split_rng, noise_rng, truth):
    perm = split_rng.permutation(len(y_in))
    train_rows, id_rows = np.sort(perm[:spec.n_train]), np.sort(perm[spec.n_train:])
    X = np.vstack([X_in[train_rows], X_in[id_rows], X_ood])
    y = np.concatenate([y_in[train_rows], y_in[id_rows], y_ood])
    n_tr, n_id = len(train_rows), len(id_rows)
    splits = {
        "train": np.arange(n_tr),
        "id_test": np.arange(n_tr, n_tr + n_id),
        "ood_test": np.arange(n_tr + n_id, len(y)),
    }
    # Noise stream is independent of sampling, so clean rows are identical for any sigma.
    noise = noise_rng.standard_normal(n_tr)
    if spec.noise_sigma > 0:
        y[:n_tr] = y[:n_tr] + spec.noise_sigma * noise
    return Dataset(
        name=name,
        description=description,
        variables=variables,
        X=X,
        y=y,
        target_name=target.name,
        target_unit=target.unit,
        splits=splits,
        seed=spec.seed,
        noise_sigma=spec.noise_sigma,
        ground_truth=truth,
        tau=BENCHMARK_TAU.get(spec.benchmark, 0.1),
    )


def _ode_benchmark(spec: GeneratorSpec):
    V = VariableInfo
    if spec.benchmark == "oscillator1":
        k = {**OSCILLATOR1, **spec.constants}
        accel = lambda t, x, v: oscillator1_rhs(x, v, **k)
        variables = (V("x", "m", "position"), V("v", "m/s", "velocity"))
        columns = lambda t, x, v: np.column_stack([x, v])
        description = "Acceleration of a nonlinear damped oscillator as a function of position and velocity."
    else:
        k = {**OSCILLATOR2, **spec.constants}
        accel = lambda t, x, v: oscillator2_rhs(t, x, v, **k)
        variables = (V("t", "s", "time"), V("x", "m", "position"), V("v", "m/s", "velocity"))
        columns = lambda t, x, v: np.column_stack([t, x, v])
        description = (
            "Acceleration of a driven nonlinear damped oscillator as a function of time, "
            "position and velocity."
        )
    target = V("a", "m/s^2", "acceleration dv/dt")
    return k, accel, variables, columns, target, description


def oscillator_trajectory(benchmark: str, step: float = 0.01, t_max: float = 50.0, constants=None):
    """Integrate an oscillator from x=0.5, v=0.5; returns ``(t, states)``."""
    spec = GeneratorSpec(benchmark, step_size=step, t_max=t_max, constants=dict(constants or {}))
    _, accel, *_ = _ode_benchmark(spec)
    rhs = lambda t, s: np.array([s[1], accel(t, s[0], s[1])])
    return rk4_integrate(rhs, [0.5, 0.5], t_max, step)


def generate(spec: GeneratorSpec) -> Dataset:
    """Build the dataset described by ``spec``; deterministic in ``spec.seed``."""
    sample_rng, split_rng, noise_rng = _rngs(spec.seed)
    truth = ground_truth_expression(spec.benchmark, spec.constants)

    if spec.benchmark == "stress_strain_csv":
        schema = [VariableInfo("strain", "", "engineering strain"), VariableInfo("temp", "degC", "temperature")]
        ds = load_csv(spec.csv_path, schema, "stress", name="stress_strain", split_policy="range", seed=spec.seed)
        if spec.noise_sigma > 0:
            y = ds.y.copy()
            tr = ds.splits["train"]
            y[tr] += spec.noise_sigma * noise_rng.standard_normal(tr.size)
            ds = Dataset(**{**_fields(ds), "y": y, "noise_sigma": spec.noise_sigma})
        return ds

    if spec.benchmark in ("oscillator1", "oscillator2"):
        _, accel, variables, columns, target, description = _ode_benchmark(spec)
        t, states = oscillator_trajectory(spec.benchmark, spec.step_size, spec.t_max, spec.constants)
        x, v = states[:, 0], states[:, 1]
        ydot = accel(t, x, v)
        cut = OOD_TIME_FRACTION * spec.t_max
        in_idx = np.flatnonzero(t <= cut + 1e-12)
        ood_idx = np.flatnonzero(t > cut + 1e-12)
        n_in = spec.n_train + spec.n_id
        if n_in > in_idx.size or spec.n_ood > ood_idx.size:
            raise GenerationError(
                f"trajectory has {in_idx.size}/{ood_idx.size} grid points for "
                f"{n_in}/{spec.n_ood} requested rows; reduce step_size"
            )
        pick_in = np.sort(sample_rng.choice(in_idx, size=n_in, replace=False))
        pick_ood = np.sort(sample_rng.choice(ood_idx, size=spec.n_ood, replace=False))
        X_all = columns(t, x, v)
        return _assemble(
            spec, spec.benchmark, description, variables, target,
            X_all[pick_in], ydot[pick_in], X_all[pick_ood], ydot[pick_ood],
            split_rng, noise_rng, truth,
        )

    bench = _box_benchmark(spec)
    lo, hi = np.array(bench.lo), np.array(bench.hi)
    margin = (hi - lo) * OOD_RANGE_FRACTION / 2
    n_in = spec.n_train + spec.n_id
    X_in = sample_rng.uniform(lo + margin, hi - margin, size=(n_in, lo.size))
    ood_rows = []
    while sum(len(r) for r in ood_rows) < spec.n_ood:
        cand = sample_rng.uniform(lo, hi, size=(max(4 * spec.n_ood, 64), lo.size))
        ood_rows.append(cand[_outer_mask(cand, lo, hi)])
    X_ood = np.vstack(ood_rows)[: spec.n_ood]
    y_in = bench.func(*X_in.T)
    y_ood = bench.func(*X_ood.T)
    if not (np.all(np.isfinite(y_in)) and np.all(np.isfinite(y_ood))):
        raise GenerationError(f"{spec.benchmark}: ground truth produced non-finite targets")
    return _assemble(
        spec, bench.name, bench.description, bench.variables, bench.target,
        X_in, y_in, X_ood, y_ood, split_rng, noise_rng, truth,
    )


def _fields(ds: Dataset) -> dict:
    return {name: getattr(ds, name) for name in Dataset.__dataclass_fields__}


# ---------------------------------------------------------------------------
# Resampling


@dataclass(frozen=True)
class ResampledRow:
    x: tuple[float, ...]
    y: float
    residual: Optional[float] = None


@dataclass(frozen=True)
class ResampledView:
    rows: tuple[ResampledRow, ...]
    size: int
    seed: int
    variable_names: tuple[str, ...]
    target_name: str
    indices: tuple[int, ...] = ()

    @property
    def has_residuals(self) -> bool:
        return bool(self.rows) and self.rows[0].residual is not None


def resample(data: Dataset, residuals=None, size: int = 100, seed: int = 0) -> ResampledView:
    """Draw ``size`` training rows uniformly with replacement.

    ``residuals`` (optional) is aligned with all ``data.n`` rows; only
    entries of training rows are ever read.
    """
    if size <= 0:
        raise ValueError("size must be positive")
    train = data.splits["train"]
    if size > train.size:
        raise ValueError(f"view of {size} rows exceeds the {train.size} training rows")
    if residuals is not None:
        residuals = np.asarray(residuals, dtype=float).reshape(-1)
        if residuals.size != data.n:
            raise ValueError(f"residuals have length {residuals.size}, expected {data.n}")
    rng = np.random.default_rng(seed)
    picks = train[rng.integers(0, train.size, size=size)]
    rows = tuple(
        ResampledRow(
            x=tuple(float(v) for v in data.X[i]),
            y=float(data.y[i]),
            residual=None if residuals is None else float(residuals[i]),
        )
        for i in picks
    )
    return ResampledView(
        rows=rows,
        size=size,
        seed=seed,
        variable_names=tuple(data.variable_names),
        target_name=data.target_name,
        indices=tuple(int(i) for i in picks),
    )
