"""File formats: ``.dten`` tensors, JSON models and experiment configs.

``.dten`` layout: the 8-byte magic ``DTEN0001``, then little-endian ``u32``
order ``N``, ``N`` ``u64`` extents and the ``float64`` values with the first
index running fastest.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ..tensor import DenseTensor, KruskalModel

MAGIC = b"DTEN0001"


class TensorFileError(OSError):
    """A ``.dten`` file is truncated or malformed."""


def write_dten(path, t) -> None:
    t = t if isinstance(t, DenseTensor) else DenseTensor(t)
    header = MAGIC + struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}Q", *t.shape)
    payload = t.to_buffer().astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_dten(path) -> DenseTensor:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise TensorFileError(f"{path}: not a .dten file (bad magic)")
    if len(raw) < 12:
        raise TensorFileError(f"{path}: truncated header")
    (N,) = struct.unpack_from("<I", raw, 8)
    if N < 1:
        raise TensorFileError(f"{path}: tensor order must be >= 1")
    end = 12 + 8 * N
    if len(raw) < end:
        raise TensorFileError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{N}Q", raw, 12)
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) != end + 8 * count:
        raise TensorFileError(f"{path}: expected {count} values after the header, file size disagrees")
    values = np.frombuffer(raw, dtype="<f8", count=count, offset=end)
    try:
        return DenseTensor.from_buffer(dims, values)
    except ValueError as exc:
        raise TensorFileError(f"{path}: {exc}") from exc


def model_to_dict(m: KruskalModel) -> dict:
    return {
        "rank": m.rank,
        "shape": list(m.shape),
        "weights": m.weights.tolist(),
        "factors": [U.tolist() for U in m.factors],
    }


def model_from_dict(d: dict) -> KruskalModel:
    return KruskalModel(np.asarray(d["weights"], dtype=float), [np.asarray(U, dtype=float) for U in d["factors"]])


def write_model(path, m: KruskalModel) -> None:
    Path(path).write_text(json.dumps(model_to_dict(m), indent=1) + "\n", encoding="utf-8")


def read_model(path) -> KruskalModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class ExperimentConfig:
    """Everything needed to rerun a benchmark.

    ``pipeline`` uses the same syntax as the ``--algo`` flag, e.g.
    ``"als:10+flm+epc"``.  ``trace_dir`` receives one CSV per trial when set.
    """

    scenario: str = "ex1"
    size: int | None = None
    rank: int | None = None
    corr: float | list[float] | None = None
    weights: list[float] | None = None
    matmul: list[int] = field(default_factory=lambda: [2, 2, 2])
    pipelines: list[str] = field(default_factory=lambda: ["flm"])
    num_trials: int = 20
    snr_db: float | None = None
    rng_seed: int = 0
    max_iters: int = 1000
    init: str = "random"
    restarts: int = 1
    delta: float | None = None
    epsilon: float | None = None
    output: str | None = None
    trace_dir: str | None = None

    def __post_init__(self):
        if self.num_trials < 1:
            raise ValueError("num_trials must be >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if not self.pipelines:
            raise ValueError("at least one pipeline is required")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {', '.join(sorted(unknown))}")
        return cls(**d)


def read_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def write_config(path, cfg: ExperimentConfig) -> None:
    Path(path).write_text(cfg.to_json() + "\n", encoding="utf-8")
