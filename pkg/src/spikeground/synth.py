"""Deterministic synthetic temporal-grounding tasks.

A sample is a feature video with one planted archetype segment (the
moment to ground), distractor segments built from other archetypes, and
a query derived from the target archetype. Everything is a pure function
of (task spec, seed, sample index): randomness comes from a counter-based
SplitMix64 stream, so regeneration is exact across runs and platforms.

Random values: value_j = finalize(state + (j + 1) * GOLDEN) where
finalize is the SplitMix64 output mix and state identifies the stream
(stream s of seed: finalize(seed + (s + 1) * STREAM_SALT)). Uniforms take
the top 53 bits; gaussians pair two uniforms through Box-Muller.
"""

from __future__ import annotations

import gzip
import json
from dataclasses import dataclass, asdict

import numpy as np

from .errors import DomainError, ContractError, ParseError

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
STREAM_SALT = np.uint64(0xD1B54A32D192ED03)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _finalize(z: np.ndarray) -> np.ndarray:
    # uint64 wraparound is the algorithm, not an accident
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def stream_state(seed: int, stream_id: int) -> np.uint64:
    with np.errstate(over="ignore"):
        base = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + np.uint64(stream_id + 1) * STREAM_SALT
    return _finalize(np.uint64(base))


class CounterStream:
    """Stateless-core RNG with a convenience counter for sequential draws."""

    def __init__(self, state: np.uint64):
        self.state = np.uint64(state)
        self.counter = 0

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            seq = self.state + idx * GOLDEN
        return _finalize(seq)

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles in [0, 1) from the top 53 bits."""
        return (self._raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def gaussians(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        u1 = (self._raw(n) >> np.uint64(11)).astype(np.float64)
        u1 = (u1 + 1.0) * (2.0 ** -53)  # (0, 1], keeps log finite
        u2 = self.uniforms(n)
        g = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return g.reshape(shape)

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] inclusive."""
        return lo + int(self.uniforms(1)[0] * (hi - lo + 1))


@dataclass(frozen=True)
class TaskSpec:
    """Knobs of the synthetic grounding task."""

    video_len: tuple[int, int] = (24, 32)
    query_len: tuple[int, int] = (6, 10)
    feat_dim: int = 32
    archetypes: int = 6
    distractors: int = 2
    noise: float = 0.3
    moment_frac: tuple[float, float] = (0.2, 0.35)
    distractor_frac: tuple[float, float] = (0.08, 0.18)
    seed: int = 0

    def __post_init__(self):
        if self.archetypes < 2:
            raise DomainError("need at least 2 archetypes to have distractors worth the name")
        if self.noise < 0.0:
            raise DomainError("noise level must be >= 0")
        if self.feat_dim < 1:
            raise DomainError("feat_dim must be >= 1")
        if self.distractors < 0:
            raise DomainError("distractors must be >= 0")
        for name in ("video_len", "query_len"):
            lo, hi = getattr(self, name)
            if not (1 <= lo <= hi):
                raise DomainError(f"{name} range must satisfy 1 <= lo <= hi, got ({lo}, {hi})")
        if self.video_len[0] < 8:
            raise DomainError("videos shorter than 8 clips leave no room for distractors")

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ContractError(f"unknown task spec keys: {sorted(extra)}")
        d = dict(d)
        for name in ("video_len", "query_len", "moment_frac", "distractor_frac"):
            if name in d:
                d[name] = tuple(d[name])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("video_len", "query_len", "moment_frac", "distractor_frac"):
            d[name] = list(d[name])
        return d


@dataclass(frozen=True)
class MomentLabel:
    """Inclusive clip interval [b, e] of a ground-truth moment."""

    b: int
    e: int

    def __post_init__(self):
        if self.b < 0 or self.e < self.b:
            raise DomainError(f"need 0 <= b <= e, got ({self.b}, {self.e})")

    def positives(self, n_video: int) -> np.ndarray:
        mask = np.zeros(n_video, dtype=bool)
        mask[self.b : self.e + 1] = True
        return mask


@dataclass
class GroundingSample:
    sample_id: str
    video: np.ndarray
    query: np.ndarray
    moments: list[MomentLabel]
    clip_saliency: np.ndarray

    @property
    def n_video(self) -> int:
        return self.video.shape[0]


def _place_segment(stream: CounterStream, n_video: int, width: int, occupied: list[tuple[int, int]]):
    """Try to drop a width-long interval that avoids `occupied`; None if stuck."""
    for _ in range(32):
        b = stream.randint(0, n_video - width)
        e = b + width - 1
        if all(e < lo or b > hi for lo, hi in occupied):
            return b, e
    return None


def _saliency_bump(n_video: int, b: int, e: int) -> np.ndarray:
    """Zero outside [b, e]; inside, a 0.6..1.0 ridge peaking at the center."""
    sal = np.zeros(n_video)
    width = e - b + 1
    rel = (np.arange(width) + 0.5) / width
    sal[b : e + 1] = 0.6 + 0.4 * (1.0 - np.abs(2.0 * rel - 1.0))
    return sal


def generate(task: TaskSpec, n: int, seed: int | None = None) -> list[GroundingSample]:
    """Deterministically build n samples. n <= 0 yields an empty list.

    The seed defaults to task.seed; passing one here overrides it.
    """
    if n <= 0:
        return []
    seed = task.seed if seed is None else seed
    arch_stream = CounterStream(stream_state(seed, 0))
    archetypes = arch_stream.gaussians((task.archetypes, task.feat_dim))
    norms = np.linalg.norm(archetypes, axis=1)
    samples = []
    for i in range(n):
        s = CounterStream(stream_state(seed, 1 + i))
        nv = s.randint(*task.video_len)
        nq = s.randint(*task.query_len)
        k = s.randint(0, task.archetypes - 1)
        video = task.noise * s.gaussians((nv, task.feat_dim))

        lo_f, hi_f = task.moment_frac
        width = max(2, min(nv - 1, round(nv * (lo_f + (hi_f - lo_f) * s.uniforms(1)[0]))))
        b = s.randint(0, nv - width)
        e = b + width - 1
        video[b : e + 1] += archetypes[k]
        occupied = [(b, e)]

        placed = 0
        for d in range(task.distractors):
            j = (k + 1 + d % (task.archetypes - 1)) % task.archetypes
            # match the target's feature norm to within 10 percent
            jitter = 1.0 + 0.1 * (s.uniforms(1)[0] - 0.5)
            base = archetypes[j] * (norms[k] / norms[j]) * jitter
            dlo, dhi = task.distractor_frac
            dw = max(1, round(nv * (dlo + (dhi - dlo) * s.uniforms(1)[0])))
            spot = None
            while spot is None and dw >= 1:
                spot = _place_segment(s, nv, dw, occupied)
                if spot is None:
                    dw -= 1
            if spot is None:
                continue
            db, de = spot
            video[db : de + 1] += base
            occupied.append((db, de))
            placed += 1
        if task.distractors > 0 and placed == 0:
            raise ContractError(f"sample {i}: could not place any distractor segment")

        query = archetypes[k] + task.noise * s.gaussians((nq, task.feat_dim))
        samples.append(
            GroundingSample(
                sample_id=f"s{seed & 0xFFFFFFFFFFFFFFFF:x}-{i:06d}",
                video=video,
                query=query,
                moments=[MomentLabel(b, e)],
                clip_saliency=_saliency_bump(nv, b, e),
            )
        )
    return samples


# ----------------------------------------------------------------- JSON lines


def _open_for(path, mode: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode + "t", encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def write_dataset(samples: list[GroundingSample], path) -> None:
    """One JSON object per line; gzip-compressed when the path ends in .gz."""
    with _open_for(path, "w") as fh:
        for s in samples:
            rec = {
                "sample_id": s.sample_id,
                "video": s.video.tolist(),
                "query": s.query.tolist(),
                "moments": [{"b": m.b, "e": m.e} for m in s.moments],
                "clip_saliency": s.clip_saliency.tolist(),
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_dataset(path) -> list[GroundingSample]:
    """Inverse of write_dataset; read(write(x)) reproduces x exactly."""
    out = []
    with _open_for(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                video = np.asarray(rec["video"], dtype=np.float64)
                query = np.asarray(rec["query"], dtype=np.float64)
                sal = np.asarray(rec["clip_saliency"], dtype=np.float64)
                moments = [MomentLabel(int(m["b"]), int(m["e"])) for m in rec["moments"]]
                sid = rec["sample_id"]
            except (KeyError, TypeError, ValueError) as err:
                raise ParseError(f"{path}: line {lineno}: {err}") from err
            if video.ndim != 2 or query.ndim != 2 or sal.shape != (video.shape[0],):
                raise ParseError(f"{path}: line {lineno}: inconsistent array shapes")
            out.append(GroundingSample(sid, video, query, moments, sal))
    return out
