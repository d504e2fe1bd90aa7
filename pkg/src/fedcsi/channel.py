"""Synthetic pilot/CSI data: tapped multipath channels with Doppler drift.

A channel realization is a complex grid over (subcarrier, OFDM symbol)
built from a handful of paths with random gains, integer delay taps and
Doppler shifts.  The model input is the noisy pilot observation of that
grid bilinearly interpolated to full size; the label is the true grid.
Complex grids are carried as two real channels (real, imaginary).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

PROVENANCE_CODES = {"authentic": 0, "outdate": 1, "collusion": 2, "reverse": 3}
_CODE_TO_PROVENANCE = {v: k for k, v in PROVENANCE_CODES.items()}

_MAGIC = b"FSCH"
_VERSION = 1


@dataclass(frozen=True)
class ChannelConfig:
    grid_height: int = 72
    grid_width: int = 14
    path_count: int = 12
    max_delay_taps: int = 6
    doppler_spread: float = 0.05
    pilot_noise_stddev: float = 0.1
    pilot_rows_stride: int = 2
    pilot_cols_stride: int = 2
    # amplitude of the channel process: E|H|^2 = gain_scale^2.  The loss
    # pre-filter's printed CDF has an absolute sensitivity, so experiments
    # exercising it need CSI magnitudes commensurate with its working band.
    gain_scale: float = 1.0

    def validate(self) -> None:
        if self.gain_scale <= 0:
            raise ValueError("gain_scale must be > 0")
        if self.grid_height < self.pilot_rows_stride or self.grid_width < self.pilot_cols_stride:
            raise ValueError("grid dimensions must be >= pilot strides")
        if self.pilot_rows_stride < 1 or self.pilot_cols_stride < 1:
            raise ValueError("pilot strides must be >= 1")
        if self.path_count < 1:
            raise ValueError("path_count must be >= 1")
        if self.max_delay_taps < 0:
            raise ValueError("max_delay_taps must be >= 0")
        if self.pilot_noise_stddev < 0 or self.doppler_spread < 0:
            raise ValueError("noise stddev and doppler spread must be >= 0")


@dataclass(frozen=True)
class FadingParams:
    """Per-sample multipath parameters, kept so stale CSI can be re-synthesized."""

    gains: np.ndarray    # complex, (P,)
    delays: np.ndarray   # int, (P,)
    dopplers: np.ndarray  # float, (P,)


@dataclass
class ChannelSample:
    input: np.ndarray   # (H, W, 2) interpolated noisy pilots
    label: np.ndarray   # (H, W, 2) true CSI
    provenance: str = "authentic"
    origin_mu_id: int = 0
    uid: int = 0
    fading: Optional[FadingParams] = None


@dataclass
class CachedDataset:
    """One station's per-round dataset with its authentic/poisoned split."""

    samples: list
    sbs_id: int = 0
    round_index: int = 0
    # client-owned sample count, used as the aggregation weight; top-up
    # padding appended by the server does not change it
    aggregation_len: int = 0

    def __post_init__(self):
        if self.aggregation_len == 0:
            self.aggregation_len = len(self.samples)

    @property
    def l_n(self) -> int:
        return len(self.samples)

    def partition(self) -> tuple[list, list]:
        authentic = [s for s in self.samples if s.provenance == "authentic"]
        poisoned = [s for s in self.samples if s.provenance != "authentic"]
        return authentic, poisoned


def split_complex(grid: np.ndarray) -> np.ndarray:
    return np.stack([grid.real, grid.imag], axis=-1)


def merge_complex(tensor: np.ndarray) -> np.ndarray:
    return tensor[..., 0] + 1j * tensor[..., 1]


def draw_fading(cfg: ChannelConfig, rng: np.random.Generator) -> FadingParams:
    p = cfg.path_count
    re_im = rng.normal(scale=cfg.gain_scale * np.sqrt(1.0 / (2.0 * p)), size=(p, 2))
    gains = re_im[:, 0] + 1j * re_im[:, 1]
    delays = rng.integers(0, cfg.max_delay_taps + 1, size=p)
    dopplers = rng.uniform(-cfg.doppler_spread, cfg.doppler_spread, size=p)
    return FadingParams(gains=gains, delays=delays, dopplers=dopplers)


def channel_grid(
    fading: FadingParams, height: int, width: int, time_offset: float = 0.0
) -> np.ndarray:
    """H[f, t] = sum_p a_p exp(-j2pi f tau_p / H) exp(j2pi nu_p (t + offset))."""
    f = np.arange(height)[:, None]
    t = np.arange(width)[:, None] + time_offset
    steer_f = np.exp(-2j * np.pi * f * fading.delays[None, :] / height)
    steer_t = np.exp(2j * np.pi * t * fading.dopplers[None, :])
    return (steer_f * fading.gains) @ steer_t.T


def synthesize_channel(cfg: ChannelConfig, rng: np.random.Generator) -> np.ndarray:
    cfg.validate()
    fading = draw_fading(cfg, rng)
    return channel_grid(fading, cfg.grid_height, cfg.grid_width)


def _interp_matrix(n_out: int, knots: np.ndarray) -> np.ndarray:
    """Dense linear-interpolation operator with constant extension past the ends."""
    k = len(knots)
    mat = np.zeros((n_out, k))
    if k == 1:
        mat[:, 0] = 1.0
        return mat
    pos = np.arange(n_out)
    j = np.clip(np.searchsorted(knots, pos, side="right") - 1, 0, k - 2)
    frac = (pos - knots[j]) / (knots[j + 1] - knots[j])
    frac = np.clip(frac, 0.0, 1.0)
    mat[pos, j] = 1.0 - frac
    mat[pos, j + 1] += frac
    return mat


def interpolate_pilots(
    cfg: ChannelConfig, observed: np.ndarray, pilot_rows: np.ndarray, pilot_cols: np.ndarray
) -> np.ndarray:
    row_op = _interp_matrix(cfg.grid_height, pilot_rows)
    col_op = _interp_matrix(cfg.grid_width, pilot_cols)
    return row_op @ observed @ col_op.T


def make_sample(
    cfg: ChannelConfig,
    rng: np.random.Generator,
    origin_mu_id: int = 0,
    uid: int = 0,
) -> ChannelSample:
    """One (pilot-grid input, CSI label) pair; authentic at generation time."""
    cfg.validate()
    fading = draw_fading(cfg, rng)
    grid = channel_grid(fading, cfg.grid_height, cfg.grid_width)
    pilot_rows = np.arange(0, cfg.grid_height, cfg.pilot_rows_stride)
    pilot_cols = np.arange(0, cfg.grid_width, cfg.pilot_cols_stride)
    # complex pilot noise CN(0, sigma^2): each real component N(0, sigma^2/2)
    noise = rng.normal(
        scale=cfg.pilot_noise_stddev / np.sqrt(2.0),
        size=(len(pilot_rows), len(pilot_cols), 2),
    )
    observed = grid[np.ix_(pilot_rows, pilot_cols)] + noise[..., 0] + 1j * noise[..., 1]
    estimate = interpolate_pilots(cfg, observed, pilot_rows, pilot_cols)
    return ChannelSample(
        input=split_complex(estimate),
        label=split_complex(grid),
        provenance="authentic",
        origin_mu_id=origin_mu_id,
        uid=uid,
        fading=fading,
    )


def lagged_label(sample: ChannelSample, lag: float) -> np.ndarray:
    """Label of the same channel process observed `lag` symbols earlier/later."""
    if sample.fading is None:
        raise ValueError("sample carries no fading parameters; cannot lag it")
    h, w = sample.label.shape[:2]
    return split_complex(channel_grid(sample.fading, h, w, time_offset=lag))


def generate_round_caches(
    cfg: ChannelConfig,
    lengths: list[int],
    rng: np.random.Generator,
    round_index: int = 0,
    uid_start: int = 0,
    mu_id_start: int = 0,
) -> list[CachedDataset]:
    """Fresh disjoint caches of the requested lengths with sequential MU ids."""
    caches = []
    uid = uid_start
    mu_id = mu_id_start
    for sbs_id, length in enumerate(lengths):
        samples = []
        for _ in range(int(length)):
            samples.append(make_sample(cfg, rng, origin_mu_id=mu_id, uid=uid))
            uid += 1
            mu_id += 1
        caches.append(CachedDataset(samples=samples, sbs_id=sbs_id, round_index=round_index))
    return caches


def topup_with_pretrain(
    cache: CachedDataset,
    pretrain_set: list,
    i_min: int,
    rng: np.random.Generator,
) -> CachedDataset:
    """Pad a short cache to the training minimum with pre-training samples.

    Draws without replacement, falling back to replacement when the
    pre-training set is smaller than the deficit.  The aggregation weight
    keeps the original (client-owned) length.
    """
    if i_min < 0:
        raise ValueError("i_min must be >= 0")
    deficit = i_min - cache.l_n
    if deficit <= 0:
        return cache
    if not pretrain_set:
        raise ValueError("cannot top up from an empty pre-training set")
    use_replacement = len(pretrain_set) < deficit
    idx = rng.choice(len(pretrain_set), size=deficit, replace=use_replacement)
    extra = [pretrain_set[i] for i in idx]
    return CachedDataset(
        samples=list(cache.samples) + extra,
        sbs_id=cache.sbs_id,
        round_index=cache.round_index,
        aggregation_len=cache.aggregation_len,
    )


# --------------------------- dataset file format --------------------------

def save_dataset(path, samples: list) -> None:
    """Flat little-endian dump: FSCH header then per-sample grids and tags."""
    if not samples:
        raise ValueError("refusing to write an empty dataset")
    h, w = samples[0].input.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIII", _MAGIC, _VERSION, len(samples), h, w))
        for s in samples:
            if s.input.shape != (h, w, 2) or s.label.shape != (h, w, 2):
                raise ValueError("inconsistent sample shapes in dataset")
            fh.write(np.ascontiguousarray(s.input, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(s.label, dtype="<f8").tobytes())
            fh.write(struct.pack("<BI", PROVENANCE_CODES[s.provenance], s.origin_mu_id))


def load_dataset(path) -> list[ChannelSample]:
    with open(path, "rb") as fh:
        header = fh.read(20)
        if len(header) != 20:
            raise ValueError("truncated dataset header")
        magic, version, count, h, w = struct.unpack("<4sIIII", header)
        if magic != _MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        if version != _VERSION:
            raise ValueError(f"unsupported dataset version {version}")
        grid_bytes = h * w * 2 * 8
        samples = []
        for uid in range(count):
            raw = fh.read(2 * grid_bytes + 5)
            if len(raw) != 2 * grid_bytes + 5:
                raise ValueError(f"truncated dataset at sample {uid}")
            inp = np.frombuffer(raw[:grid_bytes], dtype="<f8").reshape(h, w, 2).copy()
            lab = np.frombuffer(raw[grid_bytes:2 * grid_bytes], dtype="<f8").reshape(h, w, 2).copy()
            code, mu_id = struct.unpack("<BI", raw[2 * grid_bytes:])
            if code not in _CODE_TO_PROVENANCE:
                raise ValueError(f"unknown provenance code {code}")
            samples.append(ChannelSample(
                input=inp, label=lab, provenance=_CODE_TO_PROVENANCE[code],
                origin_mu_id=mu_id, uid=uid,
            ))
    return samples
