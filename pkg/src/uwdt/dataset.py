"""Trajectory persistence, return-to-go, context windows and batch sampling.

File format (little-endian), version 1:

    magic   8 bytes  "UWDTDS1\\0"
    u16     version (= 1)
    u32     episode count
    payload per episode:
        u16  T (1..22)
        u8   terminal cause (0 collision, 1 exit, 2 horizon)
        T  x u8   actions
        T  x f32  rewards (scaled, in [0, 1])
        T  x 4*41*50 x i8  quantized grids
    u32     CRC32 of the payload bytes

Grid channels are quantized as round(x * 127) in int8 and dequantized as
q / 127; actions and rewards round-trip losslessly.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .occupancy import GRID_SHAPE
from .world import MAX_DECISION_STEPS, N_ACTIONS

MAGIC = b"UWDTDS1\x00"
VERSION = 1
GRID_QUANT = 127
PAD_ACTION = N_ACTIONS          # dedicated padding id for a_{-1}
CONTEXT_K = 20
RTG_GAMMA = 0.99                # single source for dataset RTGs and search backups

TERMINAL_CAUSES = ("collision", "exit", "horizon")
_GRID_CELLS = GRID_SHAPE[0] * GRID_SHAPE[1] * GRID_SHAPE[2]


class DatasetError(Exception):
    pass


class BadMagicError(DatasetError):
    pass


class VersionMismatchError(DatasetError):
    pass


class TruncatedError(DatasetError):
    pass


class ChecksumError(DatasetError):
    pass


class InvariantError(DatasetError):
    pass


def quantize_grid(grid):
    return np.clip(np.rint(np.asarray(grid) * GRID_QUANT), -GRID_QUANT, GRID_QUANT).astype(np.int8)


def dequantize_grid(q):
    return q.astype(np.float32) / GRID_QUANT


class Episode:
    """One recorded trajectory; grids are stored quantized (int8)."""

    __slots__ = ("grids", "actions", "rewards", "terminal_cause", "_rtg_cache")

    def __init__(self, grids, actions, rewards, terminal_cause):
        grids = np.ascontiguousarray(grids, dtype=np.int8)
        actions = np.ascontiguousarray(actions, dtype=np.uint8)
        rewards = np.ascontiguousarray(rewards, dtype=np.float32)
        t = len(actions)
        if not 1 <= t <= MAX_DECISION_STEPS:
            raise InvariantError(f"episode length {t} outside [1, {MAX_DECISION_STEPS}]")
        if grids.shape != (t,) + GRID_SHAPE:
            raise InvariantError(f"grid array shape {grids.shape} does not match T={t}")
        if rewards.shape != (t,):
            raise InvariantError("rewards length does not match actions")
        if rewards.min() < 0.0 or rewards.max() > 1.0:
            raise InvariantError("rewards must lie in [0, 1]")
        if actions.max() >= N_ACTIONS:
            raise InvariantError("action id out of range")
        if terminal_cause not in TERMINAL_CAUSES:
            raise InvariantError(f"unknown terminal cause {terminal_cause!r}")
        self.grids = grids
        self.actions = actions
        self.rewards = rewards
        self.terminal_cause = terminal_cause
        self._rtg_cache = {}

    @classmethod
    def from_float_grids(cls, grids, actions, rewards, terminal_cause):
        return cls(quantize_grid(np.asarray(grids)), actions, rewards, terminal_cause)

    @property
    def T(self):
        return len(self.actions)

    def returns_to_go(self, gamma=RTG_GAMMA):
        got = self._rtg_cache.get(gamma)
        if got is None:
            got = compute_rtg(self.rewards, gamma)
            self._rtg_cache[gamma] = got
        return got


def compute_rtg(rewards, gamma):
    """Discounted return-to-go for every step: R_t = r_t + gamma * R_{t+1}."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.ndim != 1 or rewards.size == 0:
        raise ValueError("rewards must be a non-empty 1-D array")
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must be in [0, 1)")
    out = np.empty_like(rewards)
    acc = 0.0
    for i in range(rewards.size - 1, -1, -1):
        acc = rewards[i] + gamma * acc
        out[i] = acc
    return out


class TokenWindow:
    """A K-step context ending at episode step t_end (0-based, inclusive).

    Steps before max(0, t_end - K + 1) are left-padding and masked out.
    """

    __slots__ = ("episode", "t_end", "K")

    def __init__(self, episode, t_end, K=CONTEXT_K):
        if K < 1:
            raise ValueError("K must be >= 1")
        if not 0 <= t_end < episode.T:
            raise ValueError("t_end outside episode")
        self.episode = episode
        self.t_end = t_end
        self.K = K

    @property
    def start(self):
        return max(0, self.t_end - self.K + 1)

    @property
    def n_valid(self):
        return self.t_end - self.start + 1


def make_windows(episode, K=CONTEXT_K):
    """One window ending at every step of the episode."""
    return [TokenWindow(episode, t, K) for t in range(episode.T)]


def assemble_batch(windows, gamma=RTG_GAMMA):
    """Stack windows into dense arrays for the model.

    Returns a dict with keys rtg [B,K], grids [B,K,4,41,50], prev_actions
    [B,K], targets [B,K], timesteps [B,K], mask [B,K]. Padded positions have
    mask 0, prev_action PAD_ACTION, and zeros elsewhere; position k==0 of an
    episode also uses PAD_ACTION as its previous action.
    """
    if not windows:
        raise ValueError("empty window list")
    K = windows[0].K
    b = len(windows)
    rtg = np.zeros((b, K), dtype=np.float32)
    grids = np.zeros((b, K) + GRID_SHAPE, dtype=np.float32)
    prev_actions = np.full((b, K), PAD_ACTION, dtype=np.int64)
    targets = np.zeros((b, K), dtype=np.int64)
    timesteps = np.zeros((b, K), dtype=np.int64)
    mask = np.zeros((b, K), dtype=np.float32)
    for row, win in enumerate(windows):
        if win.K != K:
            raise ValueError("windows in a batch must share K")
        ep = win.episode
        lo, hi = win.start, win.t_end + 1
        n = hi - lo
        pad = K - n
        rtg[row, pad:] = ep.returns_to_go(gamma)[lo:hi]
        grids[row, pad:] = dequantize_grid(ep.grids[lo:hi])
        if lo > 0:
            prev_actions[row, pad:] = ep.actions[lo - 1:hi - 1]
        else:
            prev_actions[row, pad + 1:] = ep.actions[:hi - 1]
        targets[row, pad:] = ep.actions[lo:hi]
        timesteps[row, pad:] = np.arange(lo, hi)
        mask[row, pad:] = 1.0
    return {"rtg": rtg, "grids": grids, "prev_actions": prev_actions,
            "targets": targets, "timesteps": timesteps, "mask": mask}


class TrajectoryDataset:
    """Immutable episode collection with uniform window sampling."""

    def __init__(self, episodes, K=CONTEXT_K):
        if not episodes:
            raise ValueError("dataset must contain at least one episode")
        self.episodes = list(episodes)
        self.K = K
        self.windows = []
        for ep in self.episodes:
            self.windows.extend(make_windows(ep, K))

    @property
    def n_windows(self):
        return len(self.windows)

    def sample_windows(self, batch_size, rng):
        idx = rng.integers(0, len(self.windows), size=batch_size)
        return [self.windows[i] for i in idx]


def sample_batch(dataset, batch_size, rng, gamma=RTG_GAMMA):
    """Uniform (with replacement) mini-batch of windows.

    Returns (batch dict, M) where M is the number of valid tokens.
    """
    wins = dataset.sample_windows(batch_size, rng)
    batch = assemble_batch(wins, gamma)
    return batch, int(batch["mask"].sum())


# -- binary io ---------------------------------------------------------------

_CAUSE_CODE = {name: i for i, name in enumerate(TERMINAL_CAUSES)}


def _encode_episode(ep):
    parts = [struct.pack("<HB", ep.T, _CAUSE_CODE[ep.terminal_cause]),
             ep.actions.tobytes(),
             ep.rewards.astype("<f4").tobytes(),
             ep.grids.tobytes()]
    return b"".join(parts)


def write_dataset(path, episodes):
    episodes = list(episodes)
    payload = b"".join(_encode_episode(ep) for ep in episodes)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(episodes)))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def read_dataset(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 6:
        raise TruncatedError("file too short for header")
    if blob[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:len(MAGIC)]!r}")
    version, count = struct.unpack_from("<HI", blob, len(MAGIC))
    if version != VERSION:
        raise VersionMismatchError(f"unsupported version {version}")
    body = blob[len(MAGIC) + 6:]
    if len(body) < 4:
        raise TruncatedError("missing checksum")
    payload, crc_bytes = body[:-4], body[-4:]
    if zlib.crc32(payload) != struct.unpack("<I", crc_bytes)[0]:
        raise ChecksumError("payload CRC mismatch")
    episodes = []
    off = 0
    for _ in range(count):
        if off + 3 > len(payload):
            raise TruncatedError("episode header past end of payload")
        t, cause_code = struct.unpack_from("<HB", payload, off)
        off += 3
        if not 1 <= t <= MAX_DECISION_STEPS:
            raise InvariantError(f"episode length {t} outside [1, {MAX_DECISION_STEPS}]")
        if cause_code >= len(TERMINAL_CAUSES):
            raise InvariantError(f"unknown terminal cause code {cause_code}")
        need = t * (1 + 4 + _GRID_CELLS)
        if off + need > len(payload):
            raise TruncatedError("episode body past end of payload")
        actions = np.frombuffer(payload, dtype=np.uint8, count=t, offset=off)
        off += t
        rewards = np.frombuffer(payload, dtype="<f4", count=t, offset=off)
        off += 4 * t
        grids = np.frombuffer(payload, dtype=np.int8, count=t * _GRID_CELLS,
                              offset=off).reshape((t,) + GRID_SHAPE)
        off += t * _GRID_CELLS
        episodes.append(Episode(grids, actions, rewards, TERMINAL_CAUSES[cause_code]))
    if off != len(payload):
        raise InvariantError(f"{len(payload) - off} trailing payload bytes")
    return episodes
