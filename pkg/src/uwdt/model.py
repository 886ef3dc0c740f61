"""CNN-encoder + causal-transformer sequence model, training and rollout.

The same architecture serves the teacher, the student and the behavior-
cloning baseline. In return-conditioned mode each timestep contributes the
token triple (return-to-go, state, previous action) and the action logits
are read from the previous-action position, so the prediction for step t
conditions on exactly the tokens up to and including timestep t. In bc mode
the return tokens are dropped entirely (2K tokens instead of 3K).
"""

from __future__ import annotations

import io
import json
import math
import struct
import zlib

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import CONTEXT_K, PAD_ACTION, RTG_GAMMA, Episode, sample_batch
from .occupancy import GRID_SHAPE, render_grid
from .world import MAX_DECISION_STEPS, N_ACTIONS, build_scenario, step_decision

LOG_EPS = 1e-12

MODE_RETURN = "return-conditioned"
MODE_BC = "bc"
MODES = (MODE_RETURN, MODE_BC)


class TrainingDivergenceError(RuntimeError):
    pass


class CheckpointError(Exception):
    pass


class TransformerConfig:
    """Architecture and optimization settings (defaults follow the paper setup)."""

    FIELDS = ("context", "d_model", "n_layers", "n_heads", "lr", "batch_size",
              "epochs", "weight_decay", "warmup_ratio", "grad_clip", "discount",
              "dropout", "ffn_mult", "d_embed", "enc_channels", "grid_shape",
              "max_timesteps")

    def __init__(self, context=CONTEXT_K, d_model=32, n_layers=4, n_heads=1,
                 lr=1e-5, batch_size=16, epochs=20, weight_decay=5e-5,
                 warmup_ratio=0.1, grad_clip=0.25, discount=RTG_GAMMA,
                 dropout=0.1, ffn_mult=4, d_embed=32, enc_channels=(32, 64, 128),
                 grid_shape=GRID_SHAPE, max_timesteps=MAX_DECISION_STEPS):
        if d_model % n_heads != 0:
            raise ValueError("n_heads must divide d_model")
        if min(context, d_model, n_layers, n_heads, batch_size, epochs) < 1:
            raise ValueError("config integers must be positive")
        self.context = context
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.weight_decay = weight_decay
        self.warmup_ratio = warmup_ratio
        self.grad_clip = grad_clip
        self.discount = discount
        self.dropout = dropout
        self.ffn_mult = ffn_mult
        self.d_embed = d_embed
        self.enc_channels = tuple(enc_channels)
        self.grid_shape = tuple(grid_shape)
        self.max_timesteps = max_timesteps

    def to_dict(self):
        return {name: getattr(self, name) for name in self.FIELDS}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def conv_output_hw(hw, n_convs=3, kernel=3, stride=2, padding=1):
    h, w = hw
    for _ in range(n_convs):
        h = (h + 2 * padding - kernel) // stride + 1
        w = (w + 2 * padding - kernel) // stride + 1
    return h, w


class GridEncoder(nn.Module):
    """Three stride-2 3x3 convolutions, each followed by ReLU, batch norm and
    spatial dropout, flattened and projected to a d_embed vector. The flatten
    size is fixed from the configured grid shape rather than inferred lazily."""

    def __init__(self, cfg):
        super().__init__()
        channels = (cfg.grid_shape[0],) + cfg.enc_channels
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        for cin, cout in zip(channels[:-1], channels[1:]):
            self.convs.append(nn.Conv2d(cin, cout, kernel_size=3, stride=2, padding=1))
            self.norms.append(nn.BatchNorm2d(cout))
        self.drop = nn.Dropout2d(cfg.dropout)
        h, w = conv_output_hw(cfg.grid_shape[1:], n_convs=len(self.convs))
        self.flat_size = channels[-1] * h * w
        self.proj = nn.Linear(self.flat_size, cfg.d_embed)

    def forward(self, x):
        for conv, norm in zip(self.convs, self.norms):
            x = self.drop(norm(F.relu(conv(x))))
        return self.proj(x.flatten(1))


class RMSNorm(nn.Module):
    def __init__(self, d, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))
        self.eps = eps

    def forward(self, x):
        scale = torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + self.eps)
        return x * scale * self.weight


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.d_model // cfg.n_heads
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.out = nn.Linear(cfg.d_model, cfg.d_model)
        self.attn_drop = nn.Dropout(cfg.dropout)
        self.resid_drop = nn.Dropout(cfg.dropout)

    def forward(self, x, attn_mask):
        b, t, d = x.shape
        q, k, v = self.qkv(x).split(d, dim=-1)
        q = q.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~attn_mask.unsqueeze(1), float("-inf"))
        attn = self.attn_drop(torch.softmax(scores, dim=-1))
        y = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.resid_drop(self.out(y))


class DecoderBlock(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.norm1 = RMSNorm(cfg.d_model)
        self.attn = CausalSelfAttention(cfg)
        self.norm2 = RMSNorm(cfg.d_model)
        hidden = cfg.ffn_mult * cfg.d_model
        self.ffn = nn.Sequential(nn.Linear(cfg.d_model, hidden), nn.GELU(),
                                 nn.Linear(hidden, cfg.d_model), nn.Dropout(cfg.dropout))

    def forward(self, x, attn_mask):
        x = x + self.attn(self.norm1(x), attn_mask)
        return x + self.ffn(self.norm2(x))


class SeqModel(nn.Module):
    def __init__(self, cfg, mode=MODE_RETURN):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.cfg = cfg
        self.mode = mode
        self.tokens_per_step = 2 if mode == MODE_BC else 3
        self.encoder = GridEncoder(cfg)
        self.embed_return = nn.Linear(1, cfg.d_model)
        self.embed_state = nn.Linear(cfg.d_embed, cfg.d_model)
        self.embed_action = nn.Embedding(N_ACTIONS + 1, cfg.d_model)
        self.embed_timestep = nn.Embedding(cfg.max_timesteps, cfg.d_model)
        self.embed_norm = RMSNorm(cfg.d_model)
        self.blocks = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.n_layers))
        self.final_norm = RMSNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, N_ACTIONS)

    @property
    def context_tokens(self):
        return self.tokens_per_step * self.cfg.context

    def encode_state(self, grid, train_mode=False):
        """Embed one occupancy grid; returns a numpy vector of size d_embed."""
        grid = np.asarray(grid, dtype=np.float32)
        if grid.shape != tuple(self.cfg.grid_shape):
            raise ValueError(f"grid shape {grid.shape} != {tuple(self.cfg.grid_shape)}")
        self.train(train_mode)
        with torch.no_grad():
            out = self.encoder(torch.from_numpy(grid).unsqueeze(0).to(
                next(self.parameters()).dtype))
        self.eval()
        return out.squeeze(0).cpu().numpy()

    def forward(self, rtg, grids, prev_actions, timesteps, mask):
        """Action logits for every window position: [B, K, n_actions].

        Tensors follow dataset.assemble_batch. mask must be left-padding
        shaped (zeros then ones per row).
        """
        b, k = mask.shape
        if k != self.cfg.context:
            raise ValueError(f"window K={k} does not match config context {self.cfg.context}")
        mask_bool = mask > 0.5
        if not torch.all(mask_bool[:, 1:] >= mask_bool[:, :-1]):
            raise ValueError("mask must be left-padded (non-decreasing per row)")
        if not torch.any(mask_bool):
            raise ValueError("batch has no valid tokens")
        dtype = next(self.parameters()).dtype
        step_emb = self.embed_timestep(timesteps)
        state_tok = self.embed_state(self.encoder(
            grids.reshape(b * k, *self.cfg.grid_shape).to(dtype)).reshape(b, k, -1)) + step_emb
        action_tok = self.embed_action(prev_actions) + step_emb
        if self.mode == MODE_BC:
            toks = torch.stack([state_tok, action_tok], dim=2)
        else:
            return_tok = self.embed_return(rtg.unsqueeze(-1).to(dtype)) + step_emb
            toks = torch.stack([return_tok, state_tok, action_tok], dim=2)
        n_per = self.tokens_per_step
        x = self.embed_norm(toks.reshape(b, k * n_per, -1))

        token_valid = mask_bool.repeat_interleave(n_per, dim=1)
        t = k * n_per
        causal = torch.tril(torch.ones(t, t, dtype=torch.bool, device=x.device))
        attn_mask = causal.unsqueeze(0) & token_valid.unsqueeze(1)
        attn_mask = attn_mask | torch.eye(t, dtype=torch.bool, device=x.device).unsqueeze(0)

        for block in self.blocks:
            x = block(x, attn_mask)
        x = self.final_norm(x)
        # Prediction for step t is read at its last token (the a_{t-1} slot).
        read = x[:, n_per - 1::n_per, :]
        return self.head(read)


def weighted_nll(logits, targets, mask, weights=None):
    """Masked mean negative log-likelihood, optionally token-weighted.

    With weights=None (or all ones) this is the plain cross-entropy mean
    over the M valid tokens; weights scale each token's log-likelihood.
    """
    logp = F.log_softmax(logits, dim=-1)
    logp = torch.clamp(logp, min=math.log(LOG_EPS))
    picked = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    m = mask.sum()
    if m.item() < 1:
        raise ValueError("no valid tokens in batch")
    if weights is not None:
        if weights.shape != picked.shape:
            raise ValueError(f"weights shape {tuple(weights.shape)} does not "
                             f"match tokens {tuple(picked.shape)}")
        picked = picked * weights
    return -(picked * mask).sum() / m


def nll_loss(logits, targets, mask):
    """Mean NLL over valid tokens (the unweighted objective)."""
    return weighted_nll(logits, targets, mask)


def batch_to_tensors(batch, dtype=torch.float32):
    return {
        "rtg": torch.from_numpy(batch["rtg"]).to(dtype),
        "grids": torch.from_numpy(batch["grids"]).to(dtype),
        "prev_actions": torch.from_numpy(batch["prev_actions"]),
        "timesteps": torch.from_numpy(batch["timesteps"]),
        "targets": torch.from_numpy(batch["targets"]),
        "mask": torch.from_numpy(batch["mask"]).to(dtype),
    }


def build_model(cfg, mode, seed, dtype=torch.float32):
    torch.manual_seed(seed)
    model = SeqModel(cfg, mode).to(dtype)
    return model


def fit(dataset, cfg, mode, seed, weight_fn=None, model=None, log_every=0):
    """Shared training loop for plain and weighted training.

    weight_fn(batch_tensors) -> (weights tensor [B,K] or None, diagnostics
    dict) is invoked per step with gradients disabled around it; weights are
    treated as constants. Returns (model, history) where history holds one
    record per optimization step.
    """
    torch.use_deterministic_algorithms(True)
    if model is None:
        model = build_model(cfg, mode, seed)
    sampler = np.random.Generator(np.random.PCG64(np.random.SeedSequence(
        (seed & 0xFFFFFFFFFFFFFFFF, 0x5A17))))
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999),
                            eps=1e-8, weight_decay=cfg.weight_decay)
    steps_per_epoch = max(1, math.ceil(dataset.n_windows / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = int(round(cfg.warmup_ratio * total_steps))
    history = []
    model.train()
    for step in range(total_steps):
        if warmup_steps > 0 and step < warmup_steps:
            lr = cfg.lr * (step + 1) / warmup_steps
        else:
            lr = cfg.lr
        for group in opt.param_groups:
            group["lr"] = lr
        np_batch, m_valid = sample_batch(dataset, cfg.batch_size, sampler, cfg.discount)
        batch = batch_to_tensors(np_batch, next(model.parameters()).dtype)
        record = {"step": step, "lr": lr, "m_valid": m_valid}
        weights = None
        if weight_fn is not None:
            weights, diag = weight_fn(batch)
            record.update(diag)
        logits = model(batch["rtg"], batch["grids"], batch["prev_actions"],
                       batch["timesteps"], batch["mask"])
        loss = weighted_nll(logits, batch["targets"], batch["mask"], weights)
        if not torch.isfinite(loss):
            raise TrainingDivergenceError(
                f"non-finite loss {loss.item()} at step {step}")
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        record["loss"] = float(loss.detach())
        history.append(record)
        if log_every and (step + 1) % log_every == 0:
            print(f"step {step + 1}/{total_steps} loss {record['loss']:.4f}")
    model.eval()
    return model, history


def train(dataset, cfg, mode=MODE_RETURN, seed=0, log_every=0):
    """Train a model from scratch with the unweighted objective."""
    return fit(dataset, cfg, mode, seed, weight_fn=None, log_every=log_every)


def rollout(model, env_seed, mode="greedy", target_return=22.0, n_interact="sample",
            scenario_cfg=None, sample_seed=0):
    """Run one environment episode under the model policy.

    Maintains a sliding K-step window; the return-to-go conditioning starts
    at target_return and is decremented by each received scaled reward,
    floored at zero. Greedy mode breaks ties toward the lowest action index.
    Returns (Episode, per-step action distributions [T, n_actions], world).
    """
    policy = ModelPolicy(model, mode=mode, target_return=target_return,
                         sample_seed=sample_seed)
    world = build_scenario(env_seed, n_interact, scenario_cfg)
    policy.begin(world)
    grids, actions, rewards = [], [], []
    while not world.is_terminal:
        grid = render_grid(world)
        action, _ = policy.act_on_grid(grid, world.decision_step)
        world, _, r = step_decision(world, action)
        policy.feed_reward(r)
        grids.append(grid)
        actions.append(int(action))
        rewards.append(r)
    if world.collided:
        cause = "collision"
    elif world.ego_exited:
        cause = "exit"
    else:
        cause = "horizon"
    episode = Episode.from_float_grids(np.stack(grids), actions, rewards, cause)
    return episode, np.array(policy.dists, dtype=np.float64), world


class ModelPolicy:
    """Sliding-window wrapper turning a SeqModel into a per-step policy."""

    def __init__(self, model, mode="greedy", target_return=22.0, sample_seed=0):
        if mode not in ("greedy", "stochastic"):
            raise ValueError("rollout mode must be 'greedy' or 'stochastic'")
        self.model = model
        self.mode = mode
        self.target_return = target_return
        self.rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence((sample_seed, 0xD15C))))
        self.begin(None)

    def begin(self, world):
        self.rtg = float(self.target_return)
        self.hist_rtg = []
        self.hist_grids = []
        self.hist_prev = []
        self.hist_steps = []
        self.dists = []
        self._last_action = None

    def act_on_grid(self, grid, decision_step):
        k = self.model.cfg.context
        prev = PAD_ACTION if self._last_action is None else self._last_action
        self.hist_rtg.append(self.rtg)
        self.hist_grids.append(np.asarray(grid, dtype=np.float32))
        self.hist_prev.append(prev)
        self.hist_steps.append(decision_step)
        lo = max(0, len(self.hist_steps) - k)
        n = len(self.hist_steps) - lo
        pad = k - n
        rtg = np.zeros((1, k), dtype=np.float32)
        grids = np.zeros((1, k) + tuple(self.model.cfg.grid_shape), dtype=np.float32)
        prev_actions = np.full((1, k), PAD_ACTION, dtype=np.int64)
        timesteps = np.zeros((1, k), dtype=np.int64)
        mask = np.zeros((1, k), dtype=np.float32)
        rtg[0, pad:] = self.hist_rtg[lo:]
        grids[0, pad:] = np.stack(self.hist_grids[lo:])
        prev_actions[0, pad:] = self.hist_prev[lo:]
        timesteps[0, pad:] = self.hist_steps[lo:]
        mask[0, pad:] = 1.0
        self.model.eval()
        dtype = next(self.model.parameters()).dtype
        with torch.no_grad():
            logits = self.model(torch.from_numpy(rtg).to(dtype),
                                torch.from_numpy(grids).to(dtype),
                                torch.from_numpy(prev_actions),
                                torch.from_numpy(timesteps),
                                torch.from_numpy(mask).to(dtype))
        probs = torch.softmax(logits[0, -1].double(), dim=-1).cpu().numpy()
        probs = probs / probs.sum()
        self.dists.append(probs)
        if self.mode == "greedy":
            action = int(np.argmax(probs))
        else:
            action = int(self.rng.choice(N_ACTIONS, p=probs))
        self._last_action = action
        return action, probs

    def feed_reward(self, reward):
        self.rtg = max(0.0, self.rtg - float(reward))


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"UWDTCK1\x00"
CKPT_VERSION = 1


def save_checkpoint(path, model):
    """Write the custom checkpoint format: config json + named f32 blobs + CRC."""
    meta = {"mode": model.mode, "config": model.cfg.to_dict()}
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    state = model.state_dict()
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        blob = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes()
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
    payload = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<H", CKPT_VERSION))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_checkpoint(path, expect_mode=None):
    """Rebuild a SeqModel from a checkpoint; validates magic/version/CRC."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CKPT_MAGIC) + 6:
        raise CheckpointError("checkpoint truncated")
    if blob[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {blob[:len(CKPT_MAGIC)]!r}")
    (version,) = struct.unpack_from("<H", blob, len(CKPT_MAGIC))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    payload = blob[len(CKPT_MAGIC) + 2:-4]
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(payload) != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    off = 0
    (meta_len,) = struct.unpack_from("<I", payload, off)
    off += 4
    meta = json.loads(payload[off:off + meta_len].decode("utf-8"))
    off += meta_len
    if expect_mode is not None and meta["mode"] != expect_mode:
        raise CheckpointError(f"checkpoint mode {meta['mode']!r} != {expect_mode!r}")
    cfg = TransformerConfig.from_dict(meta["config"])
    model = SeqModel(cfg, meta["mode"])
    state = model.state_dict()
    (n_params,) = struct.unpack_from("<I", payload, off)
    off += 4
    if n_params != len(state):
        raise CheckpointError(f"checkpoint has {n_params} blobs, model needs {len(state)}")
    for _ in range(n_params):
        (name_len,) = struct.unpack_from("<H", payload, off)
        off += 2
        name = payload[off:off + name_len].decode("utf-8")
        off += name_len
        (blob_len,) = struct.unpack_from("<I", payload, off)
        off += 4
        if name not in state:
            raise CheckpointError(f"unexpected parameter {name!r}")
        arr = np.frombuffer(payload, dtype="<f4", count=blob_len // 4, offset=off)
        off += blob_len
        target = state[name]
        if arr.size != target.numel():
            raise CheckpointError(f"size mismatch for {name!r}")
        state[name] = torch.from_numpy(arr.copy()).reshape(target.shape).to(target.dtype)
    model.load_state_dict(state)
    model.eval()
    return model
