"""The adversarial training loop: patch sampling, WGAN schedule, checkpoints, inference.

One generator iteration runs ``critic_ratio(i)`` critic updates followed by a
single bidirectional generator update (fixed->moving and moving->fixed warped
in the same step). Critic weights are clipped after every critic update.
Runs are deterministic given the config seed in single-threaded mode.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

from .losses import (LossBreakdown, bending_energy, generator_total_loss, ncc, soft_dice,
                     wgan_critic_loss, wgan_generator_loss)
from .nets import CriticMode, assemble_critic_input, build_critic, build_generator, clip_parameters
from .synth import CaseData, DisturbConfig, disturb
from .volgrid import Mask, Volume, torso_mask
from .warpfield import DVF, warp_labels, warp_tensor, warp_trilinear

CHECKPOINT_FORMAT = "regseg.ckpt.v1"


class NonFiniteLossError(RuntimeError):
    """Raised when a training step produces a non-finite loss."""


@dataclass
class TrainConfig:
    """Hyperparameters of the adversarial training run."""

    lambda1: float = 1.0
    lambda2: float = 0.01
    lr: float = 1e-5
    clip: float = 0.01
    warmup_gen_iters: int = 25
    warmup_critic_ratio: int = 100
    steady_critic_ratio: int = 5
    patch_size: int = 96
    patches_per_pair: int = 1000
    critic_mode: str = "concat_channel"
    total_gen_iters: int = 1000
    seed: int = 0
    depth: int = 4
    base_filters: int = 16
    critic_depth: int = 4
    critic_base_filters: int = 16
    margin: int = 20
    use_dice: bool = True
    ckpt_every: int = 500
    num_threads: int | None = None
    torso_threshold: float = -0.75

    def __post_init__(self):
        if self.lr <= 0 or self.clip <= 0 or self.patch_size < 1 or self.total_gen_iters < 0:
            raise ValueError("lr, clip, patch_size must be positive; total_gen_iters >= 0")
        if self.warmup_critic_ratio < 1 or self.steady_critic_ratio < 1 or self.warmup_gen_iters < 0:
            raise ValueError("critic ratios must be >= 1 and warmup_gen_iters >= 0")
        if self.patches_per_pair < 1:
            raise ValueError("patches_per_pair must be >= 1")
        CriticMode(self.critic_mode)  # validates the mode string

    @property
    def output_size(self) -> int:
        return self.patch_size - 2 * self.margin


def _parse_scalar(text: str, typename: str):
    text = text.strip()
    if typename == "int":
        return int(text)
    if typename == "float":
        return float(text)
    if typename == "bool":
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"cannot parse boolean from {text!r}")
    if typename == "int | None":
        return None if text.lower() in ("none", "") else int(text)
    return text


def read_config_file(path) -> dict:
    """Flat ``key = value`` config document mirroring TrainConfig field names."""
    values = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}: malformed config line {line!r}")
            key, val = (p.strip() for p in line.split("=", 1))
            values[key] = val
    return values


def make_train_config(*sources) -> TrainConfig:
    """Build a TrainConfig from dicts in increasing precedence order."""
    types = {f.name: str(f.type) for f in fields(TrainConfig)}
    merged = {}
    for src in sources:
        for key, val in (src or {}).items():
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            merged[key] = _parse_scalar(val, types[key]) if isinstance(val, str) else val
    return TrainConfig(**merged)


def critic_ratio(gen_iter: int, cfg: TrainConfig) -> int:
    """Critic updates per generator iteration (heavy warmup, then steady ratio)."""
    if gen_iter < 1:
        raise ValueError(f"generator iterations are 1-based, got {gen_iter}")
    return cfg.warmup_critic_ratio if gen_iter <= cfg.warmup_gen_iters else cfg.steady_critic_ratio


# ---------------------------------------------------------------------------
# Patch sampling


@dataclass
class PatchPair:
    """Aligned fixed/moving crops plus their segmentations."""

    fixed_patch: np.ndarray
    moving_patch: np.ndarray
    fixed_seg_patch: np.ndarray
    moving_seg_patch: np.ndarray
    origin: tuple
    spacing: tuple
    num_labels: int
    has_foreground: bool = True


def _crop(arr, origin, size):
    sl = tuple(slice(o, o + size) for o in origin)
    return np.ascontiguousarray(arr[sl])


def _draw_patch_origins(case: CaseData, n, size, mask_data, rng):
    """Patch origins with centers inside the mask; redraws empty-foreground picks.

    Falls back to uniform in-bounds sampling when no mask voxel admits a full
    crop. Returns (origins, has_foreground).
    """
    dims = case.fixed.dims
    if any(size > d for d in dims):
        raise ValueError(f"volume dims {dims} smaller than patch size {size}")
    half = size // 2
    spans = [d - size for d in dims]
    sub = mask_data[tuple(slice(half, half + s + 1) for s in spans)]
    candidates = np.argwhere(sub)  # candidate centers relative to `half`

    fixed_fg = case.fixed_seg.labels > 0
    moving_fg = case.moving_seg.labels > 0

    def draw_origin():
        if len(candidates):
            center = candidates[int(rng.integers(len(candidates)))]
            return tuple(int(c) for c in center)
        return tuple(int(rng.integers(s + 1)) for s in spans)

    origins = np.empty((n, 3), dtype=np.int64)
    has_fg = np.empty(n, dtype=bool)
    for i in range(n):
        origin, ok = None, False
        for _ in range(10):
            origin = draw_origin()
            sl = tuple(slice(o, o + size) for o in origin)
            if fixed_fg[sl].any() and moving_fg[sl].any():
                ok = True
                break
        origins[i] = origin
        has_fg[i] = ok
    return origins, has_fg


def extract_patch_pair(case: CaseData, origin, size, has_foreground=True) -> PatchPair:
    origin = tuple(int(o) for o in origin)
    return PatchPair(
        fixed_patch=_crop(case.fixed.data, origin, size).astype(np.float32),
        moving_patch=_crop(case.moving.data, origin, size).astype(np.float32),
        fixed_seg_patch=_crop(case.fixed_seg.labels, origin, size),
        moving_seg_patch=_crop(case.moving_seg.labels, origin, size),
        origin=origin,
        spacing=case.fixed.spacing,
        num_labels=case.fixed_seg.num_labels,
        has_foreground=bool(has_foreground),
    )


def sample_patches(case: CaseData, n: int, size: int, mask: Mask, seed) -> list:
    """Draw `n` patch pairs with centers uniform over mask-interior positions."""
    rng = np.random.default_rng(seed)
    origins, has_fg = _draw_patch_origins(case, n, size, mask.data, rng)
    return [extract_patch_pair(case, o, size, f) for o, f in zip(origins, has_fg)]


def case_sampling_mask(case: CaseData, threshold: float) -> Mask:
    """Torso mask of the fixed image; full-volume fallback for degenerate inputs."""
    try:
        return torso_mask(case.fixed, threshold)
    except ValueError:
        return Mask(np.ones(case.fixed.dims, dtype=bool))


class PatchStream:
    """Seed-determined infinite patch sequence cycling epochs over the cases."""

    def __init__(self, cases, cfg: TrainConfig):
        self.cases = list(cases)
        self.cfg = cfg
        self.masks = [case_sampling_mask(c, cfg.torso_threshold) for c in self.cases]
        self.consumed = 0
        self._key = None
        self._origins = None
        self._has_fg = None

    def _batch(self, epoch, case_idx):
        if self._key != (epoch, case_idx):
            rng = np.random.default_rng(
                np.random.SeedSequence((self.cfg.seed, epoch, case_idx)))
            self._origins, self._has_fg = _draw_patch_origins(
                self.cases[case_idx], self.cfg.patches_per_pair, self.cfg.patch_size,
                self.masks[case_idx].data, rng)
            self._key = (epoch, case_idx)
        return self._origins, self._has_fg

    def take(self) -> PatchPair:
        npp = self.cfg.patches_per_pair
        per_epoch = npp * len(self.cases)
        epoch, rem = divmod(self.consumed, per_epoch)
        case_idx, j = divmod(rem, npp)
        origins, has_fg = self._batch(epoch, case_idx)
        self.consumed += 1
        return extract_patch_pair(self.cases[case_idx], origins[j],
                                  self.cfg.patch_size, has_fg[j])


# ---------------------------------------------------------------------------
# Optimization


def _center_crop(t: torch.Tensor, margin: int) -> torch.Tensor:
    if margin == 0:
        return t
    return t[..., margin:-margin, margin:-margin, margin:-margin]


def _onehot_foreground(labels: np.ndarray, num_labels: int) -> torch.Tensor:
    """Float (K, x, y, z) stack of the foreground labels 1..K."""
    chans = [(labels == k).astype(np.float32) for k in range(1, num_labels)]
    if not chans:
        return torch.zeros((0,) + labels.shape)
    return torch.from_numpy(np.stack(chans))


class _Frozen:
    def __init__(self, net):
        self.net = net

    def __enter__(self):
        self.prev = [p.requires_grad for p in self.net.parameters()]
        for p in self.net.parameters():
            p.requires_grad_(False)

    def __exit__(self, *exc):
        for p, r in zip(self.net.parameters(), self.prev):
            p.requires_grad_(r)


class Trainer:
    """Holds the generator, critic, their optimizers, and the disturbance RNG."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.generator = build_generator(cfg.patch_size, depth=cfg.depth,
                                         base_filters=cfg.base_filters, margin=cfg.margin)
        self.critic = build_critic(depth=cfg.critic_depth,
                                   base_filters=cfg.critic_base_filters,
                                   mode=CriticMode(cfg.critic_mode))
        self.opt_g = torch.optim.RMSprop(self.generator.parameters(), lr=cfg.lr)
        self.opt_d = torch.optim.RMSprop(self.critic.parameters(), lr=cfg.lr)
        self.np_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xD15)))
        self.disturb_cfg = DisturbConfig()
        self.gen_iter = 0

    # -- tensors ---------------------------------------------------------

    def _tensors(self, patch: PatchPair):
        fx = torch.from_numpy(patch.fixed_patch)[None, None]
        mv = torch.from_numpy(patch.moving_patch)[None, None]
        return fx, mv

    def _spacing_view(self, patch):
        return torch.tensor(patch.spacing, dtype=torch.float32).view(3, 1, 1, 1)

    def _predict_dvf(self, a_img, b_img):
        return self.generator(torch.cat([a_img, b_img], dim=1))

    # -- critic ----------------------------------------------------------

    def critic_step(self, patch: PatchPair) -> float:
        """One critic update on a fake (warped) vs real (disturbed) pair."""
        cfg = self.cfg
        fx, mv = self._tensors(patch)
        was_training = self.generator.training
        self.generator.eval()
        with torch.no_grad():
            dvf = self._predict_dvf(fx, mv)
            disp_vox = dvf[0] / self._spacing_view(patch)
            warped_img = warp_tensor(mv[0], disp_vox)
            mv_fg = torch.from_numpy(
                (patch.moving_seg_patch > 0).astype(np.float32))[None]
            warped_fg = warp_tensor(mv_fg, disp_vox)
            fx_crop = _center_crop(fx[0], cfg.margin)

            real_vol = disturb(
                Volume(_crop_np(patch.fixed_patch, cfg.margin), patch.spacing),
                self.disturb_cfg, rng=self.np_rng)
            real_other = torch.from_numpy(real_vol.data.astype(np.float32))[None]
            real_fg = torch.from_numpy(
                (_crop_np(patch.fixed_seg_patch, cfg.margin) > 0).astype(np.float32))[None]
        self.generator.train(was_training)

        mode = CriticMode(cfg.critic_mode)
        d_fake = self.critic(assemble_critic_input(fx_crop[None], warped_img[None],
                                                   warped_fg[None], mode))
        d_real = self.critic(assemble_critic_input(fx_crop[None], real_other[None],
                                                   real_fg[None], mode))
        loss = wgan_critic_loss(d_fake, d_real)
        if not math.isfinite(float(loss)):
            raise NonFiniteLossError(f"critic loss is {float(loss)}")
        self.opt_d.zero_grad()
        loss.backward()
        self.opt_d.step()
        clip_parameters(self.critic, cfg.clip)
        return float(loss)

    # -- generator ---------------------------------------------------------

    def _direction_terms(self, fx, fx_seg, mv, mv_seg, patch: PatchPair):
        cfg = self.cfg
        dvf = self._predict_dvf(fx, mv)
        disp_vox = dvf[0] / self._spacing_view(patch)
        warped_img = warp_tensor(mv[0], disp_vox)
        fx_crop = _center_crop(fx[0], cfg.margin)
        sim_ncc = 1.0 - ncc(warped_img, fx_crop)

        use_dice = cfg.use_dice and patch.has_foreground and patch.num_labels > 1
        if use_dice:
            mv_onehot = _onehot_foreground(mv_seg, patch.num_labels)
            warped_oh = warp_tensor(mv_onehot, disp_vox)
            fx_onehot = _center_crop(_onehot_foreground(fx_seg, patch.num_labels), cfg.margin)
            sim_dsc = 1.0 - soft_dice(warped_oh, fx_onehot)
            warped_fg = warped_oh.sum(dim=0, keepdim=True).clamp(0.0, 1.0)
        else:
            sim_dsc = torch.zeros(())
            mv_fg = torch.from_numpy((mv_seg > 0).astype(np.float32))[None]
            warped_fg = warp_tensor(mv_fg, disp_vox)

        smooth = bending_energy(dvf[0], patch.spacing)
        with _Frozen(self.critic):
            scores = self.critic(assemble_critic_input(
                fx_crop[None], warped_img[None], warped_fg[None], CriticMode(cfg.critic_mode)))
        adv = wgan_generator_loss(scores)
        return sim_ncc, sim_dsc, smooth, adv

    def generator_step(self, patch: PatchPair) -> LossBreakdown:
        """One bidirectional generator update; returns the summed loss breakdown."""
        cfg = self.cfg
        fx, mv = self._tensors(patch)
        fwd = self._direction_terms(fx, patch.fixed_seg_patch, mv, patch.moving_seg_patch, patch)
        rev = self._direction_terms(mv, patch.moving_seg_patch, fx, patch.fixed_seg_patch, patch)
        parts = [a + b for a, b in zip(fwd, rev)]
        total = parts[0] + parts[1] + cfg.lambda1 * parts[2] + cfg.lambda2 * parts[3]
        if not math.isfinite(float(total)):
            raise NonFiniteLossError(f"generator loss is {float(total)}")
        self.opt_g.zero_grad()
        total.backward()
        self.opt_g.step()
        return generator_total_loss(*(float(p) for p in parts),
                                    lam1=cfg.lambda1, lam2=cfg.lambda2)

    # -- state -------------------------------------------------------------

    def checkpoint(self, patches_consumed: int = 0) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "config": asdict(self.cfg),
            "gen_iter": self.gen_iter,
            "patches_consumed": patches_consumed,
            "generator": self.generator.state_dict(),
            "critic": self.critic.state_dict(),
            "opt_generator": self.opt_g.state_dict(),
            "opt_critic": self.opt_d.state_dict(),
            "numpy_rng": self.np_rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
        }

    def load_state(self, ckpt: dict) -> None:
        self.generator.load_state_dict(ckpt["generator"])
        self.critic.load_state_dict(ckpt["critic"])
        self.opt_g.load_state_dict(ckpt["opt_generator"])
        self.opt_d.load_state_dict(ckpt["opt_critic"])
        self.np_rng.bit_generator.state = ckpt["numpy_rng"]
        torch.set_rng_state(ckpt["torch_rng"])
        self.gen_iter = ckpt["gen_iter"]


def _crop_np(arr, margin):
    if margin == 0:
        return arr
    return arr[margin:-margin, margin:-margin, margin:-margin]


def save_checkpoint(ckpt: dict, path) -> None:
    torch.save(ckpt, path)


def load_checkpoint(path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: incompatible checkpoint (expected {CHECKPOINT_FORMAT})")
    return ckpt


def train(cases, cfg: TrainConfig, out_dir=None, resume=None,
          on_critic_step=None, on_generator_step=None) -> dict:
    """Run the alternating WGAN schedule over `cases` and return the final checkpoint.

    Writes one JSON line per generator iteration (loss breakdown plus critic
    stats) and periodic checkpoints when `out_dir` is given. `resume` takes a
    checkpoint path or dict; the architecture config then comes from the
    checkpoint, with `cfg.total_gen_iters` as the new target.
    """
    cases = list(cases)
    if not cases:
        raise ValueError("training requires at least one case")
    if resume is not None:
        ckpt = load_checkpoint(resume) if not isinstance(resume, dict) else resume
        resumed_cfg = make_train_config(ckpt["config"],
                                        {"total_gen_iters": cfg.total_gen_iters})
        cfg = resumed_cfg
    if cfg.num_threads:
        torch.set_num_threads(cfg.num_threads)
    trainer = Trainer(cfg)
    stream = PatchStream(cases, cfg)
    if resume is not None:
        trainer.load_state(ckpt)
        stream.consumed = ckpt["patches_consumed"]

    log_fh = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "train_log.jsonl"), "a")
    try:
        for i in range(trainer.gen_iter + 1, cfg.total_gen_iters + 1):
            k = critic_ratio(i, cfg)
            critic_losses = []
            for _ in range(k):
                loss = trainer.critic_step(stream.take())
                critic_losses.append(loss)
                if on_critic_step:
                    on_critic_step(trainer, loss)
            breakdown = trainer.generator_step(stream.take())
            trainer.gen_iter = i
            if on_generator_step:
                on_generator_step(trainer, breakdown)
            if log_fh:
                record = {"iter": i, **asdict(breakdown),
                          "critic_steps": k,
                          "critic_loss": float(np.mean(critic_losses))}
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if out_dir and cfg.ckpt_every and i % cfg.ckpt_every == 0 and i < cfg.total_gen_iters:
                save_checkpoint(trainer.checkpoint(stream.consumed),
                                os.path.join(out_dir, f"ckpt_{i:06d}.pt"))
    except NonFiniteLossError:
        if out_dir:
            save_checkpoint(trainer.checkpoint(stream.consumed),
                            os.path.join(out_dir, "ckpt_diagnostic.pt"))
        raise
    finally:
        if log_fh:
            log_fh.close()
    ckpt = trainer.checkpoint(stream.consumed)
    if out_dir:
        save_checkpoint(ckpt, os.path.join(out_dir, "ckpt_final.pt"))
    return ckpt


# ---------------------------------------------------------------------------
# Inference


def _tile_starts(dim: int, out: int) -> list:
    starts = list(range(0, dim - out + 1, out))
    if starts[-1] != dim - out:
        starts.append(dim - out)
    return starts


def stitch_tiles(tiles, starts, dims) -> np.ndarray:
    """Average overlapping (3, o, o, o) tiles placed at `starts` into a full field."""
    acc = np.zeros((3,) + tuple(dims), dtype=np.float64)
    count = np.zeros(tuple(dims), dtype=np.float64)
    for tile, start in zip(tiles, starts):
        o = tile.shape[1]
        sl = tuple(slice(s, s + o) for s in start)
        acc[(slice(None),) + sl] += tile
        count[sl] += 1.0
    return (acc / count[None]).astype(np.float32)


def predict_dvf(ckpt, fixed: Volume, moving: Volume) -> DVF:
    """Tile the volume pair through the generator and stitch the DVF crops."""
    if not isinstance(ckpt, dict):
        ckpt = load_checkpoint(ckpt)
    cfg = make_train_config(ckpt["config"])
    gen = build_generator(cfg.patch_size, depth=cfg.depth,
                          base_filters=cfg.base_filters, margin=cfg.margin)
    gen.load_state_dict(ckpt["generator"])
    gen.eval()
    out = cfg.output_size
    if any(d < out for d in fixed.dims):
        raise ValueError(
            f"volume dims {fixed.dims} smaller than one generator patch output {out}")
    if fixed.dims != moving.dims:
        raise ValueError(f"fixed/moving dims mismatch: {fixed.dims} vs {moving.dims}")
    m = cfg.margin
    padded_f = np.pad(fixed.data.astype(np.float32), m, mode="edge")
    padded_m = np.pad(moving.data.astype(np.float32), m, mode="edge")
    starts = [(sx, sy, sz)
              for sx in _tile_starts(fixed.dims[0], out)
              for sy in _tile_starts(fixed.dims[1], out)
              for sz in _tile_starts(fixed.dims[2], out)]
    tiles = []
    with torch.no_grad():
        for start in starts:
            sl = tuple(slice(s, s + cfg.patch_size) for s in start)
            inp = torch.from_numpy(np.stack([padded_f[sl], padded_m[sl]]))[None]
            tiles.append(gen(inp)[0].numpy())
    disp = stitch_tiles(tiles, starts, fixed.dims)
    return DVF(disp, fixed.spacing, fixed.origin)


def propagate(ckpt, fixed: Volume, moving: Volume, moving_seg):
    """Estimate the DVF from images alone, then warp the moving image and contours."""
    dvf = predict_dvf(ckpt, fixed, moving)
    warped = warp_trilinear(moving, dvf)
    warped_seg = warp_labels(moving_seg, dvf)
    return dvf, warped, warped_seg
