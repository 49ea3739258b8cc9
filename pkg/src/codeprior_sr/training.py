"""Codebook pretraining, stage-1 uncertainty estimation, stage-2 guided SR.

Every phase runs single-threaded and draws all randomness from one seeded
``torch.Generator`` whose state is checkpointed with the model and optimiser
moments, so an interrupted run resumes bit-exactly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import losses as L
from .codebook import quantize_nearest
from .degradation import ToyDataset
from .metrics import bicubic_baseline, report_images
from .networks import NetConfig, PatchDiscriminator, SRModel, VQAutoencoder

log = logging.getLogger(__name__)

PHASES = ("pretrain", "stage1", "stage2")

VARIANTS = {
    "baseline": dict(use_uncertainty=False, k=1, use_aa=False),
    "uncertainty": dict(use_uncertainty=True, k=1, use_aa=False),
    "top3": dict(use_uncertainty=False, k=3, use_aa=False),
    "top5": dict(use_uncertainty=False, k=5, use_aa=False),
    "aa": dict(use_uncertainty=False, k=1, use_aa=True),
    "full": dict(use_uncertainty=True, k=3, use_aa=True),
}


class FreezeViolation(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    net: NetConfig = field(default_factory=NetConfig)
    batch_size: int = 8
    patch_size: int = 32
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.99)
    lr_pretrain: float = 2e-3
    lr: float = 1e-3
    lr_disc: float = 1e-4
    lr_uncertainty: float = 5e-3
    pretrain_steps: int = 3000
    stage1_steps: int = 2000
    stage2_steps: int = 3000
    adv_warmup_frac: float = 0.1
    lr_schedule: str = "cosine"
    restart_every: int = 100
    checkpoint_every: int = 500
    log_every: int = 1
    use_uncertainty: bool = True
    warm_start_lq: bool = True
    weights: L.LossWeights = field(default_factory=L.LossWeights)

    def __post_init__(self):
        for name in ("pretrain_steps", "stage1_steps", "stage2_steps", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.patch_size % (self.net.r_e * self.net.scale):
            raise ValueError("patch size must be divisible by r_e * scale")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        net = NetConfig(**d.pop("net", {}))
        weights = L.LossWeights(**d.pop("weights", {}))
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(net=net, weights=weights, **d)

    def with_variant(self, variant: str) -> "TrainConfig":
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
        v = VARIANTS[variant]
        net = dataclasses.replace(self.net, k=max(v["k"], 1), use_topk=v["k"] > 1, use_aa=v["use_aa"])
        return dataclasses.replace(self, net=net, use_uncertainty=v["use_uncertainty"])


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# checkpoint container
#
#   b"CPSRCKPT" | u32 version | u64 header length | JSON header | tensor bytes
#
# The header lists every tensor (name, dtype, shape, byte offset) in sorted
# name order, so identical state always serialises to identical bytes.

CKPT_MAGIC = b"CPSRCKPT"
CKPT_VERSION = 1
_DTYPES = {
    "float32": torch.float32,
    "float64": torch.float64,
    "int64": torch.int64,
    "uint8": torch.uint8,
    "bool": torch.bool,
}


@dataclass
class Checkpoint:
    phase: str
    config: dict
    tensors: dict[str, torch.Tensor]
    meta: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def subset(self, prefix: str) -> dict[str, torch.Tensor]:
        n = len(prefix)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    if ckpt.phase not in PHASES:
        raise CheckpointError(f"unknown phase {ckpt.phase!r}")
    index, blobs, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        t = ckpt.tensors[name].detach().cpu().contiguous()
        dtype = str(t.dtype).replace("torch.", "")
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().tobytes() if t.numel() else b""
        index.append({"name": name, "dtype": dtype, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {
            "phase": ckpt.phase,
            "config": ckpt.config,
            "config_hash": ckpt.config_hash,
            "meta": ckpt.meta,
            "tensors": index,
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(header)) + header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path, expect_phase: str | None = None, expect_config: dict | None = None) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint container")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {CKPT_VERSION})")
    header = json.loads(blob[20:20 + hlen])
    if config_hash(header["config"]) != header["config_hash"]:
        raise CheckpointError("stored config hash does not match stored config")
    if expect_phase is not None and header["phase"] != expect_phase:
        raise CheckpointError(f"checkpoint phase is {header['phase']!r}, expected {expect_phase!r}")
    if expect_config is not None and config_hash(expect_config) != header["config_hash"]:
        raise CheckpointError("checkpoint config hash does not match the requested config")
    base = 20 + hlen
    tensors = {}
    for e in header["tensors"]:
        raw = blob[base + e["offset"]:base + e["offset"] + e["nbytes"]]
        dtype = _DTYPES[e["dtype"]]
        np_dtype = torch.empty(0, dtype=dtype).numpy().dtype
        arr = np.frombuffer(raw, dtype=np_dtype).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr)
    return Checkpoint(header["phase"], header["config"], tensors, header["meta"])


# ---------------------------------------------------------------------------
# train state


def _prefixed(prefix: str, d: dict) -> dict:
    return {prefix + k: v for k, v in d.items()}


def _optimizer_tensors(opt: torch.optim.Optimizer, names: dict) -> dict:
    out = {}
    for p, st in opt.state.items():
        name = names[p]
        for key, val in st.items():
            out[f"{name}.{key}"] = val if torch.is_tensor(val) else torch.tensor(val)
    return out


def _load_optimizer_tensors(opt: torch.optim.Optimizer, names: dict, tensors: dict) -> None:
    for group in opt.param_groups:
        for p in group["params"]:
            name = names[p]
            st = {k[len(name) + 1:]: v.clone() for k, v in tensors.items() if k.startswith(name + ".")}
            if st:
                opt.state[p] = st


@dataclass
class TrainState:
    """Everything needed to continue a phase: modules, optimisers, step, RNG."""

    phase: str
    config: TrainConfig
    modules: dict[str, torch.nn.Module]
    optimizers: dict[str, torch.optim.Optimizer]
    frozen: list[str]
    generator: torch.Generator
    step: int = 0

    def trainable_names(self) -> list[str]:
        return [
            f"{m}.{n}" for m, mod in self.modules.items() for n, p in mod.named_parameters() if p.requires_grad
        ]

    def frozen_digest(self) -> dict[str, str]:
        out = {}
        for m, mod in self.modules.items():
            for n, t in list(mod.named_parameters()) + list(mod.named_buffers()):
                key = f"{m}.{n}"
                if any(key == f or key.startswith(f + ".") for f in self.frozen):
                    out[key] = hashlib.sha256(t.detach().cpu().numpy().tobytes()).hexdigest()
        return out

    def _param_names(self, opt_key: str) -> dict:
        names = {}
        for m, mod in self.modules.items():
            for n, p in mod.named_parameters():
                names[p] = f"{m}.{n}"
        return names

    def to_checkpoint(self) -> Checkpoint:
        tensors = {}
        for m, mod in self.modules.items():
            tensors.update(_prefixed(f"model.{m}.", mod.state_dict()))
        for k, opt in self.optimizers.items():
            tensors.update(_prefixed(f"opt.{k}.", _optimizer_tensors(opt, self._param_names(k))))
        tensors["rng"] = self.generator.get_state()
        return Checkpoint(
            self.phase,
            self.config.to_dict(),
            tensors,
            {"step": self.step, "frozen": sorted(self.frozen), "trainable": sorted(self.trainable_names())},
        )

    def restore(self, ckpt: Checkpoint) -> None:
        if ckpt.phase != self.phase:
            raise CheckpointError(f"cannot resume phase {self.phase!r} from a {ckpt.phase!r} checkpoint")
        if ckpt.config_hash != config_hash(self.config.to_dict()):
            raise CheckpointError("checkpoint config hash does not match the run config")
        for m, mod in self.modules.items():
            mod.load_state_dict(ckpt.subset(f"model.{m}."))
        for k, opt in self.optimizers.items():
            _load_optimizer_tensors(opt, self._param_names(k), ckpt.subset(f"opt.{k}."))
        self.generator.set_state(ckpt.tensors["rng"])
        self.step = int(ckpt.meta["step"])


def adam(params, lr: float, cfg: TrainConfig, extra: dict | None = None) -> torch.optim.Adam:
    """Adam over the trainable ``params``; ``extra`` maps a learning rate to its own parameter list."""
    extra = extra or {}
    special = {id(p) for ps in extra.values() for p in ps}
    groups = [{"params": [p for p in params if p.requires_grad and id(p) not in special], "lr": lr}]
    groups += [{"params": [p for p in ps if p.requires_grad], "lr": r} for r, ps in extra.items()]
    for g in groups:
        g["base_lr"] = g["lr"]
    return torch.optim.Adam([g for g in groups if g["params"]], lr=lr, betas=cfg.betas)


def lr_factor(step: int, total: int, schedule: str) -> float:
    """Multiplier of the base learning rate at 0-based ``step`` of ``total``."""
    if schedule == "constant":
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * step / total))


def set_lr(opt: torch.optim.Optimizer, factor: float) -> None:
    # a pure function of the step counter, so resumed runs see the same rates
    for group in opt.param_groups:
        group["lr"] = group["base_lr"] * factor


def freeze(module: torch.nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(False)


# ---------------------------------------------------------------------------
# data


def to_nchw(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32)).permute(0, 3, 1, 2).contiguous()


def to_nhwc(t: torch.Tensor) -> np.ndarray:
    return t.detach().permute(0, 2, 3, 1).cpu().numpy()


@dataclass
class PairBatcher:
    """Seeded random batches of aligned HR/LR crops with flip / transpose augmentation.

    Crop offsets are multiples of ``align`` HR pixels so that latent cells of
    the crop coincide with latent cells of the full image.
    """

    hr: torch.Tensor
    lr: torch.Tensor | None = None
    patch: int | None = None
    align: int = 4

    def sample(self, g: torch.Generator, n: int):
        idx = torch.randint(0, len(self.hr), (n,), generator=g)
        aug = torch.randint(0, 8, (n,), generator=g)
        size = self.hr.shape[-1]
        patch = size if self.patch is None else min(self.patch, size)
        if patch % self.align:
            raise ValueError(f"patch {patch} is not a multiple of {self.align}")
        slots = (size - patch) // self.align + 1
        offs = torch.randint(0, slots, (n, 2), generator=g) * self.align
        scale = 1 if self.lr is None else size // self.lr.shape[-1]
        hrs, lrs = [], []
        for i, a, (oy, ox) in zip(idx.tolist(), aug.tolist(), offs.tolist()):
            hrs.append(_augment(self.hr[i, :, oy:oy + patch, ox:ox + patch], a))
            if self.lr is not None:
                p, y, x = patch // scale, oy // scale, ox // scale
                lrs.append(_augment(self.lr[i, :, y:y + p, x:x + p], a))
        return torch.stack(hrs), (torch.stack(lrs) if lrs else None)


def _augment(x: torch.Tensor, a: int) -> torch.Tensor:
    if a & 1:
        x = x.flip(-1)
    if a & 2:
        x = x.flip(-2)
    if a & 4:
        x = x.transpose(-1, -2)
    return x


# ---------------------------------------------------------------------------
# phase driver


class RunLog:
    """Per-step structured loss lines (JSON) in ``<run_dir>/losses.jsonl``."""

    def __init__(self, run_dir: Path | None, resume: bool = False):
        self.path = None if run_dir is None else Path(run_dir) / "losses.jsonl"
        self.records: list[dict] = []
        if self.path is not None and not resume:
            self.path.write_text("")

    def write(self, rec: dict) -> None:
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _run(
    state: TrainState,
    total_steps: int,
    step_fn: Callable[[TrainState], dict],
    run_dir: Path | None,
    stop_at: int | None = None,
) -> list[dict]:
    torch.set_num_threads(1)
    before = state.frozen_digest()
    runlog = RunLog(run_dir, resume=state.step > 0)
    end = total_steps if stop_at is None else min(stop_at, total_steps)
    while state.step < end:
        rec = step_fn(state)
        state.step += 1
        if not all(np.isfinite(v) for v in rec.values()):
            raise DivergenceError(f"{state.phase}: non-finite loss at step {state.step}: {rec}")
        if state.step % state.config.log_every == 0 or state.step == end:
            runlog.write({"step": state.step, "stage": state.phase, **rec})
        if state.step % 100 == 0:
            log.info("%s step %d/%d total %.5f", state.phase, state.step, total_steps, rec["total"])
        if run_dir is not None and state.step % state.config.checkpoint_every == 0:
            save_checkpoint(state.to_checkpoint(), Path(run_dir) / f"state_{state.phase}_{state.step:06d}.ckpt")
    after = state.frozen_digest()
    drift = sorted(k for k in before if before[k] != after.get(k))
    if drift:
        raise FreezeViolation(f"{state.phase}: frozen parameters changed: {drift[:5]}")
    if run_dir is not None:
        save_checkpoint(state.to_checkpoint(), Path(run_dir) / f"state_{state.phase}_final.ckpt")
    return runlog.records


def _prepare_dir(run_dir, overwrite: bool, resume: bool = False) -> Path | None:
    if run_dir is None:
        return None
    d = Path(run_dir)
    if d.exists() and (d / "DONE").exists() and not overwrite and not resume:
        raise FileExistsError(f"run directory {d} holds a completed run; pass overwrite to replace it")
    d.mkdir(parents=True, exist_ok=True)
    if overwrite and (d / "DONE").exists():
        (d / "DONE").unlink()
    return d


def _snapshot_config(run_dir: Path | None, cfg: TrainConfig, extra: dict | None = None) -> None:
    if run_dir is not None:
        payload = {"train": cfg.to_dict(), **(extra or {})}
        (run_dir / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _finish(run_dir: Path | None, metrics: dict) -> None:
    if run_dir is not None:
        (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
        (run_dir / "DONE").write_text("")


# ---------------------------------------------------------------------------
# pretraining


def _restart_dead_codes(vq: VQAutoencoder, usage: torch.Tensor, z: torch.Tensor, g: torch.Generator) -> int:
    dead = (usage == 0).nonzero().flatten()
    if len(dead):
        flat = z.detach().permute(0, 2, 3, 1).reshape(-1, vq.cfg.n_z)
        with torch.no_grad():
            vq.codebook[dead] = flat[torch.randint(0, len(flat), (len(dead),), generator=g)]
    usage.zero_()
    return len(dead)


def pretrain_state(cfg: TrainConfig, hr_train: torch.Tensor) -> TrainState:
    torch.manual_seed(cfg.seed)
    vq = VQAutoencoder(cfg.net)
    g = torch.Generator().manual_seed(cfg.seed)
    with torch.no_grad():
        z = vq.encoder(hr_train[:64]).permute(0, 2, 3, 1).reshape(-1, cfg.net.n_z)
        vq.codebook.copy_(z[torch.randperm(len(z), generator=g)[: cfg.net.K]])
    st = TrainState("pretrain", cfg, {"vq": vq}, {"g": adam(vq.parameters(), cfg.lr_pretrain, cfg)}, [], g)
    vq.register_buffer("usage", torch.zeros(cfg.net.K))
    return st


def pretrain_codebook(dataset: ToyDataset, cfg: TrainConfig, run_dir=None, overwrite=False, stop_at=None, resume_from=None):
    """VQ autoencoder on HR images: L1 reconstruction + codebook and commitment terms."""
    run_dir = _prepare_dir(run_dir, overwrite, resume=resume_from is not None)
    _snapshot_config(run_dir, cfg, {"phase": "pretrain"})
    hr_train, _ = dataset.arrays("train")
    batcher = PairBatcher(to_nchw(hr_train), patch=cfg.patch_size, align=cfg.net.r_e * cfg.net.scale)
    st = pretrain_state(cfg, batcher.hr)
    if resume_from is not None:
        st.restore(load_checkpoint(resume_from, expect_phase="pretrain"))
    vq: VQAutoencoder = st.modules["vq"]
    beta = cfg.weights.latent_l2

    def step(state: TrainState) -> dict:
        x, _ = batcher.sample(state.generator, cfg.batch_size)
        rec, z, z_q, match = vq(x)
        rec_l1 = (rec - x).abs().mean()
        cb = (z_q - z.detach()).pow(2).mean()
        commit = (z - z_q.detach()).pow(2).mean()
        loss = rec_l1 + cb + beta * commit
        opt = state.optimizers["g"]
        set_lr(opt, lr_factor(state.step, cfg.pretrain_steps, cfg.lr_schedule))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        vq.usage += torch.bincount(match.indices.flatten(), minlength=cfg.net.K).float()
        restarted = 0
        if (state.step + 1) % cfg.restart_every == 0 and state.step + 1 < int(0.8 * cfg.pretrain_steps):
            restarted = _restart_dead_codes(vq, vq.usage, z, state.generator)
        return {"recon_l1": rec_l1.item(), "codebook": cb.item(), "commit": commit.item(), "total": loss.item(), "restarted": restarted}

    records = _run(st, cfg.pretrain_steps, step, run_dir, stop_at)
    metrics = vq_health(vq, dataset)
    ckpt = vq_checkpoint(st)
    if run_dir is not None and st.step >= cfg.pretrain_steps:
        save_checkpoint(ckpt, run_dir / "pretrain.ckpt")
        _finish(run_dir, metrics)
    return st, records, metrics


def vq_checkpoint(st: TrainState) -> Checkpoint:
    vq = st.modules["vq"]
    tensors = {k: v for k, v in _prefixed("vq.", vq.state_dict()).items() if k != "vq.usage"}
    return Checkpoint("pretrain", st.config.to_dict(), tensors, {"step": st.step})


@torch.no_grad()
def vq_health(vq: VQAutoencoder, dataset: ToyDataset) -> dict:
    hr_val, _ = dataset.arrays("val")
    x = to_nchw(hr_val)
    rec, _, _, match = vq(x)
    mse = float((rec.clamp(0, 1) - x).pow(2).mean())
    used = int(len(torch.unique(match.indices)))
    return {"val_mse": mse, "codes_used": used, "usage_fraction": used / vq.cfg.K}


def load_vq(path) -> tuple[VQAutoencoder, TrainConfig]:
    ck = load_checkpoint(path, expect_phase="pretrain")
    cfg = TrainConfig.from_dict(ck.config)
    vq = VQAutoencoder(cfg.net)
    vq.load_state_dict(ck.subset("vq."))
    return vq, cfg


# ---------------------------------------------------------------------------
# stage 1 / stage 2


def _compat(cfg: TrainConfig, other: dict) -> None:
    a = cfg.net
    b = NetConfig(**other["net"])
    for f in ("n_z", "K", "width", "r_e"):
        if getattr(a, f) != getattr(b, f):
            raise CheckpointError(f"network field {f!r} differs from the loaded checkpoint ({getattr(a, f)} vs {getattr(b, f)})")


def stage1_state(cfg: TrainConfig, vq: VQAutoencoder) -> TrainState:
    torch.manual_seed(cfg.seed + 1)
    model = SRModel(cfg.net, stage=1)
    with torch.no_grad():
        model.codebook.copy_(vq.codebook)
    model.decoder.load_state_dict(vq.decoder.state_dict())
    freeze(model.decoder)
    hr_enc = vq.encoder
    freeze(hr_enc)
    disc = PatchDiscriminator()
    g = torch.Generator().manual_seed(cfg.seed + 1)
    return TrainState(
        "stage1",
        cfg,
        {"sr": model, "hr_encoder": hr_enc, "disc": disc},
        {
            "g": adam(model.parameters(), cfg.lr, cfg, {cfg.lr_uncertainty: list(model.uncertainty.parameters())}),
            "d": adam(disc.parameters(), cfg.lr_disc, cfg),
        },
        ["sr.codebook", "sr.decoder", "hr_encoder"],
        g,
    )


def stage2_state(cfg: TrainConfig, stage1: SRModel, hr_enc: torch.nn.Module, disc_state: dict | None = None) -> TrainState:
    torch.manual_seed(cfg.seed + 2)
    if cfg.warm_start_lq:
        model = SRModel.from_stage1(stage1, cfg.net)
    else:
        model = SRModel(cfg.net, stage=2)
        keep = {k: v for k, v in stage1.state_dict().items() if k.startswith(("codebook", "decoder.", "uncertainty."))}
        model.load_state_dict(keep, strict=False)
        model.attach_guide(SRModel(stage1.cfg, stage=1))
        model.guide.load_state_dict(stage1.state_dict())
    freeze(model.decoder)
    freeze(model.uncertainty)
    freeze(hr_enc)
    disc = PatchDiscriminator()
    if disc_state is not None:
        disc.load_state_dict(disc_state)
    g = torch.Generator().manual_seed(cfg.seed + 2)
    return TrainState(
        "stage2",
        cfg,
        {"sr": model, "hr_encoder": hr_enc, "disc": disc},
        {"g": adam(model.parameters(), cfg.lr, cfg), "d": adam(disc.parameters(), cfg.lr_disc, cfg)},
        ["sr.codebook", "sr.decoder", "sr.uncertainty", "sr.guide", "hr_encoder"],
        g,
    )


def _sr_step(state: TrainState, batcher: PairBatcher, phi: torch.nn.Module, stage: int, total_steps: int) -> dict:
    cfg = state.config
    model: SRModel = state.modules["sr"]
    disc = state.modules["disc"]
    hr, lr = batcher.sample(state.generator, cfg.batch_size)
    with torch.no_grad():
        z_hr = state.modules["hr_encoder"](hr)
        _, z_gt = quantize_nearest(z_hr.permute(0, 2, 3, 1), model.codebook)
        z_gt = z_gt.permute(0, 3, 1, 2)
    out = model(lr)
    comps = {
        "codebook": L.codebook_loss(out.lq_latents, z_gt, cfg.weights),
        "l1": L.l1_loss(hr, out.sr),
        "perceptual": L.perceptual_loss(hr, out.sr, phi),
    }
    g_adv, _ = L.adversarial_losses(L.squash(disc(hr)).detach(), L.squash(disc(out.sr)))
    comps["adversarial"] = g_adv
    if stage == 1:
        comps["esu"] = L.esu_loss(hr, out.sr, out.s)
    else:
        udl = L.udl_loss(hr, out.sr, out.s)
        comps["udl"] = udl if cfg.use_uncertainty else udl * 0.0
    ramp = min(1.0, (state.step + 1) / max(1.0, cfg.adv_warmup_frac * total_steps))
    total = L.stage_total(stage, comps, cfg.weights, adv_ramp=ramp)
    factor = lr_factor(state.step, total_steps, cfg.lr_schedule)
    opt_g = state.optimizers["g"]
    set_lr(opt_g, factor)
    opt_g.zero_grad(set_to_none=True)
    total.backward()
    opt_g.step()

    _, d_loss = L.adversarial_losses(L.squash(disc(hr)), L.squash(disc(out.sr.detach())))
    opt_d = state.optimizers["d"]
    set_lr(opt_d, factor)
    opt_d.zero_grad(set_to_none=True)
    d_loss.backward()
    opt_d.step()
    rec = {k: float(v.item()) for k, v in comps.items()}
    rec["total"] = float(total.item())
    rec["disc"] = float(d_loss.item())
    return rec


@torch.no_grad()
def stage_losses(state: TrainState, hr: torch.Tensor, lr: torch.Tensor, phi, stage: int) -> dict:
    """Loss components on a fixed batch (no adversarial term, no parameter update)."""
    model: SRModel = state.modules["sr"]
    z_hr = state.modules["hr_encoder"](hr)
    _, z_gt = quantize_nearest(z_hr.permute(0, 2, 3, 1), model.codebook)
    out = model(lr)
    comps = {
        "codebook": float(L.codebook_loss(out.lq_latents, z_gt.permute(0, 3, 1, 2), state.config.weights)),
        "l1": float(L.l1_loss(hr, out.sr)),
        "perceptual": float(L.perceptual_loss(hr, out.sr, phi)),
        "adversarial": 0.0,
    }
    if stage == 1:
        comps["esu"] = float(L.esu_loss(hr, out.sr, out.s))
    else:
        comps["udl"] = float(L.udl_loss(hr, out.sr, out.s))
    comps["total"] = float(L.stage_total(stage, {k: torch.tensor(v) for k, v in comps.items()}, state.config.weights))
    return comps


def _val_tensors(dataset: ToyDataset, n: int = 16):
    """Fixed validation batch: the first ``n`` images of the validation split."""
    hr, lr = dataset.arrays("val")
    return to_nchw(hr[:n]), to_nchw(lr[:n])


def train_stage1(dataset: ToyDataset, pretrained, cfg: TrainConfig | None = None, run_dir=None, overwrite=False, stop_at=None, resume_from=None):
    """Train LQ encoder, concat fusion and uncertainty head; codebook and decoder stay frozen."""
    pre = load_checkpoint(pretrained, expect_phase="pretrain")
    vq_cfg = TrainConfig.from_dict(pre.config)
    cfg = cfg or vq_cfg
    _compat(cfg, pre.config)
    vq = VQAutoencoder(vq_cfg.net)
    vq.load_state_dict(pre.subset("vq."))
    run_dir = _prepare_dir(run_dir, overwrite, resume=resume_from is not None)
    _snapshot_config(run_dir, cfg, {"phase": "stage1", "pretrained": str(pretrained)})
    hr, lr = dataset.arrays("train")
    batcher = PairBatcher(to_nchw(hr), to_nchw(lr), patch=cfg.patch_size, align=cfg.net.r_e * cfg.net.scale)
    st = stage1_state(cfg, vq)
    if resume_from is not None:
        st.restore(load_checkpoint(resume_from, expect_phase="stage1"))
    phi = L.RandomFeatureExtractor()
    vhr, vlr = _val_tensors(dataset)
    initial = stage_losses(st, vhr, vlr, phi, 1)
    records = _run(st, cfg.stage1_steps, lambda s: _sr_step(s, batcher, phi, 1, cfg.stage1_steps), run_dir, stop_at)
    final = stage_losses(st, vhr, vlr, phi, 1)
    metrics = {"initial": initial, "final": final, "match_counts": dict(st.modules["sr"].match_counts)}
    if run_dir is not None and st.step >= cfg.stage1_steps:
        save_checkpoint(model_checkpoint(st), run_dir / "stage1.ckpt")
        _finish(run_dir, metrics)
    return st, records, metrics


def train_stage2(dataset: ToyDataset, stage1_ckpt, cfg: TrainConfig | None = None, run_dir=None, overwrite=False, stop_at=None, resume_from=None):
    """Top-k matching + Align-Attention with the shifted stage-1 uncertainty weighting the L1 residual."""
    ck1 = load_checkpoint(stage1_ckpt, expect_phase="stage1")
    s1_cfg = TrainConfig.from_dict(ck1.config)
    cfg = cfg or s1_cfg
    _compat(cfg, ck1.config)
    stage1 = SRModel(s1_cfg.net, stage=1)
    stage1.load_state_dict(ck1.subset("sr."))
    hr_enc = VQAutoencoder(s1_cfg.net).encoder
    hr_enc.load_state_dict(ck1.subset("hr_encoder."))
    run_dir = _prepare_dir(run_dir, overwrite, resume=resume_from is not None)
    _snapshot_config(run_dir, cfg, {"phase": "stage2", "stage1": str(stage1_ckpt)})
    hr, lr = dataset.arrays("train")
    batcher = PairBatcher(to_nchw(hr), to_nchw(lr), patch=cfg.patch_size, align=cfg.net.r_e * cfg.net.scale)
    st = stage2_state(cfg, stage1, hr_enc, ck1.subset("disc.") or None)
    if resume_from is not None:
        st.restore(load_checkpoint(resume_from, expect_phase="stage2"))
    phi = L.RandomFeatureExtractor()
    vhr, vlr = _val_tensors(dataset)
    initial = stage_losses(st, vhr, vlr, phi, 2)
    records = _run(st, cfg.stage2_steps, lambda s: _sr_step(s, batcher, phi, 2, cfg.stage2_steps), run_dir, stop_at)
    final = stage_losses(st, vhr, vlr, phi, 2)
    model = st.modules["sr"]
    rep = evaluate_model(model, dataset, "val")
    metrics = {
        "initial": initial,
        "final": final,
        "match_counts": dict(model.match_counts),
        "val_psnr": rep["psnr"],
        "val_ssim": rep["ssim"],
        "bicubic_psnr": rep["bicubic_psnr"],
        "bicubic_ssim": rep["bicubic_ssim"],
    }
    if run_dir is not None and st.step >= cfg.stage2_steps:
        save_checkpoint(model_checkpoint(st), run_dir / "stage2.ckpt")
        _finish(run_dir, metrics)
    return st, records, metrics


def model_checkpoint(st: TrainState) -> Checkpoint:
    """Inference checkpoint: SR model (incl. guide), HR encoder and discriminator weights."""
    tensors = {}
    for m in ("sr", "hr_encoder", "disc"):
        tensors.update(_prefixed(f"{m}.", st.modules[m].state_dict()))
    return Checkpoint(st.phase, st.config.to_dict(), tensors, {"step": st.step})


def load_model(path, expect_phase: str | None = None) -> SRModel:
    ck = load_checkpoint(path, expect_phase=expect_phase)
    if ck.phase not in ("stage1", "stage2"):
        raise CheckpointError(f"{path} holds a {ck.phase!r} checkpoint, not an SR model")
    cfg = TrainConfig.from_dict(ck.config)
    stage = 1 if ck.phase == "stage1" else 2
    model = SRModel(cfg.net, stage=stage)
    if stage == 2:
        guide_cfg = NetConfig(**{**cfg.net.to_dict()})
        model.attach_guide(SRModel(guide_cfg, stage=1))
    model.load_state_dict(ck.subset("sr."))
    model.eval()
    return model


@torch.no_grad()
def super_resolve(model: SRModel, lr: np.ndarray, batch: int = 16) -> np.ndarray:
    """``(N, h, w, 3)`` LR array -> ``(N, h*scale, w*scale, 3)`` SR array clipped to [0, 1]."""
    outs = []
    for i in range(0, len(lr), batch):
        outs.append(to_nhwc(model(to_nchw(lr[i:i + batch])).sr.clamp(0, 1)))
    return np.concatenate(outs).astype(np.float64)


@torch.no_grad()
def evaluate_model(model: SRModel, dataset: ToyDataset, split: str = "val") -> dict:
    hr, lr = dataset.arrays(split)
    ids = [r["id"] for r in dataset.split(split)]
    scale = model.cfg.scale
    sr = super_resolve(model, lr)
    bic = np.stack([bicubic_baseline(x, scale) for x in lr])
    rep = report_images(ids, hr, sr)
    base = report_images(ids, hr, bic)
    return {
        "psnr": rep.mean_psnr,
        "ssim": rep.mean_ssim,
        "bicubic_psnr": base.mean_psnr,
        "bicubic_ssim": base.mean_ssim,
        "report": rep,
    }


@torch.no_grad()
def model_hit_rates(checkpoint, dataset: ToyDataset, ks=(1, 3, 5), split: str = "val"):
    """Hit rates of LQ latents against the HR encoder's nearest codes on a dataset split."""
    from .codebook import hit_rates

    ck = load_checkpoint(checkpoint)
    if ck.phase not in ("stage1", "stage2"):
        raise CheckpointError(f"hit rates need a stage-1 or stage-2 checkpoint, got {ck.phase!r}")
    model = load_model(checkpoint)
    hr_enc = VQAutoencoder(model.cfg).encoder
    hr_enc.load_state_dict(ck.subset("hr_encoder."))
    hr, lr = dataset.arrays(split)
    z_lq = model.lq_encoder(to_nchw(lr)).permute(0, 2, 3, 1)
    gt, _ = quantize_nearest(hr_enc(to_nchw(hr)).permute(0, 2, 3, 1), model.codebook)
    return hit_rates(z_lq, gt.indices, model.codebook, ks)


def run_ablation(dataset: ToyDataset, stage1_ckpt, cfg: TrainConfig, variant: str, run_dir=None, overwrite=False):
    """Stage 2 with the module set of one ablation row switched on."""
    return train_stage2(dataset, stage1_ckpt, cfg.with_variant(variant), run_dir, overwrite)
