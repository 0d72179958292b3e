"""Training loop, Adam, patch sampling, sliding-window evaluation and checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tctseg import losses as L
from tctseg import tensor as T
from tctseg.data import load_labels, load_volume
from tctseg.errors import ConfigError, FormatError, NonFiniteError, ShapeError
from tctseg.metrics import aggregate_reports, segmentation_report
from tctseg.unet import UNetConfig, build_unet, forward_full, forward_inference

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TCTC"
CHECKPOINT_VERSION = 1
CHECKPOINT_NAME = "checkpoint.tctc"
LOG_NAME = "log.csv"
HISTORY_TAIL = 10


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 4
    patch_size: tuple = (32, 32, 32)
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    base_width: int = 8
    method: str = "tct"
    filter_strategy: str = "task_median"
    fixed_threshold: float = 0.5
    binarize_level: float = 0.5
    weighting: str = "uauwl"
    w_max: float = 0.1
    # None -> 40% of epochs
    ramp_epochs: float = None
    exclude_self_merge: bool = False
    foreground_prob: float = 0.5
    init_checkpoint: str = None
    eval_every: int = 0

    def __post_init__(self):
        self.patch_size = tuple(int(s) for s in self.patch_size)
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if len(self.patch_size) != 3 or any(s % 16 for s in self.patch_size):
            raise ConfigError(f"patch_size {self.patch_size} must be 3 dims divisible by 16")
        if self.method not in ("tal", "tct"):
            raise ConfigError(f"method must be 'tal' or 'tct', got {self.method!r}")
        if self.weighting not in L.WEIGHTING_MODES:
            raise ConfigError(f"weighting must be one of {L.WEIGHTING_MODES}, got {self.weighting!r}")
        self.filter_config()

    def filter_config(self):
        return L.FilterConfig(self.filter_strategy, self.fixed_threshold, self.binarize_level)

    def ramp(self):
        t_r = 0.4 * self.epochs if self.ramp_epochs is None else self.ramp_epochs
        return L.RampSchedule(self.w_max, t_r)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["patch_size"] = list(self.patch_size)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
        return cls(**d)


# ------------------------------------------------------------------- optimizer

class Adam:
    """Bias-corrected Adam with a constant learning rate."""

    def __init__(self, named_params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = OrderedDict(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = OrderedDict((n, np.zeros_like(p.data)) for n, p in self.params.items())
        self.v = OrderedDict((n, np.zeros_like(p.data)) for n, p in self.params.items())
        self.t = 0

    def step(self):
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.shape:
                raise ShapeError(f"gradient of {name} has shape {g.shape}, parameter {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {name}")
            grads[name] = g.astype(p.dtype, copy=False)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def adam_step(params, grads, state, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """Functional form: update ``params`` (dict of arrays) in place from ``grads``.

    ``state`` is a dict with ``m``, ``v`` (dicts of arrays) and ``t``;
    missing entries are created.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
    state.setdefault("m", {})
    state.setdefault("v", {})
    state["t"] = state.get("t", 0) + 1
    t = state["t"]
    for name, p in params.items():
        g = np.asarray(grads.get(name, np.zeros_like(p)), dtype=p.dtype)
        m = state["m"].get(name, np.zeros_like(p))
        v = state["v"].get(name, np.zeros_like(p))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state["m"][name], state["v"][name] = m, v
        p -= lr * (m / (1.0 - beta1 ** t)) / (np.sqrt(v / (1.0 - beta2 ** t)) + eps)
    return params, state


# ------------------------------------------------------------------- patches

@dataclass
class PatchBatch:
    inputs: np.ndarray          # [B, 1, Z, Y, X]
    labels: np.ndarray          # [B, Z, Y, X] partial label patches
    label_sets: list            # PartialLabelSet per sample

    @property
    def voxels_per_patch(self):
        return int(np.prod(self.inputs.shape[2:]))


def _pad_to(arr, size, value=0):
    pads = [(0, max(0, s - d)) for d, s in zip(arr.shape, size)]
    if any(p[1] for p in pads):
        arr = np.pad(arr, pads, constant_values=value)
    return arr


def sample_patch(volume, labels, patch_size, rng, fg_index=None, fg_prob=0.5):
    """Crop a training patch.

    With probability ``fg_prob`` the crop is centred on a uniformly chosen
    labelled voxel (clamped inside the volume); otherwise its corner is
    uniform. Volumes smaller than the patch are padded with 0 first.
    ``fg_index`` may pass precomputed flat foreground indices.
    """
    volume = _pad_to(np.asarray(volume), patch_size)
    labels = _pad_to(np.asarray(labels), patch_size)
    dims = volume.shape
    if fg_index is None:
        fg_index = np.flatnonzero(labels)
    u = rng.random()
    if u < fg_prob and len(fg_index):
        centre = np.unravel_index(fg_index[rng.integers(len(fg_index))], dims)
        corner = [min(max(int(c) - p // 2, 0), d - p) for c, p, d in zip(centre, patch_size, dims)]
    else:
        corner = [int(rng.integers(0, d - p + 1)) for p, d in zip(patch_size, dims)]
    sl = tuple(slice(c, c + p) for c, p in zip(corner, patch_size))
    return volume[sl], labels[sl]


# ------------------------------------------------------------------ losses

def compute_losses(model, batch, cfg, uncertainty, epoch):
    """Forward pass plus the configured objective.

    Samples of the batch must be grouped so that equal label sets are
    contiguous. Returns ``(total Tensor, LossBreakdown)``.
    """
    n = model.config.num_classes
    tct = cfg.method == "tct"
    out = forward_full(model, T.Tensor(batch.inputs), aux=tct)
    p = T.softmax_channels(out.msh_logits)
    B = batch.inputs.shape[0]

    groups = []  # (start, stop, label_set)
    for b, ls in enumerate(batch.label_sets):
        if groups and groups[-1][2] == ls:
            groups[-1] = (groups[-1][0], b + 1, ls)
        else:
            groups.append((b, b + 1, ls))

    l_main = None
    aux_terms = {}
    q_omega = []
    ath_probs = [T.softmax_channels(g) for g in out.ath_logits]
    for start, stop, ls in groups:
        frac = (stop - start) / B
        p_g = p[start:stop]
        y_g = L.one_hot_target(batch.labels[start:stop], ls)
        term = T.scale(L.dice_loss_main(L.merge_main_probs(p_g, ls, "phi"), y_g), frac)
        l_main = term if l_main is None else T.add(l_main, term)
        if tct:
            g_group = {j: ath_probs[j - 1][start:stop] for j in ls.phi}
            for j, t in L.dice_loss_aux_terms(g_group, y_g, ls).items():
                t = T.scale(t, frac)
                aux_terms[j] = t if j not in aux_terms else T.add(aux_terms[j], t)
            q_omega.append(L.merge_main_probs(p_g, ls, "omega", cfg.exclude_self_merge))

    w = 0.0
    decision = None
    l_con = None
    if tct:
        q_all = q_omega[0] if len(q_omega) == 1 else T.concat(q_omega, axis=0)
        decision = L.compute_filter(q_all, ath_probs, cfg.filter_config())
        w = L.ramp_weight(epoch, cfg.ramp())
        l_con = L.consistency_loss(q_all, ath_probs, decision)
        aux_in = aux_terms if cfg.weighting == "uwl" else _sum_terms(aux_terms)
        total = L.total_loss(l_main, aux_in, l_con, uncertainty, w)
    else:
        total = l_main

    l_aux_val = float(sum(t.data for t in aux_terms.values())) if aux_terms else 0.0
    breakdown = L.LossBreakdown(
        l_main=float(l_main.data),
        l_aux=l_aux_val,
        l_con=float(l_con.data) if l_con is not None else 0.0,
        total=float(total.data),
        w=w,
        filter=decision,
        uncertainty_weights=uncertainty.weights() if uncertainty is not None else {},
    )
    return total, breakdown


def _sum_terms(terms):
    total = None
    for t in terms.values():
        total = t if total is None else T.add(total, t)
    return total


# --------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    metadata: dict
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)


def checkpoint_bytes(ckpt):
    meta = json.dumps(ckpt.metadata, sort_keys=True, separators=(",", ":")).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<IQ", CHECKPOINT_VERSION, len(meta)), meta]
    for name, arr in ckpt.tensors.items():
        raw = name.encode()
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path, ckpt):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path):
    buf = Path(path).read_bytes()
    path = str(path)

    def need(off, n):
        if off + n > len(buf):
            raise FormatError(f"truncated checkpoint: needed {n} bytes", off, path)
        return buf[off:off + n]

    if need(0, 4) != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {CHECKPOINT_MAGIC!r}", 0, path)
    version, meta_len = struct.unpack("<IQ", need(4, 12))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4, path)
    try:
        metadata = json.loads(need(16, meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("unreadable metadata", 16, path) from None
    off = 16 + meta_len
    tensors = OrderedDict()
    while off < len(buf):
        (nlen,) = struct.unpack("<H", need(off, 2))
        name = need(off + 2, nlen).decode()
        off += 2 + nlen
        (ndim,) = struct.unpack("<B", need(off, 1))
        dims = struct.unpack(f"<{ndim}I", need(off + 1, 4 * ndim))
        off += 1 + 4 * ndim
        count = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(need(off, 4 * count), dtype="<f4").reshape(dims).astype(np.float32)
        off += 4 * count
        tensors[name] = data
    return Checkpoint(metadata, tensors)


def restore_parameters(named_params, tensors, strict=True):
    """Copy checkpoint tensors into parameters, checking names and shapes."""
    missing = [n for n in named_params if n not in tensors]
    mismatched = [
        f"{n}: checkpoint {tuple(tensors[n].shape)} vs model {tuple(p.shape)}"
        for n, p in named_params.items()
        if n in tensors and tuple(tensors[n].shape) != tuple(p.shape)
    ]
    if mismatched or (strict and missing):
        lines = mismatched + [f"{n}: missing from checkpoint" for n in missing]
        raise ShapeError("checkpoint does not match the model:\n  " + "\n  ".join(lines))
    for n, p in named_params.items():
        if n in tensors:
            p.data = tensors[n].astype(p.dtype, copy=True)


def model_from_checkpoint(ckpt):
    missing = [k for k in ("config", "num_classes") if k not in ckpt.metadata]
    if missing:
        raise FormatError(f"checkpoint metadata lacks {', '.join(missing)}; not a training checkpoint")
    cfg = TrainConfig.from_dict(ckpt.metadata["config"])
    ucfg = UNetConfig(num_classes=ckpt.metadata["num_classes"], base_width=cfg.base_width,
                      patch_size=cfg.patch_size)
    model = build_unet(ucfg, seed=cfg.seed)
    restore_parameters(OrderedDict(model.named_parameters()), ckpt.tensors)
    return model, cfg


# ------------------------------------------------------------------ training

class _Dataset:
    """Training samples held in memory with their label sets."""

    def __init__(self, manifest):
        self.items = []
        n = manifest.num_classes
        for d in manifest.datasets:
            ls = L.PartialLabelSet(d.annotated, n)
            for s in d.samples:
                vol = load_volume(manifest.path(s.volume)).data
                lab = load_labels(manifest.path(s.labels)).data
                self.items.append((vol, lab, np.flatnonzero(lab), ls))

    def __len__(self):
        return len(self.items)


def _rng_state(rng):
    return rng.bit_generator.state


def _rng_from_state(state):
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = state
    return rng


class Trainer:
    """Owns the model, uncertainty parameters, optimizer and RNG of one run."""

    def __init__(self, cfg, manifest, out_dir):
        self.cfg = cfg
        self.manifest = manifest
        self.out_dir = Path(out_dir)
        self.num_classes = manifest.num_classes
        ucfg = UNetConfig(num_classes=self.num_classes, base_width=cfg.base_width, patch_size=cfg.patch_size)
        self.model = build_unet(ucfg, seed=cfg.seed)
        mode = cfg.weighting if cfg.method == "tct" else "fixed"
        self.uncertainty = L.UncertaintyParams(mode, self.num_classes)
        self.optimizer = Adam(self.named_parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        self.rng = np.random.default_rng(cfg.seed)
        self.epoch = 0
        self.history = []
        if cfg.init_checkpoint:
            ckpt = load_checkpoint(cfg.init_checkpoint)
            restore_parameters(OrderedDict(self.model.named_parameters()), ckpt.tensors)
        self._data = None
        # evaluation summary of the most recent eval epoch
        self.last_eval = None

    def named_parameters(self):
        return OrderedDict(list(self.model.named_parameters()) + self.uncertainty.named_parameters())

    @property
    def data(self):
        if self._data is None:
            self._data = _Dataset(self.manifest)
        return self._data

    # checkpoint state
    def to_checkpoint(self):
        tensors = OrderedDict((n, p.data) for n, p in self.named_parameters().items())
        for n in self.optimizer.params:
            tensors[f"adam.m.{n}"] = self.optimizer.m[n]
        for n in self.optimizer.params:
            tensors[f"adam.v.{n}"] = self.optimizer.v[n]
        meta = {
            "config": self.cfg.to_dict(),
            "num_classes": self.num_classes,
            "epoch": self.epoch,
            "adam_t": self.optimizer.t,
            "rng": _rng_state(self.rng),
            "history": self.history[-HISTORY_TAIL:],
        }
        return Checkpoint(meta, tensors)

    def restore(self, ckpt):
        restore_parameters(self.named_parameters(), ckpt.tensors)
        for n in self.optimizer.params:
            for kind, store in (("m", self.optimizer.m), ("v", self.optimizer.v)):
                key = f"adam.{kind}.{n}"
                if key not in ckpt.tensors:
                    raise FormatError(f"checkpoint lacks optimizer state {key}")
                store[n] = ckpt.tensors[key].astype(np.float32, copy=True)
        self.optimizer.t = int(ckpt.metadata["adam_t"])
        self.epoch = int(ckpt.metadata["epoch"])
        self.rng = _rng_from_state(ckpt.metadata["rng"])
        self.history = list(ckpt.metadata.get("history", []))

    def _batches(self):
        order = self.rng.permutation(len(self.data))
        bs = self.cfg.batch_size
        for start in range(0, len(order), bs):
            yield order[start:start + bs]

    def _make_batch(self, indices):
        imgs, labs, sets = [], [], []
        for i in indices:
            vol, lab, fg, ls = self.data.items[i]
            img, lp = sample_patch(vol, lab, self.cfg.patch_size, self.rng, fg, self.cfg.foreground_prob)
            imgs.append(img)
            labs.append(lp)
            sets.append(ls)
        # group equal label sets contiguously (stable)
        order = sorted(range(len(sets)), key=lambda k: sets[k].phi)
        return PatchBatch(
            np.stack([imgs[k] for k in order])[:, None].astype(np.float32),
            np.stack([labs[k] for k in order]),
            [sets[k] for k in order],
        )

    def train_epoch(self):
        sums = dict(L_main=0.0, L_aux=0.0, L_con=0.0, w=0.0, theta=0.0, retained=0.0, total=0.0)
        steps = 0
        for idx in self._batches():
            batch = self._make_batch(idx)
            self.optimizer.zero_grad()
            with T.Tape() as tape:
                total, br = compute_losses(self.model, batch, self.cfg, self.uncertainty, self.epoch)
            if not br.is_finite():
                raise NonFiniteError(f"non-finite loss at epoch {self.epoch + 1}: {br}")
            tape.backward(total)
            self.optimizer.step()
            sums["L_main"] += br.l_main
            sums["L_aux"] += br.l_aux
            sums["L_con"] += br.l_con
            sums["w"] += br.w
            sums["total"] += br.total
            if br.filter is not None:
                sums["theta"] += br.filter.theta_value()
                sums["retained"] += br.filter.retained_count
            steps += 1
        self.epoch += 1
        row = {"epoch": self.epoch}
        row.update({k: v / steps for k, v in sums.items()})
        return row

    def run(self, stop_epoch=None):
        """Train until ``cfg.epochs`` (or ``stop_epoch``) epochs are complete."""
        self.out_dir.mkdir(parents=True, exist_ok=True)
        stop = self.cfg.epochs if stop_epoch is None else min(stop_epoch, self.cfg.epochs)
        log_path = self.out_dir / LOG_NAME
        header = ["epoch", "L_main", "L_aux", "L_con", "w", "theta", "retained", "total"]
        header += [f"dsc_class_{c}" for c in range(1, self.num_classes + 1)]
        if self.epoch == 0 or not log_path.exists():
            with open(log_path, "w", newline="") as fh:
                csv.writer(fh).writerow(header)
        ckpt_path = self.out_dir / CHECKPOINT_NAME
        while self.epoch < stop:
            row = self.train_epoch()
            last = self.epoch == self.cfg.epochs
            eval_now = self.manifest.test and (
                last or (self.cfg.eval_every and self.epoch % self.cfg.eval_every == 0)
            )
            dsc = [""] * self.num_classes
            if eval_now:
                summary = self.last_eval = evaluate(self.model, self.manifest, self.cfg.patch_size)
                dsc = [repr(float(v)) for v in summary["aggregate"]["dsc"]]
            self.history.append({k: row[k] for k in ("epoch", "L_main", "L_aux", "L_con", "total")})
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh).writerow([row["epoch"]] + [repr(float(row[k])) for k in header[1:8]] + dsc)
            log.info(
                "epoch %d  L_main %.4f  L_aux %.4f  L_con %.5f  w %.4f  retained %.2f",
                row["epoch"], row["L_main"], row["L_aux"], row["L_con"], row["w"], row["retained"],
            )
            if eval_now or self.epoch == stop:
                save_checkpoint(ckpt_path, self.to_checkpoint())
        return ckpt_path


def train_run(cfg, manifest, out_dir, resume=None, stop_epoch=None):
    """Train (or resume) one run; returns the final checkpoint path.

    The run writes ``log.csv`` and ``checkpoint.tctc`` into ``out_dir``.
    """
    trainer = Trainer(cfg, manifest, out_dir)
    if resume is not None:
        trainer.restore(load_checkpoint(resume))
    return trainer.run(stop_epoch)


# ---------------------------------------------------------------- evaluation

def _tile_starts(dim, patch):
    if dim <= patch:
        return [0]
    stride = max(patch // 2, 1)
    starts = list(range(0, dim - patch + 1, stride))
    if starts[-1] != dim - patch:
        starts.append(dim - patch)
    return starts


def sliding_window_probs(model, volume, patch_size, batch=4):
    """Average main-head probabilities over overlapping tiles (stride patch/2)."""
    vol = np.asarray(volume, dtype=np.float32)
    dims = vol.shape
    padded = _pad_to(vol, patch_size)
    pdims = padded.shape
    c = model.config.num_classes + 1
    acc = np.zeros((c,) + pdims, np.float64)
    counts = np.zeros(pdims, np.float64)
    corners = [
        (z, y, x)
        for z in _tile_starts(pdims[0], patch_size[0])
        for y in _tile_starts(pdims[1], patch_size[1])
        for x in _tile_starts(pdims[2], patch_size[2])
    ]
    for k in range(0, len(corners), batch):
        chunk = corners[k:k + batch]
        tiles = np.stack([
            padded[z:z + patch_size[0], y:y + patch_size[1], x:x + patch_size[2]] for z, y, x in chunk
        ])[:, None]
        probs = forward_inference(model, T.Tensor(tiles)).data
        for (z, y, x), pr in zip(chunk, probs):
            sl = (slice(z, z + patch_size[0]), slice(y, y + patch_size[1]), slice(x, x + patch_size[2]))
            acc[(slice(None),) + sl] += pr
            counts[sl] += 1
    acc /= counts
    return acc[:, : dims[0], : dims[1], : dims[2]]


def predict_labels(model, volume, patch_size):
    return np.argmax(sliding_window_probs(model, volume, patch_size), axis=0).astype(np.uint8)


def evaluate(model, manifest, patch_size=None, samples=None):
    """Score predictions against full label maps.

    ``model`` is a UNetModel or any callable mapping an intensity volume to a
    label map. ``samples`` defaults to the manifest's test split (or every
    sample when there is none). Returns per-sample reports and aggregates.
    """
    if samples is None:
        samples = manifest.test or list(manifest.all_samples())
    n = manifest.num_classes
    reports = []
    for s in samples:
        vol = load_volume(manifest.path(s.volume))
        ref = load_labels(manifest.path(s.full_labels)).data
        if callable(model) and not hasattr(model, "params"):
            pred = np.asarray(model(vol.data))
        else:
            pred = predict_labels(model, vol.data, patch_size or model.config.patch_size)
        reports.append(segmentation_report(pred, ref, n, vol.spacing))
    return {"reports": reports, "aggregate": aggregate_reports(reports)}
