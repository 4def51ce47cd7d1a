"""Training loop, optimizer, run configuration and checkpoint persistence."""

from __future__ import annotations

import dataclasses
import os
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from . import rng as rngmod
from .detector import (DetectorParams, ModelSpec, ScaleAssignment, STRIDES,
                       assign_targets, backward_full_batched, decode_offsets,
                       forward_full_batched, init_detector, postprocess,
                       zeros_like_detector)
from .evaluation import ap_range
from .geometry import Box, GridSpec, clip_box, render_heatmap
from .losses import (LossError, LossWeights, NoiseConfig, dfl_batch,
                     iou_loss, noise_calibrate, softmax, total_loss)
from .nn import ops
from .pgmio import read_pgm
from .synth import read_annotations, read_meta


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


CHECKPOINT_MAGIC = b"ALFF"
CHECKPOINT_VERSION = 1


@dataclass
class RunConfig:
    """Defaults follow the reference training recipe (lr 1e-2, weight decay
    5e-4, batch 16, 50 epochs, noise scale 1.0); image size and thresholds
    are toy-scale."""

    dataset: str = ""
    image_size: int = 160
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-2
    weight_decay: float = 5e-4
    momentum: float = 0.9
    alpha: float = 1.0
    mu: float = 0.0
    sigma_n: float = 1.0
    mode: str = "inflate"
    w_box: float = 1.0
    w_cls: float = 0.5
    w_dfl: float = 1.5
    w_aux: float = 1.0
    enable_alff: bool = True
    enable_ncdfl: bool = True
    seed: int = 0
    checkpoint: str = "model.ckpt"
    loss_csv: str = "loss.csv"
    score_thr: float = 0.25
    iou_thr: float = 0.65

    def noise_config(self) -> NoiseConfig:
        return NoiseConfig(alpha=self.alpha, mu=self.mu, sigma_n=self.sigma_n,
                           mode=self.mode, seed=self.seed)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_box, self.w_cls, self.w_dfl, self.w_aux)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Line-oriented `key = value` with # comments."""
    cfg = dataclasses.replace(base) if base else RunConfig()
    types = {f.name: f.type for f in fields(RunConfig)}
    casts = {"str": str, "int": int, "float": float}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        t = types[key]
        if t == "bool":
            if value.lower() not in ("true", "false"):
                raise ValueError(f"config line {lineno}: bad bool {value!r}")
            setattr(cfg, key, value.lower() == "true")
        else:
            setattr(cfg, key, casts[t](value))
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    out = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        out.append(f"{f.name} = {v}\n")
    return "".join(out)


# ---------------------------------------------------------------------------
# parameter traversal


def named_arrays(obj, prefix: str = ""):
    """Deterministic (name, array) walk over nested parameter dataclasses."""
    if isinstance(obj, np.ndarray):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, (np.ndarray, list)) or dataclasses.is_dataclass(v):
                yield from named_arrays(v, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, list):
        for k, v in enumerate(obj):
            yield from named_arrays(v, f"{prefix}.{k}")


class SGD:
    """Plain SGD with momentum; weight decay is added to the raw gradient."""

    def __init__(self, params: DetectorParams, lr: float, momentum: float,
                 weight_decay: float):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p) for name, p in named_arrays(params)}

    def step(self, grads: DetectorParams) -> None:
        gmap = dict(named_arrays(grads))
        for name, p in named_arrays(self.params):
            v = self.velocity[name]
            v *= self.momentum
            v += gmap[name] + self.weight_decay * p
            p -= self.lr * v


# ---------------------------------------------------------------------------
# checkpointing


def _spec_array(spec: ModelSpec) -> np.ndarray:
    return np.array(list(spec.backbone_ch)
                    + [spec.head_mid, spec.alff_block_ch, spec.alff_hidden, spec.n_bins],
                    dtype=np.float32)


def _spec_from_array(a: np.ndarray) -> ModelSpec:
    v = [int(x) for x in a]
    return ModelSpec(backbone_ch=tuple(v[:5]), head_mid=v[5], alff_block_ch=v[6],
                     alff_hidden=v[7], n_bins=v[8])


def save_checkpoint(path: str, params: DetectorParams, opt: SGD | None,
                    epoch: int, seed: int) -> None:
    records: list[tuple[str, np.ndarray]] = [
        ("meta.spec", _spec_array(params.spec)),
        ("meta.epoch", np.array(float(epoch), dtype=np.float32)),
        ("meta.seed", np.array(float(seed), dtype=np.float32)),
    ]
    records += [(name, p) for name, p in named_arrays(params)]
    if opt is not None:
        records += [(f"opt.{name}", v) for name, v in sorted(opt.velocity.items())]
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(records)))
        for name, arr in records:
            nb = name.encode()
            a32 = np.ascontiguousarray(arr, dtype=np.float32)
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", a32.ndim))
            f.write(struct.pack(f"<{a32.ndim}I", *a32.shape))
            f.write(a32.tobytes())


def read_checkpoint(path: str) -> dict[str, np.ndarray]:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(str(e)) from e
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: version {version} not supported (expected {CHECKPOINT_VERSION})")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(n):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        out[name] = arr.copy()
    return out


def load_checkpoint(path: str):
    """Returns (params, velocity dict, epoch, seed), all float32."""
    rec = read_checkpoint(path)
    spec = _spec_from_array(rec["meta.spec"])
    params = init_detector(0, spec, dtype=np.float32)
    for name, p in named_arrays(params):
        if name not in rec:
            raise CheckpointError(f"{path}: missing record {name}")
        if rec[name].shape != p.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}")
        p[...] = rec[name]
    velocity = {k[4:]: v for k, v in rec.items() if k.startswith("opt.")}
    return (params, velocity,
            int(rec["meta.epoch"].reshape(-1)[0]),
            int(rec["meta.seed"].reshape(-1)[0]))


# ---------------------------------------------------------------------------
# data


@dataclass
class TrainItem:
    image_id: int
    image: np.ndarray           # (3, H, W) float32 in [0, 1]
    boxes: list[Box]
    heat_target: np.ndarray     # (1, H, W) float32, nearest-upsampled grid
    assigns: list[ScaleAssignment]


def load_dataset(path: str, image_size: int) -> list[TrainItem]:
    meta = read_meta(os.path.join(path, "meta.csv"))
    ann = {r.image_id: r.boxes for r in
           read_annotations(os.path.join(path, "annotations.csv"))}
    spec = GridSpec(image_size, image_size, 8)
    items = []
    for image_id, _scene, _count in meta:
        gray = read_pgm(os.path.join(path, "images", f"{image_id:04d}.pgm"))
        if gray.shape != (image_size, image_size):
            raise TrainingError(
                f"image {image_id} is {gray.shape}, expected {image_size}")
        img = np.repeat(gray[None].astype(np.float32), 3, axis=0)
        boxes = [clip_box(b, spec) for b in ann.get(image_id, [])]
        heat = render_heatmap(boxes, spec).grid
        heat_up = ops.upsample_nearest(heat[None], 8)[0].astype(np.float32)
        items.append(TrainItem(image_id, img, boxes, heat_up,
                               assign_targets(boxes, image_size)))
    return items




# ---------------------------------------------------------------------------
# one optimization step


def train_step(params: DetectorParams, batch: list[TrainItem], cfg: RunConfig,
               step_index: int):
    """Forward + loss + backward for one batch.

    Returns (loss components dict, parameter grads).  Per-target noise draws
    are keyed by (seed, step, scale) so reruns and resumes reproduce them.
    """
    n = len(batch)
    images = np.stack([it.image for it in batch])
    out, heat_pred, cache = forward_full_batched(images, params, cfg.enable_alff)
    w = cfg.loss_weights()
    ncfg = cfg.noise_config()
    n_bins = params.spec.n_bins
    dtype = images.dtype

    # classification: mean binary cross-entropy over every cell of every scale
    total_cells = sum(c[0].size for c in out.cls_logits)
    cls_loss_sum = 0.0
    gcls = []
    for k in range(3):
        cls_l = out.cls_logits[k]
        tgt = np.stack([it.assigns[k].cls_target for it in batch])[:, None].astype(dtype)
        cls_loss_sum += float((np.maximum(cls_l, 0) - cls_l * tgt
                               + np.log1p(np.exp(-np.abs(cls_l)))).sum())
        gcls.append((w.w_cls / total_cells) * (ops.sigmoid(cls_l) - tgt))
    cls_loss = cls_loss_sum / total_cells

    # regression terms, gathered over the positives of all scales first so
    # the mean normalization uses the batch-wide counts
    per_scale = []
    n_sides = 0
    n_pos = 0
    dfl_sum = 0.0
    box_sum = 0.0
    for k, stride in enumerate(STRIDES):
        idx_img, idx_iy, idx_ix, regs, corners = [], [], [], [], []
        for i, it in enumerate(batch):
            a = it.assigns[k]
            if len(a.pos_iy):
                idx_img.append(np.full(len(a.pos_iy), i))
                idx_iy.append(a.pos_iy)
                idx_ix.append(a.pos_ix)
                regs.append(a.reg_targets)
                corners.append(a.gt_corners)
        if not idx_img:
            per_scale.append(None)
            continue
        ii = np.concatenate(idx_img)
        iy = np.concatenate(idx_iy)
        ix = np.concatenate(idx_ix)
        y = np.concatenate(regs)
        gtc = np.concatenate(corners)
        p_count = len(ii)
        logits = out.reg_logits[k][ii, :, iy, ix].reshape(p_count, 4, n_bins)
        probs = softmax(logits, axis=-1)

        if cfg.enable_ncdfl and cfg.alpha > 0:
            xi = rngmod.stream(cfg.seed, rngmod.NOISE, step_index, k)\
                .standard_normal((p_count, 4))
            y_t = noise_calibrate(y, ncfg, xi, n_bins)
        else:
            y_t = y
        losses, glogits = dfl_batch(probs.reshape(-1, n_bins), y_t.reshape(-1))
        dfl_sum += float(losses.sum())
        n_sides += losses.size
        g_dfl = glogits.reshape(p_count, 4, n_bins)

        offs = decode_offsets(probs) * stride
        ax = (ix + 0.5) * stride
        ay = (iy + 0.5) * stride
        pred_c = np.stack([ax - offs[:, 0], ay - offs[:, 1],
                           ax + offs[:, 2], ay + offs[:, 3]], axis=1)
        bl, gc = iou_loss(pred_c, gtc)
        box_sum += float(bl.sum())
        n_pos += p_count
        goff = np.stack([-gc[:, 0], -gc[:, 1], gc[:, 2], gc[:, 3]], axis=1) * stride
        gprobs = goff[:, :, None] * np.arange(n_bins, dtype=np.float64)
        g_box = probs * (gprobs - (gprobs * probs).sum(-1, keepdims=True))
        per_scale.append((ii, iy, ix, g_dfl, g_box))

    greg = []
    for k in range(3):
        greg_k = np.zeros_like(out.reg_logits[k])
        if per_scale[k] is not None:
            ii, iy, ix, g_dfl, g_box = per_scale[k]
            # dfl_loss is a mean over sides, box_loss a mean over positives
            full = w.w_dfl * g_dfl / n_sides + w.w_box * g_box / n_pos
            greg_k[ii, :, iy, ix] = full.reshape(len(ii), 4 * n_bins).astype(dtype)
        greg.append(greg_k)
    dfl_loss = dfl_sum / n_sides if n_sides else 0.0
    box_loss = box_sum / n_pos if n_pos else 0.0

    aux_loss = 0.0
    gheat = None
    if cfg.enable_alff:
        targets = np.stack([it.heat_target for it in batch])
        diff = heat_pred - targets
        aux_loss = float(np.mean(diff * diff))
        gheat = ((w.w_aux * 2.0 / diff.size) * diff).astype(dtype)

    try:
        total = total_loss(box_loss, cls_loss, dfl_loss, aux_loss, w)
    except LossError as e:
        raise TrainingError(f"step {step_index}: {e}") from e
    grads = backward_full_batched(gcls, greg, gheat, cache, params)
    comps = {"box": box_loss, "cls": cls_loss, "dfl": dfl_loss,
             "aux": aux_loss, "total": total}
    return comps, grads


def train(cfg: RunConfig, resume: str | None = None,
          spec: ModelSpec | None = None, log=print) -> DetectorParams:
    """Full training run; writes the per-step loss CSV and a checkpoint at the
    end of every epoch.  Bitwise reproducible for a fixed config and seed."""
    items = load_dataset(cfg.dataset, cfg.image_size)
    if resume:
        params, velocity, start_epoch, seed = load_checkpoint(resume)
        if seed != cfg.seed:
            raise TrainingError(
                f"checkpoint seed {seed} does not match config seed {cfg.seed}")
    else:
        params = init_detector(cfg.seed, spec or ModelSpec(), dtype=np.float32)
        velocity, start_epoch = None, 0
    opt = SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    if velocity:
        for name in opt.velocity:
            opt.velocity[name][...] = velocity[name]

    steps_per_epoch = (len(items) + cfg.batch_size - 1) // cfg.batch_size
    mode = "a" if resume else "w"
    with open(cfg.loss_csv, mode) as csv:
        if not resume:
            csv.write("step,box,cls,dfl,aux,total\n")
        for epoch in range(start_epoch, cfg.epochs):
            perm = rngmod.stream(cfg.seed, rngmod.SHUFFLE, epoch).permutation(len(items))
            comps = None
            for b in range(steps_per_epoch):
                sel = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                batch = [items[j] for j in sel]
                step_index = epoch * steps_per_epoch + b
                comps, grads = train_step(params, batch, cfg, step_index)
                opt.step(grads)
                csv.write(f"{step_index},{comps['box']:.6f},{comps['cls']:.6f},"
                          f"{comps['dfl']:.6f},{comps['aux']:.6f},{comps['total']:.6f}\n")
            save_checkpoint(cfg.checkpoint, params, opt, epoch + 1, cfg.seed)
            if log:
                log(f"epoch {epoch + 1}/{cfg.epochs} total {comps['total']:.4f}")
    return params


# ---------------------------------------------------------------------------
# evaluation over a dataset


def evaluate(params: DetectorParams, dataset: str, image_size: int,
             score_thr: float = 0.25, iou_thr: float = 0.65,
             batch_size: int = 8):
    """AP50/AP75/AP50-95 of a parameter set on a dataset directory."""
    from .detector import HeadOutput

    items = load_dataset(dataset, image_size)
    dets = {}
    gts = {}
    for ofs in range(0, len(items), batch_size):
        chunk = items[ofs : ofs + batch_size]
        images = np.stack([it.image for it in chunk])
        out, _, _ = forward_full_batched(images, params, enable_alff=False)
        for i, it in enumerate(chunk):
            single = HeadOutput([c[i] for c in out.cls_logits],
                                [r[i] for r in out.reg_logits], out.n_bins)
            dets[it.image_id] = postprocess(single, score_thr, iou_thr, image_size)
            gts[it.image_id] = it.boxes
    return ap_range(dets, gts)
