"""Two-phase training: supervised warm-up, then supervised + anatomy loss.

Checkpoint container (little-endian)::

    b"ANSGCKPT"  u32 version  u32 header_len  header (UTF-8 JSON)
    per tensor:  u16 name_len  name  u8 dtype (1 = f32)  u8 rank  u32 dims[rank]  f32 payload
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffops as F
from .diffops import DTYPE, Parameter
from .masklosses import DCE_MODES, anatomy_pair_loss, supervised_loss
from .network import BackboneConfig, OneHotEmbedding, SegNet
from .synthdata import SampleCache, SampleRecord, augment, epoch_batches, load_manifest
from .taxonomy import PropositionMatrix, Relation, TaxonomyGraph, infer_matrix, parse_taxonomy, write_taxonomy
from .tokenbank import TokenBank

log = logging.getLogger(__name__)

MAGIC = b"ANSGCKPT"
VERSION = 1
_DTYPE_F32 = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    phase1: int = 10
    batch_size: int = 4
    pool_capacity: int = 8
    lr: float = 1e-3
    lr_decay: float = 0.99
    lambda_hats: float = 0.1
    seed: int = 0
    eps: float = 1.0
    anatomy_dce: str = "similarity"
    aug_p: float = 0.5
    blocks: tuple[int, ...] = (6, 12, 24, 48)
    d_gap: int = 48
    conditioning: str = "token"

    def __post_init__(self):
        if isinstance(self.blocks, str):
            self.blocks = tuple(int(v) for v in self.blocks.replace(",", " ").split())
        self.blocks = tuple(int(v) for v in self.blocks)
        if self.phase1 > self.epochs:
            raise ValueError("phase1 must not exceed epochs")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.anatomy_dce not in DCE_MODES:
            raise ValueError(f"anatomy_dce must be one of {DCE_MODES}")
        if self.conditioning not in ("token", "onehot"):
            raise ValueError("conditioning must be 'token' or 'onehot'")

    @property
    def backbone(self) -> BackboneConfig:
        return BackboneConfig(self.blocks, self.d_gap)

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** epoch

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for k, v in values.items():
            k = k.replace("-", "_")
            if k not in types:
                continue
            default = getattr(cls, k, None)
            if k == "blocks":
                kwargs[k] = v
            elif isinstance(default, int) and not isinstance(default, bool):
                kwargs[k] = int(v)
            elif isinstance(default, float):
                kwargs[k] = float(v)
            else:
                kwargs[k] = v
        return cls(**kwargs)

    def to_mapping(self) -> dict:
        d = asdict(self)
        d["blocks"] = " ".join(str(b) for b in self.blocks)
        return d


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def adam_step(params: Sequence[Parameter], grads: Sequence[np.ndarray | None], state: AdamState, lr: float) -> None:
    """In-place Adam update; parameters whose gradient is None still advance their moments with 0."""
    state.step += 1
    t = state.step
    c1 = 1 - BETA1 ** t
    c2 = 1 - BETA2 ** t
    for p, g in zip(params, grads):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise F.ShapeError(f"gradient shape {g.shape} does not match {p.name} {p.shape}")
        m = state.m.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m = BETA1 * m + (1 - BETA1) * g
        v = BETA2 * v + (1 - BETA2) * (g * g)
        state.m[p.name] = m.astype(p.dtype)
        state.v[p.name] = v.astype(p.dtype)
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)).astype(p.dtype)


# ---------------------------------------------------------------------------
# model bundle

@dataclass
class ModelBundle:
    net: SegNet
    conditioner: object
    taxonomy: TaxonomyGraph
    config: TrainConfig
    optimizer: AdamState = field(default_factory=AdamState)

    @property
    def matrix(self) -> PropositionMatrix:
        return infer_matrix(self.taxonomy)

    def parameters(self) -> list[Parameter]:
        return self.net.parameters() + list(self.conditioner.parameters())

    def predict(self, images: np.ndarray, class_ids, scale_ids) -> np.ndarray:
        """Foreground probabilities (N, H, W) without recording a tape."""
        with F.no_grad():
            prob, _ = self.net(images, class_ids, scale_ids, self.conditioner)
        return prob.data

    def predict_mask(self, images: np.ndarray, class_ids, scale_ids) -> np.ndarray:
        with F.no_grad():
            _, logits = self.net(images, class_ids, scale_ids, self.conditioner)
        return (logits.data.argmax(axis=1) == 1).astype(np.uint8)


def build_model(taxonomy: TaxonomyGraph, cfg: TrainConfig) -> ModelBundle:
    rng = np.random.default_rng(cfg.seed)
    net_seed, cond_seed = (int(s) for s in rng.integers(0, 2**31, size=2))
    net = SegNet(cfg.backbone, net_seed)
    if cfg.conditioning == "token":
        cond = TokenBank(taxonomy.n, cfg.backbone.widths, cond_seed)
    else:
        cond = OneHotEmbedding(taxonomy.n, cfg.backbone.widths, cond_seed)
    return ModelBundle(net, cond, taxonomy, cfg)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path: str | Path, bundle: ModelBundle, epoch: int = -1,
                    val_mean_dice: float | None = None) -> None:
    tensors = [(p.name, p.data) for p in bundle.parameters()]
    opt = bundle.optimizer
    for p in bundle.parameters():
        if p.name in opt.m:
            tensors.append(("adam.m." + p.name, opt.m[p.name]))
            tensors.append(("adam.v." + p.name, opt.v[p.name]))
    header = {
        "config": bundle.config.to_mapping(),
        "taxonomy": write_taxonomy(bundle.taxonomy),
        "epoch": epoch,
        "val_mean_dice": val_mean_dice,
        "adam_step": opt.step,
        "n_tensors": len(tensors),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(hbytes)), hbytes]
    for name, arr in tensors:
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", _DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint {path}")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    version, hlen = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    tensors = {}
    for _ in range(header["n_tensors"]):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        dtype, rank = struct.unpack("<BB", take(2))
        if dtype != _DTYPE_F32:
            raise CheckpointError(f"unknown dtype code {dtype} for {name}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).astype(DTYPE)
    if pos != len(buf):
        raise CheckpointError(f"trailing bytes in checkpoint {path}")
    return header, tensors


def restore(bundle: ModelBundle, tensors: dict[str, np.ndarray], strict: bool = True, adam_step: int = 0) -> None:
    """Copy tensors into the bundle.

    Permissive mode tolerates a class-token table with fewer rows than the
    bundle (the extra rows keep their initialisation) and ignores unknown names.
    """
    params = {p.name: p for p in bundle.parameters()}
    opt = AdamState(step=adam_step)
    for name, arr in tensors.items():
        if name.startswith("adam."):
            kind, pname = name[5], name[7:]
            if pname in params and arr.shape == params[pname].shape:
                (opt.m if kind == "m" else opt.v)[pname] = arr.copy()
            elif strict:
                raise CheckpointError(f"optimizer state for unknown tensor {pname}")
            continue
        if name not in params:
            if strict:
                raise CheckpointError(f"unknown tensor {name!r} in checkpoint")
            continue
        p = params[name]
        if arr.shape == p.shape:
            p.data = arr.copy()
        elif not strict and name == "tokens.class" and arr.shape[1:] == p.shape[1:] and arr.shape[0] < p.shape[0]:
            data = p.data.copy()
            data[:arr.shape[0]] = arr
            p.data = data
        else:
            raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
    if strict:
        missing = set(params) - set(tensors)
        if missing:
            raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)}")
    bundle.optimizer = opt


def load_checkpoint(path: str | Path, strict: bool = True) -> tuple[ModelBundle, dict]:
    header, tensors = read_checkpoint(path)
    cfg = TrainConfig.from_mapping(header["config"])
    taxonomy = parse_taxonomy(header["taxonomy"])
    bundle = build_model(taxonomy, cfg)
    restore(bundle, tensors, strict=strict, adam_step=header.get("adam_step", 0))
    return bundle, header


# ---------------------------------------------------------------------------
# training

def select_model(history: Sequence[float]) -> int:
    """Index of the best validation score; earliest wins ties."""
    if len(history) == 0:
        raise ValueError("empty validation history")
    best = 0
    for k, v in enumerate(history):
        if v > history[best]:
            best = k
    return best


def related_classes(matrix: PropositionMatrix, i: int) -> list[tuple[int, int]]:
    """(j, code) for every j != i with a known relation to i."""
    return [(j, int(matrix.cells[i, j])) for j in range(matrix.n)
            if j != i and matrix.cells[i, j] != Relation.UNKNOWN]


@dataclass
class StepResult:
    loss: float
    loss_sup: float
    loss_anat: float
    n_cross: int


class Trainer:
    def __init__(self, bundle: ModelBundle, data_root: str | Path | None = None,
                 records: Sequence[SampleRecord] | None = None):
        self.bundle = bundle
        self.cfg = bundle.config
        self.matrix = infer_matrix(bundle.taxonomy)
        self.cache = SampleCache(data_root) if data_root is not None else None
        if records is None:
            records = load_manifest(data_root) if data_root is not None else []
        self.records = list(records)

    def load_batch(self, batch: Sequence[SampleRecord], epoch: int, batch_index: int, augment_p: float | None = None):
        p = self.cfg.aug_p if augment_p is None else augment_p
        images, masks = [], []
        for k, rec in enumerate(batch):
            img, msk = self.cache.image(rec), self.cache.mask(rec)
            if p > 0:
                img, msk = augment(img, msk, p, [self.cfg.seed, epoch, batch_index, k])
            images.append(img)
            masks.append(msk)
        return np.stack(images).astype(DTYPE), np.stack(masks).astype(DTYPE)

    def train_step(self, images: np.ndarray, masks: np.ndarray, class_id: int, scale_id: int,
                   epoch: int) -> StepResult:
        """One optimizer step on a single-class batch; returns the loss terms."""
        cfg, b = self.cfg, self.bundle
        if not 0 <= class_id < self.matrix.n:
            raise TrainingError(f"class {class_id} has no row in the relation matrix")
        params = b.parameters()
        for p in params:
            p.grad = None
        n = images.shape[0]
        cross = related_classes(self.matrix, class_id) if epoch >= cfg.phase1 and cfg.lambda_hats else []
        prob, _ = b.net(images, [class_id] * n, [scale_id] * n, b.conditioner)
        sup = supervised_loss(masks, prob, cfg.eps)
        sup_val = float(sup.data)
        sup.backward()
        anat_val, n_cross = 0.0, 0
        for j, code in cross:
            pj, _ = b.net(images, [j] * n, [scale_id] * n, b.conditioner)
            term = anatomy_pair_loss(masks, pj, code, cfg.eps, cfg.anatomy_dce) * cfg.lambda_hats
            anat_val += float(term.data)
            term.backward()
            n_cross += 1

        total = sup_val + anat_val
        if not math.isfinite(total):
            raise TrainingError(
                f"non-finite loss at epoch {epoch}, class {class_id}: supervised={sup_val}, anatomy={anat_val}")
        adam_step(params, [p.grad for p in params], b.optimizer, cfg.lr_at(epoch))
        return StepResult(total, sup_val, anat_val, n_cross)

    def validate(self, records: Sequence[SampleRecord]) -> dict[int, float]:
        from .evaluation import dice_score

        by_class: dict[int, list[float]] = {}
        for rec in records:
            img = self.cache.image(rec)[None]
            pred = self.bundle.predict_mask(img, [rec.class_id], [rec.scale_id])[0]
            by_class.setdefault(rec.class_id, []).append(dice_score(pred, self.cache.mask(rec)))
        return {c: float(np.mean(v)) for c, v in sorted(by_class.items())}

    def fit(self, out_dir: str | Path | None = None) -> dict:
        cfg, b = self.cfg, self.bundle
        train = [r for r in self.records if r.split == "train"]
        val = [r for r in self.records if r.split == "val"]
        if not train:
            raise TrainingError("no training records")
        out = Path(out_dir) if out_dir is not None else None
        names = b.taxonomy.names
        rows, history, losses = [], [], []
        writer = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            fh = open(out / "metrics.csv", "w", newline="")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "lr", "loss_sup", "loss_anat"] + [f"val_dice_{n}" for n in names] + ["val_mean_dice"])
        best = -math.inf
        best_state = {}
        try:
            for epoch in range(cfg.epochs):
                t0 = time.perf_counter()
                sup_sum = anat_sum = 0.0
                batches = epoch_batches(train, b.taxonomy.n, cfg.seed, epoch, cfg.pool_capacity, cfg.batch_size)
                for k, batch in enumerate(batches):
                    images, masks = self.load_batch(batch, epoch, k)
                    res = self.train_step(images, masks, batch[0].class_id, batch[0].scale_id, epoch)
                    losses.append(res.loss)
                    sup_sum += res.loss_sup
                    anat_sum += res.loss_anat
                per_class = self.validate(val) if val else {}
                mean_dice = float(np.mean(list(per_class.values()))) if per_class else float("nan")
                history.append(mean_dice if per_class else -epoch)
                row = [epoch, f"{cfg.lr_at(epoch):.6g}", f"{sup_sum / len(batches):.6f}", f"{anat_sum / len(batches):.6f}"]
                row += [f"{per_class[c]:.4f}" if c in per_class else "" for c in range(len(names))]
                row += [f"{mean_dice:.4f}"]
                rows.append(row)
                improved = history[-1] > best
                if improved:
                    best = history[-1]
                    best_state = {p.name: p.data.copy() for p in b.parameters()}
                if writer is not None:
                    writer.writerow(row)
                    fh.flush()
                    save_checkpoint(out / "last.ckpt", b, epoch, mean_dice)
                    if improved:
                        save_checkpoint(out / "best.ckpt", b, epoch, mean_dice)
                    with open(out / "train.log", "a") as lf:
                        lf.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} epoch={epoch} "
                                 f"seconds={time.perf_counter() - t0:.1f} val_mean_dice={mean_dice:.4f}\n")
                log.info("epoch %d sup %.4f anat %.4f val %.2f (%.1fs)", epoch, sup_sum / len(batches),
                         anat_sum / len(batches), mean_dice, time.perf_counter() - t0)
        finally:
            if writer is not None:
                fh.close()
        # hand back the selected epoch, not the last one
        for p in b.parameters():
            p.data = best_state[p.name]
        return {"history": history, "best_epoch": select_model(history), "losses": losses, "rows": rows}


def train(data_root: str | Path, cfg: TrainConfig, taxonomy: TaxonomyGraph | None = None,
          out_dir: str | Path | None = None) -> tuple[ModelBundle, dict]:
    from .taxonomy import load_taxonomy

    taxonomy = taxonomy or load_taxonomy()
    bundle = build_model(taxonomy, cfg)
    trainer = Trainer(bundle, data_root, load_manifest(data_root))
    result = trainer.fit(out_dir)
    return bundle, result
