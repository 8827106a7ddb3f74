"""Training protocol: differential learning rates with step decay, gradient
clipping, per-epoch validation, best-checkpoint selection, and deterministic
seeding. Checkpoints are a UTF-8 manifest followed by raw float64 payload."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .corpus import PromptVocabulary, SampleRecord, normalize_image, split_records
from .encoders import FreezePolicy, Vocabulary
from .errors import CheckpointError, ConfigError, NumericError
from .losses import attribute_loss, gender_loss, total_loss
from .metrics import auc_female_vs_rest, classify, core_metrics, p_female
from .model import DualPathModel, ModelConfig
from .optim import AdamW, Group, clip_global_norm
from .tensor import no_grad

METRIC_COLUMNS = ["epoch", "train_loss", "val_acc", "val_mA", "val_F1_macro",
                  "val_precision_macro", "val_recall_weighted", "val_auc"]


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr_backbone: float = 1e-6
    lr_new: float = 1e-4
    decay_epochs: tuple[int, ...] = (20, 40)
    decay_factor: float = 0.1
    clip_norm: float = 5.0
    weight_decay: float = 1.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    auxiliary_weight: float = 0.25
    gender_weight: float = 0.5
    attribute_weight: float = 0.5
    seed: int = 0
    visual_blocks: int = 4       # trailing visual blocks left trainable
    text_blocks: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        for e in self.decay_epochs:
            if not 1 <= e <= self.epochs:
                raise ConfigError(f"decay epoch {e} outside [1, {self.epochs}]")

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        """Desk-scale defaults: the mini encoders train from scratch, so the
        backbone learning rate is far above the paper-scale 1e-6."""
        base = dict(epochs=30, batch_size=16, lr_backbone=1e-4, lr_new=1e-3,
                    decay_epochs=(20,))
        base.update(overrides)
        return cls(**base)

    def freeze_policy(self) -> FreezePolicy:
        return FreezePolicy(visual_blocks=self.visual_blocks, text_blocks=self.text_blocks)


def lr_at(epoch: int, base: float, decay_epochs: tuple[int, ...], factor: float) -> float:
    """Stepwise decay; the listed epoch itself already runs at the decayed rate."""
    hits = sum(1 for d in decay_epochs if epoch >= d)
    return base * factor ** hits


@dataclass
class TrainResult:
    best_epoch: int
    best_val_accuracy: float
    rows: list[dict]
    model: DualPathModel
    best_params: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    best_checkpoint: Path | None = None
    last_checkpoint: Path | None = None


def _epoch_rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), int(stream)]))


def _prepare_images(records: list[SampleRecord], size: int) -> np.ndarray:
    out = np.empty((len(records), 3, size, size))
    for i, rec in enumerate(records):
        if rec.pixels is None:
            raise ConfigError(f"record {i} has no pixels; load the corpus with images")
        out[i] = normalize_image(rec.pixels, size, train=False)
    return out


def evaluate_split(model: DualPathModel, records: list[SampleRecord],
                   images: np.ndarray | None = None, batch_size: int = 64
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Fused-head logits and labels over a split, inference mode."""
    size = model.config.image_size
    if images is None:
        images = _prepare_images(records, size)
    logits = np.empty((len(records), 3))
    with no_grad():
        for start in range(0, len(records), batch_size):
            batch = slice(start, min(start + batch_size, len(records)))
            prompts = [r.prompt for r in records[batch]]
            out = model.forward(images[batch], prompts=prompts, training=False)
            logits[batch] = out.fused_logits.data
    labels = np.asarray([r.gender for r in records])
    return logits, labels


def train(model: DualPathModel, records: list[SampleRecord], config: TrainConfig,
          out_dir=None, resume_from=None, log=None) -> TrainResult:
    """Run the full protocol over the train/val splits of ``records``.

    With ``out_dir`` set, writes best.ckpt / last.ckpt / metrics.csv there.
    ``resume_from`` restores parameters, optimizer state and the metric log
    from a checkpoint and continues at the next epoch.
    """
    model.apply_freeze(config.freeze_policy())
    optimizer = AdamW(model.parameters(), lr_backbone=config.lr_backbone,
                      lr_new=config.lr_new, beta1=config.beta1, beta2=config.beta2,
                      eps=config.eps, weight_decay=config.weight_decay)

    splits = split_records(records)
    train_recs, val_recs = splits["train"], splits["val"]
    if not train_recs or not val_recs:
        raise ConfigError("corpus must provide non-empty train and val splits")
    size = model.config.image_size
    train_images = _prepare_images(train_recs, size)
    val_images = _prepare_images(val_recs, size)
    train_labels = np.asarray([r.gender for r in train_recs])
    attr_names = model.config.attribute_names
    train_attr_labels = {a: np.asarray([r.attributes.get(a, -100) for r in train_recs])
                         for a in attr_names}

    rows: list[dict] = []
    start_epoch = 1
    best_epoch, best_acc = 0, -1.0
    best_params: dict[str, np.ndarray] = {}

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        restore_checkpoint(ckpt, model, optimizer)
        rows = [dict(r) for r in ckpt.metric_rows]
        start_epoch = ckpt.epoch + 1
        best_epoch, best_acc = ckpt.best_epoch, ckpt.best_val_accuracy

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for epoch in range(start_epoch, config.epochs + 1):
        optimizer.set_lr(Group.BACKBONE,
                         lr_at(epoch, config.lr_backbone, config.decay_epochs, config.decay_factor))
        optimizer.set_lr(Group.NEW_MODULE,
                         lr_at(epoch, config.lr_new, config.decay_epochs, config.decay_factor))
        shuffle_rng = _epoch_rng(config.seed, epoch, 1)
        flip_rng = _epoch_rng(config.seed, epoch, 2)
        drop_rng = _epoch_rng(config.seed, epoch, 3)
        order = shuffle_rng.permutation(len(train_recs))

        loss_sum, sample_count = 0.0, 0
        for b_start in range(0, len(order), config.batch_size):
            idx = order[b_start:b_start + config.batch_size]
            images = train_images[idx].copy()
            flips = flip_rng.random(len(idx)) < 0.5
            images[flips] = images[flips][:, :, :, ::-1]
            prompts = [train_recs[i].prompt for i in idx]
            try:
                outp = model.forward(images, prompts=prompts, training=True, rng=drop_rng)
                l_gender = gender_loss(outp.fused_logits, outp.direct_logits,
                                       outp.mediated_logits, train_labels[idx],
                                       config.auxiliary_weight)
                l_attr = attribute_loss(outp.attribute_logits,
                                        {a: train_attr_labels[a][idx] for a in attr_names})
                loss = total_loss(l_gender, l_attr, config.gender_weight, config.attribute_weight)
            except NumericError as exc:
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {b_start // config.batch_size}: {exc}"
                ) from exc
            loss.backward()
            clip_global_norm(model.parameters(), config.clip_norm)
            optimizer.step()
            optimizer.zero_grad()
            loss_sum += loss.item() * len(idx)
            sample_count += len(idx)

        val_logits, val_labels = evaluate_split(model, val_recs, val_images)
        preds = classify(val_logits)
        scores = p_female(val_logits)
        stats = core_metrics(preds, val_labels)
        try:
            auc = auc_female_vs_rest(scores, val_labels)
        except Exception:
            auc = float("nan")
        row = {
            "epoch": epoch,
            "train_loss": loss_sum / sample_count,
            "val_acc": stats["accuracy"],
            "val_mA": stats["balanced_accuracy"],
            "val_F1_macro": stats["macro_f1"],
            "val_precision_macro": stats["macro_precision"],
            "val_recall_weighted": stats["weighted_recall"],
            "val_auc": auc,
        }
        rows.append(row)
        if log is not None:
            log(f"epoch {epoch}: loss={row['train_loss']:.4f} val_acc={row['val_acc']:.4f} "
                f"val_F1={row['val_F1_macro']:.4f}")

        if row["val_acc"] > best_acc:
            best_acc, best_epoch = row["val_acc"], epoch
            best_params = {p.name: p.tensor.data.copy() for p in model.parameters()}
            if out is not None:
                save_checkpoint(out / "best.ckpt", model, optimizer, config,
                                epoch, rows, best_epoch, best_acc)
        if out is not None:
            save_checkpoint(out / "last.ckpt", model, optimizer, config,
                            epoch, rows, best_epoch, best_acc)

    if out is not None:
        write_metrics_csv(rows, out / "metrics.csv")
    return TrainResult(best_epoch=best_epoch, best_val_accuracy=best_acc, rows=rows,
                       model=model, best_params=best_params,
                       best_checkpoint=(out / "best.ckpt") if out else None,
                       last_checkpoint=(out / "last.ckpt") if out else None)


def write_metrics_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in METRIC_COLUMNS[1:]])


# -- checkpoint format ------------------------------------------------------------------
#
# UTF-8 manifest terminated by one blank line, then little-endian float64
# arrays concatenated in manifest order. Manifest lines:
#   farsight-checkpoint 1
#   cfg model.<key> = <value>        architecture configuration
#   cfg train.<key> = <value>        training configuration
#   meta <key> = <value>             epoch, best epoch/accuracy, optimizer step
#   query <attribute> = <text>       per-attribute text queries
#   metric <epoch> <v1>,...          one stored metric-log row
#   vocab <token>                    text-encoder vocabulary, in id order
#   tensor <name> <d0xd1x...> <offset> <count>


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    vocab_tokens: list[str]
    query_texts: dict[str, str]
    epoch: int
    best_epoch: int
    best_val_accuracy: float
    metric_rows: list[dict]
    arrays: dict[str, np.ndarray]
    optimizer_step: int


def _model_cfg_lines(cfg: ModelConfig) -> list[str]:
    attrs = ",".join(f"{n}:{k}" for n, k in cfg.attributes)
    pairs = [("image_size", cfg.image_size), ("patch_size", cfg.patch_size),
             ("token_dim", cfg.token_dim), ("joint_dim", cfg.joint_dim),
             ("visual_depth", cfg.visual_depth), ("visual_heads", cfg.visual_heads),
             ("text_depth", cfg.text_depth), ("text_heads", cfg.text_heads),
             ("text_max_len", cfg.text_max_len), ("mlp_ratio", repr(cfg.mlp_ratio)),
             ("attributes", attrs), ("use_sca_path1", int(cfg.use_sca_path1)),
             ("use_sca_path2", int(cfg.use_sca_path2)), ("sca_reduction", cfg.sca_reduction),
             ("fusion_heads", cfg.fusion_heads),
             ("attribute_attention_heads", cfg.attribute_attention_heads),
             ("dropout", repr(cfg.dropout)), ("prompt_mode", cfg.prompt_mode),
             ("visual_qk_gain", repr(cfg.visual_qk_gain))]
    return [f"cfg model.{k} = {v}" for k, v in pairs]


def _train_cfg_lines(cfg: TrainConfig) -> list[str]:
    pairs = [("epochs", cfg.epochs), ("batch_size", cfg.batch_size),
             ("lr_backbone", repr(cfg.lr_backbone)), ("lr_new", repr(cfg.lr_new)),
             ("decay_epochs", ",".join(str(e) for e in cfg.decay_epochs)),
             ("decay_factor", repr(cfg.decay_factor)), ("clip_norm", repr(cfg.clip_norm)),
             ("weight_decay", repr(cfg.weight_decay)), ("beta1", repr(cfg.beta1)),
             ("beta2", repr(cfg.beta2)), ("eps", repr(cfg.eps)),
             ("auxiliary_weight", repr(cfg.auxiliary_weight)),
             ("gender_weight", repr(cfg.gender_weight)),
             ("attribute_weight", repr(cfg.attribute_weight)), ("seed", cfg.seed),
             ("visual_blocks", cfg.visual_blocks), ("text_blocks", cfg.text_blocks)]
    return [f"cfg train.{k} = {v}" for k, v in pairs]


def save_checkpoint(path, model: DualPathModel, optimizer: AdamW | None,
                    train_config: TrainConfig, epoch: int, metric_rows: list[dict],
                    best_epoch: int, best_val_accuracy: float) -> None:
    lines = ["farsight-checkpoint 1"]
    lines.extend(_model_cfg_lines(model.config))
    lines.extend(_train_cfg_lines(train_config))
    lines.append(f"meta epoch = {epoch}")
    lines.append(f"meta best_epoch = {best_epoch}")
    lines.append(f"meta best_val_accuracy = {best_val_accuracy!r}")
    step = optimizer.state.step_count if optimizer is not None else 0
    lines.append(f"meta optimizer_step = {step}")
    for attr in model.config.attribute_names:
        lines.append(f"query {attr} = {model.query_texts[attr]}")
    for row in metric_rows:
        values = ",".join(repr(float(row[c])) for c in METRIC_COLUMNS[1:])
        lines.append(f"metric {row['epoch']} {values}")
    for token in model.text.vocab.tokens[2:]:
        lines.append(f"vocab {token}")

    arrays: list[tuple[str, np.ndarray]] = []
    for p in model.parameters():
        arrays.append((f"param.{p.name}", p.tensor.data))
    if optimizer is not None:
        for name in sorted(optimizer.state.m):
            arrays.append((f"adam_m.{name}", optimizer.state.m[name]))
        for name in sorted(optimizer.state.v):
            arrays.append((f"adam_v.{name}", optimizer.state.v[name]))

    offset = 0
    payload = io.BytesIO()
    for name, arr in arrays:
        shape = "x".join(str(d) for d in arr.shape) if arr.shape else "scalar"
        lines.append(f"tensor {name} {shape} {offset} {arr.size}")
        payload.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        offset += arr.size
    manifest = "\n".join(lines) + "\n\n"
    with open(path, "wb") as fh:
        fh.write(manifest.encode("utf-8"))
        fh.write(payload.getvalue())


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise CheckpointError("no blank line terminating the manifest")
    manifest = blob[:sep].decode("utf-8").splitlines()
    payload = blob[sep + 2:]
    if not manifest or manifest[0] != "farsight-checkpoint 1":
        raise CheckpointError("not a farsight checkpoint")

    cfg: dict[str, str] = {}
    meta: dict[str, str] = {}
    queries: dict[str, str] = {}
    metric_rows: list[dict] = []
    tokens: list[str] = []
    index: list[tuple[str, tuple[int, ...], int, int]] = []
    for line in manifest[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "cfg":
            key, _, value = rest.partition(" = ")
            cfg[key] = value
        elif kind == "meta":
            key, _, value = rest.partition(" = ")
            meta[key] = value
        elif kind == "query":
            key, _, value = rest.partition(" = ")
            queries[key] = value
        elif kind == "metric":
            epoch_s, _, values = rest.partition(" ")
            vals = values.split(",")
            row = {"epoch": int(epoch_s)}
            row.update({c: float(v) for c, v in zip(METRIC_COLUMNS[1:], vals)})
            metric_rows.append(row)
        elif kind == "vocab":
            tokens.append(rest)
        elif kind == "tensor":
            name, shape_s, offset_s, count_s = rest.rsplit(" ", 3)
            shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
            count = int(count_s)
            if int(np.prod(shape, dtype=np.int64)) != count and shape != ():
                raise CheckpointError(f"tensor {name}: shape {shape} does not hold {count} values")
            index.append((name, shape, int(offset_s), count))
        else:
            raise CheckpointError(f"unknown manifest line kind {kind!r}")

    total = sum(count for _, _, _, count in index)
    if len(payload) != total * 8:
        raise CheckpointError(f"payload holds {len(payload)} bytes, manifest expects {total * 8}")
    arrays: dict[str, np.ndarray] = {}
    for name, shape, offset, count in index:
        raw = payload[offset * 8:(offset + count) * 8]
        if len(raw) != count * 8:
            raise CheckpointError(f"tensor {name} payload truncated")
        arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

    attributes = tuple((part.split(":")[0], int(part.split(":")[1]))
                       for part in cfg["model.attributes"].split(","))
    model_config = ModelConfig(
        image_size=int(cfg["model.image_size"]), patch_size=int(cfg["model.patch_size"]),
        token_dim=int(cfg["model.token_dim"]), joint_dim=int(cfg["model.joint_dim"]),
        visual_depth=int(cfg["model.visual_depth"]), visual_heads=int(cfg["model.visual_heads"]),
        text_depth=int(cfg["model.text_depth"]), text_heads=int(cfg["model.text_heads"]),
        text_max_len=int(cfg["model.text_max_len"]), mlp_ratio=float(cfg["model.mlp_ratio"]),
        attributes=attributes, use_sca_path1=bool(int(cfg["model.use_sca_path1"])),
        use_sca_path2=bool(int(cfg["model.use_sca_path2"])),
        sca_reduction=int(cfg["model.sca_reduction"]),
        fusion_heads=int(cfg["model.fusion_heads"]),
        attribute_attention_heads=int(cfg["model.attribute_attention_heads"]),
        dropout=float(cfg["model.dropout"]), prompt_mode=cfg["model.prompt_mode"],
        visual_qk_gain=float(cfg["model.visual_qk_gain"]))
    decay = tuple(int(e) for e in cfg["train.decay_epochs"].split(",")) \
        if cfg["train.decay_epochs"] else ()
    train_config = TrainConfig(
        epochs=int(cfg["train.epochs"]), batch_size=int(cfg["train.batch_size"]),
        lr_backbone=float(cfg["train.lr_backbone"]), lr_new=float(cfg["train.lr_new"]),
        decay_epochs=decay, decay_factor=float(cfg["train.decay_factor"]),
        clip_norm=float(cfg["train.clip_norm"]), weight_decay=float(cfg["train.weight_decay"]),
        beta1=float(cfg["train.beta1"]), beta2=float(cfg["train.beta2"]),
        eps=float(cfg["train.eps"]), auxiliary_weight=float(cfg["train.auxiliary_weight"]),
        gender_weight=float(cfg["train.gender_weight"]),
        attribute_weight=float(cfg["train.attribute_weight"]), seed=int(cfg["train.seed"]),
        visual_blocks=int(cfg["train.visual_blocks"]), text_blocks=int(cfg["train.text_blocks"]))

    return Checkpoint(model_config=model_config, train_config=train_config,
                      vocab_tokens=tokens, query_texts=queries, epoch=int(meta["epoch"]),
                      best_epoch=int(meta["best_epoch"]),
                      best_val_accuracy=float(meta["best_val_accuracy"]),
                      metric_rows=metric_rows, arrays=arrays,
                      optimizer_step=int(meta["optimizer_step"]))


def restore_checkpoint(ckpt: Checkpoint, model: DualPathModel,
                       optimizer: AdamW | None = None) -> None:
    """Copy parameters (and optimizer state) bit-for-bit into live objects."""
    params = {p.name: p for p in model.parameters()}
    stored = {n[len("param."):]: a for n, a in ckpt.arrays.items() if n.startswith("param.")}
    if set(params) != set(stored):
        raise CheckpointError("checkpoint parameters do not match the model")
    for name, p in params.items():
        if stored[name].shape != p.tensor.data.shape:
            raise CheckpointError(f"parameter {name} shape mismatch")
        p.tensor.data = stored[name].copy()
    if optimizer is not None:
        optimizer.state.step_count = ckpt.optimizer_step
        optimizer.state.m = {n[len("adam_m."):]: a.copy() for n, a in ckpt.arrays.items()
                             if n.startswith("adam_m.")}
        optimizer.state.v = {n[len("adam_v."):]: a.copy() for n, a in ckpt.arrays.items()
                             if n.startswith("adam_v.")}


def build_model_from_checkpoint(path) -> tuple[DualPathModel, Checkpoint]:
    ckpt = load_checkpoint(path)
    vocab = Vocabulary(ckpt.vocab_tokens)
    model = DualPathModel(ckpt.model_config, vocab, seed=ckpt.train_config.seed,
                          query_texts=ckpt.query_texts or None)
    model.apply_freeze(ckpt.train_config.freeze_policy())
    restore_checkpoint(ckpt, model)
    return model, ckpt
