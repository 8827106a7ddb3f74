"""Batch command-line surface: synth / harmonize / train / eval / explain / ablate.

Run configuration files are flat ``key = value`` UTF-8 text; unknown keys are
rejected and every command writes its resolved configuration next to its
outputs. In ablation matrix files a value may carry ``|``-separated
alternatives, which expand to the cartesian product of runs.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import sys
import time
from pathlib import Path

import numpy as np

from .corpus import (OntologyMapping, PromptVocabulary, SampleRecord, StratumBins,
                     bin_metadata, compose_prompt, load_corpus, save_corpus, split_records)
from .encoders import Vocabulary
from .errors import CheckpointError, ConfigError, CorpusError, FarsightError
from .explain import (attribute_map, gender_map, overlay_heatmap, rollout_visual,
                      write_heatmap, write_map_csv)
from .metrics import (auc_female_vs_rest, classify, core_metrics, p_female, roc_points,
                      stratified_report, write_roc_csv, write_strata_csv)
from .model import DualPathModel, ModelConfig
from .ontology import attribute_spec
from .synth import synth_generate
from .tensor import no_grad
from .training import (TrainConfig, build_model_from_checkpoint, train, write_metrics_csv)

_BOOL = {"true": True, "false": False, "1": True, "0": False, "on": True, "off": False}

MODEL_KEYS = {
    "image_size": int, "patch_size": int, "token_dim": int, "joint_dim": int,
    "visual_depth": int, "visual_heads": int, "text_depth": int, "text_heads": int,
    "text_max_len": int, "mlp_ratio": float, "attribute_set": str,
    "use_sca_path1": "bool", "use_sca_path2": "bool", "sca_reduction": int,
    "fusion_heads": int, "attribute_attention_heads": int, "dropout": float,
    "prompt_mode": str, "visual_qk_gain": float,
}
TRAIN_KEYS = {
    "epochs": int, "batch_size": int, "lr_backbone": float, "lr_new": float,
    "decay_epochs": "int_list", "decay_factor": float, "clip_norm": float,
    "weight_decay": float, "beta1": float, "beta2": float, "eps": float,
    "auxiliary_weight": float, "gender_weight": float, "attribute_weight": float,
    "seed": int, "visual_blocks": int, "text_blocks": int,
}
META_KEYS = {"profile": str}


def read_flat_config(path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text("utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        values[key.strip()] = value.strip()
    return values


def _convert(key: str, value: str, kind):
    if kind == "bool":
        try:
            return _BOOL[value.lower()]
        except KeyError:
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if kind == "int_list":
        return tuple(int(v) for v in value.split(",")) if value else ()
    try:
        return kind(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind.__name__}")


def build_configs(values: dict[str, str]) -> tuple[ModelConfig, TrainConfig]:
    unknown = set(values) - set(MODEL_KEYS) - set(TRAIN_KEYS) - set(META_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    profile = values.get("profile", "toy")
    if profile not in ("toy", "paper"):
        raise ConfigError(f"profile must be toy or paper, got {profile!r}")

    model_kwargs = {}
    for key, kind in MODEL_KEYS.items():
        if key in values:
            if key == "attribute_set":
                model_kwargs["attributes"] = attribute_spec(values[key])
            else:
                model_kwargs[key] = _convert(key, values[key], kind)
    train_kwargs = {k: _convert(k, values[k], kind)
                    for k, kind in TRAIN_KEYS.items() if k in values}
    if profile == "toy":
        train_config = TrainConfig.toy(**train_kwargs)
    else:
        train_config = TrainConfig(**train_kwargs)
    return ModelConfig(**model_kwargs), train_config


def write_resolved_config(path, model_config: ModelConfig, train_config: TrainConfig,
                          extra: dict | None = None) -> None:
    lines = []
    attrs = next((name for name, spec in (("five", attribute_spec("five")),
                                          ("seven", attribute_spec("seven")))
                  if spec == model_config.attributes), None)
    pairs = {
        "image_size": model_config.image_size, "patch_size": model_config.patch_size,
        "token_dim": model_config.token_dim, "joint_dim": model_config.joint_dim,
        "visual_depth": model_config.visual_depth, "visual_heads": model_config.visual_heads,
        "text_depth": model_config.text_depth, "text_heads": model_config.text_heads,
        "text_max_len": model_config.text_max_len, "mlp_ratio": model_config.mlp_ratio,
        "attribute_set": attrs or ",".join(f"{n}:{k}" for n, k in model_config.attributes),
        "use_sca_path1": str(model_config.use_sca_path1).lower(),
        "use_sca_path2": str(model_config.use_sca_path2).lower(),
        "sca_reduction": model_config.sca_reduction, "fusion_heads": model_config.fusion_heads,
        "attribute_attention_heads": model_config.attribute_attention_heads,
        "dropout": model_config.dropout, "prompt_mode": model_config.prompt_mode,
        "visual_qk_gain": model_config.visual_qk_gain,
        "epochs": train_config.epochs, "batch_size": train_config.batch_size,
        "lr_backbone": train_config.lr_backbone, "lr_new": train_config.lr_new,
        "decay_epochs": ",".join(str(e) for e in train_config.decay_epochs),
        "decay_factor": train_config.decay_factor, "clip_norm": train_config.clip_norm,
        "weight_decay": train_config.weight_decay, "beta1": train_config.beta1,
        "beta2": train_config.beta2, "eps": train_config.eps,
        "auxiliary_weight": train_config.auxiliary_weight,
        "gender_weight": train_config.gender_weight,
        "attribute_weight": train_config.attribute_weight, "seed": train_config.seed,
        "visual_blocks": train_config.visual_blocks, "text_blocks": train_config.text_blocks,
    }
    if extra:
        pairs.update(extra)
    for key in sorted(pairs):
        lines.append(f"{key} = {pairs[key]}")
    Path(path).write_text("\n".join(lines) + "\n", "utf-8")


def _load_prompt_vocab(corpus_csv: Path) -> PromptVocabulary:
    candidate = corpus_csv.parent / "prompts.csv"
    return PromptVocabulary.from_csv(candidate) if candidate.exists() else PromptVocabulary.default()


def _build_model(model_config: ModelConfig, train_config: TrainConfig,
                 prompt_vocab: PromptVocabulary) -> DualPathModel:
    vocabulary = Vocabulary.from_texts(prompt_vocab.all_texts())
    queries = {name: ", ".join(prompt_vocab.descriptions_for(name))
               for name in model_config.attribute_names}
    return DualPathModel(model_config, vocabulary, seed=train_config.seed,
                         query_texts=queries)


# -- commands --------------------------------------------------------------------


def cmd_synth(args) -> int:
    records = synth_generate(args.n, args.seed, bins=args.bins)
    out = Path(args.out)
    save_corpus(records, out)
    PromptVocabulary.default().to_csv(out / "prompts.csv")
    (out / "synth.config").write_text(
        f"bins = {args.bins}\nn = {args.n}\nseed = {args.seed}\n", "utf-8")
    print(f"wrote {len(records)} samples to {out}")
    return 0


def cmd_harmonize(args) -> int:
    mapping = OntologyMapping.from_csv(args.mapping)
    vocab = PromptVocabulary.from_csv(args.vocab)
    rows: list[dict] = []
    for input_path in args.inputs:
        p = Path(input_path)
        with open(p, newline="") as fh:
            for row in csv.DictReader(fh):
                row.setdefault("source", p.stem)
                rows.append(row)
    from .corpus import harmonize
    records, audit = harmonize(rows, mapping)
    for rec in records:
        if not rec.prompt:
            rec.prompt = compose_prompt(rec, vocab, mode="neutral")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_corpus(records, out, write_images=False)
    (out / "audit.csv").write_text("\n".join(audit.lines()) + "\n", "utf-8")
    vocab.to_csv(out / "prompts.csv")
    (out / "harmonize.config").write_text(
        f"inputs = {','.join(str(i) for i in args.inputs)}\nmapping = {args.mapping}\n"
        f"vocab = {args.vocab}\n", "utf-8")
    print(f"harmonized {audit.total} rows -> {out}; totals consistent: {audit.consistent()}")
    return 0


def cmd_train(args) -> int:
    model_config, train_config = build_configs(read_flat_config(args.config))
    corpus_csv = Path(args.corpus)
    records = load_corpus(corpus_csv)
    prompt_vocab = _load_prompt_vocab(corpus_csv)
    model = _build_model(model_config, train_config, prompt_vocab)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(out / "config.resolved", model_config, train_config)
    log_path = out / "log.txt"

    def log(msg: str) -> None:
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(f"[{time.strftime('%Y-%m-%d %H:%M:%S')}] {msg}\n")

    result = train(model, records, train_config, out_dir=out,
                   resume_from=args.resume, log=log)
    print(f"best epoch {result.best_epoch}: val_acc={result.best_val_accuracy:.4f}")
    return 0


def _forward_split(model: DualPathModel, records: list[SampleRecord]) -> np.ndarray:
    from .training import evaluate_split
    logits, _ = evaluate_split(model, records)
    return logits


def cmd_eval(args) -> int:
    model, ckpt = build_model_from_checkpoint(args.checkpoint)
    records = load_corpus(Path(args.corpus))
    if args.split != "all":
        records = [r for r in records if r.split == args.split]
    if not records:
        raise CorpusError(f"no records in split {args.split!r}")
    logits = _forward_split(model, records)
    labels = np.asarray([r.gender for r in records])
    preds = classify(logits)
    scores = p_female(logits)
    stats = core_metrics(preds, labels)
    try:
        auc = auc_female_vs_rest(scores, labels)
    except FarsightError:
        auc = float("nan")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["accuracy", "balanced_accuracy", "macro_f1", "macro_precision",
                    "weighted_recall", "auc", "n"])
        w.writerow([repr(stats["accuracy"]), repr(stats["balanced_accuracy"]),
                    repr(stats["macro_f1"]), repr(stats["macro_precision"]),
                    repr(stats["weighted_recall"]), repr(auc), len(records)])
    bins = StratumBins()
    keys = [bin_metadata(r, bins) for r in records]
    write_strata_csv(stratified_report(scores, labels, keys), out / "strata.csv")
    try:
        write_roc_csv(roc_points(scores, labels), out / "roc.csv")
    except FarsightError:
        pass
    write_resolved_config(out / "config.resolved", ckpt.model_config, ckpt.train_config,
                          extra={"split": args.split})
    print(f"eval[{args.split}] n={len(records)} acc={stats['accuracy']:.4f} "
          f"mA={stats['balanced_accuracy']:.4f} F1={stats['macro_f1']:.4f} auc={auc:.4f}")
    return 0


def cmd_explain(args) -> int:
    model, ckpt = build_model_from_checkpoint(args.checkpoint)
    records = load_corpus(Path(args.corpus))
    ids = [int(v) for v in args.ids.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .corpus import normalize_image
    grid = model.config.grid
    all_maps = []
    for sample_id in ids:
        if not 0 <= sample_id < len(records):
            raise ConfigError(f"sample id {sample_id} outside corpus of {len(records)} rows")
        rec = records[sample_id]
        image = normalize_image(rec.pixels, model.config.image_size)[None]
        with no_grad():
            outputs = model.forward(image, prompts=[rec.prompt], retain_attention=True)
        stack = [layer[0] for layer in outputs.visual_attention_mediated]
        influence = rollout_visual(stack)
        maps = []
        for attr in model.config.attribute_names:
            amap = attribute_map(outputs.cross_attention[attr][0], influence, grid,
                                 tag=attr, sample_id=sample_id)
            maps.append(amap)
            write_heatmap(amap, out / f"{sample_id:05d}_{attr}.pgm")
        gmap = gender_map(maps, outputs.fusion_attention[0], sample_id=sample_id)
        write_heatmap(gmap, out / f"{sample_id:05d}_gender.pgm")
        overlay_heatmap(gmap, rec.pixels, out / f"{sample_id:05d}_overlay.ppm")
        all_maps.extend(maps + [gmap])
    write_map_csv(all_maps, out / "maps.csv")
    write_resolved_config(out / "config.resolved", ckpt.model_config, ckpt.train_config,
                          extra={"ids": args.ids})
    print(f"wrote {len(all_maps)} attention maps to {out}")
    return 0


def cmd_ablate(args) -> int:
    raw = read_flat_config(args.config_matrix)
    fixed = {k: v for k, v in raw.items() if "|" not in v}
    varying = {k: v.split("|") for k, v in raw.items() if "|" in v}
    names = sorted(varying)
    cells = list(itertools.product(*(varying[n] for n in names))) if names else [()]

    records = load_corpus(Path(args.corpus))
    prompt_vocab = _load_prompt_vocab(Path(args.corpus))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for index, combo in enumerate(cells):
        values = dict(fixed)
        values.update(dict(zip(names, combo)))
        model_config, train_config = build_configs(values)
        train_config = TrainConfig(**{**train_config.__dict__,
                                      "seed": train_config.seed + index})
        model = _build_model(model_config, train_config, prompt_vocab)
        cell_dir = out / f"cell{index:02d}"
        result = train(model, records, train_config, out_dir=cell_dir)
        best_row = result.rows[result.best_epoch - 1]
        rows.append({
            "config": f"cell{index:02d}:" + ";".join(f"{n}={v}" for n, v in zip(names, combo)),
            "sca_1": int(model_config.use_sca_path1),
            "sca_2": int(model_config.use_sca_path2),
            "ft_vis": train_config.visual_blocks,
            "ft_txt": train_config.text_blocks,
            "lr_clip": train_config.lr_backbone,
            "lr_heads": train_config.lr_new,
            "dropout": model_config.dropout,
            "epochs": train_config.epochs,
            "mA": best_row["val_mA"],
            "F1": best_row["val_F1_macro"],
            "AUC": best_row["val_auc"],
        })
    with open(out / "table6.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow(row)
    print(f"ablation matrix of {len(cells)} cells -> {out / 'table6.csv'}")
    return 0


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="farsight",
        description="Long-range gender/attribute recognition: data, training, "
                    "evaluation, explainability.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus (CSV + PPM images)")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--seed", type=int, required=True, help="generator seed")
    p.add_argument("--bins", type=int, default=4, help="degradation bins to use (1-4)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("harmonize", help="map native annotations onto the unified ontology")
    p.add_argument("--mapping", required=True, help="mapping spec CSV")
    p.add_argument("--vocab", required=True, help="prompt vocabulary CSV")
    p.add_argument("--inputs", nargs="+", required=True, help="native annotation CSVs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_harmonize)

    p = sub.add_parser("train", help="run the training protocol")
    p.add_argument("--config", required=True, help="flat key=value run config")
    p.add_argument("--corpus", required=True, help="corpus CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics, stratified report, ROC points")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="val", choices=["train", "val", "test", "all"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="attention-rollout heatmaps for chosen samples")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--ids", required=True, help="comma-separated corpus row indices")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("ablate", help="run a config matrix and emit a results table")
    p.add_argument("--config-matrix", required=True,
                   help="run config whose |-separated values expand combinatorially")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"farsight: {exc}", file=sys.stderr)
        return 2
    except FarsightError as exc:
        print(f"farsight: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
