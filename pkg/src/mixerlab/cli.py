"""Command-line surface: flops, params, train, eval, rank, infer.

Every command is a pure function of (config file, seed, input files) and
writes byte-identical outputs on re-runs. INI configs are validated
strictly: unknown sections or keys are config errors. Exit codes: 0 ok,
2 config error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from .charts import grouped_bar_svg
from .complexity import KINDS, stage_sweep, sweep_to_csv
from .errors import (
    CapacityError,
    ConfigError,
    DataError,
    MixerlabError,
    NumericsError,
    ShapeError,
)
from .evalrank import (
    CaseScores,
    aggregate_geomean,
    auc_macro,
    f1_macro,
    normalize_ranks,
    pairwise_wins,
    rank_table_csv,
    read_case_scores_csv,
    sliding_window_infer,
    write_case_scores_csv,
)
from .imageio import read_image_as_float, write_pgm, write_raw_f64
from .metaformer import MetaFormer, ModelConfig, count_params, format_signature, parse_signature
from .tensor import Tensor
from .trainer import (
    TrainConfig,
    grad_norm_monitor,
    make_two_class_blobs,
    predict_scores,
    train_classifier,
)

_MODEL_KEYS = {
    "channels", "depths", "signature", "mlp_ratio", "head", "classes",
    "decoder_dim", "input", "layerscale_init", "stochastic_depth",
}
_TRAIN_KEYS = {
    "epochs", "batch_size", "lr", "min_lr", "weight_decay", "warmup_epochs",
    "label_smoothing", "class_weight_clamp", "loss", "ignore_background",
    "augment_sigma", "max_steps", "grad_norm_alarm",
}
_DATA_KEYS = {"kind", "n", "val_n", "image_dir", "labels_csv"}
_EVAL_KEYS = {"metric", "scores_csv", "checkpoint", "dataset", "submission"}
_RANK_KEYS = {"mode", "wins_csv", "scores_dir", "comparator", "repeats", "alpha"}
_INFER_KEYS = {"checkpoint", "image", "patch", "overlap", "save_logits"}
_FLOPS_KEYS = {"kernel"}
_PARAMS_KEYS = {"signatures", "classes", "input", "head"}
_RUN_KEYS = {"seed"}

_ALLOWED_SECTIONS = {
    "flops": {"model": _MODEL_KEYS, "flops": _FLOPS_KEYS, "run": _RUN_KEYS},
    "params": {"params": _PARAMS_KEYS, "run": _RUN_KEYS},
    "train": {"model": _MODEL_KEYS, "train": _TRAIN_KEYS, "data": _DATA_KEYS, "run": _RUN_KEYS},
    "eval": {"eval": _EVAL_KEYS, "data": _DATA_KEYS, "run": _RUN_KEYS},
    "rank": {"rank": _RANK_KEYS, "run": _RUN_KEYS},
    "infer": {"infer": _INFER_KEYS, "run": _RUN_KEYS},
}


def load_config(path: str, command: str) -> configparser.ConfigParser:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    allowed = _ALLOWED_SECTIONS[command]
    for section in parser.sections():
        if section not in allowed:
            raise ConfigError(f"section [{section}] is not valid for `{command}`")
        unknown = set(parser[section].keys()) - allowed[section]
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return parser


def resolved_ini(parser: configparser.ConfigParser, seed: int, threads: int) -> str:
    """Deterministic dump of the fully resolved configuration."""
    lines = []
    sections = sorted(set(parser.sections()) | {"run"})
    for section in sections:
        lines.append(f"[{section}]")
        items = dict(parser[section]) if parser.has_section(section) else {}
        if section == "run":
            items["seed"] = str(seed)
            items["threads"] = str(threads)
        for key in sorted(items):
            lines.append(f"{key} = {items[key]}")
        lines.append("")
    return "\n".join(lines)


def model_config_from(parser: configparser.ConfigParser) -> ModelConfig:
    text = "[model]\n"
    if parser.has_section("model"):
        text += "\n".join(f"{k} = {v}" for k, v in parser["model"].items())
    return ModelConfig.from_ini(text)


def _write(out_dir: str, name: str, content: str | bytes):
    os.makedirs(out_dir, exist_ok=True)
    mode = "wb" if isinstance(content, bytes) else "w"
    with open(os.path.join(out_dir, name), mode) as fh:
        fh.write(content)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_flops(parser, out_dir: str, seed: int) -> int:
    config = model_config_from(parser)
    kernel = parser.getint("flops", "kernel", fallback=3)
    reports = stage_sweep(config, kernel=kernel)
    _write(out_dir, "flops.csv", sweep_to_csv(reports))
    groups = [f"stage{i}" for i in range(4)]
    series = {
        kind: [r.flops for r in reports if r.kind == kind] for kind in KINDS
    }
    svg = grouped_bar_svg("token-mixer FLOPs per stage", groups, series, log_scale=True)
    _write(out_dir, "flops.svg", svg)
    return 0


def cmd_params(parser, out_dir: str, seed: int) -> int:
    if not parser.has_option("params", "signatures"):
        raise ConfigError("[params] needs `signatures`")
    entries = [e.strip() for e in parser.get("params", "signatures").split(";") if e.strip()]
    classes = parser.getint("params", "classes", fallback=10)
    head = parser.get("params", "head", fallback="classify")
    h, _, w = parser.get("params", "input", fallback="224x224").partition("x")
    rows = ["signature,backbone_ex_mixers,mixers,pos_emb,head,total"]
    for entry in entries:
        try:
            specs = parse_signature(entry)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"invalid signature {entry!r}: {exc}") from exc
        if len(specs) == 1:
            specs = tuple(specs[0] for _ in range(4))
        if len(specs) != 4:
            raise ConfigError(f"signature {entry!r} must name 1 or 4 mixers")
        config = ModelConfig(
            signature=specs, head=head, num_classes=classes, input_hw=(int(h), int(w))
        )
        counts = count_params(MetaFormer(config, seed=seed))
        sig_label = format_signature(specs).replace(",", "|")
        rows.append(
            f"{sig_label},{counts['backbone_ex_mixers']},{counts['mixers']},"
            f"{counts['pos_emb']},{counts['head']},{counts['total']}"
        )
    _write(out_dir, "params.csv", "\n".join(rows) + "\n")
    return 0


def _load_dataset(parser, config: ModelConfig, seed: int):
    kind = parser.get("data", "kind", fallback="synthetic")
    if kind == "synthetic":
        n = parser.getint("data", "n", fallback=128)
        images, labels = make_two_class_blobs(n, hw=config.input_hw, seed=seed)
        val_n = parser.getint("data", "val_n", fallback=0)
        val = None
        if val_n > 0:
            val = make_two_class_blobs(val_n, hw=config.input_hw, seed=seed + 1)
        return images, labels, val
    if kind == "image_dir":
        image_dir = parser.get("data", "image_dir", fallback=None)
        labels_csv = parser.get("data", "labels_csv", fallback=None)
        if not image_dir or not labels_csv:
            raise ConfigError("[data] kind=image_dir needs image_dir and labels_csv")
        if not os.path.exists(labels_csv):
            raise DataError(f"labels csv not found: {labels_csv}")
        images, labels = [], []
        with open(labels_csv) as fh:
            header = fh.readline().strip()
            if header != "path,label":
                raise DataError(f"labels csv must start with 'path,label', got {header!r}")
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rel, _, label = line.partition(",")
                full = os.path.join(image_dir, rel)
                if not os.path.exists(full):
                    raise DataError(f"image not found: {full}")
                images.append(read_image_as_float(full))
                labels.append(int(label))
        if not images:
            raise DataError(f"{labels_csv}: no rows")
        return np.stack(images), np.asarray(labels), None
    raise ConfigError(f"unknown data kind {kind!r}")


def cmd_train(parser, out_dir: str, seed: int) -> int:
    config = model_config_from(parser)
    tr = parser["train"] if parser.has_section("train") else {}
    tc = TrainConfig(
        epochs=int(tr.get("epochs", 10)),
        batch_size=int(tr.get("batch_size", 16)),
        lr=float(tr.get("lr", 1e-3)),
        min_lr=float(tr.get("min_lr", 1e-5)),
        weight_decay=float(tr.get("weight_decay", 0.1)),
        warmup_epochs=int(tr.get("warmup_epochs", 5)),
        label_smoothing=float(tr.get("label_smoothing", 0.1)),
        class_weight_clamp=float(tr.get("class_weight_clamp", 10.0)),
        seed=seed,
        loss=tr.get("loss", "ce"),
        augment_sigma=float(tr.get("augment_sigma", 0.0)),
        grad_norm_alarm=(
            float(tr["grad_norm_alarm"]) if "grad_norm_alarm" in tr else None
        ),
    )
    max_steps = int(tr["max_steps"]) if "max_steps" in tr else None
    images, labels, val = _load_dataset(parser, config, seed)
    model = MetaFormer(config, seed=seed)
    os.makedirs(out_dir, exist_ok=True)
    try:
        result = train_classifier(
            model, images, labels, tc, val=val,
            log_path=os.path.join(out_dir, "train_log.csv"), max_steps=max_steps,
        )
    except NumericsError:
        report = grad_norm_monitor(model)
        worst = sorted(report.norms.items(), key=lambda kv: -kv[1])[:8]
        print("numeric abort; largest gradient norms:", file=sys.stderr)
        for name, val_ in worst:
            print(f"  {name}: {val_!r}", file=sys.stderr)
        raise
    if result.best_state is not None:
        model.load_state(result.best_state)
    ckpt.save_model(os.path.join(out_dir, "checkpoint.mxlc"), model)
    summary = f"final_train_accuracy,{result.final_train_accuracy!r}\n"
    if result.best_val_f1 is not None:
        summary += f"best_val_f1,{result.best_val_f1!r}\n"
    _write(out_dir, "train_summary.csv", summary)
    return 0


def cmd_eval(parser, out_dir: str, seed: int) -> int:
    sec = parser["eval"] if parser.has_section("eval") else {}
    metric = sec.get("metric", "auc")
    if metric not in ("auc", "f1"):
        raise ConfigError(f"unknown metric {metric!r}")
    dataset = sec.get("dataset", "dataset")
    submission = sec.get("submission", "model")

    if "scores_csv" in sec:
        path = sec["scores_csv"]
        if not os.path.exists(path):
            raise DataError(f"scores csv not found: {path}")
        with open(path) as fh:
            cs = read_case_scores_csv(fh.read(), submission, dataset)
    else:
        if "checkpoint" not in sec:
            raise ConfigError("[eval] needs either scores_csv or checkpoint")
        if not os.path.exists(sec["checkpoint"]):
            raise DataError(f"checkpoint not found: {sec['checkpoint']}")
        model = ckpt.load_model(sec["checkpoint"])
        images, labels, _ = _load_dataset(parser, model.config, seed)
        scores = predict_scores(model, images)
        ids = [f"case_{i:05d}" for i in range(len(labels))]
        cs = CaseScores(submission, dataset, ids, labels=labels, scores=scores)
        _write(out_dir, "case_scores.csv", write_case_scores_csv(cs))

    if metric == "auc":
        value = auc_macro(cs.scores, cs.labels)
    else:
        value = f1_macro(cs.scores.argmax(axis=1), cs.labels)
    _write(out_dir, "metrics.csv", f"metric,value\n{metric},{value!r}\n")
    return 0


def _read_wins_csv(path: str) -> dict[str, dict[str, int]]:
    if not os.path.exists(path):
        raise DataError(f"wins csv not found: {path}")
    per_dataset: dict[str, dict[str, int]] = {}
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "submission,dataset,wins":
            raise DataError(f"wins csv must start with 'submission,dataset,wins', got {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            sub, ds, wins = line.split(",")
            per_dataset.setdefault(ds, {})[sub] = int(wins)
    if not per_dataset:
        raise DataError(f"{path}: no rows")
    return per_dataset


def cmd_rank(parser, out_dir: str, seed: int) -> int:
    sec = parser["rank"] if parser.has_section("rank") else {}
    mode = sec.get("mode", "wins")
    if mode == "wins":
        if "wins_csv" not in sec:
            raise ConfigError("[rank] mode=wins needs wins_csv")
        wins_per_dataset = _read_wins_csv(sec["wins_csv"])
    elif mode == "scores":
        if "scores_dir" not in sec:
            raise ConfigError("[rank] mode=scores needs scores_dir")
        scores_dir = sec["scores_dir"]
        if not os.path.isdir(scores_dir):
            raise DataError(f"scores dir not found: {scores_dir}")
        comparator = sec.get("comparator", "bootstrap")
        kwargs = {}
        if comparator == "bootstrap":
            kwargs = {
                "repeats": int(sec.get("repeats", 5000)),
                "alpha": float(sec.get("alpha", 0.05)),
                "seed": seed,
            }
        elif comparator == "wilcoxon":
            kwargs = {"alpha": float(sec.get("alpha", 0.05))}
        else:
            raise ConfigError(f"unknown comparator {comparator!r}")
        grouped: dict[str, list[CaseScores]] = {}
        for name in sorted(os.listdir(scores_dir)):
            if not name.endswith(".csv"):
                continue
            stem = name[:-4]
            ds, sep, sub = stem.partition("__")
            if not sep:
                raise DataError(f"scores file {name!r} must be named <dataset>__<submission>.csv")
            with open(os.path.join(scores_dir, name)) as fh:
                grouped.setdefault(ds, []).append(read_case_scores_csv(fh.read(), sub, ds))
        if not grouped:
            raise DataError(f"{scores_dir}: no score files")
        wins_per_dataset = {
            ds: pairwise_wins(subs, comparator=comparator, **kwargs)
            for ds, subs in grouped.items()
        }
    else:
        raise ConfigError(f"unknown rank mode {mode!r}")

    datasets = sorted(wins_per_dataset)
    all_subs = sorted({s for wins in wins_per_dataset.values() for s in wins})
    ranks_per_dataset: dict[str, dict[str, float | None]] = {}
    for ds in datasets:
        ranks = normalize_ranks(wins_per_dataset[ds])
        ranks_per_dataset[ds] = {sub: ranks.get(sub) for sub in all_subs}
    global_ranks = aggregate_geomean(ranks_per_dataset)
    _write(
        out_dir,
        "rank_table.csv",
        rank_table_csv(datasets, wins_per_dataset, ranks_per_dataset, global_ranks),
    )
    return 0


def cmd_infer(parser, out_dir: str, seed: int) -> int:
    sec = parser["infer"] if parser.has_section("infer") else {}
    for key in ("checkpoint", "image"):
        if key not in sec:
            raise ConfigError(f"[infer] needs {key}")
        if not os.path.exists(sec[key]):
            raise DataError(f"{key} not found: {sec[key]}")
    model = ckpt.load_model(sec["checkpoint"])
    if model.config.head != "segment":
        raise ConfigError("infer needs a segmentation checkpoint")
    image = read_image_as_float(sec["image"])
    if "patch" in sec:
        h, _, w = sec["patch"].partition("x")
        patch_hw = (int(h), int(w))
    else:
        patch_hw = model.config.input_hw
    if patch_hw != model.config.input_hw:
        raise ConfigError(
            f"patch {patch_hw} does not match the checkpoint input {model.config.input_hw}"
        )
    if image.shape[1] < patch_hw[0] or image.shape[2] < patch_hw[1]:
        raise DataError(f"image {image.shape[1:]} smaller than patch {patch_hw}")
    overlap = float(sec.get("overlap", 0.25))

    def predict(patch: np.ndarray) -> np.ndarray:
        return model.forward_segment(Tensor(patch[None])).data[0]

    logits = sliding_window_infer(predict, image, patch_hw, overlap=overlap)
    mask = logits.argmax(axis=0).astype(np.uint8)
    os.makedirs(out_dir, exist_ok=True)
    write_pgm(os.path.join(out_dir, "mask.pgm"), mask)
    if sec.get("save_logits", "false").lower() in ("1", "true", "yes"):
        write_raw_f64(os.path.join(out_dir, "logits.f64"), logits)
    return 0


_COMMANDS = {
    "flops": cmd_flops,
    "params": cmd_params,
    "train": cmd_train,
    "eval": cmd_eval,
    "rank": cmd_rank,
    "infer": cmd_infer,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mixerlab",
        description="token-mixer lab: complexity sweeps, training, evaluation, ranking, inference",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="INI config path")
        p.add_argument("--seed", type=int, default=None, help="overrides [run] seed")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument(
            "--threads", type=int, default=1,
            help="cap for op-internal parallelism (current ops are single-threaded)",
        )
    args = parser.parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config, args.command)
        seed = args.seed
        if seed is None:
            seed = cfg.getint("run", "seed", fallback=0)
        _write(args.out, "resolved_config.ini", resolved_ini(cfg, seed, args.threads))
        return _COMMANDS[args.command](cfg, args.out, seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NumericsError, CapacityError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 4
    except MixerlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
