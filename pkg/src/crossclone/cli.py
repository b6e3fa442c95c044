"""Command-line entry points: corpus generation, training, evaluation,
embedding export, and 2-D plotting.

Every command is deterministic given identical inputs and seeds. Exit codes:
0 ok, 2 usage, 3 config, 4 data, 5 numeric; error paths print one
machine-parsable ``error[kind]: message`` line to stderr.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .cloneloss import LossWeights
from .corpus import gen_synthetic, load_corpus, save_corpus
from .errors import ConfigError, CrossCloneError, DataError, NumericError
from .retrieval import (
    OneHotProblemEncoder,
    evaluate,
    export_embeddings,
    load_embeddings,
)
from .trainer import ScheduleConfig, checkpoint_load, checkpoint_save, run_training

CONFIG_ENV_VAR = "CROSSCLONE_CONFIG"

DEFAULT_CONFIG = """\
[model]
d_model = 64
n_layers = 2
n_heads = 4
max_len = 512
dropout = 0.1

[csp]
steps = 300
window_size = 5
queue_size = 128
tau = 0.05
negatives = 16

[adversarial]
steps = 300
mu = 0.01
alpha = 1.0
beta = 1.0
tau_clone = 0.05
source_lang = dA
target_lang = dB

[train]
batch_size = 24
lr = 0.001
adversarial_lr = 0.0005
clone_pairs = 0
head_lr_scale = 0.3
weight_decay = 0.01
seed = 0
log_every = 1
checkpoint_every = 0
"""

_CONFIG_SCHEMA = {
    "model": {
        "d_model": int,
        "n_layers": int,
        "n_heads": int,
        "max_len": int,
        "dropout": float,
    },
    "csp": {
        "steps": int,
        "window_size": int,
        "queue_size": int,
        "tau": float,
        "negatives": int,
    },
    "adversarial": {
        "steps": int,
        "mu": float,
        "alpha": float,
        "beta": float,
        "tau_clone": float,
        "source_lang": str,
        "target_lang": str,
    },
    "train": {
        "batch_size": int,
        "lr": float,
        "adversarial_lr": float,
        "clone_pairs": int,
        "head_lr_scale": float,
        "weight_decay": float,
        "seed": int,
        "log_every": int,
        "checkpoint_every": int,
    },
}


class UsageError(Exception):
    """Bad flag combination caught after argparse."""


def load_config(path: str | None) -> dict:
    """Read the layered key-value config: defaults, then the given file.

    The file may come from --config or the CROSSCLONE_CONFIG environment
    variable; unknown sections or keys are config errors.
    """
    parser = configparser.ConfigParser()
    parser.read_string(DEFAULT_CONFIG)
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR) or None
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc

    values: dict = {}
    for section in parser.sections():
        if section not in _CONFIG_SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        schema = _CONFIG_SCHEMA[section]
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in schema:
                raise ConfigError(f"unknown config key {key!r} in section [{section}]")
            try:
                values[section][key] = schema[key](raw)
            except ValueError as exc:
                raise ConfigError(
                    f"config key [{section}] {key} = {raw!r} is not a valid {schema[key].__name__}"
                ) from exc
    return values


def schedule_from_config(config: dict) -> ScheduleConfig:
    csp, adv, train = config["csp"], config["adversarial"], config["train"]
    return ScheduleConfig(
        csp_steps=csp["steps"],
        adversarial_steps=adv["steps"],
        batch_size=train["batch_size"],
        lr=train["lr"],
        adversarial_lr=train["adversarial_lr"],
        weight_decay=train["weight_decay"],
        weights=LossWeights(
            alpha=adv["alpha"], beta=adv["beta"], tau_clone=adv["tau_clone"]
        ),
        window_size=csp["window_size"],
        queue_size=csp["queue_size"],
        csp_negatives=csp["negatives"],
        csp_tau=csp["tau"],
        mu=adv["mu"],
        source_lang=adv["source_lang"],
        target_lang=adv["target_lang"],
        clone_pairs=train["clone_pairs"],
        head_lr_scale=train["head_lr_scale"],
        checkpoint_every=train["checkpoint_every"],
        log_every=train["log_every"],
    )


def _sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(payload: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _make_embedder(args):
    if getattr(args, "oracle", False):
        corpus = load_corpus(args.corpus)
        return OneHotProblemEncoder([p.problem_id for p in corpus])
    if not args.checkpoint:
        raise UsageError("either --checkpoint or --oracle is required")
    return checkpoint_load(args.checkpoint)


def cmd_gen(args) -> int:
    dialects = [d for d in args.dialects.split(",") if d]
    if len(dialects) < 2:
        raise UsageError("--dialects needs at least 2 comma-separated tags")
    programs = gen_synthetic(
        n_problems=args.problems,
        dialects=dialects,
        seed=args.seed,
        variants_per_dialect=args.variants,
        lines_per_snippet=args.lines_per_snippet,
    )
    save_corpus(programs, args.out)
    print(f"wrote {len(programs)} programs to {args.out}")
    return 0


def cmd_train(args) -> int:
    programs = load_corpus(args.corpus)
    config = load_config(args.config)
    schedule = schedule_from_config(config)
    seed = config["train"]["seed"] if args.seed is None else args.seed
    if args.no_csp:
        schedule.enable_csp = False
    if args.no_dal:
        schedule.enable_dal = False
        schedule.weights = LossWeights(
            alpha=0.0, beta=schedule.weights.beta, tau_clone=schedule.weights.tau_clone
        )
    if args.no_cycle:
        schedule.enable_cycle = False
        schedule.weights = LossWeights(
            alpha=schedule.weights.alpha, beta=0.0, tau_clone=schedule.weights.tau_clone
        )

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_path = out_dir / "checkpoint.ckpt"
    metrics_path = out_dir / "metrics.jsonl"

    state = checkpoint_load(args.init_from) if args.init_from else None
    model = config["model"]
    with open(metrics_path, "w", encoding="utf-8") as metrics_out:
        state = run_training(
            programs,
            schedule,
            seed=seed,
            metrics_out=metrics_out,
            state=state,
            stage=args.stage,
            checkpoint_path=checkpoint_path if schedule.checkpoint_every else None,
            d_model=model["d_model"],
            n_layers=model["n_layers"],
            n_heads=model["n_heads"],
            max_len=model["max_len"],
            dropout=model["dropout"],
        )
    checkpoint_save(state, checkpoint_path)

    manifest = {
        "tool": "crossclone",
        "version": __version__,
        "command": "train",
        "stage": args.stage,
        "seed": seed,
        "config": config,
        "ablations": {
            "no_csp": args.no_csp,
            "no_dal": args.no_dal,
            "no_cycle": args.no_cycle,
        },
        "inputs": {
            "corpus": {"path": str(args.corpus), "sha256": _sha256_file(args.corpus)},
            "init_from": str(args.init_from) if args.init_from else None,
        },
        "outputs": {
            "checkpoint": checkpoint_path.name,
            "metrics": metrics_path.name,
        },
        "created_utc": datetime.now(timezone.utc).isoformat(),
    }
    _write_json(manifest, out_dir / "manifest.json")
    print(f"trained through stage={args.stage}; artifacts in {out_dir}")
    return 0


def cmd_eval(args) -> int:
    programs = load_corpus(args.corpus)
    embedder = _make_embedder(args)
    report = evaluate(
        programs,
        embedder,
        query_lang=args.query_lang,
        cand_lang=args.cand_lang,
        mode=args.mode,
    )
    if args.out:
        _write_json(report, args.out)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_embed(args) -> int:
    programs = load_corpus(args.corpus)
    embedder = _make_embedder(args)
    export_embeddings(programs, embedder, args.out)
    print(f"wrote {len(programs)} embeddings to {args.out}")
    return 0


def project_2d(matrix: np.ndarray, method: str = "tsne", seed: int = 0) -> np.ndarray:
    """Reduce embedding rows to 2-D for plotting (display only).

    ``pca`` is exact and maps duplicate rows to identical points; ``tsne``
    delegates to scikit-learn with a fixed random state.
    """
    if matrix.ndim != 2 or matrix.shape[0] < 2:
        raise DataError("projection needs at least two embedding rows")
    if matrix.shape[1] == 2:
        return matrix.copy()
    if method == "pca":
        centered = matrix - matrix.mean(axis=0, keepdims=True)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        return centered @ vt[:2].T
    if method == "tsne":
        from sklearn.manifold import TSNE

        n = matrix.shape[0]
        perplexity = max(2.0, min(30.0, (n - 1) / 3.0))
        projector = TSNE(
            n_components=2, random_state=seed, init="pca", perplexity=perplexity
        )
        return projector.fit_transform(matrix)
    raise ConfigError(f"unknown projection method {method!r}")


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = load_embeddings(args.embeddings)
    if not records:
        raise DataError(f"no embeddings in {args.embeddings}")
    matrix = np.array([r.values for r in records], dtype=np.float64)
    points = project_2d(matrix, method=args.method, seed=args.seed)

    fig, ax = plt.subplots(figsize=(7, 6))
    if args.color_by == "language":
        languages = sorted({r.language for r in records})
        cmap = plt.get_cmap("tab10")
        for i, lang in enumerate(languages):
            idx = [j for j, r in enumerate(records) if r.language == lang]
            ax.scatter(
                points[idx, 0], points[idx, 1], s=18, color=cmap(i % 10), label=lang
            )
        ax.legend(title="language")
    else:
        problems = sorted({r.problem_id for r in records})
        problem_index = {pid: i for i, pid in enumerate(problems)}
        colors = [problem_index[r.problem_id] for r in records]
        ax.scatter(points[:, 0], points[:, 1], s=18, c=colors, cmap="tab20")
    ax.set_title(f"{args.method} projection, colored by {args.color_by}")
    fig.tight_layout()
    fig.savefig(args.out, dpi=150)
    plt.close(fig)
    print(f"wrote plot to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossclone",
        description="Cross-language code clone retrieval: train, evaluate, export.",
    )
    parser.add_argument("--version", action="version", version=f"crossclone {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a synthetic multi-dialect corpus")
    p_gen.add_argument("--problems", type=int, required=True)
    p_gen.add_argument("--dialects", required=True, help="comma-separated dialect tags")
    p_gen.add_argument("--variants", type=int, default=1, help="solutions per dialect per problem")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--lines-per-snippet", type=int, default=3)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=cmd_gen)

    p_train = sub.add_parser("train", help="run the training pipeline")
    p_train.add_argument("--corpus", required=True)
    p_train.add_argument("--config", default=None, help=f"config file (or ${CONFIG_ENV_VAR})")
    p_train.add_argument("--out-dir", required=True)
    p_train.add_argument("--stage", choices=("csp", "adversarial", "all"), default="all")
    p_train.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_train.add_argument("--init-from", default=None, help="resume from a checkpoint")
    p_train.add_argument("--no-csp", action="store_true")
    p_train.add_argument("--no-dal", action="store_true")
    p_train.add_argument("--no-cycle", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="score clone retrieval with MAP")
    p_eval.add_argument("--corpus", required=True)
    p_eval.add_argument("--checkpoint", default=None)
    p_eval.add_argument("--oracle", action="store_true", help="use the one-hot problem oracle")
    p_eval.add_argument("--query-lang", required=True)
    p_eval.add_argument("--cand-lang", default=None)
    p_eval.add_argument("--mode", choices=("cross", "mono"), default="cross")
    p_eval.add_argument("--out", default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_embed = sub.add_parser("embed", help="export program embeddings")
    p_embed.add_argument("--corpus", required=True)
    p_embed.add_argument("--checkpoint", default=None)
    p_embed.add_argument("--oracle", action="store_true")
    p_embed.add_argument("--out", required=True)
    p_embed.set_defaults(func=cmd_embed)

    p_plot = sub.add_parser("plot", help="2-D scatter of exported embeddings")
    p_plot.add_argument("--embeddings", required=True)
    p_plot.add_argument("--out", required=True)
    p_plot.add_argument("--color-by", choices=("language", "problem"), default="language")
    p_plot.add_argument("--method", choices=("tsne", "pca"), default="tsne")
    p_plot.add_argument("--seed", type=int, default=0)
    p_plot.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error[usage]: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return 4
    except NumericError as exc:
        print(f"error[numeric]: {exc}", file=sys.stderr)
        return 5
    except CrossCloneError as exc:
        print(f"error[internal]: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
