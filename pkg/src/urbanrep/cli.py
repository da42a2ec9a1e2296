"""Command-line pipeline: synthesize, build, pre-train, prompt, evaluate.

Every command reads declared inputs and writes declared outputs; the
resolved configuration hash is embedded in each artifact. Failures exit
with status 1 and a single-line ``error: ...`` message on stderr.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import torch

from . import config as cfgmod
from .errors import ConfigError, UrbanRepError
from .graph import GraphConfig, load_graph, load_image_features, load_task, save_graph, validate
from .harness import few_shot_eval, kfold_eval, save_report, zero_shot_eval
from .pretrain import pretrain, load_model, save_model, write_loss_log
from .prompt import load_prompt, save_prompt
from .sources import SOURCES, compute_embeddings, load_embeddings, save_embeddings, tune_prompt_on_graph
from .synth import synth_city
from .transr import load_transr, save_transr, train_transr


def _city_paths(city_dir: str | Path):
    city = Path(city_dir)
    return {
        "nodes": city / "nodes.csv",
        "edges": city / "edges.csv",
        "flows": city / "flows.csv",
        "images": city / "images.csv",
    }


def _load_city_graph(city_dir, config, strict=True):
    paths = _city_paths(city_dir)
    flows = paths["flows"] if paths["flows"].exists() else None
    return load_graph(
        paths["nodes"],
        paths["edges"],
        flows,
        GraphConfig(intervals=int(config["synth"]["intervals"])),
        strict=strict,
    )


def _load_city_images(city_dir):
    path = _city_paths(city_dir)["images"]
    return load_image_features(path) if path.exists() else None


def cmd_synth(args, config, rhash):
    spec = cfgmod.synth_spec(config)
    if args.grid:
        rows, _, cols = args.grid.partition("x")
        try:
            spec_dict = {**config["synth"], "rows": int(rows), "cols": int(cols)}
        except ValueError:
            raise ConfigError(f"--grid must look like 3x3, got {args.grid!r}") from None
        spec = cfgmod.synth_spec({**config, "synth": spec_dict})
    paths = synth_city(spec, int(config["seed"]), args.out, config_hash=rhash)
    print(f"synth: wrote city bundle under {paths.root} (config_hash={rhash})")
    return 0


def cmd_build_graph(args, config, rhash):
    graph = _load_city_graph(args.city, config, strict=True)
    out = Path(args.out or (Path(args.city) / "graph"))
    out.mkdir(parents=True, exist_ok=True)
    save_graph(
        graph,
        out / "nodes.csv",
        out / "edges.csv",
        out / "flows.csv" if graph.flows else None,
        header_comment=f"config_hash={rhash}",
    )
    report = validate(graph)
    (out / "validation.txt").write_text(f"# config_hash={rhash}\n{report}\n", encoding="utf-8")
    print(
        f"build-graph: {len(graph.nodes)} nodes, {len(graph.edges)} edges, "
        f"{len(graph.regions)} regions -> {out}"
    )
    return 0


def cmd_validate(args, config, rhash):
    graph = _load_city_graph(args.city, config, strict=False)
    report = validate(graph)
    print(report)
    return 0 if report.ok else 1


def cmd_init_kg(args, config, rhash):
    graph = _load_city_graph(args.city, config)
    tcfg = cfgmod.transr_config(config)
    if args.epochs is not None:
        tcfg = type(tcfg)(**{**tcfg.__dict__, "epochs": args.epochs})
    warm = load_transr(args.warm_start) if args.warm_start else None
    state = train_transr(graph, tcfg, int(config["seed"]), warm_start=warm)
    save_transr(state, args.out, extra_meta={"config_hash": rhash, "seed": config["seed"]})
    first = state.loss_history[0] if state.loss_history else float("nan")
    last = state.loss_history[-1] if state.loss_history else float("nan")
    print(f"init-kg: trained {tcfg.epochs} epochs, loss {first:.4f} -> {last:.4f}, wrote {args.out}")
    return 0


def _apply_toggles(config, args):
    pre = dict(config["pretrain"])
    if getattr(args, "no_spatial", False):
        pre["spatial"] = False
    if getattr(args, "no_imagery", False):
        pre["imagery"] = False
    if getattr(args, "no_flow", False):
        pre["flow"] = False
    if getattr(args, "no_fusion", False):
        pre["fusion"] = False
    if getattr(args, "random_init", False):
        pre["init"] = "random"
    if getattr(args, "fusion_only", False):
        pre["fusion_only"] = True
    if getattr(args, "epochs", None) is not None:
        pre["epochs"] = args.epochs
    return {**config, "pretrain": pre}


def cmd_pretrain(args, config, rhash):
    config = _apply_toggles(config, args)
    rhash = cfgmod.run_hash(config)
    pcfg = cfgmod.pretrain_config(config)
    graph = _load_city_graph(args.city, config)
    images = _load_city_images(args.city) if pcfg.imagery else None
    transr = load_transr(args.transr) if args.transr else None
    if pcfg.init == "transr" and transr is None:
        raise ConfigError("pretrain needs --transr CKPT (or --random-init)")
    state, rows = pretrain(
        graph, pcfg, int(config["seed"]), transr=transr, images=images
    )
    save_model(state, args.out, extra_meta={"run_hash": rhash})
    if args.loss_log:
        write_loss_log(args.loss_log, rows, run_hash=rhash)
    total = rows[-1]["total"] if rows else float("nan")
    print(f"pretrain: {pcfg.epochs} epochs, final total loss {total:.6g}, wrote {args.out}")
    return 0


def _state_for_embedding(args, graph, config):
    state = load_model(args.model) if args.model else None
    if state is not None and args.transr:
        from .pretrain import with_feature_table

        state = with_feature_table(state, load_transr(args.transr), graph)
    return state


def cmd_embed(args, config, rhash):
    graph = _load_city_graph(args.city, config)
    state = _state_for_embedding(args, graph, config)
    prompt_model = load_prompt(args.prompt) if args.prompt else None
    emb = compute_embeddings(
        graph,
        args.source,
        state=state,
        preset_name=args.preset,
        prompt_model=prompt_model,
        seed=int(config["seed"]),
        dim=int(config["pretrain"]["dim"]),
    )
    save_embeddings(args.out, emb, run_hash=rhash)
    print(f"embed: source={emb.source} shape={emb.matrix.shape} -> {args.out}")
    return 0


def cmd_prompt_manual(args, config, rhash):
    args.source = "gurp+manual"
    args.prompt = None
    args.transr = getattr(args, "transr", None)
    return cmd_embed(args, config, rhash)


def cmd_prompt_tune(args, config, rhash):
    graph = _load_city_graph(args.city, config)
    state = load_model(args.model)
    labels = load_task(args.task)
    pcfg = cfgmod.prompt_config(config)
    if args.epochs is not None:
        pcfg = type(pcfg)(
            **{**{f: getattr(pcfg, f) for f in pcfg.__dataclass_fields__}, "epochs": args.epochs}
        )
    result = tune_prompt_on_graph(graph, labels, state, pcfg, int(config["seed"]))
    save_prompt(
        result.model,
        args.out,
        extra_meta={
            "run_hash": rhash,
            "task": str(args.task),
            "backbone_hash": state.parameter_hash(),
            "training_mse": result.training_mse,
            "baseline_mse": result.baseline_mse,
        },
    )
    print(
        f"prompt-tune: {pcfg.epochs} epochs, training MSE {result.training_mse:.6g} "
        f"(affine-head baseline {result.baseline_mse:.6g}), wrote {args.out}"
    )
    return 0


def cmd_eval(args, config, rhash):
    ev = config["eval"]
    alpha = float(ev["alpha"]) if args.alpha is None else args.alpha
    seed = int(config["seed"])
    if args.protocol == "zero-shot":
        if not (args.src_emb and args.src_task and args.dst_emb and args.dst_task):
            raise ConfigError("zero-shot needs --src-emb --src-task --dst-emb --dst-task")
        report = zero_shot_eval(
            load_embeddings(args.src_emb),
            load_task(args.src_task),
            load_embeddings(args.dst_emb),
            load_task(args.dst_task),
            alpha=alpha,
            standardize=bool(ev["standardize"]),
        )
    else:
        if not (args.emb and args.task):
            raise ConfigError(f"{args.protocol} needs --emb and --task")
        emb = load_embeddings(args.emb)
        labels = load_task(args.task)
        if args.protocol == "kfold":
            report = kfold_eval(
                emb, labels,
                k=int(ev["k"]) if args.k is None else args.k,
                seed=seed, alpha=alpha, standardize=bool(ev["standardize"]),
            )
        else:
            report = few_shot_eval(
                emb, labels,
                ratio=float(ev["ratio"]) if args.ratio is None else args.ratio,
                repeats=int(ev["repeats"]) if args.repeats is None else args.repeats,
                seed=seed, alpha=alpha, standardize=bool(ev["standardize"]),
            )
    if args.out:
        save_report(report, args.out, run_hash=rhash)
    print(report.table())
    return 0


def cmd_report(args, config, rhash):
    lines = []
    for path in args.inputs:
        meta = {}
        aggregate = None
        with open(path, encoding="utf-8") as fh:
            for row in csv.reader(fh):
                if not row:
                    continue
                if row[0].startswith("#"):
                    for token in row[0].lstrip("# ").split():
                        if "=" in token:
                            k, _, v = token.partition("=")
                            meta[k] = v
                    continue
                if row[0] == "aggregate":
                    aggregate = row
        if aggregate is None:
            raise ConfigError(f"{path}: no aggregate row found")
        r2 = aggregate[5] if len(aggregate) > 5 and aggregate[5] else "undefined"
        lines.append(
            f"{meta.get('protocol', '?'):>9}  {meta.get('source', '?'):<24} "
            f"MAE={float(aggregate[3]):>12.4f}  RMSE={float(aggregate[4]):>12.4f}  R2={r2}"
        )
    table = "\n".join(["protocol   source                   metrics", "-" * 78] + lines)
    print(table)
    if args.out:
        Path(args.out).write_text(f"# config_hash={rhash}\n{table}\n", encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="urbanrep",
        description="Urban region graph embeddings: synthesis, pre-training, prompting, evaluation.",
    )
    parser.add_argument("--config", help=f"YAML config file (default ${cfgmod.ENV_CONFIG})")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set pretrain.epochs=50")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--threads", type=int, help="torch thread count (default 1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic city bundle")
    p.add_argument("--grid", help="rows x cols, e.g. 3x3")
    p.add_argument("--out", required=True)

    p = sub.add_parser("build-graph", help="load, validate and normalize a city's files")
    p.add_argument("--city", required=True)
    p.add_argument("--out")

    p = sub.add_parser("validate", help="report every schema violation in a city's files")
    p.add_argument("--city", required=True)

    p = sub.add_parser("init-kg", help="train the knowledge-graph feature initialization")
    p.add_argument("--city", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--warm-start", help="existing TransR checkpoint to seed shared ids from")

    p = sub.add_parser("pretrain", help="multi-view self-supervised pre-training")
    p.add_argument("--city", required=True)
    p.add_argument("--transr")
    p.add_argument("--out", required=True)
    p.add_argument("--loss-log")
    p.add_argument("--epochs", type=int)
    p.add_argument("--no-spatial", action="store_true")
    p.add_argument("--no-imagery", action="store_true")
    p.add_argument("--no-flow", action="store_true")
    p.add_argument("--no-fusion", action="store_true")
    p.add_argument("--random-init", action="store_true")
    p.add_argument("--fusion-only", action="store_true")

    p = sub.add_parser("embed", help="export a region embedding matrix")
    p.add_argument("--city", required=True)
    p.add_argument("--model")
    p.add_argument("--transr", help="swap in this city's feature table (cross-city transfer)")
    p.add_argument("--source", required=True, choices=SOURCES)
    p.add_argument("--preset")
    p.add_argument("--prompt")
    p.add_argument("--out", required=True)

    p = sub.add_parser("prompt-manual", help="embed with a manually-designed prompt preset")
    p.add_argument("--city", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--transr")
    p.add_argument("--preset", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("prompt-tune", help="fit the task-learnable prompt on a frozen backbone")
    p.add_argument("--city", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("eval", help="score an embedding matrix on a task")
    p.add_argument("--protocol", required=True, choices=["kfold", "few-shot", "zero-shot"])
    p.add_argument("--emb")
    p.add_argument("--task")
    p.add_argument("--src-emb")
    p.add_argument("--src-task")
    p.add_argument("--dst-emb")
    p.add_argument("--dst-task")
    p.add_argument("--k", type=int)
    p.add_argument("--ratio", type=float)
    p.add_argument("--repeats", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--out")

    p = sub.add_parser("report", help="combine eval reports into one table")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out")
    return parser


HANDLERS = {
    "synth": cmd_synth,
    "build-graph": cmd_build_graph,
    "validate": cmd_validate,
    "init-kg": cmd_init_kg,
    "pretrain": cmd_pretrain,
    "embed": cmd_embed,
    "prompt-manual": cmd_prompt_manual,
    "prompt-tune": cmd_prompt_tune,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = cfgmod.load_run_config(args.config)
        if args.set:
            config = cfgmod.apply_overrides(config, args.set)
        if args.seed is not None:
            config["seed"] = args.seed
        if args.threads is not None:
            config["threads"] = args.threads
        torch.set_num_threads(int(config["threads"]))
        rhash = cfgmod.run_hash(config)
        return HANDLERS[args.command](args, config, rhash)
    except (UrbanRepError, ValueError, OSError) as exc:
        message = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
