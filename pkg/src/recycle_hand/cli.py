"""Command-line entry point: ``recycle-hand <command> [options]``.

Training-style commands read one YAML config (``--config``); every config
field can also be set by a flag named after it (``batch_size`` ->
``--batch-size``, ``weights.gamma`` -> ``--gamma``). Flags win over the file,
the file wins over built-in defaults.

Exit codes: 0 success, 2 invalid config or arguments, 3 numerical failure.
"""
import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from .camera import BehindCameraError
from .dataset import desk_splits, generate_dataset, load_background_corpus, load_split
from .estimator import (
    Estimator, EstimatorConfig, finite_diff_check, load_checkpoint,
    stratified_coords,
)
from .hand_model import load_template
from .losses import NumericalError
from .renderer import BackgroundCorpus, render_synthetic, write_png
from .trainer import (
    ConfigError, Runtime, TrainConfig, compute_step, evaluate, kink_signature, render_seed,
    run_ablation, run_synthetic_only, synthesize_batch, train,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
log = logging.getLogger("recycle_hand")


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


# ----------------------------------------------------------------------------
# config flags


def _parse_bool(text):
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _tuple_parser(example):
    kind = type(example[0]) if example else float

    def parse(text):
        return [kind(x) for x in str(text).split(",")]

    return parse


def _flag_specs():
    """(dest, config path, parser) for every leaf of TrainConfig."""
    specs = []
    defaults = TrainConfig()
    for f in fields(TrainConfig):
        value = getattr(defaults, f.name)
        if f.name in ("weights", "estimator"):
            for sub in fields(type(value)):
                specs.append((sub.name, (f.name, sub.name), getattr(value, sub.name)))
        else:
            specs.append((f.name, (f.name,), value))
    out = []
    for dest, path, example in specs:
        if isinstance(example, bool):
            parser = _parse_bool
        elif isinstance(example, (tuple, list)):
            parser = _tuple_parser(example)
        elif isinstance(example, (int, float)):
            parser = type(example)
        else:
            parser = str
        out.append((dest, path, parser))
    return out


def _add_config_flags(p, require_run_flags=False):
    p.add_argument("--config", help="YAML config file")
    g = p.add_argument_group("config overrides")
    for dest, path, parser in _flag_specs():
        if dest in ("seed", "out_dir"):
            continue
        g.add_argument("--" + dest.replace("_", "-"), dest="cfg_" + dest, type=parser,
                       default=None, metavar=dest.upper(), help=f"override {'.'.join(path)}")
    p.add_argument("--seed", type=int, required=require_run_flags, default=None)
    p.add_argument("--out-dir", required=require_run_flags, default=None)


def build_config(args):
    """Defaults <- config file <- flags."""
    base = TrainConfig().to_dict()
    if getattr(args, "config", None):
        try:
            loaded = yaml.safe_load(Path(args.config).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.config}: top level must be a mapping")
        for key, value in loaded.items():
            if key in ("weights", "estimator") and isinstance(value, dict):
                unknown = set(value) - set(base[key])
                if unknown:
                    raise ConfigError(f"unknown {key} keys: {sorted(unknown)}")
                base[key].update(value)
            else:
                base[key] = value
    for dest, path, _ in _flag_specs():
        value = getattr(args, "cfg_" + dest, None) if dest != "seed" else getattr(args, "seed", None)
        if value is None:
            continue
        node = base
        for key in path[:-1]:
            node = node[key]
        node[path[-1]] = value
    return TrainConfig.from_dict(base)


# ----------------------------------------------------------------------------
# shared setup


def _runtime(cfg, template, corpus=None):
    return Runtime(Estimator(template, cfg.estimator), corpus)


def _load_data(cfg):
    if not cfg.dataset:
        raise ConfigError("config needs 'dataset' (a directory written by generate-dataset)")
    root = Path(cfg.dataset)
    if not (root / "manifest.json").is_file():
        raise ConfigError(f"{root} is not a dataset directory (no manifest.json)")
    train_set = load_split(root, "train")
    eval_set = load_split(root, "eval")
    if cfg.background_manifest:
        w, h = cfg.estimator.input_size
        corpus = BackgroundCorpus.from_manifest(cfg.background_manifest, (w, h))
    else:
        corpus = load_background_corpus(root, "recycle")
    return train_set, eval_set, corpus


def _write_config(out_dir, cfg):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def _estimator_from_checkpoint(path, template):
    theta, layout, header = load_checkpoint(path)
    if header["template_hash"] != template.hash:
        raise ConfigError(f"{path} was trained with a different hand template")
    est_cfg = EstimatorConfig.from_dict(header["extra"]["estimator"])
    est = Estimator(template, est_cfg)
    if est.layout != layout:
        raise ConfigError(f"{path}: parameter layout does not match its estimator config")
    return est, theta


# ----------------------------------------------------------------------------
# commands


def cmd_generate_dataset(args):
    template = load_template()
    path = generate_dataset(args.out_dir, template, n_train=args.n_train, n_eval=args.n_eval,
                            seed=args.seed)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_train(args):
    cfg = build_config(args)
    template = load_template()
    train_set, eval_set, corpus = _load_data(cfg)
    runtime = _runtime(cfg, template, corpus)
    result = train(cfg, train_set, eval_set, runtime, out_dir=args.out_dir)
    _dump_recycled(args.out_dir, result.theta, train_set, runtime, cfg, args.dump_renders)
    print(result.report.table("Trained"), end="")
    print(f"checkpoint sha256 {result.checkpoint_hash}")
    return EXIT_OK


def _dump_recycled(out_dir, theta, train_set, runtime, cfg, n):
    """Recycled images of the first ``n`` training samples under the final parameters."""
    n = min(n, len(train_set))
    if n <= 0 or runtime.corpus is None:
        return
    batch = train_set.subset(range(n))
    out = runtime.estimator.forward(batch.images, theta)
    imgs = synthesize_batch(out, batch, runtime, cfg, step=0)
    d = Path(out_dir) / "renders"
    d.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        write_png(d / f"{batch.ids[i]}_input.png", batch.images[i])
        write_png(d / f"{batch.ids[i]}_recycled.png", imgs[i])


def cmd_eval(args):
    template = load_template()
    est, theta = _estimator_from_checkpoint(args.checkpoint, template)
    data = load_split(args.dataset, args.split)
    rep = evaluate(est, theta, data, inject_ground_truth=args.inject_ground_truth, f_on=args.f_on)
    print(rep.table(Path(args.checkpoint).parent.name or "Model"), end="")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(rep.to_csv())
        (out / "metrics.txt").write_text(rep.table())
    return EXIT_OK


def cmd_render(args):
    template = load_template()
    data = load_split(args.dataset, args.split)
    if args.background_manifest:
        size = (data.images.shape[2], data.images.shape[1])
        corpus = BackgroundCorpus.from_manifest(args.background_manifest, size)
    else:
        corpus = load_background_corpus(args.dataset, "recycle")
    if args.indices:
        indices = [int(i) for i in args.indices.split(",")]
    else:
        indices = list(range(min(4, len(data))))
    est = theta = None
    if args.checkpoint:
        est, theta = _estimator_from_checkpoint(args.checkpoint, template)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in indices:
        if not 0 <= i < len(data):
            raise ConfigError(f"index {i} outside split of size {len(data)}")
        mc = data.intrinsics[i]
        if est is None:
            verts = data.vertices[i]
        else:
            verts = est.forward(data.images[i:i + 1], theta).fine_vertices[0]
        img = render_synthetic(verts, template, mc, corpus, render_seed(args.seed, 0, i))
        write_png(out / f"{data.ids[i]}_render.png", img)
        write_png(out / f"{data.ids[i]}_input.png", data.images[i])
    print(f"wrote {len(indices)} renders to {out}")
    return EXIT_OK


def cmd_ablate(args):
    cfg = build_config(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    template = load_template()
    train_set, eval_set, corpus = _load_data(cfg)
    _write_config(args.out_dir, cfg)
    table = run_ablation(cfg, seeds, train_set, eval_set, _runtime(cfg, template, corpus),
                         out_dir=args.out_dir)
    print(table.format(), end="")
    return EXIT_OK


def cmd_synthetic_only(args):
    cfg = build_config(args)
    template = load_template()
    train_set, eval_set, corpus = _load_data(cfg)
    _write_config(args.out_dir, cfg)
    rep = run_synthetic_only(cfg, train_set, eval_set, _runtime(cfg, template, corpus),
                             out_dir=args.out_dir)
    print(rep.format(), end="")
    return EXIT_OK


def gradient_check(cfg, seeds, eps=1e-5, batch_size=2, per_block=3, template=None):
    """Worst finite-difference error of the full batch objective over ``seeds``.

    Each seed draws its own initialization, batch and probe coordinates; the
    recycled images are held fixed while probing (they carry no gradient).
    """
    template = template or load_template()
    results = []
    for seed in seeds:
        train_set, _, corpus = desk_splits(template, batch_size, 1, seed,
                                           background_counts={"train": 2, "eval": 1, "recycle": 4})
        runtime = _runtime(cfg, template, corpus)
        theta = runtime.estimator.init_params(seed)
        _, _, synth = compute_step(train_set, theta, cfg, runtime, 0)

        def value_and_grad(th):
            bd, g, _ = compute_step(train_set, th, cfg, runtime, 0, synthetic_images=synth)
            return bd.total, g

        rng = np.random.default_rng(seed)
        sig = kink_signature(train_set, cfg, runtime, synth) if cfg.weights.norm == "L1" else None
        coords = stratified_coords(runtime.estimator.layout, per_block, rng)
        results.append(finite_diff_check(value_and_grad, theta, eps=eps, coords=coords, rng=rng,
                                         kink_signature=sig, details=True))
    return results


def cmd_grad_check(args):
    cfg = build_config(args)
    seeds = range(args.seed or 0, (args.seed or 0) + args.n_seeds)
    results = gradient_check(cfg, seeds, eps=args.eps, batch_size=args.batch)
    worst = max(r[0] for r in results)
    for s, (err, checked, resampled) in zip(seeds, results):
        log.info("seed %d: max rel err %.3e over %d coords (%d resampled)", s, err, checked,
                 resampled)
    status = "PASS" if worst < args.tol else "FAIL"
    print(f"{status} grad-check norm={cfg.weights.norm} seeds={len(results)} "
          f"max_rel_err={worst:.3e} tol={args.tol:g}")
    return EXIT_OK if worst < args.tol else EXIT_NUMERICAL


# ----------------------------------------------------------------------------


def make_parser():
    common = _ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                        help="log progress")
    p = _ArgumentParser(prog="recycle-hand", description=__doc__.splitlines()[0],
                        parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    def add(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    g = add("generate-dataset", help="write a procedural dataset directory")
    g.add_argument("--out-dir", required=True)
    g.add_argument("--n-train", type=int, default=512)
    g.add_argument("--n-eval", type=int, default=128)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate_dataset)

    t = add("train", help="train one model")
    _add_config_flags(t, require_run_flags=True)
    t.add_argument("--dump-renders", type=int, default=4,
                   help="recycled images of this many training samples to save")
    t.set_defaults(func=cmd_train)

    e = add("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", default="eval")
    e.add_argument("--f-on", choices=("vertices", "keypoints"), default="vertices")
    e.add_argument("--inject-ground-truth", action="store_true",
                   help="score the targets themselves (checks the metric plumbing)")
    e.add_argument("--out-dir")
    e.set_defaults(func=cmd_eval)

    r = add("render", help="render ground-truth or predicted meshes to PNG")
    r.add_argument("--dataset", required=True)
    r.add_argument("--split", default="train")
    r.add_argument("--indices", help="comma-separated sample indices (default: first 4)")
    r.add_argument("--checkpoint", help="render this model's predictions instead of ground truth")
    r.add_argument("--background-manifest")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out-dir", required=True)
    r.set_defaults(func=cmd_render)

    a = add("ablate", help="Original / +Recycle / +Self-Correlation over seeds")
    _add_config_flags(a)
    a.add_argument("--seeds", default="0,1,2")
    a.set_defaults(func=cmd_ablate)

    s = add("synthetic-only", help="train on ground-truth re-renders only")
    _add_config_flags(s)
    s.set_defaults(func=cmd_synthetic_only)

    c = add("grad-check", help="finite-difference check of the full objective")
    _add_config_flags(c)
    c.add_argument("--n-seeds", type=int, default=50)
    c.add_argument("--eps", type=float, default=1e-5)
    c.add_argument("--batch", type=int, default=2)
    c.add_argument("--tol", type=float, default=1e-4)
    c.set_defaults(func=cmd_grad_check)
    return p


_NEEDS_OUT_DIR = ("ablate", "synthetic-only")


def main(argv=None):
    try:
        args = make_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command in _NEEDS_OUT_DIR and not args.out_dir:
        print(f"error: {args.command} needs --out-dir", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (NumericalError, BehindCameraError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
