"""Command-line entry point: ``wsseg {gen,train,eval,gradcheck,audit-sampler}``.

Configuration is flat ``key=value`` text with section prefixes, e.g.
``loss.lambda_unannotated=3``. A ``--config`` file is applied first, then
every ``--set`` override. Each run writes ``effective-config.txt`` to its
output directory.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericalError(Exception):
    pass


# flat config ----------------------------------------------------------------

def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _opt_float(text: str):
    return None if text.strip().lower() in ("none", "-", "") else float(text)


def _opt_str(text: str):
    return None if text.strip().lower() in ("none", "-", "") else text.strip()


def _str(text: str) -> str:
    return text.strip()


# key -> (parser, default)
KEYS = {
    "seed": (int, "0"),
    # recorded only; 0 leaves the BLAS default
    "threads": (int, "0"),
    "gen.preset": (_str, "default"),
    "gen.image_shape": (_ints, "48,48"),
    "gen.n_structures": (int, "4"),
    "gen.radius_min": (float, "4"),
    "gen.radius_max": (float, "8"),
    "train.iterations": (int, "2000"),
    "train.batch_size": (int, "8"),
    "train.patch_shape": (_ints, "48,48"),
    "train.strategy": (_str, "CMD"),
    "train.jitter": (int, "0"),
    "train.empty_bucket_prob": (_opt_float, "none"),
    "train.base_lr": (float, "0.001"),
    "train.weight_decay": (float, "0.01"),
    "train.hidden": (int, "16"),
    "train.kernel": (int, "3"),
    "train.fg_prior": (_opt_float, "0.01"),
    "train.eval_every": (int, "200"),
    "train.augment": (_bool, "false"),
    "loss.epsilon": (float, "1"),
    "loss.focal_exponent": (float, "2"),
    "loss.lambda_annotated": (float, "1"),
    "loss.lambda_unannotated": (float, "3"),
    "loss.lambda_scope": (_str, "patch"),
    "loss.reduction": (_str, "annotated"),
    "loss.mode": (_str, "ambiguity"),
    "eval.split": (_str, "test"),
    "eval.score_empty": (_bool, "false"),
    "audit.strategy": (_str, "CMD"),
    "audit.n_draws": (int, "100000"),
    "audit.patch_shape": (_ints, "16,16"),
    "audit.alpha": (float, "0.01"),
    "gradcheck.n_instances": (int, "100"),
    "gradcheck.network_instances": (int, "3"),
}
DATASET_FIELDS = {
    "modality": _str, "subset": _ints, "n_images": int, "n_test": int,
    "contrast": float, "bias": float, "gamma": float, "noise": float,
    "clip": _opt_str, "labeling": _str, "sparse_fraction": float, "sparse_axis": int,
}


def _check_key(key: str, value: str, where: str):
    if key in KEYS:
        parser = KEYS[key][0]
    else:
        parts = key.split(".")
        if len(parts) != 3 or parts[0] != "dataset" or parts[2] not in DATASET_FIELDS:
            raise UsageError(f"{where}: unknown config key {key!r}")
        parser = DATASET_FIELDS[parts[2]]
    try:
        parser(value)
    except ValueError as e:
        raise UsageError(f"{where}: bad value for {key}: {e}") from e


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        _check_key(k, v, f"{source}:{lineno}")
        out[k] = v
    return out


class Config:
    """Raw string values layered over the defaults."""

    def __init__(self, values: dict[str, str] | None = None):
        self.values = {k: d for k, (_, d) in KEYS.items()}
        self.values.update(values or {})

    def get(self, key: str):
        if key in KEYS:
            return KEYS[key][0](self.values[key])
        return DATASET_FIELDS[key.split(".")[2]](self.values[key])

    def datasets(self) -> dict[str, dict]:
        out: dict[str, dict] = {}
        for k in self.values:
            if k.startswith("dataset."):
                _, name, fld = k.split(".")
                out.setdefault(name, {})[fld] = self.get(k)
        return out

    def text(self) -> str:
        return "".join(f"{k}={self.values[k]}\n" for k in sorted(self.values))


def build_config(args) -> Config:
    values = {}
    if args.config:
        p = Path(args.config)
        if not p.is_file():
            raise UsageError(f"config file {p} not found")
        values.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        _check_key(k, v, "--set")
        values[k] = v
    if args.seed is not None:
        values["seed"] = str(args.seed)
    return Config(values)


def _write_effective(out: Path, cfg: Config, command: str):
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective-config.txt").write_text(f"# command={command}\n" + cfg.text(),
                                              encoding="utf-8")


# builders -------------------------------------------------------------------

def gen_spec(cfg: Config):
    from . import experiments, synthdata
    presets = {
        "default": synthdata.default_spec,
        "hybrid": lambda seed: experiments.hybrid_spec(True, seed),
        "hybrid_partial": lambda seed: experiments.hybrid_spec(False, seed),
        "sparse": lambda seed: experiments.sparse_spec(0.2, 0, seed),
        "none": lambda seed: synthdata.GenSpec(seed=seed, allow_uncovered=True),
    }
    name = cfg.get("gen.preset")
    if name not in presets:
        raise UsageError(f"unknown gen.preset {name!r}; choose from {sorted(presets)}")
    spec = presets[name](cfg.get("seed"))
    datasets = {d.name: d for d in spec.datasets}
    for dname, fields in cfg.datasets().items():
        if dname in datasets:
            datasets[dname] = synthdata.DatasetSpec(**{**datasets[dname].__dict__, **fields})
        else:
            datasets[dname] = synthdata.DatasetSpec(dname, **fields)
    try:
        return synthdata.GenSpec(
            image_shape=cfg.get("gen.image_shape"), n_structures=cfg.get("gen.n_structures"),
            datasets=list(datasets.values()),
            radius_range=(cfg.get("gen.radius_min"), cfg.get("gen.radius_max")),
            seed=cfg.get("seed"))
    except (ValueError, synthdata.NamingError) as e:
        raise UsageError(f"invalid corpus spec: {e}") from e


LOSS_KEYS = ("epsilon", "focal_exponent", "lambda_annotated", "lambda_unannotated",
             "lambda_scope", "mode", "reduction")


def train_config(cfg: Config, checkpoint: str | None = None):
    from .losses import LossConfig
    from .train import TrainConfig
    try:
        loss = LossConfig(**{k: cfg.get(f"loss.{k}") for k in LOSS_KEYS})
        return TrainConfig(seed=cfg.get("seed"), loss=loss, checkpoint=checkpoint,
                           **{k: cfg.get(f"train.{k}") for k in (
                               "iterations", "batch_size", "patch_shape", "strategy", "jitter",
                               "empty_bucket_prob", "base_lr", "weight_decay", "hidden",
                               "kernel", "fg_prior", "eval_every", "augment")})
    except ValueError as e:
        raise UsageError(str(e)) from e


def _load(corpus: str, split: str):
    from .dataio import FormatError, IngestionError, load_corpus
    root = Path(corpus)
    manifest = root / f"{split}.tsv" if root.is_dir() else root
    if not manifest.is_file():
        raise DataError(f"manifest {manifest} not found")
    try:
        return load_corpus(manifest)
    except (IngestionError, FormatError) as e:
        raise DataError(str(e)) from e


# subcommands ----------------------------------------------------------------

def cmd_gen(args, cfg: Config) -> int:
    from . import dataio, synthdata
    spec = gen_spec(cfg)
    try:
        corpus, _ = synthdata.generate(spec)
    except synthdata.GenerationError as e:
        raise DataError(str(e)) from e
    out = Path(args.out)
    _write_effective(out, cfg, "gen")
    paths = dataio.write_corpus(out, corpus, {"seed": spec.seed})
    summary = synthdata.availability_matrix(spec)
    (out / "summary.txt").write_text(summary + "\n", encoding="utf-8")
    n_train = sum(g.split == "train" for g in corpus)
    print(summary)
    print(f"wrote {n_train} train and {len(corpus) - n_train} test images "
          f"to {', '.join(str(p) for p in paths.values())}")
    return EXIT_OK


def cmd_train(args, cfg: Config) -> int:
    from .losses import ShapeMismatchError
    from .optim import NonFiniteGradientError
    from .sampler import BoundsError, UnsampleableCorpusError
    from .train import NonFiniteLossError, train
    out = Path(args.out)
    ckpt = out / "checkpoint.sgck"
    tcfg = train_config(cfg, str(ckpt))
    _, images = _load(args.corpus, "train")
    test = None
    root = Path(args.corpus)
    if root.is_dir() and (root / "test.tsv").is_file():
        _, test = _load(args.corpus, "test")
    _write_effective(out, cfg, "train")
    try:
        res = train([im.volume for im in images], tcfg, test_images=test,
                    log_path=out / "train.log")
    except (NonFiniteLossError, NonFiniteGradientError, FloatingPointError) as e:
        raise NumericalError(str(e)) from e
    except (ShapeMismatchError, BoundsError, UnsampleableCorpusError) as e:
        raise DataError(str(e)) from e
    last = res.log[-1]
    ev = "-" if last.eval_dsc is None else f"{last.eval_dsc:.4f}"
    print(f"trained {tcfg.iterations} iterations: loss {last.loss:.4f}, test dsc {ev}")
    print(f"checkpoint {ckpt}")
    return EXIT_OK


def cmd_eval(args, cfg: Config) -> int:
    import numpy as np

    from .metrics import EvalReport, EvaluationError, score_image
    from .train import load_checkpoint, predict_volume
    classes, images = _load(args.corpus, cfg.get("eval.split"))
    net = None
    if not args.oracle:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --oracle")
        from .dataio import FormatError
        try:
            net, _ = load_checkpoint(args.checkpoint)
        except (OSError, FormatError, KeyError) as e:
            raise DataError(f"cannot read checkpoint {args.checkpoint}: {e}") from e
        if net.n_classes != classes.n_channels:
            raise DataError(f"checkpoint predicts {net.n_classes} channels, corpus has "
                            f"{classes.n_channels}")
    out = Path(args.out)
    _write_effective(out, cfg, "eval")
    report = EvalReport()
    score_empty = cfg.get("eval.score_empty")
    try:
        for im in images:
            v = im.volume
            truth = im.full_labels if im.full_labels is not None else v.labels
            pred = truth if net is None else predict_volume(net, v.intensities)
            present = sorted(set(np.unique(truth).tolist()) - {0})
            report.scores.extend(score_image(pred, truth, v.image_id, v.dataset_id, present,
                                             classes.n_structures))
            if score_empty:
                from .metrics import PairScore
                for c in classes.members:
                    if c not in present and not np.any(pred == c):
                        report.scores.append(PairScore(v.image_id, v.dataset_id, c, 1.0))
        text = report.to_text()
    except EvaluationError as e:
        raise DataError(str(e)) from e
    (out / "report.tsv").write_text(text + "\n", encoding="utf-8")
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_gradcheck(args, cfg: Config) -> int:
    from .gradcheck import check_losses, check_network
    from .losses import LossConfig
    eps = cfg.get("loss.epsilon")
    unsafe = eps <= 0
    try:
        lc = LossConfig(unsafe=unsafe, **{k: cfg.get(f"loss.{k}") for k in LOSS_KEYS})
    except ValueError as e:
        raise UsageError(str(e)) from e
    out = Path(args.out) if args.out else None
    if out:
        _write_effective(out, cfg, "gradcheck")
    if unsafe:
        print(f"WARNING: loss.epsilon={eps:g} is outside the supported range; "
              "dice may divide by zero", file=sys.stderr)
    seed = cfg.get("seed")
    import numpy as np
    with np.errstate(all="ignore"):
        results = check_losses(cfg.get("gradcheck.n_instances"), seed, cfg=lc)
        m = cfg.get("gradcheck.network_instances")
        if m > 0:
            results += [check_network(m, seed, ndim=2, cfg=lc),
                        check_network(m, seed, ndim=3, cfg=lc)]
    lines = ["check\tinstances\tmax_rel_err\ttol\tstatus"]
    lines += [r.line() for r in results]
    text = "\n".join(lines)
    print(text)
    if out:
        (out / "gradcheck.tsv").write_text(text + "\n", encoding="utf-8")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_audit(args, cfg: Config) -> int:
    from . import sampler as S
    strategy = cfg.get("audit.strategy")
    n = cfg.get("audit.n_draws")
    if n <= 0:
        raise UsageError("audit.n_draws must be positive")
    _, images = _load(args.corpus, "train")
    vols = [im.volume for im in images]
    try:
        idx = S.build_index(vols)
        scfg = S.SamplerConfig(strategy, cfg.get("audit.patch_shape"), seed=cfg.get("seed"))
        keys = S.Sampler(idx, scfg).take(n)
    except (ValueError, S.UnsampleableCorpusError) as e:
        raise DataError(str(e)) from e
    alpha = cfg.get("audit.alpha")
    report = S.audit_random(idx, keys, alpha) if strategy == "RANDOM" else \
        S.audit_cmd(idx, keys, alpha) if strategy == "CMD" else S.audit_mdc(idx, keys, alpha)
    expo = S.class_exposure(vols, keys, scfg, idx.n_structures)
    lines = [report.to_text(), "", "class\texposure"]
    lines += [f"{c}\t{e:.4f}" for c, e in enumerate(expo, 1)]
    nz = expo[expo > 0]
    if len(nz):
        lines.append(f"max/min exposure ratio\t{nz.max() / nz.min():.2f}")
    text = "\n".join(lines)
    out = Path(args.out) if args.out else None
    if out:
        _write_effective(out, cfg, "audit-sampler")
        (out / "audit.tsv").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "audit-sampler": cmd_audit}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="config override, repeatable")
    common.add_argument("--threads", type=int, default=None,
                        help="BLAS threads (set before numpy loads)")
    p = _Parser(prog="wsseg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    g = sub.add_parser("gen", parents=[common], help="generate a synthetic corpus")
    t = sub.add_parser("train", parents=[common], help="train TinyNet on a corpus")
    t.add_argument("--corpus", required=True)
    e = sub.add_parser("eval", parents=[common], help="score a checkpoint")
    e.add_argument("--corpus", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--oracle", action="store_true",
                   help="predict the reference labels instead of running a model")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    a = sub.add_parser("audit-sampler", parents=[common], help="chi-square sampler audit")
    a.add_argument("--corpus", required=True)
    a.add_argument("--strategy", choices=("CMD", "MDC", "RANDOM"))
    a.add_argument("--n-draws", type=int)
    for sp in (g, t):
        sp.set_defaults(out_required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "out_required", False) and not args.out:
        parser.error(f"{args.command} requires --out")
    if args.command == "eval" and not args.out:
        parser.error("eval requires --out")
    if args.threads is not None:
        if args.threads <= 0:
            parser.error("--threads must be positive")
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        cfg = build_config(args)
        if args.command == "audit-sampler":
            if args.strategy:
                cfg.values["audit.strategy"] = args.strategy
            if args.n_draws is not None:
                cfg.values["audit.n_draws"] = str(args.n_draws)
        if args.threads is not None:
            cfg.values["threads"] = str(args.threads)
        return COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(f"wsseg: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"wsseg: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"wsseg: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
