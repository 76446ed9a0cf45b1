"""Command-line entry point: ``spem <command> [options]``.

Settings come from an optional flat ``section.key=value`` file (``--config``)
overridden by command-line flags.  Every random draw is keyed by ``--seed``
plus a fixed label, so reruns write byte-identical files.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import baselines, data, evaluation, flow, theorems
from . import embed as emb
from .errors import InputError, ParameterError, SpemError
from .io import atomic_write_text
from .scoring import SpemConfig, write_scores_csv

logger = logging.getLogger("spem")

OUTPUT_DIR_ENV = "SPEM_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "spem-out"
EXIT_ERROR = 2
EXIT_CHECK_FAILED = 3


def _list(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in _list(text))
    except ValueError:
        raise ParameterError("expected a comma-separated list of numbers", value=text) from None


def _optional_int(text: str):
    return None if text.lower() in ("", "none") else int(text)


def _geometry_settings():
    out = {}
    for f in dataclasses.fields(data.PairGeometry):
        out[f"geometry.{f.name}"] = (type(f.default), f.default)
    return out


_TRAIN = flow.TrainConfig()

# key -> (parser, default)
SETTINGS = {
    "seed": (int, 0),
    "data.kind": (str, "inversion_pair"),
    "data.dim": (int, 16),
    "data.n_train": (int, 8000),
    "data.n_test": (int, 4000),
    **_geometry_settings(),
    "train.epochs": (int, _TRAIN.epochs),
    "train.batch_size": (int, _TRAIN.batch_size),
    "train.learning_rate": (float, _TRAIN.learning_rate),
    "train.weight_decay": (float, _TRAIN.weight_decay),
    "train.n_layers": (int, _TRAIN.n_layers),
    "train.hidden": (int, _TRAIN.hidden),
    "spem.alpha": (float, SpemConfig.alpha),
    "spem.alpha_noise": (float, SpemConfig.alpha_noise),
    "react.quantile": (float, emb.ReActConfig.quantile),
    "react.sample_count": (int, emb.ReActConfig.sample_count),
    "embed.kind": (str, "identity"),
    "embed.dim": (_optional_int, None),
    "score.detectors": (_list, ("likelihood", "spem")),
    "benchmark.detectors": (_list, evaluation.DETECTORS),
    "background.corruption_prob": (float, 0.2),
    "gmm.k": (int, 3),
    "sweep.kind": (str, "sigma"),
    "sweep.grid": (_floats, (0.0, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2)),
    "theorems.count": (int, 100),
}


def read_config(path) -> dict:
    """Parse a flat ``key=value`` file; blank lines and ``#`` comments are ignored."""
    p = Path(path)
    if not p.is_file():
        raise InputError("config file not found", path=str(p))
    raw = {}
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ParameterError("config line is not key=value", path=str(p), line=lineno)
        raw[key.strip()] = value.strip()
    return raw


def resolve_settings(config_path, flags: dict) -> dict:
    """Defaults, then the config file, then flags (which win)."""
    raw = read_config(config_path) if config_path else {}
    unknown = sorted(set(raw) - set(SETTINGS))
    if unknown:
        raise ParameterError("unknown config keys", keys=",".join(unknown))
    out = {k: default for k, (_, default) in SETTINGS.items()}
    for key, value in raw.items():
        parse = SETTINGS[key][0]
        try:
            out[key] = parse(value)
        except ValueError:
            raise ParameterError("bad config value", key=key, value=value) from None
    for key, value in flags.items():
        if value is not None:
            out[key] = value
    return out


def _train_config(s: dict) -> flow.TrainConfig:
    return flow.TrainConfig(epochs=s["train.epochs"], batch_size=s["train.batch_size"],
                            learning_rate=s["train.learning_rate"], weight_decay=s["train.weight_decay"],
                            n_layers=s["train.n_layers"], hidden=s["train.hidden"], seed=s["seed"])


def _geometry(s: dict, **overrides) -> data.PairGeometry:
    kw = {k.split(".", 1)[1]: v for k, v in s.items() if k.startswith("geometry.")}
    kw.update(overrides)
    return data.PairGeometry(**kw)


def _dataset_spec(s: dict, **overrides) -> data.SyntheticDatasetSpec:
    kw = dict(kind=s["data.kind"], dim=s["data.dim"], n_train=s["data.n_train"], n_test=s["data.n_test"],
              seed=s["seed"], geometry=_geometry(s))
    kw.update(overrides)
    return data.SyntheticDatasetSpec(**kw)


def _react(s: dict) -> emb.ReActConfig:
    return emb.ReActConfig(quantile=s["react.quantile"], sample_count=s["react.sample_count"], seed=s["seed"])


def _spem(s: dict) -> SpemConfig:
    return SpemConfig(alpha=s["spem.alpha"], alpha_noise=s["spem.alpha_noise"], seed=s["seed"])


def _benchmark_config(s: dict, detectors) -> evaluation.BenchmarkConfig:
    pairs = (
        evaluation.PairConfig("inversion", _dataset_spec(s, kind="inversion_pair")),
        evaluation.PairConfig("non_inversion", _dataset_spec(s, kind="non_inversion_pair",
                                                             geometry=_geometry(s, hub_weight=0.0))),
    )
    bg = baselines.BackgroundConfig(corruption_prob=s["background.corruption_prob"], train=_train_config(s),
                                    seed=s["seed"])
    return evaluation.BenchmarkConfig(pairs=pairs, detectors=tuple(detectors), train=_train_config(s),
                                      spem=_spem(s), react=_react(s), embedder_kind=s["embed.kind"],
                                      embed_dim=s["embed.dim"], background=bg, gmm_components=s["gmm.k"],
                                      seed=s["seed"])


def _require(*paths) -> None:
    for p in paths:
        if p is None or not Path(p).is_file():
            raise InputError("input file not found", path=str(p))


def _output(args, name: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    base = args.out_dir or os.environ.get(OUTPUT_DIR_ENV) or DEFAULT_OUTPUT_DIR
    return Path(base) / name


def _load_dataset(path):
    _require(path)
    batch, splits = data.load_csv(path)
    if splits is None:
        splits = ["train"] * len(batch)
    return batch, np.array(splits)


def _split_rows(batch, splits, name: str) -> np.ndarray:
    return batch[splits == name]


def _refit_embedder(train, s: dict) -> emb.Embedder:
    return emb.fit_embedder(train, s["embed.kind"], s["embed.dim"], seed=s["seed"])


def _load_bank_for(path, train, s: dict):
    e = _refit_embedder(train, s)
    return e, emb.load_bank(path, e)


def cmd_gen(args, s: dict) -> int:
    spec = _dataset_spec(s)
    ds = data.generate(spec)
    batch = np.concatenate([ds.train, ds.test, ds.ood])
    splits = ["train"] * len(ds.train) + ["test"] * len(ds.test) + ["ood"] * len(ds.ood)
    out = _output(args, "dataset.csv")
    data.save_csv(out, batch, splits)
    print(f"wrote {out} train={len(ds.train)} test={len(ds.test)} ood={len(ds.ood)}")
    return 0


def cmd_train(args, s: dict) -> int:
    batch, splits = _load_dataset(args.data)
    train = _split_rows(batch, splits, "train")
    model, trace = flow.train(train, _train_config(s))
    out = _output(args, "model.bin")
    flow.save_model(model, out)
    lines = ["epoch,nll"] + [f"{i},{v!r}" for i, v in enumerate(trace.epoch_nll)]
    atomic_write_text(out.with_name(out.stem + "_trace.csv"), "\n".join(lines) + "\n")
    print(f"wrote {out} initial_nll={trace.initial:.6f} final_nll={trace.final:.6f}")
    return 0


def cmd_bank(args, s: dict) -> int:
    batch, splits = _load_dataset(args.data)
    train = _split_rows(batch, splits, "train")
    e = _refit_embedder(train, s)
    bank = emb.build_memory_bank(train, e, _react(s))
    out = _output(args, "bank.bin")
    emb.save_bank(bank, out)
    print(f"wrote {out} rows={bank.size} beta={bank.beta!r} fingerprint={bank.fingerprint:016x}")
    return 0


def _runs(indices: np.ndarray):
    """Split sorted row indices into contiguous runs."""
    if len(indices) == 0:
        return []
    cuts = np.flatnonzero(np.diff(indices) != 1) + 1
    return np.split(indices, cuts)


def cmd_score(args, s: dict) -> int:
    _require(args.model, args.bank, args.data)
    batch, splits = _load_dataset(args.data)
    train = _split_rows(batch, splits, "train")
    model = flow.load_model(args.model)
    e, bank = _load_bank_for(args.bank, train, s)
    cfg = _benchmark_config(s, s["score.detectors"])
    fp = evaluation.FittedPair(model, e, bank, train, (float(train.min()), float(train.max())))
    eval_idx = np.flatnonzero(splits != "train")
    if len(eval_idx) == 0:
        raise ParameterError("dataset has no test or ood rows to score", path=str(args.data))
    rows, summary = [], []
    for det in cfg.detectors:
        scores = np.empty(len(batch))
        for run in _runs(eval_idx):
            scores[run] = evaluation.detector_scores(det, fp, cfg, batch[run], start=int(run[0]))
        for i in eval_idx:
            rows.append((int(i), det, scores[i], None, None))
        if np.any(splits == "test") and np.any(splits == "ood"):
            a = evaluation.auroc(scores[splits == "test"], scores[splits == "ood"])
            summary.append(f"{det},{a!r}")
            print(f"detector={det} auroc={a:.6f}")
    out = _output(args, "scores.csv")
    # lambda and sigma columns are filled for detectors that use the memory bank
    rows = _attach_similarity(rows, fp, cfg, batch)
    write_scores_csv(out, rows)
    if summary:
        atomic_write_text(out.with_name(out.stem + "_auroc.csv"), "detector,auroc\n" + "\n".join(summary) + "\n")
    print(f"wrote {out}")
    return 0


def _attach_similarity(rows, fp, cfg, batch):
    dets = {r[1] for r in rows}
    if not dets & {"spem", "spem_noise", "similarity"}:
        return rows
    lam = np.clip(emb.similarity(fp.bank, fp.embedder, batch), 0.0, 1.0)
    alphas = {"spem": cfg.spem.alpha, "spem_noise": cfg.spem.alpha_noise}
    out = []
    for sid, det, score, _, _ in rows:
        if det in alphas:
            out.append((sid, det, score, lam[sid], (1.0 - lam[sid]) * alphas[det]))
        elif det == "similarity":
            out.append((sid, det, score, lam[sid], None))
        else:
            out.append((sid, det, score, None, None))
    return out


def cmd_sweep(args, s: dict) -> int:
    _require(args.model, args.data)
    batch, splits = _load_dataset(args.data)
    id_test, ood_test = _split_rows(batch, splits, "test"), _split_rows(batch, splits, "ood")
    if len(id_test) == 0 or len(ood_test) == 0:
        raise ParameterError("sweeps need test and ood rows", path=str(args.data))
    model = flow.load_model(args.model)
    kind = s["sweep.kind"]
    if kind == "sigma":
        result = evaluation.sigma_sweep(model, id_test, ood_test, s["sweep.grid"], s["seed"])
    elif kind == "alpha":
        _require(args.bank)
        train = _split_rows(batch, splits, "train")
        e, bank = _load_bank_for(args.bank, train, s)
        result = evaluation.alpha_sweep(evaluation.Pipeline(model, e, bank, id_test, ood_test), s["sweep.grid"], s["seed"])
        print(f"plateau={'true' if result.plateau else 'false'}")
    else:
        raise ParameterError("sweep kind must be sigma or alpha", kind=kind)
    out = _output(args, "sweep.csv")
    evaluation.write_sweep_csv(out, result)
    for g, a, _, _ in result.rows():
        print(f"{kind}={g:g} auroc={a:.6f}")
    print(f"wrote {out}")
    return 0


def cmd_verify_theorems(args, s: dict) -> int:
    checks = theorems.run_suite(s["theorems.count"], s["seed"])
    out = _output(args, "theorems.csv")
    atomic_write_text(out, theorems.checks_to_csv(checks))
    failed = 0
    for name in dict.fromkeys(c.name for c in checks):
        group = [c for c in checks if c.name == name]
        ok = sum(c.holds for c in group)
        print(f"{name}: {ok}/{len(group)} hold")
        if name != "lipschitz_diagnostic":
            failed += len(group) - ok
    print(f"wrote {out}")
    return EXIT_CHECK_FAILED if failed else 0


def cmd_benchmark(args, s: dict) -> int:
    cfg = _benchmark_config(s, s["benchmark.detectors"])
    rows = evaluation.benchmark_run(cfg)
    out = _output(args, "benchmark.csv")
    evaluation.write_benchmark_csv(out, rows)
    for r in rows:
        print(f"pair={r.pair} detector={r.detector} auroc={r.auroc:.6f}")
    print(f"wrote {out}")
    return 0


def _add_common(p: argparse.ArgumentParser, out_name: str) -> None:
    p.add_argument("--config", help="flat section.key=value settings file; flags override it")
    p.add_argument("--seed", type=int, dest="seed", help="global seed (default 0)")
    p.add_argument("--out", help=f"output file (default <out-dir>/{out_name})")
    p.add_argument("--out-dir", help=f"output directory (default ${OUTPUT_DIR_ENV} or ./{DEFAULT_OUTPUT_DIR})")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _add_data_flags(p):
    p.add_argument("--kind", dest="data.kind", choices=data.KINDS)
    p.add_argument("--dim", dest="data.dim", type=int)
    p.add_argument("--n-train", dest="data.n_train", type=int)
    p.add_argument("--n-test", dest="data.n_test", type=int)


def _add_train_flags(p):
    p.add_argument("--epochs", dest="train.epochs", type=int)
    p.add_argument("--batch-size", dest="train.batch_size", type=int)
    p.add_argument("--learning-rate", dest="train.learning_rate", type=float)
    p.add_argument("--n-layers", dest="train.n_layers", type=int)
    p.add_argument("--hidden", dest="train.hidden", type=int)


def _add_bank_flags(p):
    p.add_argument("--embedder", dest="embed.kind", choices=emb.EMBEDDER_KINDS)
    p.add_argument("--embed-dim", dest="embed.dim", type=int)
    p.add_argument("--quantile", dest="react.quantile", type=float, help="clip quantile p")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spem", description="Similarity-scaled perturbation OOD scoring.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic dataset (train/test/ood rows)")
    _add_common(p, "dataset.csv")
    _add_data_flags(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="fit the flow on the train rows of a dataset")
    _add_common(p, "model.bin")
    p.add_argument("--data", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bank", help="build the memory bank from the train rows")
    _add_common(p, "bank.bin")
    p.add_argument("--data", required=True)
    _add_bank_flags(p)
    p.set_defaults(func=cmd_bank)

    p = sub.add_parser("score", help="score test and ood rows with one or more detectors")
    _add_common(p, "scores.csv")
    p.add_argument("--model", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--detectors", dest="score.detectors", type=_list,
                   help="comma-separated subset of: " + ",".join(evaluation.DETECTORS))
    p.add_argument("--alpha", dest="spem.alpha", type=float)
    p.add_argument("--alpha-noise", dest="spem.alpha_noise", type=float)
    _add_bank_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("sweep", help="AUROC over a grid of perturbation scales")
    _add_common(p, "sweep.csv")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--bank", help="required for --sweep alpha")
    p.add_argument("--sweep", dest="sweep.kind", choices=("sigma", "alpha"))
    p.add_argument("--grid", dest="sweep.grid", type=_floats, help="comma-separated grid values")
    _add_bank_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify-theorems", help="check the bounds on random Gaussian instances")
    _add_common(p, "theorems.csv")
    p.add_argument("--count", dest="theorems.count", type=int, help="instances per check (default 100)")
    p.set_defaults(func=cmd_verify_theorems)

    p = sub.add_parser("benchmark", help="every detector on the inversion and non-inversion pairs")
    _add_common(p, "benchmark.csv")
    p.add_argument("--detectors", dest="benchmark.detectors", type=_list)
    _add_data_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: v for k, v in vars(args).items() if k in SETTINGS}
    try:
        settings = resolve_settings(args.config, flags)
        return args.func(args, settings)
    except SpemError as exc:
        print(exc.structured(), file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
