"""``specreg`` command-line driver.

    specreg train --config run.cfg [--set key=value]... [--resume ckpt]
    specreg analyze {spectrum,sensitivity,hessian,gap,lipschitz} --checkpoint ckpt [--data dir] [--alpha x]
    specreg gen-data --spec synth.cfg --out dir

Config files are flat ``key = value`` lines; ``#`` starts a comment.  Exit
codes: 0 ok, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import analyze, checkpoint, data, nn, optim
from .regularize import KINDS, RegularizerConfig

log = logging.getLogger("specreg")

NET_INIT_STREAM = 0x1A7
METRICS_FILE = "metrics.csv"
FINAL_CHECKPOINT = "final.ckpt"


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    return v


# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "seed": (_seed, 0),
    "epochs": (int, 10),
    "batch_size": (int, 64),
    "base_lr": (float, 0.01),
    "momentum": (float, 0.9),
    "eval_every": (int, 1),
    "chunk_size": (int, 0),
    "regularizer": (str, "vanilla"),
    "lambda": (float, None),  # None: the objective's usual value
    "alpha": (float, 0.5),
    "epsilon": (float, 1.0),
    "power_iters": (int, 1),
    "layers": (str, None),
    "data": (str, "synthetic"),
    "data_dir": (str, ""),
    "synthetic.kind": (str, "gaussian-mixture"),
    "synthetic.num_classes": (int, 2),
    "synthetic.samples_per_class": (int, 100),
    "synthetic.test_samples_per_class": (int, 0),
    "synthetic.input_dim": (int, 2),
    "synthetic.noise_std": (float, 1.0),
    "synthetic.label_noise": (float, 0.0),
    "synthetic.seed": (_seed, 0),
    "idx.train_images": (str, ""),
    "idx.train_labels": (str, ""),
    "idx.test_images": (str, ""),
    "idx.test_labels": (str, ""),
    "idx.num_classes": (int, 0),
    "gcn": (_bool, False),
    "augment_flip": (_bool, False),
    "augment_crop": (_bool, False),
    "crop_pad": (int, 4),  # used only when augment_crop is on
    "out_dir": (str, "runs/default"),
    "checkpoint_every": (int, 0),
    "resume": (str, ""),
}

SYNTHETIC_KEYS = [k for k in SCHEMA if k.startswith("synthetic.")]


def parse_config_text(text: str, source: str = "<config>", schema=SCHEMA) -> dict[str, Any]:
    """Parse ``key = value`` lines into typed values (unset keys are absent)."""
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _convert(key, value, f"{source}:{lineno}", schema)
    return out


def _convert(key: str, value: str, where: str, schema=SCHEMA):
    if key not in schema:
        raise ConfigError(f"{where}: unknown key {key!r}")
    try:
        return schema[key][0](value)
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None


def load_config(path: str | None, overrides: list[str] = (), env=os.environ) -> dict[str, Any]:
    cfg = {k: default for k, (_, default) in SCHEMA.items()}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg.update(parse_config_text(text, path))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        cfg[key] = _convert(key, value, f"--set {key}")
    if env.get("SPECREG_SEED"):
        cfg["seed"] = _convert("seed", env["SPECREG_SEED"], "SPECREG_SEED")
    return cfg


def regularizer_from(cfg: dict[str, Any], kind: str | None = None) -> RegularizerConfig:
    kind = kind or cfg["regularizer"]
    base = RegularizerConfig.default_for(kind) if kind in KINDS else None
    if base is None:
        raise ConfigError(f"regularizer: unknown kind {kind!r} (expected one of {', '.join(KINDS)} or all)")
    lam = base.lam if cfg["lambda"] is None else cfg["lambda"]
    try:
        return RegularizerConfig(kind, lam=lam, alpha=cfg["alpha"], epsilon=cfg["epsilon"], power_iters=cfg["power_iters"])
    except ValueError as exc:
        raise ConfigError(f"regularizer: {exc}") from None


def train_config_from(cfg: dict[str, Any], kind: str | None = None) -> optim.TrainConfig:
    try:
        return optim.TrainConfig(
            batch_size=cfg["batch_size"],
            epochs=cfg["epochs"],
            base_lr=cfg["base_lr"],
            momentum=cfg["momentum"],
            regularizer=regularizer_from(cfg, kind),
            seed=cfg["seed"],
            eval_every=cfg["eval_every"],
            chunk_size=cfg["chunk_size"],
            augment_flip=cfg["augment_flip"],
            crop_pad=cfg["crop_pad"] if cfg["augment_crop"] else 0,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def synthetic_spec_from(cfg: dict[str, Any]) -> data.SyntheticSpec:
    try:
        return data.SyntheticSpec(
            kind=cfg["synthetic.kind"],
            num_classes=cfg["synthetic.num_classes"],
            samples_per_class=cfg["synthetic.samples_per_class"],
            input_dim=cfg["synthetic.input_dim"],
            noise_std=cfg["synthetic.noise_std"],
            label_noise=cfg["synthetic.label_noise"],
            seed=cfg["synthetic.seed"],
            test_samples_per_class=cfg["synthetic.test_samples_per_class"] or None,
        )
    except ValueError as exc:
        raise ConfigError(f"synthetic: {exc}") from None


def load_datasets(cfg: dict[str, Any], data_dir: str | None = None) -> tuple[data.Dataset, data.Dataset]:
    """Datasets named by a run config (or a gen-data directory), GCN applied if configured."""
    source = "dir" if data_dir else cfg["data"]
    if source == "synthetic":
        train, test = data.generate_synthetic(synthetic_spec_from(cfg))
    elif source in ("dir", "idx"):
        if source == "dir" or cfg["data_dir"]:
            d = Path(data_dir or cfg["data_dir"])
            paths = [d / f"{s}-{p}.idx" for s in ("train", "test") for p in ("images", "labels")]
        else:
            paths = [cfg[f"idx.{s}_{p}"] for s in ("train", "test") for p in ("images", "labels")]
            if not all(paths):
                raise ConfigError("data=idx needs idx.train_images, idx.train_labels, idx.test_images, idx.test_labels")
        train_l = data.read_idx(paths[1], scale=False)
        test_l = data.read_idx(paths[3], scale=False)
        C = cfg["idx.num_classes"] or int(max(train_l.max(), test_l.max())) + 1
        train = data.load_idx_dataset(paths[0], paths[1], C, "train")
        test = data.load_idx_dataset(paths[2], paths[3], C, "test")
    else:
        raise ConfigError(f"data: unknown source {source!r} (synthetic or idx)")
    if cfg["gcn"]:
        train, test = data.global_contrast_normalize(train), data.global_contrast_normalize(test)
    return train, test


def build_network(cfg: dict[str, Any], train: data.Dataset) -> nn.Network:
    if not cfg["layers"]:
        raise ConfigError("layers: missing architecture, e.g. layers = dense:128,relu,dense:10")
    try:
        layers = nn.parse_layers(cfg["layers"])
        net = nn.init_network(train.feature_shape, layers, np.random.default_rng([cfg["seed"], NET_INIT_STREAM]))
    except ValueError as exc:
        raise ConfigError(f"layers: {exc}") from None
    if net.num_classes != train.num_classes:
        raise ConfigError(f"layers: network has {net.num_classes} outputs but the data has {train.num_classes} classes")
    return net


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def fmt(x) -> str:
    """Shortest decimal that round-trips to the same float64."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def metrics_rows(metrics) -> list[list[str]]:
    rows = [analyze.MetricsRecord.field_names()]
    for m in metrics:
        *head, sig = m.as_tuple()
        rows.append([fmt(v) for v in head] + [";".join(fmt(s) for s in sig)])
    return rows


def write_csv(path, rows) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    os.replace(tmp, path)


def read_metrics_csv(path) -> list[analyze.MetricsRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    out = []
    for r in rows[1:]:
        sig = tuple(float(s) for s in r[-1].split(";")) if r[-1] else ()
        out.append(analyze.MetricsRecord(int(r[0]), *(float(v) for v in r[1:-1]), per_layer_sigma=sig))
    return out


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


# where a run writes is not part of what it computes
_LOCATION_KEYS = ("out_dir", "resume", "checkpoint_every")


def _config_record(cfg: dict[str, Any]) -> dict[str, Any]:
    return {k: v for k, v in cfg.items() if k not in _LOCATION_KEYS}


def train_one(cfg: dict[str, Any], kind: str, out_dir: Path, resume: str = "") -> list[analyze.MetricsRecord]:
    tcfg = train_config_from(cfg, kind)
    train, test = load_datasets(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = dict(_config_record(cfg), regularizer=kind)
    state = None
    if resume:
        ck = checkpoint.load(resume)
        if ck.seed != tcfg.seed:
            raise ConfigError(f"resume: checkpoint seed {ck.seed} differs from config seed {tcfg.seed}")
        state = ck.train_state()
        net = state.net
        if nn.format_layers(net.layers) != nn.format_layers(nn.parse_layers(cfg["layers"])):
            raise ConfigError("resume: checkpoint architecture differs from config layers")
    else:
        net = build_network(cfg, train)

    def on_epoch_end(st: optim.TrainState) -> None:
        every = cfg["checkpoint_every"]
        if every > 0 and st.opt.epoch % every == 0:
            checkpoint.save(out_dir / f"epoch{st.opt.epoch:04d}.ckpt", checkpoint.Checkpoint.from_state(st, tcfg.seed, record))
        write_csv(out_dir / METRICS_FILE, metrics_rows(st.metrics))

    if state is None:
        state = optim.start_state(net, tcfg)
    try:
        optim.run_training(net, train, test, tcfg, resume=state, on_epoch_end=on_epoch_end)
    except optim.TrainingDiverged as exc:
        last = out_dir / f"epoch{exc.last_good_epoch:04d}.ckpt"
        hint = f"; last good checkpoint {last}" if last.exists() else "; no checkpoint from before divergence"
        raise RuntimeError(f"{exc}{hint}") from exc
    write_csv(out_dir / METRICS_FILE, metrics_rows(state.metrics))
    checkpoint.save(out_dir / FINAL_CHECKPOINT, checkpoint.Checkpoint.from_state(state, tcfg.seed, record))
    return state.metrics


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set or [])
    resume = args.resume or cfg["resume"]
    kinds = list(KINDS) if cfg["regularizer"] == "all" else [cfg["regularizer"]]
    for kind in kinds:
        regularizer_from(cfg, kind)  # validate everything before any work
    out = Path(cfg["out_dir"])
    if len(kinds) > 1 and resume:
        raise ConfigError("resume: cannot resume with regularizer=all; resume each objective's run separately")
    for kind in kinds:
        train_one(cfg, kind, out / kind if len(kinds) > 1 else out, resume)
        log.info("finished %s -> %s", kind, out)
    return 0


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def _checkpoint_config(ck: checkpoint.Checkpoint) -> dict[str, Any]:
    cfg = {k: default for k, (_, default) in SCHEMA.items()}
    cfg.update({k: v for k, v in ck.config.items() if k in SCHEMA})
    return cfg


def analyze_rows(sub: str, ck: checkpoint.Checkpoint, args) -> list[list[str]]:
    net = ck.network()
    if sub == "spectrum":
        spec = analyze.singular_spectrum(net)
        width = max(len(s) for s in spec.values())
        rows = [["layer"] + [f"sv_{i}" for i in range(width)]]
        for name, sv in spec.items():
            rows.append([name] + [fmt(v) for v in sv] + [""] * (width - len(sv)))
        return rows
    if sub == "gap":
        alpha = args.alpha if args.alpha is not None else 0.0
        if not ck.metrics:
            raise RuntimeError("checkpoint has no metrics records")
        gap = analyze.generalization_gap(ck.metrics, alpha)
        return [["alpha", "gap", "status"], [fmt(alpha), "" if gap is None else fmt(gap), "undefined" if gap is None else "ok"]]

    cfg = _checkpoint_config(ck)
    train, test = load_datasets(cfg, args.data)
    splits = {"train": train, "test": test}
    names = ["train", "test"] if args.split == "both" else [args.split]
    if sub == "sensitivity":
        rows = [["split", "grad_norm"]]
        for s in names:
            rows.append([s, fmt(analyze.input_grad_norm(net, splits[s].inputs, splits[s].labels))])
        return rows
    if sub == "hessian":
        rows = [["split", "max_eig"]]
        for s in names:
            lam = analyze.hessian_max_eig(net, splits[s].inputs, splits[s].labels, iters=args.iters, seed=ck.seed)
            rows.append([s, fmt(lam)])
        return rows
    if sub == "lipschitz":
        rows = [["split", "sample", "empirical_max_ratio", "local_sigma", "sigma_product"]]
        rng = np.random.default_rng([ck.seed, 0x11B])
        for s in names:
            ds = splits[s]
            for i in range(min(args.samples, len(ds))):
                probe = analyze.lipschitz_probe(net, ds.inputs[i], args.trials, args.xi_norm, rng)
                local = analyze.local_sigma(net, ds.inputs[i])
                rows.append([s, str(i), fmt(probe.empirical_max_ratio), fmt(local), fmt(probe.sigma_product)])
        return rows
    raise ConfigError(f"unknown analysis {sub!r}")


def cmd_analyze(args) -> int:
    ck = checkpoint.load(args.checkpoint)
    rows = analyze_rows(args.analysis, ck, args)
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    sys.stdout.write(buf.getvalue())
    return 0


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    try:
        text = Path(args.spec).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read spec {args.spec}: {exc}") from None
    # spec files may omit the "synthetic." prefix
    schema = {k.split(".", 1)[1]: SCHEMA[k] for k in SYNTHETIC_KEYS}
    values = parse_config_text(text, args.spec, schema)
    cfg = {k: d for k, (_, d) in SCHEMA.items()}
    cfg.update({f"synthetic.{k}": v for k, v in values.items()})
    train, test = data.generate_synthetic(synthetic_spec_from(cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    label_dtype = np.uint8 if train.num_classes <= 256 else np.int32
    for ds in (train, test):
        data.write_idx(out / f"{ds.split}-images.idx", ds.inputs)
        data.write_idx(out / f"{ds.split}-labels.idx", ds.labels.astype(label_dtype))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="specreg", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one objective (or all four) and write metrics + checkpoints")
    t.add_argument("--config", required=True)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--resume", default="", help="continue from a checkpoint written by this config")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("analyze", help="measure a checkpoint; CSV on stdout")
    a.add_argument("analysis", choices=["spectrum", "sensitivity", "hessian", "gap", "lipschitz"])
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", default=None, help="gen-data directory (default: regenerate from the run config)")
    a.add_argument("--alpha", type=float, default=None, help="test-accuracy threshold for gap")
    a.add_argument("--split", choices=["train", "test", "both"], default="both")
    a.add_argument("--iters", type=int, default=100, help="power iterations for hessian")
    a.add_argument("--samples", type=int, default=10, help="inputs probed by lipschitz")
    a.add_argument("--trials", type=int, default=200, help="random directions per input for lipschitz")
    a.add_argument("--xi-norm", type=float, default=1e-6, help="perturbation size for lipschitz")
    a.set_defaults(func=cmd_analyze)

    g = sub.add_parser("gen-data", help="write a synthetic dataset as IDX files")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"specreg: config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError, ValueError, FloatingPointError, KeyError) as exc:
        print(f"specreg: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
