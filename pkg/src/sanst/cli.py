"""Command line entry points: prepare, train, eval, recommend, geohash.

Settings merge three layers with fixed precedence: command line flag, then
key=value config file, then built-in default. Unknown config keys are
rejected, and every input path is checked before any real work starts.
Failures exit nonzero with a single `error: ...` line on stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields as dataclass_fields

from .evaluation import CANDIDATE_POLICIES, evaluate, report_json, report_text
from .geocode import GeoPoint, cell_of
from .ingest import (
    ParseError,
    build_sequences,
    day_index,
    filter_and_split,
    load_bundle,
    parse_checkins,
    parse_timestamp,
    save_bundle,
    stats_summary,
)
from .model import ModelConfig, load_params, recommend
from .trainer import TrainConfig, fit

_MODEL_DEFAULTS = {f.name: f.default for f in dataclass_fields(ModelConfig)}
_TRAIN_DEFAULTS = {f.name: f.default for f in dataclass_fields(TrainConfig)}
_EXTRA_KEYS = {"policy"}


class CliError(ValueError):
    pass


def _coerce(key: str, raw: str):
    default = _MODEL_DEFAULTS.get(key, _TRAIN_DEFAULTS.get(key))
    if isinstance(default, bool):
        if raw not in ("true", "false"):
            raise CliError(f"config key {key!r} expects true or false, got {raw!r}")
        return raw == "true"
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def load_config_file(path) -> dict:
    """key=value settings; blank lines and # comments are skipped."""
    known = set(_MODEL_DEFAULTS) | set(_TRAIN_DEFAULTS) | _EXTRA_KEYS
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise CliError(f"{path} line {lineno}: expected key=value, got {raw.rstrip()!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in known:
                raise CliError(f"{path} line {lineno}: unknown config key {key!r}")
            try:
                values[key] = _coerce(key, value)
            except (TypeError, ValueError) as exc:
                raise CliError(f"{path} line {lineno}: {exc}") from None
    return values


def build_configs(file_values: dict, cli_values: dict) -> tuple:
    """Merge config layers into (ModelConfig, TrainConfig, policy). CLI
    values win over file values, which win over defaults. The key `policy`
    is shorthand for candidate_policy."""
    merged = dict(file_values)
    merged.update(cli_values)
    if "policy" in merged:
        merged["candidate_policy"] = merged.pop("policy")
    model_kwargs = {k: v for k, v in merged.items() if k in _MODEL_DEFAULTS}
    train_kwargs = {k: v for k, v in merged.items() if k in _TRAIN_DEFAULTS}
    policy = train_kwargs.get("candidate_policy", "exclude-train")
    if policy not in CANDIDATE_POLICIES:
        raise CliError(f"unknown candidate policy {policy!r}")
    return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs), policy


def _cli_overrides(args) -> dict:
    values = {}
    for key in list(_MODEL_DEFAULTS) + list(_TRAIN_DEFAULTS):
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    if getattr(args, "no_spatial", False):
        values["use_spatial"] = False
    if getattr(args, "no_temporal", False):
        values["use_temporal"] = False
    if getattr(args, "no_abs_pos", False):
        values["use_abs_pos"] = False
    if getattr(args, "policy", None) is not None:
        values["policy"] = args.policy
    return values


def _require_file(path, what: str):
    if not os.path.isfile(path):
        raise CliError(f"{what} not found: {path}")


def _resolve_configs(args) -> tuple:
    file_values = {}
    if getattr(args, "config", None) is not None:
        _require_file(args.config, "config file")
        file_values = load_config_file(args.config)
    return build_configs(file_values, _cli_overrides(args))


def _load_corpus(path) -> tuple:
    _require_file(path, "data bundle")
    return load_bundle(path)


def _parse_query_day(text: str) -> int:
    # bare dates mean midnight UTC
    if len(text) == 10 and text[4] == "-" and text[7] == "-":
        text = text + "T00:00:00Z"
    return day_index(parse_timestamp(text))


# --- commands ---------------------------------------------------------------------

def cmd_prepare(args) -> int:
    _require_file(args.input, "input file")
    checkins = parse_checkins(args.input)
    catalog, sequences = build_sequences(checkins)
    save_bundle(args.output, catalog, sequences)
    print(stats_summary(catalog, sequences), end="")
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg, _ = _resolve_configs(args)
    catalog, sequences = _load_corpus(args.data)
    split = filter_and_split(sequences, min_len=args.min_len)
    if not split:
        raise CliError(f"no users with at least {args.min_len} visits")

    handler = logging.StreamHandler(sys.stdout)
    handler.setFormatter(logging.Formatter("%(message)s"))
    trainer_log = logging.getLogger("sanst.trainer")
    trainer_log.addHandler(handler)
    trainer_log.setLevel(logging.INFO)
    trainer_log.propagate = False
    try:
        result = fit(split, catalog, model_cfg, train_cfg,
                     out_dir=args.out, resume=args.resume)
    finally:
        trainer_log.removeHandler(handler)
    print(f"best_epoch={result.best_epoch} best_ndcg={result.best_ndcg:.12g}")
    return 0


def cmd_eval(args) -> int:
    _require_file(args.checkpoint, "checkpoint")
    _require_file(f"{args.checkpoint}.cfg", "checkpoint config")
    catalog, sequences = _load_corpus(args.data)
    _, _, policy = _resolve_configs(args)
    params = load_params(args.checkpoint)
    split = filter_and_split(sequences, min_len=args.min_len)
    if not split:
        raise CliError(f"no users with at least {args.min_len} visits")
    report = evaluate(params, catalog, split, k=args.top_k, policy=policy)
    print(report_text(report), end="")
    if args.summary is not None:
        with open(args.summary, "w", encoding="utf-8") as fh:
            fh.write(report_json(report))
    return 0


def cmd_recommend(args) -> int:
    _require_file(args.checkpoint, "checkpoint")
    _require_file(f"{args.checkpoint}.cfg", "checkpoint config")
    catalog, sequences = _load_corpus(args.data)
    _, _, policy = _resolve_configs(args)
    params = load_params(args.checkpoint)
    dense_user = catalog.user_index.get(args.user)
    if dense_user is None:
        raise CliError(f"unknown user: {args.user}")
    seq = next((s for s in sequences if s.user == dense_user), None)
    if seq is None or len(seq.items) == 0:
        raise CliError(f"user {args.user} has no visits")
    t_q = _parse_query_day(args.date)
    pairs = recommend(params, catalog.poi_cells, seq.items, seq.days, t_q,
                      args.top_k, policy=policy)
    for rank, (dense, score) in enumerate(pairs, start=1):
        print(f"{rank} {catalog.poi_ids[dense]} {score:.6f}")
    return 0


def cmd_geohash(args) -> int:
    point = GeoPoint(args.lat, args.lon)
    print(cell_of(point))
    return 0


# --- parser -----------------------------------------------------------------------

def _add_config_flags(sub, include_train: bool):
    sub.add_argument("--config", help="key=value settings file")
    sub.add_argument("--policy", choices=CANDIDATE_POLICIES,
                     help="candidate pool for ranking")
    group = sub.add_argument_group("model settings")
    group.add_argument("--d-id", dest="d_id", type=int)
    group.add_argument("--d-s", dest="d_s", type=int)
    group.add_argument("--h-s", dest="h_s", type=int)
    group.add_argument("--max-len", dest="max_len", type=int)
    group.add_argument("--num-layers", dest="num_layers", type=int)
    group.add_argument("--num-heads", dest="num_heads", type=int)
    group.add_argument("--clip-k", dest="k", type=int,
                       help="temporal bucket clip distance")
    group.add_argument("--dropout", dest="dropout", type=float)
    group.add_argument("--no-spatial", action="store_true",
                       help="replace the location encoder with plain id rows")
    group.add_argument("--no-temporal", action="store_true",
                       help="drop the visit-gap attention terms")
    group.add_argument("--no-abs-pos", action="store_true",
                       help="drop the learned position table")
    if include_train:
        tgroup = sub.add_argument_group("training settings")
        tgroup.add_argument("--lr", dest="lr", type=float)
        tgroup.add_argument("--l2", dest="l2", type=float)
        tgroup.add_argument("--batch-size", dest="batch_size", type=int)
        tgroup.add_argument("--epochs", dest="epochs", type=int)
        tgroup.add_argument("--seed", dest="seed", type=int)
        tgroup.add_argument("--eval-every", dest="eval_every", type=int)
        tgroup.add_argument("--eval-k", dest="eval_k", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sanst",
        description="Next point-of-interest recommendation toolkit.")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("prepare", help="parse a check-in TSV into a data bundle")
    p.add_argument("--input", required=True, help="TSV: user, time, lat, lon, poi")
    p.add_argument("--output", required=True, help="bundle file to write")
    p.set_defaults(func=cmd_prepare)

    p = commands.add_parser("train", help="train a model on a prepared bundle")
    p.add_argument("--data", required=True, help="bundle from `sanst prepare`")
    p.add_argument("--out", required=True, help="run directory for checkpoints and logs")
    p.add_argument("--min-len", dest="min_len", type=int, default=5,
                   help="minimum visits per kept user")
    p.add_argument("--resume", action="store_true",
                   help="continue from <out>/last.ckpt")
    _add_config_flags(p, include_train=True)
    p.set_defaults(func=cmd_train)

    p = commands.add_parser("eval", help="score a checkpoint on held-out visits")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", dest="top_k", type=int, default=10, help="ranking cutoff")
    p.add_argument("--min-len", dest="min_len", type=int, default=5)
    p.add_argument("--summary", help="also write a JSON report here")
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--policy", choices=CANDIDATE_POLICIES)
    p.set_defaults(func=cmd_eval)

    p = commands.add_parser("recommend", help="top-K next places for one user")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--user", required=True, help="user id as it appears in the TSV")
    p.add_argument("--date", required=True,
                   help="query date (ISO date or timestamp, UTC)")
    p.add_argument("--k", dest="top_k", type=int, default=10, help="list length")
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--policy", choices=CANDIDATE_POLICIES)
    p.set_defaults(func=cmd_recommend)

    p = commands.add_parser("geohash", help="print the grid cell code for a point")
    p.add_argument("lat", type=float)
    p.add_argument("lon", type=float)
    p.set_defaults(func=cmd_geohash)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, ParseError, KeyError, RuntimeError) as exc:
        message = " ".join(str(exc).split()) or exc.__class__.__name__
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
