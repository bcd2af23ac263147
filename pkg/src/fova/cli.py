"""Command-line entry point: ``generate``, ``train``, ``audit`` and ``report``.

Output layout under ``--out``::

    config.json  mdp.json
    seed_<s>/client_<k>.csv (+ .json manifest), seed_<s>/manifest.json
    seed_<s>/phase_<p>/client_<k>.csv           (continual mode)
    metrics/<algo>/seed_<s>.csv                  checkpoints/<algo>/seed_<s>.json
    audit/<algo>/seed_<s>_bounds.json            audit/<algo>/seed_<s>_heterogeneity.json
    report/curves_<algo>.csv                     report/comparison.csv
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from fova.audit import bound_report, heterogeneity_norm, safe_improvement_audit
from fova.config import ALGO_TAGS, TAG_OF_ALGO, ExperimentConfig, load_config
from fova.continual import run_continual
from fova.data import Dataset, make_behavior_policy
from fova.errors import ConfigurationError
from fova.federation import ServerState, build_clients, metrics_header, train_federation
from fova.learner import ClientState
from fova.mdp import MdpSpec, TabularPolicy

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 2, 3
log = logging.getLogger("fova")


def write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def read_json(path: Path):
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    return json.loads(path.read_text())


def _seed_dir(out: Path, seed: int) -> Path:
    return out / f"seed_{seed}"


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def cmd_generate(config: ExperimentConfig, out: Path) -> dict:
    """Write the MDP, per-client datasets and a manifest for every seed."""
    from fova.continual import phase_federations
    from fova.data import make_federation

    mdp = config.build_mdp()
    write_json(out / "config.json", config.to_dict())
    write_json(out / "mdp.json", mdp.to_dict())
    manifest = {"mdp": "mdp.json", "seeds": {}}
    fed = config.federation
    for seed in config.seeds:
        sdir = _seed_dir(out, seed)
        sdir.mkdir(parents=True, exist_ok=True)
        entry: dict = {}
        if config.quality_schedule is None:
            datasets = make_federation(mdp, fed.for_seed(seed))
            entry["clients"] = _save_clients(datasets, sdir)
        else:
            phases = phase_federations(mdp, config.quality_schedule, config.n_clients,
                                       fed.n_transitions, seed, fed.horizon, fed.reward_noise)
            entry["phases"] = [_save_clients(ds, sdir / f"phase_{p}") for p, ds in enumerate(phases)]
        write_json(sdir / "manifest.json", entry)
        manifest["seeds"][str(seed)] = entry
    write_json(out / "manifest.json", manifest)
    return manifest


def _save_clients(datasets: Sequence[Dataset], directory: Path) -> list[dict]:
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for k, d in enumerate(datasets):
        path = directory / f"client_{k}.csv"
        d.save(path, "mdp.json")
        rows.append({"file": path.name, "quality_label": d.quality_label, "seed": d.seed, "n": len(d)})
    return rows


def _load_clients(directory: Path, n_clients: int) -> list[Dataset]:
    return [Dataset.load(_require(directory / f"client_{k}.csv")) for k in range(n_clients)]


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    return path


def _load_mdp(out: Path) -> MdpSpec:
    return MdpSpec.from_dict(read_json(out / "mdp.json"))


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _true_behaviors(mdp: MdpSpec, datasets: Sequence[Dataset]) -> list[TabularPolicy]:
    return [make_behavior_policy(mdp, d.quality_label) for d in datasets]


def cmd_train(config: ExperimentConfig, out: Path, order: str = "forward", workers: int = 1) -> list[Path]:
    """Train every seed; write a metrics CSV and a checkpoint per seed."""
    mdp = _load_mdp(out)
    written = []
    tag = TAG_OF_ALGO[config.algo]
    k = config.n_clients
    for seed in config.seeds:
        sdir = _seed_dir(out, seed)
        client_order = list(range(k)) if order == "forward" else list(reversed(range(k)))
        extra: dict = {}
        if config.quality_schedule is None:
            datasets = _load_clients(sdir, k)
            run = train_federation(mdp, datasets, config.hyper, config.rounds, config.vote_mode,
                                   config.algo, true_behaviors=_true_behaviors(mdp, datasets),
                                   order=client_order, max_workers=workers)
            history, servers, clients = run.history, run.servers, run.clients
        else:
            phases = [_load_clients(sdir / f"phase_{p}", k) for p in range(len(config.quality_schedule))]
            result = run_continual(mdp, config.quality_schedule, k, config.federation.n_transitions,
                                   config.hyper, config.rounds_per_phase, seed, config.vote_mode,
                                   config.algo, config.federation.horizon, workers, phases=phases)
            history, servers, clients = result.history, result.servers, result.clients
            extra = {"scores": np.where(np.isnan(result.scores), None, result.scores).tolist(),
                     "per": result.per, "bwt": result.bwt}
        for m in history:
            for w in m.warnings:
                log.warning("seed %s round %s: %s", seed, m.round, w)
        metrics_path = out / "metrics" / tag / f"seed_{seed}.csv"
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(metrics_header(k))
        for m in history:
            writer.writerow(m.csv_row())
        metrics_path.write_text(buf.getvalue())
        checkpoint = {
            "algo": tag,
            "seed": seed,
            "server": servers[-1].to_dict(),
            "global_history": [s.global_policy.probs.tolist() for s in servers],
            "clients": [{"local_q": c.local_q.tolist(), "local_policy": c.local_policy.probs.tolist()}
                        for c in clients],
            **extra,
        }
        write_json(out / "checkpoints" / tag / f"seed_{seed}.json", checkpoint)
        written.append(metrics_path)
    return written


# ---------------------------------------------------------------------------
# audit
# ---------------------------------------------------------------------------

def _restore_clients(config: ExperimentConfig, mdp: MdpSpec, out: Path, seed: int,
                     checkpoint: dict) -> list[ClientState]:
    sdir = _seed_dir(out, seed)
    if config.quality_schedule is not None:
        sdir = sdir / f"phase_{len(config.quality_schedule) - 1}"
    datasets = _load_clients(sdir, config.n_clients)
    clients = build_clients(mdp, datasets, config.hyper, _true_behaviors(mdp, datasets))
    if len(checkpoint["clients"]) != len(clients):
        raise ConfigurationError("checkpoint client count does not match the config")
    for c, saved in zip(clients, checkpoint["clients"]):
        q = np.array(saved["local_q"], dtype=float)
        pi = np.array(saved["local_policy"], dtype=float)
        if q.shape != (mdp.n_states, mdp.n_actions) or pi.shape != q.shape:
            raise ConfigurationError("checkpoint shapes do not match the MDP")
        c.local_q = q
        c.local_policy = TabularPolicy(pi)
    return clients


def cmd_audit(config: ExperimentConfig, out: Path) -> list[Path]:
    """Bound and heterogeneity reports for every checkpoint found under ``out``."""
    mdp = _load_mdp(out)
    ck_root = out / "checkpoints"
    paths = sorted(ck_root.glob("*/seed_*.json")) if ck_root.exists() else []
    if not paths:
        raise FileNotFoundError(f"no checkpoints under {ck_root}")
    written = []
    for path in paths:
        ck = read_json(path)
        seed, tag = int(ck["seed"]), ck["algo"]
        clients = _restore_clients(config, mdp, out, seed, ck)
        server = ServerState.from_dict(ck["server"])
        reports = [bound_report(c, server.global_policy, mdp, mode=config.vote_mode) for c in clients]
        het = heterogeneity_norm(clients, mdp)
        history = [TabularPolicy(np.array(p)) for p in ck["global_history"]]
        safety = safe_improvement_audit(mdp, clients, history) if len(history) > 1 else None
        if safety is not None and len(safety.bounds):
            het.safe_bound = float(safety.bounds[-1])
        bounds_doc = {
            "clients": [r.to_dict() for r in reports],
            "holds": {key: all(r.holds_empirically[key] for r in reports)
                      for key in reports[0].holds_empirically},
        }
        het_doc = het.to_dict()
        if safety is not None:
            het_doc["per_round_drop"] = safety.drops.tolist()
            het_doc["per_round_bound"] = safety.bounds.tolist()
            het_doc["safe_improvement_holds"] = bool(safety.holds.all())
        adir = out / "audit" / tag
        write_json(adir / f"seed_{seed}_bounds.json", bounds_doc)
        write_json(adir / f"seed_{seed}_heterogeneity.json", het_doc)
        written += [adir / f"seed_{seed}_bounds.json", adir / f"seed_{seed}_heterogeneity.json"]
    return written


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(metrics_dir: Path, report_dir: Path) -> list[Path]:
    """Mean and population std curves per algorithm plus a final-round comparison table."""
    algo_dirs = sorted(p for p in metrics_dir.glob("*") if p.is_dir() and list(p.glob("seed_*.csv")))
    if not algo_dirs:
        raise FileNotFoundError(f"no metrics under {metrics_dir}")
    report_dir.mkdir(parents=True, exist_ok=True)
    comparison = [["algo", "n_seeds", "final_j_global_mean", "final_j_global_std",
                   "final_j_client_mean_mean", "final_j_client_mean_std"]]
    written = []
    for adir in algo_dirs:
        runs = []
        for path in sorted(adir.glob("seed_*.csv")):
            with open(path, newline="") as fh:
                rows = list(csv.DictReader(fh))
            runs.append(np.array([[float(r["j_global"]), float(r["j_client_mean"])] for r in rows]))
        length = min(len(r) for r in runs)
        stack = np.stack([r[:length] for r in runs])
        mean, std = stack.mean(axis=0), stack.std(axis=0)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["round", "j_global_mean", "j_global_std", "j_client_mean_mean", "j_client_mean_std"])
        for t in range(length):
            writer.writerow([t] + [repr(float(x)) for x in (mean[t, 0], std[t, 0], mean[t, 1], std[t, 1])])
        curve = report_dir / f"curves_{adir.name}.csv"
        curve.write_text(buf.getvalue())
        written.append(curve)
        comparison.append([adir.name, str(len(runs))] + [repr(float(x)) for x in
                                                          (mean[-1, 0], std[-1, 0], mean[-1, 1], std[-1, 1])])
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(comparison)
    table = report_dir / "comparison.csv"
    table.write_text(buf.getvalue())
    return written + [table]


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fova", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("generate", "write the MDP and per-client datasets"),
                            ("train", "train on generated data"),
                            ("audit", "audit checkpoints against the bounds"),
                            ("report", "aggregate metrics into plot-ready CSV")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--out", type=Path, default=None, help="output directory (default: config output_dir)")
        if name == "train":
            p.add_argument("--algo", choices=sorted(ALGO_TAGS), default=None)
            p.add_argument("--rounds", type=int, default=None)
            p.add_argument("--workers", type=int, default=1, help="threads for client updates")
            p.add_argument("--client-order", choices=("forward", "reverse"), default="forward")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        if args.command == "train":
            changes = {}
            if args.algo is not None:
                changes["algo"] = ALGO_TAGS[args.algo]
            if args.rounds is not None:
                if args.rounds < 1:
                    raise ConfigurationError("rounds: must be at least 1")
                changes["rounds"] = args.rounds
            config = dataclasses.replace(config, **changes)
        out = args.out if args.out is not None else Path(config.output_dir)
        if args.command == "generate":
            cmd_generate(config, out)
        elif args.command == "train":
            cmd_train(config, out, args.client_order, args.workers)
        elif args.command == "audit":
            cmd_audit(config, out)
        else:
            cmd_report(out / "metrics", out / "report")
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
