"""Command-line front end: ``deepnose <subcommand> [options]``.

Settings come from (highest first) command-line flags, an INI config file
given with ``--config``, and built-in defaults.  Exit codes: 0 success,
1 invalid configuration or input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import attribution, data_splits, mixtures, molecule_io, odor_space, rotation_grid, train_eval, voxelizer
from .errors import DeepNoseError
from .model import DeepNoseConfig, checkpoint_bytes, load_checkpoint

CACHE_ENV = "DEEPNOSE_CACHE_DIR"

# (section, key) -> (type, default, help)
SETTINGS: dict[tuple[str, str], tuple[type, object, str]] = {
    ("paths", "data_dir"): (str, "data", "directory with <dataset>.csv label files"),
    ("paths", "cache_dir"): (str, "cache", "structure cache (<cid>.sdf)"),
    ("paths", "output_dir"): (str, "out", "where results are written"),
    ("paths", "grid_file"): (str, "", "DNGRID file (default: <output_dir>/grid.dngrid)"),
    ("paths", "folds_file"): (str, "", "fold assignment (default: <output_dir>/folds.json)"),
    ("paths", "checkpoint_dir"): (str, "", "checkpoint directory (default: <output_dir>)"),
    ("grid", "n_dirs"): (int, 64, "number of Thomson directions"),
    ("grid", "n_axial"): (int, 10, "axial rotations per direction"),
    ("grid", "seed"): (int, 0, "Thomson initialization seed"),
    ("grid", "iters"): (int, 2000, "Thomson optimizer iterations"),
    ("voxel", "box"): (float, 18.0, "box edge in angstrom"),
    ("voxel", "step"): (float, 1.0, "voxel edge in angstrom"),
    ("split", "k"): (int, 5, "number of folds"),
    ("split", "order"): (int, 2, "stratification order (1 or 2)"),
    ("split", "seed"): (int, 0, "tie-break seed"),
    ("split", "min_pair_count"): (int, 2, "minimum co-occurrence for a descriptor pair"),
    ("train", "fold"): (int, 0, "held-out fold"),
    ("train", "lr"): (float, 3e-4, "Adam learning rate"),
    ("train", "epochs"): (int, 100, "training epochs"),
    ("train", "batch_size"): (int, 32, "molecules per step"),
    ("train", "seeds"): (str, "0,1,2,3,4", "comma-separated ensemble seeds"),
    ("train", "float64"): (bool, False, "train in 64-bit precision"),
    ("attribute", "cid"): (int, 0, "molecule to attribute"),
    ("attribute", "scale"): (float, 1.0, "slope of the squashing logistic"),
    ("mixtures", "mixtures_file"): (str, "", "mixture pair CSV"),
    ("embed", "dataset"): (str, "leffingwell", "label block for the semantic space"),
    ("embed", "k"): (int, 10, "neighbors per node in the feature graph"),
    ("embed", "k_prune"): (int, 10, "shortest edges kept per node"),
    ("fetch", "allow_network"): (bool, False, "download structures missing from the cache"),
}

COMMANDS = {
    "fetch": ["paths", "fetch"],
    "grid": ["paths", "grid"],
    "voxel-stats": ["paths", "grid", "voxel"],
    "split": ["paths", "split"],
    "train": ["paths", "grid", "voxel", "train"],
    "eval": ["paths", "grid", "voxel", "train"],
    "attribute": ["paths", "grid", "voxel", "attribute"],
    "mixtures": ["paths", "grid", "voxel", "mixtures"],
    "embed": ["paths", "grid", "voxel", "embed"],
}


class UsageError(Exception):
    """Bad configuration or missing input; maps to exit code 1."""


def _parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(typ, raw, where: str):
    try:
        return _parse_bool(raw) if typ is bool else typ(raw)
    except ValueError:
        raise UsageError(f"{where}: cannot parse {raw!r} as {typ.__name__}") from None


def read_config_file(path) -> dict[tuple[str, str], object]:
    """Parse an INI file, rejecting unknown sections and keys."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from None
    out = {}
    for section in cp.sections():
        for key, raw in cp.items(section):
            if (section, key) not in SETTINGS:
                raise UsageError(f"{path}: unknown config key [{section}] {key}")
            out[(section, key)] = _convert(SETTINGS[(section, key)][0], raw, f"[{section}] {key}")
    return out


def resolve_settings(args: argparse.Namespace) -> dict[str, dict[str, object]]:
    file_values = read_config_file(args.config) if args.config else {}
    resolved: dict[str, dict[str, object]] = {}
    for (section, key), (typ, default, _) in SETTINGS.items():
        flag = getattr(args, f"{section}__{key}", None)
        if flag is not None:
            value = flag
        elif (section, key) in file_values:
            value = file_values[(section, key)]
        elif section == "paths" and key == "cache_dir" and os.environ.get(CACHE_ENV):
            value = os.environ[CACHE_ENV]
        else:
            value = default
        resolved.setdefault(section, {})[key] = value
    p = resolved["paths"]
    out = Path(p["output_dir"])
    p["grid_file"] = p["grid_file"] or str(out / "grid.dngrid")
    p["folds_file"] = p["folds_file"] or str(out / "folds.json")
    p["checkpoint_dir"] = p["checkpoint_dir"] or str(out)
    return resolved


def config_hash(settings: dict) -> str:
    blob = json.dumps(settings, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class _Parser(argparse.ArgumentParser):
    """Flag errors are validation errors: exit 1, not argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deepnose", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, sections in COMMANDS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="BLAS threads (default: logical cores)")
        sp.add_argument("-q", "--quiet", action="store_true", help="no progress lines on stderr")
        for (section, key), (typ, default, text) in SETTINGS.items():
            if section not in sections:
                continue
            flag = "--" + key.replace("_", "-")
            if key == "seed" and name not in ("grid", "split"):
                flag = f"--{section}-seed"
            dest = f"{section}__{key}"
            if typ is bool:
                sp.add_argument(flag, dest=dest, action="store_const", const=True, default=None, help=text)
            else:
                shown = text if default == "" else f"{text} (default {default})"
                sp.add_argument(flag, dest=dest, type=typ, default=None, metavar=key.upper(), help=shown)
        if name in ("attribute", "mixtures", "embed"):
            sp.add_argument("--checkpoints", nargs="+", help="checkpoint files (default: all in checkpoint dir)")
        if name == "fetch":
            sp.add_argument("--cids", nargs="+", type=int, help="cids to fetch (default: all labeled)")
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

class Run:
    def __init__(self, args, settings):
        self.args = args
        self.s = settings
        self.out = Path(settings["paths"]["output_dir"])
        self.provenance = {"command": args.command, "config_hash": config_hash(settings)}

    def progress(self, msg: str):
        if not self.args.quiet:
            print(msg, file=sys.stderr, flush=True)

    def write(self, name: str, text: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / name
        path.write_text(text)
        self.progress(f"wrote {path}")
        return path

    def require(self, path, key: str) -> Path:
        path = Path(path)
        if not path.exists():
            raise UsageError(f"missing {key}: {path}")
        return path

    def labels(self):
        d = self.require(self.s["paths"]["data_dir"], "[paths] data_dir")
        try:
            return molecule_io.load_label_dir(d)
        except FileNotFoundError as exc:
            raise UsageError(str(exc)) from None

    def structures(self, cids):
        mols, missing = molecule_io.load_structures(self.s["paths"]["cache_dir"], cids)
        if missing:
            self.progress(f"{len(missing)} structure(s) missing from cache, e.g. {missing[:5]}")
        return mols, missing

    def grid(self) -> rotation_grid.RotationGrid:
        path = Path(self.s["paths"]["grid_file"])
        g = self.s["grid"]
        if path.exists():
            grid = rotation_grid.RotationGrid.load(path)
        else:
            self.progress(f"grid file {path} absent; building {g['n_dirs']}x{g['n_axial']} grid")
            grid = rotation_grid.make_grid(g["n_dirs"], g["n_axial"], g["seed"], g["iters"])
        self.provenance["grid_hash"] = grid.digest()
        return grid

    def checkpoints(self, paths=None, pattern="*.dnckpt"):
        if paths is None:
            d = self.require(self.s["paths"]["checkpoint_dir"], "[paths] checkpoint_dir")
            paths = sorted(d.glob(pattern))
        if not paths:
            raise UsageError(f"no checkpoints matching {pattern} in {self.s['paths']['checkpoint_dir']}")
        models, h = [], hashlib.sha256()
        for p in paths:
            p = self.require(p, "checkpoint")
            h.update(p.read_bytes())
            models.append(load_checkpoint(p))
        self.provenance["checkpoint_hash"] = h.hexdigest()[:16]
        return models

    def voxel_kw(self):
        return {"box": self.s["voxel"]["box"], "step": self.s["voxel"]["step"]}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_fetch(run: Run) -> int:
    cids = run.args.cids
    if cids is None:
        table, _ = run.labels()
        cids = table.cids
    report = molecule_io.fetch_batch(cids, run.s["paths"]["cache_dir"],
                                     allow_network=run.s["fetch"]["allow_network"])
    rows = [(c, "written") for c in report.written] + [(c, "cached") for c in report.cached]
    rows += [(c, f"failed: {why}") for c, why in report.failures.items()]
    run.write("fetch_report.csv", train_eval._csv(sorted(rows), ["cid", "status"], run.provenance))
    run.progress(f"{len(report.written)} written, {len(report.cached)} cached, {len(report.failures)} failed")
    return 2 if report.failures else 0


def cmd_grid(run: Run) -> int:
    g = run.s["grid"]
    grid = rotation_grid.make_grid(g["n_dirs"], g["n_axial"], g["seed"], g["iters"])
    path = Path(run.s["paths"]["grid_file"])
    path.parent.mkdir(parents=True, exist_ok=True)
    grid.save(path)
    run.progress(f"wrote {path} ({len(grid)} rotations, digest {grid.digest()})")
    return 0


def cmd_voxel_stats(run: Run) -> int:
    table, _ = run.labels()
    mols, missing = run.structures(table.cids)
    grid = run.grid()
    rep = voxelizer.drop_report(list(mols.values()), grid, **run.voxel_kw())
    rows = [(k, v) for k, v in rep.items()] + [("missing_structures", len(missing))]
    run.write("voxel_stats.csv", train_eval._csv(rows, ["statistic", "value"], run.provenance))
    return 0


def cmd_split(run: Run) -> int:
    table, _ = run.labels()
    sp = run.s["split"]
    folds = data_splits.iterative_stratification(table, sp["k"], sp["order"], sp["seed"], sp["min_pair_count"])
    path = Path(run.s["paths"]["folds_file"])
    path.parent.mkdir(parents=True, exist_ok=True)
    folds.save(path)
    run.progress(f"wrote {path}; fold sizes {[len(f) for f in folds.folds()]}")
    return 0


def _seeds(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in str(text).split(",") if t.strip())
    except ValueError:
        raise UsageError(f"[train] seeds: bad seed list {text!r}") from None


def cmd_train(run: Run) -> int:
    folds_path = run.require(run.s["paths"]["folds_file"], "[paths] folds_file")
    folds = data_splits.FoldAssignment.load(folds_path)
    t = run.s["train"]
    try:
        cfg = train_eval.TrainConfig(lr=t["lr"], epochs=t["epochs"], batch_size=t["batch_size"],
                                     seeds=_seeds(t["seeds"]), float64=t["float64"], **run.voxel_kw())
    except ValueError as exc:
        raise UsageError(f"[train] {exc}") from None
    train_cids, test_cids = data_splits.train_test_view(folds, t["fold"])
    table, vocab = run.labels()
    mols, _ = run.structures(table.cids)
    grid = run.grid()
    model_cfg = DeepNoseConfig(grid_L=int(round(cfg.box / cfg.step)), outputs=len(vocab),
                               n_dirs=grid.n_dirs, n_axial=grid.n_axial)
    ckpt_dir = Path(run.s["paths"]["checkpoint_dir"])
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        run.progress(f"fold {t['fold']} seed {seed}: training on {len(train_cids)} molecules")
        res = train_eval.train_fold(mols, table, train_cids, grid, cfg, seed, model_config=model_cfg,
                                    test_cids=test_cids, progress=run.progress)
        path = ckpt_dir / f"fold{t['fold']}_seed{seed}.dnckpt"
        path.write_bytes(checkpoint_bytes(res.model))
        run.progress(f"wrote {path}")
        prov = {**run.provenance, "checkpoint_hash": hashlib.sha256(path.read_bytes()).hexdigest()[:16]}
        run.write(f"loss_fold{t['fold']}_seed{seed}.csv", train_eval.loss_csv(res.losses, prov))
    return 0


def cmd_eval(run: Run) -> int:
    folds = data_splits.FoldAssignment.load(run.require(run.s["paths"]["folds_file"], "[paths] folds_file"))
    table, vocab = run.labels()
    mols, _ = run.structures(table.cids)
    grid = run.grid()
    reports, hashes = [], []
    for fold in range(folds.k):
        try:
            models = run.checkpoints(None, f"fold{fold}_seed*.dnckpt")
        except UsageError:
            run.progress(f"fold {fold}: no checkpoints, skipped")
            continue
        hashes.append(run.provenance["checkpoint_hash"])
        train, test = (
            [c for c in part if c in mols] for part in data_splits.train_test_view(folds, fold))
        run.progress(f"fold {fold}: scoring {len(test)} test molecules with {len(models)} model(s)")
        scores = train_eval.ensemble_predict(models, [mols[c] for c in test], grid)
        sub = table.subset(test)
        reports.append(train_eval.dataset_report(scores, sub.labels, sub.dataset_mask, vocab, fold=fold))
        # thresholds come from the fold's training rows only
        run.progress(f"fold {fold}: scoring {len(train)} training molecules for thresholds")
        tr_scores = train_eval.ensemble_predict(models, [mols[c] for c in train], grid)
        tr = table.subset(train)
        thr = train_eval.calibrate_thresholds(tr_scores, tr.labels, tr.label_mask())
        run.write(f"thresholds_fold{fold}.csv", train_eval.thresholds_csv(thr, vocab, run.provenance))
    if not reports:
        raise UsageError("no fold has checkpoints; run train first")
    run.provenance["checkpoint_hash"] = hashlib.sha256("".join(hashes).encode()).hexdigest()[:16]
    mean = train_eval.average_reports(reports)
    run.write("metrics.csv", train_eval.metrics_csv(reports + [mean], vocab, run.provenance))
    run.write("summary.csv", train_eval.summary_csv(reports + [mean], run.provenance))
    return 0


def cmd_attribute(run: Run) -> int:
    cid = run.s["attribute"]["cid"]
    if cid <= 0:
        raise UsageError("[attribute] cid: a positive cid is required")
    mols, missing = run.structures([cid])
    if missing:
        raise UsageError(f"no cached structure for cid {cid} in {run.s['paths']['cache_dir']}")
    models = run.checkpoints(run.args.checkpoints)
    grid = run.grid()
    amap = attribution.occlude_atoms(mols[cid], models, grid, run.s["attribute"]["scale"])
    vocab = None
    data_dir = Path(run.s["paths"]["data_dir"])
    if data_dir.exists():
        _, vocab = run.labels()
        if len(vocab) != amap.matrix.shape[1]:
            vocab = None
    run.write(f"attribution_{cid}.csv", attribution.attribution_csv(amap, vocab, run.provenance))
    return 0


def cmd_mixtures(run: Run) -> int:
    path = run.require(run.s["mixtures"]["mixtures_file"] or "<unset>", "[mixtures] mixtures_file")
    records = mixtures.parse_mixture_csv(path.read_text())
    cids = sorted({c for r in records for c in r.components_a + r.components_b})
    mols, _ = run.structures(cids)
    models = run.checkpoints(run.args.checkpoints)
    grid = run.grid()
    feats = mixtures.FeatureCache(models, grid, mols, run.progress)
    report = mixtures.evaluate_mixture_datasets(records, feats)
    run.write("mixture_report.csv", mixtures.mixture_report_csv(report, run.provenance))
    run.write("mixture_summary.csv", mixtures.mixture_summary_csv(report, run.provenance))
    return 0


def cmd_embed(run: Run) -> int:
    e = run.s["embed"]
    table, _ = run.labels()
    if e["dataset"] not in molecule_io.DATASETS:
        raise UsageError(f"[embed] dataset: unknown dataset {e['dataset']!r}")
    sem = odor_space.semantic_graph(table, e["dataset"])
    models = run.checkpoints(run.args.checkpoints)
    grid = run.grid()
    mols, _ = run.structures(sem.labels)
    cids = [c for c in sem.labels if c in mols]
    feats = np.stack([train_eval.molecule_features(models, mols[c], grid) for c in cids])
    sem_cids, sem_emb, sem_geo = odor_space.embed_graph(sem, e["k_prune"])
    feat_cids, feat_emb, feat_geo = odor_space.embed_graph(odor_space.knn_graph(feats, e["k"], cids), e["k_prune"])
    common = sorted(set(sem_cids) & set(feat_cids))
    si = {c: i for i, c in enumerate(sem_cids)}
    fi = {c: i for i, c in enumerate(feat_cids)}
    X = feat_emb.coords[[fi[c] for c in common]]
    Y = sem_emb.coords[[si[c] for c in common]]
    R = odor_space.procrustes_rotate(X, Y)
    aligned = (feat_emb.coords - X.mean(axis=0)) @ R.T + Y.mean(axis=0)
    meta = {**run.provenance, "edge_weight": "1/shared_descriptors", "k": e["k"], "k_prune": e["k_prune"],
            "excluded_semantic": len(sem_geo.excluded), "excluded_features": len(feat_geo.excluded),
            "stress_semantic": f"{sem_emb.stress:.6g}", "stress_features": f"{feat_emb.stress:.6g}"}
    run.write("embedding.csv", odor_space.embedding_csv(
        [("semantic", sem_cids, sem_emb.coords), ("features", feat_cids, aligned)], meta))
    run.write("alignment.txt", odor_space.alignment_text(R, odor_space.alignment_residual(X, Y, R), meta))
    return 0


HANDLERS = {"fetch": cmd_fetch, "grid": cmd_grid, "voxel-stats": cmd_voxel_stats, "split": cmd_split,
            "train": cmd_train, "eval": cmd_eval, "attribute": cmd_attribute, "mixtures": cmd_mixtures,
            "embed": cmd_embed}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = resolve_settings(args)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        with threadpool_limits(limits=args.threads):
            return HANDLERS[args.command](Run(args, settings))
    except UsageError as exc:
        print(f"deepnose {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (DeepNoseError, OSError, ValueError) as exc:
        print(f"deepnose {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
