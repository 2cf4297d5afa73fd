"""Batch front end: generate, pretrain, finetune, embed, retrieve, predict, eval.

Every command reads one JSON run config (``--config``); ``--seed`` and
``--out`` override the corresponding config entries. All outputs land under
the output directory together with ``run-<command>.json`` metadata.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    Dataset,
    SyntheticSpec,
    apply_preprocess,
    fit_preprocess,
    generate_synthetic,
    load_dataset,
)
from .errors import (
    CalibrationError,
    ConfigError,
    ContractError,
    DataError,
    DivergenceError,
)
from .finetune import FinetuneConfig, finetune, trace_to_csv
from .heads import KINDS, TaskHead, calibrate_threshold, predict
from .metrics import (
    EvalReport,
    concat_baseline_embed,
    knn_multilabel,
    multilabel_metrics,
    retrieval_report,
)
from .rbm import SparseCdConfig, UnitType
from .stack import ViewSpec, embed_corpus, load_net, pretrain, save_net

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4

PRETRAINED_NAME = "pretrained.mtdbn"
FINETUNED_NAME = "finetuned.mtdbn"


@dataclass
class HeadDecl:
    target: str
    kind: str
    name: str = ""
    weight: float = 1.0
    auxiliary: bool = False

    def __post_init__(self):
        self.name = self.name or self.target
        if self.kind not in KINDS:
            raise ConfigError(f"head {self.name!r}: unknown kind {self.kind!r}")
        if not self.weight > 0:
            raise ConfigError(f"head {self.name!r}: weight must be positive")


@dataclass
class RunConfig:
    """Parsed run config. Relative paths resolve against the config file."""

    dataset: Path
    out: Path
    seed: int = 0
    view_hidden: dict = field(default_factory=dict)  # view name -> K_s
    joint_hidden: int = 16
    pretrain: dict = field(default_factory=dict)     # unit type or "joint" -> SparseCdConfig kwargs
    finetune: dict = field(default_factory=dict)     # FinetuneConfig kwargs
    heads: list = field(default_factory=list)        # [HeadDecl]
    eval: dict = field(default_factory=dict)
    count_mode: str = "round"
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict, base: Path = Path(".")) -> "RunConfig":
        known = {"dataset", "out", "seed", "architecture", "pretrain", "finetune", "heads",
                 "eval", "preprocess"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "dataset" not in d:
            raise ConfigError("config needs a 'dataset' manifest path")
        arch = d.get("architecture", {})
        try:
            heads = [HeadDecl(**h) for h in d.get("heads", [])]
        except TypeError as exc:
            raise ConfigError(f"bad head declaration: {exc}") from None
        names = [h.name for h in heads]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate head names")
        pre = dict(d.get("pretrain", {}))
        bad = set(pre) - {u.value for u in UnitType} - {"joint"}
        if bad:
            raise ConfigError(f"pretrain settings keyed by unknown unit types: {sorted(bad)}")
        cfg = cls(
            dataset=(base / d["dataset"]).resolve(),
            out=(base / d.get("out", "out")).resolve(),
            seed=int(d.get("seed", 0)),
            view_hidden={str(k): int(v) for k, v in arch.get("views", {}).items()},
            joint_hidden=int(arch.get("joint", 16)),
            pretrain=pre,
            finetune=dict(d.get("finetune", {})),
            heads=heads,
            eval={"T_map": 100, "T_ndcg": 10, "knn_k": 30, "split": "test", **d.get("eval", {})},
            count_mode=d.get("preprocess", {}).get("count_mode", "round"),
            raw=d,
        )
        cfg.finetune_config()  # validate early
        for unit in UnitType:
            cfg.cd_config(unit, 0)
        return cfg

    def cd_config(self, unit, stream: int) -> SparseCdConfig:
        key = "joint" if unit == "joint" else UnitType(unit).value
        kwargs = dict(self.pretrain.get(key, {}))
        kwargs["rng_seed"] = self.seed * 1000 + stream
        try:
            if key == "joint":
                return SparseCdConfig(**kwargs)
            return SparseCdConfig.for_unit(key, **kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"pretrain settings for {key!r}: {exc}") from None

    def finetune_config(self) -> FinetuneConfig:
        kwargs = dict(self.finetune)
        kwargs["rng_seed"] = self.seed
        try:
            return FinetuneConfig(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"finetune settings: {exc}") from None

    def effective(self) -> dict:
        """The config after the seed override; hashed into the run metadata.

        The output location is left out so reruns elsewhere hash the same.
        """
        d = json.loads(json.dumps(self.raw))
        d["seed"] = self.seed
        d.pop("out", None)
        return d


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(cfg.effective(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_metadata(cfg: RunConfig, command: str, inputs=(), outputs=()):
    meta = {
        "command": command,
        "config_sha256": config_hash(cfg),
        "seed": cfg.seed,
        "versions": {"mtdbn": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        "inputs": {Path(p).name: _file_hash(p) for p in inputs},
        "outputs": sorted(Path(p).name for p in outputs),
    }
    _write(cfg.out / f"run-{command}.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def load_config(path, seed=None, out=None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    except ValueError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    cfg = RunConfig.from_dict(raw, path.parent)
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.out = Path(out).resolve()
    return cfg


# -- shared plumbing -------------------------------------------------------------------

def _dataset(cfg: RunConfig) -> Dataset:
    ds = load_dataset(cfg.dataset)
    for h in cfg.heads:
        if h.target not in ds.targets:
            raise ConfigError(f"head {h.name!r}: dataset has no target {h.target!r}")
        if ds.targets[h.target].kind != h.kind:
            raise ConfigError(f"head {h.name!r}: declared {h.kind}, dataset target is "
                              f"{ds.targets[h.target].kind}")
    return ds


def _net_path(cfg: RunConfig, given, default_name: str) -> Path:
    path = Path(given) if given else cfg.out / default_name
    if not path.exists():
        raise ConfigError(f"net file {path} does not exist")
    return path


def _judge_target(cfg: RunConfig, ds: Dataset) -> str:
    name = cfg.eval.get("judge")
    if name is None:
        structured = [k for k, t in ds.targets.items() if t.kind in ("multilabel", "multiclass")]
        if not structured:
            raise ConfigError("retrieval needs a label target; set eval.judge")
        name = structured[0]
    if name not in ds.targets:
        raise ConfigError(f"eval.judge names unknown target {name!r}")
    return name


def _baseline_inputs(ds: Dataset, cfg: RunConfig) -> Dataset:
    recipe = fit_preprocess(ds, ds.split_ids("train"), cfg.count_mode)
    return apply_preprocess(ds, recipe)


def _embedding_csv(ids, emb) -> str:
    head = ",".join(["id"] + [f"f{k}" for k in range(emb.shape[1])])
    rows = [",".join([str(int(i))] + [repr(float(x)) for x in row]) for i, row in zip(ids, emb)]
    return "\n".join([head] + rows) + "\n"


def read_embeddings(path):
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read embeddings ({exc.strerror})", path) from None
    ids, rows = [], []
    for lineno, line in enumerate(lines[1:], 2):
        parts = line.split(",")
        try:
            ids.append(int(parts[0]))
            rows.append([float(x) for x in parts[1:]])
        except ValueError:
            raise DataError("malformed embedding row", path, lineno) from None
    width = len(lines[0].split(",")) - 1 if lines else 0
    return np.array(ids, dtype=int), np.array(rows, dtype=np.float64).reshape(len(ids), width)


# -- commands --------------------------------------------------------------------------

def cmd_generate(cfg: RunConfig, args) -> int:
    spec = SyntheticSpec(clusters=args.clusters, per_cluster=args.per_cluster, seed=cfg.seed)
    generate_synthetic(spec, cfg.out)
    write_metadata(cfg, "generate", outputs=[cfg.out / "manifest.json"])
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig, args) -> int:
    ds = _dataset(cfg)
    train_ids = ds.split_ids("train")
    recipe = fit_preprocess(ds, train_ids, cfg.count_mode)
    train = apply_preprocess(ds, recipe).subset(train_ids)
    specs = [ViewSpec(name, unit, train.views[name].shape[1], cfg.view_hidden.get(name, 16))
             for name, unit in ds.view_types.items()]
    view_cfgs = {s.name: cfg.cd_config(s.unit_type, i) for i, s in enumerate(specs)}
    net, traces = pretrain(train.views, specs, cfg.joint_hidden, view_cfgs,
                           cfg.cd_config("joint", len(specs)), preprocess=recipe)
    net_path = cfg.out / PRETRAINED_NAME
    net_path.parent.mkdir(parents=True, exist_ok=True)
    save_net(net, net_path)
    outputs = [net_path]
    for name, trace in traces.items():
        p = cfg.out / "traces" / f"pretrain-{name}.csv"
        _write(p, "epoch,reconstruction_error\n"
               + "".join(f"{e},{v!r}\n" for e, v in enumerate(trace)))
        outputs.append(p)
    write_metadata(cfg, "pretrain", [cfg.dataset], outputs)
    return EXIT_OK


def cmd_finetune(cfg: RunConfig, args) -> int:
    if not cfg.heads:
        raise ConfigError("finetune needs at least one head declaration")
    ds = _dataset(cfg)
    src = _net_path(cfg, args.net, PRETRAINED_NAME)
    net = load_net(src)
    data = apply_preprocess(ds, net.preprocess)
    rng = np.random.default_rng(cfg.seed)
    net.heads = [TaskHead.create(h.name, h.kind, net.n_top, ds.targets[h.target].labels, rng,
                                 weight=h.weight, auxiliary=h.auxiliary) for h in cfg.heads]
    train = data.subset(ds.split_ids("train"))
    targets = {h.name: train.targets[h.target].values for h in cfg.heads}
    net, trace = finetune(net, train.views, targets, cfg.finetune_config(),
                          cold_start=not net.pretrained)

    cal_ids = ds.split_ids("calibrate")
    if cal_ids.size == 0:
        cal_ids = ds.split_ids("train")
    cal = data.subset(cal_ids)
    feats = embed_corpus(net, cal.views)
    for h in cfg.heads:
        if h.kind == "multilabel":
            calibrate_threshold(net.head(h.name), feats, cal.targets[h.target].values)

    out = cfg.out / FINETUNED_NAME
    out.parent.mkdir(parents=True, exist_ok=True)
    save_net(net, out)
    tpath = cfg.out / "traces" / "finetune.csv"
    _write(tpath, trace_to_csv(trace))
    write_metadata(cfg, "finetune", [cfg.dataset, src], [out, tpath])
    return EXIT_OK


def cmd_embed(cfg: RunConfig, args) -> int:
    ds = _dataset(cfg)
    split = args.split or cfg.eval["split"]
    ids = ds.split_ids(split)
    inputs = [cfg.dataset]
    if args.baseline:
        part = _baseline_inputs(ds, cfg).subset(ids)
        emb = concat_baseline_embed([part.views[k] for k in part.views])
        out = cfg.out / f"embeddings-baseline-{split}.csv"
    else:
        src = _net_path(cfg, args.net, FINETUNED_NAME if (cfg.out / FINETUNED_NAME).exists()
                        else PRETRAINED_NAME)
        net = load_net(src)
        part = apply_preprocess(ds, net.preprocess).subset(ids)
        emb = embed_corpus(net, part.views)
        out = cfg.out / f"embeddings-{split}.csv"
        inputs.append(src)
    _write(out, _embedding_csv(ids, emb))
    write_metadata(cfg, "embed", inputs, [out])
    return EXIT_OK


def cmd_retrieve(cfg: RunConfig, args) -> int:
    if not args.embeddings:
        raise ConfigError("retrieve needs --embeddings")
    ds = _dataset(cfg)
    ids, emb = read_embeddings(args.embeddings)
    if ids.size and (ids.min() < 0 or ids.max() >= ds.n):
        raise DataError("embedding ids outside the dataset", args.embeddings)
    judge = _judge_target(cfg, ds)
    sets = ds.targets[judge].label_sets()
    report = retrieval_report(emb, [sets[i] for i in ids], T_map=int(cfg.eval["T_map"]),
                              T_ndcg=int(cfg.eval["T_ndcg"]),
                              metadata={"judge": judge, "embeddings": Path(args.embeddings).name})
    stem = Path(args.embeddings).stem
    stem = "retrieval" + stem[len("embeddings"):] if stem.startswith("embeddings") else f"retrieval-{stem}"
    out = cfg.out / f"{stem}.json"
    _write(out, report.to_json() + "\n")
    qpath = cfg.out / f"{stem}-queries.csv"
    _write(qpath, report.per_query_csv())
    write_metadata(cfg, "retrieve", [cfg.dataset, args.embeddings], [out, qpath])
    print(report.to_table())
    return EXIT_OK


def cmd_predict(cfg: RunConfig, args) -> int:
    ds = _dataset(cfg)
    split = args.split or cfg.eval["split"]
    ids = ds.split_ids(split)
    decl = _head_decl(cfg, args.head)
    inputs = [cfg.dataset]
    records = []
    if args.knn is not None:
        if decl.kind != "multilabel":
            raise ConfigError("the kNN baseline predicts multilabel targets only")
        k = int(cfg.eval["knn_k"]) if args.knn == -1 else args.knn
        if k < 1:
            raise ConfigError("--knn needs K >= 1")
        base = _baseline_inputs(ds, cfg)
        emb = concat_baseline_embed([base.views[k] for k in base.views])
        train_ids = ds.split_ids("train")
        target = ds.targets[decl.target]
        known = np.array([i for i in train_ids if target.values[i] is not None], dtype=int)
        labels = target.indicator()[known]
        pred, _, _ = knn_multilabel(emb[known], labels, emb[ids], k=k)
        for i, row in zip(ids, pred):
            records.append({"id": int(i), "kind": "multilabel",
                            "payload": {"labels": [target.labels[j] for j in np.flatnonzero(row)]}})
        out = cfg.out / f"predictions-{decl.name}-knn{k}.jsonl"
    else:
        src = _net_path(cfg, args.net, FINETUNED_NAME)
        net = load_net(src)
        head = net.head(decl.name)
        feats = embed_corpus(net, apply_preprocess(ds, net.preprocess).subset(ids).views)
        for i, f in zip(ids, feats):
            records.append({"id": int(i), "kind": head.kind, "payload": predict(head, f)})
        out = cfg.out / f"predictions-{decl.name}.jsonl"
        inputs.append(src)
    _write(out, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    write_metadata(cfg, "predict", inputs, [out])
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    if not args.predictions:
        raise ConfigError("eval needs --predictions")
    ds = _dataset(cfg)
    decl = _head_decl(cfg, args.head)
    if decl.kind not in ("multilabel", "multiclass"):
        raise ConfigError("eval scores multilabel or multiclass predictions")
    target = ds.targets[decl.target]
    index = {l: j for j, l in enumerate(target.labels)}
    path = Path(args.predictions)
    rows, pred_sets = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        try:
            rec = json.loads(line)
            payload = rec["payload"]
            labels = payload["labels"] if "labels" in payload else [payload["label"]]
            rows.append(int(rec["id"]))
            pred_sets.append([index[l] for l in labels])
        except (ValueError, KeyError, TypeError):
            raise DataError("malformed prediction record", path, lineno) from None
    keep = [r for r, i in enumerate(rows) if target.values[i] is not None]
    truth = target.indicator()[[rows[r] for r in keep]]
    pred = np.zeros_like(truth)
    for out_row, r in enumerate(keep):
        pred[out_row, pred_sets[r]] = True
    recall, precision, f1 = multilabel_metrics(pred, truth)
    report = EvalReport(recall=recall, precision=precision, macro_f1=f1,
                        metadata={"head": decl.name, "predictions": path.name,
                                  "instances": len(keep)})
    out = cfg.out / f"eval-{path.stem}.json"
    _write(out, report.to_json() + "\n")
    write_metadata(cfg, "eval", [cfg.dataset, path], [out])
    print(report.to_table())
    return EXIT_OK


def _head_decl(cfg: RunConfig, name) -> HeadDecl:
    if name is None:
        multi = [h for h in cfg.heads if h.kind == "multilabel" and not h.auxiliary]
        if len(multi) != 1:
            raise ConfigError("pass --head to choose a head")
        return multi[0]
    for h in cfg.heads:
        if h.name == name:
            return h
    raise ConfigError(f"config declares no head {name!r}")


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "embed": cmd_embed,
    "retrieve": cmd_retrieve,
    "predict": cmd_predict,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtdbn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "generate":
            p.add_argument("--clusters", type=int, default=4)
            p.add_argument("--per-cluster", type=int, default=50)
        else:
            p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads")
        if name in ("finetune", "embed", "predict"):
            p.add_argument("--net", help="net container (default: the one under --out)")
        if name in ("embed", "predict"):
            p.add_argument("--split", help="dataset split (default: eval.split)")
        if name == "embed":
            p.add_argument("--baseline", action="store_true",
                           help="concatenate unit-normalized views instead of running the net")
        if name == "retrieve":
            p.add_argument("--embeddings")
        if name == "predict":
            p.add_argument("--head")
            p.add_argument("--knn", type=int, nargs="?", const=-1, metavar="K",
                           help="kNN baseline with K neighbours (default K: eval.knn_k)")
        if name == "eval":
            p.add_argument("--predictions")
            p.add_argument("--head")
    return parser


def _threads(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _threads(args.threads):
            if args.command == "generate":
                if args.out is None:
                    raise ConfigError("generate needs --out")
                seed = 0 if args.seed is None else args.seed
                cfg = RunConfig(dataset=Path(args.out).resolve() / "manifest.json",
                                out=Path(args.out).resolve(), seed=seed,
                                raw={"generate": {"clusters": args.clusters,
                                                  "per_cluster": args.per_cluster}})
            else:
                cfg = load_config(args.config, args.seed, args.out)
            return COMMANDS[args.command](cfg, args)
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CalibrationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
