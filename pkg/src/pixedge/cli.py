"""Command-line entry point: ``pixedge {synth,train,detect,eval,ablate}``.

Run settings can come from a plain-text ``key=value`` file (``--config``);
flags given on the command line override it.  Exit status is 0 on success,
2 on contract errors (bad arguments or inconsistent inputs) and 3 on
malformed files.
"""

import argparse
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .bench import DEFAULT_TOL, evaluate_image, format_table, format_table_latex, summarize, write_report
from .convnet import BUILTIN_SPECS, BUILTIN_WEIGHTS, load_netspec, load_weights
from .dataset import (
    STREAM_BASELINE,
    STREAM_SAMPLING,
    STREAM_SGD,
    image_ids,
    image_path,
    load_gt,
    substream,
    write_synthetic,
)
from .densefeat import feature_layout, per_pixel_features
from .edgesvm import (
    SkippedImageWarning,
    TrainSet,
    detect,
    detect_shared,
    load_model,
    sample_pixels,
    save_model,
    train_svm,
)
from .errors import ContractError, FormatError
from .imagecore import read_image, write_edge_map, write_tensor
from .nms import thin_edges

ABLATION_COLUMNS = ("Conv1", "Conv2", "Conv3", "Conv4", "Conv5", "Conv1-5")


@dataclass(frozen=True)
class RunConfig:
    data: str = "data"
    net: str = "builtin:alexnet"
    weights: str = "builtin:filterbank:0"
    taps: str = "all"
    scales: str = "1.0"
    lam: float = 1e-4
    epochs: int = 10
    pos_cap: int = 200
    neg_ratio: float = 2.0
    nms_sigma: float = 2.0
    tol_fraction: float = DEFAULT_TOL
    n_thresholds: int = 99
    matcher: str = "greedy"
    seed: int = 0
    jobs: int = 1

    def tap_list(self, net):
        if self.taps.strip().lower() == "all":
            return list(net.tap_names)
        taps = [t.strip() for t in self.taps.split(",") if t.strip()]
        unknown = [t for t in taps if t not in net.tap_names]
        if unknown or not taps:
            raise ContractError(f"unknown taps {unknown}; the net has {list(net.tap_names)}")
        return taps

    def scale_list(self):
        try:
            scales = tuple(float(s) for s in self.scales.split(","))
        except ValueError as exc:
            raise ContractError(f"bad scales {self.scales!r}") from exc
        if not scales or any(s <= 0 for s in scales):
            raise ContractError("scales must be positive")
        return scales

    def thresholds(self):
        n = self.n_thresholds
        if n < 1:
            raise ContractError("n_thresholds must be at least 1")
        return tuple(k / (n + 1) for k in range(1, n + 1))


HELP = {
    "data": "dataset root holding train/ val/ test/ splits",
    "net": "network: builtin:alexnet, builtin:toy or a NetSpec text file",
    "weights": "weights: builtin:filterbank:SEED, builtin:random:SEED or a PXW1 bundle",
    "taps": "comma-separated tap names, or 'all'",
    "scales": "comma-separated pyramid scales used for features",
    "lam": "SVM regularization constant",
    "epochs": "SVM passes over the training samples",
    "pos_cap": "maximum positive samples per training image",
    "neg_ratio": "negatives drawn per positive",
    "nms_sigma": "Gaussian sigma for NMS orientation estimates",
    "tol_fraction": "match tolerance as a fraction of the image diagonal",
    "n_thresholds": "number of evenly spaced thresholds in (0, 1)",
    "matcher": "pixel correspondence: greedy or exact",
    "seed": "master seed",
    "jobs": "worker processes for per-image work (results do not depend on it)",
}


def _coerce(name, value):
    kind = {f.name: f.type for f in fields(RunConfig)}[name]
    conv = {"str": str, "int": int, "float": float}[kind if isinstance(kind, str) else kind.__name__]
    try:
        return conv(value)
    except ValueError as exc:
        raise ContractError(f"{name}: cannot read {value!r} as {conv.__name__}") from exc


def read_config(path):
    """``{field: value}`` from a ``key=value`` file; ``#`` starts a comment."""
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise ContractError(f"{path}:{lineno}: unknown setting {key!r}")
        out[key] = _coerce(key, value)
    return out


def resolve_config(args):
    values = read_config(args.config) if args.config else {}
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    cfg = RunConfig(**values)
    if cfg.matcher not in ("greedy", "exact"):
        raise ContractError(f"unknown matcher {cfg.matcher!r}")
    if cfg.jobs < 1:
        raise ContractError("jobs must be at least 1")
    return cfg


def load_net(spec):
    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        if name not in BUILTIN_SPECS:
            raise ContractError(f"unknown builtin net {name!r}; choose from {sorted(BUILTIN_SPECS)}")
        return BUILTIN_SPECS[name]()
    return load_netspec(spec)


def load_net_weights(cfg):
    net = load_net(cfg.net)
    if cfg.weights.startswith("builtin:"):
        parts = cfg.weights.split(":")
        if len(parts) not in (2, 3) or parts[1] not in BUILTIN_WEIGHTS:
            raise ContractError(f"bad builtin weights {cfg.weights!r}")
        seed = int(parts[2]) if len(parts) == 3 else 0
        return net, BUILTIN_WEIGHTS[parts[1]](net, seed)
    return net, load_weights(cfg.weights, net)


# ----------------------------------------------------- per-image workers
#
# Workers receive the large shared objects once through the pool initializer;
# tasks carry only indices and paths.

_SHARED = {}


def _init_worker(shared):
    _SHARED.clear()
    _SHARED.update(shared)


def _map(fn, items, jobs, shared):
    items = list(items)
    if jobs == 1 or len(items) <= 1:
        _init_worker(shared)
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(shared,)) as pool:
        return list(pool.map(fn, items))


def _train_sample(task):
    idx, image_id, root = task
    s = _SHARED
    img = read_image(image_path(root, "train", image_id))
    gts = load_gt(Path(root) / "train" / "gt", image_id)
    field = per_pixel_features(img, s["net"], s["weights"], s["taps"], s["scales"], mean=s["pixel_mean"])
    rng = substream(s["seed"], STREAM_SAMPLING, idx)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", SkippedImageWarning)
        part = sample_pixels(field, gts, s["pos_cap"], s["neg_ratio"], rng, image_id)
    return part, [str(w.message) for w in caught]


def _image_mean(path):
    return read_image(path).reshape(-1, 3).mean(axis=0)


def _detect_one(task):
    path, out_dir, features_dir = task
    s = _SHARED
    img = read_image(path)
    e = detect(img, s["net"], s["weights"], s["model"])
    if s["nms_sigma"] is not None:
        e = thin_edges(e, s["nms_sigma"])
    write_edge_map(e, Path(out_dir) / f"{Path(path).stem}.pgm")
    if features_dir is not None:
        m = s["model"]
        field = per_pixel_features(img, s["net"], s["weights"], list(m.taps), m.scales, mean=m.pixel_mean)
        write_tensor(field, Path(features_dir) / f"{Path(path).stem}.pxf")
    return Path(path).stem


def _eval_one(task):
    image_id, det_dir, gt_dir = task
    s = _SHARED
    e = read_image(Path(det_dir) / f"{image_id}.pgm")[:, :, 0]
    gts = load_gt(gt_dir, image_id)
    return evaluate_image(e, gts, s["thresholds"], s["tol_fraction"], s["matcher"], image_id)


def _ablate_detect(task):
    path, = task
    s = _SHARED
    maps = detect_shared(read_image(path), s["net"], s["weights"], s["models"])
    return [thin_edges(e, s["nms_sigma"]) for e in maps]


# ------------------------------------------------------------ commands


def cmd_synth(out_dir, n_train, n_test, image_size=64, seed=0, n_val=0):
    return write_synthetic(out_dir, n_train, n_test, image_size, seed, n_val)


def training_set(cfg, net, weights, taps):
    """Features at the configured scales, sampled from every training image."""
    ids = image_ids(cfg.data, "train")
    if not ids:
        raise ContractError(f"no training images under {cfg.data}")
    paths = [image_path(cfg.data, "train", i) for i in ids]
    means = _map(_image_mean, paths, cfg.jobs, {})
    pixel_mean = np.mean(means, axis=0).astype(np.float32).astype(np.float64)
    shared = dict(net=net, weights=weights, taps=taps, scales=cfg.scale_list(), pixel_mean=pixel_mean,
                  seed=cfg.seed, pos_cap=cfg.pos_cap, neg_ratio=cfg.neg_ratio)
    results = _map(_train_sample, [(k, i, cfg.data) for k, i in enumerate(ids)], cfg.jobs, shared)
    for _, messages in results:
        for msg in messages:
            warnings.warn(msg, SkippedImageWarning, stacklevel=2)
    parts = [p for p, _ in results if p is not None]
    if not parts:
        raise ContractError("no training image has any boundary pixels")
    return TrainSet.concat(parts), pixel_mean


def write_log(history, path):
    lines = ["epoch\tobjective"] + [f"{k}\t{v:.10g}" for k, v in enumerate(history, 1)]
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_train(cfg, model_path):
    net, weights = load_net_weights(cfg)
    taps = cfg.tap_list(net)
    train, pixel_mean = training_set(cfg, net, weights, taps)
    model = train_svm(train, cfg.lam, cfg.epochs, substream(cfg.seed, STREAM_SGD), taps, pixel_mean,
                      cfg.scale_list())
    save_model(model, model_path)
    write_log(model.history, f"{model_path}.log.tsv")
    return model


def cmd_detect(cfg, model_path, out_dir, images=None, nms=True, features_dir=None):
    net, weights = load_net_weights(cfg)
    model = load_model(model_path)
    if not model.taps:
        model = replace(model, taps=tuple(net.tap_names))
    if images is None:
        images = [image_path(cfg.data, "test", i) for i in image_ids(cfg.data, "test")]
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    if features_dir is not None:
        Path(features_dir).mkdir(parents=True, exist_ok=True)
    shared = dict(net=net, weights=weights, model=model, nms_sigma=cfg.nms_sigma if nms else None)
    return _map(_detect_one, [(str(p), str(out_dir), features_dir) for p in images], cfg.jobs, shared)


def evaluate_dir(cfg, det_dir, gt_dir, order_seed=None):
    ids = sorted(p.stem for p in Path(det_dir).glob("*.pgm"))
    if not ids:
        raise ContractError(f"no detections in {det_dir}")
    if order_seed is not None:
        ids = [ids[k] for k in np.random.default_rng(order_seed).permutation(len(ids))]
    shared = dict(thresholds=cfg.thresholds(), tol_fraction=cfg.tol_fraction, matcher=cfg.matcher)
    return summarize(_map(_eval_one, [(i, str(det_dir), str(gt_dir)) for i in ids], cfg.jobs, shared))


def cmd_eval(cfg, det_dir, gt_dir, out_dir, order_seed=None):
    report = evaluate_dir(cfg, det_dir, gt_dir, order_seed)
    write_report(report, out_dir)
    return report


def random_baseline(cfg, shape, image_index):
    """Uniform random scores thinned by the same NMS: the chance-level detector."""
    rng = substream(cfg.seed, STREAM_BASELINE, image_index)
    return thin_edges(rng.random(shape), cfg.nms_sigma)


def cmd_ablate(cfg, out_dir):
    """Train and evaluate one detector per tap plus the all-tap combination.

    Training features are extracted once with every tap; each column trains
    on its slice of the descriptor.
    """
    net, weights = load_net_weights(cfg)
    taps = list(net.tap_names)
    if len(taps) != 5:
        raise ContractError("ablate needs a net with five taps")
    columns = dict(zip(ABLATION_COLUMNS[:5], ([t] for t in taps)))
    columns[ABLATION_COLUMNS[5]] = taps
    train, pixel_mean = training_set(cfg, net, weights, taps)
    scales = cfg.scale_list()
    offsets, start = {}, 0
    for tap, _, ch in feature_layout(net, taps, scales):
        offsets.setdefault(tap, []).extend(range(start, start + ch))
        start += ch
    models = []
    for col, col_taps in columns.items():
        cols = np.concatenate([offsets[t] for t in col_taps])
        models.append(train_svm(train.select_columns(cols), cfg.lam, cfg.epochs, substream(cfg.seed, STREAM_SGD),
                                col_taps, pixel_mean, scales))
    test_ids = image_ids(cfg.data, "test")
    shared = dict(net=net, weights=weights, models=models, nms_sigma=cfg.nms_sigma)
    maps = _map(_ablate_detect, [(str(image_path(cfg.data, "test", i)),) for i in test_ids], cfg.jobs, shared)
    results = {}
    th = cfg.thresholds()
    for k, col in enumerate(columns):
        tables = [evaluate_image(per_image[k], load_gt(Path(cfg.data) / "test" / "gt", i), th,
                                 cfg.tol_fraction, cfg.matcher, i)
                  for i, per_image in zip(test_ids, maps)]
        rep = summarize(tables)
        results[col] = (rep.ods, rep.ois, rep.ap)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.tsv").write_text(format_table(results, list(columns)))
    (out / "table.tex").write_text(format_table_latex(results, list(columns)))
    return results


# --------------------------------------------------------------- parser


def _add_run_options(p):
    p.add_argument("--config", help="key=value settings file; flags override it")
    for f in fields(RunConfig):
        kind = f.type if isinstance(f.type, str) else f.type.__name__
        conv = {"str": str, "int": int, "float": float}[kind]
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=conv, default=None,
                       help=f"{HELP[f.name]} (default: {f.default})")


def build_parser():
    parser = argparse.ArgumentParser(prog="pixedge", description="Per-pixel CNN feature edge detection.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic shapes dataset")
    p.add_argument("out_dir")
    p.add_argument("--n-train", type=int, default=50)
    p.add_argument("--n-val", type=int, default=0)
    p.add_argument("--n-test", type=int, default=20)
    p.add_argument("--size", type=int, default=64, help="image side in pixels")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train an SVM on the train split")
    _add_run_options(p)
    p.add_argument("--model", required=True, help="output model path; the log goes to MODEL.log.tsv")

    p = sub.add_parser("detect", help="write edge maps as 16-bit PGM")
    _add_run_options(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-nms", action="store_true", help="skip non-maximal suppression")
    p.add_argument("--features-out", help="also write each image's feature field as a PXF1 tensor here")
    p.add_argument("images", nargs="*", help="image files (default: the test split)")

    p = sub.add_parser("eval", help="benchmark edge maps against ground truth")
    _add_run_options(p)
    p.add_argument("--det", required=True, help="directory of <id>.pgm edge maps")
    p.add_argument("--gt", help="ground-truth directory (default: DATA/test/gt)")
    p.add_argument("--out", required=True, help="directory for pr.tsv and summary.tsv")
    p.add_argument("--order-seed", type=int, help="process images in a seeded random order")

    p = sub.add_parser("ablate", help="per-layer ODS/OIS/AP table")
    _add_run_options(p)
    p.add_argument("--out", required=True, help="directory for table.tsv and table.tex")
    return parser


def run(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "synth":
        written = cmd_synth(args.out_dir, args.n_train, args.n_test, args.size, args.seed, args.n_val)
        print(" ".join(f"{k}={len(v)}" for k, v in written.items()))
        return
    cfg = resolve_config(args)
    if args.command == "train":
        model = cmd_train(cfg, args.model)
        print(f"dim={model.dim} objective={model.history[-1]:.6g}")
    elif args.command == "detect":
        done = cmd_detect(cfg, args.model, args.out, args.images or None, not args.no_nms, args.features_out)
        print(f"wrote {len(done)} edge maps")
    elif args.command == "eval":
        gt = args.gt or Path(cfg.data) / "test" / "gt"
        rep = cmd_eval(cfg, args.det, gt, args.out, args.order_seed)
        print(f"ODS={rep.ods:.3f} OIS={rep.ois:.3f} AP={rep.ap:.3f}")
    elif args.command == "ablate":
        results = cmd_ablate(cfg, args.out)
        print(format_table(results, list(results)), end="")


def main(argv=None):
    try:
        run(argv)
    except FormatError as exc:
        print(f"pixedge: format error: {exc}", file=sys.stderr)
        return 3
    except ContractError as exc:
        print(f"pixedge: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"pixedge: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
