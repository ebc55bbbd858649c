"""``pbbn`` command-line entry point.

Every command first prints its resolved configuration as ``config.<key>=<value>``
lines. With ``--kv`` the report that follows is also line-oriented
``key=value`` text. Exit status: 0 success, 1 failed check, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import kernels
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import FRAME_SUFFIXES, ManifestError, load_arrays, load_manifest, synth_generate
from .model import PbbnConfig, build, closed_form_params, count_params, summarize
from .resample import InterpMethod, ResizePolicy, choose_target_size, read_pnm, resize, write_pnm
from .training import TrainConfig, cross_validate, evaluate, gradient_suite, metrics

# Published totals the builder must reproduce exactly.
PUBLISHED_PARAMS = {
    "P2B2": 437442,
    "P2B3": 1975170,
    "P2B4": 5934210,
    "P3B2": 1619650,
    "P3B3": 7583362,
    "P3B4": 23243650,
    "DWS-P2B2": 58178,
    "DWS-P3B3": 455170,
}


class UsageError(Exception):
    pass


def _size(text: str) -> tuple[int, int]:
    try:
        parts = [int(p) for p in text.lower().replace("×", "x").split("x")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or HxW, got {text!r}") from None
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"expected N or HxW, got {text!r}")
    return parts[0], parts[1]


def _method(text: str) -> InterpMethod:
    try:
        return InterpMethod.parse(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _positive(kind):
    def conv(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v
    return conv


class Report:
    """Collects key/value results and prints them as a table or as ``key=value`` lines."""

    def __init__(self, kv: bool):
        self.kv = kv

    def config(self, args) -> None:
        for k in sorted(vars(args)):
            if k in ("func", "kv"):
                continue
            v = getattr(args, k)
            if isinstance(v, InterpMethod):
                v = v.value
            elif isinstance(v, tuple):
                v = "x".join(map(str, v))
            print(f"config.{k}={v}")

    def text(self, line: str = "") -> None:
        if not self.kv:
            print(line)

    def value(self, key: str, value, label: str | None = None) -> None:
        if self.kv:
            print(f"{key}={value}")
        elif label is not None:
            print(f"{label}: {value}")


# -- commands -----------------------------------------------------------------------

def _arch(args, channels=None) -> PbbnConfig:
    h, w = args.input_size
    try:
        return PbbnConfig(pyramids=args.pyramids, branches=args.branches, dws=args.dws,
                          base_channels=args.base_channels, input_h=h, input_w=w,
                          frames=args.frames, channels=channels or args.channels)
    except ValueError as e:
        raise UsageError(str(e)) from None


def cmd_summary(args, out: Report) -> int:
    cfg = _arch(args)
    rep = count_params(cfg)
    out.text(summarize(cfg))
    out.value("name", cfg.name)
    if out.kv:
        for i, r in enumerate(rep.rows):
            print(f"row.{i}={r.block}|{r.kind}|{r.filters}|{r.stride}|"
                  f"{'x'.join(map(str, r.output))}|{r.params}")
    out.value("total_params", rep.total)
    out.value("total_macs", rep.total_macs)
    return 0


def cmd_verify_params(args, out: Report) -> int:
    passed = 0
    for name, expected in PUBLISHED_PARAMS.items():
        dws = name.startswith("DWS-")
        p, b = int(name[-3]), int(name[-1])
        cfg = PbbnConfig(pyramids=p, branches=b, dws=dws)
        got = count_params(cfg).total
        closed = closed_form_params(cfg)
        ok = got == expected == closed
        passed += ok
        out.value(f"{name}", f"{got} expected={expected} closed_form={closed} "
                             f"{'ok' if ok else 'MISMATCH'}", label=name)
    out.value("passed", f"{passed}/{len(PUBLISHED_PARAMS)}", label="passed")
    return 0 if passed == len(PUBLISHED_PARAMS) else 1


def cmd_preprocess(args, out: Report) -> int:
    src, dst = Path(args.data), Path(args.out)
    if not src.is_dir():
        raise UsageError(f"--data {src} is not a directory")
    files = sorted(p for p in src.rglob("*") if p.is_file())
    images = [p for p in files if p.suffix.lower() in FRAME_SUFFIXES]
    if not images:
        raise UsageError(f"no PGM/PPM files under {src}")
    if args.target is None:
        sizes = [read_pnm(p).pixels.shape[:2] for p in images]
        th, tw = choose_target_size(sizes)
    else:
        th, tw = args.target
    policy = ResizePolicy(th, tw, args.up, args.down)
    counts = {"up": 0, "down": 0, "copy": 0}
    for p in files:
        target = dst / p.relative_to(src)
        target.parent.mkdir(parents=True, exist_ok=True)
        if p.suffix.lower() not in FRAME_SUFFIXES:
            shutil.copyfile(p, target)
            continue
        img = read_pnm(p)
        if img.height * img.width < th * tw:
            counts["up"] += 1
            img = resize(img, th, tw, policy.up)
        elif (img.height, img.width) != (th, tw):
            counts["down"] += 1
            img = resize(img, th, tw, policy.down)
        else:
            counts["copy"] += 1
        write_pnm(target, img)
    out.value("target", f"{th}x{tw}", label="target size")
    out.value("images", len(images), label="images written")
    for k, v in counts.items():
        out.value(f"resized_{k}", v, label=f"  {k}")
    return 0


def cmd_synth(args, out: Report) -> int:
    if args.n < 2:
        raise UsageError(f"--n must be >= 2, got {args.n}")
    man = synth_generate(args.n, args.seed, args.out, frame_count=args.frames)
    tally = man.tally()
    out.value("manifest", man.path, label="manifest")
    out.value("samples", len(man), label="samples")
    for (side, label), n in sorted(tally.items()):
        out.value(f"count.{side}.{label}", n, label=f"  {side} {label}")
    return 0


def _manifest_path(data) -> Path:
    p = Path(data)
    return p / "manifest.csv" if p.is_dir() else p


def _print_metrics(out: Report, prefix: str, label: str, m) -> None:
    out.value(f"{prefix}.precision", f"{m.precision:.4f}", label=None)
    out.value(f"{prefix}.recall", f"{m.recall:.4f}", label=None)
    out.value(f"{prefix}.f1", f"{m.f1:.4f}", label=None)
    out.text(f"{label:<8} precision {m.precision:.4f}  recall {m.recall:.4f}  f1 {m.f1:.4f}"
             + ("  (degenerate)" if m.degenerate else ""))


def cmd_train(args, out: Report) -> int:
    if args.target is not None and args.target != args.input_size:
        raise UsageError("--target and --input-size disagree; the model input is the resize target")
    h, w = args.input_size
    man = load_manifest(_manifest_path(args.data), args.frames)
    if len(man) < args.folds:
        raise UsageError(f"{len(man)} samples cannot fill {args.folds} folds")
    policy = ResizePolicy(h, w, args.up, args.down)
    dtype = np.float64 if args.float64 else np.float32
    x, y = load_arrays(man, policy, dtype)
    cfg = _arch(args, channels=x.shape[-1])
    tcfg = TrainConfig(batch_size=args.batch, learning_rate=args.lr, max_epochs=args.epochs,
                       early_stop_patience=min(args.patience, args.epochs), folds=args.folds,
                       seed=args.seed)
    test = None
    if args.test:
        tm = load_manifest(_manifest_path(args.test), args.frames)
        test = load_arrays(tm, policy, dtype)
    out.text(f"training {cfg.name} on {len(man)} samples, {args.folds} folds")

    def fold_done(r):
        h = r.history
        _print_metrics(out, f"fold.{r.fold}", f"fold {r.fold}", r.metrics)
        out.value(f"fold.{r.fold}.epochs", h.epochs, label=None)
        out.value(f"fold.{r.fold}.best_epoch", h.best_epoch, label=None)
        out.text(f"         epochs {h.epochs}  best epoch {h.best_epoch}  "
                 f"best val loss {min(h.val_loss):.4f}")

    res = cross_validate(cfg, x, y, tcfg, test=test, dtype=dtype, callback=fold_done)
    for key, (mean, std) in res.summary().items():
        out.value(f"mean.{key}", f"{mean:.4f}", label=None)
        out.value(f"std.{key}", f"{std:.4f}", label=None)
    s = res.summary()
    out.text("mean ± std  " + "  ".join(f"{k} {m:.4f} ± {sd:.4f}" for k, (m, sd) in s.items()))
    if args.out:
        od = Path(args.out)
        od.mkdir(parents=True, exist_ok=True)
        save_checkpoint(res.best_model, policy, od / "model.pbbn")
        for r in res.folds:
            (od / f"history_fold{r.fold:02d}.csv").write_text(r.history.to_csv())
        out.value("checkpoint", od / "model.pbbn", label="checkpoint")
    return 0


def cmd_eval(args, out: Report) -> int:
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    model, policy = load_checkpoint(args.checkpoint)
    if policy is None:
        h, w = model.config.input_h, model.config.input_w
        policy = ResizePolicy(h, w, args.up, args.down)
    man = load_manifest(_manifest_path(args.data), model.config.frames)
    x, y = load_arrays(man, policy, model.dtype)
    loss, conf, _ = evaluate(model, x, y, args.batch)
    out.value("model", model.config.name, label="model")
    out.value("samples", len(y), label="samples")
    out.value("loss", f"{loss:.6f}", label="loss")
    out.value("confusion", f"tp={conf.tp} tn={conf.tn} fp={conf.fp} fn={conf.fn}", label="confusion")
    _print_metrics(out, "test", "test", metrics(conf))
    return 0


def cmd_gradcheck(args, out: Report) -> int:
    results = gradient_suite(args.seed, args.tol)
    for label, err, ok in results:
        key = label.replace(" ", "_")
        out.value(f"check.{key}", f"{err:.3e} {'ok' if ok else 'FAIL'}", label=f"{label:<22}")
    failed = [r[0] for r in results if not r[2]]
    out.value("passed", f"{len(results) - len(failed)}/{len(results)}", label="passed")
    return 1 if failed else 0


def _latency(model, x, repeats, warmup):
    for _ in range(warmup):
        model.forward(x, mode="infer")
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        probs = model.forward(x, mode="infer")
        times.append((time.perf_counter() - t) / len(x))
    return np.array(times), probs


def cmd_bench(args, out: Report) -> int:
    std_cfg = _arch(args)
    rng = np.random.default_rng(args.seed)
    x = rng.random((args.batch, *std_cfg.input_shape)).astype(np.float32)
    params = {}
    for dws in (False, True):
        cfg = replace(std_cfg, dws=dws)
        model = build(cfg, seed=args.seed)
        times, probs = _latency(model, x, args.repeats, args.warmup)
        params[dws] = model.num_params
        tag = "dws" if dws else "standard"
        ms = times * 1e3
        out.value(f"{tag}.name", cfg.name, label=None)
        out.value(f"{tag}.params", params[dws], label=None)
        out.value(f"{tag}.macs", count_params(cfg).total_macs, label=None)
        out.value(f"{tag}.mean_ms", f"{ms.mean():.3f}", label=None)
        out.value(f"{tag}.median_ms", f"{np.median(ms):.3f}", label=None)
        out.value(f"{tag}.p95_ms", f"{np.percentile(ms, 95):.3f}", label=None)
        out.value(f"{tag}.checksum", f"{float(np.sum(probs[:, 1], dtype=np.float64)):.6f}", label=None)
        out.text(f"{cfg.name:<10} params {params[dws]:>9}  latency/seq mean {ms.mean():.2f} ms  "
                 f"median {np.median(ms):.2f} ms  p95 {np.percentile(ms, 95):.2f} ms")
    ratio = params[True] / params[False]
    out.value("param_ratio", f"{ratio:.4f}", label="DWS/standard params")
    return 0


# -- parser -------------------------------------------------------------------------

def _common(p, seed=True):
    p.add_argument("--kv", action="store_true", help="emit the report as key=value lines")
    p.add_argument("--backend", choices=["compiled", "python"], default=None,
                   help="kernel backend (default: compiled when built)")
    if seed:
        p.add_argument("--seed", type=int, default=0)


def _arch_flags(p, input_size=(96, 96)):
    p.add_argument("--pyramids", type=_positive(int), default=2)
    p.add_argument("--branches", type=_positive(int), default=2)
    p.add_argument("--dws", action="store_true", help="depthwise-separable branch convolutions")
    p.add_argument("--frames", type=_positive(int), default=13)
    p.add_argument("--input-size", type=_size, default=input_size, help="N or HxW")
    p.add_argument("--channels", type=_positive(int), default=3)
    p.add_argument("--base-channels", type=_positive(int), default=64)


def _policy_flags(p):
    p.add_argument("--up", type=_method, default=InterpMethod.BICUBIC)
    p.add_argument("--down", type=_method, default=InterpMethod.BILINEAR)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pbbn", allow_abbrev=False,
                                 description="Pyramid-bottleneck 3D CNN toolkit")
    sub = ap.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, allow_abbrev=False)
        p.set_defaults(func=func)
        return p

    p = add("summary", cmd_summary, "layer table and parameter totals")
    _arch_flags(p)
    _common(p, seed=False)

    p = add("verify-params", cmd_verify_params, "check the eight published parameter counts")
    _common(p, seed=False)

    p = add("preprocess", cmd_preprocess, "resize every PGM/PPM under a directory tree")
    p.add_argument("--data", required=True, help="input directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--target", type=_size, default=None,
                   help="HxW (default: rounded mean size of the inputs)")
    _policy_flags(p)
    _common(p, seed=False)

    p = add("synth", cmd_synth, "generate a synthetic blink dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=_positive(int), default=13)
    _common(p)

    p = add("train", cmd_train, "k-fold training with early stopping")
    p.add_argument("--data", required=True, help="manifest CSV or directory holding manifest.csv")
    p.add_argument("--test", default=None, help="optional held-out manifest for fold metrics")
    p.add_argument("--out", default=None, help="directory for the best checkpoint and histories")
    p.add_argument("--target", type=_size, default=None, help="must equal --input-size if given")
    p.add_argument("--folds", type=_positive(int), default=15)
    p.add_argument("--batch", type=_positive(int), default=16)
    p.add_argument("--lr", type=_positive(float), default=0.001)
    p.add_argument("--epochs", type=_positive(int), default=200)
    p.add_argument("--patience", type=_positive(int), default=50)
    p.add_argument("--float64", action="store_true")
    _arch_flags(p)
    _policy_flags(p)
    _common(p)

    p = add("eval", cmd_eval, "evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--batch", type=_positive(int), default=16)
    _policy_flags(p)
    _common(p, seed=False)

    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient suite")
    p.add_argument("--tol", type=_positive(float), default=1e-4)
    _common(p)

    p = add("bench", cmd_bench, "infer-mode latency of standard vs DWS variants")
    _arch_flags(p)
    p.add_argument("--repeats", type=_positive(int), default=10)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--batch", type=_positive(int), default=1)
    _common(p)
    return ap


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    out = Report(args.kv)
    if args.backend:
        kernels.use_backend(args.backend)
    out.config(args)
    try:
        return args.func(args, out)
    except (UsageError, ManifestError, CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"pbbn {args.command}: error: {e}", file=sys.stderr)
        return 2


def main(argv=None) -> int:
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
