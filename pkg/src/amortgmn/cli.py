"""Command-line entry point: ``amortgmn <command> [flags]``.

Commands: zoo-gen, train, eval, gauge-analyze, symmetry-test.

Every command writes ``config.resolved.txt`` (``key=value`` lines) into its
output directory; passing that file back through ``--config`` reruns the
command. Values from ``--config`` replace defaults; flags given on the
command line win over both. ``AMORTGMN_OUT`` sets the default output root.

Exit codes: 0 success, 1 runtime error, 2 invalid input or empty result.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import zlib
from pathlib import Path

import numpy as np

from . import amortize as A
from . import data, gauge, nets, zoo
from . import metanet as M
from .nets import LayerSpec

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2


class InputError(ValueError):
    """Invalid command-line input."""


def substream(seed: int, name: str) -> int:
    """Independent named seed derived from the master ``--seed``."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def _ints(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(t) for t in text]
    return [int(t) for t in str(text).split(",") if t.strip()]


def _out_dir(args, default_name: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get("AMORTGMN_OUT", "runs")) / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_snapshot(out: Path, args) -> Path:
    path = out / "config.resolved.txt"
    lines = [f"command={args.command}"]
    for k, v in sorted(vars(args).items()):
        if k in ("command", "config", "func") or v is None:
            continue
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k}={v}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_config(path) -> dict:
    out = {}
    for i, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InputError(f"{path}:{i}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


# -- zoo-gen -----------------------------------------------------------------

def _arch(kind: str, activation: str, widths=None):
    if kind == "mlp":
        return nets.mlp_arch(_ints(widths), activation, name="mlp") if widths else nets.mlp_zoo_arch(activation)
    if kind == "cnn":
        return nets.cnn_zoo_arch(activation)
    raise InputError(f"unknown architecture {kind!r}")


def cmd_zoo_gen(args) -> int:
    out = _out_dir(args, "zoo")
    arch = _arch(args.arch, args.activation, args.widths)
    hw = arch.input_shape[1:]
    if args.images:
        src = Path(args.images)
        splits = tuple(data.load_images(src / f"{s}.bin").resized(hw) for s in ("train", "val", "test"))
    else:
        splits = data.toy_dataset(substream(args.seed, "images"), args.n_train, args.n_val, args.n_test,
                                  noise=args.noise, hw=hw)
    records = zoo.generate_zoo(args.models, arch, splits, _ints(args.checkpoints), substream(args.seed, "zoo"),
                               log=print if args.verbose else None)
    n_div = sum(r.diverged for r in records)
    kept = zoo.filter_and_split(records, args.threshold, (args.train_frac, args.val_frac, args.test_frac),
                                substream(args.seed, "split"))
    zoo.save_zoo(out, arch, kept, {"generated": len(records), "diverged": n_div, "threshold": args.threshold})
    (out / "images").mkdir(exist_ok=True)
    for name, batch in zip(("train", "val", "test"), splits):
        data.save_images(out / "images" / f"{name}.bin", batch)
    write_snapshot(out, args)
    counts = {s: sum(r.split == s for r in kept) for s in ("train", "val", "test")}
    print(f"zoo: {len(kept)}/{len(records)} checkpoints kept ({n_div} diverged) -> {out}")
    print("splits: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def _load_store(path):
    store = zoo.load_zoo(path)
    images = tuple(data.load_images(Path(path) / "images" / f"{s}.bin") for s in ("train", "val", "test"))
    return store, images


# -- train -------------------------------------------------------------------

def cmd_train(args) -> int:
    out = _out_dir(args, "train")
    store, (img_train, img_val, _) = _load_store(args.zoo)
    tr, _ = zoo.split_arrays(store.records, "train")
    va, _ = zoo.split_arrays(store.records, "val")
    if len(tr) == 0 or len(va) == 0:
        raise InputError("zoo has an empty train or validation split")
    cfg = M.MetanetConfig(hidden_dim=args.hidden_dim, gnn_layers=args.gnn_layers, dropout=0.0,
                          symmetry=args.symmetry, bidirectional=not args.unidirectional,
                          gamma_init=args.gamma_init, activation=store.arch.activation)
    net = M.Metanet(cfg, store.arch, seed=substream(args.seed, "metanet-init"))
    spec = A.ObjectiveSpec(lam=args.lam, batch_fraction=args.batch_fraction)
    sched = A.TrainSchedule(max_epochs=args.epochs, patience=min(args.patience, args.epochs - 1) if args.epochs > 1 else 0,
                            lr=args.lr, weight_decay=args.weight_decay, dropout=args.dropout,
                            batch_size=args.batch_size, seed=substream(args.seed, "train"),
                            max_seconds=args.max_minutes * 60 if args.max_minutes else None)
    res = A.train_metanet(net, tr, va, img_train, img_val, sched, spec, log=print if args.verbose else None)
    M.save_checkpoint(out / "metanet", net, {"best_epoch": res.best_epoch, "best_val": res.best_val,
                                             "stopped_epoch": res.stopped_epoch, "lam": args.lam})
    A.write_curves(out / "curves.csv", res.curves)
    write_snapshot(out, args)
    print(f"metanet: {net.num_params} parameters, best epoch {res.best_epoch} "
          f"(val {res.best_val:.5f}), stopped at {res.stopped_epoch}, {res.seconds:.1f}s -> {out}")
    return EXIT_OK


# -- eval --------------------------------------------------------------------

def cmd_eval(args) -> int:
    out = _out_dir(args, "eval")
    store, (img_train, _, img_test) = _load_store(args.zoo)
    thetas, ids = zoo.split_arrays(store.records, args.split)
    if len(thetas) == 0:
        raise InputError(f"split {args.split!r} is empty")
    net = M.load_checkpoint(args.checkpoint)
    if net.arch.to_dict() != store.arch.to_dict():
        raise InputError("checkpoint architecture does not match the zoo")
    spec = A.ObjectiveSpec(lam=args.lam)
    report, after = A.evaluate(net, thetas, store.arch, img_test, spec, "metanet", ids,
                               timing=not args.no_timing)
    rows = list(report.rows)
    summaries = [report.summary()]
    tdir = out / "thetas"
    tdir.mkdir(exist_ok=True)
    for i, th in zip(ids, after):
        (tdir / f"{i}.f32").write_bytes(np.ascontiguousarray(th, dtype="<f4").tobytes())
    if args.baseline:
        base = A.sgd_baseline(thetas, store.arch, img_train, img_test, _ints(args.baseline_epochs),
                              lr=args.baseline_lr, batch=args.baseline_batch, lam=args.lam,
                              seed=substream(args.seed, "baseline"))
        for epoch, th in base.checkpoints.items():
            if epoch == 0:
                continue
            brows = A.per_network_rows(thetas, th, store.arch, img_test, spec, f"sgd-{epoch}", ids)
            rows += brows
            summaries.append(A.report_from_rows(brows, f"sgd-{epoch}").summary())
    A.write_eval(out / "eval.csv", rows)
    A.write_csv(out / "summary.csv", summaries, list(summaries[0].keys()))
    write_snapshot(out, args)
    for s in summaries:
        print(f"{s['method']:>10}: avg acc {s['avg_acc_before']:.2f} -> {s['avg_acc']:.2f}  "
              f"max {s['max_acc']:.2f}  loss {s['mean_loss_before']:.4f} -> {s['mean_loss']:.4f}  "
              f"sparsity {s['sparsity']:.2f}%  t/fwd {s['time_per_forward'] * 1e3:.2f} ms")
    return EXIT_OK


# -- gauge-analyze -----------------------------------------------------------

def parse_space(text: str, activation: str, include_bias: bool = True) -> gauge.ScalingSpace:
    """``mlp:NxM`` or ``cnn:HxW:kKHxKW:sS:pP`` (kernel/stride/padding optional)."""
    parts = text.split(":")
    try:
        if parts[0] == "mlp":
            n, m = (int(v) for v in parts[1].split("x"))
            return gauge.ScalingSpace.mlp(n, m, activation, include_bias)
        if parts[0] == "cnn":
            hw = tuple(int(v) for v in parts[1].split("x"))
            kernel, stride, pad = (2, 2), 1, 0
            for p in parts[2:]:
                if p[0] == "k":
                    kernel = tuple(int(v) for v in p[1:].split("x"))
                elif p[0] == "s":
                    stride = int(p[1:])
                elif p[0] == "p":
                    pad = int(p[1:])
                else:
                    raise ValueError(p)
            return gauge.ScalingSpace.cnn(hw, kernel, stride, pad, activation, include_bias)
    except (ValueError, IndexError) as exc:
        raise InputError(f"cannot parse space {text!r}") from exc
    raise InputError(f"unknown space kind in {text!r}")


GAUGE_HEADER = ["space", "activation", "bias_included", "admissible", "candidates", "dimension",
                "effective_dimension", "uniform_only"]


def cmd_gauge_analyze(args) -> int:
    out = _out_dir(args, "gauge")
    rows, lines = [], []
    verdicts = []
    for act in args.activations.split(","):
        for text in args.spaces.split(","):
            for bias in ((True, False) if args.weights_only else (True,)):
                space = parse_space(text, act, bias)
                try:
                    s = gauge.admissible_scalings_bruteforce(space, n_samples=args.samples, seed=args.seed)
                except ValueError as exc:
                    rows.append({"space": space.label(), "activation": act, "bias_included": bias,
                                 "admissible": "skipped", "candidates": "", "dimension": "",
                                 "effective_dimension": "", "uniform_only": str(exc)})
                    continue
                rows.append({"space": space.label(), "activation": act, "bias_included": bias,
                             "admissible": s.count, "candidates": len(s.candidates) ** (space.rows + space.cols),
                             "dimension": s.dimension, "effective_dimension": s.effective_dimension,
                             "uniform_only": s.uniform_only})
                if space.kind == "cnn" and bias:
                    v = gauge.lemma_check(space, seed=args.seed)
                    verdicts.append((space.label(), act, v))
    widths = [max(len(h), *(len(str(r[h])) for r in rows)) for h in GAUGE_HEADER]
    lines.append("  ".join(h.ljust(w) for h, w in zip(GAUGE_HEADER, widths)))
    for r in rows:
        lines.append("  ".join(str(r[h]).ljust(w) for h, w in zip(GAUGE_HEADER, widths)))
    for label, act, v in verdicts:
        mlp = "" if v.mlp_count is None else f", MLP admissible={v.mlp_count}"
        word = "STRICT SUBSET" if v.strict_subset else "NOT A STRICT SUBSET"
        lines.append(f"verdict [{act}] {label}: CNN-admissible scalings are a {word} of MLP-admissible scalings "
                     f"(CNN admissible={v.cnn.count}{mlp}, contained={v.contained}, "
                     f"witness={'none' if v.witness is None else v.witness.tolist()})")
    text = "\n".join(lines)
    print(text)
    (out / "gauge_report.txt").write_text(text + "\n")
    A.write_csv(out / "gauge_report.csv", rows, GAUGE_HEADER)
    write_snapshot(out, args)
    return EXIT_OK if all(v.strict_subset for _, _, v in verdicts) else EXIT_RUNTIME


# -- symmetry-test -----------------------------------------------------------

def run_symmetry_suite(activation: str = "tanh", symmetry: str = "equivariant", trials: int = 10,
                       seed: int = 0, widths=(8, 6, 5, 4), hidden_dim: int = 8, gnn_layers: int = 2,
                       tol: float = 1e-10, params: M.MetanetParams | None = None) -> list[dict]:
    """Run the gauge property suite in double precision.

    Each case reports the worst deviation over ``trials`` random (theta, gauge)
    draws and whether it was expected to pass for this configuration.
    """
    arch = nets.mlp_arch(list(widths), activation)
    rng = np.random.default_rng(seed)
    # unit head and gamma: a freshly initialised training config is close to the identity map,
    # which would hide symmetry breaking behind a tiny update
    op_cfg = M.MetanetConfig(hidden_dim=hidden_dim, gnn_layers=gnn_layers, activation=activation,
                             symmetry=symmetry, gamma_init=1.0, head_init=1.0)
    fn_cfg = M.MetanetConfig(hidden_dim=hidden_dim, gnn_layers=gnn_layers, activation=activation,
                             symmetry=symmetry, head="functional")
    op_p = params if params is not None else M.init_metanet(op_cfg, arch, seed, np.float64)
    fn_p = M.init_metanet(fn_cfg, arch, seed + 1, np.float64)
    worst = {k: 0.0 for k in ("function_preservation", "encode_commutes", "operator_permutation",
                              "operator_gauge", "functional_permutation", "functional_gauge")}
    x = rng.random((32,) + arch.input_shape)
    from .graph import encode

    for _ in range(trials):
        th = rng.normal(0, 0.5, size=arch.num_params)
        psi = gauge.sample_gauge(arch, activation, rng)
        perm = gauge.sample_gauge(arch, activation, rng, scale=False)
        worst["function_preservation"] = max(worst["function_preservation"],
                                             gauge.function_preserved(arch, th, psi, x))
        g1 = gauge.apply_to_graph(psi, encode(arch, th))
        g2 = encode(arch, gauge.apply_to_params(psi, arch, th))
        dev = max(np.abs(a - b).max() for a, b in zip(g1.edge_features + g1.vertex_features,
                                                       g2.edge_features + g2.vertex_features))
        worst["encode_commutes"] = max(worst["encode_commutes"], dev)
        base = M.operator_forward(arch, th, op_cfg, op_p).data
        for key, ps in (("operator_permutation", perm), ("operator_gauge", psi)):
            a = M.operator_forward(arch, gauge.apply_to_params(ps, arch, th), op_cfg, op_p).data
            b = gauge.apply_to_params(ps, arch, base)
            worst[key] = max(worst[key], float(np.abs(a - b).max()))
        f0 = M.functional_forward(arch, th, fn_cfg, fn_p).item()
        for key, ps in (("functional_permutation", perm), ("functional_gauge", psi)):
            f1 = M.functional_forward(arch, gauge.apply_to_params(ps, arch, th), fn_cfg, fn_p).item()
            worst[key] = max(worst[key], abs(f1 - f0))
    results = []
    for key, dev in worst.items():
        expect = symmetry == "equivariant" or key not in ("operator_gauge", "functional_gauge")
        passed = dev <= tol
        results.append({"case": key, "max_deviation": dev, "passed": passed, "expected_pass": expect,
                        "as_expected": passed == expect})
    return results


def cmd_symmetry_test(args) -> int:
    out = _out_dir(args, "symmetry")
    results = run_symmetry_suite(args.activation, args.symmetry, args.trials, args.seed,
                                 hidden_dim=args.hidden_dim, gnn_layers=args.gnn_layers, tol=args.tol)
    for r in results:
        status = "PASS" if r["passed"] else "FAIL"
        note = "as expected" if r["as_expected"] else "UNEXPECTED"
        print(f"{status}  {r['case']:<24} max dev {r['max_deviation']:.3e}  ({note})")
    A.write_csv(out / "symmetry.csv", results, ["case", "max_deviation", "passed", "expected_pass", "as_expected"])
    write_snapshot(out, args)
    ok = all(r["as_expected"] for r in results)
    print("suite matches expectations" if ok else "suite does NOT match expectations")
    return EXIT_OK if ok else EXIT_RUNTIME


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="amortgmn", description="Weight-space metanetwork toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--config", default=None, help="key=value file overriding defaults")
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("zoo-gen", help="train, filter and store a model zoo")
    common(p)
    p.add_argument("--models", type=int, default=100)
    p.add_argument("--arch", choices=["mlp", "cnn"], default="mlp")
    p.add_argument("--widths", default=None, help="MLP widths, e.g. 64,32,10 (default: zoo arch)")
    p.add_argument("--activation", choices=["tanh", "relu"], default="tanh")
    p.add_argument("--checkpoints", default="1,3,5")
    p.add_argument("--threshold", type=float, default=0.15)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--val-frac", type=float, default=0.1)
    p.add_argument("--test-frac", type=float, default=0.1)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-val", type=int, default=500)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--noise", type=float, default=0.45)
    p.add_argument("--images", default=None, help="directory with train.bin/val.bin/test.bin")
    p.set_defaults(func=cmd_zoo_gen)

    p = sub.add_parser("train", help="train the metanetwork on a zoo")
    common(p)
    p.add_argument("--zoo", required=True)
    p.add_argument("--hidden-dim", type=int, default=32)
    p.add_argument("--gnn-layers", type=int, default=3)
    p.add_argument("--symmetry", choices=["equivariant", "broken"], default="equivariant")
    p.add_argument("--unidirectional", action="store_true")
    p.add_argument("--gamma-init", type=float, default=0.01)
    p.add_argument("--lam", type=float, default=0.0)
    p.add_argument("--batch-fraction", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--patience", type=int, default=30)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--weight-decay", type=float, default=1e-2)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--max-minutes", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a metanetwork checkpoint on a zoo split")
    common(p)
    p.add_argument("--zoo", required=True)
    p.add_argument("--checkpoint", required=True, help="checkpoint path without suffix")
    p.add_argument("--split", default="test")
    p.add_argument("--lam", type=float, default=0.0)
    p.add_argument("--baseline", action="store_true")
    p.add_argument("--baseline-epochs", default="1,2,4")
    p.add_argument("--baseline-lr", type=float, default=0.01)
    p.add_argument("--baseline-batch", type=int, default=64)
    p.add_argument("--no-timing", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gauge-analyze", help="brute-force admissible scalings")
    common(p)
    p.add_argument("--spaces", default="mlp:3x4,mlp:4x9,cnn:3x3:k2x2:s1:p0")
    p.add_argument("--activations", default="tanh,relu")
    p.add_argument("--samples", type=int, default=5)
    p.add_argument("--weights-only", action="store_true", help="also report spaces without the bias")
    p.set_defaults(func=cmd_gauge_analyze)

    p = sub.add_parser("symmetry-test", help="run the gauge property suite")
    common(p)
    p.add_argument("--activation", choices=["tanh", "relu"], default="tanh")
    p.add_argument("--symmetry", choices=["equivariant", "broken"], default="equivariant")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--hidden-dim", type=int, default=8)
    p.add_argument("--gnn-layers", type=int, default=2)
    p.add_argument("--tol", type=float, default=1e-10)
    p.set_defaults(func=cmd_symmetry_test)
    return ap


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    choices = ap._subparsers._group_actions[0].choices
    if known.config and argv and argv[0] in choices:
        sub = choices[argv[0]]
        actions = {a.dest: a for a in sub._actions}
        values = read_config(known.config)
        command = values.pop("command", argv[0])
        if command != argv[0]:
            raise InputError(f"config is for {command!r}, not {argv[0]!r}")
        defaults = {}
        for k, v in values.items():
            if k not in actions or k in ("config", "help"):
                raise InputError(f"unknown config key {k!r}")
            a = actions[k]
            if isinstance(a, argparse._StoreTrueAction):
                defaults[k] = v.lower() in ("1", "true", "yes")
            elif a.type is not None:
                defaults[k] = a.type(v)
            else:
                defaults[k] = v
            a.required = False
        sub.set_defaults(**defaults)
    return ap.parse_args(argv)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except zoo.EmptyZooError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
