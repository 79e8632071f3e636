"""Command-line surface: data synthesis, training, evaluation, gradient
checking, and ablation sweeps.

All configuration arrives through flags or a key=value config file
(precedence: built-in defaults < config file < flags); no environment
variables are consulted. Every training run writes a manifest sufficient
to reproduce it exactly, and artifacts contain no timestamps, so reruns
with identical inputs are byte-identical.
"""

import argparse
import hashlib
import os
import sys
import time
from dataclasses import replace

import numpy as np

from .autodiff import Graph, grad_check
from .data import pad_to_max, read_ecgb, stratified_split, synth_generate, write_ecgb
from .layers import cross_entropy, softmax
from .model import ModelConfig, build_model, load_model, save_model, tiny_config
from .training import (
    ABLATION_AXES,
    Hyperparams,
    evaluate,
    run_ablation,
    train,
)

__all__ = ["main", "write_manifest", "read_manifest"]

_GRADCHECK_MAX_COMPONENTS = 50_000


# -- manifest ------------------------------------------------------------------


def write_manifest(path, entries):
    """Atomically write a u32-length-prefixed UTF-8 key=value document."""
    text = "".join(f"{k}={v}\n" for k, v in entries.items())
    payload = text.encode("utf-8")
    blob = len(payload).to_bytes(4, "little") + payload
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_manifest(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IOError(f"manifest {path} is truncated")
    n = int.from_bytes(raw[:4], "little")
    if len(raw) != 4 + n:
        raise IOError(f"manifest {path} has inconsistent length prefix")
    entries = {}
    for line in raw[4:].decode("utf-8").splitlines():
        if line:
            k, v = line.split("=", 1)
            entries[k] = v
    return entries


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _split_hash(dataset):
    h = hashlib.sha256()
    for rid in sorted(dataset.splits):
        h.update(f"{rid}:{dataset.splits[rid]}\n".encode("utf-8"))
    return h.hexdigest()


# -- shared argument groups ------------------------------------------------


def _add_hyper_args(p):
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--wd", type=float, default=None, help="weight decay")
    p.add_argument("--lr-drop-epoch", type=int, default=None)
    p.add_argument("--lr-drop-factor", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)


def _add_model_args(p):
    p.add_argument("--config", help="key=value model config file")
    p.add_argument("--backbone", choices=("resnet18", "resnet34", "resnet50"))
    p.add_argument("--satse-blocks", type=int, choices=range(5),
                   help="enable the first N spectral blocks (0-4)")
    p.add_argument("--fixed-phi", type=float,
                   help="freeze the threshold ratio at this value")
    p.add_argument("--phi-init", type=float)
    p.add_argument("--gamma-init", type=float)
    p.add_argument("--mask-mode", choices=("symmetric", "literal"))
    p.add_argument("--double-softmax", action="store_true", default=None)
    p.add_argument("--no-stem-maxpool", action="store_true", default=None)
    p.add_argument("--stage-widths", help="comma list, e.g. 16,32,64,128")
    p.add_argument("--input-length", type=int)
    p.add_argument("--precision", choices=("real32", "real64"))


def _hyper_from_args(args):
    hyper = Hyperparams(seed=args.seed)
    overrides = {
        "epochs": args.epochs,
        "batch_size": args.batch,
        "lr": args.lr,
        "weight_decay": args.wd,
        "lr_drop_epoch": args.lr_drop_epoch,
        "lr_drop_factor": args.lr_drop_factor,
    }
    # A short run with no explicit drop epoch keeps the whole run at the
    # base rate instead of tripping the drop-epoch <= epochs invariant.
    if args.epochs is not None and args.lr_drop_epoch is None:
        overrides["lr_drop_epoch"] = min(hyper.lr_drop_epoch, args.epochs)
    return replace(hyper, **{k: v for k, v in overrides.items() if v is not None})


def _config_from_args(args, n_classes, input_length):
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            config = ModelConfig.from_text(fh.read())
        config = replace(config, n_classes=n_classes)
    else:
        config = ModelConfig(n_classes=n_classes)
    updates = {}
    if args.backbone:
        updates["backbone"] = args.backbone
    if args.satse_blocks is not None:
        updates["satse_blocks_enabled"] = tuple(
            i < args.satse_blocks for i in range(4)
        )
    if args.fixed_phi is not None:
        updates["fixed_phi"] = args.fixed_phi
    if args.phi_init is not None:
        updates["phi_init"] = args.phi_init
    if args.gamma_init is not None:
        updates["gamma_init"] = args.gamma_init
    if args.mask_mode:
        updates["mask_index_mode"] = args.mask_mode
    if args.double_softmax:
        updates["double_softmax"] = True
    if args.no_stem_maxpool:
        updates["stem_maxpool"] = False
    if args.stage_widths:
        widths = tuple(int(v) for v in args.stage_widths.split(","))
        updates["stage_widths"] = widths
        updates["n_stages"] = len(widths)
    if args.input_length is not None:
        updates["input_length"] = args.input_length
    if args.precision:
        updates["precision"] = args.precision
    config = replace(config, **updates) if updates else config
    if config.input_length is None:
        config = replace(config, input_length=input_length)
    return config


def _echo_hyper(hyper):
    print("effective hyperparameters:")
    for k, v in vars(hyper).items():
        print(f"  {k}={v}")


# -- commands -----------------------------------------------------------------


def cmd_synth(args):
    fractions = tuple(float(v) for v in args.fractions.split(","))
    counts = (
        [int(v) for v in str(args.n).split(",")]
        if "," in str(args.n)
        else int(args.n)
    )
    dataset = synth_generate(counts, args.classes, args.leads, args.length,
                             args.noise, args.seed)
    dataset = stratified_split(dataset, fractions, args.seed)
    write_ecgb(dataset, args.out)
    print(f"wrote {len(dataset.records)} records "
          f"({args.classes} classes, {args.leads} leads, length {args.length}) "
          f"to {args.out}")
    return 0


def cmd_train(args):
    dataset = read_ecgb(args.data)
    lengths = {rec.length for rec in dataset.records}
    if len(lengths) != 1:
        dataset = pad_to_max(dataset)
        print(f"padded {len(lengths)} distinct record lengths to "
              f"{dataset.max_length}")
    hyper = _hyper_from_args(args)
    config = _config_from_args(args, len(dataset.class_names),
                               dataset.max_length)
    _echo_hyper(hyper)
    print("effective config:")
    for line in config.to_text().strip().splitlines():
        print(f"  {line}")

    os.makedirs(args.out_dir, exist_ok=True)
    model_path = os.path.join(args.out_dir, "model.scdn")
    trace_path = os.path.join(args.out_dir, "trace.csv")
    manifest_path = os.path.join(args.out_dir, "run.manifest")

    manifest = {
        "command": "train",
        "seed": hyper.seed,
        "dataset": os.path.abspath(args.data),
        "dataset_sha256": _sha256_file(args.data),
        "split_sha256": _split_hash(dataset),
        "started_unix": f"{time.time():.3f}",
        "model_path": os.path.abspath(model_path),
        "trace_path": os.path.abspath(trace_path),
    }
    for k, v in vars(hyper).items():
        manifest[f"hyper.{k}"] = v
    for line in config.to_text().strip().splitlines():
        k, v = line.split("=", 1)
        manifest[f"config.{k}"] = v
    write_manifest(manifest_path, manifest)

    model = build_model(config, seed=hyper.seed)
    print(f"model parameters: {model.parameter_count()}")
    manifest["parameter_count"] = model.parameter_count()

    log = train(model, dataset, hyper)
    save_model(model, model_path)
    log.write(trace_path)

    report = evaluate(model, dataset, "val")
    print(report.to_text(dataset.class_names))
    with open(os.path.join(args.out_dir, "metrics_val.txt"), "w") as fh:
        fh.write(report.to_text(dataset.class_names))
    with open(os.path.join(args.out_dir, "metrics_val.kv"), "w") as fh:
        fh.write(report.to_keyvalues())

    manifest["finished_unix"] = f"{time.time():.3f}"
    manifest["final_train_loss"] = repr(log.rows[-1].loss)
    manifest["val_macro_f1"] = repr(report.macro_f1)
    write_manifest(manifest_path, manifest)
    print(f"artifacts in {args.out_dir}")
    return 0


def cmd_eval(args):
    model = load_model(args.model)
    dataset = read_ecgb(args.data)
    report = evaluate(model, dataset, args.split)
    text = report.to_text(dataset.class_names)
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        kv_path = args.out + ".kv" if not args.out.endswith(".kv") else args.out
        with open(kv_path, "w", encoding="utf-8") as fh:
            fh.write(report.to_keyvalues())
    return 0


def _randomize_for_gradcheck(model, seed):
    """Move parameters off their symmetric init so no gradient is exactly zero.

    At the fresh init the branch gains are 0 and the spectral weights are
    exactly 1, which zeroes several true gradients; finite differences of a
    flat direction measure only rounding noise.
    """
    rng = np.random.default_rng([seed, 77])
    for sat in model.satse:
        if sat is None:
            continue
        sat.lambda_low.data[...] = rng.uniform(0.3, 0.7)
        sat.lambda_high.data[...] = rng.uniform(0.3, 0.7)
        sat.weight_re.data += rng.normal(0, 0.05, sat.weight_re.data.shape)
        sat.weight_im.data += rng.normal(0, 0.05, sat.weight_im.data.shape)
        if sat.phi.requires_grad:
            sat.phi.data[...] = rng.uniform(0.25, 0.55)
        sat.gamma.data[...] = rng.uniform(0.5, 1.5)
    for name, p in model.named_parameters().items():
        if ".bn" in name and p.requires_grad:
            if name.endswith(".scale"):
                p.data += rng.uniform(-0.2, 0.2, p.data.shape)
            else:
                p.data += rng.normal(0, 0.1, p.data.shape)


def build_gradcheck_graph(model, batch, labels):
    """Loss graph over every trainable parameter of the model.

    Runs train-mode statistics with running-average updates disabled so
    repeated evaluations stay pure.
    """

    def build(params, inputs):
        logits = model.forward(inputs["x"], "train", update_running=False)
        if model.config.double_softmax:
            logits = softmax(logits)
        return cross_entropy(logits, labels)

    return Graph(build, model.trainable_parameters())


def cmd_gradcheck(args):
    widths = tuple(int(v) for v in args.widths.split(","))
    config = tiny_config(
        n_classes=args.classes,
        input_length=args.length,
        widths=widths,
        mask_index_mode=args.mask_mode or "symmetric",
    )
    model = build_model(config, seed=args.seed)
    if model.parameter_count() > _GRADCHECK_MAX_COMPONENTS:
        print(
            f"error: configuration has {model.parameter_count()} parameter "
            f"components; gradient checking is limited to "
            f"{_GRADCHECK_MAX_COMPONENTS} to bound runtime",
            file=sys.stderr,
        )
        return 1
    _randomize_for_gradcheck(model, args.seed)
    rng = np.random.default_rng([args.seed, 3])
    batch = rng.normal(size=(args.batch, config.n_leads, args.length))
    labels = rng.integers(0, config.n_classes, size=args.batch)
    graph = build_gradcheck_graph(model, batch, labels)
    if args.param:
        graph.parameters = {
            k: v for k, v in graph.parameters.items() if args.param in k
        }
        if not graph.parameters:
            print(f"error: no parameter name contains {args.param!r}",
                  file=sys.stderr)
            return 1
    n_comp = sum(p.data.size for p in graph.parameters.values())
    print(f"checking {len(graph.parameters)} parameters "
          f"({n_comp} components) at tolerance {args.tolerance:g}")
    report = grad_check(graph, {"x": batch}, epsilon=args.epsilon,
                        tolerance=args.tolerance)
    print(f"{'parameter':<32} {'max rel error':>14}")
    for name, err in sorted(report.max_rel_error.items(), key=lambda kv: -kv[1]):
        mark = "" if err < args.tolerance else "  <-- FAIL"
        print(f"{name:<32} {err:>14.3e}{mark}")
    if report.nonfinite:
        print(f"non-finite losses hit for: {sorted(report.nonfinite)}")
    print("gradient check:", "PASS" if report.passed else "FAIL")
    return 0 if report.passed else 1


def cmd_ablate(args):
    dataset = read_ecgb(args.data)
    if len({rec.length for rec in dataset.records}) != 1:
        dataset = pad_to_max(dataset)
    hyper = _hyper_from_args(args)
    config = _config_from_args(args, len(dataset.class_names),
                               dataset.max_length)
    axis = args.axis.replace("-", "_")
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown axis {args.axis!r}")
    raw = args.values.split(",")
    if axis == "satse_count":
        values = [int(v) for v in raw]
    elif axis == "fixed_phi":
        values = [float(v) for v in raw]
    else:
        values = raw
    table = run_ablation(config, axis, values, dataset, hyper,
                         repeats=args.repeats)
    text = table.to_text()
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    return 0


# -- entry point -----------------------------------------------------------


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="scdnn",
        description="spectral cross-domain network: synthesize data, train, "
                    "evaluate, check gradients, run ablations",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic ECGB dataset")
    p.add_argument("--n", default="200",
                   help="records per class (int or comma list)")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--leads", type=int, default=12)
    p.add_argument("--length", type=int, default=512)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fractions", default="0.8,0.1,0.1")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth, validate=_validate_synth)

    p = sub.add_parser("train", help="train a model on an ECGB dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    _add_hyper_args(p)
    _add_model_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check on a small model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--epsilon", type=float, default=1e-6)
    p.add_argument("--param", help="restrict to parameter names containing this")
    p.add_argument("--widths", default="4,8")
    p.add_argument("--length", type=int, default=64)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--mask-mode", choices=("symmetric", "literal"))
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="sweep one configuration axis")
    p.add_argument("--axis", required=True,
                   choices=("satse-count", "fixed-phi", "depth"))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--data", required=True)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--out")
    _add_hyper_args(p)
    _add_model_args(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def _validate_synth(args, parser):
    if args.classes < 2:
        parser.error("--classes must be at least 2")


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    validate = getattr(args, "validate", None)
    if validate is not None:
        validate(args, parser)
    try:
        return args.func(args)
    except Exception as exc:  # surface module failures with context
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
