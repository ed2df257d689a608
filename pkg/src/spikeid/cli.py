"""Command-line entry point wiring the whole pipeline.

Subcommands: synth, train, quantize, convert, sweep, infer, eval,
protocol-echo. All outputs are machine-readable text so figures can be
reproduced by external plotting. Exit codes: 0 success, 1 usage error,
2 runtime error.
"""

from __future__ import annotations

import argparse
import socket
import sys

import numpy as np

from . import conversion, events, harness, network, spectra

USAGE_EXIT = 1
RUNTIME_EXIT = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_EXIT, f"{self.prog}: error: {message}\n")


def _arch_from_args(args) -> network.ArchConfig:
    return network.ArchConfig(num_filters=args.filters, kernel_size=args.kernel,
                              pool_size=args.pool)


def _train_config(args, **overrides) -> network.TrainConfig:
    cfg = dict(learning_rate=args.learning_rate, epochs=args.epochs,
               batch_size=args.batch_size, seed=args.seed,
               qat_epochs=args.qat_epochs)
    cfg.update(overrides)
    return network.TrainConfig(**cfg)


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--qat-epochs", type=int, default=15)
    p.add_argument("--learning-rate", type=float, default=3.0)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--filters", type=int, default=4)
    p.add_argument("--kernel", type=int, default=5)
    p.add_argument("--pool", type=int, default=16)


def cmd_synth(args) -> int:
    config = spectra.GeneratorConfig(
        variants_per_isotope=args.variants,
        templates_path=args.templates,
        max_gain_shift=args.max_gain_shift,
    )
    dataset = spectra.synthesize_dataset(config, args.seed)
    spectra.save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    dataset = spectra.load_dataset(args.dataset)
    arch = _arch_from_args(args)
    exclude = tuple(args.exclude_fold or ())
    cfg = _train_config(args, exclude_folds=exclude, val_fold=args.val_fold,
                        qat_enabled=args.qat)
    if args.qat:
        model = network.train_qat(dataset, arch, cfg)
    else:
        model = network.train(dataset, arch, cfg)
    network.save_model(model, args.out)
    held_out = dataset.subset(include=exclude) if exclude else dataset
    result = network.evaluate(model, held_out)
    scope = "held-out" if exclude else "train-set"
    print(f"kind={'int8' if args.qat else 'float'} {scope}_accuracy="
          f"{repr(result.accuracy)}")
    return 0


def cmd_quantize(args) -> int:
    model = network.load_model(args.model)
    if not isinstance(model, network.FloatModel):
        raise ValueError("quantize expects a float model file")
    network.save_model(network.quantize(model), args.out)
    print(f"wrote int8 model to {args.out}")
    return 0


def cmd_convert(args) -> int:
    qmodel = network.load_model(args.model)
    if not isinstance(qmodel, network.QuantizedModel):
        raise ValueError("convert expects an int8 model file")
    dataset = spectra.load_dataset(args.dataset)
    calibration = dataset.subset(exclude=args.exclude_fold or ())
    thresholds = conversion.compute_thresholds(qmodel, calibration, args.percentile)
    snn = conversion.convert(qmodel, thresholds)
    conversion.save_memory_image(conversion.export_memory_image(snn), args.out)
    print(f"thresholds conv={snn.v_thr.conv} pool={snn.v_thr.pool} fc={snn.v_thr.fc}; "
          f"wrote image to {args.out}")
    return 0


def cmd_sweep(args) -> int:
    dataset = spectra.load_dataset(args.dataset)
    test_fold = args.test_fold
    rows = ["filter_size,pool_size,float_accuracy,quantized_accuracy"]
    test_set = dataset.subset(include=test_fold)
    for kernel in args.filter_sizes:
        for pool in args.pool_sizes:
            arch = network.ArchConfig(num_filters=args.filters, kernel_size=kernel,
                                      pool_size=pool)
            cfg = _train_config(args, exclude_folds=(test_fold,))
            fmodel = network.train(dataset, arch, cfg)
            qmodel = network.train_qat(dataset, arch, cfg)
            f_acc = network.evaluate(fmodel, test_set).accuracy
            q_acc = network.evaluate(qmodel, test_set).accuracy
            rows.append(f"{kernel},{pool},{repr(f_acc)},{repr(q_acc)}")
    table = "\n".join(rows) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(table)
    print(table, end="")
    return 0


def cmd_infer(args) -> int:
    image = conversion.load_memory_image(args.image)
    model = conversion.import_memory_image(image)
    dataset = spectra.load_dataset(args.dataset)
    if args.fold is not None:
        dataset = dataset.subset(include=args.fold)
    duration = args.duration
    if duration is None:
        duration = events.duration_for_seconds(args.seconds)
    transport = None
    if args.connect:
        host, _, port = args.connect.rpartition(":")
        transport = harness.SocketTransport.connect(host or "127.0.0.1", int(port),
                                                    timeout=args.timeout)
    try:
        report = harness.run_batch(dataset, duration=duration, rate=args.rate,
                                   base_seed=args.seed, model=model,
                                   transport=transport)
    finally:
        if transport is not None:
            transport.close()
    text = report.to_text()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    print(text, end="")
    if report.protocol_errors:
        print(f"{report.protocol_errors} protocol error(s)", file=sys.stderr)
        return RUNTIME_EXIT
    return 0


def cmd_eval(args) -> int:
    model = network.load_model(args.model)
    dataset = spectra.load_dataset(args.dataset)
    test_set = dataset.subset(include=args.fold) if args.fold is not None else dataset
    result = network.evaluate(model, test_set)
    lines = [f"accuracy,{repr(result.accuracy)}"]
    if args.knn:
        train_set = dataset.subset(exclude=(args.fold,)) if args.fold is not None else dataset
        knn_acc = network.knn_baseline(train_set, test_set, k=args.knn)
        lines.append(f"knn_accuracy,{repr(knn_acc)}")
    for i, name in enumerate(test_set.classes):
        row = ",".join(str(int(v)) for v in result.confusion[i])
        lines.append(f"confusion,{name},{row}")
    print("\n".join(lines))
    return 0


def cmd_protocol_echo(args) -> int:
    model = conversion.import_memory_image(conversion.load_memory_image(args.image))
    engine = harness.Engine(model)
    with socket.create_server(("127.0.0.1", args.port)) as server:
        actual_port = server.getsockname()[1]
        print(f"listening on 127.0.0.1:{actual_port}", flush=True)
        while True:
            conn, _ = server.accept()
            with conn:
                harness.serve_connection(conn, engine)
            engine.reset()
            if args.once:
                return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="spikeid",
                     description="Event-driven spiking-network toolchain for "
                                 "radioisotope identification")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic spectrum dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variants", type=int, default=500,
                   help="samples per isotope (folds split these 5 ways)")
    p.add_argument("--templates", default=None,
                   help="template config file (default: packaged set)")
    p.add_argument("--max-gain-shift", type=float, default=0.03)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a float or QAT int8 model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--qat", action="store_true", help="emit an int8 model via QAT")
    p.add_argument("--exclude-fold", type=int, action="append",
                   help="fold(s) held out from training (repeatable)")
    p.add_argument("--val-fold", type=int, default=None)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("quantize", help="post-training int8 quantization")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("convert", help="int8 model -> spiking memory image")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True, help="threshold calibration data")
    p.add_argument("--exclude-fold", type=int, action="append")
    p.add_argument("--percentile", type=float, default=99.9)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("sweep", help="filter-size x pool-size accuracy grid")
    p.add_argument("--dataset", required=True)
    p.add_argument("--filter-sizes", type=int, nargs="+", default=[5])
    p.add_argument("--pool-sizes", type=int, nargs="+", default=[16])
    p.add_argument("--test-fold", type=int, default=4)
    p.add_argument("--out", default=None)
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("infer", help="event-driven batch inference over the protocol")
    p.add_argument("--image", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--duration", type=int, default=None, help="timesteps per sample")
    p.add_argument("--seconds", type=float, default=60.0,
                   help="equivalent seconds when --duration is not given")
    p.add_argument("--rate", type=float, default=0.005, help="events per timestep")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--connect", default=None, metavar="HOST:PORT",
                   help="drive a protocol-echo server instead of the loopback")
    p.add_argument("--timeout", type=float, default=5.0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="frame-based accuracy of a model file")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--knn", type=int, default=None,
                   help="also report a k-nearest-neighbour baseline")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("protocol-echo", help="serve an engine over TCP")
    p.add_argument("--image", required=True)
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--once", action="store_true",
                   help="exit after the first connection closes")
    p.set_defaults(func=cmd_protocol_echo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits itself for -h and usage errors
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (OSError, ValueError, harness.ProtocolError) as exc:
        print(f"spikeid: error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
