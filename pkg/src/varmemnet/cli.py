"""Command-line entry point: training, evaluation, attention tracing,
result tables, the guessing game, and the gradient self-check.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric fault,
4 gradient check above threshold.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import sys
import time

import numpy as np

from . import game as gm
from . import model as mdl
from .corpus import (
    Encoder,
    ParseError,
    load_task,
    max_sentence_len,
    parse_babi_file,
    position_weights,
    render_babi,
    split_train_val,
)
from .errors import EncodingError, NumericError, TrainingFault
from .tensor import finite_diff_check
from .train import (
    METRICS_HEADER,
    TrainConfig,
    evaluate_accuracy,
    format_metrics_line,
    joint_config,
    train_joint,
    train_task,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_THRESHOLD = 4

RESULTS_HEADER = (
    "task\tvariant\tmode\tn_test\tacc_s1\tacc_sS\tsamples\tpass95\tnu_A\tnu_B\tnu_C"
)


# ----------------------------------------------------------- configuration


def _config_from_sources(args) -> TrainConfig:
    """defaults < config file (flat key=value) < explicit flags."""
    values = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
    if getattr(args, "config", None):
        values.update(_read_config_file(args.config))
    for name in values:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    cast = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    for name, value in values.items():
        if cast[name] == "int":
            values[name] = int(value)
        elif cast[name] == "float":
            values[name] = float(value)
        elif cast[name] == "bool" and isinstance(value, str):
            values[name] = value.lower() in ("1", "true", "yes", "on")
    return TrainConfig(**values)


def _read_config_file(path):
    out = {}
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_no}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ValueError(f"{path}:{line_no}: unknown key {key!r}")
            out[key] = value
    return out


def _hash_files(paths):
    digest = hashlib.sha256()
    for path in sorted(paths):
        digest.update(os.path.basename(path).encode())
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir, name, cfg, seed, input_paths, outputs, extra=None):
    manifest = {
        "command": name,
        "config": dataclasses.asdict(cfg) if cfg is not None else None,
        "seed": seed,
        "inputs_sha256": _hash_files(input_paths) if input_paths else None,
        "outputs": outputs,
        "created_unix": time.time(),
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, f"{name}_manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def _load_stories(args, split):
    """Stories plus the list of files they came from."""
    if getattr(args, "file", None) and split == "train":
        with open(args.file, encoding="utf-8") as fh:
            return parse_babi_file(fh), [args.file]
    if getattr(args, "test_file", None) and split == "test":
        with open(args.test_file, encoding="utf-8") as fh:
            return parse_babi_file(fh), [args.test_file]
    stories = load_task(
        args.data, args.task, variant=args.variant, split=split, pattern=args.pattern
    )
    import glob as _glob

    from .corpus import VARIANT_DIRS

    pattern = os.path.join(
        args.data,
        VARIANT_DIRS[args.variant],
        args.pattern.format(task=args.task, split=split),
    )
    return stories, sorted(_glob.glob(pattern))[:1]


# ------------------------------------------------------------------ train


def _train_one_task_job(payload):
    """One per-task training job; runs in a worker process."""
    import dataclasses as dc

    (data, task, variant, pattern, mode, cfg_values, out_dir) = payload
    cfg = TrainConfig(**cfg_values)
    stories = load_task(data, task, variant=variant, split="train", pattern=pattern)
    try:
        test_stories = load_task(data, task, variant=variant, split="test", pattern=pattern)
    except FileNotFoundError:
        test_stories = []
    train_s, val_s = split_train_val(stories, cfg.seed)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.tsv"), "w", encoding="utf-8") as fh:
        fh.write(METRICS_HEADER + "\n")
        net, encoder, metrics = train_task(
            train_s, val_s, cfg, mode=mode, extra_stories=test_stories,
            log_fn=lambda m: fh.write(format_metrics_line(m) + "\n"),
        )
    ckpt = os.path.join(out_dir, "model.ckpt")
    mdl.save_checkpoint(ckpt, net, encoder.vocab, extra={"max_words": encoder.max_words})
    return task, metrics[-1].val_acc, ckpt


def _parse_task_list(spec_text):
    tasks = []
    for part in spec_text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            tasks.extend(range(int(lo), int(hi) + 1))
        elif part:
            tasks.append(int(part))
    return tasks


def _cmd_train_all_tasks(args, cfg):
    """Independent per-task jobs, fanned out over worker processes; each job
    is single-threaded and gets its own seed."""
    from concurrent.futures import ProcessPoolExecutor

    tasks = _parse_task_list(args.tasks)
    payloads = []
    for task in tasks:
        values = dataclasses.asdict(cfg)
        values["seed"] = cfg.seed + task
        payloads.append(
            (
                args.data,
                task,
                args.variant,
                args.pattern,
                args.mode,
                values,
                os.path.join(args.out, f"task{task}"),
            )
        )
    results = []
    with ProcessPoolExecutor(max_workers=args.jobs) as pool:
        for task, val_acc, ckpt in pool.map(_train_one_task_job, payloads):
            print(f"task {task}: val acc {val_acc:.1f} -> {ckpt}")
            results.append({"task": task, "val_acc": val_acc, "checkpoint": ckpt})
    _write_manifest(
        args.out, "train_all", cfg, cfg.seed, [],
        {"runs": [r["checkpoint"] for r in results]},
        extra={"per_task": results},
    )
    return EXIT_OK


def cmd_train(args):
    cfg = _config_from_sources(args)
    os.makedirs(args.out, exist_ok=True)
    if args.all_tasks:
        return _cmd_train_all_tasks(args, cfg)
    inputs = []
    log = os.path.join(args.out, "metrics.tsv")
    with open(log, "w", encoding="utf-8") as log_fh:
        log_fh.write(METRICS_HEADER + "\n")

        def stream(m):
            log_fh.write(format_metrics_line(m) + "\n")
            log_fh.flush()
            if args.verbose:
                print(format_metrics_line(m))

        if args.joint:
            cfg = joint_config(cfg) if args.epochs is None else cfg
            tasks_train, tasks_val, extra_stories = {}, {}, []
            for task in range(1, 21):
                args.task = task
                stories, files = _load_stories(args, "train")
                inputs.extend(files)
                tr, va = split_train_val(stories, cfg.seed)
                tasks_train[task], tasks_val[task] = tr, va
                test, files = _load_stories(args, "test")
                inputs.extend(files)
                extra_stories.extend(test)
            net, encoder, metrics, per_task = train_joint(
                tasks_train, tasks_val, cfg, mode=args.mode,
                extra_stories=extra_stories, log_fn=stream,
            )
            for task, acc in sorted(per_task.items()):
                print(f"task {task}: val acc {acc:.1f}")
        else:
            stories, files = _load_stories(args, "train")
            inputs.extend(files)
            test_stories = []
            try:
                test_stories, tfiles = _load_stories(args, "test")
                inputs.extend(tfiles)
            except (FileNotFoundError, AttributeError):
                pass
            train_s, val_s = split_train_val(stories, cfg.seed)
            net, encoder, metrics = train_task(
                train_s,
                val_s,
                cfg,
                mode=args.mode,
                extra_stories=test_stories,
                log_fn=stream,
            )
    ckpt = os.path.join(args.out, "model.ckpt")
    mdl.save_checkpoint(ckpt, net, encoder.vocab, extra={"max_words": encoder.max_words})
    manifest = _write_manifest(
        args.out, "train", cfg, cfg.seed, inputs, {"checkpoint": ckpt, "metrics": log},
        extra={"encoder": {"max_words": encoder.max_words}},
    )
    print(f"checkpoint: {ckpt}")
    print(f"metrics: {log}")
    print(f"manifest: {manifest}")
    return EXIT_OK


# ------------------------------------------------------------------- eval


def _encoder_for(net, vocab, stories, extra):
    width = int(extra.get("max_words") or max_sentence_len(stories))
    return Encoder(vocab, width, net.memory_size, net.delta)


def cmd_eval(args):
    net, vocab, extra = mdl.load_checkpoint(args.checkpoint)
    stories, _ = _load_stories(args, "test")
    encoder = _encoder_for(net, vocab, stories, extra)
    encoded = encoder.encode_all(stories)
    rng = np.random.default_rng(args.seed)
    if net.mode == mdl.VARIATIONAL:
        acc1 = evaluate_accuracy(net, encoded, n_samples=1, rng=rng)
        acc_s = evaluate_accuracy(net, encoded, n_samples=args.samples, rng=rng)
    else:
        acc1 = acc_s = evaluate_accuracy(net, encoded)
    nu_a, nu_b, nu_c = net.nu_values()
    passed = max(acc1, acc_s) >= 95.0
    row = (
        f"{args.task}\t{args.variant}\t{net.mode}\t{len(encoded)}"
        f"\t{acc1:.1f}\t{acc_s:.1f}\t{args.samples}\t{'pass' if passed else 'fail'}"
        f"\t{nu_a:.2f}\t{nu_b:.2f}\t{nu_c:.2f}"
    )
    print(RESULTS_HEADER)
    print(row)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "results.tsv")
        fresh = not os.path.exists(path)
        with open(path, "a", encoding="utf-8") as fh:
            if fresh:
                fh.write(RESULTS_HEADER + "\n")
            fh.write(row + "\n")
        print(f"appended: {path}")
    return EXIT_OK


# ------------------------------------------------------------------ trace


def cmd_trace(args):
    net, vocab, extra = mdl.load_checkpoint(args.checkpoint)
    stories, _ = _load_stories(args, args.split)
    if not 0 <= args.index < len(stories):
        raise IndexError(f"story index {args.index} out of range (n={len(stories)})")
    story = stories[args.index]
    encoder = _encoder_for(net, vocab, stories, extra)
    enc = encoder.encode(story)
    rng = np.random.default_rng(args.seed)
    answer_id, _, trace = mdl.predict(net, enc, n_samples=args.samples, rng=rng)
    shown = story.facts[-net.memory_size :]
    offset = len(story.facts) - len(shown)
    print("Facts:")
    for i, fact in enumerate(shown):
        mark = " *" if (i + offset) in story.supporting else ""
        print(f"  {i + 1}. {' '.join(fact)}{mark}")
    print(f"Question: {' '.join(story.question)}?")
    print(f"Answer: {story.answer}")
    print(f"Predicted: {vocab.token(answer_id)}")
    print("Model attention per hop:")
    for hop, (probs, top) in enumerate(zip(trace.probs, trace.argmax), start=1):
        text = " ".join(shown[top]) if top < len(shown) else "(empty slot)"
        support = "  [supporting]" if (top + offset) in story.supporting else ""
        print(f"  hop {hop}: {text}  (p={probs[top]:.3f}){support}")
    return EXIT_OK


# ----------------------------------------------------------------- report


def cmd_report(args):
    rows = []
    for name in sorted(os.listdir(args.metrics_dir)):
        if not name.endswith(".tsv"):
            continue
        path = os.path.join(args.metrics_dir, name)
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n")
            if header != RESULTS_HEADER:
                continue  # not a results table (e.g. a per-epoch metrics log)
            for line in fh:
                parts = line.rstrip("\n").split("\t")
                if len(parts) == len(RESULTS_HEADER.split("\t")):
                    rows.append(parts)
    by_task = {}
    for parts in rows:
        task = int(parts[0])
        mode = parts[2]
        by_task.setdefault(task, {})[mode] = parts
    header = f"{'task':>4}  {'baseline':>9}  {'var @1':>7}  {'var @S':>7}  {'pass':>5}"
    print(header)
    base_pass = var_pass = 0
    for task in range(1, 21):
        entry = by_task.get(task, {})
        base = entry.get("baseline")
        var = entry.get("variational")
        base_s = f"{float(base[4]):9.1f}" if base else f"{'absent':>9}"
        var1 = f"{float(var[4]):7.1f}" if var else f"{'absent':>7}"
        var_s = f"{float(var[5]):7.1f}" if var else f"{'absent':>7}"
        marks = []
        if base and float(base[4]) >= 95.0:
            base_pass += 1
            marks.append("b")
        if var and float(var[5]) >= 95.0:
            var_pass += 1
            marks.append("v")
        print(f"{task:>4}  {base_s}  {var1}  {var_s}  {''.join(marks):>5}")
    print(f"pass>=95: baseline {base_pass}, variational(S) {var_pass}")
    return EXIT_OK


# ------------------------------------------------------------------- game


def _game_cfg(args):
    return gm.GameConfig(
        min=args.min, max=args.max, max_tries=args.max_tries, n_train=args.n_train
    )


def cmd_game(args):
    cfg = _game_cfg(args)
    if args.game_cmd == "gen":
        rng = np.random.default_rng(args.seed)
        stories = gm.generate_dataset(cfg, rng)
        os.makedirs(os.path.dirname(os.path.abspath(args.out_file)) or ".", exist_ok=True)
        with open(args.out_file, "w", encoding="utf-8") as fh:
            fh.write(render_babi(stories))
        print(f"wrote {len(stories)} stories to {args.out_file}")
        return EXIT_OK
    if args.game_cmd == "train":
        tcfg = _config_from_sources(args)
        rng = np.random.default_rng(tcfg.seed)
        stories = gm.generate_dataset(cfg, rng)
        train_s, val_s = split_train_val(stories, tcfg.seed)
        vocab = gm.vocabulary(cfg)
        width = max(max_sentence_len(stories), len(gm.QUESTION))
        encoder = Encoder(vocab, width, tcfg.memory_size, tcfg.delta)
        net, _, metrics = train_task(
            train_s, val_s, tcfg, mode=args.mode, vocab=vocab, encoder=encoder,
            log_fn=(lambda m: print(format_metrics_line(m))) if args.verbose else None,
        )
        os.makedirs(args.out, exist_ok=True)
        ckpt = os.path.join(args.out, "game.ckpt")
        mdl.save_checkpoint(ckpt, net, vocab, extra={"max_words": width})
        _write_manifest(
            args.out, "game_train", tcfg, tcfg.seed, [], {"checkpoint": ckpt},
            extra={"game": dataclasses.asdict(cfg), "encoder": {"max_words": width}},
        )
        print(f"final val acc: {metrics[-1].val_acc:.1f}")
        print(f"checkpoint: {ckpt}")
        return EXIT_OK

    net, vocab, extra = mdl.load_checkpoint(args.checkpoint)
    width = int(extra.get("max_words") or len(gm.QUESTION))
    encoder = Encoder(vocab, width, net.memory_size, net.delta)
    rng = np.random.default_rng(args.seed)
    if args.game_cmd == "eval":
        metrics, _ = gm.evaluate(
            net, cfg, n_games=args.games, rng=rng, n_samples=args.samples,
            encoder=encoder,
        )
        rounds = f"{metrics.rounds:.1f}" if not math.isnan(metrics.rounds) else "n/a"
        print(f"Accuracy (%)\t{metrics.accuracy:.1f}")
        print(f"Success (%)\t{metrics.success:.1f}")
        print(f"Rounds\t{rounds}")
        return EXIT_OK
    if args.game_cmd == "play":
        target = args.target
        if target is None:
            target = int(rng.integers(cfg.min, cfg.max + 1))
        record = gm.play_episode(
            net, cfg, target, rng=rng, n_samples=args.samples, encoder=encoder
        )
        print(gm.render_transcript(record, cfg, model_name="varmemnet"))
        return EXIT_OK
    raise ValueError(f"unknown game subcommand {args.game_cmd!r}")


# -------------------------------------------------------------- gradcheck


def cmd_gradcheck(args):
    rng = np.random.default_rng(args.seed)
    V, delta, hops = args.vocab, args.delta, args.hops
    mem_slots, width = 3, 4
    cfg = TrainConfig(delta=delta, hops=hops, memory_size=mem_slots, seed=args.seed)
    from .corpus import EncodedStory, Vocabulary

    vocab = Vocabulary([f"w{i}" for i in range(V - 1)])
    from .train import init_network

    net = init_network(vocab, cfg, rng, mode=args.mode)
    pw = position_weights(width, delta)
    batch = []
    for _ in range(3):
        n_facts = int(rng.integers(1, mem_slots + 1))
        memory = np.zeros((mem_slots, width), dtype=np.int64)
        for i in range(n_facts):
            n_tok = int(rng.integers(1, width + 1))
            memory[i, :n_tok] = rng.integers(1, V, size=n_tok)
        question = np.zeros(width, dtype=np.int64)
        n_q = int(rng.integers(1, width + 1))
        question[:n_q] = rng.integers(1, V, size=n_q)
        batch.append(
            EncodedStory(
                memory=memory,
                n_facts=n_facts,
                question=question,
                answer_id=int(rng.integers(1, V)),
                position_weights=pw,
            )
        )
    sample = None
    if args.mode == mdl.VARIATIONAL:
        sample = mdl.sample_weights(net, rng)
    tape, loss = mdl.build_objective(net, batch, sample, kl_scale=1.0)
    grads = tape.backward(loss)
    if args.corrupt:
        first = next(iter(grads))
        grads[first] = grads[first] + 1.0
    params = {k: v.copy() for k, v in net.parameters().items()}

    def f(values):
        net.set_parameters(values)
        _, node = mdl.build_objective(net, batch, sample, kl_scale=1.0)
        return node.item()

    err = finite_diff_check(f, params, grads, h=args.step)
    net.set_parameters(params)
    print(f"max relative gradient error: {err:.3e} (threshold {args.threshold:g})")
    if err > args.threshold:
        print("FAIL")
        return EXIT_THRESHOLD
    print("PASS")
    return EXIT_OK


# ------------------------------------------------------------------- main


def _add_data_args(p, need_task=True):
    p.add_argument("--data", default="data", help="dataset root directory")
    p.add_argument("--variant", default="en-1k")
    p.add_argument("--pattern", default="qa{task}_*_{split}.txt")
    if need_task:
        p.add_argument("--task", type=int, default=1)
    p.add_argument("--file", help="explicit train-split story file")
    p.add_argument("--test-file", dest="test_file", help="explicit test-split story file")


def _add_train_overrides(p):
    for name, kind in (
        ("epochs", int),
        ("hops", int),
        ("delta", int),
        ("seed", int),
        ("lr", float),
        ("anneal-every", int),
        ("minibatches-per-epoch", int),
        ("memory-size", int),
        ("prior-nu", float),
        ("init-nu", float),
        ("grad-clip", float),
    ):
        p.add_argument(f"--{name}", dest=name.replace("-", "_"), type=kind, default=None)
    p.add_argument("--no-temporal", dest="temporal", action="store_false", default=None)
    p.add_argument("--no-state-map", dest="state_map", action="store_false", default=None)
    p.add_argument("--config", help="flat key=value config file")


def build_parser():
    parser = argparse.ArgumentParser(prog="varmemnet")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train", help="train one task or a joint model")
    _add_data_args(p)
    p.add_argument("--joint", action="store_true")
    p.add_argument("--all-tasks", dest="all_tasks", action="store_true",
                   help="train every task as an independent concurrent job")
    p.add_argument("--tasks", default="1-20", help="task list for --all-tasks, e.g. 1,4,11-13")
    p.add_argument("--jobs", type=int, default=2, help="worker processes for --all-tasks")
    p.add_argument("--mode", choices=(mdl.BASELINE, mdl.VARIATIONAL), default=mdl.VARIATIONAL)
    p.add_argument("--out", default="runs/latest")
    p.add_argument("--verbose", action="store_true")
    _add_train_overrides(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a test set")
    p.add_argument("checkpoint")
    _add_data_args(p)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="directory for results.tsv")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("trace", help="per-hop attention for one story")
    p.add_argument("checkpoint")
    _add_data_args(p)
    p.add_argument("--split", default="test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_trace)

    p = sub.add_parser("report", help="tabulate results over the 20 tasks")
    p.add_argument("metrics_dir")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("game", help="number-guessing game tools")
    gsub = p.add_subparsers(dest="game_cmd", required=True)
    for name in ("gen", "train", "eval", "play"):
        gp = gsub.add_parser(name)
        gp.add_argument("--min", type=int, default=0)
        gp.add_argument("--max", type=int, default=10)
        gp.add_argument("--max-tries", dest="max_tries", type=int, default=100)
        gp.add_argument("--n-train", dest="n_train", type=int, default=1000)
        if name == "gen":
            gp.add_argument("--seed", type=int, default=0)
            gp.add_argument("--out-file", dest="out_file", required=True)
        elif name == "train":
            gp.add_argument("--mode", choices=(mdl.BASELINE, mdl.VARIATIONAL),
                            default=mdl.VARIATIONAL)
            gp.add_argument("--out", default="runs/game")
            gp.add_argument("--verbose", action="store_true")
            _add_train_overrides(gp)
        else:
            gp.add_argument("--seed", type=int, default=0)
            gp.add_argument("checkpoint")
            gp.add_argument("--samples", type=int, default=10)
            if name == "eval":
                gp.add_argument("--games", type=int, default=100)
            else:
                gp.add_argument("--target", type=int, default=None)
    p.set_defaults(fn=cmd_game)

    p = sub.add_parser("gradcheck", help="finite-difference check of the objective")
    p.add_argument("--delta", type=int, default=3)
    p.add_argument("--vocab", type=int, default=7)
    p.add_argument("--hops", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=(mdl.BASELINE, mdl.VARIATIONAL), default=mdl.VARIATIONAL)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=3e-4, help="finite-difference step")
    p.add_argument("--corrupt", action="store_true", help="inject a gradient error")
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except (ParseError, EncodingError, FileNotFoundError, IndexError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, TrainingFault) as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
