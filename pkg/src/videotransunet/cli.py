"""Command-line harness: generate | staple | train | eval | ablate-snippet."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__, fileio
from .autodiff import serialize
from .metrics import HEADS, THRESHOLD, boundary, evaluate_dataset
from .staple import fuse_dataset
from .synthetic import SceneSpec, load_dataset, make_sequences, write_dataset
from .train import Predictor, TrainConfig, load_checkpoint, overfit_one, train

log = logging.getLogger("videotransunet")

# Published snippet-length results on the clinical data, for the chart only.
REFERENCE_DSC = {3: 0.8570, 5: 0.8796, 9: 0.8541}
RUN_MANIFEST = "run_manifest.txt"
ABLATION_COLUMNS = ("length", "median_dsc", "median_dsc_bolus", "median_dsc_pharynx", "seeds", "dsc_per_seed")


class CliError(Exception):
    """A user-facing failure; the message is printed as one line."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"{self.prog}: error: {message}\n")


def version_string() -> str:
    """Package version plus ``git describe`` of the source tree when available."""
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=here,
            capture_output=True,
            text=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return __version__
    rev = desc.stdout.strip()
    return f"{__version__}+g{rev}" if desc.returncode == 0 and rev else __version__


def write_run_manifest(out_dir, command: str, args: dict, config: TrainConfig | None = None) -> None:
    items = {"version": version_string(), "command": command}
    items.update({f"arg.{k}": _flat(v) for k, v in sorted(args.items()) if k != "func"})
    if config is not None:
        items.update({f"config.{k}": v for k, v in config.to_items().items()})
    os.makedirs(out_dir, exist_ok=True)
    fileio.write_keyvalue(os.path.join(out_dir, RUN_MANIFEST), items)


def _flat(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def _load_config(path, overrides) -> TrainConfig:
    items = {}
    if path:
        if not os.path.isfile(path):
            raise CliError(f"config file {path} does not exist")
        items = fileio.read_keyvalue(path)
    for entry in overrides or ():
        key, sep, value = entry.partition("=")
        if not sep:
            raise CliError(f"--set expects KEY=VALUE, got {entry!r}")
        items[key.strip()] = value.strip()
    return TrainConfig.from_items(items) if items else TrainConfig()


def _parse_size(text: str) -> tuple:
    parts = text.lower().split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise CliError(f"--size must be N or HxW, got {text!r}") from None
    if len(dims) == 1:
        dims = dims * 2
    if len(dims) != 2:
        raise CliError(f"--size must be N or HxW, got {text!r}")
    return dims


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"expected a comma-separated list of integers, got {text!r}") from None


# ---------------------------------------------------------------- generate
def cmd_generate(args) -> int:
    if args.sequences < 1:
        raise CliError("--sequences must be at least 1")
    spec = SceneSpec(
        seed=args.seed,
        frame_size=_parse_size(args.size),
        sequence_length=args.length,
        occlusion_prob=args.occlusion_prob,
    )
    sequences = make_sequences(spec, args.sequences)
    split_seed = args.seed if args.split_seed is None else args.split_seed
    manifest = write_dataset(args.out, sequences, spec, split_seed)
    print(f"wrote {manifest['sequences']} sequences to {args.out}")
    return 0


# ---------------------------------------------------------------- staple
def cmd_staple(args) -> int:
    written = fuse_dataset(args.raters, args.out, tol=args.tol, max_iter=args.max_iter)
    print(f"fused {len(written)} masks into {args.out}")
    return 0


# ---------------------------------------------------------------- train
def cmd_train(args) -> int:
    config = _load_config(args.config, args.set)
    dataset = load_dataset(args.data)
    write_run_manifest(args.out, "train", vars(args), config)
    if args.overfit_one:
        return _overfit(dataset, config, args)
    resume = args.resume
    if resume and not os.path.isdir(resume):
        raise CliError(f"resume checkpoint {resume} does not exist")
    train(dataset, config, args.out, resume=resume, epochs=args.epochs, progress=log.info)
    log_csv = os.path.join(args.out, "train_log.csv")
    if args.plots:
        from . import plotting

        plotting.training_curve(log_csv, os.path.join(args.out, "training_curve.png"))
    print(f"wrote {log_csv} and checkpoints under {args.out}")
    return 0


def _overfit(dataset, config: TrainConfig, args) -> int:
    stacks = dataset.snippets("train", config.snippet_length)
    # the first snippet showing both structures is the most informative single sample
    stack = next((s for s in stacks if np.asarray(s.target.bolus).any()), stacks[0] if stacks else None)
    if stack is None:
        raise CliError("training split is empty")
    losses = overfit_one(stack, config, steps=args.steps, target=args.target)
    path = os.path.join(args.out, "overfit_log.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("step", "loss"))
        writer.writerows((k + 1, f"{v:.9g}") for k, v in enumerate(losses))
    if losses[-1] >= args.target:
        raise CliError(f"overfit did not reach loss {args.target} in {args.steps} steps (final {losses[-1]:.4f})")
    print(f"overfit {stack.seq_id} frame {stack.frame_index}: loss {losses[-1]:.4f} after {len(losses)} steps")
    return 0


# ---------------------------------------------------------------- eval
def overlay_image(frame, pred, target) -> np.ndarray:
    """Grey frame at 80% brightness, predicted outline white, true outline black."""
    img = np.clip(np.asarray(frame, np.float64), 0, 1) * 0.8
    img[boundary(np.asarray(target) > 0)] = 0.0
    img[boundary(np.asarray(pred) > 0)] = 1.0
    return np.rint(img * 255)


def run_eval(model, stacks, out_dir, *, threshold=THRESHOLD, export_masks=False, attention=None, plots=True):
    """Score ``model`` on ``stacks`` and write metrics.csv plus one overlay per frame and head.

    ``model`` maps a FrameStack to a MaskPair of probabilities. ``attention``,
    when given, maps a FrameStack to its temporal attention weights.
    """
    os.makedirs(out_dir, exist_ok=True)
    cache = {}

    def cached(stack):
        key = (stack.seq_id, stack.frame_index)
        if key not in cache:
            cache[key] = model(stack)
        return cache[key]

    report = evaluate_dataset(cached, stacks, threshold)
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    odir = os.path.join(out_dir, "overlays")
    os.makedirs(odir, exist_ok=True)
    if export_masks:
        os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    if attention is not None:
        os.makedirs(os.path.join(out_dir, "attention"), exist_ok=True)
    figure = ([], [], [], [])
    for stack in stacks:
        probs = cached(stack)
        stem = f"{stack.seq_id}_{stack.frame_index:03d}"
        centre = stack.frames[stack.center]
        preds = [np.asarray(p) >= threshold for p in probs]
        for head, pred, target in zip(HEADS, preds, stack.target):
            fileio.write_pgm(os.path.join(odir, f"{stem}_{head}.pgm"), overlay_image(centre, pred, target))
            if export_masks:
                fileio.write_mask_pgm(os.path.join(out_dir, "masks", f"{stem}_{head}.pgm"), pred)
        if export_masks:
            prob = np.stack([np.asarray(p, np.float32) for p in probs])
            serialize.save(os.path.join(out_dir, "masks", f"{stem}.vtt1"), prob)
        if attention is not None:
            serialize.save(os.path.join(out_dir, "attention", f"{stem}.vtt1"), np.asarray(attention(stack), np.float32))
        if len(figure[0]) < 8 and np.asarray(stack.target.bolus).any():
            figure[0].append(centre)
            figure[1].append(preds)
            figure[2].append([np.asarray(m) for m in stack.target])
            figure[3].append(stem)
    if plots and figure[0]:
        from . import plotting

        plotting.overlay_figure(*figure, os.path.join(out_dir, "overlays.png"))
    return report


class _BatchedModel:
    """Predicts a whole split in batches, then serves single stacks from the cache."""

    def __init__(self, predictor: Predictor, stacks, batch: int = 16):
        self.out = {}
        for k in range(0, len(stacks), batch):
            chunk = stacks[k : k + batch]
            probs = predictor.predict_batch(chunk)
            for s, p in zip(chunk, probs):
                self.out[(s.seq_id, s.frame_index)] = p

    def __call__(self, stack):
        p = self.out[(stack.seq_id, stack.frame_index)]
        return (p[0], p[1])


def cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    ckpt = load_checkpoint(args.checkpoint)
    length = args.length or ckpt.config.snippet_length
    stacks = dataset.snippets(args.split, length)
    if not stacks:
        raise CliError(f"split {args.split!r} holds no frames")
    predictor = Predictor(ckpt.params, ckpt.model_config)
    attention = None
    if args.attention:
        from .autodiff import no_grad
        from .model import model_forward

        def attention(stack):
            with no_grad():
                _, attn = model_forward(stack, ckpt.params, ckpt.model_config, return_attn=True)
            return getattr(attn, "data", attn)

    out = args.out or os.path.join(args.checkpoint, f"eval_{args.split}")
    write_run_manifest(out, "eval", vars(args), ckpt.config)
    report = run_eval(
        _BatchedModel(predictor, stacks),
        stacks,
        out,
        threshold=args.threshold,
        export_masks=args.masks,
        attention=attention,
        plots=args.plots,
    )
    m = {h: report.mean(h)["dsc"] for h in HEADS}
    print(f"{args.split}: dsc bolus {m['bolus']:.4f} pharynx {m['pharynx']:.4f}; wrote {out}")
    return 0


# ---------------------------------------------------------------- ablation
def _ablation_run(data: str, items: dict, run_dir: str) -> dict:
    """Train one (length, seed) model, score its best checkpoint on the test split."""
    dataset = load_dataset(data)
    config = TrainConfig.from_items(items)
    write_run_manifest(run_dir, "ablate-snippet.run", {"data": data}, config)
    train(dataset, config, run_dir, progress=log.info)
    ckpt = load_checkpoint(os.path.join(run_dir, "best"))
    stacks = dataset.snippets("test", config.snippet_length)
    report = evaluate_dataset(_BatchedModel(Predictor(ckpt.params, ckpt.model_config), stacks), stacks)
    with open(os.path.join(run_dir, "test_metrics.csv"), "w", newline="", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    return {
        "dsc": report.mean()["dsc"],
        "bolus": report.mean("bolus")["dsc"],
        "pharynx": report.mean("pharynx")["dsc"],
    }


def ablation_table(results: dict, lengths, seeds) -> list:
    """Rows of ABLATION_COLUMNS from ``results[(length, seed)]`` score dicts."""
    rows = []
    for t in lengths:
        runs = [results[(t, s)] for s in seeds]
        rows.append(
            {
                "length": t,
                "median_dsc": f"{np.median([r['dsc'] for r in runs]):.6f}",
                "median_dsc_bolus": f"{np.median([r['bolus'] for r in runs]):.6f}",
                "median_dsc_pharynx": f"{np.median([r['pharynx'] for r in runs]):.6f}",
                "seeds": ";".join(str(s) for s in seeds),
                "dsc_per_seed": ";".join(f"{r['dsc']:.6f}" for r in runs),
            }
        )
    return rows


def cmd_ablate_snippet(args) -> int:
    lengths = _int_list(args.lengths)
    if not lengths or any(t < 1 or t % 2 == 0 for t in lengths):
        raise CliError(f"--lengths must be odd positive integers, got {args.lengths!r}")
    if args.seeds < 1:
        raise CliError("--seeds must be at least 1")
    base = _load_config(args.config, args.set)
    dataset = load_dataset(args.data)
    for name in ("train", "val", "test"):
        if not dataset.splits.get(name):
            raise CliError(f"dataset split {name!r} is empty; generate more sequences")
    seeds = [base.seed + k for k in range(args.seeds)]
    write_run_manifest(args.out, "ablate-snippet", vars(args), base)
    jobs = []
    for t in lengths:
        for s in seeds:
            items = base.to_items()
            items.update(snippet_length=t, seed=s)
            jobs.append(((t, s), (args.data, items, os.path.join(args.out, "runs", f"t{t}_s{s}"))))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = {key: pool.submit(_ablation_run, *job) for key, job in jobs}
            results = {key: f.result() for key, f in futures.items()}
    else:
        results = {}
        for key, job in jobs:
            results[key] = _ablation_run(*job)
            log.info("t=%d seed=%d: test dsc %.4f", key[0], key[1], results[key]["dsc"])
    path = os.path.join(args.out, "ablation.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, ABLATION_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(ablation_table(results, lengths, seeds))
    if args.plots:
        from . import plotting

        plotting.ablation_chart(path, os.path.join(args.out, "ablation.png"), REFERENCE_DSC)
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="videotransunet", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {version_string()}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only print the final summary line")
    # -q is also accepted after the subcommand
    common = _Parser(add_help=False)
    common.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic swallow dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--sequences", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", default="64", help="N or HxW, multiples of 16")
    p.add_argument("--length", type=int, default=20, help="frames per sequence")
    p.add_argument("--occlusion-prob", type=float, default=SceneSpec.occlusion_prob)
    p.add_argument("--split-seed", type=int, default=None, help="defaults to --seed")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("staple", parents=[common], help="fuse several raters' masks")
    p.add_argument("--raters", nargs="+", required=True, metavar="DIR")
    p.add_argument("--out", required=True)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=100)
    p.set_defaults(func=cmd_staple)

    def add_config(p):
        p.add_argument("--config", help="key=value training config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--no-plots", dest="plots", action="store_false")

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    add_config(p)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--epochs", type=int, help="run at most this many epochs in this call")
    p.add_argument("--overfit-one", action="store_true", help="fit a single training sample")
    p.add_argument("--steps", type=int, default=300, help="step budget for --overfit-one")
    p.add_argument("--target", type=float, default=0.05, help="loss target for --overfit-one")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on one split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="defaults to <checkpoint>/eval_<split>")
    p.add_argument("--length", type=int, help="snippet length at test time (default: as trained)")
    p.add_argument("--threshold", type=float, default=THRESHOLD)
    p.add_argument("--masks", action="store_true", help="also export predicted masks and probabilities")
    p.add_argument("--attention", action="store_true", help="dump temporal attention weights")
    p.add_argument("--no-plots", dest="plots", action="store_false")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate-snippet", parents=[common], help="test DSC against snippet length")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lengths", default="1,3,5,7")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--jobs", type=int, default=1, help="parallel training processes")
    add_config(p)
    p.set_defaults(func=cmd_ablate_snippet)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (CliError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        print(f"videotransunet: error: {' '.join(str(msg).split())}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
