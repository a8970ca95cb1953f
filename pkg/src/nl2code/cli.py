"""``nl2code`` command line.

Exit codes: 0 success, 1 invalid input or configuration, 2 failure while running.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .backtranslation import BackTransConfig
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, apply_overrides
from .data import CorpusFormatError
from .train import evaluate_checkpoint, train, train_tokenizers, translate

log = logging.getLogger("nl2code")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

ABLATION_AXES = {
    "heads": ("Heads", (1, 2, 4, 8, 16)),
    "layers": ("Layers", (1, 2, 3, 6)),
    "alpha": ("alpha", (0.0, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0)),
}
ABLATION_COLUMNS = ("BLEU Score", "Token Acc.")
NON_COMPARABLE = ("fixture-scale runs; these numbers are NOT comparable to the published "
                  "results, which used the full corpus and long training")


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return apply_overrides(cfg, seed=args.seed, mined_limit=args.mined_limit,
                           regime=args.regime, mode=args.mode, alpha=args.alpha,
                           beam=args.beam)


def ablation_setting(cfg: RunConfig, axis: str, value) -> RunConfig:
    """Copy of ``cfg`` with one ablation cell applied."""
    d = cfg.to_dict()
    if axis == "heads":
        d["model"]["num_heads"] = value
    elif axis == "layers":
        d["model"]["num_layers"] = value
        d["model"]["num_heads"] = 8
    elif axis == "alpha":
        bt = d["backtrans"] or BackTransConfig().__dict__.copy()
        bt["mode"] = "ctc"
        bt["alpha"] = value
        d["backtrans"] = bt
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}")
    d["run_id"] = f"{cfg.run_id}-{axis}-{value}"
    return RunConfig.from_dict(d)


def run_ablation(cfg: RunConfig, axis: str, out_path, test_path=None) -> list[dict]:
    """Train and score one model per cell; writes the table after every cell,
    so a failing cell still leaves the rows finished so far."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}")
    test_path = test_path or cfg.paths.test or cfg.paths.annotated
    header, values = ABLATION_AXES[axis]
    rows = []
    failed = None
    for v in values:
        try:
            cell = ablation_setting(cfg, axis, v)
            res = train(cell)
            rep = evaluate_checkpoint(res.checkpoint, test_path, cell.beam)
            rows.append({"setting": v, "bleu": rep.corpus_bleu,
                         "token_accuracy": 100.0 * rep.token_accuracy})
        except Exception as e:  # noqa: BLE001 - reported per cell, table still written
            log.error("ablation cell %s=%s failed: %s", axis, v, e)
            rows.append({"setting": v, "bleu": None, "token_accuracy": None, "error": str(e)})
            failed = failed or e
        write_table(out_path, axis, rows)
    if failed is not None:
        raise RuntimeError(f"ablation finished with failed cells (first: {failed})")
    return rows


def format_table(axis: str, rows: list[dict]) -> str:
    header, _ = ABLATION_AXES[axis]
    lines = [f"# {NON_COMPARABLE}", "\t".join((header,) + ABLATION_COLUMNS)]
    for r in rows:
        if r["bleu"] is None:
            lines.append(f"{r['setting']}\tfailed\tfailed")
        else:
            lines.append(f"{r['setting']}\t{r['bleu']:.2f}\t{r['token_accuracy']:.2f}")
    return "\n".join(lines) + "\n"


def parse_table(text: str) -> tuple[list[str], list[list[str]]]:
    body = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    return body[0].split("\t"), [ln.split("\t") for ln in body[1:]]


def write_table(path, axis: str, rows: list[dict]) -> None:
    Path(path).write_text(format_table(axis, rows), encoding="utf-8")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--checkpoint", metavar="PATH", help="checkpoint directory")
    common.add_argument("--seed", type=int, help="sets every seed")
    common.add_argument("--mined-limit", type=int)
    common.add_argument("--regime", choices=("mix", "sample", "finetune"))
    common.add_argument("--mode", choices=("ctc", "ctc-noise", "tct", "cycle"))
    common.add_argument("--alpha", type=float)
    common.add_argument("--beam", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="nl2code", description="Transformer intent-to-code translation")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("tokenizer-train", parents=[common], help="train both vocabularies")
    sub.add_parser("train", parents=[common], help="train (resumes from --checkpoint)")
    ev = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a test file")
    ev.add_argument("--test", metavar="PATH", help="annotated test file (default: config)")
    ev.add_argument("--out", metavar="DIR", default=".", help="report directory")
    tr = sub.add_parser("translate", parents=[common], help="translate one intent")
    tr.add_argument("intent")
    ab = sub.add_parser("ablation", parents=[common], help="heads / layers / alpha sweep")
    ab.add_argument("axis", choices=sorted(ABLATION_AXES))
    ab.add_argument("--out", metavar="PATH", help="table file (default: ablation-<axis>.tsv)")
    ab.add_argument("--test", metavar="PATH")
    return p


def _run(args) -> int:
    if args.command in ("evaluate", "translate") and not args.checkpoint:
        raise ConfigError(f"{args.command} needs --checkpoint")
    if args.command == "translate":
        print(translate(args.checkpoint, args.intent, args.beam))
        return EXIT_OK
    if args.command == "evaluate":
        test = args.test
        if test is None:
            test = _config(args).paths.test if args.config else None
        if test is None:
            raise ConfigError("evaluate needs --test or a config with paths.test")
        rep = evaluate_checkpoint(args.checkpoint, test, args.beam)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rep.write(out / "report.json", out / "examples.jsonl")
        print(json.dumps(rep.summary(), sort_keys=True))
        return EXIT_OK
    cfg = _config(args)
    if args.command == "tokenizer-train":
        for side, (v, m) in train_tokenizers(cfg).items():
            print(f"{side}: {v} {m}")
        return EXIT_OK
    if args.command == "train":
        res = train(cfg, resume=args.checkpoint)
        print(f"step {res.final_step}; checkpoint {res.checkpoint}; metrics {res.metrics}")
        return EXIT_OK
    out = args.out or f"ablation-{args.axis}.tsv"
    run_ablation(cfg, args.axis, out, args.test)
    print(Path(out).read_text(encoding="utf-8"), end="")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (ConfigError, CorpusFormatError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001 - top-level boundary
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
