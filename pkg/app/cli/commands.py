"""Command-line surface: one handler per subcommand, each a thin adapter over app.core.

Every successful run writes ``<out>.manifest.json`` next to its output. Failures
print a single ``error code=... exit=... message=...`` line to stderr.
"""
from pathlib import Path
from typing import Any, Callable, Dict, List, NamedTuple, Optional
import argparse
import json
import logging
import sys
import time

import numpy as np
from pydantic import ValidationError

from .. import __version__
from ..core.binary_format import sha256_file, write_atomic
from ..core.codebook import fit_codebook, load_codebook, load_index, pq_decode, pq_encode, save_codebook, save_index
from ..core.config import settings, validation_message
from ..core.decoder import decoder_forward, load_decoder, load_lora_delta, save_lora_delta
from ..core.descriptor_store import (
    load_descriptors,
    load_scene,
    save_descriptors,
    save_scene,
    synth_descriptors,
    synth_scene,
)
from ..core.errors import DPQError, InputError, UsageError
from ..core.evalbench import (
    StandardBenchmark,
    asymmetric_bench,
    raw_bench,
    run_standard_benchmark,
    symmetric_bench,
    write_results_table,
)
from ..core.map_compress import compress_scene, model_overhead_bytes, plan_budget, save_selection
from ..core.models import RunManifest
from ..core.trainer import TrainConfig, finetune_lora, save_checkpoint, train

logger = logging.getLogger(__name__)

SHARED_TRAIN_FIELDS = ("seed",)


class CommandOutcome(NamedTuple):
    outputs: List[Path]
    inputs: Dict[str, Path]
    config: Dict[str, Any]


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of printing usage and exiting"""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _flag(name: str) -> str:
    return "--" + name.lower().replace("_", "-")


def _jsonable(value: Any) -> Any:
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (np.integer, np.floating)):
        return value.item()
    return value


class CommandLine:
    def __init__(self):
        self.parser = _Parser(prog="dpqed", description="Descriptor compression and scene map compression")
        self.common = _Parser(add_help=False)
        self.common.add_argument("--seed", type=int, default=None, help="Seed for every random draw")
        self.common.add_argument("--threads", type=int, default=None, help="Cap on numerical worker threads")
        self.common.add_argument("--config", type=Path, default=None, help="Flat key=value config file")
        self.common.add_argument("--out", type=Path, required=True, help="Output path")
        self.subparsers = self.parser.add_subparsers(dest="command", parser_class=_Parser)
        self.handlers: Dict[str, Callable[[argparse.Namespace], CommandOutcome]] = {}
        self._setup_handlers()

    def _add(self, name: str, handler: Callable, help_text: str) -> argparse.ArgumentParser:
        sub = self.subparsers.add_parser(name, parents=[self.common], help=help_text)
        self.handlers[name] = handler
        return sub

    def _add_train_flags(self, sub: argparse.ArgumentParser) -> None:
        for name in TrainConfig.model_fields:
            if name not in SHARED_TRAIN_FIELDS:
                sub.add_argument(_flag(name), dest=f"cfg_{name}", default=None, help=f"TrainConfig.{name}")

    def _setup_handlers(self):
        """Register every subcommand and its flags"""
        sub = self._add("synth", self.synth_command, "Generate a synthetic descriptor set or scene")
        sub.add_argument("--kind", choices=("descriptors", "scene"), default="descriptors")
        sub.add_argument("--clusters", type=int, default=32)
        sub.add_argument("--per-cluster", type=int, default=200)
        sub.add_argument("--dim", type=int, default=64)
        sub.add_argument("--spread", type=float, default=0.08)
        sub.add_argument("--points", type=int, default=1000)
        sub.add_argument("--images", type=int, default=100)

        sub = self._add("fit", self.fit_command, "Fit a PQ codebook with k-means")
        sub.add_argument("--input", type=Path, required=True)
        sub.add_argument("--m", type=int, default=4)
        sub.add_argument("--k", type=int, default=256)
        sub.add_argument("--iters", type=int, default=25)
        sub.add_argument("--allow-duplicates", action="store_true")

        sub = self._add("train", self.train_command, "Train codebook and decoder jointly")
        sub.add_argument("--input", type=Path, required=True)
        self._add_train_flags(sub)

        sub = self._add("finetune-lora", self.finetune_command, "Train LoRA factors on a frozen model")
        sub.add_argument("--input", type=Path, required=True)
        sub.add_argument("--codebook", type=Path, required=True)
        sub.add_argument("--decoder", type=Path, required=True)
        self._add_train_flags(sub)

        sub = self._add("quantize", self.quantize_command, "Encode descriptors into PQ codes")
        sub.add_argument("--input", type=Path, required=True)
        sub.add_argument("--codebook", type=Path, required=True)

        sub = self._add("dequantize", self.dequantize_command, "Decode PQ codes back into descriptors")
        sub.add_argument("--input", type=Path, required=True)
        sub.add_argument("--codebook", type=Path, required=True)
        sub.add_argument("--decoder", type=Path, default=None)
        sub.add_argument("--lora", type=Path, default=None)

        sub = self._add("compress-map", self.compress_map_command, "Select scene points under a ratio alpha")
        sub.add_argument("--input", type=Path, required=True)
        sub.add_argument("--alpha", type=float, required=True)
        sub.add_argument("--tau-qp", type=float, default=1.0)
        sub.add_argument("--sigma", type=float, default=None)
        sub.add_argument("--kernel", choices=("rbf", "distance"), default="rbf")
        sub.add_argument("--iters", type=int, default=500)
        sub.add_argument("--max-points", type=int, default=settings.MAX_MAP_POINTS)

        sub = self._add("budget", self.budget_command, "Derive alpha from a memory budget")
        sub.add_argument("--bytes", type=float, required=True)
        sub.add_argument("--n", type=int, required=True)
        sub.add_argument("--m", type=int, required=True)
        sub.add_argument("--k", type=int, required=True)
        sub.add_argument("--overhead", type=float, default=0.0)
        sub.add_argument("--codebook", type=Path, default=None)
        sub.add_argument("--decoder", type=Path, default=None)

        sub = self._add("eval", self.eval_command, "Benchmark recall and ranking preservation")
        sub.add_argument("--input", type=Path, default=None)
        sub.add_argument("--codebook", type=Path, default=None)
        sub.add_argument("--decoder", type=Path, default=None)
        sub.add_argument("--noise", type=float, default=0.05)
        sub.add_argument("--symmetric", action="store_true")
        sub.add_argument("--triplets", type=int, default=10_000)
        sub.add_argument("--standard", action="store_true", help="Run the fixed synthetic benchmark")

    # Helpers

    def _seed(self, args: argparse.Namespace) -> int:
        return settings.SEED if args.seed is None else args.seed

    def _config_path(self, args: argparse.Namespace) -> Optional[Path]:
        if args.config is not None:
            return args.config
        return settings.CONFIG_PATH if settings.CONFIG_PATH.exists() else None

    def _train_config(self, args: argparse.Namespace, **forced) -> TrainConfig:
        overrides = {
            name: getattr(args, f"cfg_{name}")
            for name in TrainConfig.model_fields
            if name not in SHARED_TRAIN_FIELDS
        }
        overrides.update(forced)
        return TrainConfig.from_file(self._config_path(args), seed=self._seed(args), **overrides)

    def _snapshot(self, args: argparse.Namespace, **extra) -> Dict[str, Any]:
        values = {
            key: _jsonable(value)
            for key, value in vars(args).items()
            if key != "command" and not key.startswith("cfg_") and value is not None
        }
        values.update(extra)
        return values

    # Commands

    def synth_command(self, args: argparse.Namespace) -> CommandOutcome:
        seed = self._seed(args)
        if args.kind == "descriptors":
            data = synth_descriptors(args.clusters, args.per_cluster, args.dim, args.spread, seed)
            save_descriptors(data, args.out)
        else:
            scene = synth_scene(args.points, args.clusters, seed, args.images)
            save_scene(scene, args.out)
        return CommandOutcome([args.out], {}, self._snapshot(args, seed=seed))

    def fit_command(self, args: argparse.Namespace) -> CommandOutcome:
        seed = self._seed(args)
        data = load_descriptors(args.input)
        codebook = fit_codebook(data, args.m, args.k, args.iters, seed, args.allow_duplicates)
        save_codebook(codebook, args.out)
        return CommandOutcome([args.out], {"input": args.input}, self._snapshot(args, seed=seed))

    def train_command(self, args: argparse.Namespace) -> CommandOutcome:
        cfg = self._train_config(args)
        data = load_descriptors(args.input)
        codebook, decoder, report = train(data, cfg)
        save_checkpoint(codebook, decoder, report, args.out)
        outputs = [Path(f"{args.out}{suffix}") for suffix in (".cbk", ".dec", ".rpt")]
        inputs = {"input": args.input}
        config_path = self._config_path(args)
        if config_path is not None:
            inputs["config"] = config_path
        return CommandOutcome(outputs, inputs, self._snapshot(args, train_config=cfg.model_dump()))

    def finetune_command(self, args: argparse.Namespace) -> CommandOutcome:
        cfg = self._train_config(args, lora_mode=True)
        data = load_descriptors(args.input)
        base = (load_codebook(args.codebook), load_decoder(args.decoder))
        adapted, report = finetune_lora(data, base, cfg)
        save_lora_delta(adapted, args.out)
        report_path = Path(f"{args.out}.rpt")
        write_atomic(report_path, report.to_text().encode("utf-8"))
        inputs = {"input": args.input, "codebook": args.codebook, "decoder": args.decoder}
        config_path = self._config_path(args)
        if config_path is not None:
            inputs["config"] = config_path
        return CommandOutcome([args.out, report_path], inputs, self._snapshot(args, train_config=cfg.model_dump()))

    def quantize_command(self, args: argparse.Namespace) -> CommandOutcome:
        codebook = load_codebook(args.codebook)
        data = load_descriptors(args.input, expected_dim=codebook.dim)
        save_index(pq_encode(codebook, data), args.out)
        return CommandOutcome(
            [args.out], {"input": args.input, "codebook": args.codebook}, self._snapshot(args)
        )

    def dequantize_command(self, args: argparse.Namespace) -> CommandOutcome:
        if args.lora is not None and args.decoder is None:
            raise UsageError("--lora needs --decoder")
        codebook = load_codebook(args.codebook)
        decoded = pq_decode(codebook, load_index(args.input))
        inputs = {"input": args.input, "codebook": args.codebook}
        if args.decoder is not None:
            decoder = load_decoder(args.decoder)
            inputs["decoder"] = args.decoder
            if args.lora is not None:
                decoder = load_lora_delta(decoder, args.lora)
                inputs["lora"] = args.lora
            decoded = decoded.with_descriptors(decoder_forward(decoded.descriptors, decoder))
        save_descriptors(decoded, args.out)
        return CommandOutcome([args.out], inputs, self._snapshot(args))

    def compress_map_command(self, args: argparse.Namespace) -> CommandOutcome:
        seed = self._seed(args)
        scene = load_scene(args.input)
        result = compress_scene(
            scene,
            alpha=args.alpha,
            tau_qp=args.tau_qp,
            sigma=args.sigma,
            kind=args.kernel,
            iters=args.iters,
            max_points=args.max_points,
            seed=seed,
        )
        outputs = list(save_selection(result, args.out))
        return CommandOutcome(outputs, {"input": args.input}, self._snapshot(args, seed=seed))

    def budget_command(self, args: argparse.Namespace) -> CommandOutcome:
        overhead = args.overhead
        inputs: Dict[str, Path] = {}
        if args.codebook is not None:
            codebook = load_codebook(args.codebook)
            decoder = load_decoder(args.decoder) if args.decoder is not None else None
            overhead += model_overhead_bytes(codebook, decoder)
            inputs["codebook"] = args.codebook
            if args.decoder is not None:
                inputs["decoder"] = args.decoder
        elif args.decoder is not None:
            raise UsageError("--decoder needs --codebook")
        plan = plan_budget(args.bytes, args.n, args.m, args.k, overhead)
        write_atomic(args.out, (json.dumps(plan.model_dump(), sort_keys=True, indent=2) + "\n").encode("utf-8"))
        print(f"alpha={plan.alpha:.9g} selected={plan.selected_count}")
        return CommandOutcome([args.out], inputs, self._snapshot(args))

    def eval_command(self, args: argparse.Namespace) -> CommandOutcome:
        inputs: Dict[str, Path] = {}
        if args.standard:
            bench = StandardBenchmark(n_triplets=args.triplets)
            seeds = bench.seeds if args.seed is None else (args.seed,)
            results = [row for seed in seeds for row in run_standard_benchmark(seed, bench)]
            snapshot = self._snapshot(args, benchmark=bench.model_dump())
        else:
            if args.input is None:
                raise UsageError("eval needs --input or --standard")
            seed = self._seed(args)
            data = load_descriptors(args.input)
            inputs["input"] = args.input
            results = [raw_bench(data, args.noise, seed, args.triplets)]
            if args.codebook is not None:
                codebook = load_codebook(args.codebook)
                decoder = load_decoder(args.decoder) if args.decoder is not None else None
                inputs["codebook"] = args.codebook
                if decoder is not None:
                    inputs["decoder"] = args.decoder
                results.append(asymmetric_bench(data, args.noise, codebook, decoder, seed, args.triplets))
                if args.symmetric:
                    results.append(symmetric_bench(data, args.noise, codebook, decoder, seed, args.triplets))
            elif args.decoder is not None:
                raise UsageError("--decoder needs --codebook")
            snapshot = self._snapshot(args, seed=seed)
        write_results_table(results, args.out)
        return CommandOutcome([args.out], inputs, snapshot)

    # Entry

    def _write_manifest(self, command: str, outcome: CommandOutcome, seed: int, wall_time: float) -> Path:
        missing = [str(path) for path in outcome.inputs.values() if not Path(path).exists()]
        if missing:
            raise InputError(f"Inputs vanished before hashing: {', '.join(missing)}")
        manifest = RunManifest(
            command=command,
            config=outcome.config,
            input_hashes={name: sha256_file(path) for name, path in sorted(outcome.inputs.items())},
            outputs=[str(path) for path in outcome.outputs],
            seed=seed,
            version=__version__,
            wall_time_s=wall_time if settings.RECORD_TIMING else None,
        )
        path = Path(f"{outcome.outputs[0]}.manifest.json")
        payload = json.dumps(manifest.model_dump(exclude_none=True), sort_keys=True, indent=2) + "\n"
        write_atomic(path, payload.encode("utf-8"))
        return path

    @staticmethod
    def _fail(e: DPQError) -> int:
        logger.error(f"{type(e).__name__}: {e.message}")
        print(e.one_line(), file=sys.stderr)
        return e.exit_code

    def run(self, argv: Optional[List[str]] = None) -> int:
        """Parse, dispatch, write the manifest; returns the process exit code"""
        try:
            args = self.parser.parse_args(argv)
            if args.command is None:
                raise UsageError("a subcommand is required")
            started = time.perf_counter()
            logger.info(f"Running {args.command}")
            outcome = self.handlers[args.command](args)
            manifest = self._write_manifest(
                args.command, outcome, self._seed(args), time.perf_counter() - started
            )
            logger.info(f"{args.command} done, manifest at {manifest}")
            return 0
        except ValidationError as e:
            return self._fail(InputError(validation_message(e)))
        except DPQError as e:
            return self._fail(e)
        except Exception as e:
            logger.error(f"Unexpected failure: {e}", exc_info=True)
            text = " ".join(str(e).split())
            print(f"error code=unexpected exit=1 message={text}", file=sys.stderr)
            return 1
