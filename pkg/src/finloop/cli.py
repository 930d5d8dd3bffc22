"""Command-line entry points: optimize, resume, evaluate, generate.

Exit status 0 on success, 1 on usage or configuration errors, 2 on a
runtime abort that leaves a resumable ledger behind. SIGINT and SIGTERM
flush the ledger before exiting with status 2.
"""

from __future__ import annotations

import argparse
import logging
import os
import random
import signal
import sys
from pathlib import Path

from .config import RunConfig, load_config, with_overrides
from .corpus import Example, estimate_label_prior, load_dataset, save_dataset
from .errors import ConfigError, EmptyCorpus, FinloopError, SchemaError
from .evaluator import accuracy, format_report, report_to_json
from .generator import REGIME_POOLS, GeneratorState, generate_accepted
from .ledger import LedgerWriter, logical_clock, read_ledger, wall_clock
from .optimizer import Budgets, Prompt, Runner, run_started_payload
from .presets import prompt_text
from .provider import (
    HttpProvider,
    MockProvider,
    RoleRouter,
    ScriptedBehavior,
    TokenBudget,
)
from .verifier import VerifierConfig, consensus

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _Interrupted(Exception):
    pass


def _signal_handler(signum, frame):
    raise _Interrupted(signal.Signals(signum).name)


class _ArgumentParser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; this tool reserves 2 for
    # runtime aborts, so remap.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_backends(config: RunConfig) -> tuple[RoleRouter, TokenBudget]:
    budget = TokenBudget(config.budgets.token_ceiling)
    providers = {}
    for name, backend in config.backends.items():
        if backend.kind == "mock":
            providers[name] = MockProvider(
                ScriptedBehavior.from_file(backend.script),
                budget=budget, backend_id=f"mock:{name}",
            )
        else:
            api_key = os.environ.get(backend.api_key_env, "")
            if not api_key:
                raise ConfigError(
                    f"backends.{name}: environment variable "
                    f"{backend.api_key_env} is not set"
                )
            providers[name] = HttpProvider(
                backend.endpoint, backend.model, api_key,
                max_attempts=backend.max_attempts, timeout=backend.timeout,
                budget=budget,
            )
    return RoleRouter(providers), budget


def _load_real_pools(config: RunConfig) -> dict[str, list[Example]]:
    pools = {}
    for subset, path in config.dataset_paths.items():
        pools[subset] = load_dataset(path, strict=False)
    return pools


def _pick_exemplars(config: RunConfig,
                    pools: dict[str, list[Example]]) -> tuple[Example, Example]:
    """One exemplar from each of the regime's two pools, seeded by the run."""
    rng = random.Random(f"{config.rng_seed}:exemplars")
    chosen: list[Example] = []
    for subset in REGIME_POOLS[config.regime]:
        pool = pools.get(subset) or []
        if pool:
            chosen.append(pool[rng.randrange(len(pool))])
    if len(chosen) < 2:
        flat = [ex for pool in pools.values() for ex in pool
                if all(ex.id != c.id for c in chosen)]
        while len(chosen) < 2 and flat:
            chosen.append(flat.pop(rng.randrange(len(flat))))
    if len(chosen) < 2:
        raise ConfigError("need at least two real examples to use as exemplars")
    return chosen[0], chosen[1]


def _start_payload(config: RunConfig, seed_text: str,
                   exemplars: tuple[Example, Example], prior) -> dict:
    return run_started_payload(
        budgets=Budgets(
            max_examples=config.budgets.max_examples,
            max_refinements=config.budgets.max_refinements,
            inner_cap=config.budgets.inner_cap,
            max_regenerations=config.budgets.max_regenerations,
        ),
        c_max=config.generator.c_max,
        regime=config.regime,
        rng_seed=config.rng_seed,
        kl_threshold=config.tolerances.kl_threshold,
        rel_tol=config.tolerances.rel_tol,
        abs_tol=config.tolerances.abs_tol,
        prompt_length_cap=config.prompt_length_cap,
        summary_mode=config.generator.summary_mode,
        verifier_perturbations=config.verifier.perturbations,
        verifier_reword=config.verifier.reword,
        verifier_allow_llm=config.verifier.allow_llm_numerical,
        seed_prompt_text=seed_text,
        exemplars=exemplars,
        prior=prior,
    )


def _clock_for(config: RunConfig):
    return logical_clock if config.all_mock() else wall_clock


def _print_final(runner: Runner, final: Prompt) -> None:
    print(f"final prompt v{final.version} "
          f"(selected from {len(runner.state.version_chain)} versions):")
    print("-" * 60)
    print(final.text)
    print("-" * 60)
    if runner.state.examples:
        report = accuracy(final, runner.state.examples, runner.provider,
                          rel_tol=runner.state.rel_tol, abs_tol=runner.state.abs_tol,
                          concurrency=runner.concurrency, cache=runner._cache)
        print(format_report(report))


def cmd_optimize(args: argparse.Namespace) -> int:
    try:
        config = with_overrides(
            load_config(args.config),
            max_difficulty=args.max_difficulty, t_max=args.t_max,
            mock=args.mock, ledger=args.ledger,
        )
        config.validate_paths()
        if not config.dataset_paths:
            raise ConfigError("optimize needs at least one [datasets] entry")
        ledger_path = Path(config.ledger_path)
        if ledger_path.exists() and ledger_path.stat().st_size > 0:
            raise ConfigError(
                f"ledger {ledger_path} already exists; resume it or pick a new path"
            )
        pools = _load_real_pools(config)
        real = [ex for pool in pools.values() for ex in pool]
        if not real:
            raise EmptyCorpus("the configured datasets contain no usable examples")
        prior = estimate_label_prior(real)
        exemplars = _pick_exemplars(config, pools)
        seed_text = prompt_text(config.seed_prompt)
        provider, _ = build_backends(config)
    except (ConfigError, SchemaError, EmptyCorpus, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    ledger = LedgerWriter(config.ledger_path, clock=_clock_for(config))
    runner = Runner(provider, ledger, concurrency=config.concurrency)
    signal.signal(signal.SIGINT, _signal_handler)
    signal.signal(signal.SIGTERM, _signal_handler)
    try:
        runner.start(_start_payload(config, seed_text, exemplars, prior))
        final = runner.run()
    except _Interrupted as exc:
        print(f"interrupted ({exc}); ledger flushed, resume with: "
              f"finloop resume --config {args.config}", file=sys.stderr)
        return EXIT_RUNTIME
    except FinloopError as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        print(f"ledger is resumable: {config.ledger_path}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        ledger.close()
    _print_final(runner, final)
    if args.out:
        Path(args.out).write_text(final.text + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_resume(args: argparse.Namespace) -> int:
    try:
        config = load_config(args.config)
        ledger_path = args.ledger or config.ledger_path
        events = read_ledger(ledger_path)
        if not events:
            raise ConfigError(f"ledger {ledger_path} is empty; nothing to resume")
        if events[-1].kind == "run_finished":
            print("run already complete; nothing to resume")
            return EXIT_OK
        config.validate_paths()
        provider, _ = build_backends(config)
    except (ConfigError, SchemaError, FinloopError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    ledger = LedgerWriter(ledger_path, clock=_clock_for(config),
                          next_sequence=len(events))
    runner = Runner(provider, ledger, concurrency=config.concurrency)
    signal.signal(signal.SIGINT, _signal_handler)
    signal.signal(signal.SIGTERM, _signal_handler)
    try:
        runner.resume(events)
        final = runner.run()
    except _Interrupted as exc:
        print(f"interrupted ({exc}); ledger flushed and still resumable",
              file=sys.stderr)
        return EXIT_RUNTIME
    except FinloopError as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        print(f"ledger is resumable: {ledger_path}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        ledger.close()
    _print_final(runner, final)
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    try:
        config = with_overrides(load_config(args.config), subset=args.subset,
                                mock=args.mock)
        config.validate_paths()
        examples = []
        for subset, path in config.dataset_paths.items():
            examples.extend(load_dataset(path, strict=False))
        if not examples:
            raise EmptyCorpus("no examples to evaluate")
        prompt = Prompt(version=0, text=prompt_text(args.prompt))
        provider, _ = build_backends(config)
    except (ConfigError, SchemaError, EmptyCorpus, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        report = accuracy(prompt, examples, provider,
                          rel_tol=config.tolerances.rel_tol,
                          abs_tol=config.tolerances.abs_tol,
                          concurrency=config.concurrency)
    except FinloopError as exc:
        print(f"evaluation aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(format_report(report))
    if args.out:
        Path(args.out).write_text(report_to_json(report) + "\n", encoding="utf-8")
        print(f"report written to {args.out}")
    return EXIT_OK


def cmd_generate(args: argparse.Namespace) -> int:
    try:
        config = with_overrides(load_config(args.config),
                                max_difficulty=args.max_difficulty, mock=args.mock)
        config.validate_paths()
        pools = _load_real_pools(config)
        real = [ex for pool in pools.values() for ex in pool]
        if not real:
            raise EmptyCorpus("the configured datasets contain no usable examples")
        provider, _ = build_backends(config)
        state = GeneratorState(
            exemplars=_pick_exemplars(config, pools),
            prior=estimate_label_prior(real),
            c_max=config.generator.c_max,
            regime=config.regime,
            kl_threshold=config.tolerances.kl_threshold,
            lambda_weight=config.generator.lambda_weight,
        )
    except (ConfigError, SchemaError, EmptyCorpus, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    verifier_config = _verifier_config(config)
    accepted: list[Example] = []
    try:
        for _ in range(args.count):
            example, state = generate_accepted(
                state, provider,
                lambda cand: consensus(cand, provider, verifier_config),
                config.budgets.max_regenerations,
                summary_mode=config.generator.summary_mode,
            )
            accepted.append(example)
            logger.info("accepted %s at difficulty %d", example.id, example.difficulty)
    except FinloopError as exc:
        print(f"generation aborted after {len(accepted)} examples: {exc}",
              file=sys.stderr)
        return EXIT_RUNTIME
    save_dataset(accepted, args.out)
    print(f"wrote {len(accepted)} synthetic examples to {args.out}")
    return EXIT_OK


def _verifier_config(config: RunConfig) -> VerifierConfig:
    return VerifierConfig(
        rel_tol=config.tolerances.rel_tol,
        abs_tol=config.tolerances.abs_tol,
        rng_seed=config.rng_seed,
        perturbation_count=config.verifier.perturbations,
        allow_llm=config.verifier.allow_llm_numerical,
        reword=config.verifier.reword,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="finloop",
                             description="Closed-loop prompt optimization for "
                                         "numeric financial QA")
    parser.add_argument("--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("optimize", help="run the full optimization loop")
    p.add_argument("--config", required=True)
    p.add_argument("--t-max", type=int, default=None, dest="t_max",
                   help="override the accepted-refinement budget")
    p.add_argument("--max-difficulty", type=int, default=None)
    p.add_argument("--mock", default=None, help="route every role to this mock script")
    p.add_argument("--ledger", default=None, help="override the ledger path")
    p.add_argument("--out", default=None, help="also write the final prompt here")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("resume", help="continue an interrupted run from its ledger")
    p.add_argument("--config", required=True)
    p.add_argument("--ledger", default=None, help="ledger path (default: from config)")
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("evaluate", help="score a prompt on the configured datasets")
    p.add_argument("--config", required=True)
    p.add_argument("--prompt", required=True,
                   help="preset name (base, cot, pot, refined_short, refined_long) "
                        "or a file path")
    p.add_argument("--subset", default=None, help="evaluate one subset only")
    p.add_argument("--mock", default=None)
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("generate", help="synthesize verified examples, no optimization")
    p.add_argument("--config", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-difficulty", type=int, default=None)
    p.add_argument("--mock", default=None)
    p.set_defaults(func=cmd_generate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
